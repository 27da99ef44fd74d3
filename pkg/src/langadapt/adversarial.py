"""Discriminator and the adversarial loop that adapts the source encoder.

The discriminator outputs the probability that a latent code came from the
target domain ("real").  It is a single sigmoid unit; a two-way softmax over
logits ``(0, z)`` gives exactly the same probability, so this is the
two-class softmax head written in its scalar form.

Only the source encoder and the discriminator are ever updated here.  The
target encoder runs in inference mode and its codes are computed once.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .autoencoder import Autoencoder
from .errors import EmptyBatchError, InputShapeError, NonFiniteLossError
from .nn import Activation, DenseNet, RmsPropState, backward, build_net, forward

PROB_FLOOR = 1e-7


@dataclass
class Discriminator:
    net: DenseNet

    @property
    def latent_dim(self) -> int:
        return self.net.in_dim

    def probabilities(self, latents) -> np.ndarray:
        """Inference-mode P(target) per row."""
        p, _ = forward(self.net, np.atleast_2d(latents), training=False)
        return p[:, 0]


def build_discriminator(
    latent_dim: int,
    rng: np.random.Generator,
    hidden: tuple = (512, 256),
    dropout_rate: float = 0.5,
) -> Discriminator:
    dims = [latent_dim, *hidden, 1]
    acts = [Activation.RELU] * len(hidden) + [Activation.SIGMOID]
    return Discriminator(build_net(dims, acts, rng, dropout_rate=dropout_rate, dropout_positions={0}))


def _clamp(p) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)


def discriminator_loss(d_on_source, d_on_target) -> float:
    """Binary cross-entropy with target codes labelled 1 and source codes 0.

    ``-[mean log D(f_t) + mean log(1 - D(f_s))]``; zero for a perfect
    discriminator, ``2 ln 2`` when it outputs 0.5 everywhere.
    """
    ps, pt = _clamp(d_on_source), _clamp(d_on_target)
    if ps.size == 0 or pt.size == 0:
        raise EmptyBatchError("discriminator loss needs non-empty source and target batches")
    return float(-(np.mean(np.log(pt)) + np.mean(np.log1p(-ps))))


def discriminator_loss_grads(d_on_source, d_on_target) -> tuple[np.ndarray, np.ndarray]:
    """d(discriminator_loss)/dp for the source and target probabilities."""
    ps, pt = _clamp(d_on_source), _clamp(d_on_target)
    return 1.0 / (ps.size * (1.0 - ps)), -1.0 / (pt.size * pt)


def adversarial_loss(d_on_source, non_saturating: bool = False) -> float:
    """Loss the source encoder minimises.

    Default is ``mean log(1 - D(f_s))`` (always <= 0).  The non-saturating
    variant ``-mean log D(f_s)`` keeps useful gradients when the
    discriminator is confident.
    """
    ps = _clamp(d_on_source)
    if ps.size == 0:
        raise EmptyBatchError("adversarial loss of an empty batch")
    if non_saturating:
        return float(-np.mean(np.log(ps)))
    return float(np.mean(np.log1p(-ps)))


def adversarial_loss_grad(d_on_source, non_saturating: bool = False) -> np.ndarray:
    ps = _clamp(d_on_source)
    if non_saturating:
        return -1.0 / (ps.size * ps)
    return -1.0 / (ps.size * (1.0 - ps))


@dataclass
class AdaptConfig:
    epochs: int = 50
    batch_size: int = 32
    d_steps_per_g_step: int = 1
    warmup_steps: int = 50  # discriminator-only updates before the first encoder update
    optimizer: RmsPropState = field(default_factory=RmsPropState)
    encoder_optimizer: RmsPropState | None = None  # None: same settings as the discriminator
    non_saturating: bool = False
    probe_size: int = 64  # per domain, held out from training
    discriminator_hidden: tuple = (512, 256)
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = RmsPropState(**self.optimizer)
        if isinstance(self.encoder_optimizer, dict):
            self.encoder_optimizer = RmsPropState(**self.encoder_optimizer)
        self.discriminator_hidden = tuple(self.discriminator_hidden)
        if self.epochs < 0 or self.warmup_steps < 0:
            raise ValueError("epochs and warmup_steps must be >= 0")
        if self.batch_size < 1 or self.d_steps_per_g_step < 1 or self.probe_size < 1:
            raise ValueError("batch_size, d_steps_per_g_step and probe_size must be positive")


@dataclass
class AdaptHistory:
    epochs: list = field(default_factory=list)
    d_loss: list = field(default_factory=list)
    adv_loss: list = field(default_factory=list)
    probe_accuracy: list = field(default_factory=list)
    pre_probe_accuracy: float = float("nan")
    warnings: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "d_loss", "adv_loss", "probe_accuracy"])
        for row in zip(self.epochs, self.d_loss, self.adv_loss, self.probe_accuracy):
            w.writerow([row[0], *(f"{v:.8f}" for v in row[1:])])
        return buf.getvalue()


@dataclass
class AdaptResult:
    source_ae: Autoencoder  # adapted encoder with the original (copied) decoder
    discriminator: Discriminator
    history: AdaptHistory


def probe_accuracy(disc: Discriminator, source_codes, target_codes) -> float:
    """Balanced accuracy of the discriminator on held-out codes."""
    hit_t = np.mean(disc.probabilities(target_codes) > 0.5)
    hit_s = np.mean(disc.probabilities(source_codes) <= 0.5)
    return float(0.5 * (hit_t + hit_s))


def _split_probe(n: int, probe_size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    k = max(1, min(probe_size, n // 5))
    order = rng.permutation(n)
    return order[k:], order[:k]


def adapt_source_encoder(
    source_ae: Autoencoder,
    target_ae: Autoencoder,
    source_x,
    target_x,
    cfg: AdaptConfig,
) -> AdaptResult:
    """Alternate discriminator and source-encoder updates.

    Per iteration the discriminator takes ``d_steps_per_g_step`` steps on
    frozen codes, then the source encoder takes one step against the frozen
    discriminator.  Networks being updated run with dropout; frozen ones run
    in inference mode.  Inputs are never mutated.
    """
    source_x = np.asarray(source_x, dtype=np.float64)
    target_x = np.asarray(target_x, dtype=np.float64)
    if source_ae.latent_dim != target_ae.latent_dim:
        raise InputShapeError("source and target autoencoders must share the latent width")
    if source_x.ndim != 2 or target_x.ndim != 2 or min(len(source_x), len(target_x)) < 2:
        raise EmptyBatchError("adaptation needs at least two source and two target samples")

    rng = np.random.default_rng(cfg.seed)
    enc = source_ae.encoder.copy()
    disc = build_discriminator(source_ae.latent_dim, rng, cfg.discriminator_hidden, cfg.dropout_rate)
    d_opt = cfg.optimizer.fresh()
    g_opt = (cfg.encoder_optimizer or cfg.optimizer).fresh()

    s_train, s_probe = _split_probe(len(source_x), cfg.probe_size, rng)
    t_train, t_probe = _split_probe(len(target_x), cfg.probe_size, rng)
    # the target encoder is frozen, so its codes never change
    target_codes, _ = forward(target_ae.encoder, target_x, training=False)
    t_codes_train, t_codes_probe = target_codes[t_train], target_codes[t_probe]
    xs_train, xs_probe = source_x[s_train], source_x[s_probe]
    bs = cfg.batch_size
    history = AdaptHistory()

    def d_step(epoch, b):
        xs = xs_train[rng.integers(0, len(xs_train), size=min(bs, len(xs_train)))]
        ft = t_codes_train[rng.integers(0, len(t_codes_train), size=min(bs, len(t_codes_train)))]
        fs, _ = forward(enc, xs, training=False)
        p, tape = forward(disc.net, np.vstack([fs, ft]), training=True, rng=rng)
        ps, pt = p[: len(fs), 0], p[len(fs):, 0]
        loss = discriminator_loss(ps, pt)
        if not math.isfinite(loss):
            raise NonFiniteLossError(f"discriminator loss {loss} at epoch {epoch}, batch {b}", epoch, b)
        gs, gt = discriminator_loss_grads(ps, pt)
        grads = backward(disc.net, tape, np.concatenate([gs, gt])[:, None])
        disc.net.step(grads, d_opt)
        return loss

    for w in range(cfg.warmup_steps):
        d_step(-1, w)
    history.pre_probe_accuracy = probe_accuracy(disc, forward(enc, xs_probe)[0], t_codes_probe)

    for epoch in range(cfg.epochs):
        d_losses, g_losses = [], []
        order = rng.permutation(len(xs_train))
        for b, start in enumerate(range(0, len(order), bs)):
            for _ in range(cfg.d_steps_per_g_step):
                d_losses.append(d_step(epoch, b))
            xs = xs_train[order[start:start + bs]]
            fs, enc_tape = forward(enc, xs, training=True, rng=rng)
            p, d_tape = forward(disc.net, fs, training=False)
            g_loss = adversarial_loss(p[:, 0], cfg.non_saturating)
            if not math.isfinite(g_loss):
                raise NonFiniteLossError(f"adversarial loss {g_loss} at epoch {epoch}, batch {b}", epoch, b)
            dp = adversarial_loss_grad(p[:, 0], cfg.non_saturating)[:, None]
            through_d = backward(disc.net, d_tape, dp)
            enc.step(backward(enc, enc_tape, through_d.input), g_opt)
            g_losses.append(g_loss)
        history.epochs.append(epoch + 1)
        history.d_loss.append(float(np.mean(d_losses)))
        history.adv_loss.append(float(np.mean(g_losses)))
        history.probe_accuracy.append(probe_accuracy(disc, forward(enc, xs_probe)[0], t_codes_probe))

    pinned = sum(acc == 1.0 for acc in history.probe_accuracy)
    if history.probe_accuracy and pinned > 0.25 * len(history.probe_accuracy):
        history.warnings.append(
            f"possible collapse: discriminator probe accuracy was 1.0 in {pinned} of "
            f"{len(history.probe_accuracy)} epochs"
        )
    adapted = Autoencoder(enc, source_ae.decoder.copy(), source_ae.domain)
    return AdaptResult(adapted, disc, history)
