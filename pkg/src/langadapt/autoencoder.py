"""Source/target autoencoders trained on reconstruction error.

The encoder is ``feature_dim -> hidden_dim -> latent_dim`` (ReLU, then a
linear code) with dropout between the two layers; the decoder mirrors it
without dropout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatchError, InputShapeError, NonFiniteLossError
from .nn import Activation, DenseNet, RmsPropState, backward, build_net, forward

SOURCE = "source"
TARGET = "target"


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-4
    decay: float = 0.9
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def optimizer(self) -> RmsPropState:
        return RmsPropState(self.learning_rate, self.decay, self.epsilon)


@dataclass
class Autoencoder:
    encoder: DenseNet
    decoder: DenseNet
    domain: str = SOURCE

    def __post_init__(self):
        if self.encoder.out_dim != self.decoder.in_dim:
            raise InputShapeError(
                f"encoder emits {self.encoder.out_dim} values, decoder expects {self.decoder.in_dim}"
            )
        if self.decoder.out_dim != self.encoder.in_dim:
            raise InputShapeError("decoder must reconstruct the encoder's input width")

    @property
    def feature_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim

    def copy(self) -> "Autoencoder":
        return Autoencoder(self.encoder.copy(), self.decoder.copy(), self.domain)


@dataclass(frozen=True)
class LatentCode:
    values: np.ndarray
    domain: str


def build_autoencoder(
    rng: np.random.Generator,
    feature_dim: int = 88,
    latent_dim: int = 512,
    hidden_dim: int = 256,
    dropout_rate: float = 0.5,
    domain: str = SOURCE,
) -> Autoencoder:
    encoder = build_net(
        [feature_dim, hidden_dim, latent_dim],
        [Activation.RELU, Activation.LINEAR],
        rng,
        dropout_rate=dropout_rate,
        dropout_positions={0},
    )
    decoder = build_net(
        [latent_dim, hidden_dim, feature_dim],
        [Activation.RELU, Activation.LINEAR],
        rng,
        dropout_rate=0.0,
    )
    return Autoencoder(encoder, decoder, domain)


def _as_batch(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise InputShapeError(f"expected feature width {dim}, got array of shape {x.shape}")
    return x


def encode(ae: Autoencoder, x) -> LatentCode:
    """Inference-mode encoding (no dropout); keeps vector/batch shape."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != ae.feature_dim:
        raise InputShapeError(f"expected feature width {ae.feature_dim}, got array of shape {x.shape}")
    z, _ = forward(ae.encoder, x, training=False)
    return LatentCode(z, ae.domain)


def decode(ae: Autoencoder, z) -> np.ndarray:
    out, _ = forward(ae.decoder, z, training=False)
    return out


def reconstruction_loss(ae: Autoencoder, batch) -> float:
    """Mean over the batch of the per-sample mean squared error."""
    x = np.asarray(batch, dtype=np.float64)
    if x.size == 0:
        raise EmptyBatchError("reconstruction loss of an empty batch")
    x = _as_batch(x, ae.feature_dim)
    recon = decode(ae, encode(ae, x).values)
    return float(np.mean((recon - x) ** 2))


@dataclass
class TrainResult:
    autoencoder: Autoencoder
    initial_loss: float
    history: list = field(default_factory=list)  # per-epoch training-set loss


def train_autoencoder(
    ae: Autoencoder,
    data,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> TrainResult:
    """Minibatch RMSProp on mean squared reconstruction error.

    Returns a trained copy; ``ae`` itself is left untouched.  ``history``
    holds the inference-mode loss over all of ``data`` after each epoch.
    """
    x = _as_batch(data, ae.feature_dim)
    if len(x) < cfg.batch_size:
        raise EmptyBatchError(f"{len(x)} samples is fewer than one batch of {cfg.batch_size}")
    ae = ae.copy()
    enc_opt, dec_opt = cfg.optimizer(), cfg.optimizer()
    n, d = x.shape

    result = TrainResult(ae, reconstruction_loss(ae, x))
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            xb = x[order[start:start + cfg.batch_size]]
            z, enc_tape = forward(ae.encoder, xb, training=True, rng=rng)
            recon, dec_tape = forward(ae.decoder, z, training=True, rng=rng)
            diff = recon - xb
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    f"reconstruction loss became {loss} at epoch {epoch}, batch {b}", epoch, b
                )
            g_dec = backward(ae.decoder, dec_tape, 2.0 * diff / diff.size)
            g_enc = backward(ae.encoder, enc_tape, g_dec.input)
            ae.decoder.step(g_dec, dec_opt)
            ae.encoder.step(g_enc, enc_opt)
        epoch_loss = reconstruction_loss(ae, x)
        if not np.isfinite(epoch_loss):
            raise NonFiniteLossError(f"reconstruction loss became {epoch_loss} after epoch {epoch}", epoch)
        result.history.append(epoch_loss)
    return result
