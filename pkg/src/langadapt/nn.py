"""Dense-network substrate: fully connected stacks, backprop, RMSProp.

Everything is float64 numpy.  A net is a list of :class:`DenseLayer` plus a
dropout configuration; :func:`forward` returns the output together with a
:class:`GradTape` that :func:`backward` consumes.  Inputs may be a single
vector ``(in_dim,)`` or a batch ``(n, in_dim)``; outputs follow the input.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InputShapeError, NonFiniteGradientError, TapeMismatchError

CHECKPOINT_FORMAT = "langadapt.densenet"
CHECKPOINT_VERSION = 1


class Activation(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    LINEAR = "linear"
    SOFTMAX = "softmax"


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.SIGMOID:
        return _sigmoid(z)
    if kind is Activation.SOFTMAX:
        return _softmax(z)
    return z


def _activation_backward(kind: Activation, z, a, grad_a):
    if kind is Activation.RELU:
        return grad_a * (z > 0)
    if kind is Activation.SIGMOID:
        return grad_a * a * (1.0 - a)
    if kind is Activation.SOFTMAX:
        return a * (grad_a - np.sum(grad_a * a, axis=1, keepdims=True))
    return grad_a


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    biases: np.ndarray  # (out_dim,)
    activation: Activation = Activation.LINEAR

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.biases = np.array(self.biases, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2 or min(self.weights.shape) < 1:
            raise InputShapeError(f"weights must be a non-empty matrix, got shape {self.weights.shape}")
        if self.biases.shape != (self.weights.shape[0],):
            raise InputShapeError(
                f"biases shape {self.biases.shape} does not match weights shape {self.weights.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


class DenseNet:
    """A chain of dense layers with optional inverted dropout.

    ``dropout_positions`` holds indices of layers whose activation output is
    dropped during training.  ``version`` increments on every parameter
    update; tapes recorded before an update are rejected by :func:`backward`.
    """

    def __init__(
        self,
        layers: Sequence[DenseLayer],
        dropout_rate: float = 0.5,
        dropout_positions=(),
    ):
        layers = list(layers)
        if not layers:
            raise InputShapeError("a net needs at least one layer")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.out_dim != b.in_dim:
                raise InputShapeError(
                    f"layer {i} emits {a.out_dim} values but layer {i + 1} expects {b.in_dim}"
                )
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
        positions = frozenset(int(p) for p in dropout_positions)
        if any(p < 0 or p >= len(layers) for p in positions):
            raise ValueError(f"dropout positions {sorted(positions)} out of range for {len(layers)} layers")
        self.layers = layers
        self.dropout_rate = float(dropout_rate)
        self.dropout_positions = positions
        self.version = 0

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in the order ``[W0, b0, W1, b1, ...]`` (live views)."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.biases))
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "DenseNet":
        layers = [DenseLayer(l.weights.copy(), l.biases.copy(), l.activation) for l in self.layers]
        return DenseNet(layers, self.dropout_rate, self.dropout_positions)

    def fingerprint(self) -> str:
        """SHA-256 over architecture and exact parameter bytes."""
        h = hashlib.sha256()
        h.update(repr((self.dropout_rate, sorted(self.dropout_positions))).encode())
        for layer in self.layers:
            h.update(layer.activation.value.encode())
            h.update(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(layer.biases, dtype="<f8").tobytes())
        return h.hexdigest()

    def step(self, grads: "Gradients", state: "RmsPropState") -> None:
        """Apply one RMSProp update in place."""
        rmsprop_step(self.parameters(), grads.as_list(), state)
        self.version += 1

    def __repr__(self) -> str:
        dims = [self.in_dim] + [l.out_dim for l in self.layers]
        acts = ",".join(l.activation.value for l in self.layers)
        return f"DenseNet(dims={dims}, activations=[{acts}], dropout={self.dropout_rate})"


def glorot_layer(in_dim: int, out_dim: int, activation, rng: np.random.Generator) -> DenseLayer:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
    return DenseLayer(w, np.zeros(out_dim), Activation(activation))


def build_net(
    dims: Sequence[int],
    activations: Sequence,
    rng: np.random.Generator,
    dropout_rate: float = 0.5,
    dropout_positions=(),
) -> DenseNet:
    """Glorot-uniform initialised net with layer widths ``dims``.

    ``dims`` includes the input width, so ``len(activations) == len(dims) - 1``.
    """
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = [glorot_layer(i, o, a, rng) for i, o, a in zip(dims[:-1], dims[1:], activations)]
    return DenseNet(layers, dropout_rate, dropout_positions)


@dataclass
class GradTape:
    net_id: int
    version: int
    vector_input: bool
    inputs: list = field(default_factory=list)  # what entered each layer
    pre: list = field(default_factory=list)  # pre-activations
    post: list = field(default_factory=list)  # activations, before dropout
    masks: list = field(default_factory=list)  # scaled keep-masks or None
    training: bool = False


@dataclass
class Gradients:
    weights: list
    biases: list
    input: np.ndarray

    def as_list(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def forward(
    net: DenseNet,
    x,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, GradTape]:
    x = np.asarray(x, dtype=np.float64)
    vector = x.ndim == 1
    if vector:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise InputShapeError(f"expected input width {net.in_dim}, got array of shape {x.shape}")
    use_dropout = training and net.dropout_rate > 0.0 and bool(net.dropout_positions)
    if use_dropout and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    keep = 1.0 - net.dropout_rate

    tape = GradTape(id(net), net.version, vector, training=training)
    h = x
    for i, layer in enumerate(net.layers):
        tape.inputs.append(h)
        z = h @ layer.weights.T + layer.biases
        a = _activate(layer.activation, z)
        tape.pre.append(z)
        tape.post.append(a)
        if use_dropout and i in net.dropout_positions:
            mask = (rng.random(a.shape) < keep) / keep
            tape.masks.append(mask)
            h = a * mask
        else:
            tape.masks.append(None)
            h = a
    return (h[0] if vector else h), tape


def backward(net: DenseNet, tape: GradTape, output_grad) -> Gradients:
    """Gradients of a scalar loss given ``output_grad`` = dloss/doutput.

    Parameter gradients are summed over the batch rows; the caller's loss is
    responsible for any averaging.
    """
    if tape.net_id != id(net) or len(tape.pre) != len(net.layers):
        raise TapeMismatchError("tape was recorded on a different net")
    if tape.version != net.version:
        raise TapeMismatchError(
            f"stale tape: recorded at version {tape.version}, net is at version {net.version}"
        )
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.vector_input:
        g = g[None, :]
    if g.shape != tape.post[-1].shape:
        raise InputShapeError(f"output_grad shape {g.shape} does not match output {tape.post[-1].shape}")

    dws: list = [None] * len(net.layers)
    dbs: list = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if tape.masks[i] is not None:
            g = g * tape.masks[i]
        dz = _activation_backward(layer.activation, tape.pre[i], tape.post[i], g)
        dws[i] = dz.T @ tape.inputs[i]
        dbs[i] = dz.sum(axis=0)
        g = dz @ layer.weights
    return Gradients(dws, dbs, g[0] if tape.vector_input else g)


@dataclass
class RmsPropState:
    """Optimizer hyperparameters plus the running mean of squared gradients."""

    learning_rate: float = 1e-4
    decay: float = 0.9
    epsilon: float = 1e-8
    cache: list | None = None

    def __post_init__(self):
        # lr == 0 is allowed: it freezes parameters while still tracking the cache
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {self.decay}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")

    def fresh(self) -> "RmsPropState":
        """Same hyperparameters, empty cache."""
        return RmsPropState(self.learning_rate, self.decay, self.epsilon)


def rmsprop_step(params: list[np.ndarray], grads: list[np.ndarray], state: RmsPropState):
    """One in-place RMSProp update.

    cache <- decay * cache + (1 - decay) * g**2
    param <- param - lr * g / (sqrt(cache) + eps)

    Non-finite gradients are rejected before anything is touched.
    """
    if len(params) != len(grads):
        raise InputShapeError(f"{len(params)} parameter arrays but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise InputShapeError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        # one reduction first; the elementwise check only runs when it trips
        if not np.isfinite(np.sum(g)) and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; update rejected")
    if state.cache is None:
        state.cache = [np.zeros_like(p) for p in params]
    elif len(state.cache) != len(params) or any(c.shape != p.shape for c, p in zip(state.cache, params)):
        raise InputShapeError("optimizer cache does not match parameter shapes")

    d = state.decay
    for p, g, c in zip(params, grads, state.cache):
        tmp = np.square(g)
        tmp *= 1.0 - d
        c *= d
        c += tmp
        if state.learning_rate:
            np.sqrt(c, out=tmp)
            tmp += state.epsilon
            np.divide(g, tmp, out=tmp)
            tmp *= state.learning_rate
            p -= tmp
    return params, state


# -- losses used by grad_check and tests ------------------------------------------

LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def squared_error(target) -> LossFn:
    """0.5 * sum of squared differences to ``target``."""
    target = np.asarray(target, dtype=np.float64)

    def loss(out):
        diff = out - target
        # numpy scalar, so an extended-precision ``out`` keeps its precision
        return 0.5 * np.sum(diff * diff), diff

    return loss


def weighted_sum(weights) -> LossFn:
    """Linear functional ``sum(weights * out)``; handy for probing single outputs."""
    weights = np.asarray(weights, dtype=np.float64)

    def loss(out):
        return np.sum(weights * out), np.broadcast_to(weights, out.shape).copy()

    return loss


def _chain_forward(nets, x):
    tapes = []
    h = x
    for net in nets:
        h, tape = forward(net, h, training=False)
        tapes.append(tape)
    return h, tapes


def grad_check(net, loss: LossFn, x, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``net`` may be a single :class:`DenseNet` or a sequence applied in order
    (e.g. encoder then discriminator); every parameter of every net in the
    chain is probed.  Dropout is off throughout.

    Backprop runs in float64 as usual.  The finite differences are evaluated
    in extended precision (``np.longdouble``) so that their rounding error,
    about ``eps * |loss| / h``, stays well below small gradients; ``loss``
    should therefore not cast its value to a Python float.
    """
    nets = [net] if isinstance(net, DenseNet) else list(net)
    x = np.asarray(x, dtype=np.float64)

    out, tapes = _chain_forward(nets, x)
    _, g = loss(out)
    analytic = []
    for n, tape in zip(reversed(nets), reversed(tapes)):
        grads = backward(n, tape, g)
        analytic.append(grads.as_list())
        g = grads.input
    analytic.reverse()
    flat_grads = [ga for n_grads in analytic for ga in n_grads]

    ext = np.longdouble
    layers = [(l.weights.astype(ext), l.biases.astype(ext), l.activation) for n in nets for l in n.layers]
    vector = x.ndim == 1
    hs, zs = [(x[None, :] if vector else x).astype(ext)], []
    for w, b, act in layers:
        zs.append(np.einsum("bj,kj->bk", hs[-1], w) + b)
        hs.append(_activate(act, zs[-1]))

    def losses(layer: int, z):
        # z: (perturbations, batch, units) pre-activations of ``layer``
        a = _activate(layers[layer][2], z)
        for w, b, act in layers[layer + 1:]:
            a = _activate(act, np.einsum("pbj,kj->pbk", a, w) + b)
        return np.array([ext(loss(o[0] if vector else o)[0]) for o in a])

    h_ext = ext(h)
    worst = 0.0
    for l, (w, _, _) in enumerate(layers):
        n_out, n_in = w.shape
        gw, gb = flat_grads[2 * l], flat_grads[2 * l + 1]
        # row k < n_in perturbs w[i, k]; row n_in perturbs b[i]
        shift = np.vstack([hs[l].T, np.ones((1, len(hs[l])), dtype=ext)]) * h_ext
        for i in range(n_out):
            z = np.repeat(zs[l][None], 2 * (n_in + 1), axis=0)
            z[: n_in + 1, :, i] += shift
            z[n_in + 1:, :, i] -= shift
            f = losses(l, z)
            numeric = ((f[: n_in + 1] - f[n_in + 1:]) / (2 * h_ext)).astype(np.float64)
            ga = np.concatenate([gw[i], gb[i: i + 1]])
            denom = np.maximum(np.maximum(np.abs(ga), np.abs(numeric)), 1e-12)
            worst = max(worst, float(np.max(np.abs(ga - numeric) / denom)))
    return worst


# -- checkpoints -------------------------------------------------------------------

def net_to_dict(net: DenseNet) -> dict:
    return {
        "dropout_rate": net.dropout_rate,
        "dropout_positions": sorted(net.dropout_positions),
        "layers": [
            {
                "in_dim": layer.in_dim,
                "out_dim": layer.out_dim,
                "activation": layer.activation.value,
                "weights": layer.weights.reshape(-1).tolist(),
                "biases": layer.biases.tolist(),
            }
            for layer in net.layers
        ],
    }


def net_from_dict(d: dict) -> DenseNet:
    layers = []
    for i, spec in enumerate(d["layers"]):
        w = np.asarray(spec["weights"], dtype=np.float64)
        if w.size != spec["out_dim"] * spec["in_dim"]:
            raise InputShapeError(f"layer {i}: weight count {w.size} does not match declared dims")
        layers.append(
            DenseLayer(w.reshape(spec["out_dim"], spec["in_dim"]), spec["biases"], spec["activation"])
        )
    return DenseNet(layers, d["dropout_rate"], d["dropout_positions"])


def save_net(net: DenseNet, path) -> None:
    record = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **net_to_dict(net)}
    Path(path).write_text(json.dumps(record, indent=1) + "\n", encoding="utf-8")


def load_net(path) -> DenseNet:
    record = json.loads(Path(path).read_text(encoding="utf-8"))
    if record.get("format") != CHECKPOINT_FORMAT:
        raise InputShapeError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise InputShapeError(f"{path}: unsupported checkpoint version {record.get('version')}")
    return net_from_dict(record)
