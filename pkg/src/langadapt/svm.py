"""Binary RBF-kernel SVM: SMO training, Platt calibration, posteriors.

Labels are +1 (positive valence) and -1 (negative valence).  Posteriors use
Platt's form ``p(+1 | f) = 1 / (1 + exp(a*f + b))`` with ``a <= 0``, so a
larger decision value never lowers the probability of the positive class.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    CalibrationError,
    DegenerateDataError,
    InputShapeError,
    UncalibratedModelError,
)

log = logging.getLogger(__name__)

SVM_FORMAT = "langadapt.svm"
SVM_VERSION = 1


def rbf_kernel(x, y, gamma: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InputShapeError(f"kernel arguments differ in shape: {x.shape} vs {y.shape}")
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    d = x - y
    return float(np.exp(-gamma * np.dot(d, d)))


def rbf_gram(a, b, gamma: float) -> np.ndarray:
    """Kernel matrix between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise InputShapeError(f"kernel arguments differ in width: {a.shape[1]} vs {b.shape[1]}")
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


@dataclass
class SvmTrainConfig:
    c_reg: float = 1.0
    gamma: float | str = "auto"  # "auto" -> 1 / n_features
    kkt_tolerance: float = 1e-3
    max_passes: int = 200  # iteration cap is max_passes * n_samples

    def __post_init__(self):
        if self.c_reg <= 0 or self.kkt_tolerance <= 0 or self.max_passes < 1:
            raise ValueError("c_reg, kkt_tolerance and max_passes must be positive")
        if self.gamma != "auto" and float(self.gamma) <= 0:
            raise ValueError(f"gamma must be > 0 or 'auto', got {self.gamma}")

    def resolve_gamma(self, n_features: int) -> float:
        return 1.0 / n_features if self.gamma == "auto" else float(self.gamma)


@dataclass
class SvmModel:
    support_vectors: np.ndarray
    dual_coefs: np.ndarray  # alpha_i * y_i
    bias: float
    gamma: float
    c_reg: float
    support_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    platt_a: float | None = None
    platt_b: float | None = None
    converged: bool = True

    @property
    def calibrated(self) -> bool:
        return self.platt_a is not None and self.platt_b is not None


def decision_function(model: SvmModel, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    vector = x.ndim == 1
    if x.shape[-1] != model.support_vectors.shape[1]:
        raise InputShapeError(
            f"expected {model.support_vectors.shape[1]} features, got array of shape {x.shape}"
        )
    if len(model.support_vectors) == 0:
        f = np.full(len(np.atleast_2d(x)), model.bias)
    else:
        f = rbf_gram(np.atleast_2d(x), model.support_vectors, model.gamma) @ model.dual_coefs + model.bias
    return float(f[0]) if vector else f


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DegenerateDataError("labels must be +1 or -1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise DegenerateDataError("training data contains a single class")
    return y


def train_smo(x, y, cfg: SvmTrainConfig | None = None) -> SvmModel:
    """Solve the C-SVM dual with SMO and maximal-violating-pair selection.

    Minimises ``0.5 a'Qa - sum(a)`` subject to ``0 <= a <= C`` and
    ``y'a = 0`` where ``Q_ij = y_i y_j K(x_i, x_j)``.  Stops once the
    largest KKT violation ``max_up(-yG) - min_low(-yG)`` drops below
    ``kkt_tolerance``.
    """
    cfg = cfg or SvmTrainConfig()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise DegenerateDataError("need at least two training vectors")
    y = _check_labels(y)
    if len(y) != len(x):
        raise InputShapeError(f"{len(x)} vectors but {len(y)} labels")

    n = len(x)
    c = cfg.c_reg
    gamma = cfg.resolve_gamma(x.shape[1])
    k = rbf_gram(x, x, gamma)
    diag = np.diag(k).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)  # G = Q alpha - 1
    pos = y > 0
    tol = cfg.kkt_tolerance
    max_iter = cfg.max_passes * n
    converged = False

    for _ in range(max_iter):
        below_c = alpha < c
        above_0 = alpha > 0
        up = (pos & below_c) | (~pos & above_0)
        low = (pos & above_0) | (~pos & below_c)
        v = -y * grad
        i = int(np.argmax(np.where(up, v, -np.inf)))
        j = int(np.argmin(np.where(low, v, np.inf)))
        gap = v[i] - v[j]
        if gap < tol:
            converged = True
            break
        eta = max(diag[i] + diag[j] - 2.0 * k[i, j], 1e-12)
        t = gap / eta
        # move alpha_i by y_i t and alpha_j by -y_j t, staying in the box
        t = min(t, c - alpha[i] if y[i] > 0 else alpha[i])
        t = min(t, alpha[j] if y[j] > 0 else c - alpha[j])
        alpha[i] += y[i] * t
        alpha[j] -= y[j] * t
        # snap to the bounds so at-bound tests stay exact
        for idx in (i, j):
            if alpha[idx] < 1e-14 * c:
                alpha[idx] = 0.0
            elif alpha[idx] > c * (1.0 - 1e-14):
                alpha[idx] = c
        grad += t * y * (k[:, i] - k[:, j])
    if not converged:
        log.warning("SMO hit the iteration cap (%d) before reaching tolerance %g", max_iter, tol)

    bias = -_rho(alpha, grad, y, c)
    sv = np.flatnonzero(alpha > 0)
    return SvmModel(
        support_vectors=x[sv].copy(),
        dual_coefs=alpha[sv] * y[sv],
        bias=bias,
        gamma=gamma,
        c_reg=c,
        support_indices=sv,
        converged=converged,
    )


def _rho(alpha, grad, y, c) -> float:
    yg = y * grad
    free = (alpha > 0) & (alpha < c)
    if np.any(free):
        return float(np.mean(yg[free]))
    at_upper = alpha >= c
    # points whose yG bounds rho from above / below
    ub_mask = (at_upper & (y < 0)) | (~at_upper & (y > 0))
    lb_mask = (at_upper & (y > 0)) | (~at_upper & (y < 0))
    ub = np.min(yg[ub_mask]) if np.any(ub_mask) else np.inf
    lb = np.max(yg[lb_mask]) if np.any(lb_mask) else -np.inf
    return float(0.5 * (ub + lb))


def training_alphas(model: SvmModel, n_train: int) -> np.ndarray:
    alpha = np.zeros(n_train)
    alpha[model.support_indices] = np.abs(model.dual_coefs)
    return alpha


def kkt_violation(model: SvmModel, x, y) -> float:
    """Largest KKT violation over the training set, in units of ``y*f``.

    alpha = 0     requires y f >= 1
    0 < alpha < C requires y f == 1
    alpha = C     requires y f <= 1
    """
    y = np.asarray(y, dtype=np.float64)
    alpha = training_alphas(model, len(y))
    margin = y * decision_function(model, x) - 1.0
    zero = alpha <= 0
    bound = alpha >= model.c_reg
    free = ~zero & ~bound
    worst = 0.0
    if np.any(zero):
        worst = max(worst, float(np.max(-margin[zero])))
    if np.any(free):
        worst = max(worst, float(np.max(np.abs(margin[free]))))
    if np.any(bound):
        worst = max(worst, float(np.max(margin[bound])))
    return worst


# -- Platt scaling --------------------------------------------------------------------

def _platt_nll(f, t, a, b) -> float:
    z = a * f + b
    # log(1 + exp(z)) - (1 - t) z, written without overflow
    return float(np.sum(np.logaddexp(0.0, z) - (1.0 - t) * z))


def platt_fit(
    scores,
    labels,
    prior_correction: bool = True,
    max_iter: int = 100,
    min_step: float = 1e-10,
    sigma: float = 1e-12,
    eps: float = 1e-5,
) -> tuple[float, float]:
    """Fit ``p(+1|f) = 1 / (1 + exp(a f + b))`` by Newton with backtracking.

    With ``prior_correction`` the 0/1 targets are replaced by Platt's
    ``(N+ + 1)/(N+ + 2)`` and ``1/(N- + 2)``, which keeps the optimum finite
    on separable scores.  Without it the fit is the plain maximum-likelihood
    logistic regression and diverges on separable data.
    """
    f = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n_pos = int(np.sum(y > 0))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataError("calibration data must contain both classes")
    if prior_correction:
        t = np.where(y > 0, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    else:
        t = (y > 0).astype(np.float64)

    a, b = 0.0, math.log((n_neg + 1.0) / (n_pos + 1.0))
    fval = _platt_nll(f, t, a, b)
    for _ in range(max_iter):
        z = a * f + b
        p = np.exp(-np.logaddexp(0.0, z))  # 1 / (1 + e^z)
        q = 1.0 - p
        d2 = p * q
        h11 = sigma + np.sum(f * f * d2)
        h22 = sigma + np.sum(d2)
        h21 = np.sum(f * d2)
        d1 = t - p
        g1 = np.sum(f * d1)
        g2 = np.sum(d1)
        if abs(g1) < eps and abs(g2) < eps:
            break
        det = h11 * h22 - h21 * h21
        da = -(h22 * g1 - h21 * g2) / det
        db = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * da + g2 * db
        step = 1.0
        while step >= min_step:
            na, nb = a + step * da, b + step * db
            nf = _platt_nll(f, t, na, nb)
            if nf < fval + 1e-4 * step * gd:
                a, b, fval = na, nb, nf
                break
            step /= 2.0
        else:
            raise CalibrationError("Platt line search failed to make progress", a, b)
    else:
        raise CalibrationError(f"Platt scaling did not converge in {max_iter} iterations", a, b)

    if a > 0:
        # scores anti-correlated with labels; fall back to the base rate
        a = 0.0
        b = math.log(np.sum(1.0 - t) / np.sum(t))
    return float(a), float(b)


def platt_calibrate(model: SvmModel, x, y, prior_correction: bool = True) -> SvmModel:
    """Copy of ``model`` with Platt parameters fitted on held-out ``(x, y)``."""
    a, b = platt_fit(decision_function(model, np.atleast_2d(x)), y, prior_correction)
    return replace(model, platt_a=a, platt_b=b)


def platt_probability(f, a: float, b: float):
    z = a * np.asarray(f, dtype=np.float64) + b
    return np.exp(-np.logaddexp(0.0, z))


def predict_proba(model: SvmModel, x):
    """Posterior probability of the positive class."""
    if not model.calibrated:
        raise UncalibratedModelError("model has no Platt parameters; run platt_calibrate first")
    p = platt_probability(decision_function(model, x), model.platt_a, model.platt_b)
    # keep strictly inside (0, 1) for downstream log/averaging
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(p) if np.ndim(p) == 0 else p


# -- serialisation -------------------------------------------------------------------

def svm_to_dict(model: SvmModel) -> dict:
    return {
        "format": SVM_FORMAT,
        "version": SVM_VERSION,
        "gamma": model.gamma,
        "c_reg": model.c_reg,
        "bias": model.bias,
        "platt_a": model.platt_a,
        "platt_b": model.platt_b,
        "converged": model.converged,
        "support_indices": model.support_indices.tolist(),
        "support_vectors": [
            {"dual_coef": float(c), "x": sv.tolist()}
            for c, sv in zip(model.dual_coefs, model.support_vectors)
        ],
    }


def svm_from_dict(d: dict) -> SvmModel:
    if d.get("format") != SVM_FORMAT or d.get("version") != SVM_VERSION:
        raise InputShapeError("not a supported SVM record")
    svs = d["support_vectors"]
    width = len(svs[0]["x"]) if svs else 0
    return SvmModel(
        support_vectors=np.array([s["x"] for s in svs], dtype=np.float64).reshape(len(svs), width),
        dual_coefs=np.array([s["dual_coef"] for s in svs], dtype=np.float64),
        bias=d["bias"],
        gamma=d["gamma"],
        c_reg=d["c_reg"],
        support_indices=np.array(d.get("support_indices", []), dtype=int),
        platt_a=d["platt_a"],
        platt_b=d["platt_b"],
        converged=d.get("converged", True),
    )


def save_svm(model: SvmModel, path) -> None:
    Path(path).write_text(json.dumps(svm_to_dict(model), indent=1) + "\n", encoding="utf-8")


def load_svm(path) -> SvmModel:
    return svm_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
