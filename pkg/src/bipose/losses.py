"""Heatmap losses: adaptive wing, pixel-level KL distillation, MSE, and their blend."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import InvalidInputError


@dataclass(frozen=True)
class AWingParams:
    omega: float = 14.0
    epsilon: float = 1.0
    alpha: float = 2.1
    theta: float = 0.5

    def __post_init__(self):
        if min(self.omega, self.epsilon, self.alpha, self.theta) <= 0:
            raise InvalidInputError("adaptive wing parameters must all be positive")
        if self.alpha <= 2:
            raise InvalidInputError("alpha must exceed 2 so that alpha - y > 1 for y in [0, 1]")


# Temperature of the spatial softmax that turns heatmaps into per-joint
# distributions for distillation.  Heatmaps live in [0, 1], so a temperature
# well below 1 is needed for the peak to carry most of the mass.
KD_TEMPERATURE = 0.1


@dataclass(frozen=True)
class LossWeights:
    alpha_mix: float = 0.5
    temperature: float | None = KD_TEMPERATURE

    def __post_init__(self):
        if not 0.0 <= self.alpha_mix <= 1.0:
            raise InvalidInputError(f"alpha_mix must lie in [0, 1], got {self.alpha_mix}")
        if self.temperature is not None and not self.temperature > 0:
            raise InvalidInputError(f"temperature must be positive or None, got {self.temperature}")


def awing_constants(y, p: AWingParams = AWingParams()):
    """Slope ``A`` and offset ``C`` of the linear piece; both depend on the target value."""
    e = p.alpha - np.asarray(y, dtype=np.float64)
    r = p.theta / p.epsilon
    a = p.omega * (1.0 / (1.0 + r**e)) * e * r ** (e - 1.0) / p.epsilon
    c = p.theta * a - p.omega * np.log1p(r**e)
    return a, c


def awing_nonlinear(y, diff, p: AWingParams = AWingParams()):
    """``omega * ln(1 + |diff / eps| ** (alpha - y))``, the small-error piece."""
    e = p.alpha - np.asarray(y, dtype=np.float64)
    return p.omega * np.log1p(np.abs(np.asarray(diff, dtype=np.float64) / p.epsilon) ** e)


def awing_linear(y, diff, p: AWingParams = AWingParams()):
    """``A * |diff| - C``, the large-error piece."""
    a, c = awing_constants(y, p)
    return a * np.abs(diff) - c


def awing_pixelwise(y, yhat, p: AWingParams = AWingParams()) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    d = np.abs(y - np.asarray(yhat, dtype=np.float64))
    return np.where(d < p.theta, awing_nonlinear(y, d, p), awing_linear(y, d, p))


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")


def awing_loss(target, pred, p: AWingParams = AWingParams()) -> Tensor:
    """Mean adaptive wing loss between ground-truth ``target`` and prediction ``pred``."""
    pred = ag.as_tensor(pred)
    y = np.asarray(target.data if isinstance(target, Tensor) else target)
    _check_same_shape(y, pred)
    yh = pred.data
    y64 = y.astype(np.float64)
    diff = yh.astype(np.float64) - y64
    d = np.abs(diff)
    e = p.alpha - y64
    small = d < p.theta
    u = d / p.epsilon
    loss = np.where(small, p.omega * np.log1p(u**e), 0.0)
    a, c = awing_constants(y64, p)
    loss = np.where(small, loss, a * d - c)
    n = loss.size

    def bw(g):
        # d/dd of omega*ln(1+u^e) is omega*e*u^(e-1)/(eps*(1+u^e)); u^(e-1) is 0 at u=0 since e > 1
        with np.errstate(divide="ignore", invalid="ignore"):
            dn = p.omega * e * np.power(u, e - 1.0) / (p.epsilon * (1.0 + u**e))
        slope = np.where(small, dn, a)
        return (np.asarray(g) * slope * np.sign(diff) / n).astype(yh.dtype),

    return Tensor.from_op(np.asarray(loss.mean(), dtype=yh.dtype), (pred,), bw, "awing")


def normalize_heatmaps(h: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Clamp to ``floor`` and rescale each joint map to sum to one."""
    c = np.maximum(np.asarray(h, dtype=np.float64), floor)
    return c / c.sum(axis=tuple(range(2, c.ndim)), keepdims=True)


def log_spatial_softmax(h: np.ndarray, temperature: float) -> np.ndarray:
    """Log-softmax of ``h / temperature`` over the pixels of each joint map."""
    z = np.asarray(h, dtype=np.float64) / temperature
    axes = tuple(range(2, z.ndim))
    z = z - z.max(axis=axes, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axes, keepdims=True))


def spatial_softmax(h: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of ``h / temperature`` over the pixels of each joint map."""
    return np.exp(log_spatial_softmax(h, temperature))


def kl_loss(teacher, student, temperature: float | None = KD_TEMPERATURE, floor: float = 1e-8) -> Tensor:
    """Pixel-level KL(teacher || student), summed over joints and pixels, averaged over the batch.

    Both inputs are ``(N, K, H, W)``.  Each joint map becomes a distribution
    over its pixels through a softmax at ``temperature``; the divergence is
    scaled by ``temperature**2`` so its gradient does not vanish as the
    temperature drops.  With ``temperature=None`` the maps are instead
    clamped to ``floor`` and divided by their sum.  That reading has no
    gradient below the floor and a ``1 / value`` gradient just above it, so
    it is kept for analysis rather than training.
    """
    student = ag.as_tensor(student)
    t = np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher)
    _check_same_shape(t, student)
    s = student.data
    n = s.shape[0]
    if temperature is None:
        p = normalize_heatmaps(t, floor)
        c = np.maximum(s.astype(np.float64), floor)
        z = c.sum(axis=(2, 3), keepdims=True)
        q = c / z
        val = float((p * (np.log(p) - np.log(q))).sum() / n)

        def bw(g):
            # d/dc_i of -sum_j p_j log(c_j / Z) = -p_i / c_i + 1 / Z (p sums to one per joint)
            grad = (-p / c + 1.0 / z) * (s > floor)
            return (np.asarray(g) * grad / n).astype(s.dtype),

        return Tensor.from_op(np.asarray(val, dtype=s.dtype), (student,), bw, "kl")

    log_p = log_spatial_softmax(t, temperature)
    log_q = log_spatial_softmax(s, temperature)
    p, q = np.exp(log_p), np.exp(log_q)
    val = temperature**2 * float((p * (log_p - log_q)).sum() / n)

    def bw(g):
        return (np.asarray(g) * temperature * (q - p) / n).astype(s.dtype),

    return Tensor.from_op(np.asarray(val, dtype=s.dtype), (student,), bw, "kl")


def mse_loss(target, pred) -> Tensor:
    pred = ag.as_tensor(pred)
    y = np.asarray(target.data if isinstance(target, Tensor) else target)
    _check_same_shape(y, pred)
    diff = pred.data - y.astype(pred.dtype)
    n = diff.size

    def bw(g):
        return (np.asarray(g) * 2.0 * diff / n).astype(pred.dtype),

    return Tensor.from_op(np.asarray((diff.astype(np.float64) ** 2).mean(), dtype=pred.dtype), (pred,), bw, "mse")


def supervised_loss(kind: str, target, pred, p: AWingParams = AWingParams()) -> Tensor:
    if kind == "awing":
        return awing_loss(target, pred, p)
    if kind == "mse":
        return mse_loss(target, pred)
    raise InvalidInputError(f"unknown supervised loss {kind!r}")


def total_loss(
    gt,
    student,
    teacher=None,
    w: LossWeights = LossWeights(),
    p: AWingParams = AWingParams(),
    supervised: str = "awing",
) -> tuple[Tensor, dict[str, float]]:
    """``alpha_mix * supervised(gt, student) + (1 - alpha_mix) * KL(teacher, student)``.

    Returns the loss tensor and the component values.  A term whose weight is
    zero is not evaluated, so ``teacher`` may be None when ``alpha_mix == 1``.
    """
    parts: dict[str, float] = {}
    terms = []
    if w.alpha_mix > 0:
        sup = supervised_loss(supervised, gt, student, p)
        parts[supervised] = sup.item()
        terms.append(ag.mul(sup, w.alpha_mix))
    if w.alpha_mix < 1:
        if teacher is None:
            raise InvalidInputError("a teacher heatmap is required when alpha_mix < 1")
        kl = kl_loss(teacher, student, w.temperature)
        parts["kl"] = kl.item()
        terms.append(ag.mul(kl, 1.0 - w.alpha_mix))
    total = terms[0] if len(terms) == 1 else ag.add(terms[0], terms[1])
    parts["total"] = total.item()
    return total, parts
