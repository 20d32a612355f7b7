"""Per-example losses on a scalar logit, with analytic logit derivatives.

Every loss has two entry points: a scalar one returning :class:`LossValue`
and a vectorized ``*_arrays`` one used by the training loop. They share the
same arithmetic.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy.special import expit

LossName = Literal["bce", "focal"]


@dataclass(frozen=True)
class LossValue:
    value: float
    dvalue_dlogit: float


@dataclass(frozen=True)
class EAPOWeights:
    beta: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 0.1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be nonnegative")


@dataclass(frozen=True)
class FocalParams:
    """``alpha=None`` disables class weighting (alpha_t = 1 for both classes)."""

    gamma: float = 2.0
    alpha: float | None = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.alpha is not None and not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")


# ---------------------------------------------------------------------------
# numerically stable sigmoid helpers


def softplus(z):
    """ln(1 + e^z) without overflow."""
    z = np.asarray(z, dtype=np.float64)
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return expit(np.asarray(z, dtype=np.float64))


def _finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("logits must be finite")


def _sign(y) -> np.ndarray:
    y = np.asarray(y)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    return 2.0 * y.astype(np.float64) - 1.0


# ---------------------------------------------------------------------------
# vectorized kernels


def bce_arrays(logit, y) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(logit, dtype=np.float64)
    _finite(z)
    s = _sign(y)
    m = s * z
    return softplus(-m), -s * sigmoid(-m)


def focal_arrays(logit, y, params: FocalParams) -> tuple[np.ndarray, np.ndarray]:
    """-alpha_t (1 - p_t)^gamma ln p_t with p_t = sigmoid(s * logit)."""
    z = np.asarray(logit, dtype=np.float64)
    _finite(z)
    yi = np.asarray(y)
    s = _sign(yi)
    m = s * z
    log_pt = -softplus(-m)
    pt = sigmoid(m)
    one_minus = sigmoid(-m)
    if params.alpha is None:
        alpha_t = np.ones_like(z)
    else:
        alpha_t = np.where(yi == 1, params.alpha, 1.0 - params.alpha)
    g = params.gamma
    mod = one_minus**g
    value = -alpha_t * mod * log_pt
    # d/dz = alpha_t * s * (1-p_t)^g * (g * p_t * ln p_t - (1 - p_t))
    grad = alpha_t * s * mod * (g * pt * log_pt - one_minus)
    return value, grad


def dpo_arrays(logit_theta, logit_ref, y_plus, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Binary DPO via the logit-difference closed form.

    For pi(1|x) = sigmoid(f), ln pi(y+|x) - ln pi(y-|x) = s * f with
    s = 2 y+ - 1, so the preference margin is beta * s * (f_theta - f_ref).
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    zt = np.asarray(logit_theta, dtype=np.float64)
    zr = np.asarray(logit_ref, dtype=np.float64)
    _finite(zt, zr)
    s = _sign(y_plus)
    m = beta * s * (zt - zr)
    return softplus(-m), -beta * s * sigmoid(-m)


def base_loss_arrays(name: LossName, logit, y, focal_params: FocalParams | None = None):
    if name == "bce":
        return bce_arrays(logit, y)
    if name == "focal":
        return focal_arrays(logit, y, focal_params or FocalParams())
    raise ValueError(f"unknown loss {name!r}")


# ---------------------------------------------------------------------------
# scalar API


def _scalar(pair) -> LossValue:
    v, g = pair
    return LossValue(float(v), float(g))


def bce(logit: float, y: int) -> LossValue:
    return _scalar(bce_arrays(logit, y))


def focal(logit: float, y: int, params: FocalParams = FocalParams()) -> LossValue:
    return _scalar(focal_arrays(logit, y, params))


def dpo(logit_theta: float, logit_ref: float, y_plus: int, beta: float) -> LossValue:
    return _scalar(dpo_arrays(logit_theta, logit_ref, y_plus, beta))


def dpo_four_term(logit_theta: float, logit_ref: float, y_plus: int, beta: float) -> float:
    """Direct evaluation of the DPO loss from its four log-probabilities.

    Reference path for checking :func:`dpo`; not used in training.
    """

    def log_pi(f: float, y: int) -> float:
        # ln sigmoid(f) for y = 1, ln(1 - sigmoid(f)) = ln sigmoid(-f) for y = 0
        t = f if y == 1 else -f
        return -math.log1p(math.exp(-t)) if t >= 0 else t - math.log1p(math.exp(t))

    y_minus = 1 - y_plus
    margin = beta * (
        (log_pi(logit_theta, y_plus) - log_pi(logit_ref, y_plus))
        - (log_pi(logit_theta, y_minus) - log_pi(logit_ref, y_minus))
    )
    return -log_pi(margin, 1)


# ---------------------------------------------------------------------------
# combined objective


@dataclass(frozen=True)
class EAPOBatchResult:
    """Objective value and per-item logit gradients for each term.

    ``local_grad`` / ``extreme_grad`` are with respect to ``logit_theta``
    only; the reference side is frozen.
    """

    value: float
    sft_grad: np.ndarray
    local_grad: np.ndarray
    extreme_grad: np.ndarray
    sft_value: float
    local_value: float
    extreme_value: float


def _columns(items, width: int) -> list[np.ndarray]:
    arr = np.asarray(items, dtype=np.float64).reshape(-1, width)
    return [arr[:, i] for i in range(width)]


def eapo_batch(
    sft_items: Sequence[tuple[float, int]],
    local_pairs: Sequence[tuple[float, float, int]],
    extreme_pairs: Sequence[tuple[float, float, int]],
    w: EAPOWeights,
    base_loss: LossName = "bce",
    focal_params: FocalParams | None = None,
) -> EAPOBatchResult:
    """Mean supervised loss + lambda1 * mean local DPO + lambda2 * mean extreme DPO.

    An empty list contributes 0 to its term. Gradients are already scaled by
    the term weight and ``1 / term_count``.
    """
    if len(sft_items) == 0 and len(local_pairs) == 0 and len(extreme_pairs) == 0:
        raise ValueError("eapo_batch needs at least one non-empty term")
    if len(extreme_pairs) == 0 and w.lambda2 > 0:
        warnings.warn("extreme term is empty and contributes 0", stacklevel=2)

    empty = np.zeros(0)
    sft_v = local_v = ext_v = 0.0
    sft_g, local_g, ext_g = empty, empty, empty

    if len(sft_items):
        z, y = _columns(sft_items, 2)
        v, g = base_loss_arrays(base_loss, z, y.astype(np.int64), focal_params)
        sft_v = float(np.mean(v))
        sft_g = g / len(v)
    if len(local_pairs):
        zt, zr, yp = _columns(local_pairs, 3)
        v, g = dpo_arrays(zt, zr, yp.astype(np.int64), w.beta)
        local_v = float(np.mean(v))
        local_g = w.lambda1 * g / len(v)
    if len(extreme_pairs):
        zt, zr, yp = _columns(extreme_pairs, 3)
        v, g = dpo_arrays(zt, zr, yp.astype(np.int64), w.beta)
        ext_v = float(np.mean(v))
        ext_g = w.lambda2 * g / len(v)

    value = sft_v + w.lambda1 * local_v + w.lambda2 * ext_v
    return EAPOBatchResult(value, sft_g, local_g, ext_g, sft_v, local_v, ext_v)
