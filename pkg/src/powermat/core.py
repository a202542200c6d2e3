"""Numerical kernel: dot products, clamping, prediction rules and single-sample
SGD steps for PowerMat, DotMat and classic matrix factorization.

Every step function is pure. Vectors are 1-D float64 numpy arrays; the inputs
are never modified in place.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from enum import Enum
from functools import cached_property

import numpy as np

# exp() overflows just above 709.78; powers are saturated below that.
LOG_POW_LIMIT = 700.0


class DimensionError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class NumericOverflowError(ArithmeticError):
    """A step produced a non-finite value. ``parameter`` names the culprit."""

    def __init__(self, parameter: str, message: str | None = None):
        self.parameter = parameter
        super().__init__(message or f"non-finite value in {parameter!r}")


class PredictionRule(str, Enum):
    LINEAR = "linear"
    POWER = "power"


class GradientMode(str, Enum):
    VERBATIM = "verbatim"
    DERIVED = "derived"


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 0.01
    sigma_u: float = 10.0
    sigma_v: float = 10.0
    r_max: float = 5.0
    k: int = 4
    dot_floor: float = 1e-6
    exponent_cap: float = 50.0
    prediction_rule: PredictionRule = PredictionRule.LINEAR
    gradient_mode: GradientMode = GradientMode.VERBATIM

    def __post_init__(self):
        object.__setattr__(self, "prediction_rule", PredictionRule(self.prediction_rule))
        object.__setattr__(self, "gradient_mode", GradientMode(self.gradient_mode))
        # gamma = 0 is allowed: it is the zero-step fixed point used in tests
        if not self.gamma >= 0 or not math.isfinite(self.gamma):
            raise ValidationError(f"gamma must be >= 0, got {self.gamma}")
        for name in ("sigma_u", "sigma_v", "r_max", "exponent_cap"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValidationError(f"{name} must be a positive finite number, got {value}")
        if int(self.k) != self.k or self.k < 1:
            raise ValidationError(f"k must be an integer >= 1, got {self.k}")
        if not 0 < self.dot_floor < 1:
            raise ValidationError(f"dot_floor must lie in (0, 1), got {self.dot_floor}")

    def replace(self, **changes) -> "Hyperparams":
        data = self.to_dict()
        data.update(changes)
        return Hyperparams(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prediction_rule"] = self.prediction_rule.value
        d["gradient_mode"] = self.gradient_mode.value
        return d


@dataclass
class FactorModel:
    """Learnable state. Row ``i`` of ``user_factors`` is the embedding of the
    user with dense index ``i``; likewise for items."""

    user_factors: np.ndarray
    item_factors: np.ndarray
    alpha: np.ndarray
    beta: float
    hyper: Hyperparams
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        k = self.hyper.k
        if self.user_factors.ndim != 2 or self.user_factors.shape[1] != k:
            raise DimensionError(f"user_factors must have shape (n, {k})")
        if self.item_factors.ndim != 2 or self.item_factors.shape[1] != k:
            raise DimensionError(f"item_factors must have shape (m, {k})")
        if self.alpha.ndim != 1:
            raise DimensionError("alpha must be one-dimensional")

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {uid: i for i, uid in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {iid: j for j, iid in enumerate(self.item_ids)}

    @property
    def d(self) -> int:
        return self.alpha.shape[0]

    def is_finite(self) -> bool:
        return bool(
            np.isfinite(self.user_factors).all()
            and np.isfinite(self.item_factors).all()
            and np.isfinite(self.alpha).all()
            and math.isfinite(self.beta)
        )

    def copy(self) -> "FactorModel":
        return FactorModel(
            self.user_factors.copy(), self.item_factors.copy(), self.alpha.copy(),
            float(self.beta), self.hyper, list(self.user_ids), list(self.item_ids),
        )


def _check_pair(u: np.ndarray, v: np.ndarray) -> None:
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(f"embedding shapes differ: {u.shape} vs {v.shape}")


def _check_context(alpha: np.ndarray, c: np.ndarray) -> None:
    if alpha.shape != c.shape or alpha.ndim != 1:
        raise DimensionError(f"alpha/context shapes differ: {alpha.shape} vs {c.shape}")


def _finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericOverflowError(name)


def safe_pow(x: float, e: float) -> float:
    """x**e for x > 0, saturating at exp(+-LOG_POW_LIMIT) instead of overflowing."""
    log_p = e * math.log(x)
    if log_p > LOG_POW_LIMIT:
        return math.exp(LOG_POW_LIMIT)
    if log_p < -LOG_POW_LIMIT:
        return math.exp(-LOG_POW_LIMIT)
    return x ** e


def dot(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_pair(u, v)
    return float(u @ v)


def clamped_dot(u: np.ndarray, v: np.ndarray, floor: float) -> float:
    if not 0 < floor < 1:
        raise ValidationError(f"floor must lie in (0, 1), got {floor}")
    x = dot(u, v)
    return x if x > floor else floor


def _clamp_exponent(e: float, cap: float) -> float:
    return min(max(e, -cap), cap)


def predict_linear(u: np.ndarray, v: np.ndarray, r_max: float) -> float:
    return r_max * dot(u, v)


def predict_power(u, v, alpha, c, beta: float, hyper: Hyperparams) -> float:
    """r_max * x ** (alpha.c + beta*x) with x the floored dot product."""
    alpha = np.asarray(alpha, dtype=float)
    c = np.asarray(c, dtype=float)
    _check_context(alpha, c)
    x = clamped_dot(u, v, hyper.dot_floor)
    e = _clamp_exponent(float(alpha @ c) + beta * x, hyper.exponent_cap)
    return hyper.r_max * safe_pow(x, e)


def powermat_step_verbatim(u, v, alpha, beta: float, c, hyper: Hyperparams):
    """One PowerMat SGD step using the published update formulas as printed.

    All four updates read the same pre-step snapshot. The dot product is not
    floored here since these formulas take no powers of it.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    c = np.asarray(c, dtype=float)
    _check_pair(u, v)
    _check_context(alpha, c)
    g = hyper.gamma
    x = float(u @ v)
    ac = float(alpha @ c)
    bx = beta * x
    u_new = u - g * (bx * v + (bx + ac) * v - (2.0 / hyper.sigma_u) * u)
    v_new = v - g * (bx * u + (bx + ac) * u - (2.0 / hyper.sigma_v) * v)
    alpha_new = alpha - g * x * c
    beta_new = beta - g * x * x
    _finite("u", u_new)
    _finite("v", v_new)
    _finite("alpha", alpha_new)
    _finite("beta", beta_new)
    return u_new, v_new, alpha_new, float(beta_new)


def powermat_objective(u, v, alpha, beta: float, c, hyper: Hyperparams) -> float:
    """Negative log-posterior J = -(alpha.c + beta*x) ln x + |u|^2/s_u^2 + |v|^2/s_v^2."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    x = clamped_dot(u, v, hyper.dot_floor)
    ac = float(np.asarray(alpha, dtype=float) @ np.asarray(c, dtype=float))
    return (-(ac + beta * x) * math.log(x)
            + float(u @ u) / hyper.sigma_u ** 2 + float(v @ v) / hyper.sigma_v ** 2)


def powermat_gradient(u, v, alpha, beta: float, c, hyper: Hyperparams):
    """Gradient of :func:`powermat_objective` w.r.t. (u, v, alpha, beta)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    c = np.asarray(c, dtype=float)
    _check_pair(u, v)
    _check_context(alpha, c)
    raw = float(u @ v)
    floored = raw <= hyper.dot_floor
    x = hyper.dot_floor if floored else raw
    log_x = math.log(x)
    ac = float(alpha @ c)
    # d/dx of (ac + beta x) ln x; the floor is flat so it contributes nothing
    dx = 0.0 if floored else beta * log_x + (ac + beta * x) / x
    grad_u = -dx * v + (2.0 / hyper.sigma_u ** 2) * u
    grad_v = -dx * u + (2.0 / hyper.sigma_v ** 2) * v
    grad_alpha = -log_x * c
    grad_beta = -x * log_x
    return grad_u, grad_v, grad_alpha, grad_beta


def powermat_step_derived(u, v, alpha, beta: float, c, hyper: Hyperparams):
    grad_u, grad_v, grad_alpha, grad_beta = powermat_gradient(u, v, alpha, beta, c, hyper)
    g = hyper.gamma
    u_new = np.asarray(u, dtype=float) - g * grad_u
    v_new = np.asarray(v, dtype=float) - g * grad_v
    alpha_new = np.asarray(alpha, dtype=float) - g * grad_alpha
    beta_new = beta - g * grad_beta
    _finite("u", u_new)
    _finite("v", v_new)
    _finite("alpha", alpha_new)
    _finite("beta", beta_new)
    return u_new, v_new, alpha_new, float(beta_new)


def powermat_step(u, v, alpha, beta, c, hyper: Hyperparams):
    if hyper.gradient_mode is GradientMode.DERIVED:
        return powermat_step_derived(u, v, alpha, beta, c, hyper)
    return powermat_step_verbatim(u, v, alpha, beta, c, hyper)


def _check_rating(rating: float, hyper: Hyperparams) -> None:
    if not (0.0 <= rating <= hyper.r_max):
        raise ValidationError(f"rating {rating} outside [0, {hyper.r_max}]")


def dotmat_loss(u, v, rating: float, hyper: Hyperparams) -> float:
    """|x**x - rating/r_max| with x the floored dot product."""
    _check_rating(rating, hyper)
    x = clamped_dot(u, v, hyper.dot_floor)
    return abs(safe_pow(x, x) - rating / hyper.r_max)


def dotmat_step(u, v, rating: float, hyper: Hyperparams):
    """Subgradient step on the DotMat loss, with sign(0) = 0.

    u' = u - gamma * sign(x**x - r/r_max) * x**x * (ln x + 1) * v, v' mirrored.
    """
    _check_rating(rating, hyper)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_pair(u, v)
    # At the floor the formula is still applied with x = floor: ln(floor) + 1 < 0,
    # so the step pushes a non-positive dot product back up.
    x = max(float(u @ v), hyper.dot_floor)
    xx = safe_pow(x, x)
    err = xx - rating / hyper.r_max
    scale = hyper.gamma * float(np.sign(err)) * xx * (math.log(x) + 1.0)
    u_new = u - scale * v
    v_new = v - scale * u
    _finite("u", u_new)
    _finite("v", v_new)
    return u_new, v_new


def classic_mf_loss(u, v, rating: float, hyper: Hyperparams) -> float:
    """Squared error on the normalized scale (regularizer not included)."""
    _check_rating(rating, hyper)
    e = dot(u, v) - rating / hyper.r_max
    return e * e


def classic_mf_step(u, v, rating: float, hyper: Hyperparams):
    """SGD on 1/2 e^2 + 1/2 (lam_u |u|^2 + lam_v |v|^2) with lam = 1/sigma^2."""
    _check_rating(rating, hyper)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_pair(u, v)
    e = float(u @ v) - rating / hyper.r_max
    lam_u = 1.0 / hyper.sigma_u ** 2
    lam_v = 1.0 / hyper.sigma_v ** 2
    g = hyper.gamma
    u_new = u - g * (e * v + lam_u * u)
    v_new = v - g * (e * u + lam_v * v)
    _finite("u", u_new)
    _finite("v", v_new)
    return u_new, v_new


# Batched scoring, used by evaluation and top-k list construction.

def predict_linear_batch(U: np.ndarray, V: np.ndarray, r_max: float) -> np.ndarray:
    """Row-wise r_max * U[n].V[n] for equal-length stacks of embeddings."""
    return r_max * np.einsum("nk,nk->n", U, V)


def predict_power_batch(U, V, alpha, C, beta: float, hyper: Hyperparams) -> np.ndarray:
    x = np.maximum(np.einsum("nk,nk->n", U, V), hyper.dot_floor)
    e = np.clip(C @ alpha + beta * x, -hyper.exponent_cap, hyper.exponent_cap)
    log_p = np.clip(e * np.log(x), -LOG_POW_LIMIT, LOG_POW_LIMIT)
    return hyper.r_max * np.exp(log_p)
