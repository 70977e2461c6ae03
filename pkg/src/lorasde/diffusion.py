"""Variance-preserving SDE: schedule, closed-form marginal, loss and sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

T_MIN = 1e-4


class RangeError(ValueError):
    """Raised when a time or step size falls outside its valid range."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear rate ``beta(t) = beta0 + (beta1 - beta0) t`` on ``[0, T]``."""

    beta0: float = 0.05
    beta1: float = 20.0
    T: float = 1.0

    def __post_init__(self):
        if not 0 < self.beta0 < self.beta1:
            raise ValueError(f"need 0 < beta0 < beta1, got {self.beta0}, {self.beta1}")

    def beta(self, t):
        return self.beta0 + (self.beta1 - self.beta0) * np.asarray(t)

    def integral(self, t):
        """Cumulative rate I(t) = int_0^t beta(s) ds."""
        t = np.asarray(t)
        return self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t

    def mean_coeff(self, t):
        return np.exp(-0.5 * self.integral(t))

    def noise_var(self, t):
        """lambda(t) = 1 - exp(-I(t))."""
        return -np.expm1(-self.integral(t))

    def noise_coeff(self, t):
        return np.sqrt(self.noise_var(t))

    def marginal(self, t) -> Marginal:
        return Marginal(float(self.mean_coeff(t)), float(self.noise_coeff(t)))


@dataclass(frozen=True)
class Marginal:
    mean_coeff: float
    noise_coeff: float


def _check_time(schedule: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0) or np.any(t > schedule.T):
        raise RangeError(f"t must lie in (0, {schedule.T}], got {t}")
    return t


def _per_example(coeff: np.ndarray, ndim: int) -> np.ndarray:
    # [B] coefficients broadcast over trailing [n, d] axes.
    return coeff.reshape(coeff.shape + (1,) * (ndim - coeff.ndim))


def forward_sample(schedule: NoiseSchedule, x0, t, eps):
    """Draw X_t given X_0 and standard-normal ``eps`` via the closed-form marginal.

    ``t`` may be a scalar or one time per leading batch entry.
    """
    x0 = np.asarray(x0.data if isinstance(x0, Tensor) else x0)
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps)
    if x0.shape != eps.shape:
        raise T.DimensionError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t = _check_time(schedule, t)
    m = _per_example(schedule.mean_coeff(t), x0.ndim).astype(x0.dtype)
    s = _per_example(schedule.noise_coeff(t), x0.ndim).astype(x0.dtype)
    return m * x0 + s * eps


def score_matching_loss(
    score_fn: Callable[[np.ndarray, np.ndarray], Tensor],
    schedule: NoiseSchedule,
    x0: np.ndarray,
    rng: np.random.Generator | None = None,
    *,
    t: np.ndarray | None = None,
    eps: np.ndarray | None = None,
    t_min: float = T_MIN,
) -> Tensor:
    """Mean of ``(noise_coeff(t) * s(X_t) + eps)^2`` over batch and elements.

    ``score_fn(x_t, t)`` returns the model score as a Tensor; conditioning is
    bound by the caller.  Pass ``t`` and ``eps`` to evaluate on a fixed probe.
    """
    x0 = np.asarray(x0)
    batch = x0.shape[0] if x0.ndim == 3 else None
    if t is None:
        t = rng.uniform(t_min, schedule.T, size=batch if batch is not None else None)
    if eps is None:
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    t = np.asarray(t, dtype=np.float64)
    x_t = forward_sample(schedule, x0, t, eps)
    score = score_fn(x_t, t)
    sigma = _per_example(schedule.noise_coeff(t), x0.ndim).astype(score.dtype)
    resid = T.add(T.mul(score, sigma), eps.astype(score.dtype))
    return T.mean(T.square(resid))


def reverse_step(schedule: NoiseSchedule, x_t, t: float, score, dt: float, z) -> np.ndarray:
    """One Euler-Maruyama step of the reverse SDE from ``t`` to ``t - dt``."""
    if dt <= 0:
        raise RangeError(f"dt must be positive, got {dt}")
    if t - dt < -1e-9:
        raise RangeError(f"step overshoots t=0: t={t}, dt={dt}")
    beta = float(schedule.beta(t))
    x_t = np.asarray(x_t)
    out = x_t + beta * (0.5 * x_t + np.asarray(score)) * dt
    if z is not None:
        out = out + math.sqrt(beta * dt) * np.asarray(z)
    return out


def n_steps(schedule: NoiseSchedule, dt: float) -> int:
    if dt <= 0:
        raise RangeError(f"dt must be positive, got {dt}")
    steps = schedule.T / dt
    n = round(steps)
    if n < 1 or abs(steps - n) > 1e-6 * max(1.0, steps):
        raise RangeError(f"T/dt = {steps} is not a whole number of steps")
    return n


def sample(
    score_fn: Callable[[np.ndarray, float], np.ndarray],
    schedule: NoiseSchedule,
    shape: tuple[int, ...],
    dt: float,
    rng: np.random.Generator,
    dtype=np.float32,
) -> np.ndarray:
    """Integrate the reverse SDE from X_T ~ N(0, I) down to t = 0.

    ``score_fn(x_t, t)`` returns the (possibly guided) score as an array.
    The last step adds no noise.  All randomness is drawn from ``rng`` in a
    fixed order (prior, then one ``z`` per step), so two samplers fed the same
    seed share their noise.
    """
    steps = n_steps(schedule, dt)
    x = rng.standard_normal(shape).astype(dtype)
    for i in range(steps):
        t = schedule.T - i * dt
        score = score_fn(x, t)
        z = rng.standard_normal(shape).astype(dtype) if i < steps - 1 else None
        x = reverse_step(schedule, x, t, score, dt, z).astype(dtype, copy=False)
    return x
