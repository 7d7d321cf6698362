"""
Large-step Gaussian diffusion chain.

The fine chain has ``T`` steps with a linear variance ramp; the learned
reverse process only visits every ``k``-th step.  A jump from ``t - k`` to
``t`` uses the composed variance ``1 - abar[t] / abar[t - k]`` so that
chaining jumps reproduces the closed-form marginals exactly.

Functions accept plain arrays or :class:`~echodiff.tensor.Tensor` values;
everything here is affine so gradients flow through the Tensor path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class SpanCoefficients:
    t: int
    alpha_span: float
    beta_span: float
    posterior_mean_coeff_x0: float
    posterior_mean_coeff_xt: float
    posterior_variance: float
    posterior_variance_unclamped: float


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance tables indexed by fine step ``t = 1..T`` (index 0 is ``t = 0``).

    ``var_floor_ratio`` and ``var_ceiling_ratio`` bound the reverse-step
    variance as multiples of the span variance.
    """

    T: int
    k: int
    beta_min: float
    beta_max: float
    var_floor_ratio: float = 1e-4
    var_ceiling_ratio: float = 1.0
    beta: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        _validate(self.T, self.k, self.beta_min, self.beta_max,
                  self.var_floor_ratio, self.var_ceiling_ratio)
        if self.T == 1:
            beta = np.array([self.beta_min], dtype=np.float64)
        else:
            beta = np.linspace(self.beta_min, self.beta_max, self.T, dtype=np.float64)
        abar = np.empty(self.T + 1)
        abar[0] = 1.0
        for i in range(1, self.T + 1):
            abar[i] = abar[i - 1] * (1.0 - beta[i - 1])
        beta = np.concatenate([[0.0], beta])
        beta.setflags(write=False)
        abar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", abar)

    @property
    def n_steps(self) -> int:
        """Number of reverse (large) steps."""
        return self.T // self.k

    @property
    def reverse_steps(self) -> list:
        return list(range(self.T, 0, -self.k))

    def sigma_floor(self, t: int) -> float:
        return math.sqrt(self.var_floor_ratio * self.span(t).beta_span)

    def sigma_ceiling(self, t: int) -> float:
        return math.sqrt(self.var_ceiling_ratio * self.span(t).beta_span)

    def span(self, t: int) -> SpanCoefficients:
        if t <= 0:
            raise ScheduleError(f"t must be >= k={self.k} for a reverse step, got t={t}")
        self._check_span_t(t)
        ab_t = float(self.alpha_bar[t])
        ab_prev = float(self.alpha_bar[t - self.k])
        a_span = ab_t / ab_prev
        b_span = 1.0 - a_span
        denom = 1.0 - ab_t
        c0 = math.sqrt(ab_prev) * b_span / denom
        ct = math.sqrt(a_span) * (1.0 - ab_prev) / denom
        var = b_span * (1.0 - ab_prev) / denom
        lo, hi = self.var_floor_ratio * b_span, self.var_ceiling_ratio * b_span
        return SpanCoefficients(t, a_span, b_span, c0, ct, min(max(var, lo), hi), var)

    def _check_t(self, t: int) -> None:
        if not isinstance(t, (int, np.integer)) or not 1 <= t <= self.T:
            raise ScheduleError(f"t must be an integer in [1, {self.T}], got {t!r}")

    def _check_span_t(self, t: int) -> None:
        self._check_t(t)
        if t % self.k:
            raise ScheduleError(f"t={t} is not a multiple of the span size k={self.k}")

    def to_dict(self) -> dict:
        return {"T": self.T, "k": self.k, "beta_min": self.beta_min,
                "beta_max": self.beta_max, "var_floor_ratio": self.var_floor_ratio,
                "var_ceiling_ratio": self.var_ceiling_ratio}


def _validate(T, k, beta_min, beta_max, floor, ceiling) -> None:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ScheduleError(f"k must be a positive integer, got {k!r}")
    if T % k:
        raise ScheduleError(f"k={k} must divide T={T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ScheduleError(
            f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}")
    if not 0 < floor <= ceiling:
        raise ScheduleError(
            f"need 0 < var_floor_ratio <= var_ceiling_ratio, got {floor}, {ceiling}")


def make_schedule(T: int = 1000, k: int = 250, beta_min: float = 1e-4,
                  beta_max: float = 0.02, **bounds) -> NoiseSchedule:
    return NoiseSchedule(T, k, beta_min, beta_max, **bounds)


def _raw(x):
    from .tensor import Tensor
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _coef(values, like):
    """Per-sample coefficients shaped to broadcast against a (N, ...) batch."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 0:
        return float(v)
    like = _raw(like)
    shape = (len(v),) + (1,) * (like.ndim - 1)
    dtype = like.dtype if like.dtype.kind == "f" else np.float64
    return v.reshape(shape).astype(dtype)


def _scaled(x, c):
    if isinstance(c, float):
        return x * c
    from .tensor import Tensor, mul
    return mul(x, Tensor(c)) if isinstance(x, Tensor) else x * c


def _steps(t, check):
    ts = np.atleast_1d(np.asarray(t))
    for ti in ts:
        check(int(ti))
    return ts, np.ndim(t) == 0


def forward_marginal(x0, t, eps, sched: NoiseSchedule):
    """Sample ``q(x_t | x_0)``; ``t`` may be a scalar or one step per sample."""
    if np.shape(_raw(eps)) != np.shape(_raw(x0)):
        raise ValueError(f"eps shape {np.shape(eps)} does not match x0")
    ts, scalar = _steps(t, sched._check_t)
    ab = sched.alpha_bar[ts]
    a = _coef(np.sqrt(ab[0]) if scalar else np.sqrt(ab), x0)
    s = _coef(np.sqrt(1 - ab[0]) if scalar else np.sqrt(1 - ab), x0)
    return _scaled(x0, a) + _scaled(eps, s)


def forward_span(x_prev, t, eps, sched: NoiseSchedule):
    """One k-sized jump ``q(x_t | x_{t-k})``."""
    ts, scalar = _steps(t, sched._check_span_t)
    spans = [sched.span(int(ti)) for ti in ts]
    a = [math.sqrt(s.alpha_span) for s in spans]
    b = [math.sqrt(s.beta_span) for s in spans]
    return _scaled(x_prev, _coef(a[0] if scalar else a, x_prev)) + \
        _scaled(eps, _coef(b[0] if scalar else b, x_prev))


def posterior(x0_hat, x_t, t, sched: NoiseSchedule):
    """Mean and (clamped) variance of ``q(x_{t-k} | x_t, x_0 = x0_hat)``.

    With a per-sample ``t`` the variance comes back as an array.
    """
    ts, scalar = _steps(t, lambda ti: sched.span(ti))
    spans = [sched.span(int(ti)) for ti in ts]
    c0 = [s.posterior_mean_coeff_x0 for s in spans]
    ct = [s.posterior_mean_coeff_xt for s in spans]
    var = np.array([s.posterior_variance for s in spans])
    mean = _scaled(x0_hat, _coef(c0[0] if scalar else c0, x0_hat)) + \
        _scaled(x_t, _coef(ct[0] if scalar else ct, x0_hat))
    return mean, (float(var[0]) if scalar else var)


def reverse_sample(gen, guide, rng_seed: int, sched: NoiseSchedule,
                   predict=None, trace: Optional[list] = None) -> np.ndarray:
    """Run the learned reverse chain from pure noise to an image in [-1, 1].

    ``guide`` is (H, W) or (N, C, H, W).  ``predict`` defaults to
    :func:`echodiff.models.generator_predict`.  When ``trace`` is a list,
    ``(t, x_t, x0_hat)`` tuples are appended for inspection.
    """
    from .tensor import no_grad

    if predict is None:
        from .models import generator_predict as predict
    guide = np.asarray(guide)
    squeeze = guide.ndim == 2
    if squeeze:
        guide = guide[None, None]
    n, _, h, w = guide.shape
    dtype = guide.dtype if guide.dtype.kind == "f" else np.float32
    rng = np.random.default_rng(rng_seed)
    latent_dim = getattr(gen, "latent_dim", 8)

    x = rng.standard_normal((n, 1, h, w)).astype(dtype)
    with no_grad():
        for t in sched.reverse_steps:
            z = rng.standard_normal((n, latent_dim)).astype(dtype)
            x0_hat = predict(gen, x, guide, t, z)
            x0_hat = _raw(x0_hat)
            if not np.all(np.isfinite(x0_hat)):
                raise FloatingPointError(f"non-finite generator output at reverse step t={t}")
            if trace is not None:
                trace.append((t, x.copy(), x0_hat.copy()))
            mean, var = posterior(x0_hat, x, t, sched)
            if t == sched.k:
                x = mean
            else:
                x = (mean + math.sqrt(var) * rng.standard_normal(mean.shape)).astype(dtype)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite sample at reverse step t={t}")
    out = np.clip(x, -1.0, 1.0).astype(dtype)
    return out[0, 0] if squeeze else out
