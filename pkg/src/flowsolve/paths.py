"""Affine Gaussian probability paths and their schedule arithmetic.

A path interpolates noise (t=0) to data (t=1) through
q(x_t | x1) = N(alpha_t * x1, sigma_t^2 * I), with alpha_t non-negative
non-decreasing and sigma_t non-negative non-increasing. All formulas in
this package use this forward-time convention; path classes whose usual
presentation runs the other way (variance-preserving / variance-exploding
diffusion schedules) re-express it here, once, so no other module ever
sees reversed time.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import RangeUnattainableError, TimeDomainError

__all__ = [
    "ScheduleSample",
    "ProbPath",
    "CondOTPath",
    "VPPath",
    "VEPath",
    "CustomPath",
    "make_path",
]

_BISECT_TOL = 1e-12


class ScheduleSample(NamedTuple):
    """Schedule values at one time: (alpha, sigma) and their t-derivatives."""

    alpha: float
    sigma: float
    dalpha_dt: float
    dsigma_dt: float
    t: float


class ProbPath(abc.ABC):
    """Base class for affine Gaussian probability paths."""

    kind: str = "custom"

    @abc.abstractmethod
    def _alpha_sigma(self, t: float) -> tuple[float, float]:
        ...

    @abc.abstractmethod
    def _derivatives(self, t: float) -> tuple[float, float]:
        ...

    def schedule(self, t: float) -> ScheduleSample:
        """Evaluate (alpha, sigma, dalpha/dt, dsigma/dt) at time t in [0, 1]."""
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise TimeDomainError(f"t={t!r} outside [0, 1]")
        alpha, sigma = self._alpha_sigma(t)
        dalpha, dsigma = self._derivatives(t)
        return ScheduleSample(alpha, sigma, dalpha, dsigma, t)

    def snr(self, t: float) -> float:
        """Signal-to-noise ratio alpha_t / sigma_t; +inf where sigma_t = 0."""
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise TimeDomainError(f"t={t!r} outside [0, 1]")
        alpha, sigma = self._alpha_sigma(t)
        if sigma == 0.0:
            return math.inf
        return alpha / sigma

    def snr_bounds(self) -> tuple[float, float]:
        """Attainable SNR range (snr(0), snr(1)); the upper end may be inf."""
        return self.snr(0.0), self.snr(1.0)

    def inverse_snr(self, s: float) -> float:
        """Return t with snr(t) = s, or raise RangeUnattainableError.

        SNR is strictly increasing wherever finite, so bisection with a
        verified bracket is unconditionally safe. The bracket is refined
        to an absolute width of 1e-12 in t, then Newton steps (clamped to
        the bracket) polish the SNR residual, which matters where the SNR
        curve is steep and a 1e-12 time error still moves the SNR.
        """
        s = float(s)
        lo_snr, hi_snr = self.snr_bounds()
        if not lo_snr <= s <= hi_snr:
            raise RangeUnattainableError(s, lo_snr, hi_snr)
        if math.isinf(s):
            return 1.0
        lo, hi = 0.0, 1.0
        while hi - lo > _BISECT_TOL:
            mid = 0.5 * (lo + hi)
            if self.snr(mid) < s:
                lo = mid
            else:
                hi = mid
        t = 0.5 * (lo + hi)
        for _ in range(4):
            alpha, sigma, dalpha, dsigma = self.schedule(t)[:4]
            if sigma == 0.0:
                break
            resid = alpha / sigma - s
            if abs(resid) <= 1e-13 * max(1.0, s):
                break
            deriv = (dalpha * sigma - alpha * dsigma) / (sigma * sigma)
            if not (math.isfinite(deriv) and deriv > 0.0):
                break
            t = min(max(t - resid / deriv, lo), hi)
        return t

    def sample_xt(self, x1: np.ndarray, t: float, rng: np.random.Generator) -> np.ndarray:
        """Draw x_t = alpha_t * x1 + sigma_t * eps with eps ~ N(0, I)."""
        alpha, sigma, _, _, _ = self.schedule(t)
        x1 = np.asarray(x1, dtype=np.float64)
        return alpha * x1 + sigma * rng.standard_normal(x1.shape)


@dataclass(frozen=True)
class CondOTPath(ProbPath):
    """Conditional optimal-transport path: alpha_t = t, sigma_t = 1 - t."""

    kind: str = "cond_ot"

    def _alpha_sigma(self, t):
        return t, 1.0 - t

    def _derivatives(self, t):
        return 1.0, -1.0

    def inverse_snr(self, s: float) -> float:
        s = float(s)
        if s < 0.0:
            raise RangeUnattainableError(s, 0.0, math.inf)
        if math.isinf(s):
            return 1.0
        return s / (1.0 + s)


@dataclass(frozen=True)
class VPPath(ProbPath):
    """Variance-preserving diffusion path with a linear noise-scale ramp.

    In forward time, alpha_t = exp(-T(1 - t) / 2) where
    T(s) = integral of beta(u) du over [0, s] and
    beta(u) = beta_min + (beta_max - beta_min) * u; sigma_t^2 = 1 - alpha_t^2.
    dsigma/dt is -inf at t = 1 (square-root singularity); callers that need
    sigma > 0 must stay clear of the endpoint.
    """

    beta_min: float = 0.1
    beta_max: float = 20.0
    kind: str = "vp"

    def _beta(self, s):
        return self.beta_min + (self.beta_max - self.beta_min) * s

    def _big_t(self, s):
        return self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s * s

    def _alpha_sigma(self, t):
        alpha = math.exp(-0.5 * self._big_t(1.0 - t))
        sigma = math.sqrt(max(0.0, 1.0 - alpha * alpha))
        return alpha, sigma

    def _derivatives(self, t):
        alpha, sigma = self._alpha_sigma(t)
        dalpha = 0.5 * self._beta(1.0 - t) * alpha
        if sigma == 0.0:
            return dalpha, -math.inf
        return dalpha, -alpha * dalpha / sigma


@dataclass(frozen=True)
class VEPath(ProbPath):
    """Variance-exploding path: alpha = 1, geometric sigma decay.

    sigma_t = sigma_min^t * sigma_max^(1-t), so sigma runs from sigma_max
    at t=0 down to sigma_min at t=1. The attainable SNR range is the
    bounded interval [1/sigma_max, 1/sigma_min].
    """

    sigma_min: float = 0.01
    sigma_max: float = 50.0
    kind: str = "ve"

    def __post_init__(self):
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")

    def _alpha_sigma(self, t):
        sigma = self.sigma_min**t * self.sigma_max ** (1.0 - t)
        return 1.0, sigma

    def _derivatives(self, t):
        _, sigma = self._alpha_sigma(t)
        return 0.0, -math.log(self.sigma_max / self.sigma_min) * sigma


@dataclass(frozen=True)
class CustomPath(ProbPath):
    """Path defined by user-supplied closed-form schedule callables.

    Derivative callables are optional; central finite differences
    (one-sided at the endpoints, h = 1e-6) fill in when absent.
    """

    alpha_fn: Callable[[float], float] = None  # type: ignore[assignment]
    sigma_fn: Callable[[float], float] = None  # type: ignore[assignment]
    dalpha_fn: Optional[Callable[[float], float]] = None
    dsigma_fn: Optional[Callable[[float], float]] = None
    kind: str = "custom"

    _FD_H = 1e-6

    def __post_init__(self):
        if self.alpha_fn is None or self.sigma_fn is None:
            raise ValueError("alpha_fn and sigma_fn are required")

    def _alpha_sigma(self, t):
        return float(self.alpha_fn(t)), float(self.sigma_fn(t))

    def _fd(self, fn, t):
        h = self._FD_H
        lo, hi = max(0.0, t - h), min(1.0, t + h)
        return (float(fn(hi)) - float(fn(lo))) / (hi - lo)

    def _derivatives(self, t):
        dalpha = float(self.dalpha_fn(t)) if self.dalpha_fn else self._fd(self.alpha_fn, t)
        dsigma = float(self.dsigma_fn(t)) if self.dsigma_fn else self._fd(self.sigma_fn, t)
        return dalpha, dsigma


_PATH_KINDS = {
    "cond_ot": CondOTPath,
    "vp": VPPath,
    "ve": VEPath,
}


def make_path(kind: str, params: dict | None = None) -> ProbPath:
    """Construct a path from its config-file representation."""
    try:
        cls = _PATH_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown path kind {kind!r}; expected one of {sorted(_PATH_KINDS)}") from None
    return cls(**(params or {}))
