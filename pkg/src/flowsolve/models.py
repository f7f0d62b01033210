"""Model abstractions: denoisers, vector fields, and the analytic mixture prior.

A denoiser predicts the clean signal E[x1 | x_t]; a vector-field model is
the ODE drift whose flow transports the path marginals. For affine
Gaussian paths the two are interchangeable through closed-form linear
relations, and a denoiser trained under one path can be re-used under
another by matching signal-to-noise ratios. The Gaussian-mixture prior
makes all of these objects available in closed form, including the
vector-Jacobian product the guidance correction needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .errors import RangeUnattainableError, SingularityError
from .paths import ProbPath

__all__ = [
    "Denoiser",
    "VectorFieldModel",
    "GaussianMixture",
    "vf_coefficients",
    "denoiser_to_vf",
    "vf_to_denoiser",
    "retime",
    "gmm_denoiser",
    "gmm_log_marginal",
    "make_fd_vjp",
]

EvalFn = Callable[[np.ndarray, float], np.ndarray]
VjpFn = Callable[[np.ndarray, float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Denoiser:
    """Clean-signal predictor with its vector-Jacobian product.

    ``evaluator(x_t, t)`` maps (..., d) to (..., d); ``vjp(x_t, t, v)``
    returns v @ d(evaluator)/d(x_t), row-wise over leading axes.
    """

    evaluator: EvalFn
    vjp: VjpFn
    native_path: ProbPath


@dataclass(frozen=True)
class VectorFieldModel:
    """ODE drift model; ``vjp`` is optional and used for conversions."""

    evaluator: EvalFn
    native_path: ProbPath
    vjp: Optional[VjpFn] = None


def vf_coefficients(path: ProbPath, t: float) -> tuple[float, float]:
    """Coefficients (c1, c2) of the drift v = c1 * x1_hat + c2 * x_t.

    c1 = alpha_t * d ln(alpha_t / sigma_t) / dt and c2 = d ln sigma_t / dt,
    computed over a common denominator so the conditional-OT case reduces
    to ((x1_hat - x_t) / (1 - t)) at machine precision.
    """
    a, s, da, ds, _ = path.schedule(t)
    if s == 0.0:
        raise SingularityError(t, "drift conversion (sigma = 0)")
    return (da * s - a * ds) / s, ds / s


def denoiser_to_vf(d: Denoiser, path: ProbPath) -> VectorFieldModel:
    """Express a denoiser as the equivalent drift under the given path."""

    def evaluator(x, t):
        c1, c2 = vf_coefficients(path, t)
        return c1 * d.evaluator(x, t) + c2 * np.asarray(x, dtype=np.float64)

    def vjp(x, t, v):
        c1, c2 = vf_coefficients(path, t)
        return c1 * d.vjp(x, t, v) + c2 * np.asarray(v, dtype=np.float64)

    return VectorFieldModel(evaluator=evaluator, native_path=path, vjp=vjp)


def vf_to_denoiser(m: VectorFieldModel, path: ProbPath) -> Denoiser:
    """Invert the drift relation to recover the denoiser."""

    def coefficients(t):
        c1, c2 = vf_coefficients(path, t)
        if c1 == 0.0 or not np.isfinite(c1):
            raise SingularityError(t, "denoiser recovery (degenerate drift coefficient)")
        return c1, c2

    def evaluator(x, t):
        c1, c2 = coefficients(t)
        x = np.asarray(x, dtype=np.float64)
        return (m.evaluator(x, t) - c2 * x) / c1

    if m.vjp is not None:
        def vjp(x, t, v):
            c1, c2 = coefficients(t)
            return (m.vjp(x, t, v) - c2 * np.asarray(v, dtype=np.float64)) / c1
    else:
        vjp = make_fd_vjp(evaluator)

    return Denoiser(evaluator=evaluator, vjp=vjp, native_path=path)


def retime(d: Denoiser, target_path: ProbPath) -> Denoiser:
    """Adapt a denoiser to a different path by matching SNR levels.

    The returned denoiser evaluates the original at the SNR-matched time
    t' and at the rescaled state alpha'_{t'} * x_t / alpha_t; its vjp
    carries the same scale factor by the chain rule.
    """
    native = d.native_path
    if target_path == native:
        return d

    def matched(x, t):
        snr = target_path.snr(t)
        try:
            tp = native.inverse_snr(snr)
        except RangeUnattainableError as err:
            min_t = None
            lo, hi = target_path.snr_bounds()
            if snr < err.snr_min and err.snr_min <= hi:
                min_t = target_path.inverse_snr(err.snr_min)
            raise RangeUnattainableError(snr, err.snr_min, err.snr_max, min_usable_t=min_t) from None
        a_target = target_path.schedule(t).alpha
        if a_target == 0.0:
            raise SingularityError(t, "retiming state rescale (alpha = 0)")
        scale = native.schedule(tp).alpha / a_target
        return scale * np.asarray(x, dtype=np.float64), tp, scale

    def evaluator(x, t):
        xs, tp, _ = matched(x, t)
        return d.evaluator(xs, tp)

    def vjp(x, t, v):
        xs, tp, scale = matched(x, t)
        return scale * d.vjp(xs, tp, v)

    return Denoiser(evaluator=evaluator, vjp=vjp, native_path=target_path)


def make_fd_vjp(evaluator: EvalFn, h_scale: float = 1e-4) -> VjpFn:
    """Central-difference fallback vjp for models without an analytic Jacobian."""

    def vjp(x, t, v):
        x = np.asarray(x, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        h = h_scale * (1.0 + np.max(np.abs(x)))
        out = np.empty_like(x)
        d = x.shape[-1]
        for j in range(d):
            step = np.zeros(d)
            step[j] = h
            col = (evaluator(x + step, t) - evaluator(x - step, t)) / (2.0 * h)
            out[..., j] = np.sum(v * col, axis=-1)
        return out

    return vjp


# --------------------------------------------------------------------------
# Gaussian-mixture prior
# --------------------------------------------------------------------------

_JITTER_BASE = 1e-10
_JITTER_RETRIES = 3


def _chol_with_jitter(mat: np.ndarray):
    """Cholesky factorization with escalating diagonal jitter (x10, 3 retries)."""
    scale = max(1.0, float(np.mean(np.diag(mat))))
    jitter = 0.0
    for attempt in range(_JITTER_RETRIES + 1):
        try:
            return cho_factor(mat + jitter * np.eye(mat.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            jitter = _JITTER_BASE * scale * 10.0**attempt
    raise np.linalg.LinAlgError(
        f"matrix not positive definite after jitter escalation to {jitter:g}"
    )


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of Gaussians; covariances either full (K, d, d) or isotropic (K,).

    Weights must be positive and sum to one within 1e-12; full covariances
    must be symmetric positive semi-definite (validated by a jittered
    Cholesky at construction).
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    isotropic: bool

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        cov = np.asarray(self.covariances, dtype=np.float64)
        if mu.ndim != 2:
            raise ValueError(f"means must be (K, d), got shape {mu.shape}")
        k, d = mu.shape
        if w.shape != (k,):
            raise ValueError(f"weights must be ({k},), got {w.shape}")
        if np.any(w <= 0.0):
            raise ValueError("weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1 within 1e-12")
        if self.isotropic:
            if cov.shape != (k,):
                raise ValueError(f"isotropic covariances must be ({k},), got {cov.shape}")
            if np.any(cov < 0.0):
                raise ValueError("isotropic covariance scales must be non-negative")
        else:
            if cov.shape != (k, d, d):
                raise ValueError(f"covariances must be ({k}, {d}, {d}), got {cov.shape}")
            for i in range(k):
                if not np.allclose(cov[i], cov[i].T, atol=1e-12, rtol=0.0):
                    raise ValueError(f"covariance {i} is not symmetric")
                _chol_with_jitter(cov[i])
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def full_covariances(self) -> np.ndarray:
        """Covariances as explicit (K, d, d) matrices."""
        if not self.isotropic:
            return self.covariances
        eye = np.eye(self.dim)
        return self.covariances[:, None, None] * eye

    @classmethod
    def standard_normal(cls, dim: int) -> "GaussianMixture":
        return cls(np.array([1.0]), np.zeros((1, dim)), np.array([1.0]), isotropic=True)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n samples; component choices and noise come from ``rng``."""
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        out = self.means[comps].copy()
        if self.isotropic:
            out += np.sqrt(self.covariances[comps])[:, None] * noise
            return out
        for k in range(self.n_components):
            rows = comps == k
            if not np.any(rows):
                continue
            chol = np.linalg.cholesky(
                self.covariances[k] + _JITTER_BASE * np.eye(self.dim)
            )
            out[rows] += noise[rows] @ chol.T
        return out

    @classmethod
    def from_spec(cls, spec: dict) -> "GaussianMixture":
        """Build from the JSON document form (see the README for the schema)."""
        spec = dict(spec)
        weights = spec.pop("weights")
        means = spec.pop("means")
        cov = spec.pop("covariances")
        if spec:
            raise ValueError(f"unexpected mixture keys: {sorted(spec)}")
        if isinstance(cov, dict):
            extra = set(cov) - {"isotropic"}
            if extra:
                raise ValueError(f"unexpected covariance keys: {sorted(extra)}")
            return cls(np.asarray(weights), np.asarray(means), np.asarray(cov["isotropic"]), isotropic=True)
        return cls(np.asarray(weights), np.asarray(means), np.asarray(cov), isotropic=False)

    def to_spec(self) -> dict:
        cov = (
            {"isotropic": self.covariances.tolist()}
            if self.isotropic
            else self.covariances.tolist()
        )
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": cov,
        }


def _mixture_state(gmm: GaussianMixture, alpha: float, sigma: float, x2: np.ndarray):
    """Shared per-component quantities at one (alpha, sigma).

    Returns responsibilities w (B, K), whitened residuals sol[k] =
    C_k^{-1} (x - alpha mu_k) of shape (K, B, d), posterior means m
    (K, B, d), and the per-component log densities (B, K), where
    C_k = alpha^2 Sigma_k + sigma^2 I is the component marginal covariance.
    """
    k_comp, d = gmm.n_components, gmm.dim
    b = x2.shape[0]
    s2 = sigma * sigma
    a2 = alpha * alpha
    sol = np.empty((k_comp, b, d))
    m = np.empty((k_comp, b, d))
    loglik = np.empty((b, k_comp))
    norm = d * np.log(2.0 * np.pi)
    for k in range(k_comp):
        diff = x2 - alpha * gmm.means[k]
        if gmm.isotropic:
            c = a2 * gmm.covariances[k] + s2
            sol[k] = diff / c
            m[k] = gmm.means[k] + alpha * gmm.covariances[k] * sol[k]
            logdet = d * np.log(c)
        else:
            cov = a2 * gmm.covariances[k] + s2 * np.eye(d)
            factor = _chol_with_jitter(cov)
            sol[k] = cho_solve(factor, diff.T).T
            m[k] = gmm.means[k] + alpha * sol[k] @ gmm.covariances[k]
            logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        loglik[:, k] = -0.5 * (norm + logdet + np.sum(diff * sol[k], axis=-1))
    logits = np.log(gmm.weights) + loglik
    w = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
    return w, sol, m, loglik


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    return (x[None, :] if single else x.reshape(-1, x.shape[-1])), x.shape, single


def gmm_denoiser(gmm: GaussianMixture, path: ProbPath) -> Denoiser:
    """Closed-form posterior-mean denoiser of a Gaussian mixture under a path.

    The evaluator mixes per-component conjugate posterior means with
    responsibility weights; the vjp adds the responsibility-gradient term
    so it is the exact Jacobian transpose action.
    """

    def evaluator(x, t):
        a, s, _, _, _ = path.schedule(t)
        x2, shape, single = _as_batch(x)
        w, _, m, _ = _mixture_state(gmm, a, s, x2)
        out = np.einsum("bk,kbd->bd", w, m)
        return out[0] if single else out.reshape(shape)

    def vjp(x, t, v):
        a, s, _, _, _ = path.schedule(t)
        x2, shape, single = _as_batch(x)
        v2, _, _ = _as_batch(np.broadcast_to(np.asarray(v, dtype=np.float64), shape))
        w, sol, m, _ = _mixture_state(gmm, a, s, x2)
        # d m_k / d x = alpha Sigma_k C_k^{-1}; d w_k / d x = w_k (g_k - gbar)
        # with g_k = -C_k^{-1} (x - alpha mu_k) = -sol_k.
        gbar = -np.einsum("bk,kbd->bd", w, sol)
        out = np.zeros_like(x2)
        for k in range(gmm.n_components):
            if gmm.isotropic:
                c = a * a * gmm.covariances[k] + s * s
                smooth = (a * gmm.covariances[k] / c) * v2
            else:
                cov = a * a * gmm.covariances[k] + s * s * np.eye(gmm.dim)
                factor = _chol_with_jitter(cov)
                smooth = a * cho_solve(factor, (v2 @ gmm.covariances[k]).T).T
            dots = np.sum(v2 * m[k], axis=-1)
            out += w[:, k, None] * smooth
            out += (dots * w[:, k])[:, None] * (-sol[k] - gbar)
        return out[0] if single else out.reshape(shape)

    return Denoiser(evaluator=evaluator, vjp=vjp, native_path=path)


def gmm_log_marginal(gmm: GaussianMixture, path: ProbPath, t: float, x_t) -> np.ndarray | float:
    """log q(x_t) of the mixture marginal at time t (log-space throughout)."""
    a, s, _, _, _ = path.schedule(t)
    x2, shape, single = _as_batch(x_t)
    _, _, _, loglik = _mixture_state(gmm, a, s, x2)
    out = logsumexp(np.log(gmm.weights) + loglik, axis=-1)
    return float(out[0]) if single else out.reshape(shape[:-1])
