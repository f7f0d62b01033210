"""Exact ground truth for Gaussian-mixture priors under linear measurements.

Everything here is closed form: the posterior over clean signals, the
conditional clean-signal expectation given both the noisy state and the
measurement, the conditional drift, and the measurement log-evidence.
These are the references that the guided approximations are judged
against, so they deliberately share as little code with the guidance
path as possible.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import logsumexp

from .errors import ConfigError
from .models import (
    GaussianMixture,
    _as_batch,
    _chol_with_jitter,
    gmm_denoiser,
    gmm_log_marginal,
    vf_coefficients,
)
from .operators import LinearOperator
from .paths import ProbPath

__all__ = [
    "exact_posterior",
    "exact_conditional_denoiser",
    "exact_conditional_vf",
    "log_evidence",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


def exact_posterior(gmm: GaussianMixture, op: LinearOperator, sigma_y: float, y) -> GaussianMixture:
    """Posterior mixture over clean signals given y = A x1 + sigma_y * eps.

    Each component receives a conjugate Gaussian update; mixture weights
    are reweighted by per-component evidence in log space. With
    sigma_y = 0 this is exact affine conditioning on A x1 = y, which
    requires the evidence covariance A Sigma_k A^T to be nonsingular
    (full row rank A against a positive-definite component).
    """
    y = np.asarray(y, dtype=np.float64)
    n, m = op.shape
    if y.shape != (n,):
        raise ConfigError(f"observation shape {y.shape} does not match operator output ({n},)")
    a_mat = op.dense()
    covs = gmm.full_covariances()
    k_comp = gmm.n_components
    means = np.empty((k_comp, m))
    new_covs = np.empty((k_comp, m, m))
    log_ev = np.empty(k_comp)
    for k in range(k_comp):
        cross = a_mat @ covs[k]                      # A Sigma
        s_mat = cross @ a_mat.T + sigma_y**2 * np.eye(n)
        factor = _chol_with_jitter(s_mat)
        resid = y - a_mat @ gmm.means[k]
        solved = cho_solve(factor, np.column_stack([resid[:, None], cross]))
        means[k] = gmm.means[k] + cross.T @ solved[:, 0]
        cov = covs[k] - cross.T @ solved[:, 1:]
        new_covs[k] = 0.5 * (cov + cov.T)
        logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        log_ev[k] = -0.5 * (n * _LOG_2PI + logdet + resid @ solved[:, 0])
    logits = np.log(gmm.weights) + log_ev
    weights = np.exp(logits - logsumexp(logits))
    weights = weights / weights.sum()
    return GaussianMixture(weights, means, new_covs, isotropic=False)


def _joint_state(gmm, op, sigma_y, path, t, x2, y):
    """Per-component conditioning of x1 on the pair z = (x_t, y).

    Returns conditional means (K, B, m) and pair log densities (B, K)
    under each component's jointly Gaussian model of (x1, x_t, y).
    """
    a_mat = op.dense()
    n, m = op.shape
    alpha, sigma, _, _, _ = path.schedule(t)
    covs = gmm.full_covariances()
    k_comp = gmm.n_components
    b = x2.shape[0]
    z = np.concatenate([x2, np.broadcast_to(y, (b, n))], axis=-1)
    cond_means = np.empty((k_comp, b, m))
    loglik = np.empty((b, k_comp))
    for k in range(k_comp):
        sig = covs[k]
        sig_at = sig @ a_mat.T
        czz = np.empty((m + n, m + n))
        czz[:m, :m] = alpha**2 * sig + sigma**2 * np.eye(m)
        czz[:m, m:] = alpha * sig_at
        czz[m:, :m] = alpha * sig_at.T
        czz[m:, m:] = a_mat @ sig_at + sigma_y**2 * np.eye(n)
        cxz = np.concatenate([alpha * sig, sig_at], axis=1)
        factor = _chol_with_jitter(czz)
        mean_z = np.concatenate([alpha * gmm.means[k], a_mat @ gmm.means[k]])
        dz = z - mean_z
        sol = cho_solve(factor, dz.T).T
        cond_means[k] = gmm.means[k] + sol @ cxz.T
        logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        loglik[:, k] = -0.5 * ((m + n) * _LOG_2PI + logdet + np.sum(dz * sol, axis=-1))
    return cond_means, loglik


def exact_conditional_denoiser(
    gmm: GaussianMixture,
    op: LinearOperator,
    sigma_y: float,
    y,
    path: ProbPath,
    t: float,
    x_t,
) -> np.ndarray:
    """E[x1 | x_t, y], exactly.

    For sigma_y > 0 each component conditions the jointly Gaussian
    (x1, x_t, y) on the observed pair and mixes with pair-evidence
    responsibilities. For sigma_y = 0 the measurement is an exact affine
    constraint, so the prior is first conditioned on it (Schur complement)
    and the resulting posterior mixture is denoised unconditionally; the
    two routes agree wherever both are defined.
    """
    y = np.asarray(y, dtype=np.float64)
    if sigma_y == 0.0:
        posterior = exact_posterior(gmm, op, 0.0, y)
        return gmm_denoiser(posterior, path).evaluator(x_t, t)
    x2, shape, single = _as_batch(x_t)
    cond_means, loglik = _joint_state(gmm, op, sigma_y, path, t, x2, y)
    logits = np.log(gmm.weights) + loglik
    w = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
    out = np.einsum("bk,kbd->bd", w, cond_means)
    return out[0] if single else out.reshape(shape)


def exact_conditional_vf(
    gmm: GaussianMixture,
    op: LinearOperator,
    sigma_y: float,
    y,
    path: ProbPath,
    t: float,
    x_t,
) -> np.ndarray:
    """The drift whose flow transports the measurement-conditional marginals."""
    c1, c2 = vf_coefficients(path, t)
    x_hat = exact_conditional_denoiser(gmm, op, sigma_y, y, path, t, x_t)
    return c1 * x_hat + c2 * np.asarray(x_t, dtype=np.float64)


def log_evidence(
    gmm: GaussianMixture,
    op: LinearOperator,
    sigma_y: float,
    path: ProbPath,
    t: float,
    x_t,
    y,
) -> np.ndarray | float:
    """Closed-form log q(y | x_t) = log q(x_t, y) - log q(x_t)."""
    y = np.asarray(y, dtype=np.float64)
    x2, shape, single = _as_batch(x_t)
    _, pair_loglik = _joint_state(gmm, op, sigma_y, path, t, x2, y)
    log_joint = logsumexp(np.log(gmm.weights) + pair_loglik, axis=-1)
    log_marg = np.atleast_1d(gmm_log_marginal(gmm, path, t, x2))
    out = log_joint - log_marg
    return float(out[0]) if single else out.reshape(shape[:-1])
