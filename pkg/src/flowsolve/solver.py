"""Guided flow-ODE solver: initialization, Euler integration, readout.

A run starts at t0 > 0 from a noised lift of the observation, integrates
the corrected drift on a uniform grid up to 1 - end_epsilon with fixed
Euler steps, and reads out the final prediction through the denoiser
(the drift conversion is singular at t = 1, and the denoiser readout is
its exact limit under the conditional-OT path). Everything is
deterministic given the seed; batches of runs share the grid and derive
one RNG per run index.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, DivergenceError, RangeUnattainableError
from .guidance import (
    GuidanceConfig,
    correct_vf,
    correction_coefficient,
    gamma,
    null_range_combine,
    pigdm_g,
    rt2,
)
from .models import Denoiser, VectorFieldModel, retime, vf_coefficients, vf_to_denoiser
from .operators import DownsampleOperator, LinearOperator
from .paths import ProbPath

__all__ = [
    "InitMode",
    "Lift",
    "SolveRun",
    "SolveResult",
    "derive_seed",
    "derive_rng",
    "grid_times",
    "validate_grid",
    "initialize",
    "solve",
    "solve_batch",
]

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def derive_seed(seed: int, index: int) -> int:
    """Per-run seed: splitmix64 finalizer of seed + (index + 1) * golden ratio."""
    z = (int(seed) + (index + 1) * _GOLDEN) & _MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK64
    z ^= z >> 31
    return z


def derive_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, index))


class InitMode(str, enum.Enum):
    Y = "y"          # x_t0 = alpha * lift(y) + sigma * eps
    PINV = "pinv"    # x_t0 = alpha * pinv(A) y + sigma * eps


class Lift(str, enum.Enum):
    """How the observation is mapped into state space when shapes differ."""

    IDENTITY = "identity"
    NEAREST = "nearest_neighbor"
    PINV = "pinv"


@dataclass(frozen=True)
class SolveRun:
    """A fully specified sampling job."""

    path: ProbPath
    model: Union[Denoiser, VectorFieldModel]
    operator: LinearOperator
    y: np.ndarray
    guidance: GuidanceConfig
    t0: float = 0.2
    n_steps: int = 100
    init_mode: InitMode = InitMode.Y
    lift: Lift = Lift.IDENTITY
    seed: int = 0
    end_epsilon: float = 1e-3
    record_trajectory: bool = False

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64).ravel())
        object.__setattr__(self, "init_mode", InitMode(self.init_mode))
        object.__setattr__(self, "lift", Lift(self.lift))
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        if not 0.0 < self.end_epsilon < 1.0:
            raise ConfigError(f"end_epsilon must lie in (0, 1), got {self.end_epsilon}")
        if not 0.0 < self.t0 < 1.0 - self.end_epsilon:
            raise ConfigError(
                f"t0 must lie in (0, {1.0 - self.end_epsilon}), got {self.t0}"
            )
        n_out = self.operator.shape[0]
        if self.y.shape != (n_out,):
            raise ConfigError(
                f"observation has {self.y.shape[0]} entries, operator produces {n_out}"
            )

    @property
    def state_dim(self) -> int:
        return self.operator.shape[1]


@dataclass
class SolveResult:
    """Output of a solve: final prediction plus per-step bookkeeping."""

    x1: np.ndarray
    trajectory: Optional[list] = None
    diagnostics: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


def grid_times(run: SolveRun) -> np.ndarray:
    """The uniform integration grid t0, ..., 1 - end_epsilon (n_steps + 1 points)."""
    return np.linspace(run.t0, 1.0 - run.end_epsilon, run.n_steps + 1)


def _as_denoiser(run: SolveRun) -> Denoiser:
    model = run.model
    if isinstance(model, VectorFieldModel):
        den = vf_to_denoiser(model, model.native_path)
    else:
        den = model
    return retime(den, run.path)


def validate_grid(run: SolveRun) -> list[tuple[float, float]]:
    """Precompute the SNR-matched native time for every grid point.

    Fails fast with one configuration error naming the feasible start
    window when any grid time cannot be matched on the model's native path.
    """
    native = run.model.native_path
    grid = grid_times(run)
    if native == run.path:
        return [(float(t), float(t)) for t in grid]
    pairs = []
    failures = []
    for t in grid:
        try:
            pairs.append((float(t), native.inverse_snr(run.path.snr(float(t)))))
        except RangeUnattainableError:
            failures.append(float(t))
    if failures:
        nat_lo, nat_hi = native.snr_bounds()
        tgt_lo, tgt_hi = run.path.snr_bounds()
        min_t0 = run.path.inverse_snr(nat_lo) if nat_lo > tgt_lo else 0.0
        max_t = run.path.inverse_snr(nat_hi) if nat_hi < tgt_hi else 1.0
        raise ConfigError(
            f"retiming onto the model's native path fails at {len(failures)} of "
            f"{grid.size} grid times (first failure t={failures[0]!r}); the "
            f"feasible window on the sampling path is [{min_t0!r}, {max_t!r}]"
        )
    return pairs


def _lift_observation(run: SolveRun) -> np.ndarray:
    op = run.operator
    if run.init_mode is InitMode.PINV or run.lift is Lift.PINV:
        return op.pinv_apply(run.y)
    if run.lift is Lift.IDENTITY:
        n_out, n_in = op.shape
        if n_out != n_in:
            raise ConfigError(
                f"identity lift needs a square operator, got {op.shape}; "
                "choose the nearest-neighbor or pseudo-inverse lift"
            )
        return run.y
    if not isinstance(op, DownsampleOperator):
        raise ConfigError(
            f"nearest-neighbor lift is defined for downsampling operators, not {op.kind}"
        )
    f = op.factor
    if len(op.input_shape) == 1:
        return np.repeat(run.y, f)
    h, w = op.output_shape
    grid = run.y.reshape(h, w)
    return np.repeat(np.repeat(grid, f, axis=0), f, axis=1).ravel()


def initialize(run: SolveRun, rng: np.random.Generator) -> np.ndarray:
    """Draw x_{t0} = alpha_{t0} * lifted_y + sigma_{t0} * eps."""
    alpha, sigma, _, _, _ = run.path.schedule(run.t0)
    lifted = _lift_observation(run)
    return alpha * lifted + sigma * rng.standard_normal(run.state_dim)


def _integrate(run: SolveRun, states: np.ndarray) -> SolveResult:
    """Euler-integrate a batch of states from t0 to the readout time."""
    validate_grid(run)
    den = _as_denoiser(run)
    path, op, y, gcfg = run.path, run.operator, run.y, run.guidance
    grid = grid_times(run)
    dt = (grid[-1] - grid[0]) / run.n_steps
    n_steps, batch = run.n_steps, states.shape[0]

    warnings: list = []
    counters = {"denoiser_evals": 0, "vjp_evals": 0}
    residual_norm = np.empty((n_steps, batch))
    g_norm = np.empty((n_steps, batch))
    coeff_log = np.empty(n_steps)
    trajectory = [(float(grid[0]), states.copy())] if run.record_trajectory else None

    x = states
    for k in range(n_steps):
        t = float(grid[k])
        x1_hat = den.evaluator(x, t)
        counters["denoiser_evals"] += 1
        if gcfg.null_range:
            x1_hat = null_range_combine(op, y, x1_hat)

        def bound_vjp(cotangent):
            counters["vjp_evals"] += 1
            return den.vjp(x, t, cotangent)

        r2 = rt2(gcfg.rt2_rule, path, t)
        g = pigdm_g(op, y, x1_hat, bound_vjp, r2, gcfg.sigma_y, warn_sink=warnings)
        c1, c2 = vf_coefficients(path, t)
        v = correct_vf(c1 * x1_hat + c2 * x, g, path, t, gcfg.gamma_rule)

        residual_norm[k] = np.linalg.norm(y - op.apply(x1_hat), axis=-1)
        g_norm[k] = np.linalg.norm(g, axis=-1)
        coeff_log[k] = correction_coefficient(path, t) * gamma(gcfg.gamma_rule, path, t)

        x = x + dt * v
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k, t, diagnostics={"coeff": coeff_log[: k + 1]})
        if trajectory is not None:
            trajectory.append((float(grid[k + 1]), x.copy()))

    t_end = float(grid[-1])
    x1_out = den.evaluator(x, t_end)
    counters["denoiser_evals"] += 1
    if gcfg.null_range:
        x1_out = null_range_combine(op, y, x1_out)
    if not np.all(np.isfinite(x1_out)):
        raise DivergenceError(n_steps, t_end, diagnostics={"coeff": coeff_log})

    diagnostics = {
        "step": np.arange(n_steps),
        "t": grid[:-1].copy(),
        "residual_norm": residual_norm,
        "g_norm": g_norm,
        "coeff": coeff_log,
        **counters,
    }
    return SolveResult(x1=x1_out, trajectory=trajectory, diagnostics=diagnostics, warnings=warnings)


def solve(run: SolveRun, run_index: int = 0) -> SolveResult:
    """Run one sampling job; deterministic given (run.seed, run_index)."""
    rng = derive_rng(run.seed, run_index)
    x0 = initialize(run, rng)
    result = _integrate(run, x0[None, :])
    result.x1 = result.x1[0]
    result.diagnostics["residual_norm"] = result.diagnostics["residual_norm"][:, 0]
    result.diagnostics["g_norm"] = result.diagnostics["g_norm"][:, 0]
    if result.trajectory is not None:
        result.trajectory = [(t, row[0]) for t, row in result.trajectory]
    return result


def solve_batch(run: SolveRun, n_runs: int, first_index: int = 0) -> SolveResult:
    """Integrate ``n_runs`` independent runs of the same job as one batch.

    Run i draws its initialization noise from the RNG derived for index
    first_index + i; the shared drift arithmetic is vectorized across rows.
    """
    states = np.stack(
        [initialize(run, derive_rng(run.seed, first_index + i)) for i in range(n_runs)]
    )
    return _integrate(run, states)
