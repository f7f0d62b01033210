"""Run-configuration files: strict JSON schema, canonical serialization.

A run config is a JSON object with blocks for the sampling path, the
prior model, the measurement operator, the guidance settings, and the
solver. Unknown keys are rejected everywhere so typos fail loudly, and
serialization is canonical (sorted keys, exact float round-trip), making
parse -> serialize -> parse a fixed point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import ConfigError, FlowSolveError
from .guidance import GuidanceConfig
from .models import Denoiser, GaussianMixture, VectorFieldModel, denoiser_to_vf, gmm_denoiser
from .operators import LinearOperator, operator_from_spec
from .paths import ProbPath, make_path
from .solver import SolveRun
from .tensor_io import read_tensor

__all__ = [
    "load_config",
    "validate_config",
    "canonical_json",
    "load_gmm",
    "RunBundle",
    "build_bundle",
    "SWEEP_AXES",
    "apply_overrides",
]

_TOP_KEYS = {
    "name",
    "output_dir",
    "repeat",
    "path",
    "model",
    "operator",
    "guidance",
    "solver",
    "observation",
    "ground_truth",
    "write_pgm",
    "probes",
}
_REQUIRED_TOP = {"name", "path", "model", "operator", "guidance"}

_PATH_KEYS = {"kind", "params"}
_MODEL_KEYS = {"gmm", "native_path", "parameterization"}
_GUIDANCE_KEYS = {"rt2", "gamma", "sigma_y", "null_range"}
_SOLVER_KEYS = {"t0", "n_steps", "init_mode", "lift", "seed", "end_epsilon"}
_PROBE_KEYS = {
    "count",
    "t_min",
    "t_max",
    "tolerance",
    "seed",
    "gamma_scale",
    "strict",
    "moment_runs",
    "moment_steps",
}

# Sweep axis -> (config block, key within the block).
SWEEP_AXES = {
    "t0": ("solver", "t0"),
    "n_steps": ("solver", "n_steps"),
    "init_mode": ("solver", "init_mode"),
    "gamma_rule": ("guidance", "gamma"),
    "rt2_rule": ("guidance", "rt2"),
    "sigma_y": ("guidance", "sigma_y"),
    "null_range": ("guidance", "null_range"),
}


def _check_keys(block: dict, allowed: set, where: str, required: set = frozenset()):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(block).__name__}")
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(block)
    if missing:
        raise ConfigError(f"{where}: missing required keys {sorted(missing)}")


def validate_config(cfg: dict) -> dict:
    """Structural validation; value errors surface later when building."""
    _check_keys(cfg, _TOP_KEYS, "config", _REQUIRED_TOP)
    _check_keys(cfg["path"], _PATH_KEYS, "config.path", {"kind"})
    _check_keys(cfg["model"], _MODEL_KEYS, "config.model", {"gmm"})
    if "native_path" in cfg["model"]:
        _check_keys(cfg["model"]["native_path"], _PATH_KEYS, "config.model.native_path", {"kind"})
    _check_keys(cfg["guidance"], _GUIDANCE_KEYS, "config.guidance")
    _check_keys(cfg.get("solver", {}), _SOLVER_KEYS, "config.solver")
    if "probes" in cfg:
        _check_keys(cfg["probes"], _PROBE_KEYS, "config.probes")
    if not isinstance(cfg.get("operator"), dict):
        raise ConfigError("config.operator must be a JSON object")
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from None
    return validate_config(cfg)


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def load_gmm(ref, base_dir: Path) -> GaussianMixture:
    """Load a mixture from an inline spec or a JSON document path."""
    if isinstance(ref, dict):
        spec = ref
    else:
        gmm_path = Path(base_dir) / ref
        if not gmm_path.exists():
            raise ConfigError(f"mixture file not found: {gmm_path}")
        try:
            spec = json.loads(gmm_path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{gmm_path}: invalid JSON: {err}") from None
    try:
        return GaussianMixture.from_spec(spec)
    except (ValueError, KeyError, np.linalg.LinAlgError) as err:
        raise ConfigError(f"invalid mixture spec: {err}") from None


@dataclass
class RunBundle:
    """Everything a command needs, assembled from one config file."""

    name: str
    output_dir: Path
    repeat: int
    path: ProbPath
    native_path: ProbPath
    gmm: GaussianMixture
    operator: LinearOperator
    guidance: GuidanceConfig
    run: SolveRun
    y: np.ndarray
    ground_truth: Optional[np.ndarray]
    write_pgm: bool
    probes: dict
    config: dict


def _build_path(spec: dict) -> ProbPath:
    try:
        return make_path(spec["kind"], spec.get("params"))
    except (ValueError, TypeError) as err:
        raise ConfigError(f"invalid path spec: {err}") from None


def build_bundle(cfg: dict, base_dir, seed_override: Optional[int] = None) -> RunBundle:
    """Materialize a validated config into live objects.

    File references resolve against ``base_dir`` (the config's directory).
    """
    cfg = validate_config(cfg)
    base_dir = Path(base_dir)
    path = _build_path(cfg["path"])
    native_path = _build_path(cfg["model"].get("native_path", cfg["path"]))
    gmm = load_gmm(cfg["model"]["gmm"], base_dir)

    try:
        operator = operator_from_spec(cfg["operator"], gmm.dim)
    except (ValueError, KeyError, FlowSolveError) as err:
        raise ConfigError(f"invalid operator spec: {err}") from None

    g = cfg["guidance"]
    try:
        guidance = GuidanceConfig(
            rt2_rule=g.get("rt2", "flow"),
            gamma_rule=g.get("gamma", "unadaptive"),
            sigma_y=float(g.get("sigma_y", 0.0)),
            null_range=bool(g.get("null_range", False)),
        )
    except ValueError as err:
        raise ConfigError(f"invalid guidance spec: {err}") from None

    parameterization = cfg["model"].get("parameterization", "denoiser")
    if parameterization not in ("denoiser", "vector_field"):
        raise ConfigError(f"unknown parameterization {parameterization!r}")
    model: Denoiser | VectorFieldModel = gmm_denoiser(gmm, native_path)
    if parameterization == "vector_field":
        model = denoiser_to_vf(model, native_path)

    if "observation" in cfg:
        obs_path = base_dir / cfg["observation"]
        if not obs_path.exists():
            raise ConfigError(f"observation file not found: {obs_path}")
        y = read_tensor(obs_path).ravel()
    else:
        raise ConfigError("config.observation is required")

    ground_truth = None
    if "ground_truth" in cfg:
        gt_path = base_dir / cfg["ground_truth"]
        if not gt_path.exists():
            raise ConfigError(f"ground-truth file not found: {gt_path}")
        ground_truth = read_tensor(gt_path)

    s = cfg.get("solver", {})
    seed = int(s.get("seed", 0)) if seed_override is None else int(seed_override)
    try:
        run = SolveRun(
            path=path,
            model=model,
            operator=operator,
            y=y,
            guidance=guidance,
            t0=float(s.get("t0", 0.2)),
            n_steps=int(s.get("n_steps", 100)),
            init_mode=s.get("init_mode", "y"),
            lift=s.get("lift", "identity"),
            seed=seed,
            end_epsilon=float(s.get("end_epsilon", 1e-3)),
        )
    except (ValueError, FlowSolveError) as err:
        raise ConfigError(f"invalid solver spec: {err}") from None

    probes = dict(cfg.get("probes", {}))
    if seed_override is not None:
        probes["seed"] = int(seed_override)

    return RunBundle(
        name=str(cfg["name"]),
        output_dir=base_dir / cfg.get("output_dir", "out"),
        repeat=int(cfg.get("repeat", 1)),
        path=path,
        native_path=native_path,
        gmm=gmm,
        operator=operator,
        guidance=guidance,
        run=run,
        y=y,
        ground_truth=ground_truth,
        write_pgm=bool(cfg.get("write_pgm", False)),
        probes=probes,
        config=cfg,
    )


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    """Return a new config dict with sweep-axis overrides applied."""
    out = json.loads(json.dumps(cfg))
    for axis, value in overrides.items():
        if axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {axis!r}; allowed: {sorted(SWEEP_AXES)}")
        block, key = SWEEP_AXES[axis]
        out.setdefault(block, {})[key] = value
    return out
