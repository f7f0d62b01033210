"""Command-line surface.

Subcommands:
  solve           run a configured sampling job, write outputs + metrics
  compare-oracle  measure the gap between the guided drift and the exact one
  ablate          sweep configuration axes and collect one metrics CSV
  metrics         compare two tensors (mse / psnr / ssim)

Exit codes: 0 success, 1 tolerance violation in compare-oracle, 2
configuration error, 3 numerical divergence. All randomized commands
honor --seed and are bit-reproducible under it (wall-time columns aside).
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import SWEEP_AXES, apply_overrides, build_bundle, load_config
from .errors import ConfigError, DivergenceError, FlowSolveError
from .guidance import correct_vf, pigdm_g, rt2
from .metrics import mse, psnr, ssim
from .models import gmm_denoiser, vf_coefficients
from .oracle import exact_conditional_vf, exact_posterior
from .solver import derive_rng, solve_batch
from .tensor_io import read_tensor, write_pgm, write_tensor

__all__ = ["main"]

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

# Closed, versioned column sets (schema v1); see README for field semantics.
METRICS_COLUMNS = ["run_id", "psnr", "ssim", "mse", "posterior_mean_error", "nfe", "wall_time_s"]
DIAG_COLUMNS = ["run_id", "step", "t", "residual_norm", "g_norm", "coeff"]
SWEEP_COLUMNS = [
    "cell_id",
    "repeat",
    "t0",
    "n_steps",
    "gamma_rule",
    "init_mode",
    "rt2_rule",
    "sigma_y",
    "null_range",
    "status",
    "psnr",
    "ssim",
    "mse",
    "posterior_mean_error",
    "nfe",
    "wall_time_s",
]
ORACLE_COLUMNS = ["check", "status", "value", "tolerance", "worst_probe", "worst_t"]


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(col)) for col in columns))
    path.write_text("\n".join(lines) + "\n")


def _state_shape(bundle) -> tuple[int, int]:
    shp = getattr(bundle.operator, "input_shape", None)
    if shp is not None and len(shp) == 2:
        return tuple(shp)
    if bundle.ground_truth is not None and bundle.ground_truth.shape[0] > 1:
        return bundle.ground_truth.shape
    return (1, bundle.run.state_dim)


def _posterior_mean(bundle):
    try:
        posterior = exact_posterior(bundle.gmm, bundle.operator, bundle.guidance.sigma_y, bundle.y)
    except (FlowSolveError, np.linalg.LinAlgError):
        return None
    return posterior.weights @ posterior.means


def _run_metrics_row(bundle, run_id, x1, shape, pmean, wall_time):
    row = {"run_id": run_id, "nfe": bundle.run.n_steps + 1, "wall_time_s": wall_time}
    if bundle.ground_truth is not None:
        gt = bundle.ground_truth.ravel()
        row["mse"] = mse(x1, gt)
        row["psnr"] = psnr(x1, gt)
        row["ssim"] = ssim(x1.reshape(shape), gt.reshape(shape))
    if pmean is not None:
        row["posterior_mean_error"] = float(np.linalg.norm(x1 - pmean))
    return row


def _solve_outputs(bundle, out_dir: Path):
    """Run the configured job (repeat times, batched) and write artifacts."""
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = solve_batch(bundle.run, bundle.repeat)
    wall = (time.perf_counter() - start) / bundle.repeat
    shape = _state_shape(bundle)
    pmean = _posterior_mean(bundle)

    metrics_rows = []
    for i in range(bundle.repeat):
        x1 = result.x1[i]
        write_tensor(out_dir / f"{bundle.name}_run{i:04d}.bin", x1.reshape(shape))
        if bundle.write_pgm:
            write_pgm(out_dir / f"{bundle.name}_run{i:04d}.pgm", x1.reshape(shape))
        metrics_rows.append(_run_metrics_row(bundle, i, x1, shape, pmean, wall))

    diag = result.diagnostics
    diag_rows = [
        {
            "run_id": i,
            "step": int(diag["step"][k]),
            "t": diag["t"][k],
            "residual_norm": diag["residual_norm"][k, i],
            "g_norm": diag["g_norm"][k, i],
            "coeff": diag["coeff"][k],
        }
        for i in range(bundle.repeat)
        for k in range(bundle.run.n_steps)
    ]
    _write_csv(out_dir / f"{bundle.name}_metrics.csv", METRICS_COLUMNS, metrics_rows)
    _write_csv(out_dir / f"{bundle.name}_diagnostics.csv", DIAG_COLUMNS, diag_rows)
    return result


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    bundle = build_bundle(cfg, Path(args.config).parent, seed_override=args.seed)
    out_dir = bundle.output_dir
    _solve_outputs(bundle, out_dir)
    print(f"solve: wrote {bundle.repeat} run(s) to {out_dir}")
    return EXIT_OK


def _is_unit_gaussian(gmm) -> bool:
    if gmm.n_components != 1:
        return False
    if gmm.isotropic:
        return bool(np.isclose(gmm.covariances[0], 1.0, rtol=0.0, atol=1e-12))
    return bool(np.allclose(gmm.covariances[0], np.eye(gmm.dim), rtol=0.0, atol=1e-12))


def cmd_compare_oracle(args) -> int:
    cfg = load_config(args.config)
    bundle = build_bundle(cfg, Path(args.config).parent, seed_override=args.seed)
    probes = bundle.probes
    count = int(probes.get("count", 100))
    t_min = float(probes.get("t_min", 0.05))
    t_max = float(probes.get("t_max", 0.95))
    tolerance = float(probes.get("tolerance", 1e-6))
    gamma_scale = float(probes.get("gamma_scale", 1.0))
    strict = bool(probes.get("strict", _is_unit_gaussian(bundle.gmm)))
    seed = int(probes.get("seed", bundle.run.seed))

    path, op, gcfg, y = bundle.path, bundle.operator, bundle.guidance, bundle.y
    den = gmm_denoiser(bundle.gmm, path)
    rng = derive_rng(seed, 0)

    worst = (-1.0, -1, 0.0)  # (gap, probe index, t)
    for i in range(count):
        t = float(rng.uniform(t_min, t_max))
        x1 = bundle.gmm.sample(1, rng)[0]
        x_t = path.sample_xt(x1, t, rng)
        x1_hat = den.evaluator(x_t, t)
        g = pigdm_g(op, y, x1_hat, lambda w: den.vjp(x_t, t, w), rt2(gcfg.rt2_rule, path, t), gcfg.sigma_y)
        c1, c2 = vf_coefficients(path, t)
        v_corr = correct_vf(c1 * x1_hat + c2 * x_t, gamma_scale * g, path, t, gcfg.gamma_rule)
        v_exact = exact_conditional_vf(bundle.gmm, op, gcfg.sigma_y, y, path, t, x_t)
        gap = float(np.max(np.abs(v_corr - v_exact)))
        if gap > worst[0]:
            worst = (gap, i, t)

    rows = [
        {
            "check": "corrected_vs_exact_vf",
            "status": ("PASS" if worst[0] <= tolerance else "FAIL") if strict else "INFO",
            "value": worst[0],
            "tolerance": tolerance if strict else "",
            "worst_probe": worst[1],
            "worst_t": worst[2],
        }
    ]

    moment_runs = int(probes.get("moment_runs", 2048 if strict else 0))
    if strict and moment_runs > 0:
        posterior = exact_posterior(bundle.gmm, op, gcfg.sigma_y, y)
        target_mean = posterior.weights @ posterior.means
        target_cov = posterior.covariances[0]
        result = solve_batch(bundle.run, moment_runs)
        sample_mean = result.x1.mean(axis=0)
        sample_cov = np.cov(result.x1.T, bias=False).reshape(bundle.gmm.dim, bundle.gmm.dim)
        sd = float(np.sqrt(np.max(np.diag(target_cov))))
        mean_tol = 3.0 * sd / np.sqrt(moment_runs) + 0.01
        mean_gap = float(np.max(np.abs(sample_mean - target_mean)))
        cov_tol = 0.02 + 3.0 * sd * sd * np.sqrt(2.0 / moment_runs)
        cov_gap = float(np.linalg.norm(sample_cov - target_cov, ord=2))
        rows.append(
            {
                "check": "posterior_mean_recovery",
                "status": "PASS" if mean_gap <= mean_tol else "FAIL",
                "value": mean_gap,
                "tolerance": mean_tol,
                "worst_probe": "",
                "worst_t": "",
            }
        )
        rows.append(
            {
                "check": "posterior_cov_recovery",
                "status": "PASS" if cov_gap <= cov_tol else "FAIL",
                "value": cov_gap,
                "tolerance": cov_tol,
                "worst_probe": "",
                "worst_t": "",
            }
        )

    out_dir = bundle.output_dir
    _write_csv(out_dir / f"{bundle.name}_oracle_report.csv", ORACLE_COLUMNS, rows)
    failed = False
    for row in rows:
        print(
            f"{row['status']:4s} {row['check']}: value={_fmt(row['value'])}"
            + (f" tolerance={_fmt(row['tolerance'])}" if row["tolerance"] != "" else "")
        )
        failed = failed or row["status"] == "FAIL"
    return EXIT_TOLERANCE if failed else EXIT_OK


def _ablate_cell(cfg, base_dir, seed_override, cell_id, overrides, axis_names):
    """Solve one sweep cell; returns per-repeat rows, never raises."""
    base = {axis: overrides[axis] for axis in axis_names}
    base.update({"cell_id": cell_id})
    try:
        cell_cfg = apply_overrides(cfg, overrides)
        bundle = build_bundle(cell_cfg, base_dir, seed_override=seed_override)
    except ConfigError:
        return [dict(base, repeat=r, status="skipped") for r in range(int(cfg.get("repeat", 1)))]
    effective = {
        "t0": bundle.run.t0,
        "n_steps": bundle.run.n_steps,
        "gamma_rule": bundle.guidance.gamma_rule.value,
        "init_mode": bundle.run.init_mode.value,
        "rt2_rule": bundle.guidance.rt2_rule.value,
        "sigma_y": bundle.guidance.sigma_y,
        "null_range": bundle.guidance.null_range,
    }
    try:
        start = time.perf_counter()
        result = solve_batch(bundle.run, bundle.repeat)
        wall = (time.perf_counter() - start) / bundle.repeat
    except DivergenceError:
        return [dict(effective, cell_id=cell_id, repeat=r, status="diverged") for r in range(bundle.repeat)]
    shape = _state_shape(bundle)
    pmean = _posterior_mean(bundle)
    rows = []
    for r in range(bundle.repeat):
        row = _run_metrics_row(bundle, r, result.x1[r], shape, pmean, wall)
        row.pop("run_id")
        rows.append(dict(effective, cell_id=cell_id, repeat=r, status="ok", **row))
    return rows


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    base_dir = Path(args.config).parent
    bundle = build_bundle(cfg, base_dir, seed_override=args.seed)  # validates the base config
    sweep_path = Path(args.sweep)
    try:
        sweep = json.loads(sweep_path.read_text())
    except OSError as err:
        raise ConfigError(f"cannot read sweep spec {sweep_path}: {err}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{sweep_path}: invalid JSON: {err}") from None
    unknown = set(sweep) - set(SWEEP_AXES)
    if unknown:
        raise ConfigError(f"unknown sweep axes {sorted(unknown)}; allowed: {sorted(SWEEP_AXES)}")
    if not sweep:
        raise ConfigError("sweep spec is empty")

    axis_names = [axis for axis in SWEEP_AXES if axis in sweep]  # canonical order
    value_lists = [list(sweep[axis]) for axis in axis_names]
    cells = list(itertools.product(*value_lists))

    threads = os.environ.get("FLOWSOLVE_THREADS")
    max_workers = max(1, int(threads)) if threads else (os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [
            pool.submit(
                _ablate_cell,
                cfg,
                base_dir,
                args.seed,
                cell_id,
                dict(zip(axis_names, values)),
                axis_names,
            )
            for cell_id, values in enumerate(cells)
        ]
        rows = [row for fut in futures for row in fut.result()]

    out_path = bundle.output_dir / f"{bundle.name}_sweep.csv"
    _write_csv(out_path, SWEEP_COLUMNS, rows)
    print(f"ablate: {len(cells)} cells -> {out_path}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    a = read_tensor(args.a)
    b = read_tensor(args.b)
    print(f"mse={_fmt(mse(a, b))} psnr={_fmt(psnr(a, b))} ssim={_fmt(ssim(a, b))}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowsolve", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="run a configured sampling job")
    p_solve.add_argument("config")
    p_solve.add_argument("--seed", type=int, default=None)
    p_solve.set_defaults(func=cmd_solve)

    p_cmp = sub.add_parser("compare-oracle", help="gap between guided and exact drift")
    p_cmp.add_argument("config")
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.set_defaults(func=cmd_compare_oracle)

    p_abl = sub.add_parser("ablate", help="sweep config axes, collect metrics CSV")
    p_abl.add_argument("config")
    p_abl.add_argument("--sweep", required=True)
    p_abl.add_argument("--seed", type=int, default=None)
    p_abl.set_defaults(func=cmd_ablate)

    p_met = sub.add_parser("metrics", help="compare two tensor files")
    p_met.add_argument("a")
    p_met.add_argument("b")
    p_met.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"flowsolve: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"flowsolve: numerical divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except FlowSolveError as err:
        print(f"flowsolve: error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
