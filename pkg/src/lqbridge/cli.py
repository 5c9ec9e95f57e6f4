"""Command-line entry point.

    lqbridge --config scenario.json [--out DIR] [--seed N] [--threads N]

Every flag can also come from an ``LQBRIDGE_<FLAG>`` environment variable;
flags win over the environment, which wins over the config file. Exit
status: 0 success, 1 check or validation failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys as _sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

TASKS = ("check", "kernel-slice", "distance", "bridge", "validate")
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    """Malformed or incomplete scenario configuration."""


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.16e}"
    return str(v)


def emit_csv(columns: Sequence[str], rows, path) -> Path:
    """Write a header row and ``rows``; floats use 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [] if rows is None else rows
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(columns))
        for r in rows:
            r = list(r)
            if len(r) != len(columns):
                raise ValueError(f"row has {len(r)} entries, expected {len(columns)}")
            w.writerow([_fmt(v) for v in r])
    return path


@dataclass
class ScenarioConfig:
    task: str
    system: Any
    params: dict
    seed: int = 0
    out: Path = Path("out")
    threads: int | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise ConfigError(f"missing field '{where}{key}'")
    return d[key]


def _read_json(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def _mixture(doc, where):
    from .sinkhorn import GaussianMixture

    for k in ("weights", "means", "covs"):
        _require(doc, k, where)
    try:
        return GaussianMixture(doc["weights"], doc["means"], doc["covs"])
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ConfigError(f"{where.rstrip('.')}: {exc}") from exc


def load_config(path, seed=None, out=None, threads=None) -> ScenarioConfig:
    from .ltv_system import system_from_json

    path = Path(path)
    doc = _read_json(path)
    task = _require(doc, "task", "")
    if task not in TASKS:
        raise ConfigError(f"field 'task' must be one of {', '.join(TASKS)} (got {task!r})")
    if "system" in doc:
        sysdoc = doc["system"]
    elif "system_file" in doc:
        ref = (path.parent / doc["system_file"]).resolve()
        if not ref.exists():
            raise ConfigError(f"field 'system_file' refers to a missing file: {ref}")
        sysdoc = _read_json(ref)
    else:
        raise ConfigError("missing field 'system' (or 'system_file')")
    try:
        system = system_from_json(sysdoc)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    params = doc.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("field 'params' must be an object")
    for k, v in params.items():
        if ("tol" in k or k in ("h",)) and isinstance(v, (int, float)) and v <= 0:
            raise ConfigError(f"field 'params.{k}' must be positive")
    if task == "kernel-slice":
        _require(params, "x", "params.")
        _require(params, "axes", "params.")
    elif task == "distance":
        _require(params, "pairs", "params.")
    elif task == "bridge":
        params = dict(params)
        params["rho0"] = _mixture(_require(params, "rho0", "params."), "params.rho0.")
        params["rho1"] = _mixture(_require(params, "rho1", "params."), "params.rho1.")
    cfg_seed = seed if seed is not None else doc.get("seed", 0)
    cfg_out = Path(out if out is not None else doc.get("out", "out"))
    try:
        cfg_seed = int(cfg_seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError("field 'seed' must be an integer") from exc
    if threads is None:
        threads = doc.get("threads")
    return ScenarioConfig(task, system, params, cfg_seed, cfg_out, None if threads is None else int(threads), doc)


# --- tasks -------------------------------------------------------------------------


def _print_table(title: str, rows) -> None:
    rows = [(str(a), str(b)) for a, b in rows]
    width = max([len(a) for a, _ in rows] + [8])
    print(title)
    for a, b in rows:
        print(f"  {a:<{width}}  {b}")


def _task_check(cfg: ScenarioConfig) -> tuple[int, list[Path]]:
    from .ltv_system import check_assumptions

    rep = check_assumptions(cfg.system, float(cfg.params.get("tol", 1e-9)))
    _print_table("assumption report", rep.rows())
    q_zero = cfg.system.Q.is_zero
    ok = rep.controllable and rep.q_psd_ok and (rep.q_strict_ok or q_zero)
    path = emit_csv(["field", "value"], rep.rows(), cfg.out / "check.csv")
    return (EXIT_OK if ok else EXIT_FAIL), [path]


def _task_slice(cfg: ScenarioConfig) -> tuple[int, list[Path]]:
    from .kernel import build_kernel, export_slice

    p, sys = cfg.params, cfg.system
    K = build_kernel(sys, p.get("t"), p.get("t0"), **({"per_octave": p["per_octave"]} if "per_octave" in p else {}))
    axes = []
    for i, ax in enumerate(p["axes"]):
        for k in ("lower", "upper", "points"):
            _require(ax, k, f"params.axes[{i}].")
        axes.append(np.linspace(ax["lower"], ax["upper"], int(ax["points"])))
    if len(axes) != sys.n:
        raise ConfigError(f"field 'params.axes' needs {sys.n} entries")
    csv_path, side = export_slice(K, p["x"], axes, cfg.out / "kernel_slice.csv")
    _print_table("kernel slice", [(k, v) for k, v in K.metadata().items() if not isinstance(v, list)])
    return EXIT_OK, [csv_path, side]


def _task_distance(cfg: ScenarioConfig) -> tuple[int, list[Path]]:
    from .kernel import build_kernel, squared_distance
    from .oracle import DirectTranscription

    p, sys = cfg.params, cfg.system
    n = sys.n
    K = build_kernel(sys, p.get("t"), p.get("t0"))
    ocp = DirectTranscription(sys, K.t0, K.t, int(p["grid_n"])) if "grid_n" in p else None
    cols = [f"x{i}" for i in range(n)] + [f"y{i}" for i in range(n)] + ["half_dist_sq"]
    if ocp is not None:
        cols.append("bvp_cost")
    rows = []
    for pair in p["pairs"]:
        x, y = np.atleast_1d(pair[0]).astype(float), np.atleast_1d(pair[1]).astype(float)
        if x.size != n or y.size != n:
            raise ConfigError(f"each entry of 'params.pairs' needs two {n}-vectors")
        r = [*x, *y, squared_distance(K.M, x, y)]
        if ocp is not None:
            r.append(ocp.solve(x, y).cost)
        rows.append(r)
    path = emit_csv(cols, rows, cfg.out / "distance.csv")
    _print_table("distance", [("pairs", len(rows)), ("t0", K.t0), ("t", K.t)])
    return EXIT_OK, [path]


def _task_bridge(cfg: ScenarioConfig) -> tuple[int, list[Path]]:
    from .sinkhorn import solve_bridge

    p, sys = cfg.params, cfg.system
    br = solve_bridge(
        sys, p["rho0"], p["rho1"], slices=int(p.get("slices", 11)), tol=float(p.get("tol", 1e-9)),
        max_iter=int(p.get("max_iter", 500)), points=p.get("points"), width=float(p.get("width", 6.0)),
    )
    out: list[Path] = []
    X = br.grid.points
    xc = [f"x{i}" for i in range(sys.n)]
    for k, (t, m) in enumerate(zip(br.times, br.marginals)):
        out.append(emit_csv(xc + ["t", "rho", "log_phi"],
                            [[*x, t, r, lp] for x, r, lp in zip(X, m.values, br.log_phi[k])],
                            cfg.out / f"marginal_{k:02d}.csv"))
        out.append(emit_csv(xc + ["t"] + [f"u{j}" for j in range(sys.m)],
                            [[*x, t, *u] for x, u in zip(X, br.control[k])],
                            cfg.out / f"control_{k:02d}.csv"))
    cols, rows = br.state.trace_table()
    out.append(emit_csv(cols, rows, cfg.out / "convergence.csv"))
    st = br.state
    _print_table("bridge", [
        ("iterations", st.iteration), ("converged", st.converged),
        ("residual0", f"{st.residuals[0]:.3e}"), ("residual1", f"{st.residuals[1]:.3e}"),
        ("slices", len(br.times)), ("mass range", f"{br.masses().min():.9f} .. {br.masses().max():.9f}"),
    ])
    return (EXIT_OK if st.converged else EXIT_FAIL), out


def _task_validate(cfg: ScenarioConfig) -> tuple[int, list[Path]]:
    from .oracle import run_validation, validation_table

    p = cfg.params
    rows = run_validation(
        cfg.system, seed=cfg.seed, points=int(p.get("points", 5)), fk_paths=int(p.get("fk_paths", 20_000)),
        grid_n=int(p.get("grid_n", 512)),
    )
    cols, table = validation_table(rows)
    path = emit_csv(cols, table, cfg.out / "validation.csv")
    _print_table("validation", [(r.check, f"{r.verdict}  observed={r.observed:.3e}") for r in rows])
    return (EXIT_OK if all(r.passed for r in rows) else EXIT_FAIL), [path]


_RUNNERS = {
    "check": _task_check,
    "kernel-slice": _task_slice,
    "distance": _task_distance,
    "bridge": _task_bridge,
    "validate": _task_validate,
}


def _versions() -> dict:
    import scipy

    from . import __version__

    return {"lqbridge": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def run(cfg: ScenarioConfig) -> int:
    """Execute ``cfg.task``, write artifacts and the run manifest, return the exit status."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    if cfg.threads is not None:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=cfg.threads):
            status, paths = _RUNNERS[cfg.task](cfg)
    else:
        status, paths = _RUNNERS[cfg.task](cfg)
    manifest = {
        "task": cfg.task,
        "config_sha256": cfg.digest,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - start,
        "exit_status": status,
        "artifacts": sorted(str(p.relative_to(cfg.out)) if p.is_relative_to(cfg.out) else str(p) for p in paths),
    }
    (cfg.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return status


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lqbridge", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="scenario JSON file")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    ap.add_argument("--threads", type=int, help="BLAS thread limit")
    return ap


def _env_int(name: str):
    if name not in os.environ:
        return None
    try:
        return int(os.environ[name])
    except ValueError as exc:
        raise ConfigError(f"environment variable {name} must be an integer") from exc


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = args.config or os.environ.get("LQBRIDGE_CONFIG")
        out = args.out or os.environ.get("LQBRIDGE_OUT")
        seed = args.seed if args.seed is not None else _env_int("LQBRIDGE_SEED")
        threads = args.threads if args.threads is not None else _env_int("LQBRIDGE_THREADS")
        if seed is not None and not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if config is None:
            raise ConfigError("no configuration given (use --config or LQBRIDGE_CONFIG)")
        return run(load_config(config, seed=seed, out=out, threads=threads))
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=_sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
