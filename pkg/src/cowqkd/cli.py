"""Command-line entry point: ``cowqkd {rate,scan,bound-check,simulate}``.

Exit codes: 0 success, 2 configuration or input error, 3 every simulated block
aborted, 4 the sampling bound was violated on the checked grid.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import BudgetExceededError, ConfigError, ResourceLimitError
from .pipeline import aggregate, run_blocks
from .postproc import write_key_file
from .sampling import DEFAULT_GRID, deviation_t, validate_grid
from .scan import BOUND_KINDS, DEVIATIONS, observed_block, scan, skr_at, to_csv
from .security import (
    PAPER_ROUNDING_RTOL, ObservedBlock, SecurityParams, epsilon_budget, key_length,
    optimize_beta,
)
from .system import PRESET_NAMES, load_config, load_preset

EXIT_OK, EXIT_CONFIG, EXIT_ABORT_ONLY, EXIT_BOUND_VIOLATION = 0, 2, 3, 4
DEFAULT_SYMBOLS = 10**6


@dataclasses.dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int
    output_paths: list
    tool_version: str = __version__
    timestamp: str = ""

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        self.output_paths = sorted(set(self.output_paths) | {str(path)})
        data = dataclasses.asdict(self)
        data["timestamp"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        return path


def _clean(obj):
    """JSON-safe copy: NaN and infinities become null, numpy scalars become Python."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _dump(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _load(args):
    if args.config and args.preset:
        raise ConfigError("use either --config or --preset, not both")
    if args.config:
        return load_config(args.config), str(args.config)
    if args.preset:
        return load_preset(args.preset), f"preset:{args.preset}"
    return None, None


def _int_list(text: str) -> list[int]:
    try:
        return [int(float(x)) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad integer list {text!r}") from exc


def _distances(text: str) -> list[float]:
    try:
        parts = [float(x) for x in text.split(":")]
    except ValueError as exc:
        raise ConfigError(f"bad distance range {text!r}") from exc
    if len(parts) == 1:
        return parts
    if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
        raise ConfigError("distances must be A or A:B:STEP with STEP > 0 and B >= A")
    a, b, step = parts
    count = int(math.floor((b - a) / step + 1e-9)) + 1
    return [round(a + i * step, 9) for i in range(count)]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- rate -----------------------------------------------------------------------

_OVERRIDES = (("ncpp", "n_cpp", int), ("nvis", "n_vis", int), ("qhat", "q_hat", float),
              ("vobs", "v_obs", float), ("mir", "m_ir", int), ("mu", "mu", float))


def cmd_rate(args) -> int:
    params = SecurityParams()
    overrides = {field: cast(getattr(args, flag)) for flag, field, cast in _OVERRIDES
                 if getattr(args, flag) is not None}
    config, config_path = _load(args)
    beta = args.beta
    report = {"command": "rate", "overrides": overrides}
    skr_scale = None
    if len(overrides) == len(_OVERRIDES):
        block = ObservedBlock(**overrides)
    else:
        if config is None:
            raise ConfigError("rate needs --config/--preset or all six block overrides")
        n_cpp = overrides.get("n_cpp", int(config.analysis.get("n_cpp", 10**6)))
        distance = args.distance if args.distance is not None else config.link.length_km
        if beta is None:
            beta = config.analysis.get("beta")
        point = skr_at(config, distance, n_cpp, params, args.bound, beta=beta)
        op = config.at_distance(distance).at_operating_point(point.temp_opt_k,
                                                             point.dead_time_opt_s)
        base = observed_block(op, point.mu_opt, n_cpp)
        block = dataclasses.replace(base, **overrides)
        skr_scale = point.block_collection_time_s
        report.update(distance_km=distance, temp_k=point.temp_opt_k,
                      dead_time_s=point.dead_time_opt_s)
    deviation = DEVIATIONS[args.bound]
    if beta is None:
        result = optimize_beta(block, params, deviation_fn=deviation)
    else:
        t = float(deviation(block.n_cpp, block.n_vis, block.v_obs, beta))
        result = key_length(block, min(max(block.v_obs - t, 0.0), 1.0), params, beta)
    report["inputs"] = dataclasses.asdict(block)
    report.update(result.to_dict())
    report["bound_kind"] = args.bound
    report["epsilon_budget"] = epsilon_budget(params, params.eps_cor, rtol=PAPER_ROUNDING_RTOL)
    if skr_scale is not None:
        report["collection_time_s"] = skr_scale
        report["skr_bps"] = result.ell / skr_scale
    text = _dump(report)
    sys.stdout.write(text)
    if args.out:
        out = _out_dir(args)
        path = out / "rate.json"
        path.write_text(text)
        RunManifest("rate", config_path, args.seed, [str(path)]).write(out)
    return EXIT_OK


# --- scan -----------------------------------------------------------------------

def cmd_scan(args) -> int:
    config, config_path = _load(args)
    if config is None:
        raise ConfigError("scan needs --config or --preset")
    params = SecurityParams()
    distances = _distances(args.distances)
    n_list = _int_list(args.ncpp)
    kinds = BOUND_KINDS if args.bound == "all" else (args.bound,)
    rows = []
    for kind in kinds:
        rows += scan(config, distances, n_list, params, kind)
    order = {d: i for i, d in enumerate(distances)}
    rows.sort(key=lambda r: (order.get(r.distance_km, 0), r.n_cpp, kinds.index(r.bound_kind)))
    out = _out_dir(args)
    path = out / "scan.csv"
    path.write_text(to_csv(rows))
    cutoffs = {}
    for kind in kinds:
        for n in n_list:
            positive = [r.distance_km for r in rows
                        if r.bound_kind == kind and r.n_cpp == n and r.ell > 0]
            cutoffs[f"{kind}/{n}"] = max(positive) if positive else 0.0
    sys.stdout.write(_dump({"command": "scan", "csv": str(path), "rows": len(rows),
                            "last_positive_distance_km": cutoffs}))
    RunManifest("scan", config_path, args.seed, [str(path)]).write(out)
    return EXIT_OK


# --- bound-check ----------------------------------------------------------------

def cmd_bound_check(args) -> int:
    grid = dict(DEFAULT_GRID)
    if args.grid:
        try:
            grid.update(json.loads(Path(args.grid).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read grid {args.grid}: {exc}") from exc
    scale = args.t_scale

    def scaled(n_c, n_v, v, eps):
        return scale * np.asarray(deviation_t(n_c, n_v, v, eps))

    reports = validate_grid([tuple(s) for s in grid["splits"]], grid["error_fractions"],
                            grid["eps"], population=args.population,
                            deviation_fn=deviation_t if scale == 1.0 else scaled)
    violations = [r for r in reports if not r.holds]
    summary = {
        "command": "bound-check", "population": args.population, "points": len(reports),
        "violations": len(violations), "all_hold": not violations,
        "worst_ratio": max(r.max_violation_probability / r.eps for r in reports),
        "reports": [dict(r.to_dict(), violating_counts=len(r.violating_counts))
                    for r in reports],
    }
    if scale != 1.0:
        summary["t_scale"] = scale
    text = _dump(summary)
    out = _out_dir(args)
    path = out / "bound_check.json"
    path.write_text(text)
    RunManifest("bound-check", args.grid, args.seed, [str(path)]).write(out)
    sys.stdout.write(_dump({k: v for k, v in summary.items() if k != "reports"}))
    return EXIT_OK if not violations else EXIT_BOUND_VIOLATION


# --- simulate -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    config, config_path = _load(args)
    if config is None:
        raise ConfigError("simulate needs --config or --preset")
    params = SecurityParams()
    n_symbols = args.symbols or int(config.analysis.get("symbols_per_block", DEFAULT_SYMBOLS))
    results = run_blocks(config, params, args.blocks, n_symbols, args.seed,
                         ir_block=args.ir_block_size)
    out = _out_dir(args)
    key_dir = out / "keys"
    key_dir.mkdir(exist_ok=True)
    paths = []
    for r in results:
        if r.ell == 0:
            continue
        header = {"block": r.block_id, "ell": r.ell, "eps_qkd": params.eps_qkd, "beta": r.beta}
        for side, bits in (("alice", r.key_alice), ("bob", r.key_bob)):
            paths.append(str(write_key_file(key_dir / f"block_{r.block_id:04d}.{side}.hex",
                                            bits, header)))
    stats = {"command": "simulate", "config": config.name, "symbols_per_block": n_symbols,
             "aggregate": aggregate(results), "blocks": [r.stats_dict() for r in results]}
    stats_path = out / "stats.json"
    stats_path.write_text(_dump(stats))
    RunManifest("simulate", config_path, args.seed, paths + [str(stats_path)]).write(out)
    sys.stdout.write(_dump(stats["aggregate"]))
    if results and all(r.ell == 0 for r in results):
        return EXIT_ABORT_ONLY
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON system configuration")
    common.add_argument("--preset", choices=PRESET_NAMES, help="shipped configuration")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help="output directory")

    parser = argparse.ArgumentParser(prog="cowqkd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    rate = sub.add_parser("rate", parents=[common], help="key length for one block")
    for flag, _, cast in _OVERRIDES:
        rate.add_argument(f"--{flag}", type=float if cast is float else lambda x: int(float(x)))
    rate.add_argument("--distance", type=float)
    rate.add_argument("--beta", type=float, help="fix beta instead of optimising it")
    rate.add_argument("--bound", choices=("new", "baseline"), default="new")
    rate.set_defaults(func=cmd_rate)

    sc = sub.add_parser("scan", parents=[common], help="rate versus distance table")
    sc.add_argument("--distances", default="100:320:10")
    sc.add_argument("--ncpp", default="1e4,1e5,1e6,1e7")
    sc.add_argument("--bound", choices=BOUND_KINDS + ("all",), default="all")
    sc.set_defaults(func=cmd_scan)

    bc = sub.add_parser("bound-check", parents=[common],
                        help="exact check of the sampling tail bound")
    bc.add_argument("--grid", help="JSON file with splits, error_fractions, eps")
    bc.add_argument("--population", choices=("key", "union"), default="key")
    bc.add_argument("--t-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    bc.set_defaults(func=cmd_bound_check)

    sim = sub.add_parser("simulate", parents=[common], help="simulate blocks end to end")
    sim.add_argument("--blocks", type=int, default=1)
    sim.add_argument("--symbols", type=lambda x: int(float(x)), default=None)
    sim.add_argument("--ir-block-size", type=int, default=None)
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out is None and args.command != "rate":
        args.out = "."
    try:
        return args.func(args)
    except (ConfigError, BudgetExceededError, ValueError) as exc:
        print(f"cowqkd: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ResourceLimitError as exc:
        print(f"cowqkd: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
