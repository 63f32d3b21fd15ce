"""
Command-line frontend: one subcommand per analysis, JSON config documents,
CSV / JSON outputs for external plotting.

    python cli.py <subcommand> [--config FILE] [--set key=value ...]
                  [--output PATH] [--format csv|json] [--seed N] [--quiet]

Config keys are validated per subcommand (unknown keys are rejected) and every
value is checked before anything is written, so a rejected run leaves no file.
"""

import argparse
import csv
import json
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from alignment import parabola_fit, track_alignment
from config import CSV_DIGITS, DEFAULT_METHOD, DEFAULT_RESOLUTION, GAMMA_RANGE, OUTPUT_DIR, PSI_RANGE, SWEEP_GRID, SWEEP_RTOL
from eigen import EigenState, integrate_eigen, regime, simsiam_critical_rho, sweep_rho
from errors import EXIT_OK, EXIT_VALIDATION, ConfigError, LabError, exit_code_for
from flows import Hyper, init_params, integrate_flow
from portrait import GridSpec, basin_map, nullclines, simsiam_basin, vector_field
from trainer import TrainerConfig, train

FORMATS = ("csv", "json")

DEFAULTS: Dict[str, Dict] = {
    "flow": {
        "sigma2": 1.5, "rho": 0.03, "m": 2, "d": 2, "mode": "phinet", "init": "random", "init_scale": 0.5,
        "dt": 0.01, "steps": 1000, "method": DEFAULT_METHOD, "form": "published", "symmetrize": False,
        "stride": None, "seed": 0,
    },
    "eigen": {
        "system": "reduced", "sigma2": 1.5, "rho": 0.08, "init": [0.08, 0.5], "dt": 0.01, "steps": 10_000,
        "method": DEFAULT_METHOD, "form": "published", "stride": None,
    },
    "regime": {
        "sigma2": 1.5, "rho": [0.12, 0.03, 0.003, 0.0001], "system": "phinet", "form": "published",
        "resolution": DEFAULT_RESOLUTION, "psi_bounds": None,
    },
    "sweep": {
        "sigma2": 1.5, "rho_min": 1e-5, "rho_max": 0.3, "grid": SWEEP_GRID, "system": "phinet",
        "form": "published", "resolution": DEFAULT_RESOLUTION, "rtol": SWEEP_RTOL,
    },
    "field": {
        "sigma2": 1.5, "rho": 0.03, "psi_range": list(PSI_RANGE), "gamma_range": list(GAMMA_RANGE),
        "nx": 36, "ny": 41, "form": "published",
    },
    "nullclines": {
        "sigma2": 1.5, "rho": 0.03, "psi_range": list(PSI_RANGE), "gamma_range": list(GAMMA_RANGE),
        "nx": 701, "ny": 801, "form": "published",
    },
    "basin": {
        "system": "phinet", "sigma2": 1.5, "rho": 0.08, "psi_range": list(PSI_RANGE),
        "gamma_range": list(GAMMA_RANGE), "nx": 36, "ny": 41, "n": 141, "horizon": None, "dt": 0.05,
        "radius": 0.02, "form": "published",
    },
    "align": {
        "sigma2": 1.5, "rho": 0.05, "m": 3, "d": 3, "init": "random_symmetric", "init_scale": 0.5,
        "dt": 0.01, "steps": 5000, "method": DEFAULT_METHOD, "symmetrize": True, "stride": None, "seed": 0,
        "parabola_init": [0.2, 0.5, 0.1], "parabola_steps": 4000,
    },
    "train": TrainerConfig().to_dict(),
}


# =============================================================================
# Config documents
# =============================================================================


def parse_override(item: str):
    """'key=value' with value read as a JSON literal when possible, else a string."""
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got '{item}'")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(command: str, path: Optional[str], overrides: Sequence[str], seed: Optional[int]) -> Dict:
    """Defaults <- config file <- --set overrides <- --seed. Unknown keys raise ConfigError."""
    config = dict(DEFAULTS[command])
    supplied: Dict = {}
    if path:
        with open(path) as f:
            document = json.load(f)
        if not isinstance(document, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        target = document.pop("subcommand", command)
        if target != command:
            raise ConfigError(f"{path} is a '{target}' recipe, not '{command}'")
        supplied.update(document)
    supplied.update(parse_override(item) for item in overrides)
    # deterministic subcommands have no seed key and ignore --seed
    if seed is not None and "seed" in config:
        supplied["seed"] = seed

    unknown = sorted(set(supplied) - set(config))
    if unknown:
        raise ConfigError(f"Unknown keys for '{command}': {unknown}. Allowed: {sorted(config)}")
    config.update(supplied)
    return config


def _hyper(cfg: Dict) -> Hyper:
    return Hyper(float(cfg["sigma2"]), float(cfg["rho"]))


def _range(cfg: Dict, key: str):
    value = cfg[key]
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{key} must be a [lo, hi] pair, got {value}")
    return float(value[0]), float(value[1])


def _grid(cfg: Dict) -> GridSpec:
    return GridSpec(psi_range=_range(cfg, "psi_range"), gamma_range=_range(cfg, "gamma_range"),
                    nx=int(cfg["nx"]), ny=int(cfg["ny"]))


# =============================================================================
# Writers
# =============================================================================


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.{CSV_DIGITS}g}"
    return value


def write_table(path: str, fmt: str, schema: str, columns: List[str], rows, extra: Optional[Dict] = None) -> None:
    """CSV with a header row, or a JSON document {schema, columns, rows, ...extra}."""
    rows = [list(r) for r in rows]
    _ensure_parent(path)
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
        return
    document = {"schema": schema, "columns": columns, "rows": [[_plain(v) for v in r] for r in rows]}
    document.update(extra or {})
    write_json(path, document)


def _plain(value):
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def write_json(path: str, document: Dict) -> None:
    _ensure_parent(path)
    with open(path, "w") as f:
        json.dump(document, f, indent=2, default=_plain, allow_nan=True)
        f.write("\n")


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# =============================================================================
# Subcommands
# =============================================================================


def cmd_flow(cfg: Dict, output: str, fmt: str, verbose: bool) -> List[str]:
    hyper = _hyper(cfg)
    rng = np.random.default_rng(int(cfg["seed"]))
    if cfg["mode"] not in ("phinet", "simsiam"):
        raise ConfigError(f"mode must be 'phinet' or 'simsiam', got '{cfg['mode']}'")
    init = init_params(cfg["init"], int(cfg["m"]), int(cfg["d"]), rng, float(cfg["init_scale"]),
                       simsiam=cfg["mode"] == "simsiam")
    if verbose:
        print(f"[flow] {cfg['mode']} m={init.m} d={init.d} sigma2={hyper.sigma2:g} rho={hyper.rho:g}")
    traj = integrate_flow(init, hyper, float(cfg["dt"]), int(cfg["steps"]), method=cfg["method"],
                          form=cfg["form"], symmetrize=bool(cfg["symmetrize"]), stride=cfg["stride"])
    diag_keys = list(traj.diagnostics)
    columns = ["t"] + init.column_names() + diag_keys
    rows = (
        [t] + list(state.flatten()) + [traj.diagnostics[k][i] for k in diag_keys]
        for i, (t, state) in enumerate(zip(traj.times, traj.states))
    )
    write_table(output, fmt, "table", columns, rows)
    return [output]


def cmd_eigen(cfg: Dict, output: str, fmt: str, verbose: bool) -> List[str]:
    hyper = _hyper(cfg)
    system = cfg["system"]
    init = cfg["init"]
    if system == "full":
        init = EigenState(*[float(v) for v in init])
    traj = integrate_eigen(init, hyper, float(cfg["dt"]), int(cfg["steps"]), system=system,
                           method=cfg["method"], form=cfg["form"], stride=cfg["stride"])
    names = {"full": ["phi", "psi", "gamma"], "reduced": ["psi", "gamma"], "simsiam": ["psi"]}[system]
    diag_keys = list(traj.diagnostics)

    def values(state):
        if system == "full":
            return [state.phi, state.psi, state.gamma]
        if system == "reduced":
            return list(state)
        return [state]

    rows = (
        [t] + values(state) + [traj.diagnostics[k][i] for k in diag_keys]
        for i, (t, state) in enumerate(zip(traj.times, traj.states))
    )
    write_table(output, fmt, "table", ["t"] + names + diag_keys, rows)
    if verbose:
        print(f"  ✓ {system} system: {len(traj)} records, final state {traj.final}")
    return [output]


def _rho_list(value) -> List[float]:
    rhos = value if isinstance(value, (list, tuple)) else [value]
    if len(rhos) == 0:
        raise ConfigError("rho grid is empty")
    return [float(r) for r in rhos]


def cmd_regime(cfg: Dict, output: str, fmt: str, verbose: bool) -> List[str]:
    rhos = _rho_list(cfg["rho"])
    bounds = None if cfg["psi_bounds"] is None else _range(cfg, "psi_bounds")
    hypers = [Hyper(float(cfg["sigma2"]), rho) for rho in rhos]
    reports = []
    for i, hyper in enumerate(hypers, 1):
        rep = regime(hyper, system=cfg["system"], form=cfg["form"], psi_bounds=bounds,
                     resolution=int(cfg["resolution"]))
        if verbose:
            print(f"[{i}/{len(hypers)}] rho={hyper.rho:g}: {rep.regime} ({rep.sink_count} sinks)")
        reports.append(rep.to_dict())
    document = {"schema": "regime", "sigma2": float(cfg["sigma2"]), "system": cfg["system"],
                "form": cfg["form"], "reports": reports}
    if cfg["system"] == "simsiam":
        document["critical_rho"] = simsiam_critical_rho(float(cfg["sigma2"]))
    write_json(output, document)
    return [output]


def cmd_sweep(cfg: Dict, output: str, fmt: str, verbose: bool) -> List[str]:
    result = sweep_rho(float(cfg["sigma2"]), float(cfg["rho_min"]), float(cfg["rho_max"]), grid=int(cfg["grid"]),
                       system=cfg["system"], form=cfg["form"], resolution=int(cfg["resolution"]),
                       rtol=float(cfg["rtol"]), verbose=verbose)
    document = {
        "schema": "sweep",
        "sigma2": result.sigma2,
        "system": result.system,
        "form": cfg["form"],
        "reports": [{"rho": rho, "regime": rep.regime, "sink_count": rep.sink_count,
                     "equilibria": [eq.to_dict() for eq in rep.equilibria]} for rho, rep in result.reports],
        "boundaries": result.boundaries,
    }
    if cfg["system"] == "simsiam":
        document["critical_rho"] = simsiam_critical_rho(result.sigma2)
    write_json(output, document)
    return [output]


def cmd_field(cfg: Dict, output: str, fmt: str, verbose: bool) -> List[str]:
    field = vector_field(_hyper(cfg), _grid(cfg), form=cfg["form"])
    write_table(output, fmt, "table", ["psi", "gamma", "d_psi", "d_gamma"], field.rows())
    return [output]


def cmd_nullclines(cfg: Dict, output: str, fmt: str, verbose: bool) -> List[str]:
    lines = nullclines(_hyper(cfg), _grid(cfg), form=cfg["form"])
    write_table(output, fmt, "table", ["curve", "branch", "psi", "gamma"], lines.rows())
    return [output]


def cmd_basin(cfg: Dict, output: str, fmt: str, verbose: bool) -> List[str]:
    hyper = _hyper(cfg)
    horizon = None if cfg["horizon"] is None else float(cfg["horizon"])
    if cfg["system"] == "phinet":
        bmap = basin_map(hyper, _grid(cfg), horizon=horizon, dt=float(cfg["dt"]), form=cfg["form"],
                         radius=float(cfg["radius"]), verbose=verbose)
        columns = ["psi", "gamma", "label"]
    elif cfg["system"] == "simsiam":
        bmap = simsiam_basin(hyper, _range(cfg, "psi_range"), n=int(cfg["n"]), horizon=horizon,
                             dt=float(cfg["dt"]), radius=float(cfg["radius"]))
        columns = ["psi", "label"]
    else:
        raise ConfigError(f"system must be 'phinet' or 'simsiam', got '{cfg['system']}'")
    rows = ([*r[:-1], int(r[-1])] for r in bmap.rows())
    extra = {"attractors": [eq.to_dict() for eq in bmap.attractors],
             "fractions": {str(k): v for k, v in bmap.fractions().items()}}
    write_table(output, fmt, "basin", columns, rows, extra=extra)
    return [output]


def cmd_align(cfg: Dict, output: str, fmt: str, verbose: bool) -> List[str]:
    hyper = _hyper(cfg)
    rng = np.random.default_rng(int(cfg["seed"]))
    if cfg["init"] not in ("random_symmetric", "aligned", "identity", "zero"):
        raise ConfigError("align init must be symmetric: random_symmetric, aligned, identity or zero")
    init = init_params(cfg["init"], int(cfg["m"]), int(cfg["d"]), rng, float(cfg["init_scale"]))
    parabola_init = EigenState(*[float(v) for v in cfg["parabola_init"]])
    report = track_alignment(init, hyper, float(cfg["dt"]), int(cfg["steps"]), method=cfg["method"],
                             symmetrize=bool(cfg["symmetrize"]), stride=cfg["stride"], verbose=verbose)
    parabola_traj = integrate_eigen(parabola_init, hyper, float(cfg["dt"]), int(cfg["parabola_steps"]), system="full")
    fit = parabola_fit(parabola_traj)
    parabola = {"C": fit.C, "rate": fit.rate, "max_residual": fit.max_residual, "expected_rate": -2.0 * hyper.rho}

    if fmt == "json":
        document = {"schema": "align", "sigma2": hyper.sigma2, "rho": hyper.rho, **report.to_dict(),
                    "parabola": parabola}
        write_json(output, document)
        return [output]

    m = report.parabola_residuals.shape[1]
    columns = (["t", "norm_c1", "norm_c2", "norm_c3", "min_symmetric_eig"]
               + [f"parabola_residual_{i}" for i in range(m)] + ["fitted_decay_rate", "parabola_rate"])
    rate = float("nan") if report.fitted_decay_rate is None else report.fitted_decay_rate
    prate = float("nan") if fit.rate is None else fit.rate
    rows = (
        [t, *report.trajectory_norms[i], report.min_symmetric_eig[i], *report.parabola_residuals[i], rate, prate]
        for i, t in enumerate(report.times)
    )
    write_table(output, fmt, "table", columns, rows)
    return [output]


def cmd_train(cfg: Dict, output: str, fmt: str, verbose: bool) -> List[str]:
    config = TrainerConfig.from_dict(cfg)
    state, metrics = train(config, verbose=verbose)
    write_table(output, fmt, "table", metrics.columns(), metrics.rows())
    state_path = os.path.splitext(output)[0] + ".state.json"
    write_json(state_path, {"schema": "train_state", "config": config.to_dict(), **state.to_dict()})
    return [output, state_path]


COMMANDS: Dict[str, Callable] = {
    "flow": cmd_flow,
    "eigen": cmd_eigen,
    "regime": cmd_regime,
    "sweep": cmd_sweep,
    "field": cmd_field,
    "nullclines": cmd_nullclines,
    "basin": cmd_basin,
    "align": cmd_align,
    "train": cmd_train,
}
JSON_ONLY = ("regime", "sweep")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="PhiNet / SimSiam linear-dynamics lab")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config document")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config key (value parsed as JSON when possible)")
    parser.add_argument("--output", help="Output path (default: $PHINET_LAB_OUTPUT_DIR/<command>.<format>)")
    parser.add_argument("--format", choices=FORMATS, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--quiet", action="store_true", help="No progress output")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    fmt = args.format or ("json" if args.command in JSON_ONLY else "csv")
    if args.command in JSON_ONLY and fmt != "json":
        print(f"Error: '{args.command}' writes JSON reports only", file=sys.stderr)
        return EXIT_VALIDATION
    output = args.output or os.path.join(OUTPUT_DIR, f"{args.command}.{fmt}")
    verbose = not args.quiet

    try:
        cfg = load_config(args.command, args.config, args.set, args.seed)
        written = COMMANDS[args.command](cfg, output, fmt, verbose)
    except (LabError, ValueError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except TypeError as e:
        # wrong value type in a config document, e.g. null where a number is needed
        print(f"Error: invalid config value ({e})", file=sys.stderr)
        return EXIT_VALIDATION

    if verbose:
        for path in written:
            print(f"  ✓ Wrote {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
