"""Command-line front end.

``design`` reads covariates and exposure only and writes the matched set;
``analyze`` attaches the outcome to that saved design. ``simulate``,
``bench`` and ``bands`` wrap the simulation, benchmark and bootstrap code.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure,
4 too many failed replicates.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import FIELD_NAMES, RunConfig, resolve
from .dataset import ColumnMapping, load_csv, trim_exposure, format_number
from .estimator import MatchingQERF, predict_matched
from .exceptions import NumericalError, QERFError, ReplicateFailure, ValidationError
from .gps import GpsModel
from .inference import bootstrap_bands, variance_qerf, write_variance_csv
from .matching import (
    GPSMatching,
    MatchConfig,
    MatchedDataset,
    make_bins,
    write_balance_csv,
)
from .quantile import QuantileCurve, select_bandwidth_mean, write_curves_csv
from .simbench import SCENARIOS, generate_scenario, get_scenario, run_benchmark
from .dataset import write_csv
from .svg import balance_svg, curves_svg, write_svg

logger = logging.getLogger("qerf")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_REPLICATES = 0, 2, 3, 4


class _Outputs:
    """Tracks files written by a command so a failure can remove them."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.paths = []

    def path(self, name) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.paths.append(p)
        return p

    def register(self, p) -> Path:
        p = Path(p)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(p)
        return p

    def discard(self):
        for p in self.paths:
            if p.exists():
                p.unlink()
                logger.info("removed partial output %s", p)


def _require_seed(cfg: RunConfig, what):
    if cfg.seed is None:
        raise ValidationError(f"{what} is stochastic; pass --seed")


def _exposure_digest(x) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype="<f8").tobytes()).hexdigest()


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load(cfg: RunConfig, with_outcome):
    if not cfg.input:
        raise ValidationError("no input file given (--input)")
    if not cfg.covariate_cols:
        raise ValidationError("no covariate columns given (--covariate-cols)")
    if with_outcome and not cfg.outcome_col:
        raise ValidationError("no outcome column given (--outcome-col)")
    schema = ColumnMapping(exposure=cfg.exposure_col, outcome=cfg.outcome_col if with_outcome else None,
                           covariates=tuple(cfg.covariate_cols), weight=cfg.weight_col)
    ds = load_csv(cfg.input, schema)
    if cfg.trim is not None:
        ds = trim_exposure(ds, *cfg.trim)
    return ds


# -- commands ------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: _Outputs):
    _require_seed(cfg, "simulate")
    if cfg.n < 2:
        raise ValidationError("--n must be at least 2")
    s = get_scenario(cfg.scenario).with_options(normal_scale=cfg.normal_scale, lognormal_scale=cfg.lognormal_scale,
                                                c5_support=cfg.c5_support)
    ds = generate_scenario(s, cfg.n, cfg.seed)
    path = out.register(cfg.output) if cfg.output else out.path(f"scenario_{s.id}_n{cfg.n}_seed{cfg.seed}.csv")
    write_csv(ds, path)
    logger.info("wrote %s", path)


def cmd_design(cfg: RunConfig, out: _Outputs):
    ds = _load(cfg, with_outcome=False)
    design = GPSMatching(delta=cfg.delta, scale=cfg.scale, delta_grid=cfg.delta_grid,
                         scale_grid=cfg.scale_grid, n_jobs=cfg.workers).fit_dataset(ds)
    matched = design.matched_
    matched.to_csv(out.path("matched.csv"))
    write_balance_csv([design.raw_balance_, design.balance_], out.path("balance.csv"))
    write_svg(balance_svg([design.raw_balance_, design.balance_]), out.path("balance.svg"))
    manifest = {
        "command": "design",
        "version": __version__,
        "config": cfg.to_dict(),
        "input": str(Path(cfg.input).resolve()),
        "columns": {"exposure": cfg.exposure_col, "covariates": list(cfg.covariate_cols), "weight": cfg.weight_col},
        "outcome_used": False,
        "trim": list(cfg.trim) if cfg.trim else None,
        "n_units": ds.n_units,
        "exposure_sha256": _exposure_digest(ds.exposure),
        "gps": design.gps_.model_.to_dict(),
        "tuned": design.aac_grid_ is not None,
        "delta": design.config_.delta,
        "scale": design.config_.scale,
        "n_levels": matched.bins.n_levels,
        "unmatched_levels": matched.unmatched_levels.tolist(),
        "aac_raw": design.raw_balance_.aac,
        "aac_matched": design.balance_.aac,
        "aac_grid": None if design.aac_grid_ is None else {
            "delta": list(map(float, sorted(set(cfg.delta_grid)))),
            "scale": list(map(float, sorted(set(cfg.scale_grid)))),
            "aac": design.aac_grid_.tolist(),
        },
        "files": {"matched": "matched.csv", "balance_csv": "balance.csv", "balance_svg": "balance.svg"},
    }
    _write_json(manifest, out.path("design.json"))
    logger.info("delta=%g scale=%g AAC raw %.4f -> matched %.4f", manifest["delta"], manifest["scale"],
                manifest["aac_raw"], manifest["aac_matched"])


def read_matched_index(path, n_levels, n_units) -> np.ndarray:
    mi = np.full((n_levels, n_units), -1, dtype=np.int64)
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            mi[int(row["level_index"]), int(row["template_index"])] = int(row["matched_unit_index"])
    return mi


def _load_design(cfg: RunConfig, design_path):
    design_path = Path(design_path)
    manifest = json.loads(design_path.read_text())
    if manifest.get("command") != "design":
        raise ValidationError(f"{design_path} is not a design manifest")
    cols = manifest["columns"]
    cfg.input = cfg.input or manifest["input"]
    cfg.exposure_col = cols["exposure"]
    cfg.covariate_cols = tuple(cols["covariates"])
    cfg.weight_col = cols["weight"]
    cfg.trim = tuple(manifest["trim"]) if manifest["trim"] else None
    ds = _load(cfg, with_outcome=True)
    if ds.n_units != manifest["n_units"] or _exposure_digest(ds.exposure) != manifest["exposure_sha256"]:
        raise ValidationError("input data do not match the units of the saved design")
    mcfg = MatchConfig(manifest["delta"], manifest["scale"])
    bins = make_bins(ds.exposure_range, mcfg.delta)
    if bins.n_levels != manifest["n_levels"]:
        raise ValidationError("saved design has a different number of exposure levels")
    mi = read_matched_index(design_path.parent / manifest["files"]["matched"], bins.n_levels, ds.n_units)
    gps = GpsModel.from_dict(manifest["gps"])
    matched = MatchedDataset(bins, mi, mcfg, ds, gps.density(ds.exposure, ds.covariates))
    return manifest, matched


def _qee_pairs(grid, increment):
    keep = grid - increment >= grid[0] - 1e-12 * max(1.0, abs(grid[0]))
    for g in grid[~keep]:
        logger.info("QEE at w=%s omitted: w - %s lies below the grid minimum", format_number(g), increment)
    return grid[keep]


def cmd_analyze(cfg: RunConfig, out: _Outputs, design_path):
    manifest, matched = _load_design(cfg, design_path)
    ds = matched.source
    taus = tuple(cfg.taus)
    grid = np.linspace(ds.exposure_range.w_min, ds.exposure_range.w_max, cfg.grid_size)
    h_mean = None
    if cfg.kind == "smoothed":
        h_mean = cfg.h_mean if cfg.h_mean is not None else select_bandwidth_mean(matched, cfg.h_grid)
    qgrid = _qee_pairs(grid, cfg.increment)
    points = np.concatenate([grid, qgrid - cfg.increment])
    est = predict_matched(matched, points, taus, cfg.kind, h_mean)
    n, m = grid.shape[0], qgrid.shape[0]
    if cfg.B:
        _require_seed(cfg, "bootstrap bands")
        pipeline = MatchingQERF(taus=taus, kind=cfg.kind, delta=matched.delta, scale=matched.scale, h_mean=h_mean)
        bands = bootstrap_bands(ds, pipeline, points, cfg.B, cfg.alpha, cfg.seed, n_jobs=cfg.workers)
        curves = bands.curves(n)
        qee_curves = bands.qee_curves(np.arange(n - m, n), np.arange(n, n + m), grid=qgrid) if m else []
    else:
        curves = [QuantileCurve(t, grid, est[:n, k], kind=cfg.kind) for k, t in enumerate(taus)]
        diff = est[n - m:n] - est[n:]
        qee_curves = [QuantileCurve(t, qgrid, diff[:, k], kind=cfg.kind) for k, t in enumerate(taus)] if m else []
    write_curves_csv(curves, out.path("qerf.csv"))
    write_svg(curves_svg(curves, "Quantile exposure-response curves", "exposure", "outcome quantile"),
              out.path("qerf.svg"))
    if qee_curves:
        write_curves_csv(qee_curves, out.path("qee.csv"))
        write_svg(curves_svg(qee_curves, f"Quantile effect of a {cfg.increment:g} unit increase", "exposure",
                             "quantile difference"), out.path("qee.svg"))
    if cfg.variance_m:
        rows = []
        for t in taus:
            for g in grid:
                try:
                    rows.append(variance_qerf(matched, g, t, cfg.variance_m))
                except NumericalError as exc:
                    logger.info("no variance at w=%s, tau=%s: %s", format_number(g), t, exc)
        write_variance_csv(rows, out.path("variance.csv"))
    _write_json({
        "command": "analyze", "version": __version__, "config": cfg.to_dict(),
        "design": str(Path(design_path).resolve()), "delta": matched.delta, "scale": matched.scale,
        "h_mean": h_mean, "bootstrap": cfg.B,
    }, out.path("analysis.json"))


def cmd_bands(cfg: RunConfig, out: _Outputs):
    _require_seed(cfg, "bands")
    ds = _load(cfg, with_outcome=True)
    B = cfg.B or 50
    pipeline = MatchingQERF(taus=tuple(cfg.taus), kind=cfg.kind, delta=cfg.delta, scale=cfg.scale,
                            delta_grid=cfg.delta_grid, scale_grid=cfg.scale_grid, h_mean=cfg.h_mean,
                            h_grid=cfg.h_grid, n_jobs=cfg.workers).fit_dataset(ds)
    grid = np.linspace(ds.exposure_range.w_min, ds.exposure_range.w_max, cfg.grid_size)
    qgrid = _qee_pairs(grid, cfg.increment)
    points = np.concatenate([grid, qgrid - cfg.increment])
    bands = bootstrap_bands(ds, pipeline, points, B, cfg.alpha, cfg.seed, n_jobs=cfg.workers)
    n, m = grid.shape[0], qgrid.shape[0]
    curves = bands.curves(n)
    write_curves_csv(curves, out.path("bands.csv"))
    write_svg(curves_svg(curves, f"QERF with {100 * (1 - cfg.alpha):g}% bootstrap bands"), out.path("bands.svg"))
    if m:
        write_curves_csv(bands.qee_curves(np.arange(n - m, n), np.arange(n, n + m), grid=qgrid),
                         out.path("qee_bands.csv"))
    _write_json({
        "command": "bands", "version": __version__, "config": cfg.to_dict(),
        "delta": pipeline.config_.delta, "scale": pipeline.config_.scale,
        "h_mean": getattr(pipeline, "h_mean_", None), "B": B, "failed_replicates": bands.n_failed,
    }, out.path("bands.json"))


def cmd_bench(cfg: RunConfig, out: _Outputs):
    _require_seed(cfg, "bench")
    scen = [str(s).upper() for s in cfg.scenarios]
    if scen == ["ALL"]:
        scen = sorted(SCENARIOS)
    scen = [get_scenario(s).with_options(normal_scale=cfg.normal_scale, lognormal_scale=cfg.lognormal_scale,
                                         c5_support=cfg.c5_support) for s in scen]
    # a fixed caliper or trade-off is a one-point tuning grid
    delta_grid = (cfg.delta,) if cfg.delta is not None else cfg.delta_grid
    scale_grid = (cfg.scale,) if cfg.scale is not None else cfg.scale_grid
    res = run_benchmark(scen, cfg.ns, cfg.taus, cfg.reps, cfg.seed, cfg.estimators, n_jobs=cfg.workers,
                        R=cfg.mc_draws, delta_grid=delta_grid, scale_grid=scale_grid)
    res.to_csv(out.path("bench.csv"))
    res.write_text(out.path("bench.txt"))
    sys.stdout.write(res.render())


# -- argument parsing ----------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="INI file with settings; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="parallel workers (default $QERF_WORKERS or 1)")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_data(p, outcome=True):
    p.add_argument("--input")
    p.add_argument("--exposure-col", dest="exposure_col")
    if outcome:
        p.add_argument("--outcome-col", dest="outcome_col")
    p.add_argument("--covariate-cols", dest="covariate_cols", help="comma separated")
    p.add_argument("--weight-col", dest="weight_col")
    p.add_argument("--trim", help="lo,hi exposure percentiles as fractions, e.g. 0.05,0.95")


def _add_design(p):
    p.add_argument("--delta", type=float, help="fixed caliper; tuned over --delta-grid when omitted")
    p.add_argument("--scale", type=float, help="fixed GPS/exposure trade-off in [0, 1]")
    p.add_argument("--delta-grid", dest="delta_grid")
    p.add_argument("--scale-grid", dest="scale_grid")


def _add_analysis(p):
    p.add_argument("--taus")
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.add_argument("--kind", choices=("smoothed", "empirical"))
    p.add_argument("--h-mean", dest="h_mean", type=float)
    p.add_argument("--h-grid", dest="h_grid")
    p.add_argument("--increment", type=float, help="QEE exposure increment (default 1)")
    p.add_argument("-B", "--bootstrap", dest="B", type=int)
    p.add_argument("--alpha", type=float)


def _add_scenario_options(p):
    p.add_argument("--normal-scale", dest="normal_scale", choices=("sd", "variance"))
    p.add_argument("--lognormal-scale", dest="lognormal_scale", choices=("sd", "variance"))
    p.add_argument("--c5-support", dest="c5_support", choices=("integers", "two-point"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qerf", description=__doc__.splitlines()[0],
                                     argument_default=argparse.SUPPRESS)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a dataset from a simulation scenario",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--scenario", choices=sorted(SCENARIOS) + [s.lower() for s in sorted(SCENARIOS)])
    p.add_argument("--n", type=int)
    p.add_argument("--out", dest="output", help="output CSV (default: inside --output-dir)")
    _add_scenario_options(p)
    _add_common(p)

    p = sub.add_parser("design", help="outcome-free GPS matching and balance report",
                       argument_default=argparse.SUPPRESS)
    _add_data(p, outcome=False)
    _add_design(p)
    _add_common(p)

    p = sub.add_parser("analyze", help="QERF and QEE curves from a saved design",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--design", required=True, help="design.json written by the design command")
    p.add_argument("--input", help="input CSV (default: the one recorded in the design)")
    p.add_argument("--outcome-col", dest="outcome_col")
    _add_analysis(p)
    p.add_argument("--variance-m", dest="variance_m", type=int,
                   help="write plug-in standard errors using this many neighbours")
    _add_common(p)

    p = sub.add_parser("bands", help="weighted-bootstrap bands for QERF and QEE",
                       argument_default=argparse.SUPPRESS)
    _add_data(p)
    _add_design(p)
    _add_analysis(p)
    _add_common(p)

    p = sub.add_parser("bench", help="simulation benchmark tables", argument_default=argparse.SUPPRESS)
    p.add_argument("--scenario", dest="scenarios", help="A, B, C, D, a comma list or 'all'")
    p.add_argument("--n", dest="ns", help="comma separated sample sizes")
    p.add_argument("--reps", type=int)
    p.add_argument("--estimators", help="comma list of matching, matching-s, iptw")
    p.add_argument("--taus")
    p.add_argument("--mc-draws", dest="mc_draws", type=int)
    _add_design(p)
    _add_scenario_options(p)
    _add_common(p)
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "design": cmd_design,
    "bands": cmd_bands,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    verbose = args.pop("verbose", 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    command = args.pop("command")
    design = args.pop("design", None)
    config_path = args.pop("config", None)
    overrides = {k: v for k, v in args.items() if k in FIELD_NAMES}
    out = None
    try:
        cfg = resolve(overrides, config_path)
        out = _Outputs(cfg.output_dir)
        if command == "analyze":
            cmd_analyze(cfg, out, design)
        else:
            COMMANDS[command](cfg, out)
    except ReplicateFailure as exc:
        return _fail(out, exc, EXIT_REPLICATES)
    except (ValidationError, OSError, json.JSONDecodeError, KeyError) as exc:
        return _fail(out, exc, EXIT_USAGE)
    except QERFError as exc:
        return _fail(out, exc, EXIT_NUMERICAL)
    return EXIT_OK


def _fail(out, exc, code) -> int:
    if out is not None:
        out.discard()
    sys.stderr.write(f"qerf: error: {type(exc).__name__}: {exc}\n")
    return code


def entry():
    sys.exit(main())
