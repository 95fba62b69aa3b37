"""Command-line entry point: ``subsetscan <command> [options]``.

Settings resolve as built-in defaults, then a JSON ``--config`` file, then
explicit flags.  Exit codes: 0 success, 2 configuration error, 3 ingestion
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

from . import io as sio
from .calibration import GPSS_NULL_SHAPE, MDTS_NULL_SHAPE, empirical_size, gpss_null_trial, mdts_null_trial
from .estimators import GaussianProcessSubsetScan, MultidimensionalTensorScan
from .exceptions import ConfigError, DecompositionError, IngestionError, OptimizationError, ScanError
from .replay import ReplayConfig, replay, window_tensor
from .synth import GridShape, InjectionSpec, synth_cases, synth_generate

EXIT_OK, EXIT_CONFIG, EXIT_INGESTION, EXIT_NUMERICAL = 0, 2, 3, 4
COMMANDS = ("gpss-scan", "mdts-scan", "replay", "synth", "calibrate")


@dataclass
class RunConfig:
    input: str | None = None
    output_dir: str = "subsetscan-out"
    seed: int = 0
    alpha: float = 0.05
    replicas: int = 200
    k: int = 10
    restarts: int = 50
    rank: int = 5
    window: int = 4
    bin_days: int = 7
    two_sided: bool = True
    # gpss-scan
    metric: str = "standardized_euclidean"
    k_exhaustive: int = 15
    penalty: float = 0.0
    transform: str = "none"
    n_starts: int = 5
    coordinates: str | None = None
    # mdts-scan / replay
    max_sweeps: int = 500
    dictionaries: str | None = None
    min_history: int = 2
    persistence: int = 1
    refit_per_replica: bool | None = None
    # synth
    kind: str = "counts"
    magnitude: float = 0.0
    n_locations: int = 6
    n_times: int = 204
    missing_rate: float = 0.0
    n_bins: int = 26
    n_zips: int = 10
    n_drugs: int = 3
    cases_per_bin: float = 80.0
    onset: int | None = None
    # calibrate
    scan: str = "gpss"
    trials: int = 200

    @classmethod
    def resolve(cls, file_values=None, flag_values=None):
        """Defaults, overridden by config-file values, overridden by flags."""
        known = {f.name for f in dataclasses.fields(cls)}
        merged = {}
        for source, values in (("config file", file_values or {}), ("flags", flag_values or {})):
            for key, value in values.items():
                key = key.replace("-", "_")
                if key not in known:
                    raise ConfigError(f"unknown setting {key!r} in {source}")
                merged[key] = _check_type(key, value, source)
        return cls(**merged)

    def to_dict(self):
        out = dataclasses.asdict(self)
        out.pop("output_dir")  # outputs must not depend on where they are written
        return out


DEFAULTS = RunConfig()


def _check_type(key, value, source):
    default = getattr(DEFAULTS, key)
    if value is None or default is None and key not in ("onset", "refit_per_replica"):
        return value
    if key == "refit_per_replica" or isinstance(default, bool):
        ok = isinstance(value, bool)
    elif key == "onset" or isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"setting {key!r} in {source} has the wrong type ({type(value).__name__})")
    return value

_HELP = {
    "input": "input file (counts CSV for gpss-scan, case records CSV for mdts-scan and replay)",
    "output_dir": "directory for results",
    "config": "JSON file of settings; flags override it",
    "seed": "random seed",
    "alpha": "significance level",
    "replicas": "randomization replicas",
    "k": "GPSS neighborhood size",
    "restarts": "search restarts",
    "rank": "CP rank of the MDTS baseline",
    "window": "trailing window length in time bins (replay)",
    "bin_days": "days per time bin for case records",
    "metric": "GPSS neighborhood metric",
    "k_exhaustive": "largest neighborhood searched exhaustively",
    "penalty": "per-point penalty on GPSS scores",
    "transform": "response transform before GP fitting (none or sqrt)",
    "n_starts": "GP hyperparameter optimizer starts",
    "coordinates": "CSV of location coordinates (location_id,x,...)",
    "max_sweeps": "CP decomposition sweep limit",
    "dictionaries": "category dictionaries JSON from an earlier run",
    "min_history": "bins of history required before the first replay step",
    "persistence": "consecutive significant replay steps needed to report a cluster",
    "kind": "synthetic data kind: counts or cases",
    "magnitude": "injection size (sigma units over a k-point blob for counts, relative risk for cases; 0 = null)",
    "n_locations": "synthetic locations",
    "n_times": "synthetic months for counts",
    "n_bins": "synthetic time bins for cases",
    "missing_rate": "fraction of synthetic count rows marked missing",
    "n_zips": "synthetic zip codes",
    "n_drugs": "synthetic drug flag columns",
    "cases_per_bin": "mean synthetic cases per time bin",
    "onset": "first injected bin for synthetic cases (default: last 4 bins)",
    "scan": "scan to calibrate: gpss or mdts",
    "trials": "outer calibration trials",
}


def _type_of(name):
    default = getattr(DEFAULTS, name)
    if isinstance(default, bool):
        return None
    if isinstance(default, (int, float)):
        return type(default)
    if name == "onset":
        return int
    return str


def build_parser():
    parser = argparse.ArgumentParser(
        prog="subsetscan",
        description="Subset scans for anomalous clusters (GPSS for correlated counts, MDTS for case records).",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "gpss-scan": "scan location x time counts with the Gaussian process subset scan",
        "mdts-scan": "scan victim-level case records with the multidimensional tensor scan",
        "replay": "prospective replay of case records, one time bin at a time",
        "synth": "write a synthetic input file, optionally with an injected cluster",
        "calibrate": "measure the empirical size of a randomization test on null synthetics",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name],
                           argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help=_HELP["config"])
        for field in dataclasses.fields(RunConfig):
            if field.name in ("two_sided", "refit_per_replica"):
                continue
            flag = "--" + field.name.replace("_", "-")
            default = getattr(DEFAULTS, field.name)
            p.add_argument(flag, dest=field.name, type=_type_of(field.name),
                           help=f"{_HELP[field.name]} (default: {default})")
        p.add_argument("--two-sided", dest="two_sided", action="store_const", const=True,
                       help="score positive and negative GPSS shifts (default: on)")
        p.add_argument("--one-sided", dest="two_sided", action="store_const", const=False,
                       help="score positive GPSS shifts only")
        p.add_argument("--refit-per-replica", dest="refit_per_replica", action="store_const", const=True,
                       help="refit the null model on every replica (default: off for scans, on for replay)")
        p.add_argument("--no-refit-per-replica", dest="refit_per_replica", action="store_const", const=False)
        p.add_argument("--verbose", "-v", action="count", help="log progress to stderr")
    return parser


def _load_config_file(path):
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return values


def _require_input(cfg):
    if not cfg.input:
        raise ConfigError("--input is required")
    if not Path(cfg.input).is_file():
        raise IngestionError(f"input {cfg.input} does not exist")


def _write_outputs(cfg, files):
    """Create the output directory and write every file (only after all work succeeded)."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
    return out


def _json(document):
    return json.dumps(document, indent=2, ensure_ascii=False) + "\n"


def _refit(cfg, default):
    return default if cfg.refit_per_replica is None else cfg.refit_per_replica


def cmd_gpss_scan(cfg: RunConfig):
    _require_input(cfg)
    data = sio.read_aggregated_counts(cfg.input, coordinates=cfg.coordinates)
    est = GaussianProcessSubsetScan(
        k=min(cfg.k, int(data.observed.sum())), metric=cfg.metric, k_exhaustive=cfg.k_exhaustive,
        restarts=cfg.restarts, two_sided=cfg.two_sided, penalty=cfg.penalty, transform=cfg.transform,
        n_starts=cfg.n_starts, replicas=cfg.replicas, alpha=cfg.alpha,
        refit_per_replica=_refit(cfg, False), random_state=cfg.seed,
    ).fit(data.X, data.y, data.observed, meta=data.meta)
    m = est.model_
    clusters = sio.gpss_result_records(est.clusters_, est.data_, cfg.alpha)
    doc = {
        "method": "gpss",
        "config": cfg.to_dict(),
        "model": {
            "mean": m.mean_const,
            "signal_var": m.signal_var,
            "lengthscales": list(m.lengthscales),
            "noise_var": m.noise_var,
        },
        "null": est.null_distribution_.summary() if est.null_distribution_ else None,
        "n_significant": sum(c["significant"] for c in clusters),
        "clusters": clusters,
    }
    rows, cols = sio.gpss_plot_rows(est.data_, est.expected_(), est.clusters_)
    out = _write_outputs(cfg, {
        "results.json": _json(doc),
        "plot_data.csv": sio.to_text(sio.write_plot_table, rows, cols),
    })
    for c in clusters[:5]:
        where = ", ".join(f"{loc}@{t}" for loc, t in c.get("cells", [])[:6])
        print(f"cluster {c['cluster_id']}: {c['support']['n_points']} points, score {c['score']:.3f}, "
              f"shift {c['effect']:+.3f}, p={c['p_value']}{' *' if c['significant'] else ''}  {where}")
    print(f"{doc['n_significant']} significant cluster(s) at alpha={cfg.alpha}; results in {out}")
    return EXIT_OK


def _read_cases(cfg):
    _require_input(cfg)
    dicts = sio.load_dictionaries(cfg.dictionaries) if cfg.dictionaries else None
    return sio.read_case_records(cfg.input, bin_days=cfg.bin_days, dictionaries=dicts)


def cmd_mdts_scan(cfg: RunConfig):
    tensor = _read_cases(cfg)
    est = MultidimensionalTensorScan(
        rank=cfg.rank, restarts=cfg.restarts, replicas=cfg.replicas, alpha=cfg.alpha,
        refit_per_replica=_refit(cfg, False), max_sweeps=cfg.max_sweeps, random_state=cfg.seed,
    ).fit_tensor(tensor)
    clusters = sio.mdts_result_records(est.clusters_, tensor, cfg.alpha)
    doc = {
        "method": "mdts",
        "config": cfg.to_dict(),
        "baseline": {"rank": est.baseline_.rank, "floor": est.baseline_.floor,
                     "converged": est.baseline_.converged, "total": est.baseline_.total_mass},
        "null": est.null_distribution_.summary() if est.null_distribution_ else None,
        "n_significant": sum(c["significant"] for c in clusters),
        "clusters": clusters,
    }
    rows, cols = sio.mdts_plot_rows(tensor, est.baseline_, est.clusters_)
    out = _write_outputs(cfg, {
        "results.json": _json(doc),
        "plot_data.csv": sio.to_text(sio.write_plot_table, rows, cols),
        "dictionaries.json": _json_sorted(tensor.meta["dictionaries"]),
    })
    for c in clusters[:5]:
        s = c["support"]
        print(f"cluster {c['cluster_id']}: {c['description']}  C={s['C']:.0f} B={s['B']:.2f} "
              f"q={c['effect']:.2f} score {c['score']:.3f} p={c['p_value']}{' *' if c['significant'] else ''}")
    print(f"{doc['n_significant']} significant cluster(s) at alpha={cfg.alpha}; results in {out}")
    return EXIT_OK


def _json_sorted(document):
    return json.dumps(document, indent=2, sort_keys=True) + "\n"


def cmd_replay(cfg: RunConfig):
    tensor = _read_cases(cfg)
    rc = ReplayConfig(
        window=cfg.window, min_history=cfg.min_history, rank=cfg.rank, restarts=cfg.restarts,
        replicas=cfg.replicas, alpha=cfg.alpha, persistence=cfg.persistence,
        refit_per_replica=_refit(cfg, True), seed=cfg.seed,
    )
    report = replay(tensor, rc)
    cols = ["step", "date", "top_cluster", "score", "effect", "C", "B", "p_value", "significant", "detection"]
    rows = [
        [s.step, s.label, s.subspace.describe(window_tensor(tensor, s.step, rc.window)), s.score, s.effect,
         s.support[0], s.support[1], s.p_value, int(s.significant), int(s.detection)]
        for s in report.steps
    ]
    first = report.detections[0].label if report.detections else None
    doc = {
        "method": "replay",
        "config": cfg.to_dict(),
        "first_detection": first,
        "detections": [{"step": s.step, "date": s.label, "score": s.score, "p_value": s.p_value,
                        "description": rows[i][2]}
                       for i, s in enumerate(report.steps) if s.detection],
    }
    out = _write_outputs(cfg, {
        "timeline.csv": sio.to_text(sio.write_plot_table, rows, cols),
        "results.json": _json(doc),
        "dictionaries.json": _json_sorted(tensor.meta["dictionaries"]),
    })
    for r in rows:
        print(f"{r[1]}  score {r[3]:.3f}  p={r[7]:.3f}{'  significant' if r[8] else ''}"
              f"{'  DETECTION' if r[9] else ''}  {r[2]}")
    print(f"first detection: {first or 'none'}; timeline in {out}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig):
    if cfg.kind == "counts":
        shape = GridShape(n_locations=cfg.n_locations, n_times=cfg.n_times, missing_rate=cfg.missing_rate)
        spec = None
        if cfg.magnitude:
            sigma = math.sqrt(shape.model.signal_var + shape.model.noise_var)
            center = (cfg.n_locations // 2) * cfg.n_times + cfg.n_times // 2
            spec = InjectionSpec("additive-shift", {"center": center, "size": cfg.k},
                                 cfg.magnitude * sigma, seed=cfg.seed)
        sd = synth_generate(spec, shape, seed=cfg.seed)
        truth = {"kind": "counts", "magnitude_sigma": cfg.magnitude, "points": list(sd.truth),
                 "cells": [[f"L{p // cfg.n_times:02d}", str(p % cfg.n_times)] for p in sd.truth]}
        data_text = sio.to_text(sio.write_aggregated_counts, sd.data)
    elif cfg.kind == "cases":
        q = cfg.magnitude if cfg.magnitude else None
        tensor, region, _ = synth_cases(n_bins=cfg.n_bins, n_zips=cfg.n_zips, n_drugs=cfg.n_drugs,
                                        cases_per_bin=cfg.cases_per_bin, q=q, onset=cfg.onset, seed=cfg.seed)
        truth = {"kind": "cases", "relative_risk": cfg.magnitude,
                 "region": region.describe(tensor) if region else None,
                 "onset": tensor.labels[0][region.values[0][0]] if region else None}
        data_text = sio.to_text(sio.write_case_records, tensor)
    else:
        raise ConfigError(f"unknown synthetic kind {cfg.kind!r} (counts or cases)")
    out = _write_outputs(cfg, {"data.csv": data_text, "truth.json": _json(truth)})
    print(f"wrote {out / 'data.csv'}")
    return EXIT_OK


def cmd_calibrate(cfg: RunConfig):
    if cfg.scan == "gpss":
        report = empirical_size(gpss_null_trial, cfg.trials, cfg.alpha, replicas=cfg.replicas, k=cfg.k,
                                refit=_refit(cfg, True))
        shape = {"n_locations": GPSS_NULL_SHAPE.n_locations, "n_times": GPSS_NULL_SHAPE.n_times}
    elif cfg.scan == "mdts":
        report = empirical_size(mdts_null_trial, cfg.trials, cfg.alpha, replicas=cfg.replicas,
                                restarts=cfg.restarts, refit=_refit(cfg, True))
        shape = {"arities": list(MDTS_NULL_SHAPE.arities)}
    else:
        raise ConfigError(f"unknown scan {cfg.scan!r} (gpss or mdts)")
    doc = {"scan": cfg.scan, "shape": shape, **report.summary(),
           "p_values": [float(p) for p in report.p_values]}
    out = _write_outputs(cfg, {"calibration.json": _json(doc)})
    print(f"{cfg.scan}: empirical size {report.rate:.3f} at nominal alpha {cfg.alpha} "
          f"over {report.trials} null trials; details in {out}")
    return EXIT_OK


HANDLERS = {
    "gpss-scan": cmd_gpss_scan,
    "mdts-scan": cmd_mdts_scan,
    "replay": cmd_replay,
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
}


def main(argv=None):
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    verbose = args.pop("verbose", 0)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        file_values = _load_config_file(args.pop("config")) if "config" in args else None
        cfg = RunConfig.resolve(file_values, args)
        return HANDLERS[command](cfg)
    except IngestionError as exc:
        print(f"subsetscan {command}: ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGESTION
    except ConfigError as exc:
        print(f"subsetscan {command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DecompositionError, OptimizationError, ScanError, ArithmeticError) as exc:
        print(f"subsetscan {command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
