"""Command-line interface: ``gvecchia <subcommand> [options]``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .conditioning import ConfigurationError
from .covariance import MaternParams, NoiseModel, effective_range_to_rho
from .experiments import (
    CVConfig,
    DataFormatError,
    ExperimentConfig,
    default_ordering,
    read_data_csv,
    run_bench,
    run_comparison,
    run_cv,
    run_predict,
    simulate_dataset,
    write_data_csv,
    write_rows,
)
from .geometry import build_geometry
from .likelihood import fit_parameters
from .sparse_engine import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("gvecchia")


def _load_config(path):
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a JSON object")
    return cfg


def _merge(cfg: dict, args, mapping: dict) -> dict:
    """Command-line flags override JSON fields."""
    out = dict(cfg)
    for flag, key in mapping.items():
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def _model(cfg: dict):
    """Matérn parameters and nugget from config fields."""
    nu = float(cfg.get("nu", 1.5))
    if "range" in cfg:
        rho = float(cfg["range"])
    else:
        rho = effective_range_to_rho(float(cfg.get("range_eff", 0.15)), nu)
    params = MaternParams(float(cfg.get("variance", 1.0)), rho, nu)
    if "nugget" in cfg:
        tau2 = float(cfg["nugget"])
    else:
        tau2 = 1.0 / float(cfg.get("snr", 10.0))
    return params, NoiseModel(tau2)


def _first(v):
    return v[0] if isinstance(v, list) else v


def cmd_simulate(args, cfg):
    cfg = _merge(cfg, args, {"seed": "seed", "range_eff": "range_eff", "out": "out", "dim": "dim",
                             "n_obs": "n_obs", "n_pred": "n_pred"})
    if args.nu is not None:
        cfg["nus"] = args.nu
    if args.snr is not None:
        cfg["snrs"] = args.snr
    config = ExperimentConfig.from_dict({k: v for k, v in cfg.items() if k in ExperimentConfig.__dataclass_fields__})
    data = simulate_dataset(config)
    os.makedirs(config.out, exist_ok=True)
    write_data_csv(os.path.join(config.out, "data.csv"), data)
    coords = ["x", "y"][: data.dim]
    rows = [{"loc_id": i, **{c: float(v) for c, v in zip(coords, loc)}, "y": float(yv)}
            for i, (loc, yv) in enumerate(zip(data.locations, data.y))]
    write_rows(os.path.join(config.out, "truth.csv"), rows, ["loc_id"] + coords + ["y"])
    print(f"wrote {config.out}/data.csv and truth.csv ({data.locations.shape[0]} locations)")


def cmd_compare(args, cfg):
    cfg = _merge(cfg, args, {"seed": "seed", "range_eff": "range_eff", "out": "out", "dim": "dim",
                             "n_obs": "n_obs", "n_pred": "n_pred", "replicates": "replicates"})
    for flag, key in (("nu", "nus"), ("snr", "snrs"), ("scheme", "schemes"), ("m", "ms")):
        if getattr(args, flag) is not None:
            cfg[key] = getattr(args, flag)
    config = ExperimentConfig.from_dict({k: v for k, v in cfg.items() if k in ExperimentConfig.__dataclass_fields__})
    path = os.path.join(config.out, "comparison.csv")
    rows = run_comparison(config, path)
    print(f"wrote {path} ({len(rows)} rows)")


def _data_path(args, cfg):
    path = args.data or cfg.get("data")
    if not path:
        raise ConfigurationError("a data CSV is required (--data)")
    return path


def cmd_predict(args, cfg):
    cfg = _merge(cfg, args, {"seed": "seed", "range_eff": "range_eff", "out": "out"})
    for flag, key in (("nu", "nu"), ("snr", "snr"), ("scheme", "scheme"), ("m", "m")):
        if getattr(args, flag) is not None:
            cfg[key] = _first(getattr(args, flag))
    params, noise = _model(cfg)
    if args.fit:
        params = noise = None
    out = cfg.get("out", "results")
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "predictions.csv")
    dump = None
    if args.dump_factors is not None:
        dump = args.dump_factors or os.path.join(out, "factors")
    rows = run_predict(_data_path(args, cfg), params, noise, cfg.get("scheme", "rf-full"), int(cfg.get("m", 10)),
                       path, exact_variances=args.exact_variances, n_samples=int(args.samples or 0),
                       seed=int(cfg.get("seed", 0)), dump_dir=dump)
    print(f"wrote {path} ({len(rows)} rows)")


def cmd_cv(args, cfg):
    cfg = _merge(cfg, args, {"seed": "seed", "range_eff": "range_eff", "out": "out"})
    for flag, key in (("nu", "nu"), ("snr", "snr")):
        if getattr(args, flag) is not None:
            cfg[key] = _first(getattr(args, flag))
    params, noise = _model(cfg)
    schemes = args.scheme or cfg.get("schemes", ["rf-full", "rf-stand", "rf-ind"])
    ms = args.m or cfg.get("ms", [10])
    cvd = dict(cfg.get("cv", {}))
    if args.folds is not None:
        cvd["kind"] = args.folds
    cvd.setdefault("seed", int(cfg.get("seed", 0)))
    cv = CVConfig(**cvd)
    out = cfg.get("out", "results")
    path = os.path.join(out, "cv.csv")
    rows = run_cv(_data_path(args, cfg), cv, schemes, ms, params, noise, path)
    print(f"wrote {path} ({len(rows)} rows)")


def cmd_bench(args, cfg):
    cfg = _merge(cfg, args, {"seed": "seed", "out": "out"})
    ns = args.n or cfg.get("ns", [2000, 4000, 8000])
    ms = args.m or cfg.get("ms", [10])
    schemes = args.scheme or cfg.get("schemes", ["rf-full", "rf-stand", "rf-ind"])
    out = cfg.get("out", "results")
    path = os.path.join(out, "bench.csv")
    rows = run_bench(ns, ms, schemes, seed=int(cfg.get("seed", 0)), out_csv=path,
                     repeats=int(cfg.get("repeats", 1)))
    print(f"wrote {path} ({len(rows)} rows)")


def cmd_fit(args, cfg):
    cfg = _merge(cfg, args, {"seed": "seed", "range_eff": "range_eff", "out": "out"})
    for flag, key in (("nu", "nu"), ("snr", "snr"), ("scheme", "scheme"), ("m", "m")):
        if getattr(args, flag) is not None:
            cfg[key] = _first(getattr(args, flag))
    data = read_data_csv(_data_path(args, cfg), require_z=True)
    scheme = cfg.get("scheme", "rf-full")
    geo = build_geometry(data.locations, data.observed, default_ordering(data.dim, scheme))
    z_o = data.z[geo.permutation][geo.o]
    init = _model(cfg)
    res = fit_parameters(z_o, geo, scheme, init, bounds=cfg.get("bounds"), m=int(cfg.get("m", 10)),
                         fix_smoothness=bool(cfg.get("fix_smoothness", False)))
    result = {"variance": res.params.variance, "range": res.params.range, "nu": res.params.smoothness,
              "nugget": res.noise.nugget, "loglik": res.loglik, "converged": res.converged,
              "iterations": res.iterations}
    out = cfg.get("out", "results")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "fit.json"), "w") as fh:
        json.dump(result, fh, indent=2)
    print(json.dumps(result))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gvecchia", description="General Vecchia approximations for GP prediction.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, multi=False):
        nargs = "+" if multi else None
        p.add_argument("--config", help="JSON configuration; flags override its fields")
        p.add_argument("--scheme", nargs=nargs, help="conditioning scheme(s)")
        p.add_argument("--m", type=int, nargs=nargs, help="conditioning-set size(s)")
        p.add_argument("--nu", type=float, nargs=nargs, help="Matérn smoothness value(s)")
        p.add_argument("--snr", type=float, nargs=nargs, help="signal-to-noise ratio(s), 1/nugget")
        p.add_argument("--range-eff", dest="range_eff", type=float, help="effective range (correlation 0.05)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("simulate", help="simulate a data set")
    common(p, multi=True)
    p.add_argument("--dim", type=int)
    p.add_argument("--n-obs", dest="n_obs", type=int)
    p.add_argument("--n-pred", dest="n_pred", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="KL comparison of schemes on simulated data")
    common(p, multi=True)
    p.add_argument("--dim", type=int)
    p.add_argument("--n-obs", dest="n_obs", type=int)
    p.add_argument("--n-pred", dest="n_pred", type=int)
    p.add_argument("--replicates", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("predict", help="predict from a data CSV")
    common(p)
    p.add_argument("--data")
    p.add_argument("--exact-variances", action="store_true")
    p.add_argument("--dump-factors", nargs="?", const="", metavar="DIR",
                   help="write U and V in Matrix Market format (default DIR: <out>/factors)")
    p.add_argument("--samples", type=int, help="number of conditional samples")
    p.add_argument("--fit", action="store_true", help="estimate parameters first")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cv", help="cross-validation scores")
    common(p, multi=True)
    p.add_argument("--data")
    p.add_argument("--folds", choices=["random", "block"])
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("bench", help="timing and sparsity benchmark")
    common(p, multi=True)
    p.add_argument("--n", type=int, nargs="+")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("fit", help="maximum Vecchia-likelihood parameter estimates")
    common(p)
    p.add_argument("--data")
    p.set_defaults(func=cmd_fit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(getattr(args, "config", None))
        args.func(args, cfg)
    except (NumericalError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigurationError, DataFormatError, OSError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
