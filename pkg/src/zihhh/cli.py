"""Command-line driver: ``zihhh <command> --config <path>``.

Exit codes: 0 ok, 2 data validation failure, 3 configuration or I/O
error, 4 non-convergence (result files are still written).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .data_model import DEFAULT_KAPPA, validate
from .design import ConfigurationError, NumericError, assemble_design
from .estimation import DataValidationError, FitOptions, fit
from .forecasting import SCORES, ForecastSet, aggregate, osa_forecast, pairwise_tests
from .presets import apply_preset_transforms
from .readwrite import (DataFormatError, cov_from_dict, dump_json, formula_from_dict,
                        formula_to_dict, load_config, load_data, write_data)
from .simulation import (GERMANY_TRUTH, SimConfig, SimulationError, germany_formula,
                         germany_template, simulate, simulation_study)

EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_NONCONV = 0, 2, 3, 4
COMMANDS = ("validate", "fit", "simulate", "simstudy", "forecast", "score")

log = logging.getLogger("zihhh")


def _section(cfg, key, required=True):
    if key not in cfg:
        if required:
            raise ConfigurationError(f"config lacks a {key!r} block")
        return {}
    return cfg[key]


def _out_dir(cfg, args):
    out = Path(args.out or cfg.get("output", {}).get("dir", "out"))
    if not out.is_absolute() and not args.out:
        out = Path(cfg["_base_dir"]) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("ZIHHH_THREADS")
    return int(env) if env else (os.cpu_count() or 1)


def _seed(args, block, default=1):
    return int(args.seed) if args.seed is not None else int(block.get("seed", default))


def _fit_options(cfg):
    try:
        return FitOptions(**_section(cfg, "fit", required=False))
    except TypeError as exc:
        raise ConfigurationError(f"bad fit options: {exc}") from exc


def _model_blocks(cfg):
    if "models" in cfg:
        return dict(cfg["models"])
    return {"model": _section(cfg, "model")}


def _prepare_data(cfg, model_blocks=()):
    data = load_data(_section(cfg, "data"), cfg["_base_dir"])
    for mb in model_blocks:
        if "preset" in mb:
            data = apply_preset_transforms(data, kappa=mb.get("kappa", DEFAULT_KAPPA),
                                           vacc=mb.get("vacc", "vacc"), pop=mb.get("pop", "pop"))
    return data


def cmd_validate(cfg, args):
    data = load_data(_section(cfg, "data"), cfg["_base_dir"])
    rep = validate(data)
    for w in rep.warnings:
        print(f"warning: {w}")
    for e in rep.errors:
        print(f"error: {e}")
    print(f"{'valid' if rep.ok else 'invalid'}: T={data.T}, R={data.R}")
    return EXIT_OK if rep.ok else EXIT_INVALID


def write_fit(res, out, level=0.95):
    summary = res.summary()
    summary["formula"] = formula_to_dict(res.formula)
    tab = res.coef_table(level)
    summary["coefficients"] = {k: {"estimate": r.estimate, "se": r.se}
                               for k, r in tab.iterrows()}
    if res.design.n_psi:
        summary["psi"] = dict(zip(
            [lab.replace("psi_tilde", "psi") for lab in res.labels[res.design.psi_slice]],
            res.psi().tolist()))
    dump_json(summary, out / "fit.json")
    tab.to_csv(out / "coefficients.csv", float_format="%.10g")
    re = res.random_effects()
    if len(re):
        re.to_csv(out / "random_effects.csv", index=False, float_format="%.10g")
    amp = res.amplitudes()
    if len(amp):
        amp.to_csv(out / "amplitudes.csv", index=False, float_format="%.10g")
    rt = res.reproduction_numbers()
    pd.DataFrame({"t": res.design.time[::res.design.R], "R_t": rt}).to_csv(
        out / "reproduction.csv", index=False, float_format="%.10g")


def cmd_fit(cfg, args):
    mb = _section(cfg, "model")
    formula = formula_from_dict(mb)
    data = _prepare_data(cfg, [mb])
    t0 = time.perf_counter()
    res = fit(formula, data, _fit_options(cfg))
    log.info("fit finished in %.2fs", time.perf_counter() - t0)
    out = _out_dir(cfg, args)
    write_fit(res, out)
    print(res.coef_table().to_string(float_format=lambda v: f"{v:.4f}"))
    if not res.converged:
        print("fit did not converge", file=sys.stderr)
        return EXIT_NONCONV
    return EXIT_OK


def _sim_config(cfg, args):
    sb = _section(cfg, "simulation")
    if sb.get("template", "germany") == "germany":
        T = int(sb.get("T", 500))
        template = germany_template(T, freq=int(sb.get("freq", 26)))
    else:
        template = _prepare_data(cfg)
        if "T" in sb:
            template = template.slice_time(int(sb["T"]))
    if "model" in cfg:
        formula = formula_from_dict(cfg["model"])
        truth = sb.get("truth")
        if truth is None:
            raise ConfigurationError("simulation.truth is required with a custom model")
    else:
        formula = germany_formula()
        truth = sb.get("truth", GERMANY_TRUTH)
    cov = cov_from_dict(sb.get("random_effects", {}), formula, template.R)
    y_init = sb.get("y_init")
    return SimConfig(formula, template, dict(truth), cov=cov,
                     y_init=None if y_init is None else np.asarray(y_init),
                     n_reps=int(sb.get("n_reps", 1)), base_seed=_seed(args, sb),
                     ci_levels=tuple(sb.get("ci_levels", (0.95, 0.50))),
                     fit_options=_fit_options(cfg))


def cmd_simulate(cfg, args):
    sc = _sim_config(cfg, args)
    y, x = simulate(sc, seed=sc.base_seed, return_truth=True)
    out = _out_dir(cfg, args)
    block = write_data(out, sc.template.with_counts(y))
    dump_json({"schema_version": 1, "data": block}, out / "data_config.json")
    labels = assemble_design(sc.formula, sc.template).labels
    dump_json({"seed": sc.base_seed, "parameters": dict(zip(labels, x.tolist())),
               "formula": formula_to_dict(sc.formula)}, out / "truth.json")
    print(f"wrote {y.shape[0]} x {y.shape[1]} counts to {out / 'counts.csv'}")
    return EXIT_OK


def cmd_simstudy(cfg, args):
    sc = _sim_config(cfg, args)
    t0 = time.perf_counter()
    rep = simulation_study(sc, workers=_threads(args))
    elapsed = time.perf_counter() - t0
    out = _out_dir(cfg, args)
    rep.to_csv(out / "simstudy.csv")
    dump_json({"n_reps": rep.n_reps, "base_seed": sc.base_seed, "T": sc.T, "R": sc.template.R,
               "convergence_rate": rep.convergence_rate, "ci_levels": list(rep.ci_levels),
               "failures": {str(k): v for k, v in rep.failures.items()},
               "formula": formula_to_dict(sc.formula),
               "truth": sc.truth}, out / "simstudy_meta.json")
    print(rep.table.to_string(float_format=lambda v: f"{v:.4f}"))
    print(f"{rep.n_reps} replicates in {elapsed:.1f}s")
    return EXIT_OK


def _score_outputs(sets, block, args, out):
    scores = {name: fs.scores() for name, fs in sets.items()}
    table = aggregate(scores)
    table.to_csv(out / "scores.csv", index_label="model", float_format="%.10g")
    seed = _seed(args, block)
    n_perm = int(block.get("n_perm", 9999))
    tests = [pairwise_tests(scores, s, n_perm, seed) for s in block.get("scores", SCORES)]
    pv = pd.concat(tests, ignore_index=True) if tests else pd.DataFrame()
    pv.to_csv(out / "pvalues.csv", index=False, float_format="%.10g")
    print(table.to_string(float_format=lambda v: f"{v:.4f}"))
    if len(pv):
        print(pv.to_string(index=False))


def cmd_forecast(cfg, args):
    blocks = _model_blocks(cfg)
    if len(blocks) < 1:
        raise ConfigurationError("no models to forecast")
    formulas = {name: formula_from_dict(mb) for name, mb in blocks.items()}
    data = _prepare_data(cfg, blocks.values())
    fb = _section(cfg, "forecast")
    opts = _fit_options(cfg)
    out = _out_dir(cfg, args)
    sets = {}
    for name, f in formulas.items():
        fs = osa_forecast(f, data, int(fb["test_start"]), refit=fb.get("refit", "each_step"),
                          opts=opts)
        fs.to_frame().to_csv(out / f"forecast_{name}.csv", index=False, float_format="%.17g")
        sets[name] = fs
    _score_outputs(sets, fb, args, out)
    dump_json({name: fs.meta for name, fs in sets.items()}, out / "forecast_meta.json")
    return EXIT_OK


def cmd_score(cfg, args):
    sb = _section(cfg, "score")
    paths = sb.get("forecasts") or {}
    if not paths:
        raise ConfigurationError("score.forecasts must name at least one forecast file")
    sets = {}
    keys = None
    for name, p in paths.items():
        p = Path(p) if Path(p).is_absolute() else Path(cfg["_base_dir"]) / p
        df = pd.read_csv(p, float_precision="round_trip")
        missing = {"t", "unit", "y", "mu", "psi", "gamma", "valid"} - set(df.columns)
        if missing:
            raise DataFormatError(f"{p}: missing columns {sorted(missing)}")
        k = list(zip(df["t"], df["unit"]))
        if keys is not None and k != keys:
            raise DataFormatError(f"{p}: cells do not match the other forecast files")
        keys = k
        sets[name] = ForecastSet.from_frame(df)
    _score_outputs(sets, sb, args, _out_dir(cfg, args))
    return EXIT_OK


HANDLERS = {"validate": cmd_validate, "fit": cmd_fit, "simulate": cmd_simulate,
            "simstudy": cmd_simstudy, "forecast": cmd_forecast, "score": cmd_score}


def build_parser():
    p = argparse.ArgumentParser(prog="zihhh", description="Zero-inflated endemic-epidemic "
                                "models for multivariate count time series.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: $ZIHHH_THREADS or all cores)")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        return HANDLERS[args.command](cfg, args)
    except (DataFormatError, DataValidationError) as exc:
        print(f"invalid data: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigurationError, OSError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, SimulationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NONCONV


if __name__ == "__main__":
    sys.exit(main())
