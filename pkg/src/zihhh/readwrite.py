"""CSV/JSON ingestion and serialization.

Counts and covariates: header ``t,<unit 1>,...,<unit R>``, one row per
period with a 1-based integer ``t``.  Adjacency: square 0/1 matrix with
unit names as header and as first column.  Configs are JSON documents
carrying ``schema_version``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd

from .covariance import CovarianceSpec
from .data_model import DEFAULT_KAPPA, SurveillanceData, apply_transform
from .design import Component, ConfigurationError, ModelFormula

SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.17g"


class DataFormatError(ValueError):
    """Malformed input file (as opposed to a missing one)."""


def read_matrix_csv(path, integer=False):
    """Return ``(time, unit_names, values)`` from a time x unit CSV."""
    path = Path(path)
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    if df.columns[0] != "t":
        raise DataFormatError(f"{path}: first column must be 't', got {df.columns[0]!r}")
    if df.shape[1] < 2:
        raise DataFormatError(f"{path}: no unit columns")
    units = [str(c) for c in df.columns[1:]]
    vals = df.iloc[:, 1:].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(vals)
    if bad.any():
        rows, cols = np.nonzero(bad)
        where = ", ".join(f"row {r + 2} column {units[c]}" for r, c in zip(rows[:5], cols[:5]))
        raise DataFormatError(f"{path}: missing or non-numeric values at {where}"
                              + (" ..." if rows.size > 5 else ""))
    t = pd.to_numeric(df["t"], errors="coerce").to_numpy()
    if not np.isfinite(t).all() or np.any(t != np.round(t)):
        raise DataFormatError(f"{path}: column t must hold integers")
    if integer and np.any(vals != np.round(vals)):
        r, c = np.argwhere(vals != np.round(vals))[0]
        raise DataFormatError(f"{path}: non-integer count at row {r + 2} column {units[c]}")
    return t.astype(np.int64), units, vals


def write_matrix_csv(path, time, unit_names, values, integer=False):
    values = np.asarray(values)
    df = pd.DataFrame(values.astype(np.int64) if integer else values, columns=list(unit_names))
    df.insert(0, "t", np.asarray(time, dtype=np.int64))
    df.to_csv(path, index=False, float_format=None if integer else FLOAT_FORMAT,
              lineterminator="\n")


def read_adjacency_csv(path):
    path = Path(path)
    try:
        df = pd.read_csv(path, index_col=0)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    names = [str(c) for c in df.columns]
    if [str(i) for i in df.index] != names:
        raise DataFormatError(f"{path}: row labels must match the header")
    A = df.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    if not np.isfinite(A).all():
        raise DataFormatError(f"{path}: adjacency entries must be numeric")
    return names, A


def write_adjacency_csv(path, unit_names, A):
    df = pd.DataFrame(np.asarray(A, dtype=np.int64), index=list(unit_names),
                      columns=list(unit_names))
    df.to_csv(path, index_label="", lineterminator="\n")


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else Path(base) / p


def load_data(block, base_dir="."):
    """Build a dataset from the ``data`` block of a config.

    ``block`` keys: ``counts`` (path), ``covariates``/``offsets`` (name ->
    path), ``adjacency`` (path, optional), ``freq`` (default 26) and
    ``transforms`` (list of ``{name, op, source, kappa?, pop?}``).
    """
    time, units, y = read_matrix_csv(_resolve(base_dir, block["counts"]), integer=True)
    extra = {}
    for kind in ("covariates", "offsets"):
        extra[kind] = {}
        for name, p in (block.get(kind) or {}).items():
            t2, u2, v = read_matrix_csv(_resolve(base_dir, p))
            if list(u2) != list(units) or not np.array_equal(t2, time):
                raise DataFormatError(f"{kind[:-1]} {name!r} does not match the counts layout")
            extra[kind][name] = v
    A = None
    if block.get("adjacency"):
        names, A = read_adjacency_csv(_resolve(base_dir, block["adjacency"]))
        if names != list(units):
            raise DataFormatError("adjacency units do not match the counts header")
    data = SurveillanceData(y, units, freq=int(block.get("freq", 26)),
                            covariates=extra["covariates"], offsets=extra["offsets"],
                            adjacency=A, time=time)
    for tr in block.get("transforms") or []:
        data = apply_transform(data, tr["name"], tr["op"], tr["source"],
                               kappa=tr.get("kappa", DEFAULT_KAPPA), pop=tr.get("pop"))
    return data


def write_data(out_dir, data: SurveillanceData, counts_name="counts.csv"):
    """Write counts, covariates, offsets and adjacency; return a data block."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / counts_name, data.time, data.unit_names, data.counts, integer=True)
    block = {"counts": counts_name, "freq": data.freq, "covariates": {}, "offsets": {}}
    for kind in ("covariates", "offsets"):
        for name, v in getattr(data, kind).items():
            fn = f"{kind[:-1]}_{name}.csv"
            write_matrix_csv(out / fn, data.time, data.unit_names, v)
            block[kind][name] = fn
    write_adjacency_csv(out / "adjacency.csv", data.unit_names, data.adjacency)
    block["adjacency"] = "adjacency.csv"
    return block


def component_from_dict(d):
    if d is None or d is False:
        return None
    if d is True:
        d = {}
    unknown = set(d) - {"covariates", "seasonality", "offset", "random", "lag"}
    if unknown:
        raise ConfigurationError(f"unknown component keys: {sorted(unknown)}")
    return Component(covariates=tuple(d.get("covariates", ())),
                     seasonality=tuple(tuple(s) for s in d.get("seasonality", ())),
                     offset=d.get("offset"), random=bool(d.get("random", False)),
                     lag=bool(d.get("lag", False)))


def formula_from_dict(d):
    from .presets import preset_formula
    if "preset" in d:
        return preset_formula(d["preset"])
    unknown = set(d) - {"ar", "ne", "end", "zi", "family", "psi", "random_effects",
                        "normalize_weights", "kappa"}
    if unknown:
        raise ConfigurationError(f"unknown model keys: {sorted(unknown)}")
    return ModelFormula(
        ar=component_from_dict(d.get("ar")),
        ne=component_from_dict(d.get("ne")),
        end=component_from_dict(d.get("end")),
        zi=component_from_dict(d.get("zi")),
        family=d.get("family", "nb"),
        psi=d.get("psi", "shared"),
        random_effects=d.get("random_effects", "uncorrelated"),
        normalize_weights=bool(d.get("normalize_weights", True)),
    ).check()


def formula_to_dict(f: ModelFormula):
    out = {"family": f.family, "psi": f.psi, "random_effects": f.random_effects,
           "normalize_weights": f.normalize_weights}
    for name in f.components:
        c = f.component(name)
        out[name] = {"covariates": list(c.covariates),
                     "seasonality": [list(s) for s in c.seasonality],
                     "offset": c.offset, "random": c.random, "lag": c.lag}
    return out


def cov_from_dict(d, formula, R):
    """Random-effect covariance from ``{"sigma": [...], "spherical_r": [...]}``."""
    if not formula.re_components:
        return CovarianceSpec("none", (), R=R)
    sigma = np.asarray(d.get("sigma", [0.3] * len(formula.re_components)), dtype=float)
    return CovarianceSpec(formula.re_structure, formula.re_components, log_sigma=np.log(sigma),
                          spherical_r=d.get("spherical_r", []), R=R)


def load_config(path):
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"{path}: unsupported schema_version {version!r} "
                                 f"(expected {SCHEMA_VERSION})")
    cfg["_base_dir"] = str(path.parent)
    return cfg


def dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
