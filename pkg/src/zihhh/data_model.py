"""Surveillance data container, validation, transmission weights and seasonality."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import pandas as pd

DEFAULT_KAPPA = 0.92


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SurveillanceData:
    """Counts of new cases per period (rows) and unit (columns).

    ``time`` holds the 1-based period index of every row; it is kept when
    the data are sliced so that seasonal terms stay aligned with the
    calendar.
    """

    counts: np.ndarray
    unit_names: tuple
    freq: int = 26
    covariates: dict = field(default_factory=dict)
    offsets: dict = field(default_factory=dict)
    adjacency: np.ndarray | None = None
    time: np.ndarray | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        if counts.ndim == 1:
            counts = counts[:, None]
        object.__setattr__(self, "counts", _frozen(counts))
        object.__setattr__(self, "unit_names", tuple(str(u) for u in self.unit_names))
        T, R = counts.shape
        time = np.arange(1, T + 1) if self.time is None else self.time
        object.__setattr__(self, "time", _frozen(time, dtype=np.int64))
        adj = np.zeros((R, R)) if self.adjacency is None else self.adjacency
        object.__setattr__(self, "adjacency", _frozen(adj))
        object.__setattr__(self, "covariates",
                           {k: _frozen(np.broadcast_to(np.asarray(v, float), counts.shape)
                                       if np.ndim(v) < 2 else v)
                            for k, v in self.covariates.items()})
        object.__setattr__(self, "offsets",
                           {k: _frozen(np.broadcast_to(np.asarray(v, float), counts.shape)
                                       if np.ndim(v) < 2 else v)
                            for k, v in self.offsets.items()})

    @property
    def T(self):
        return self.counts.shape[0]

    @property
    def R(self):
        return self.counts.shape[1]

    def slice_time(self, stop, start=0):
        """Rows ``start:stop`` (0-based, half-open) as a new dataset."""
        sl = slice(start, stop)
        return SurveillanceData(
            counts=self.counts[sl],
            unit_names=self.unit_names,
            freq=self.freq,
            covariates={k: v[sl] for k, v in self.covariates.items()},
            offsets={k: v[sl] for k, v in self.offsets.items()},
            adjacency=self.adjacency,
            time=self.time[sl],
        )

    def with_counts(self, counts):
        return SurveillanceData(counts, self.unit_names, self.freq, self.covariates,
                                self.offsets, self.adjacency, self.time)

    def with_covariate(self, name, values):
        cov = dict(self.covariates)
        cov[name] = values
        return SurveillanceData(self.counts, self.unit_names, self.freq, cov,
                                self.offsets, self.adjacency, self.time)

    def with_offset(self, name, values):
        off = dict(self.offsets)
        off[name] = values
        return SurveillanceData(self.counts, self.unit_names, self.freq, self.covariates,
                                off, self.adjacency, self.time)


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.errors

    def __bool__(self):
        return self.ok

    def __str__(self):
        lines = ["PASS" if self.ok else "FAIL"]
        lines += [f"error: {e}" for e in self.errors]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def validate(data: SurveillanceData) -> ValidationReport:
    """Check the invariants of a dataset; never raises."""
    rep = ValidationReport()
    y = data.counts
    T, R = y.shape
    if T < 2:
        rep.errors.append(f"need at least 2 time points, got {T}")
    if R < 1:
        rep.errors.append("need at least one unit")
    if len(data.unit_names) != R:
        rep.errors.append(f"{len(data.unit_names)} unit names for {R} count columns")
    bad = ~np.isfinite(y)
    if bad.any():
        t, r = np.argwhere(bad)[0]
        rep.errors.append(f"counts must be finite ({int(bad.sum())} cells; "
                          f"first at row {t + 1}, column {_name(data, r)})")
    else:
        if (y < 0).any():
            t, r = np.argwhere(y < 0)[0]
            rep.errors.append(f"counts must be nonnegative (row {t + 1}, column {_name(data, r)})")
        if (y != np.round(y)).any():
            rep.errors.append("counts must be integers")
    A = data.adjacency
    if A.shape != (R, R):
        rep.errors.append(f"adjacency must be {R}x{R}, got {A.shape[0]}x{A.shape[1]}")
    else:
        if np.any(np.diag(A) != 0):
            rep.errors.append("adjacency diagonal must be zero")
        if not np.array_equal(A, A.T):
            rep.errors.append("adjacency must be symmetric")
        if not np.isin(A, (0, 1)).all():
            rep.errors.append("adjacency must be binary")
        if R > 1 and (A.sum(axis=1) == 0).any():
            iso = [_name(data, r) for r in np.flatnonzero(A.sum(axis=1) == 0)]
            rep.warnings.append(f"isolated units: {', '.join(iso)}")
    for name, x in data.covariates.items():
        if x.shape != y.shape:
            rep.errors.append(f"covariate {name!r} has shape {x.shape}, counts {y.shape}")
        elif not np.isfinite(x).all():
            rep.errors.append(f"covariate {name!r} must be finite")
    for name, o in data.offsets.items():
        if o.shape != y.shape:
            rep.errors.append(f"offset {name!r} has shape {o.shape}, counts {y.shape}")
        elif not (np.isfinite(o).all() and (o > 0).all()):
            rep.errors.append(f"offset {name!r} must be strictly positive")
    if data.freq < 2:
        rep.errors.append("freq must be at least 2")
    if len(data.time) != T or np.any(np.diff(data.time) <= 0):
        rep.errors.append("time index must be strictly increasing")
    return rep


def _name(data, r):
    return data.unit_names[r] if r < len(data.unit_names) else str(r + 1)


def build_weights(adjacency, normalize=True):
    """Transmission weights ``w[q, r]`` from unit q to unit r.

    With ``normalize`` each unit q spreads its cases evenly over its
    ``m_q`` neighbours, ``w[q, r] = 1 / m_q``.
    """
    A = np.asarray(adjacency, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("adjacency must be a square matrix")
    W = A.copy()
    np.fill_diagonal(W, 0.0)
    m = W.sum(axis=1)
    if A.shape[0] > 1 and (m == 0).any():
        warnings.warn(f"{int((m == 0).sum())} isolated unit(s) get all-zero weight rows",
                      stacklevel=2)
    if normalize:
        nz = m > 0
        W[nz] = W[nz] / m[nz, None]
    return W


def seasonal_covariates(t, S, freq):
    """(sin(wt), cos(wt), ..., sin(Swt), cos(Swt)) with w = 2*pi/freq.

    ``t`` may be a scalar or an array; harmonics run along the last axis.
    """
    if S < 1:
        raise ValueError("need at least one harmonic")
    if freq < 2:
        raise ValueError("period must be at least 2")
    t = np.asarray(t, dtype=float)
    omega = 2 * np.pi / freq
    out = np.empty(t.shape + (2 * S,))
    for s in range(1, S + 1):
        out[..., 2 * s - 2] = np.sin(s * omega * t)
        out[..., 2 * s - 1] = np.cos(s * omega * t)
    return out


def amplitude_phase(delta, zeta):
    """Amplitude and phase of ``delta*sin(x) + zeta*cos(x) = A*sin(x + phase)``.

    The phase is ``atan2(zeta, delta)``; it is ``nan`` when both
    coefficients vanish.
    """
    A = float(np.hypot(delta, zeta))
    if A == 0.0:
        return 0.0, float("nan")
    return A, float(np.arctan2(zeta, delta))


# Covariate/offset transforms used by the measles models.

def transform_values(op, data: SurveillanceData, source, kappa=DEFAULT_KAPPA, pop=None):
    """Evaluate a named transform of covariate ``source``.

    ``log1m``           log(1 - x)
    ``log1m_kappa``     log(1 - kappa*x)
    ``one_minus_kappa`` 1 - kappa*x                       (offset)
    ``pop_fraction``    n_rt / sum_r n_rt                 (offset)
    ``unvacc_pop``      (1 - kappa*x) * n_rt / sum_r n_rt (offset, needs ``pop``)
    ``log``             log(x)
    """
    x = _lookup(data, source)
    if op == "log1m":
        return np.log1p(-x)
    if op == "log1m_kappa":
        return np.log1p(-kappa * x)
    if op == "one_minus_kappa":
        return 1.0 - kappa * x
    if op == "pop_fraction":
        return x / x.sum(axis=1, keepdims=True)
    if op == "unvacc_pop":
        if pop is None:
            raise ValueError("unvacc_pop needs a 'pop' covariate")
        n = _lookup(data, pop)
        return (1.0 - kappa * x) * n / n.sum(axis=1, keepdims=True)
    if op == "log":
        return np.log(x)
    raise ValueError(f"unknown transform {op!r}")


OFFSET_OPS = {"one_minus_kappa", "pop_fraction", "unvacc_pop"}


def apply_transform(data, name, op, source, kappa=DEFAULT_KAPPA, pop=None):
    """Return ``data`` extended by a derived covariate (or offset) ``name``."""
    values = transform_values(op, data, source, kappa=kappa, pop=pop)
    if op in OFFSET_OPS:
        return data.with_offset(name, values)
    return data.with_covariate(name, values)


def _lookup(data, name):
    if name in data.covariates:
        return data.covariates[name]
    if name in data.offsets:
        return data.offsets[name]
    raise KeyError(f"no covariate or offset named {name!r}")


def germany_states():
    """Bundled unit table for the 16 German states.

    Returns ``(codes, adjacency, population)``.
    """
    with resources.files("zihhh").joinpath("data/germany_states.csv").open() as fh:
        tab = pd.read_csv(fh)
    codes = tuple(tab["state"])
    idx = {c: i for i, c in enumerate(codes)}
    A = np.zeros((len(codes), len(codes)))
    for i, nb in enumerate(tab["neighbours"]):
        for c in nb.split(";"):
            A[i, idx[c]] = 1.0
    return codes, A, tab["population"].to_numpy(dtype=float)
