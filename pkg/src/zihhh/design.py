"""Model formulas, design matrices and the component predictors.

The conditional NB mean of unit r at time t is

    mu_rt = lambda_rt * y_{r,t-1} + phi_rt * sum_q w_qr y_{q,t-1} + nu_rt

with log-linear ``lambda`` ("ar"), ``phi`` ("ne") and ``nu`` ("end"),
and the zero-inflation probability ``gamma`` ("zi") is logit-linear.
Likelihood cells are (t, r) for t = 2..T, stored time-major:
cell ``k = (t - 2) * R + r``.

Parameters are packed as one vector ``(theta, b, psi_tilde)``:
intercepts (ar, ne, end, zi), then covariate coefficients in the same
component order, then random intercepts component-major, then
``psi_tilde = -log(psi)`` (one shared value or one per unit).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import special

from .data_model import SurveillanceData, build_weights, seasonal_covariates

COMPONENTS = ("ar", "ne", "end", "zi")
ETA_CLAMP = 30.0


class ConfigurationError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Component:
    covariates: tuple = ()
    seasonality: tuple = ()     # ((period, harmonics), ...)
    offset: str | None = None
    random: bool = False
    lag: bool = False           # y_{r,t-1} as covariate; zero-inflation only

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "seasonality",
                           tuple((int(p), int(s)) for p, s in self.seasonality))


@dataclass(frozen=True)
class ModelFormula:
    ar: Component | None = None
    ne: Component | None = None
    end: Component | None = None
    zi: Component | None = None
    family: str = "nb"                    # "nb" or "poisson"
    psi: str = "shared"                   # "shared" or "unit"
    random_effects: str = "uncorrelated"  # used when any component is random
    normalize_weights: bool = True

    def component(self, name):
        return getattr(self, name)

    @property
    def components(self):
        return tuple(c for c in COMPONENTS if self.component(c) is not None)

    @property
    def re_components(self):
        return tuple(c for c in self.components if self.component(c).random)

    @property
    def re_structure(self):
        return self.random_effects if self.re_components else "none"

    def check(self):
        if not any(self.component(c) is not None for c in ("ar", "ne", "end")):
            raise ConfigurationError("at least one of the ar, ne, end components is required")
        if self.family not in ("nb", "poisson"):
            raise ConfigurationError(f"unknown family {self.family!r}")
        if self.psi not in ("shared", "unit"):
            raise ConfigurationError(f"psi must be 'shared' or 'unit', got {self.psi!r}")
        if self.random_effects not in ("uncorrelated", "correlated"):
            raise ConfigurationError(f"unknown random-effect structure {self.random_effects!r}")
        for c in ("ar", "ne", "end"):
            comp = self.component(c)
            if comp is not None and comp.lag:
                raise ConfigurationError(f"lag term only allowed in the zi component, not {c}")
        if self.zi is not None and self.zi.offset is not None:
            raise ConfigurationError("the zi component takes no offset")
        if self.re_structure == "correlated" and len(self.re_components) < 2:
            raise ConfigurationError("correlated random effects need at least two "
                                     "components with random intercepts")
        return self

    def without(self, name):
        return replace(self, **{name: None})


@dataclass
class ComponentDesign:
    name: str
    X: np.ndarray                 # n x p fixed-effect columns, intercept first
    columns: tuple
    log_offset: np.ndarray
    random: bool
    fixed_idx: np.ndarray = None  # positions in the packed parameter vector
    re_idx: np.ndarray = None
    lag_col: int | None = None

    @property
    def idx(self):
        if self.random:
            return np.concatenate([self.fixed_idx, self.re_idx])
        return self.fixed_idx


@dataclass
class DesignMatrices:
    formula: ModelFormula
    unit_names: tuple
    weights: np.ndarray
    time: np.ndarray        # period index per cell
    unit: np.ndarray        # unit index per cell
    y: np.ndarray
    y_own: np.ndarray       # y_{r,t-1}
    y_nbr: np.ndarray       # sum_q w_qr y_{q,t-1}
    comps: dict
    n_theta: int
    n_b: int
    n_psi: int
    labels: list
    psi_idx: np.ndarray | None = None
    mask: np.ndarray | None = None

    @property
    def R(self):
        return len(self.unit_names)

    @property
    def n(self):
        return self.y.size

    @property
    def P(self):
        return self.n_theta + self.n_b + self.n_psi

    @property
    def theta_slice(self):
        return slice(0, self.n_theta)

    @property
    def b_slice(self):
        return slice(self.n_theta, self.n_theta + self.n_b)

    @property
    def psi_slice(self):
        return slice(self.n_theta + self.n_b, self.P)

    def pack(self, state):
        return np.concatenate([state.theta, state.b, state.psi_tilde]).astype(float)

    def unpack(self, x):
        x = np.asarray(x, dtype=float)
        return ParameterState(x[self.theta_slice].copy(), x[self.b_slice].copy(),
                              x[self.psi_slice].copy())

    def as_matrix(self, v):
        """Cell vector -> (T-1) x R matrix."""
        return np.asarray(v).reshape(-1, self.R)

    def index(self, label):
        return self.labels.index(label)

    def vector_from_dict(self, values):
        """Packed vector from ``{label: value}``; unnamed entries are 0.

        ``psi`` (natural scale) is accepted in place of ``psi_tilde``.
        """
        x = np.zeros(self.P)
        for key, v in values.items():
            if key == "psi":
                x[self.psi_slice] = -np.log(v)
                continue
            if key not in self.labels:
                raise ConfigurationError(f"unknown parameter {key!r}; "
                                         f"model has {', '.join(self.labels)}")
            x[self.index(key)] = v
        return x


@dataclass
class ParameterState:
    theta: np.ndarray
    b: np.ndarray = field(default_factory=lambda: np.zeros(0))
    psi_tilde: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def copy(self):
        return ParameterState(self.theta.copy(), self.b.copy(), self.psi_tilde.copy())


def _season_names(period, S):
    names = []
    for s in range(1, S + 1):
        arg = f"2*pi*t/{period}" if s == 1 else f"{s}*2*pi*t/{period}"
        names += [f"sin({arg})", f"cos({arg})"]
    return names


def _lookup(data, name, kind):
    if kind == "offset" and name in data.offsets:
        return data.offsets[name]
    if name in data.covariates:
        return data.covariates[name]
    if kind == "covariate" and name in data.offsets:
        return data.offsets[name]
    raise ConfigurationError(f"{kind} {name!r} not found in data")


def assemble_design(formula: ModelFormula, data: SurveillanceData, weights=None):
    """Build per-component design matrices over cells t = 2..T."""
    formula.check()
    R = data.R
    y = data.counts
    if weights is None:
        weights = build_weights(data.adjacency, normalize=formula.normalize_weights)
    weights = np.asarray(weights, dtype=float)
    if formula.ne is not None and not weights.any():
        raise ConfigurationError("the ne component needs a non-empty neighbourhood")
    time = np.repeat(data.time[1:], R)
    unit = np.tile(np.arange(R), data.T - 1)
    cells = slice(1, None)

    comps = {}
    for name in formula.components:
        comp = formula.component(name)
        cols = [np.ones(time.size)]
        colnames = ["intercept"]
        lag_col = None
        for cov in comp.covariates:
            cols.append(_lookup(data, cov, "covariate")[cells].reshape(-1))
            colnames.append(cov)
        for period, S in comp.seasonality:
            if S < 1:
                continue
            sc = seasonal_covariates(time, S, period)
            cols += list(sc.T)
            colnames += _season_names(period, S)
        if comp.lag:
            if name != "zi":
                raise ConfigurationError("lag term only allowed in the zi component")
            lag_col = len(cols)
            cols.append(y[:-1].reshape(-1).astype(float))
            colnames.append("y_lag")
        if comp.offset is not None:
            off = _lookup(data, comp.offset, "offset")[cells].reshape(-1)
            if not (off > 0).all():
                raise ConfigurationError(f"offset {comp.offset!r} must be strictly positive")
            log_off = np.log(off)
        else:
            log_off = np.zeros(time.size)
        comps[name] = ComponentDesign(name, np.column_stack(cols), tuple(colnames),
                                      log_off, comp.random, lag_col=lag_col)

    labels = []
    pos = 0
    for name in formula.components:
        comps[name].fixed_idx = [pos]
        labels.append(f"{name}.intercept")
        pos += 1
    for name in formula.components:
        k = comps[name].X.shape[1] - 1
        comps[name].fixed_idx = np.array(comps[name].fixed_idx + list(range(pos, pos + k)))
        labels += [f"{name}.{c}" for c in comps[name].columns[1:]]
        pos += k
    n_theta = pos
    for name in formula.re_components:
        comps[name].re_idx = np.arange(pos, pos + R)
        labels += [f"{name}.ri.{u}" for u in data.unit_names]
        pos += R
    n_b = pos - n_theta
    psi_idx = None
    n_psi = 0
    if formula.family == "nb":
        if formula.psi == "unit":
            n_psi = R
            psi_idx = pos + unit
            labels += [f"psi_tilde.{u}" for u in data.unit_names]
        else:
            n_psi = 1
            psi_idx = np.full(time.size, pos)
            labels.append("psi_tilde")

    return DesignMatrices(
        formula=formula,
        unit_names=data.unit_names,
        weights=weights,
        time=time,
        unit=unit,
        y=y[1:].reshape(-1).astype(float),
        y_own=y[:-1].reshape(-1).astype(float),
        y_nbr=(y[:-1] @ weights).reshape(-1),
        comps=comps,
        n_theta=n_theta,
        n_b=n_b,
        n_psi=n_psi,
        labels=labels,
        psi_idx=psi_idx,
        mask=np.isfinite(y[1:]).reshape(-1) & np.isfinite(y[:-1]).reshape(-1),
    )


def logistic_derivs(x):
    """g(x) = expit(x) with its first and second derivatives."""
    g = special.expit(x)
    g1 = g * (1.0 - g)
    g2 = g1 * (1.0 - 2.0 * g)
    return g, g1, g2


class Surfaces(NamedTuple):
    eta: dict           # linear predictors per component (zi clamped)
    ar: np.ndarray      # lambda_rt, zeros when absent
    ne: np.ndarray      # phi_rt
    end: np.ndarray     # nu_rt
    gamma: np.ndarray
    mu: np.ndarray
    zi_clamped: np.ndarray


def eval_predictors(x, design: DesignMatrices):
    """Evaluate all component surfaces at packed parameters ``x``."""
    if isinstance(x, ParameterState):
        x = design.pack(x)
    x = np.asarray(x, dtype=float)
    if x.size != design.P:
        raise ValueError(f"parameter vector has length {x.size}, design expects {design.P}")
    n = design.n
    eta = {}
    parts = {}
    for name, cd in design.comps.items():
        e = cd.X @ x[cd.fixed_idx] + cd.log_offset
        if cd.random:
            e = e + x[cd.re_idx][design.unit]
        eta[name] = e
    for name in ("ar", "ne", "end"):
        parts[name] = np.exp(eta[name]) if name in eta else np.zeros(n)
    mu = parts["ar"] * design.y_own + parts["ne"] * design.y_nbr + parts["end"]
    if "zi" in eta:
        raw = eta["zi"]
        clamped = np.abs(raw) > ETA_CLAMP
        eta["zi"] = np.clip(raw, -ETA_CLAMP, ETA_CLAMP)
        gamma = special.expit(eta["zi"])
    else:
        clamped = np.zeros(n, dtype=bool)
        gamma = np.zeros(n)
    bad = design.mask & ~(np.isfinite(mu) & (mu > 0))
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite or zero mean at unit {design.unit_names[design.unit[k]]}, "
                           f"t={design.time[k]}")
    return Surfaces(eta, parts["ar"], parts["ne"], parts["end"], gamma, mu, clamped)
