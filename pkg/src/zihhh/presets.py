"""Named formulas for the measles model family (P0, NB1-NB3, ZI1-ZI5).

The presets expect two covariates in the data: vaccination coverage
(default name ``vacc``) and population (``pop``).  ``preset_transforms``
lists the derived covariates and offsets the formulas refer to.
"""

from __future__ import annotations

from dataclasses import replace

from .data_model import DEFAULT_KAPPA, apply_transform
from .design import Component, ConfigurationError, ModelFormula

PRESETS = ("P0", "NB1", "NB2", "NB3", "ZI1", "ZI2", "ZI3", "ZI4", "ZI5")
YEAR_BIENNIAL = ((26, 1), (52, 1))


def preset_transforms(kappa=DEFAULT_KAPPA, vacc="vacc", pop="pop"):
    return [
        {"name": "log1m_vacc", "op": "log1m", "source": vacc},
        {"name": "pop_frac", "op": "pop_fraction", "source": pop},
        {"name": "unvacc", "op": "one_minus_kappa", "source": vacc, "kappa": kappa},
        {"name": "unvacc_pop", "op": "unvacc_pop", "source": vacc, "kappa": kappa, "pop": pop},
    ]


def apply_preset_transforms(data, kappa=DEFAULT_KAPPA, vacc="vacc", pop="pop"):
    for tr in preset_transforms(kappa, vacc, pop):
        data = apply_transform(data, tr["name"], tr["op"], tr["source"],
                               kappa=tr.get("kappa", kappa), pop=tr.get("pop"))
    return data


def _nb1():
    return ModelFormula(
        ar=Component(seasonality=YEAR_BIENNIAL, offset="unvacc"),
        end=Component(seasonality=YEAR_BIENNIAL, offset="unvacc_pop"),
        family="nb", psi="unit")


def _with_random(f, names, structure):
    kw = {n: replace(f.component(n), random=True) for n in names}
    return replace(f, random_effects=structure, **kw)


def preset_formula(name):
    """Formula for one of ``PRESETS``."""
    if name == "P0":
        return ModelFormula(
            ar=Component(covariates=("log1m_vacc",)),
            end=Component(seasonality=((26, 1),), offset="pop_frac"),
            family="poisson")
    nb1 = _nb1()
    zi1 = replace(nb1, zi=Component(lag=True))
    table = {
        "NB1": nb1,
        "NB2": _with_random(nb1, ("ar", "end"), "uncorrelated"),
        "NB3": _with_random(nb1, ("ar", "end"), "correlated"),
        "ZI1": zi1,
        "ZI2": _with_random(zi1, ("ar", "end", "zi"), "uncorrelated"),
        "ZI3": _with_random(zi1, ("ar", "end", "zi"), "correlated"),
    }
    for src, dst in (("ZI2", "ZI4"), ("ZI3", "ZI5")):
        f = table[src]
        table[dst] = replace(f, zi=replace(f.zi, seasonality=YEAR_BIENNIAL))
    if name not in table:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return table[name].check()
