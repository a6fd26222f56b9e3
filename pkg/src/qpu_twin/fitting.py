"""Recovery of circuit parameters from measured transition frequencies.

Given the handful of transitions a characterization run actually measures
(qubit ge frequency at the two flux extrema, the anharmonicity at the upper
sweet spot, and dressed resonator frequencies), recover the underlying
transmon and coupling parameters by least squares against the full product
Hamiltonian of :mod:`qpu_twin.spectrum`.

The bare resonator and filter frequencies and the resonator-filter coupling
are treated as known inputs (they come from high-power and filter
spectroscopy), so the free parameters are at most (ej_max, ec, asym, g_qr).
The optimizer is a Nelder-Mead simplex with seeded random restarts; all
randomness is counter-based so a fit is reproducible bit for bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .rng import TAG_FIT_RESTART, substream
from .spectrum import (ChainParams, FluxPoint, LabelAmbiguity, TransmonParams,
                       dressed_observables)

_PHI_MAX = FluxPoint(0.0)
_PHI_MIN = FluxPoint(0.5)

#: Residual weights; the ef-derived observation alone pins the charging
#: energy, so it counts double by default.
DEFAULT_WEIGHTS = {
    "ge_at_max": 1.0,
    "ge_at_min": 1.0,
    "anharmonicity_at_max": 2.0,
    "res_at_max": 1.0,
    "res_at_min": 1.0,
}

_ALL_PARAMS = ("ej_max", "ec", "asym", "g_qr")


class DegenerateObservations(ValueError):
    """Fewer observations supplied than parameters requested to float."""


@dataclass(frozen=True)
class SpectralObservations:
    """Measured transitions for one readout chain, all in GHz.

    `omega_r_bare`, `omega_p` and `j_rp` are fixed model inputs taken from
    resonator and filter spectroscopy, not fit targets.  Optional fields are
    observations that a given device may or may not provide; `res_at_max` /
    `res_at_min` are the dressed resonator-like frequencies with the qubit
    at the upper / lower flux extremum.
    """

    ge_at_max: float
    ge_at_min: float
    omega_r_bare: float
    omega_p: float
    j_rp: float
    anharmonicity_at_max: float | None = None
    res_at_max: float | None = None
    res_at_min: float | None = None
    weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.ge_at_max > self.ge_at_min > 0.0:
            raise ValueError("require ge_at_max > ge_at_min > 0")
        for name, w in self.weights.items():
            if name not in DEFAULT_WEIGHTS:
                raise ValueError("unknown weight name %r" % name)
            if w <= 0.0:
                raise ValueError("weights must be positive")

    def weight(self, name: str) -> float:
        return self.weights.get(name, DEFAULT_WEIGHTS[name])

    def count(self) -> int:
        n = 2
        n += self.anharmonicity_at_max is not None
        n += self.res_at_max is not None
        n += self.res_at_min is not None
        return n


@dataclass(frozen=True)
class FitReport:
    """Result of a chain fit.

    `residuals` maps observation name to (model - measured) in GHz at the
    fitted point, re-evaluated from scratch after the search.  `converged`
    means every residual magnitude is below the requested tolerance.
    `ec_unconstrained` flags that no anharmonicity observation was supplied,
    in which case `ec` was held at its seed value and should be quoted as
    unconstrained.  `best_objectives` is the accepted-step objective history
    of the winning restart (non-increasing by construction).
    """

    transmon: TransmonParams
    g_qr: float
    residuals: dict[str, float]
    objective: float
    iterations: int
    converged: bool
    ec_unconstrained: bool
    free_params: tuple[str, ...]
    restart_index: int
    best_objectives: tuple[float, ...]


def seed_guess(obs: SpectralObservations) -> tuple[TransmonParams, float]:
    """Closed-form starting point from the asymptotic transmon relations."""
    ec = 0.160 if obs.anharmonicity_at_max is None \
        else -obs.anharmonicity_at_max
    ej = (obs.ge_at_max + ec) ** 2 / (8.0 * ec)
    asym = ((obs.ge_at_min + ec) / (obs.ge_at_max + ec)) ** 2
    asym = min(max(asym, 1e-3), 0.99)
    return TransmonParams(ej_max=ej, ec=ec, asym=asym), 0.1


def _residuals(
    obs: SpectralObservations, t: TransmonParams, g_qr: float,
    n_r: int, n_p: int,
) -> dict[str, float]:
    chain = ChainParams(
        transmon=t, omega_r_bare=obs.omega_r_bare, omega_p=obs.omega_p,
        g_qr=g_qr, j_rp=obs.j_rp, kappa_p=1e-3, n_r=n_r, n_p=n_p)
    hi = dressed_observables(chain, _PHI_MAX)
    lo = dressed_observables(chain, _PHI_MIN)
    res = {
        "ge_at_max": hi.f_ge - obs.ge_at_max,
        "ge_at_min": lo.f_ge - obs.ge_at_min,
    }
    if obs.anharmonicity_at_max is not None:
        res["anharmonicity_at_max"] = \
            hi.anharmonicity - obs.anharmonicity_at_max
    if obs.res_at_max is not None:
        res["res_at_max"] = hi.f_res[0] - obs.res_at_max
    if obs.res_at_min is not None:
        res["res_at_min"] = lo.f_res[0] - obs.res_at_min
    return res


def _default_free(obs: SpectralObservations) -> tuple[str, ...]:
    free = ["ej_max", "asym"]
    if obs.anharmonicity_at_max is not None:
        free.insert(1, "ec")
    if obs.res_at_max is not None or obs.res_at_min is not None:
        free.append("g_qr")
    return tuple(free)


def fit_chain(
    obs: SpectralObservations,
    tol: float = 1e-3,
    max_iter: int = 400,
    seed: int = 0,
    free_params: tuple[str, ...] | None = None,
    restarts: int = 3,
    threads: int = 1,
    n_r: int = 5,
    n_p: int = 5,
) -> FitReport:
    """Fit transmon and coupling parameters to the supplied observations.

    Parameters
    ----------
    tol:
        Convergence tolerance on each residual, GHz.
    free_params:
        Subset of ("ej_max", "ec", "asym", "g_qr") to float.  By default
        `ec` floats only when an anharmonicity observation is present and
        `g_qr` only when a dressed resonator observation is present.
    restarts:
        Number of randomly perturbed restarts run in addition to the
        seed-guess start; the best final objective wins, ties going to the
        lowest restart index.

    Raises
    ------
    DegenerateObservations
        If fewer observations than free parameters were supplied.
    """
    if free_params is None:
        free_params = _default_free(obs)
    else:
        free_params = tuple(free_params)
        unknown = set(free_params) - set(_ALL_PARAMS)
        if unknown:
            raise ValueError("unknown fit parameters %r" % sorted(unknown))
    if obs.count() < len(free_params):
        raise DegenerateObservations(
            "%d observations cannot constrain %d free parameters"
            % (obs.count(), len(free_params)))

    t0, g0 = seed_guess(obs)
    base = {"ej_max": t0.ej_max, "ec": t0.ec, "asym": t0.asym, "g_qr": g0}

    def build(values: dict[str, float]) -> tuple[TransmonParams, float]:
        t = TransmonParams(
            ej_max=values["ej_max"], ec=values["ec"], asym=values["asym"])
        return t, values["g_qr"]

    def objective(x: np.ndarray) -> float:
        values = dict(base)
        values.update(zip(free_params, x))
        if (values["ej_max"] <= 0.0 or values["ec"] <= 0.0
                or values["ej_max"] / values["ec"] <= 10.0
                or not 0.0 <= values["asym"] < 1.0
                or values["g_qr"] < 0.0):
            return 1e6
        try:
            t, g = build(values)
            res = _residuals(obs, t, g, n_r, n_p)
        except (LabelAmbiguity, ValueError):
            return 1e6
        return sum(obs.weight(k) * r * r for k, r in res.items())

    def run_one(start: np.ndarray) -> tuple:
        # Record the running best objective; every accepted simplex step
        # lands on this sequence, so it is non-increasing by construction.
        history: list[float] = []

        def tracked(x: np.ndarray) -> float:
            f = objective(x)
            if not history or f < history[-1]:
                history.append(f)
            return f

        result = minimize(
            tracked, start, method="Nelder-Mead",
            options={"maxiter": max_iter, "xatol": 1e-8,
                     "fatol": (0.01 * tol) ** 2, "adaptive": True})
        return float(result.fun), np.asarray(result.x), \
            int(result.nit), tuple(history)

    x0 = np.array([base[name] for name in free_params])
    starts = [x0]
    for k in range(restarts):
        gen = substream(seed, TAG_FIT_RESTART, k)
        starts.append(x0 * (1.0 + 0.05 * gen.standard_normal(x0.size)))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run_one, starts))
    else:
        outcomes = [run_one(s) for s in starts]

    winner = min(range(len(outcomes)), key=lambda k: outcomes[k][0])
    fun, x, nit, history = outcomes[winner]

    values = dict(base)
    values.update(zip(free_params, x))
    t_fit, g_fit = build(values)
    residuals = _residuals(obs, t_fit, g_fit, n_r, n_p)
    objective_value = sum(
        obs.weight(k) * r * r for k, r in residuals.items())
    converged = all(abs(r) < tol for r in residuals.values())
    return FitReport(
        transmon=t_fit,
        g_qr=g_fit,
        residuals=residuals,
        objective=objective_value,
        iterations=nit,
        converged=converged,
        ec_unconstrained="ec" not in free_params,
        free_params=free_params,
        restart_index=winner,
        best_objectives=history,
    )


def synthetic_observations(
    t: TransmonParams, g_qr: float, omega_r_bare: float, omega_p: float,
    j_rp: float, include_anharmonicity: bool = True,
    include_res_at_min: bool = True,
) -> SpectralObservations:
    """Forward-model observations for a known parameter set.

    Useful for round-trip tests and for filling in observation rows a
    device table does not provide.
    """
    chain = ChainParams(
        transmon=t, omega_r_bare=omega_r_bare, omega_p=omega_p,
        g_qr=g_qr, j_rp=j_rp, kappa_p=1e-3)
    hi = dressed_observables(chain, _PHI_MAX)
    lo = dressed_observables(chain, _PHI_MIN)
    return SpectralObservations(
        ge_at_max=hi.f_ge,
        ge_at_min=lo.f_ge,
        omega_r_bare=omega_r_bare,
        omega_p=omega_p,
        j_rp=j_rp,
        anharmonicity_at_max=hi.anharmonicity
        if include_anharmonicity else None,
        res_at_min=lo.f_res[0] if include_res_at_min else None,
    )
