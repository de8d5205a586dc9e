"""Classical compartmental baselines and a persistence reference forecaster.

Daily forward-Euler SIR/SEIR with mass-action incidence; susceptibles are
the exact remainder of the population so compartments conserve by
construction.  Fitting minimizes the sum of squared errors of the infected
trajectory: a coarse rate grid (step 0.02, fully vectorized) seeds a
Nelder-Mead simplex refinement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .autodiff import ContractError

GRID_STEP = 0.02


class DegenerateFitError(ValueError):
    """The observed series carries no signal to fit."""


@dataclass(frozen=True)
class SirParams:
    beta: float
    gamma: float
    i0: float
    r0: float

    def __post_init__(self):
        if not (0.0 <= self.beta <= 1.0 and 0.0 <= self.gamma <= 1.0):
            raise ContractError("rates must lie in [0, 1]")
        if self.i0 < 0 or self.r0 < 0:
            raise ContractError("initial counts must be nonnegative")


@dataclass(frozen=True)
class SeirParams:
    beta: float
    gamma: float
    sigma: float
    i0: float
    r0: float
    e0: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.beta <= 1.0 and 0.0 <= self.gamma <= 1.0
                and 0.0 <= self.sigma <= 1.0):
            raise ContractError("rates must lie in [0, 1]")
        if min(self.i0, self.r0, self.e0) < 0:
            raise ContractError("initial counts must be nonnegative")


@dataclass(frozen=True)
class CompartmentState:
    """Compartment values on one day (exposed is 0 for SIR)."""

    susceptible: float
    exposed: float
    infected: float
    recovered: float


@dataclass
class FitResult:
    family: str
    params: SirParams | SeirParams
    residual: float
    state: CompartmentState  # at the last observed day


def simulate_sir(params: SirParams, population: float, days: int):
    """Daily Euler SIR; returns (infected, recovered) arrays of length days."""
    if params.i0 + params.r0 > population:
        raise ContractError("initial I + R exceeds the population")
    infected = np.empty(days)
    recovered = np.empty(days)
    i_cur, r_cur = float(params.i0), float(params.r0)
    infected[0], recovered[0] = i_cur, r_cur
    for t in range(1, days):
        s_cur = population - i_cur - r_cur
        new_inf = min(params.beta * s_cur * i_cur / population, s_cur)
        new_rec = params.gamma * i_cur
        i_cur = max(i_cur + new_inf - new_rec, 0.0)
        r_cur = r_cur + new_rec
        infected[t], recovered[t] = i_cur, r_cur
    return infected, recovered


def simulate_seir(params: SeirParams, population: float, days: int):
    """Daily Euler SEIR; returns (infected, recovered) arrays of length days."""
    if params.i0 + params.r0 + params.e0 > population:
        raise ContractError("initial E + I + R exceeds the population")
    infected = np.empty(days)
    recovered = np.empty(days)
    e_cur, i_cur, r_cur = float(params.e0), float(params.i0), float(params.r0)
    infected[0], recovered[0] = i_cur, r_cur
    for t in range(1, days):
        s_cur = population - e_cur - i_cur - r_cur
        new_inf = min(params.beta * s_cur * i_cur / population, s_cur)
        exit_e = params.sigma * e_cur
        new_rec = params.gamma * i_cur
        e_cur = max(e_cur + new_inf - exit_e, 0.0)
        i_cur = max(i_cur + exit_e - new_rec, 0.0)
        r_cur = r_cur + new_rec
        infected[t], recovered[t] = i_cur, r_cur
    return infected, recovered


def _final_state_sir(params: SirParams, population: float, days: int) -> CompartmentState:
    infected, recovered = simulate_sir(params, population, days)
    return CompartmentState(
        susceptible=population - infected[-1] - recovered[-1],
        exposed=0.0, infected=float(infected[-1]), recovered=float(recovered[-1]),
    )


def _final_state_seir(params: SeirParams, population: float, days: int) -> CompartmentState:
    e_cur, i_cur, r_cur = float(params.e0), float(params.i0), float(params.r0)
    for _ in range(1, days):
        s_cur = population - e_cur - i_cur - r_cur
        new_inf = min(params.beta * s_cur * i_cur / population, s_cur)
        exit_e = params.sigma * e_cur
        new_rec = params.gamma * i_cur
        e_cur = max(e_cur + new_inf - exit_e, 0.0)
        i_cur = max(i_cur + exit_e - new_rec, 0.0)
        r_cur = r_cur + new_rec
    return CompartmentState(
        susceptible=population - e_cur - i_cur - r_cur,
        exposed=e_cur, infected=i_cur, recovered=r_cur,
    )


def _grid_sse_sir(observed: np.ndarray, population: float, i0: float, r0: float):
    """SSE over the full (beta, gamma) grid, vectorized across the grid."""
    rates = np.arange(0.0, 1.0 + GRID_STEP / 2, GRID_STEP)
    beta, gamma = np.meshgrid(rates, rates, indexing="ij")
    beta, gamma = beta.ravel(), gamma.ravel()
    i_cur = np.full(beta.shape, i0)
    r_cur = np.full(beta.shape, r0)
    sse = np.square(i_cur - observed[0])
    for t in range(1, observed.shape[0]):
        s_cur = population - i_cur - r_cur
        new_inf = np.minimum(beta * s_cur * i_cur / population, s_cur)
        new_rec = gamma * i_cur
        i_cur = np.maximum(i_cur + new_inf - new_rec, 0.0)
        r_cur = r_cur + new_rec
        sse += np.square(i_cur - observed[t])
    best = int(np.argmin(sse))
    return (float(beta[best]), float(gamma[best])), float(sse[best])


def _grid_sse_seir(observed: np.ndarray, population: float, i0: float, r0: float, e0: float):
    rates = np.arange(0.0, 1.0 + GRID_STEP / 2, GRID_STEP)
    beta, gamma, sigma = np.meshgrid(rates, rates, rates, indexing="ij")
    beta, gamma, sigma = beta.ravel(), gamma.ravel(), sigma.ravel()
    e_cur = np.full(beta.shape, e0)
    i_cur = np.full(beta.shape, i0)
    r_cur = np.full(beta.shape, r0)
    sse = np.square(i_cur - observed[0])
    for t in range(1, observed.shape[0]):
        s_cur = population - e_cur - i_cur - r_cur
        new_inf = np.minimum(beta * s_cur * i_cur / population, s_cur)
        exit_e = sigma * e_cur
        new_rec = gamma * i_cur
        e_cur = np.maximum(e_cur + new_inf - exit_e, 0.0)
        i_cur = np.maximum(i_cur + exit_e - new_rec, 0.0)
        r_cur = r_cur + new_rec
        sse += np.square(i_cur - observed[t])
    best = int(np.argmin(sse))
    return (float(beta[best]), float(gamma[best]), float(sigma[best])), float(sse[best])


def fit_compartmental(observed, population: float, family: str = "SIR",
                      r0: float = 0.0, e0: float = 0.0) -> FitResult:
    """Least-squares fit of the infected trajectory.

    I0 is fixed to the first observation and R0 to its supplied value; the
    rates come from the coarse grid followed by simplex refinement.
    """
    observed = np.asarray(observed, dtype=np.float64)
    if observed.ndim != 1 or observed.shape[0] < 5:
        raise ContractError("need a 1-D series of at least 5 observations")
    if (observed < 0).any():
        raise ContractError("observed counts must be nonnegative")
    if not observed.any():
        raise DegenerateFitError("all-zero series admits no meaningful fit")
    if family not in ("SIR", "SEIR"):
        raise ContractError(f"family must be SIR or SEIR, got {family!r}")
    days = observed.shape[0]
    i0 = float(observed[0])

    if family == "SIR":
        (b, g), _ = _grid_sse_sir(observed, population, i0, r0)

        def objective(x):
            if not (0.0 <= x[0] <= 1.0 and 0.0 <= x[1] <= 1.0):
                return 1e30 + float(np.sum(np.square(x)))
            sim, _ = simulate_sir(SirParams(x[0], x[1], i0, r0), population, days)
            return float(np.sum(np.square(sim - observed)))

        res = minimize(objective, x0=[b, g], method="Nelder-Mead",
                       options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 2000})
        params = SirParams(float(np.clip(res.x[0], 0, 1)), float(np.clip(res.x[1], 0, 1)), i0, r0)
        return FitResult("SIR", params, objective([params.beta, params.gamma]),
                         _final_state_sir(params, population, days))

    (b, g, s), _ = _grid_sse_seir(observed, population, i0, r0, e0)

    def objective(x):
        if not all(0.0 <= v <= 1.0 for v in x):
            return 1e30 + float(np.sum(np.square(x)))
        sim, _ = simulate_seir(SeirParams(x[0], x[1], x[2], i0, r0, e0), population, days)
        return float(np.sum(np.square(sim - observed)))

    res = minimize(objective, x0=[b, g, s], method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 3000})
    clipped = [float(np.clip(v, 0, 1)) for v in res.x]
    params = SeirParams(clipped[0], clipped[1], clipped[2], i0, r0, e0)
    return FitResult("SEIR", params, objective(clipped),
                     _final_state_seir(params, population, days))


def forecast_compartmental(fit: FitResult, population: float, horizon: int):
    """Continue the Euler recurrence from the fitted state for horizon days.

    Returns (infected, recovered) arrays covering the horizon days after the
    last observed day.
    """
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    state = fit.state
    e_cur, i_cur, r_cur = state.exposed, state.infected, state.recovered
    p = fit.params
    sigma = getattr(p, "sigma", None)
    infected = np.empty(horizon)
    recovered = np.empty(horizon)
    for t in range(horizon):
        s_cur = population - e_cur - i_cur - r_cur
        new_inf = min(p.beta * s_cur * i_cur / population, s_cur)
        new_rec = p.gamma * i_cur
        if sigma is None:
            i_cur = max(i_cur + new_inf - new_rec, 0.0)
        else:
            exit_e = sigma * e_cur
            e_cur = max(e_cur + new_inf - exit_e, 0.0)
            i_cur = max(i_cur + exit_e - new_rec, 0.0)
        r_cur = r_cur + new_rec
        infected[t], recovered[t] = i_cur, r_cur
    return infected, recovered


def persistence_forecast(series, horizon: int) -> np.ndarray:
    """Repeat the last observed value for horizon days."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 1 or series.shape[0] == 0:
        raise ContractError("persistence forecast needs a nonempty 1-D series")
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    return np.full(horizon, series[-1])
