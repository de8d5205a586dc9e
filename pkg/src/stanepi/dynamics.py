"""Transmission-dynamics rollout and the two training loss terms.

The rollout iterates SIR-style increment equations from a ground-truth seed:

* ``literal`` form:      dI = beta * (N - I - R) - gamma * I
* ``mass_action`` form:  dI = beta * S * I / N - gamma * I,  S = N - I - R

with dR = gamma * I in both.  The literal form reproduces the constraint
equations verbatim (it generates infections even at I = 0); mass_action is
standard SIR.  Susceptibles are the exact remainder N - I - R, so
S + I + R = N holds as a bitwise identity at every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, DimensionError, Tensor

ROLLOUT_FORMS = ("literal", "mass_action")


@dataclass(frozen=True)
class SeedState:
    """Ground-truth state on the day before the prediction window."""

    infected: float
    recovered: float
    population: float

    def __post_init__(self):
        if not 0.0 <= self.infected + self.recovered <= self.population:
            raise ContractError(
                f"seed I+R = {self.infected + self.recovered} outside [0, {self.population}]"
            )


@dataclass
class DynamicsRollout:
    """Increment vectors and the cumulative states they accumulate into."""

    delta_infected: np.ndarray
    delta_recovered: np.ndarray
    infected: np.ndarray
    recovered: np.ndarray
    susceptible: np.ndarray
    population: float


def _step(beta, gamma, i_state, r_state, n_p, form):
    if form == "literal":
        di = beta * (n_p - i_state - r_state) - gamma * i_state
    else:
        s = n_p - i_state - r_state
        di = beta * s * i_state * (1.0 / n_p) - gamma * i_state
    dr = gamma * i_state
    return di, dr


def dynamics_rollout(beta: float, gamma: float, seed: SeedState, horizon: int,
                     form: str = "literal") -> DynamicsRollout:
    """Iterate the increment equations for ``horizon`` days from the seed."""
    if form not in ROLLOUT_FORMS:
        raise ContractError(f"rollout form must be one of {ROLLOUT_FORMS}, got {form!r}")
    if horizon < 1:
        raise ContractError(f"horizon must be >= 1, got {horizon}")
    n_p = float(seed.population)
    i_state, r_state = float(seed.infected), float(seed.recovered)
    d_i, d_r, i_states, r_states, s_states = [], [], [], [], []
    for _ in range(horizon):
        di, dr = _step(beta, gamma, i_state, r_state, n_p, form)
        i_state = i_state + di
        r_state = r_state + dr
        d_i.append(di)
        d_r.append(dr)
        i_states.append(i_state)
        r_states.append(r_state)
        s_states.append(n_p - i_state - r_state)
    return DynamicsRollout(
        delta_infected=np.array(d_i),
        delta_recovered=np.array(d_r),
        infected=np.array(i_states),
        recovered=np.array(r_states),
        susceptible=np.array(s_states),
        population=n_p,
    )


def rollout_increments_t(beta: Tensor, gamma: Tensor, i_seed, r_seed, n_p: float,
                         horizon: int, form: str = "literal"):
    """Differentiable rollout increments for tensor-valued rates.

    ``beta``/``gamma`` may be 0-d (one window) or 1-D (one entry per anchor
    window); seeds are constants of the same shape.  Returns two lists of
    ``horizon`` tensors.
    """
    if form not in ROLLOUT_FORMS:
        raise ContractError(f"rollout form must be one of {ROLLOUT_FORMS}, got {form!r}")
    i_state, r_state = i_seed, r_seed
    d_i, d_r = [], []
    for _ in range(horizon):
        di, dr = _step(beta, gamma, i_state, r_state, float(n_p), form)
        i_state = i_state + di
        r_state = r_state + dr
        d_i.append(di)
        d_r.append(dr)
    return d_i, d_r


def _sq_error_sum(pred: np.ndarray, true: np.ndarray, what: str) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise DimensionError(f"{what}: prediction {pred.shape} vs truth {true.shape}")
    diff = pred - true
    return float(np.sum(diff * diff))


def dynamics_loss(rollout: DynamicsRollout, delta_i_true, delta_r_true,
                  reduction: str = "sum") -> float:
    """Squared error of rollout increments against ground-truth increments."""
    total = _sq_error_sum(rollout.delta_infected, delta_i_true, "dynamics_loss dI")
    total += _sq_error_sum(rollout.delta_recovered, delta_r_true, "dynamics_loss dR")
    if reduction == "mean":
        total /= 2.0 * len(rollout.delta_infected)
    return total


def prediction_loss(delta_i, delta_r, delta_i_true, delta_r_true,
                    reduction: str = "sum") -> float:
    """Squared error of the direct increment-head outputs."""
    total = _sq_error_sum(delta_i, delta_i_true, "prediction_loss dI")
    total += _sq_error_sum(delta_r, delta_r_true, "prediction_loss dR")
    if reduction == "mean":
        total /= 2.0 * np.asarray(delta_i).shape[0]
    return total


def total_loss(per_window_losses) -> float:
    """Plain sum over all (location, anchor-day) window losses."""
    losses = list(per_window_losses)
    if not losses:
        raise ContractError("total_loss requires at least one window")
    return float(sum(losses))
