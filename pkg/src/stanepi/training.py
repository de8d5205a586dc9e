"""Window generation, initialization, the optimization loop, and inference.

Each location gets its own parameter set trained by full-batch
adaptive-moment gradient descent on the summed window losses; a shared-
parameter mode trains one model on the sum over all locations.  Inputs are
z-score standardized per feature column with statistics computed on the
training data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape
from .data import EpiDataset, restrict_to_active
from .dynamics import SeedState, rollout_increments_t
from .graph import STATIC_FEATURE_COUNT
from .model import (
    GatLayerParams,
    GruParams,
    HeadParams,
    MODEL_MODES,
    ATTENTION_MODES,
    Prediction,
    StanParams,
    bind_params,
    day_inputs_for,
    embedding_sequence_t,
    gru_states_t,
    mlp_rows_t,
    stan_forward,
)

SHARED_KEY = "__shared__"


class ScheduleError(ValueError):
    """The series is too short for the requested window layout."""


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite during optimization."""


@dataclass
class TrainConfig:
    """Everything that determines a training run (besides data and graph)."""

    l_i: int = 5
    l_p: int = 5
    epochs: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    mode: str = "full"  # full | stan-pc | stan-graph
    attention: str = "masked"  # masked | dense | weighted
    rollout: str = "literal"  # literal | mass_action
    heads: int = 4
    gat1_dim: int = 650
    gat2_dim: int = 400
    gru_hidden: int = 200
    mlp_hidden: int = 100
    share_params: bool = False
    concat_node_embedding: bool = False
    features: str = "full"  # full | active_only
    reduction: str = "sum"  # sum | mean

    def __post_init__(self):
        if self.l_i < 1 or self.l_p < 1:
            raise ContractError("window lengths must be >= 1")
        if self.mode not in MODEL_MODES:
            raise ContractError(f"mode must be one of {MODEL_MODES}")
        if self.attention not in ATTENTION_MODES:
            raise ContractError(f"attention must be one of {ATTENTION_MODES}")
        if self.rollout not in ("literal", "mass_action"):
            raise ContractError("rollout must be literal or mass_action")
        if self.features not in ("full", "active_only"):
            raise ContractError("features must be full or active_only")
        if self.reduction not in ("sum", "mean"):
            raise ContractError("reduction must be sum or mean")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ContractError("epochs must be >= 0 and learning rate positive")


# ---------------------------------------------------------------------------
# feature normalization


@dataclass
class NormStats:
    """Per-column z-score statistics from the training period."""

    static_mean: np.ndarray
    static_std: np.ndarray
    dynamic_mean: np.ndarray
    dynamic_std: np.ndarray


class _StaticRow:
    __slots__ = ("static_features",)

    def __init__(self, values: np.ndarray):
        self.static_features = values


@dataclass
class FeatureView:
    """Dataset-like object carrying normalized features for the model."""

    locations: list[_StaticRow]
    dynamic: np.ndarray


def compute_normalization(dataset: EpiDataset) -> NormStats:
    static = np.stack([loc.static_features for loc in dataset.locations])
    s_mean = static.mean(axis=0)
    s_std = static.std(axis=0)
    d_mean = dataset.dynamic.mean(axis=(0, 1))
    d_std = dataset.dynamic.std(axis=(0, 1))
    s_std = np.where(s_std == 0.0, 1.0, s_std)
    d_std = np.where(d_std == 0.0, 1.0, d_std)
    return NormStats(s_mean, s_std, d_mean, d_std)


def apply_normalization(dataset: EpiDataset, stats: NormStats) -> FeatureView:
    static = np.stack([loc.static_features for loc in dataset.locations])
    norm_static = (static - stats.static_mean) / stats.static_std
    norm_dynamic = (dataset.dynamic - stats.dynamic_mean) / stats.dynamic_std
    return FeatureView(
        locations=[_StaticRow(norm_static[i]) for i in range(static.shape[0])],
        dynamic=norm_dynamic,
    )


# ---------------------------------------------------------------------------
# window schedule and targets


def make_windows(total_days: int, l_i: int, l_p: int) -> list[int]:
    """Anchor days t = l_i-1 .. T-l_p-1 (stride 1)."""
    if l_i < 1 or l_p < 1:
        raise ContractError("window lengths must be >= 1")
    minimum = l_i + l_p
    if total_days < minimum:
        raise ScheduleError(
            f"series of length {total_days} cannot fit input {l_i} + horizon {l_p}; "
            f"need at least {minimum} days"
        )
    return list(range(l_i - 1, total_days - l_p))


@dataclass(frozen=True)
class WindowSample:
    """One training window: anchor day, increment targets, rollout seed."""

    anchor: int
    delta_infected: np.ndarray
    delta_recovered: np.ndarray
    seed: SeedState


def build_window_samples(dataset: EpiDataset, location: int, l_i: int, l_p: int) -> list[WindowSample]:
    anchors = make_windows(dataset.n_days, l_i, l_p)
    infected = dataset.infected[location]
    recovered = dataset.recovered[location]
    population = dataset.locations[location].population
    samples = []
    for t in anchors:
        span = slice(t, t + l_p + 1)
        samples.append(
            WindowSample(
                anchor=t,
                delta_infected=np.diff(infected[span]),
                delta_recovered=np.diff(recovered[span]),
                seed=SeedState(float(infected[t]), float(recovered[t]), float(population)),
            )
        )
    return samples


# ---------------------------------------------------------------------------
# parameter initialization


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int, shape=None) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape if shape is not None else (fan_out, fan_in))


def init_params(location_id: str, input_dim: int, config: TrainConfig, seed) -> StanParams:
    """Glorot-uniform weights, zero biases; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    gat1 = gat2 = None
    if config.mode != "stan-graph":
        gat1 = GatLayerParams(
            w_z=[_glorot(rng, config.gat1_dim, input_dim) for _ in range(config.heads)],
            w_a=[_glorot(rng, 1, 2 * config.gat1_dim, shape=(2 * config.gat1_dim,))
                 for _ in range(config.heads)],
        )
        gat2 = GatLayerParams(
            w_z=[_glorot(rng, config.gat2_dim, config.gat1_dim) for _ in range(config.heads)],
            w_a=[_glorot(rng, 1, 2 * config.gat2_dim, shape=(2 * config.gat2_dim,))
                 for _ in range(config.heads)],
        )
        gru_in = config.gat2_dim * (2 if config.concat_node_embedding else 1)
    else:
        gru_in = input_dim
    h = config.gru_hidden
    gru = GruParams(
        update_w=_glorot(rng, h, gru_in), update_u=_glorot(rng, h, h), update_b=np.zeros(h),
        reset_w=_glorot(rng, h, gru_in), reset_u=_glorot(rng, h, h), reset_b=np.zeros(h),
        cand_w=_glorot(rng, h, gru_in), cand_u=_glorot(rng, h, h), cand_b=np.zeros(h),
    )
    m = config.mlp_hidden
    heads = HeadParams(
        rate_w1=_glorot(rng, m, h), rate_b1=np.zeros(m),
        rate_w2=_glorot(rng, 2, m), rate_b2=np.zeros(2),
        inc_w1=_glorot(rng, m, h), inc_b1=np.zeros(m),
        inc_w2=_glorot(rng, 2 * config.l_p, m), inc_b2=np.zeros(2 * config.l_p),
    )
    return StanParams(location_id=location_id, gat1=gat1, gat2=gat2, gru=gru, heads=heads)


def model_input_dim(dataset: EpiDataset, config: TrainConfig) -> int:
    f_dyn = 1 if config.features == "active_only" else dataset.dynamic.shape[2]
    return config.l_i * (STATIC_FEATURE_COUNT + f_dyn)


def initial_params(dataset: EpiDataset, config: TrainConfig) -> dict[str, StanParams]:
    """The exact parameter sets a training run would start from."""
    input_dim = model_input_dim(dataset, config)
    if config.share_params:
        return {SHARED_KEY: init_params(SHARED_KEY, input_dim, config, [config.seed, 0])}
    return {
        loc.id: init_params(loc.id, input_dim, config, [config.seed, i])
        for i, loc in enumerate(dataset.locations)
    }


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive-moment descent; moments mirror the parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


# ---------------------------------------------------------------------------
# loss assembly


def _location_loss_t(view, graph, params: StanParams, bound: dict, config: TrainConfig,
                     samples: list[WindowSample], location: int, day_inputs):
    """(total, l_r, l_d) loss tensors for one location's window batch."""
    anchors = [s.anchor for s in samples]
    inputs = embedding_sequence_t(day_inputs, graph, params, bound, config, location)
    states = gru_states_t(inputs, bound, params.gru.hidden)
    h_rows = ad.stack_rows([states[t] for t in anchors])

    ti = np.stack([s.delta_infected for s in samples])  # (A, l_p)
    tr = np.stack([s.delta_recovered for s in samples])
    inc = mlp_rows_t(h_rows, bound, "inc")
    l_r = ad.sum_of_squares(ad.sub(inc, np.concatenate([ti, tr], axis=1)))
    if config.reduction == "mean":
        l_r = ad.scale(l_r, 1.0 / (2.0 * config.l_p))

    l_d = None
    if config.mode != "stan-pc":
        rates = ad.sigmoid(mlp_rows_t(h_rows, bound, "rate"))
        beta = ad.take_col(rates, 0)
        gamma = ad.take_col(rates, 1)
        i0 = np.array([s.seed.infected for s in samples])
        r0 = np.array([s.seed.recovered for s in samples])
        n_p = samples[0].seed.population
        d_i, d_r = rollout_increments_t(beta, gamma, i0, r0, n_p, config.l_p, config.rollout)
        for s in range(config.l_p):
            term = ad.add(ad.sum_of_squares(ad.sub(d_i[s], ti[:, s])),
                          ad.sum_of_squares(ad.sub(d_r[s], tr[:, s])))
            l_d = term if l_d is None else ad.add(l_d, term)
        if config.reduction == "mean":
            l_d = ad.scale(l_d, 1.0 / (2.0 * config.l_p))

    total = l_r if l_d is None else ad.add(l_r, l_d)
    return total, l_r, l_d


def loss_components(dataset: EpiDataset, graph, params_by_loc: dict[str, StanParams],
                    config: TrainConfig) -> tuple[float, float, float]:
    """Total loss and its (L_r, L_d) parts on the given parameters."""
    work = restrict_to_active(dataset) if config.features == "active_only" else dataset
    stats = compute_normalization(work)
    view = apply_normalization(work, stats)
    anchors = make_windows(work.n_days, config.l_i, config.l_p)
    total = l_r_total = l_d_total = 0.0
    for i, loc in enumerate(work.locations):
        params = params_by_loc[SHARED_KEY if config.share_params else loc.id]
        samples = build_window_samples(work, i, config.l_i, config.l_p)
        day_inputs = day_inputs_for(view, config, anchors[-1] + 1, i)
        tape = Tape()
        bound = bind_params(tape, params, trainable=False)
        tot, l_r, l_d = _location_loss_t(view, graph, params, bound, config, samples, i, day_inputs)
        total += float(tot.value)
        l_r_total += float(l_r.value)
        l_d_total += 0.0 if l_d is None else float(l_d.value)
    return total, l_r_total, l_d_total


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    """Trained per-location parameters plus everything needed to predict."""

    params: dict[str, StanParams]
    history: dict[str, list[float]]
    norm_stats: NormStats
    config: TrainConfig


def train(dataset: EpiDataset, graph, config: TrainConfig) -> TrainResult:
    """Full-batch Adam per location (or jointly with shared parameters)."""
    work = restrict_to_active(dataset) if config.features == "active_only" else dataset
    anchors = make_windows(work.n_days, config.l_i, config.l_p)
    stats = compute_normalization(work)
    view = apply_normalization(work, stats)
    n = work.n_locations
    samples_by_loc = [build_window_samples(work, i, config.l_i, config.l_p) for i in range(n)]
    days_needed = anchors[-1] + 1
    shared_day_inputs = (
        day_inputs_for(view, config, days_needed, 0) if config.mode != "stan-graph" else None
    )

    params_by_loc = initial_params(work, config)
    history: dict[str, list[float]] = {}

    if config.share_params:
        params = params_by_loc[SHARED_KEY]
        flat = params.flatten()
        adam = Adam(flat, config.learning_rate)
        hist: list[float] = []
        per_loc_inputs = [
            shared_day_inputs if shared_day_inputs is not None
            else day_inputs_for(view, config, days_needed, i)
            for i in range(n)
        ]
        for epoch in range(config.epochs):
            tape = Tape()
            bound = bind_params(tape, params, trainable=True)
            total = None
            for i in range(n):
                tot, _, _ = _location_loss_t(view, graph, params, bound, config,
                                             samples_by_loc[i], i, per_loc_inputs[i])
                total = tot if total is None else ad.add(total, tot)
            value = float(total.value)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"shared model diverged at epoch {epoch}")
            hist.append(value)
            adam.step(ad.backward(tape, total))
        history[SHARED_KEY] = hist
        return TrainResult(params=params_by_loc, history=history, norm_stats=stats,
                           config=config)

    for i, loc in enumerate(work.locations):
        params = params_by_loc[loc.id]
        flat = params.flatten()
        adam = Adam(flat, config.learning_rate)
        day_inputs = (
            shared_day_inputs if shared_day_inputs is not None
            else day_inputs_for(view, config, days_needed, i)
        )
        hist = []
        for epoch in range(config.epochs):
            tape = Tape()
            bound = bind_params(tape, params, trainable=True)
            total, _, _ = _location_loss_t(view, graph, params, bound, config,
                                           samples_by_loc[i], i, day_inputs)
            value = float(total.value)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"location {loc.id!r} diverged at epoch {epoch}"
                )
            hist.append(value)
            adam.step(ad.backward(tape, total))
        history[loc.id] = hist
    return TrainResult(params=params_by_loc, history=history, norm_stats=stats,
                       config=config)


# ---------------------------------------------------------------------------
# inference


@dataclass
class Forecast:
    """Multi-day forecast for one location."""

    delta_infected: np.ndarray
    delta_recovered: np.ndarray
    total_infected: np.ndarray
    beta: float
    gamma: float
    last_observed: float


def predict_future(result: TrainResult, dataset: EpiDataset, graph,
                   l_p: int | None = None) -> dict[str, Forecast]:
    """Forecast the next l_p days from the last observed day of ``dataset``.

    Cumulative totals are prefix sums of the predicted increments on top of
    the last observed active count.  The rate-head outputs are reported but
    unused for the point forecast.
    """
    config = result.config
    horizon = next(iter(result.params.values())).heads.horizon
    if l_p is None:
        l_p = horizon
    if l_p != horizon:
        raise ContractError(
            f"requested horizon {l_p} does not match trained head width {horizon}"
        )
    if dataset.n_days < config.l_i:
        raise ScheduleError(
            f"history of {dataset.n_days} days is shorter than input window {config.l_i}"
        )
    work = restrict_to_active(dataset) if config.features == "active_only" else dataset
    view = apply_normalization(work, result.norm_stats)
    t = work.n_days - 1
    out: dict[str, Forecast] = {}
    for i, loc in enumerate(work.locations):
        params = result.params[SHARED_KEY if config.share_params else loc.id]
        pred: Prediction = stan_forward(view, graph, i, t, params, config)
        last = float(work.infected[i, -1])
        totals = last + np.cumsum(pred.delta_infected)
        out[loc.id] = Forecast(
            delta_infected=pred.delta_infected,
            delta_recovered=pred.delta_recovered,
            total_infected=totals,
            beta=pred.beta,
            gamma=pred.gamma,
            last_observed=last,
        )
    return out
