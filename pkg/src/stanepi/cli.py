"""Batch command-line surface: simulate, train, predict, evaluate, fit-baseline.

Configuration is a flat UTF-8 ``key = value`` file with ``#`` comments.
Exit codes: 0 success, 1 usage, 2 I/O, 3 infeasible schedule, 4 contract
mismatch, 5 alignment failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .archive import ArchiveError, load_archive, save_archive
from .autodiff import ContractError
from .baselines import fit_compartmental, forecast_compartmental, persistence_forecast
from .data import (
    EpiDataset,
    SynthConfig,
    load_dataset,
    save_dataset,
    simulate_metapopulation,
    split_dataset,
    synthetic_locations,
)
from .evaluation import (
    DegenerateStatisticError,
    UndefinedMetricError,
    bootstrap_ci,
    ccc,
    mse_mae,
    paired_t_test,
)
from .graph import build_graph, load_distance_csv
from .training import ScheduleError, TrainConfig, predict_future, train

FORECAST_HEADER = ["location_id", "day_offset", "delta_I", "delta_R", "total_I"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_SCHEDULE = 3
EXIT_CONTRACT = 4
EXIT_ALIGNMENT = 5


class UsageError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass
class RunConfig:
    """Parsed configuration for one batch run."""

    cases_path: str | None = None
    static_path: str | None = None
    dynamic_path: str | None = None
    distance_path: str | None = None
    alpha: float = 0.35
    beta: float = 0.37
    r: float = 30.0
    tau: float | None = None  # None -> auto connectivity threshold
    split_day: int | None = None
    bootstrap_samples: int = 1000
    eval_seed: int = 0
    out_dir: str = "out"
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; blanks ignored."""
    entries: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        entries[key.strip()] = value.strip()
    return entries


_STR_KEYS = {"cases_path", "static_path", "dynamic_path", "distance_path", "out_dir"}
_FLOAT_KEYS = {"alpha", "beta", "r"}
_INT_KEYS = {"split_day", "bootstrap_samples", "eval_seed"}
_TRAIN_INT = {"l_i", "l_p", "epochs", "seed", "heads", "gat1_dim", "gat2_dim",
              "gru_hidden", "mlp_hidden"}
_TRAIN_FLOAT = {"learning_rate"}
_TRAIN_STR = {"mode", "attention", "rollout", "features", "reduction"}
_TRAIN_BOOL = {"share_params", "concat_node_embedding"}
_SYNTH_INT = {"synth_nodes": "n_nodes", "synth_days": "n_days"}
_SYNTH_FLOAT = {"synth_coupling": "coupling", "synth_noise": "noise"}
_SYNTH_RANGE = {
    "synth_beta_min": ("beta_range", 0), "synth_beta_max": ("beta_range", 1),
    "synth_gamma_min": ("gamma_range", 0), "synth_gamma_max": ("gamma_range", 1),
    "synth_pop_min": ("population_range", 0), "synth_pop_max": ("population_range", 1),
}


def _parse_bool(key: str, value: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise UsageError(f"config key {key!r}: expected a boolean, got {value!r}")


def build_run_config(entries: dict[str, str], seed_override: int | None = None,
                     out_override: str | None = None) -> RunConfig:
    run = RunConfig()
    train_kwargs: dict = {}
    synth_kwargs: dict = {}
    ranges = {"beta_range": list(SynthConfig.beta_range),
              "gamma_range": list(SynthConfig.gamma_range),
              "population_range": list(SynthConfig.population_range)}
    for key, value in entries.items():
        if key in _STR_KEYS:
            setattr(run, key, value)
        elif key in _FLOAT_KEYS:
            setattr(run, key, float(value))
        elif key == "tau":
            run.tau = None if value.lower() == "auto" else float(value)
        elif key in _INT_KEYS:
            setattr(run, key, int(value))
        elif key in _TRAIN_INT:
            train_kwargs[key] = int(value)
        elif key in _TRAIN_FLOAT:
            train_kwargs[key] = float(value)
        elif key in _TRAIN_STR:
            train_kwargs[key] = value
        elif key in _TRAIN_BOOL:
            train_kwargs[key] = _parse_bool(key, value)
        elif key in _SYNTH_INT:
            synth_kwargs[_SYNTH_INT[key]] = int(value)
        elif key in _SYNTH_FLOAT:
            synth_kwargs[_SYNTH_FLOAT[key]] = float(value)
        elif key in _SYNTH_RANGE:
            name, idx = _SYNTH_RANGE[key]
            ranges[name][idx] = float(value)
        elif key == "synth_start_date":
            synth_kwargs["start_date"] = value
        else:
            raise UsageError(f"unknown config key {key!r}")
    for name, pair in ranges.items():
        synth_kwargs[name] = tuple(pair)
    if seed_override is not None:
        train_kwargs["seed"] = seed_override
    try:
        run.train = TrainConfig(**train_kwargs)
        synth_kwargs["seed"] = run.train.seed
        run.synth = SynthConfig(**synth_kwargs)
    except (ContractError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if out_override is not None:
        run.out_dir = out_override
    return run


def _load_run_dataset(run: RunConfig) -> EpiDataset:
    if not run.cases_path or not run.static_path:
        raise UsageError("config must set cases_path and static_path")
    return load_dataset(run.cases_path, run.static_path, run.dynamic_path)


def _build_run_graph(run: RunConfig, dataset: EpiDataset):
    distances = load_distance_csv(run.distance_path) if run.distance_path else None
    return build_graph(dataset.locations, alpha=run.alpha, beta=run.beta,
                       r=run.r, tau=run.tau, distances=distances)


def _train_portion(run: RunConfig, dataset: EpiDataset) -> EpiDataset:
    if run.split_day is None:
        return dataset
    train_part, _ = split_dataset(dataset, run.split_day)
    return train_part


def _write_forecast_csv(path: Path, forecasts: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(FORECAST_HEADER)
        for loc_id, fc in forecasts.items():
            for k in range(len(fc.delta_infected)):
                w.writerow([loc_id, k + 1, repr(float(fc.delta_infected[k])),
                            repr(float(fc.delta_recovered[k])),
                            repr(float(fc.total_infected[k]))])


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(run: RunConfig) -> int:
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    locations = synthetic_locations(run.synth)
    graph = build_graph(locations, alpha=run.alpha, beta=run.beta, r=run.r, tau=run.tau)
    dataset = simulate_metapopulation(run.synth, graph)
    paths = save_dataset(dataset, out)
    print(f"simulate: wrote {paths['cases']}, {paths['static']}, {paths['dynamic']} "
          f"(N={dataset.n_locations}, T={dataset.n_days})")
    return EXIT_OK


def cmd_train(run: RunConfig) -> int:
    dataset = _load_run_dataset(run)
    train_part = _train_portion(run, dataset)
    graph = _build_run_graph(run, dataset)
    result = train(train_part, graph, run.train)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    archive_path = save_archive(result, out / "model.stan")
    with open(out / "loss_history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["location_id", "epoch", "loss"])
        for loc_id, history in result.history.items():
            for epoch, loss in enumerate(history):
                w.writerow([loc_id, epoch, repr(loss)])
    print(f"train: mode={run.train.mode} epochs={run.train.epochs} -> {archive_path}")
    return EXIT_OK


def cmd_predict(run: RunConfig, archive_path: str, horizon: int | None) -> int:
    result = load_archive(archive_path)
    dataset = _load_run_dataset(run)
    train_part = _train_portion(run, dataset)
    graph = _build_run_graph(run, dataset)
    forecasts = predict_future(result, train_part, graph, l_p=horizon)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "forecast.csv"
    _write_forecast_csv(path, forecasts)
    print(f"predict: wrote {path} ({len(forecasts)} locations x "
          f"{next(iter(forecasts.values())).delta_infected.shape[0]} days)")
    return EXIT_OK


def cmd_fit_baseline(run: RunConfig, family: str) -> int:
    family = family.lower()
    if family not in ("sir", "seir", "persistence"):
        raise UsageError(f"family must be sir, seir or persistence, got {family!r}")
    dataset = _load_run_dataset(run)
    train_part = _train_portion(run, dataset)
    horizon = run.train.l_p
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    class _Row:
        def __init__(self, d_i, d_r, totals):
            self.delta_infected = d_i
            self.delta_recovered = d_r
            self.total_infected = totals

    forecasts: dict[str, _Row] = {}
    fitted_rows = []
    for i, loc in enumerate(train_part.locations):
        observed = train_part.infected[i]
        last_i = float(observed[-1])
        last_r = float(train_part.recovered[i, -1])
        if family == "persistence":
            totals = persistence_forecast(observed, horizon)
            d_i = np.diff(np.concatenate([[last_i], totals]))
            d_r = np.zeros(horizon)
            forecasts[loc.id] = _Row(d_i, d_r, totals)
            continue
        fit = fit_compartmental(observed, loc.population, family.upper(),
                                r0=float(train_part.recovered[i, 0]))
        fc_i, fc_r = forecast_compartmental(fit, loc.population, horizon)
        d_i = np.diff(np.concatenate([[last_i], fc_i]))
        d_r = np.diff(np.concatenate([[last_r], fc_r]))
        forecasts[loc.id] = _Row(d_i, d_r, fc_i)
        row = [loc.id, repr(fit.params.beta), repr(fit.params.gamma)]
        if family == "seir":
            row.append(repr(fit.params.sigma))
        row.append(repr(fit.residual))
        fitted_rows.append(row)

    path = out / f"forecast_{family}.csv"
    _write_forecast_csv(path, forecasts)
    if fitted_rows:
        header = ["location_id", "beta", "gamma"] + (["sigma"] if family == "seir" else []) + ["residual"]
        with open(out / f"fitted_{family}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(fitted_rows)
    print(f"fit-baseline: {family} -> {path}")
    return EXIT_OK


def _read_forecast_csv(path) -> dict[tuple[str, int], float]:
    table: dict[tuple[str, int], float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FORECAST_HEADER:
            raise UsageError(f"{path}: expected header {','.join(FORECAST_HEADER)}")
        for row in reader:
            table[(row["location_id"], int(row["day_offset"]))] = float(row["total_I"])
    return table


def cmd_evaluate(run: RunConfig, forecast_specs: list[str]) -> int:
    if run.split_day is None:
        raise UsageError("evaluate requires split_day in the config")
    if not forecast_specs:
        raise UsageError("evaluate requires at least one --forecast NAME=PATH")
    dataset = _load_run_dataset(run)
    _, test_part = split_dataset(dataset, run.split_day)
    horizon = run.train.l_p
    if test_part.n_days < horizon:
        raise AlignmentError(
            f"test span has {test_part.n_days} days, need horizon {horizon}"
        )
    truth = {
        loc.id: test_part.infected[i, :horizon]
        for i, loc in enumerate(test_part.locations)
    }

    models: dict[str, dict[tuple[str, int], float]] = {}
    for spec in forecast_specs:
        name, sep, path = spec.partition("=")
        if not sep:
            raise UsageError(f"--forecast expects NAME=PATH, got {spec!r}")
        models[name] = _read_forecast_csv(path)

    missing = []
    for name, table in models.items():
        for loc_id in truth:
            for k in range(1, horizon + 1):
                if (loc_id, k) not in table:
                    missing.append((name, loc_id, k))
    if missing:
        raise AlignmentError(f"missing forecast entries: {missing[:10]}"
                             + (" ..." if len(missing) > 10 else ""))

    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loc_order = list(truth)
    sq_errors: dict[str, np.ndarray] = {}
    for name, table in models.items():
        per_loc_mse, per_loc_mae, per_loc_ccc = [], [], []
        flat_sq = []
        for loc_id in loc_order:
            pred = np.array([table[(loc_id, k)] for k in range(1, horizon + 1)])
            m, a = mse_mae(pred, truth[loc_id])
            per_loc_mse.append(m)
            per_loc_mae.append(a)
            try:
                per_loc_ccc.append(ccc(pred, truth[loc_id]))
            except (UndefinedMetricError, ValueError):
                per_loc_ccc.append(np.nan)
            flat_sq.extend((pred - truth[loc_id]) ** 2)
        sq_errors[name] = np.array(flat_sq)
        rows = []
        for metric, scores in (("mse", per_loc_mse), ("mae", per_loc_mae), ("ccc", per_loc_ccc)):
            arr = np.array(scores, dtype=np.float64)
            arr = arr[~np.isnan(arr)]
            if arr.size == 0:
                rows.append([metric, "nan", "nan", "nan"])
                continue
            lo, hi = bootstrap_ci(arr, b=run.bootstrap_samples, seed=run.eval_seed)
            rows.append([metric, repr(float(arr.mean())), repr(lo), repr(hi)])
        fname = out / f"metrics_{name}.csv"
        with open(fname, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "point", "lo", "hi"])
            w.writerows(rows)
        print(f"evaluate: wrote {fname}")

    with open(out / "ttests.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model_a", "model_b", "p_value", "method"])
        for a, b in combinations(models, 2):
            try:
                p = repr(paired_t_test(sq_errors[a], sq_errors[b]))
            except DegenerateStatisticError:
                p = "nan"
            w.writerow([a, b, p, "paired-two-sided-t"])
    print(f"evaluate: wrote {out / 'ttests.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _make_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="override the output directory")

    parser = _Parser(prog="stanepi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train the forecaster")
    p = sub.add_parser("predict", parents=[common], help="forecast from an archive")
    p.add_argument("--archive", required=True, metavar="PATH")
    p.add_argument("--horizon", type=int, metavar="L_P")
    p = sub.add_parser("fit-baseline", parents=[common],
                       help="fit and forecast a compartmental or persistence baseline")
    p.add_argument("--family", required=True, metavar="sir|seir|persistence")
    p = sub.add_parser("evaluate", parents=[common],
                       help="score forecast files against the held-out truth")
    p.add_argument("--forecast", action="append", default=[], metavar="NAME=PATH")
    return parser


def main(argv=None) -> int:
    parser = _make_parser()
    try:
        args = parser.parse_args(argv)
        entries = parse_config_file(args.config) if args.config else {}
        run = build_run_config(entries, seed_override=args.seed, out_override=args.out)
        if args.command == "simulate":
            return cmd_simulate(run)
        if args.command == "train":
            return cmd_train(run)
        if args.command == "predict":
            return cmd_predict(run, args.archive, args.horizon)
        if args.command == "fit-baseline":
            return cmd_fit_baseline(run, args.family)
        if args.command == "evaluate":
            return cmd_evaluate(run, args.forecast)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, PermissionError, IsADirectoryError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ScheduleError as exc:
        print(f"infeasible schedule: {exc}", file=sys.stderr)
        return EXIT_SCHEDULE
    except (ContractError, ArchiveError) as exc:
        print(f"contract mismatch: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except AlignmentError as exc:
        print(f"alignment failure: {exc}", file=sys.stderr)
        return EXIT_ALIGNMENT


if __name__ == "__main__":
    sys.exit(main())
