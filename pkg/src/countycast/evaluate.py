"""Backtesting harness: RMSE protocols, state aggregation, ensemble intervals
and report files."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import NormalDist
from typing import Sequence

import numpy as np

from . import arima as _arima
from .errors import ConfigError, DataError
from .forecast import DwlstmConfig, DwlstmModel, load_checkpoint, rollout, train
from .windows import ForecastTask, SplitWindows, WindowSet, make_windows

__all__ = [
    "ForecastTask",
    "make_windows",
    "rmse_daily",
    "rmse_per_county",
    "rmse_macro_micro",
    "aggregate_state",
    "ensemble_ci",
    "ModelSpec",
    "EvalReport",
    "backtest",
    "kfold_tasks",
    "backtest_kfold",
    "exclusion_ablation",
]

MODEL_KINDS = ("dwlstm", "arima", "arima_star")

US_STATES = frozenset(
    "AL AK AZ AR CA CO CT DE DC FL GA HI ID IL IN IA KS KY LA ME MD MA MI MN MS MO MT NE NV NH NJ NM NY "
    "NC ND OH OK OR PA RI SC SD TN TX UT VT VA WA WV WI WY PR GU VI AS MP".split()
)


def _aligned(preds, targets):
    p = np.asarray(preds, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise DataError(f"shape mismatch: predictions {p.shape} vs targets {t.shape}")
    if p.ndim == 1:
        p, t = p[None, :], t[None, :]
    if p.ndim != 2:
        raise DataError("expected a (county x day) array")
    return p, t


def rmse_daily(preds, targets):
    """RMSE across rows for each day, and the mean of those daily values."""
    p, t = _aligned(preds, targets)
    daily = np.sqrt(np.mean((p - t) ** 2, axis=0))
    return daily, float(daily.mean()) if daily.size else math.nan


def rmse_per_county(preds, targets, groups=None):
    """RMSE per row, or per group label when rows share a county."""
    p, t = _aligned(preds, targets)
    sq = (p - t) ** 2
    if groups is None:
        return np.sqrt(sq.mean(axis=1))
    groups = np.asarray(groups)
    return np.array([math.sqrt(sq[groups == g].mean()) for g in np.unique(groups)])


def rmse_macro_micro(preds, targets, groups=None):
    """(macro, micro): the equal-weight mean of per-county RMSE and the RMSE
    pooled over every (county, day) cell."""
    p, t = _aligned(preds, targets)
    macro = float(rmse_per_county(p, t, groups).mean())
    micro = math.sqrt(float(np.mean((p - t) ** 2)))
    return macro, micro


def aggregate_state(county_preds, states: Sequence[str]):
    """Sum county rows into state rows. Returns (state codes sorted, sums)."""
    x = np.asarray(county_preds, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    states = [str(s) for s in states]
    if len(states) != x.shape[0]:
        raise DataError(f"{x.shape[0]} county rows but {len(states)} state codes")
    unknown = sorted(set(states) - US_STATES)
    if unknown:
        raise DataError(f"unknown state code(s): {', '.join(unknown)}")
    codes = sorted(set(states))
    idx = np.array([codes.index(s) for s in states])
    out = np.zeros((len(codes), x.shape[1]))
    np.add.at(out, idx, x)
    return tuple(codes), out


@dataclass(frozen=True, eq=False)
class EnsembleForecast:
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    members: np.ndarray  # (M, ..., w_out)


def _z(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise DataError("level must lie in (0, 1)")
    if level == 0.95:
        return 1.96
    return NormalDist().inv_cdf(0.5 + level / 2.0)


def ensemble_ci(models: Sequence[DwlstmModel], window, level: float = 0.95, w_out: int | None = None) -> EnsembleForecast:
    """Mean of M seed-ensemble rollouts +- z * sample std (ddof=1).

    The lower bound is clamped at 0 when the models clamp their forecasts.
    """
    models = list(models)
    if len(models) < 2:
        raise DataError("ensemble_ci needs at least 2 models")
    ref = {k: v for k, v in models[0].config.to_dict().items() if k != "seed"}
    for m in models[1:]:
        other = {k: v for k, v in m.config.to_dict().items() if k != "seed"}
        if other != ref or m.objective != models[0].objective:
            raise DataError("ensemble members must share every config field except the seed")
    members = np.stack([rollout(m, window, w_out) for m in models])
    return ensemble_from_members(members, level, clamp=models[0].config.clamp)


def ensemble_from_members(members, level: float = 0.95, clamp: bool = True) -> EnsembleForecast:
    members = np.asarray(members, dtype=float)
    mean = members.mean(axis=0)
    half = _z(level) * members.std(axis=0, ddof=1)
    lo = mean - half
    if clamp:
        lo = np.maximum(lo, 0.0)
    return EnsembleForecast(mean, lo, mean + half, members)


# ---- backtest -----------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Which models to run and how.

    ``seeds`` lists the DWLSTM ensemble members (one model per seed); with a
    single seed no DWLSTM interval is produced. ``checkpoints`` loads trained
    models instead of training.
    """

    models: tuple[str, ...] = ("dwlstm", "arima_star")
    dwlstm: DwlstmConfig = field(default_factory=DwlstmConfig)
    seeds: tuple[int, ...] = (0,)
    checkpoints: tuple[str, ...] = ()
    arima_order: tuple[int, int, int] = (1, 2, 0)
    max_p: int = 3
    max_q: int = 3

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "checkpoints", tuple(str(c) for c in self.checkpoints))
        object.__setattr__(self, "arima_order", tuple(int(v) for v in self.arima_order))
        bad = [m for m in self.models if m not in MODEL_KINDS]
        if bad or not self.models:
            raise ConfigError(f"unknown model kind(s) {bad}; expected some of {', '.join(MODEL_KINDS)}")
        if len(set(self.models)) != len(self.models):
            raise ConfigError("model kinds must be unique")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(self.arima_order) != 3 or self.arima_order[1] not in (0, 1, 2) or min(self.arima_order) < 0:
            raise ConfigError("arima_order must be (p, d, q) with d in 0..2")


@dataclass(frozen=True, eq=False)
class ModelForecast:
    model: str
    point: np.ndarray  # (N windows, w_out)
    lo: np.ndarray
    hi: np.ndarray
    info: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class EvalReport:
    task: ForecastTask
    fips: tuple[str, ...]  # one per test window
    states: tuple[str, ...]
    origins: tuple[str, ...]  # first forecast date of each window
    truth: np.ndarray
    forecasts: dict
    metadata: dict

    @property
    def horizon(self) -> int:
        return self.task.w_out

    def metrics(self, model: str) -> dict:
        fc = self.forecasts[model]
        macro, micro = rmse_macro_micro(fc.point, self.truth, self.fips)
        _, avg_daily = rmse_daily(fc.point, self.truth)
        st_p, st_t = self._state_series(fc.point)
        s_macro, s_micro = rmse_macro_micro(st_p, st_t)
        if np.all(np.isfinite(fc.lo)):
            coverage = float(np.mean((self.truth >= fc.lo) & (self.truth <= fc.hi)))
            width = float(np.mean(fc.hi - fc.lo))
        else:
            coverage = width = math.nan
        return {
            "macro_rmse": macro,
            "micro_rmse": micro,
            "avg_daily_rmse": avg_daily,
            "state_macro_rmse": s_macro,
            "state_micro_rmse": s_micro,
            "ci_coverage": coverage,
            "ci_mean_width": width,
        }

    def _state_series(self, values):
        """State sums per forecast origin, stacked as rows."""
        rows_p, rows_t = [], []
        for origin in sorted(set(self.origins)):
            sel = [i for i, o in enumerate(self.origins) if o == origin]
            _, p = aggregate_state(values[sel], [self.states[i] for i in sel])
            _, t = aggregate_state(self.truth[sel], [self.states[i] for i in sel])
            rows_p.append(p)
            rows_t.append(t)
        return np.concatenate(rows_p), np.concatenate(rows_t)

    def per_county(self, model: str) -> list[tuple[str, float]]:
        fc = self.forecasts[model]
        codes = sorted(set(self.fips))
        vals = rmse_per_county(fc.point, self.truth, self.fips)
        return list(zip(codes, (float(v) for v in vals)))

    def rows(self) -> list[dict]:
        out = []
        for model in self.forecasts:
            out.append({"model": model, "objective": self.task.objective, "horizon": self.horizon, **self.metrics(model)})
        return out

    def write(self, directory: str | os.PathLike) -> Path:
        """report.csv, per_county.csv, forecasts_<model>.csv and summary.json."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rows = self.rows()
        cols = list(rows[0])
        _write(directory / "report.csv", cols, [[_fmt(r[c]) for c in cols] for r in rows])
        per = []
        for model in self.forecasts:
            per += [[model, f, _fmt(v)] for f, v in self.per_county(model)]
        _write(directory / "per_county.csv", ["model", "county", "rmse"], per)
        for model, fc in self.forecasts.items():
            trace = []
            for n in range(len(self.fips)):
                origin = np.datetime64(self.origins[n], "D")
                for k in range(self.horizon):
                    trace.append([
                        self.fips[n], str(origin + k), _fmt(self.truth[n, k]), _fmt(fc.point[n, k]),
                        _fmt(fc.lo[n, k]), _fmt(fc.hi[n, k]), self.origins[n],
                    ])
            _write(directory / f"forecasts_{model}.csv", ["county", "date", "truth", "point", "lo95", "hi95", "origin"], trace)
        summary = {"task": self.task.to_dict(), "metadata": self.metadata, "results": rows}
        (directory / "summary.json").write_text(json.dumps(_jsonable(summary), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return directory


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if math.isnan(float(x)) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def _write(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _arima_forecasts(series: np.ndarray, test: WindowSet, spec: ModelSpec, star: bool):
    n = len(test)
    point, lo, hi = (np.zeros((n, test.w_out)) for _ in range(3))
    orders = []
    cache: dict[tuple[int, int], tuple] = {}
    for k in range(n):
        c, origin = int(test.county[k]), int(test.start[k]) + test.w_in
        key = (c, origin)
        if key not in cache:
            y = series[c, :origin]
            if star:
                model = _arima.select_arima(y, spec.max_p, spec.max_q)
            else:
                model = _arima.fit_arima(y, *spec.arima_order)
            cache[key] = (model, _arima.arima_forecast(model, y, test.w_out))
        model, fc = cache[key]
        point[k], lo[k], hi[k] = fc.point, fc.lo, fc.hi
        orders.append(list(model.order))
    return point, lo, hi, orders


def _dwlstm_models(panel, task: ForecastTask, spec: ModelSpec) -> list[DwlstmModel]:
    if spec.checkpoints:
        models = [load_checkpoint(p) for p in spec.checkpoints]
        for m in models:
            if m.objective != task.objective or m.config.w_in != task.w_in:
                raise DataError("checkpoint does not match the task objective / input window")
        return models
    return [train(panel, task, replace(spec.dwlstm, seed=s)) for s in spec.seeds]


def backtest(panel, task: ForecastTask, spec: ModelSpec | None = None, out_dir=None, models=None) -> EvalReport:
    """Train on data before the test period, forecast every test window, score.

    ``models`` may pass already trained DWLSTM models (the ensemble).
    """
    spec = spec or ModelSpec()
    split: SplitWindows = make_windows(panel, task)
    fpanel = task.apply_filters(panel)
    test = split.test
    series = fpanel.outcome(task.objective)
    forecasts = {}
    meta: dict = {
        "test_start": str(fpanel.dates[split.test_start]),
        "test_end": str(fpanel.dates[split.test_end]),
        "n_counties": fpanel.n_counties,
        "n_test_windows": len(test),
    }
    for kind in spec.models:
        if kind == "dwlstm":
            ms = list(models) if models is not None else _dwlstm_models(panel, task, spec)
            for m in ms:
                last = np.datetime64(m.meta.get("train_last_day", str(fpanel.dates[0])), "D")
                if last >= fpanel.dates[split.test_start]:
                    raise AssertionError(f"model trained on data up to {last}, inside the test period")
            members = np.stack([rollout(m, test, task.w_out) for m in ms])
            if len(ms) >= 2:
                ens = ensemble_from_members(members, clamp=ms[0].config.clamp)
                point, lo, hi = ens.mean, ens.lo, ens.hi
            else:
                point = members[0]
                lo = hi = np.full_like(point, np.nan)
            forecasts[kind] = ModelForecast(kind, point, lo, hi)
            meta["dwlstm"] = {
                "seeds": [m.config.seed for m in ms],
                "config": {k: v for k, v in ms[0].config.to_dict().items() if k != "seed"},
                "best_epochs": [m.meta.get("best_epoch") for m in ms],
                "train_last_day": ms[0].meta.get("train_last_day"),
            }
        else:
            point, lo, hi, orders = _arima_forecasts(series, test, spec, kind == "arima_star")
            forecasts[kind] = ModelForecast(kind, point, lo, hi, {"orders": orders})
            meta[kind] = {"orders": {fpanel.fips[int(c)]: o for c, o in zip(test.county, orders)}}
            if kind == "arima":
                meta[kind]["order"] = list(spec.arima_order)
    origins = tuple(str(fpanel.dates[int(s) + task.w_in]) for s in test.start)
    report = EvalReport(
        task,
        tuple(fpanel.fips[int(c)] for c in test.county),
        tuple(fpanel.states[int(c)] for c in test.county),
        origins,
        np.array(test.future),
        forecasts,
        meta,
    )
    if out_dir is not None:
        report.write(out_dir)
    return report


def kfold_tasks(panel, task: ForecastTask, k: int) -> list[ForecastTask]:
    """k chronological folds: consecutive ``w_out``-day test blocks ending at
    the panel end, each trained only on the days before its block."""
    if k < 1:
        raise DataError("k must be >= 1")
    T = panel.n_days
    tasks = []
    for j in range(k):
        start = T - (k - j) * task.w_out
        if start - task.w_in - 10 < 0:
            raise DataError(f"panel too short for {k} folds of {task.w_out} days")
        end = start + task.w_out - 1
        tasks.append(replace(task, test_start=str(panel.dates[start]), test_end=str(panel.dates[end])))
    return tasks


def backtest_kfold(panel, task: ForecastTask, spec: ModelSpec | None, k: int) -> tuple[list[EvalReport], list[dict]]:
    """Backtest every fold on a panel truncated at the fold's end, and average
    each metric over folds per model."""
    reports = []
    for t in kfold_tasks(panel, task, k):
        stop = panel.date_index(t.test_end) + 1
        reports.append(backtest(panel.slice_days(0, stop), replace(t, test_end=None), spec))
    summary = []
    for model in reports[0].forecasts:
        ms = [r.metrics(model) for r in reports]
        summary.append({"model": model, "folds": k, **{key: float(np.mean([m[key] for m in ms])) for key in ms[0]}})
    return reports, summary


def exclusion_ablation(panel, task: ForecastTask, spec: ModelSpec | None, states: Sequence[str]):
    """Backtest with and without the counties of ``states``."""
    full = backtest(panel, task, spec)
    reduced = backtest(panel, replace(task, exclude_states=tuple(task.exclude_states) + tuple(states)), spec)
    return full, reduced
