"""Forecast tasks and (input window, forecast window) example construction."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

from .errors import DataError

OBJECTIVES = ("new_daily_deaths", "new_daily_cases", "cumulative_deaths_per_100k")


@dataclass(frozen=True)
class ForecastTask:
    """What to forecast and which days are held out.

    The test period defaults to the last ``w_out`` panel days.
    ``exclude_states`` drops whole states (e.g. the region ablation that
    removes New York counties).
    """

    objective: str = "new_daily_deaths"
    w_in: int = 10
    w_out: int = 10
    test_start: str | None = None
    test_end: str | None = None
    exclude_states: tuple[str, ...] = ()
    exclude_counties: tuple[str, ...] = ()

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise DataError(f"unknown objective {self.objective!r}; expected one of {', '.join(OBJECTIVES)}")
        if self.w_in < 2:
            raise DataError("w_in must be >= 2")
        if self.w_out < 1:
            raise DataError("w_out must be >= 1")
        object.__setattr__(self, "exclude_states", tuple(self.exclude_states))
        object.__setattr__(self, "exclude_counties", tuple(self.exclude_counties))

    def apply_filters(self, panel):
        out = panel
        if self.exclude_states:
            out = out.exclude_states(self.exclude_states)
        if self.exclude_counties:
            drop = set(self.exclude_counties)
            out = out.select([i for i, f in enumerate(out.fips) if f not in drop])
        if out.n_counties == 0:
            raise DataError("task filters removed every county")
        return out

    def test_range(self, panel) -> tuple[int, int]:
        """Inclusive day indices of the test period."""
        if self.test_start is None:
            start = panel.n_days - self.w_out
        else:
            d = np.datetime64(self.test_start, "D")
            if d < panel.dates[0] or d > panel.dates[-1]:
                raise DataError(f"test period start {d} outside panel range {panel.dates[0]}..{panel.dates[-1]}")
            start = int((d - panel.dates[0]).astype(int))
        end = panel.n_days - 1 if self.test_end is None else panel.date_index(self.test_end)
        if end - start + 1 < self.w_out:
            raise DataError("test period shorter than the forecast window")
        if start - self.w_in < 0:
            raise DataError("test period starts before a full input window is available")
        return start, end

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}


@dataclass(frozen=True)
class TrainingWindow:
    county: int
    start: int
    dyn: np.ndarray  # (w_in, D) raw dynamic features
    hist: np.ndarray  # (w_in,) observed target on input days
    static: np.ndarray  # (S,)
    step_targets: np.ndarray  # (w_in,) target on the day after each input day
    future: np.ndarray  # (w_out,) target over the forecast window (NaN past the panel end)


@dataclass(frozen=True, eq=False)
class WindowSet:
    county: np.ndarray
    start: np.ndarray
    dyn: np.ndarray
    hist: np.ndarray
    static: np.ndarray
    step_targets: np.ndarray
    future: np.ndarray
    w_in: int
    w_out: int

    def __len__(self):
        return int(self.county.size)

    def __getitem__(self, i) -> TrainingWindow:
        return TrainingWindow(
            int(self.county[i]), int(self.start[i]), self.dyn[i], self.hist[i], self.static[i],
            self.step_targets[i], self.future[i],
        )

    def take(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return replace(
            self,
            county=self.county[idx],
            start=self.start[idx],
            dyn=self.dyn[idx],
            hist=self.hist[idx],
            static=self.static[idx],
            step_targets=self.step_targets[idx],
            future=self.future[idx],
        )

    def last_day(self, include_future: bool = False) -> int:
        """Largest day index touched by any window (inputs and step targets)."""
        if not len(self):
            return -1
        return int(self.start.max()) + self.w_in - 1 + (self.w_out if include_future else 1)

    @classmethod
    def stack(cls, windows: Sequence[TrainingWindow], w_in: int, w_out: int) -> "WindowSet":
        return cls(
            np.array([w.county for w in windows]),
            np.array([w.start for w in windows]),
            np.stack([w.dyn for w in windows]),
            np.stack([w.hist for w in windows]),
            np.stack([w.static for w in windows]),
            np.stack([w.step_targets for w in windows]),
            np.stack([w.future for w in windows]),
            w_in,
            w_out,
        )


def as_window_set(window, w_in=None, w_out=None) -> WindowSet:
    if isinstance(window, WindowSet):
        return window
    return WindowSet.stack([window], w_in or window.hist.size, w_out or window.future.size)


def build_windows(panel, target: np.ndarray, w_in: int, w_out: int, starts) -> WindowSet:
    """Windows for every county at each start index in ``starts``."""
    C, T = target.shape
    starts = np.asarray(sorted(set(int(s) for s in starts)), dtype=int)
    if starts.size and (starts.min() < 0 or starts.max() + w_in > T):
        raise DataError("window inputs run outside the panel")
    county = np.repeat(np.arange(C), starts.size)
    start = np.tile(starts, C)
    pad = np.full((C, w_in + w_out + 1), np.nan)
    tgt = np.concatenate([target, pad], axis=1)
    steps = np.arange(w_in)
    dyn = panel.dynamic[county[:, None], start[:, None] + steps[None, :]]
    hist = target[county[:, None], start[:, None] + steps[None, :]]
    step_t = tgt[county[:, None], start[:, None] + 1 + steps[None, :]]
    fut = tgt[county[:, None], start[:, None] + w_in + np.arange(w_out)[None, :]]
    return WindowSet(county, start, dyn, hist, panel.static[county], step_t, fut, w_in, w_out)


def chronological_split(ws: WindowSet, fractions: Sequence[float], purge_all: bool = False) -> list[WindowSet]:
    """Split by window start date into consecutive blocks.

    Windows of the first (fitting) block are dropped when any of their days
    reaches the first target day of a later block, so held-out targets never
    appear in fitting inputs. Held-out blocks are only purged against each
    other with ``purge_all``; a window spans w_in + 1 days, so short blocks
    would otherwise lose nearly all their windows.
    """
    fr = np.asarray(fractions, dtype=float)
    if np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise DataError("split fractions must be non-negative and sum to 1")
    uniq = np.unique(ws.start)
    bounds = np.round(np.cumsum(fr) * uniq.size).astype(int)
    bounds[-1] = uniq.size
    out, lo = [], 0
    for k, hi in enumerate(bounds):
        mask = np.isin(ws.start, uniq[lo:hi])
        if (k == 0 or purge_all) and hi < uniq.size:
            mask &= ws.start + ws.w_in < uniq[hi] + 1
        out.append(ws.take(np.flatnonzero(mask)))
        lo = hi
    return out


@dataclass(frozen=True, eq=False)
class SplitWindows:
    train: WindowSet
    validation: WindowSet
    test: WindowSet
    test_start: int
    test_end: int


def pretest_windows(panel, target, task: ForecastTask, test_start: int) -> WindowSet:
    """All windows whose inputs and step targets end before ``test_start``."""
    last_start = test_start - task.w_in - 1
    return build_windows(panel, target, task.w_in, task.w_out, range(0, last_start + 1))


def make_windows(panel, task: ForecastTask, fractions=(0.9, 0.1)) -> SplitWindows:
    """Train/validation windows before the test period and test windows whose
    forecast days lie inside it."""
    panel = task.apply_filters(panel)
    target = panel.outcome(task.objective)
    ts, te = task.test_range(panel)
    pre = pretest_windows(panel, target, task, ts)
    if len(pre) == 0:
        raise DataError("no training windows before the test period")
    train, val = chronological_split(pre, fractions)
    test = build_windows(panel, target, task.w_in, task.w_out, range(ts - task.w_in, te - task.w_in - task.w_out + 2))
    if len(train) == 0 or len(test) == 0:
        raise DataError("empty train or test split")
    assert_no_leakage(train, test)
    assert_no_leakage(val, test)
    return SplitWindows(train, val, test, ts, te)


def assert_no_leakage(train: WindowSet, test: WindowSet) -> None:
    if not len(train) or not len(test):
        return
    first_target = int(test.start.min()) + test.w_in
    if train.last_day() >= first_target:
        raise AssertionError(
            f"training windows reach day {train.last_day()} but test targets start at day {first_target}"
        )
