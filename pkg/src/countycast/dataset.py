"""Snapshot ingestion, regional metrics, the county x date feature panel, and
a seeded synthetic panel generator.

A :class:`FeaturePanel` holds three aligned blocks for ``C`` counties over
``T`` contiguous days:

* ``static``   (C, S)    per-county attributes
* ``dynamic``  (C, T, D) per-county per-day features (mobility, compliance, ...)
* ``outbreak`` (C, T, 3) cumulative confirmed, deaths, recovered

Counties are always sorted by FIPS and every array is read-only.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import DataError, DegenerateInputError, SchemaError

logger = logging.getLogger(__name__)

COLUMN_TYPES = ("fips", "state", "date", "int", "float", "str", "mobility")
KINDS = ("outbreak", "static", "dynamic")
OUTBREAK_FIELDS = ("confirmed", "deaths", "recovered")
MOBILITY_CATEGORIES = (
    "retail_recreation",
    "grocery_pharmacy",
    "parks",
    "transit_stations",
    "workplaces",
    "residential",
)
REJECT_LIMIT = 0.10

_FIPS_RE = re.compile(r"^\d{1,5}$")
_STATE_RE = re.compile(r"^[A-Z]{2}$")


# --------------------------------------------------------------------------
# schemas and raw tables
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnSpec:
    """One declared column.

    ``scale`` is ``"percent"`` when the source stores a share in [0, 100]
    (converted to [0, 1] on load), ``"fraction"`` when it is already in
    [0, 1], and ``None`` for non-share quantities.
    """

    name: str
    type: str = "float"
    unit: str = ""
    scale: str | None = None
    required: bool = True

    def __post_init__(self):
        if self.type not in COLUMN_TYPES:
            raise SchemaError(f"column {self.name!r}: unknown type {self.type!r}")
        if self.scale not in (None, "percent", "fraction"):
            raise SchemaError(f"column {self.name!r}: unknown scale {self.scale!r}")

    @property
    def numeric(self) -> bool:
        return self.type in ("int", "float", "mobility")


@dataclass(frozen=True)
class DatasetSchema:
    name: str
    kind: str
    columns: tuple[ColumnSpec, ...]
    # "relative": percent change from baseline; "index": 100 == baseline
    mobility_baseline: str = "relative"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"schema {self.name!r}: unknown kind {self.kind!r}")
        if self.mobility_baseline not in ("relative", "index"):
            raise SchemaError(f"schema {self.name!r}: bad mobility_baseline")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"schema {self.name!r}: duplicate column names")
        need = {"outbreak": ("fips", "date"), "static": ("fips",), "dynamic": ("fips", "date")}
        types = {c.type for c in self.columns}
        for t in need[self.kind]:
            if t not in types:
                raise SchemaError(f"schema {self.name!r}: {self.kind} tables need a {t} column")

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def key(self, type_: str) -> str | None:
        for c in self.columns:
            if c.type == type_:
                return c.name
        return None

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        cols = d.get("columns", {})
        if isinstance(cols, dict):
            specs = [ColumnSpec(name=k, **(v if isinstance(v, dict) else {"type": v})) for k, v in cols.items()]
        else:
            specs = [ColumnSpec(**c) for c in cols]
        return cls(
            name=d["name"],
            kind=d["kind"],
            columns=tuple(specs),
            mobility_baseline=d.get("mobility_baseline", "relative"),
        )

    def to_dict(self) -> dict:
        cols = {}
        for c in self.columns:
            entry = {"type": c.type}
            if c.unit:
                entry["unit"] = c.unit
            if c.scale:
                entry["scale"] = c.scale
            if not c.required:
                entry["required"] = False
            cols[c.name] = entry
        return {
            "name": self.name,
            "kind": self.kind,
            "mobility_baseline": self.mobility_baseline,
            "columns": cols,
        }

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetSchema":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"schema file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise SchemaError(f"malformed schema file {path}: {exc}") from exc

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Reject:
    line: int
    column: str
    value: str
    reason: str


@dataclass(frozen=True, eq=False)
class RawTable:
    schema: DatasetSchema
    frame: pd.DataFrame
    rejects: tuple[Reject, ...] = ()

    def __len__(self):
        return len(self.frame)


def _coerce(spec: ColumnSpec, raw: str, mobility_baseline: str):
    s = raw.strip()
    if s == "" or s.upper() in ("NA", "NAN", "NULL"):
        if spec.type in ("fips", "state", "date"):
            raise ValueError("missing key value")
        return None if spec.type == "str" else math.nan
    if spec.type == "fips":
        if not _FIPS_RE.match(s):
            raise ValueError("not a FIPS code")
        return s.zfill(5)
    if spec.type == "state":
        s = s.upper()
        if not _STATE_RE.match(s):
            raise ValueError("not a 2-letter state code")
        return s
    if spec.type == "date":
        return dt.date.fromisoformat(s)
    if spec.type == "str":
        return s
    if spec.type == "int":
        v = float(s)
        if not v.is_integer():
            raise ValueError("not an integer")
        return float(v)
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("non-finite value")
    if spec.type == "mobility" and mobility_baseline == "index":
        v -= 100.0
    if spec.scale == "percent":
        v /= 100.0
    return v


def load_dataset(schema: DatasetSchema, path: str | os.PathLike) -> RawTable:
    """Read a snapshot CSV and coerce every declared column.

    Rows with a value that fails coercion go to ``rejects`` (1-based file
    line numbers, header is line 1). Empty numeric cells load as NaN and are
    left for imputation. Undeclared columns are ignored.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing = [c.name for c in schema.columns if c.required and c.name not in header]
        if missing:
            raise SchemaError(f"{path}: missing required column(s) {', '.join(missing)}")
        idx = {c.name: header.index(c.name) for c in schema.columns if c.name in header}
        rows, rejects, total = [], [], 0
        for cells in reader:
            line = reader.line_num
            if not cells or all(not x.strip() for x in cells):
                continue
            total += 1
            row, bad = {}, None
            for name, i in idx.items():
                spec = schema.column(name)
                raw = cells[i] if i < len(cells) else ""
                try:
                    row[name] = _coerce(spec, raw, schema.mobility_baseline)
                except ValueError as exc:
                    bad = Reject(line, name, raw, str(exc))
                    break
            if bad is None:
                rows.append(row)
            else:
                rejects.append(bad)
    if total and len(rejects) / total > REJECT_LIMIT:
        raise SchemaError(
            f"{path}: {len(rejects)} of {total} rows rejected (limit {REJECT_LIMIT:.0%}); "
            f"first at line {rejects[0].line}: {rejects[0].reason}"
        )
    for r in rejects:
        logger.warning("%s line %d: rejected %s=%r (%s)", path.name, r.line, r.column, r.value, r.reason)
    frame = pd.DataFrame(rows, columns=list(idx))
    return RawTable(schema, frame, tuple(rejects))


# --------------------------------------------------------------------------
# regional metrics
# --------------------------------------------------------------------------


def diversity_index(race_counts: Sequence[float]) -> float:
    """Probability that two residents drawn at random belong to different races."""
    n = np.asarray(race_counts, dtype=float)
    if n.ndim != 1 or n.size == 0:
        raise DataError("race_counts must be a non-empty 1-D sequence")
    if np.any(n < 0) or not np.all(np.isfinite(n)):
        raise DataError("race counts must be finite and non-negative")
    total = n.sum()
    if total <= 0:
        raise DegenerateInputError("all race counts are zero")
    return float(1.0 - np.sum((n / total) ** 2))


def compliance_score(m: Sequence[float]) -> float:
    """Shelter-in-place compliance from six mobility changes (percent vs baseline).

    +1 corresponds to a 100% reduction in every category, -1 to a 100% increase.
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (6,):
        raise DataError(f"compliance needs exactly six mobility values, got shape {m.shape}")
    return -1.0 - (m.sum() / 6.0 - 100.0) / 100.0


def _compliance_rows(m: np.ndarray) -> np.ndarray:
    # row-wise version of compliance_score with the same operation order
    return -1.0 - (m.sum(axis=-1) / 6.0 - 100.0) / 100.0


def per_capita(series, population: float, base: float = 100_000) -> np.ndarray:
    if not population or population <= 0:
        raise DataError("population must be positive")
    return np.asarray(series, dtype=float) * (base / population)


# --------------------------------------------------------------------------
# the panel
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureInfo:
    name: str
    block: str  # static | dynamic | outbreak
    type: str = "float"
    unit: str = ""
    convention: str = ""  # "fraction" for share features, else ""


@dataclass(frozen=True, order=True)
class Flag:
    block: str
    fips: str
    date: str  # ISO date or "" for static cells
    feature: str
    reason: str  # interpolated | edge_fill | rolling_max | state_median | national_median


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


OUTCOME_ALIASES = {
    "new_daily_deaths": "daily_deaths",
    "new_daily_cases": "daily_cases",
    "new_daily_recoveries": "daily_recoveries",
}
_OUTCOME_FIELD = {"cases": 0, "deaths": 1, "recoveries": 2}


@dataclass(frozen=True, eq=False)
class FeaturePanel:
    fips: tuple[str, ...]
    states: tuple[str, ...]
    dates: np.ndarray
    population: np.ndarray
    static_names: tuple[str, ...]
    static: np.ndarray
    dynamic_names: tuple[str, ...]
    dynamic: np.ndarray
    outbreak: np.ndarray
    schema: tuple[FeatureInfo, ...] = ()
    flags: tuple[Flag, ...] = ()

    def __post_init__(self):
        C, T = len(self.fips), len(self.dates)
        object.__setattr__(self, "dates", _readonly(np.asarray(self.dates, dtype="datetime64[D]")))
        object.__setattr__(self, "population", _readonly(np.asarray(self.population, dtype=np.int64)))
        for name in ("static", "dynamic", "outbreak"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), dtype=float)))
        if len(self.states) != C or self.population.shape != (C,):
            raise DataError("county metadata misaligned")
        if len(set(self.fips)) != C:
            raise DataError("duplicate FIPS codes in panel")
        if list(self.fips) != sorted(self.fips):
            raise DataError("panel counties must be sorted by FIPS")
        if self.static.shape != (C, len(self.static_names)):
            raise DataError(f"static block shape {self.static.shape} != ({C}, {len(self.static_names)})")
        if self.dynamic.shape != (C, T, len(self.dynamic_names)):
            raise DataError("dynamic block misaligned with counties/dates")
        if self.outbreak.shape != (C, T, 3):
            raise DataError("outbreak block misaligned with counties/dates")
        if T > 1 and np.any(np.diff(self.dates).astype(int) != 1):
            raise DataError("panel dates must be contiguous daily")
        for name in ("static", "dynamic", "outbreak"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"non-finite values in {name} block")
        if np.any(self.population <= 0):
            raise DataError("population must be positive")

    @property
    def n_counties(self) -> int:
        return len(self.fips)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    def date_index(self, date) -> int:
        d = np.datetime64(date, "D")
        i = int((d - self.dates[0]).astype(int))
        if not 0 <= i < self.n_days:
            raise DataError(f"date {d} outside panel range {self.dates[0]}..{self.dates[-1]}")
        return i

    def outcome(self, name: str) -> np.ndarray:
        """(C, T) series for an outcome name.

        Names are ``{cumulative,daily}_{cases,deaths,recoveries}`` with an
        optional ``_per_100k`` suffix, plus the forecasting aliases
        ``new_daily_deaths`` / ``new_daily_cases``. The first day of a daily
        series is 0 because the panel has no earlier observation.
        """
        key = OUTCOME_ALIASES.get(name, name)
        per_100k = key.endswith("_per_100k")
        if per_100k:
            key = key[: -len("_per_100k")]
        kind, _, what = key.partition("_")
        if kind not in ("cumulative", "daily") or what not in _OUTCOME_FIELD:
            raise DataError(f"unknown outcome {name!r}")
        series = self.outbreak[:, :, _OUTCOME_FIELD[what]]
        if kind == "daily":
            series = np.diff(series, axis=1, prepend=series[:, :1])
        if per_100k:
            series = series * (100_000 / self.population[:, None])
        return np.array(series)

    def select(self, counties: Sequence[int] | np.ndarray) -> "FeaturePanel":
        idx = np.asarray(counties)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = np.sort(idx)
        keep = {self.fips[i] for i in idx}
        return replace(
            self,
            fips=tuple(self.fips[i] for i in idx),
            states=tuple(self.states[i] for i in idx),
            population=self.population[idx],
            static=self.static[idx],
            dynamic=self.dynamic[idx],
            outbreak=self.outbreak[idx],
            flags=tuple(f for f in self.flags if f.fips in keep),
        )

    def exclude_states(self, states: Iterable[str]) -> "FeaturePanel":
        drop = {s.upper() for s in states}
        return self.select([i for i, s in enumerate(self.states) if s not in drop])

    def slice_days(self, start: int, stop: int) -> "FeaturePanel":
        """Restrict to day indices ``[start, stop)``."""
        dates = self.dates[start:stop]
        if len(dates) == 0:
            raise DataError("empty date slice")
        keep = {str(d) for d in dates}
        return replace(
            self,
            dates=dates,
            dynamic=self.dynamic[:, start:stop],
            outbreak=self.outbreak[:, start:stop],
            flags=tuple(f for f in self.flags if f.block == "static" or f.date in keep),
        )

    def flag_mask(self, block: str) -> np.ndarray:
        """Boolean mask of flagged cells in one block."""
        names = {"static": self.static_names, "dynamic": self.dynamic_names, "outbreak": OUTBREAK_FIELDS}[block]
        shape = getattr(self, block).shape
        mask = np.zeros(shape, dtype=bool)
        col = {n: j for j, n in enumerate(names)}
        row = {f: i for i, f in enumerate(self.fips)}
        for f in self.flags:
            if f.block != block:
                continue
            if block == "static":
                mask[row[f.fips], col[f.feature]] = True
            else:
                mask[row[f.fips], self.date_index(f.date), col[f.feature]] = True
        return mask

    def equals(self, other: "FeaturePanel") -> bool:
        return (
            self.fips == other.fips
            and self.states == other.states
            and self.static_names == other.static_names
            and self.dynamic_names == other.dynamic_names
            and self.schema == other.schema
            and self.flags == other.flags
            and np.array_equal(self.dates, other.dates)
            and np.array_equal(self.population, other.population)
            and np.array_equal(self.static, other.static)
            and np.array_equal(self.dynamic, other.dynamic)
            and np.array_equal(self.outbreak, other.outbreak)
        )

    # ---- conversion back to raw tables (for re-building / CLI fixtures) ----

    def to_tables(self) -> tuple[RawTable, list[RawTable], list[RawTable]]:
        info = {f.name: f for f in self.schema}
        dates = [d.item() for d in self.dates]
        C, T = self.n_counties, self.n_days
        ob = pd.DataFrame(
            {
                "fips": np.repeat(self.fips, T),
                "state": np.repeat(self.states, T),
                "date": dates * C,
                "confirmed": self.outbreak[:, :, 0].ravel(),
                "deaths": self.outbreak[:, :, 1].ravel(),
                "recovered": self.outbreak[:, :, 2].ravel(),
                "population": np.repeat(self.population.astype(float), T),
            }
        )
        ob_schema = DatasetSchema(
            "outbreak",
            "outbreak",
            (
                ColumnSpec("fips", "fips"),
                ColumnSpec("state", "state"),
                ColumnSpec("date", "date"),
                ColumnSpec("confirmed", "float", "count"),
                ColumnSpec("deaths", "float", "count"),
                ColumnSpec("recovered", "float", "count"),
                ColumnSpec("population", "int", "persons"),
            ),
        )

        def spec_for(name):
            fi = info.get(name, FeatureInfo(name, ""))
            return ColumnSpec(name, fi.type if fi.type in COLUMN_TYPES else "float", fi.unit,
                              "fraction" if fi.convention == "fraction" else None)

        st = pd.DataFrame({"fips": list(self.fips)})
        for j, n in enumerate(self.static_names):
            st[n] = self.static[:, j]
        st_schema = DatasetSchema(
            "static", "static", (ColumnSpec("fips", "fips"),) + tuple(spec_for(n) for n in self.static_names)
        )
        tables_dyn = []
        if self.dynamic_names:
            dy = pd.DataFrame({"fips": np.repeat(self.fips, T), "date": dates * C})
            for j, n in enumerate(self.dynamic_names):
                dy[n] = self.dynamic[:, :, j].ravel()
            derived = _mobility_columns(self.dynamic_names, info) is not None
            dy_schema = DatasetSchema(
                "dynamic",
                "dynamic",
                (ColumnSpec("fips", "fips"), ColumnSpec("date", "date"))
                + tuple(spec_for(n) for n in self.dynamic_names if not (derived and n == "compliance")),
            )
            dy = dy[[c.name for c in dy_schema.columns]]
            tables_dyn.append(RawTable(dy_schema, dy))
        return RawTable(ob_schema, ob), [RawTable(st_schema, st)], tables_dyn

    # ---- directory serialization ----

    def save(self, directory: str | os.PathLike) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        C, T = self.n_counties, self.n_days
        dates = [str(d) for d in self.dates]
        _write_csv(
            directory / "static.csv",
            ["fips", "state", "population", *self.static_names],
            ([self.fips[i], self.states[i], int(self.population[i]), *self.static[i]] for i in range(C)),
        )
        _write_csv(
            directory / "dynamic.csv",
            ["fips", "date", *self.dynamic_names],
            ([self.fips[i], dates[t], *self.dynamic[i, t]] for i in range(C) for t in range(T)),
        )
        _write_csv(
            directory / "outbreak.csv",
            ["fips", "date", *OUTBREAK_FIELDS],
            ([self.fips[i], dates[t], *self.outbreak[i, t]] for i in range(C) for t in range(T)),
        )
        _write_csv(
            directory / "schema.csv",
            ["name", "block", "type", "unit", "convention"],
            ([f.name, f.block, f.type, f.unit, f.convention] for f in self.schema),
        )
        _write_csv(
            directory / "flags.csv",
            ["block", "fips", "date", "feature", "reason"],
            ([f.block, f.fips, f.date, f.feature, f.reason] for f in self.flags),
        )
        return directory

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "FeaturePanel":
        directory = Path(directory)
        for name in PANEL_FILES:
            if not (directory / name).is_file():
                raise DataError(f"panel file missing: {directory / name}")
        st_head, st_rows = _read_csv(directory / "static.csv")
        fips = tuple(r[0] for r in st_rows)
        states = tuple(r[1] for r in st_rows)
        population = [int(r[2]) for r in st_rows]
        static = np.array([[float(v) for v in r[3:]] for r in st_rows], dtype=float).reshape(len(st_rows), len(st_head) - 3)
        dy_head, dy_rows = _read_csv(directory / "dynamic.csv")
        ob_head, ob_rows = _read_csv(directory / "outbreak.csv")
        C = len(fips)
        T = len(ob_rows) // C if C else 0
        dates = np.array([r[1] for r in ob_rows[:T]], dtype="datetime64[D]")
        outbreak = np.array([[float(v) for v in r[2:]] for r in ob_rows], dtype=float).reshape(C, T, 3)
        D = len(dy_head) - 2
        dynamic = np.array([[float(v) for v in r[2:]] for r in dy_rows], dtype=float).reshape(C, T, D)
        _, sc_rows = _read_csv(directory / "schema.csv")
        _, fl_rows = _read_csv(directory / "flags.csv")
        return cls(
            fips=fips,
            states=states,
            dates=dates,
            population=np.array(population, dtype=np.int64),
            static_names=tuple(st_head[3:]),
            static=static,
            dynamic_names=tuple(dy_head[2:]),
            dynamic=dynamic,
            outbreak=outbreak,
            schema=tuple(FeatureInfo(*r) for r in sc_rows),
            flags=tuple(Flag(*r) for r in fl_rows),
        )


PANEL_FILES = ("static.csv", "dynamic.csv", "outbreak.csv", "schema.csv", "flags.csv")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _read_csv(path: Path):
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _mobility_columns(names: Sequence[str], info: dict) -> list[str] | None:
    cols = [n for n in names if info.get(n) is not None and info[n].type == "mobility"]
    return cols if len(cols) == 6 else None


# --------------------------------------------------------------------------
# build_panel
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PanelConfig:
    max_gap_days: int = 3
    on_long_gap: str = "error"  # or "truncate"
    population_column: str = "population"
    start: str | None = None
    end: str | None = None

    def __post_init__(self):
        if self.max_gap_days < 0:
            raise DataError("max_gap_days must be >= 0")
        if self.on_long_gap not in ("error", "truncate"):
            raise DataError("on_long_gap must be 'error' or 'truncate'")


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """[start, stop) spans where mask is True."""
    out, i, n = [], 0, len(mask)
    while i < n:
        if mask[i]:
            j = i
            while j < n and mask[j]:
                j += 1
            out.append((i, j))
            i = j
        else:
            i += 1
    return out


def _fill_gaps(values: np.ndarray, max_gap: int):
    """Linear interpolation over interior NaN runs, nearest-value fill at the
    edges. Returns (filled, {index: reason}, unbridgeable spans)."""
    v = np.array(values, dtype=float)
    miss = np.isnan(v)
    reasons, bad = {}, []
    n = len(v)
    if miss.all():
        return v, reasons, [(0, n)]
    for a, b in _runs(miss):
        if b - a > max_gap:
            bad.append((a, b))
            continue
        if a == 0:
            v[a:b] = v[b]
            reasons.update({i: "edge_fill" for i in range(a, b)})
        elif b == n:
            v[a:b] = v[a - 1]
            reasons.update({i: "edge_fill" for i in range(a, b)})
        else:
            lo, hi = v[a - 1], v[b]
            for i in range(a, b):
                v[i] = lo + (hi - lo) * (i - a + 1) / (b - a + 1)
                reasons[i] = "interpolated"
    return v, reasons, bad


def _rolling_max(values: np.ndarray):
    cleaned = np.maximum.accumulate(values)
    return cleaned, np.flatnonzero(cleaned != values)


def _county_frames(table: RawTable, value_cols: list[str]) -> dict[str, pd.DataFrame]:
    fips_col = table.schema.key("fips")
    date_col = table.schema.key("date")
    df = table.frame
    if df.duplicated([fips_col, date_col]).any():
        logger.warning("%s: duplicate (fips, date) rows, keeping last", table.schema.name)
        df = df.drop_duplicates([fips_col, date_col], keep="last")
    out = {}
    for f, g in df.groupby(fips_col, sort=True):
        idx = pd.DatetimeIndex(pd.to_datetime(g[date_col]))
        out[f] = pd.DataFrame(g[value_cols].to_numpy(dtype=float), index=idx, columns=value_cols).sort_index()
    return out


def _feature_columns(schema: DatasetSchema, exclude: Iterable[str] = ()) -> list[ColumnSpec]:
    ex = set(exclude)
    return [c for c in schema.columns if c.numeric and c.name not in ex]


def build_panel(
    outbreak: RawTable,
    static: Sequence[RawTable],
    dynamic: Sequence[RawTable] = (),
    config: PanelConfig | None = None,
) -> FeaturePanel:
    """Join raw tables into a clean :class:`FeaturePanel`.

    Counties are inner-joined on FIPS across the outbreak table and every
    static/dynamic table; dynamic tables additionally align on date. Missing
    static cells take the state median (national median if the whole state is
    missing); cumulative outbreak counts are cleaned with a running maximum;
    dynamic and outbreak gaps up to ``max_gap_days`` are linearly
    interpolated. Every altered cell is recorded in ``flags``.
    """
    config = config or PanelConfig()
    if outbreak is None or outbreak.schema.kind != "outbreak":
        raise DataError("an outbreak table is required")
    if not static:
        raise DataError("at least one static table is required")
    osch = outbreak.schema
    o_fips, o_state = osch.key("fips"), osch.key("state")
    field_cols = {}
    for fname in OUTBREAK_FIELDS:
        if fname in [c.name for c in osch.columns]:
            field_cols[fname] = fname
    if "confirmed" not in field_cols and "deaths" not in field_cols:
        raise SchemaError("outbreak table needs confirmed and/or deaths columns")

    ob_frames = _county_frames(outbreak, list(field_cols))
    states = {}
    if o_state:
        for f, s in outbreak.frame[[o_fips, o_state]].itertuples(index=False):
            states.setdefault(f, s)

    population = {}
    pop_col = config.population_column
    if pop_col in outbreak.frame.columns:
        for f, g in outbreak.frame.groupby(o_fips, sort=True):
            vals = g[pop_col].dropna()
            if len(vals):
                population[f] = float(vals.iloc[-1])

    # ---- static block ----
    static_frames, static_info = [], []
    taken = set()
    for tbl in static:
        if tbl.schema.kind != "static":
            raise DataError(f"table {tbl.schema.name!r} is not static")
        fcol = tbl.schema.key("fips")
        df = tbl.frame.drop_duplicates(fcol, keep="last").set_index(fcol).sort_index()
        scol = tbl.schema.key("state")
        if scol:
            for f, s in df[scol].items():
                states.setdefault(f, s)
        cols = _feature_columns(tbl.schema)
        if pop_col in [c.name for c in cols]:
            for f, v in df[pop_col].items():
                if not np.isnan(v):
                    population.setdefault(f, float(v))
            cols = [c for c in cols if c.name != pop_col]
        renamed = {}
        for c in cols:
            name = c.name if c.name not in taken else f"{tbl.schema.name}.{c.name}"
            if name in taken:
                raise SchemaError(f"duplicate static feature {name!r}")
            taken.add(name)
            renamed[c.name] = name
            static_info.append(FeatureInfo(name, "static", c.type, c.unit, "fraction" if c.scale else ""))
        static_frames.append(df[list(renamed)].rename(columns=renamed).astype(float))

    # ---- dynamic block ----
    dyn_frames, dyn_info = [], []
    for tbl in dynamic:
        if tbl.schema.kind != "dynamic":
            raise DataError(f"table {tbl.schema.name!r} is not dynamic")
        cols = _feature_columns(tbl.schema)
        mob = [c.name for c in cols if c.type == "mobility"]
        if mob and len(mob) != 6:
            raise SchemaError(f"{tbl.schema.name}: expected six mobility columns, found {len(mob)}")
        infos = [FeatureInfo(c.name, "dynamic", c.type, c.unit, "fraction" if c.scale else "") for c in cols]
        if mob:
            # derived compliance sits right after the last mobility column
            at = max(i for i, c in enumerate(cols) if c.type == "mobility") + 1
            infos.insert(at, FeatureInfo("compliance", "dynamic", "float", "score", ""))
        for fi in infos:
            if fi.name in taken:
                raise SchemaError(f"duplicate feature {fi.name!r} in {tbl.schema.name}")
            taken.add(fi.name)
        dyn_info.extend(infos)
        frames = _county_frames(tbl, [c.name for c in cols])
        dyn_frames.append((frames, [fi.name for fi in infos], mob))

    # ---- county join ----
    counties = set(ob_frames)
    for df in static_frames:
        counties &= set(df.index)
    for frames, _, _ in dyn_frames:
        counties &= set(frames)
    dropped = set(ob_frames) - counties
    if dropped:
        logger.info("dropping %d counties absent from a required table", len(dropped))
    no_pop = {f for f in counties if not population.get(f, 0) > 0}
    if no_pop:
        logger.info("dropping %d counties without population", len(no_pop))
    no_state = {f for f in counties - no_pop if f not in states}
    if no_state:
        logger.info("dropping %d counties without a state code", len(no_state))
    fips = sorted(counties - no_pop - no_state)
    if not fips:
        raise DataError("join produced no counties")

    # ---- date range ----
    start = max(ob_frames[f].index.min() for f in fips)
    end = min(ob_frames[f].index.max() for f in fips)
    if config.start:
        start = max(start, pd.Timestamp(config.start))
    if config.end:
        end = min(end, pd.Timestamp(config.end))
    if start > end:
        raise DataError("outbreak series share no common dates")

    while True:
        dates = pd.date_range(start, end, freq="D")
        blocks, flags, bad = _assemble(fips, dates, ob_frames, field_cols, dyn_frames, config.max_gap_days)
        if not bad:
            break
        if config.on_long_gap == "error":
            f, a, b, what = bad[0]
            raise DataError(
                f"county {f}: {what} gap of {b - a} days from {dates[a].date()} exceeds max_gap_days={config.max_gap_days}"
            )
        # move the range past the latest leading/interior gap, or before a trailing one
        T = len(dates)
        trailing = [a for _, a, b, _ in bad if b == T and a > 0]
        leading = [b for _, a, b, _ in bad if not (b == T and a > 0)]
        if leading:
            start = dates[max(leading)] if max(leading) < T else end + pd.Timedelta(days=1)
        else:
            end = dates[min(trailing) - 1]
        if start > end:
            raise DataError("gap truncation left an empty date range")
        logger.info("truncated panel range to %s..%s", start.date(), end.date())

    outbreak_arr, dyn_arr = blocks

    # ---- static imputation ----
    S = sum(df.shape[1] for df in static_frames)
    static_arr = np.empty((len(fips), S))
    col = 0
    for df in static_frames:
        static_arr[:, col: col + df.shape[1]] = df.loc[fips].to_numpy(dtype=float)
        col += df.shape[1]
    state_list = [states[f] for f in fips]
    keep_cols = []
    for j in range(S):
        colv = static_arr[:, j]
        miss = np.isnan(colv)
        if miss.all():
            logger.warning("static feature %s has no values; dropped", static_info[j].name)
            continue
        keep_cols.append(j)
        if not miss.any():
            continue
        national = float(np.median(colv[~miss]))
        for i in np.flatnonzero(miss):
            peers = [colv[k] for k in range(len(fips)) if state_list[k] == state_list[i] and not miss[k]]
            if peers:
                static_arr[i, j] = float(np.median(peers))
                reason = "state_median"
            else:
                static_arr[i, j] = national
                reason = "national_median"
            flags.append(Flag("static", fips[i], "", static_info[j].name, reason))
    static_info = [static_info[j] for j in keep_cols]
    kept_names = {fi.name for fi in static_info}
    flags = [f for f in flags if f.block != "static" or f.feature in kept_names]
    static_arr = static_arr[:, keep_cols]

    schema = tuple(static_info) + tuple(dyn_info) + tuple(
        FeatureInfo(n, "outbreak", "float", "count", "") for n in OUTBREAK_FIELDS
    )
    return FeaturePanel(
        fips=tuple(fips),
        states=tuple(state_list),
        dates=dates.values.astype("datetime64[D]"),
        population=np.array([int(round(population[f])) for f in fips], dtype=np.int64),
        static_names=tuple(fi.name for fi in static_info),
        static=static_arr,
        dynamic_names=tuple(fi.name for fi in dyn_info),
        dynamic=dyn_arr,
        outbreak=outbreak_arr,
        schema=schema,
        flags=tuple(sorted(flags)),
    )


def _assemble(fips, dates, ob_frames, field_cols, dyn_frames, max_gap):
    C, T = len(fips), len(dates)
    iso = [str(d.date()) for d in dates]
    flags, bad = [], []
    outbreak = np.zeros((C, T, 3))
    for i, f in enumerate(fips):
        frame = ob_frames[f].reindex(dates)
        for k, fname in enumerate(OUTBREAK_FIELDS):
            if fname not in field_cols:
                continue
            filled, reasons, gaps = _fill_gaps(frame[fname].to_numpy(), max_gap)
            bad.extend((f, a, b, f"outbreak {fname}") for a, b in gaps)
            if gaps:
                continue
            cleaned, changed = _rolling_max(filled)
            for t, why in reasons.items():
                flags.append(Flag("outbreak", f, iso[t], fname, why))
            for t in changed:
                if t not in reasons:
                    flags.append(Flag("outbreak", f, iso[t], fname, "rolling_max"))
            if np.any(cleaned < 0):
                raise DataError(f"county {f}: negative cumulative {fname}")
            outbreak[i, :, k] = cleaned
    D = sum(len(names) for _, names, _ in dyn_frames)
    dynamic = np.zeros((C, T, D))
    col = 0
    for frames, names, mob in dyn_frames:
        for i, f in enumerate(fips):
            frame = frames[f].reindex(dates)
            for j, n in enumerate(names):
                if mob and n == "compliance":
                    continue
                filled, reasons, gaps = _fill_gaps(frame[n].to_numpy(), max_gap)
                bad.extend((f, a, b, f"dynamic {n}") for a, b in gaps)
                dynamic[i, :, col + j] = filled
                for t, why in reasons.items():
                    flags.append(Flag("dynamic", f, iso[t], n, why))
            if mob:
                mi = [col + names.index(m) for m in mob]
                dynamic[i, :, col + names.index("compliance")] = _compliance_rows(dynamic[i][:, mi])
        col += len(names)
    return (outbreak, dynamic), flags, bad


# --------------------------------------------------------------------------
# synthetic panels
# --------------------------------------------------------------------------

_STATE_FIPS = (
    ("CA", "06"), ("TX", "48"), ("NY", "36"), ("FL", "12"), ("WA", "53"),
    ("IL", "17"), ("PA", "42"), ("OH", "39"), ("GA", "13"), ("NC", "37"),
)


@dataclass(frozen=True)
class SynthSpec:
    """Dimensions and coupling of a synthetic panel.

    ``beta`` weights the county's first static feature against independent
    noise in the log growth rate; ``noise`` is the log-scale day-to-day
    multiplicative noise on expected daily counts.
    """

    n_counties: int = 30
    n_days: int = 120
    n_static: int = 8
    beta: float = 0.9
    noise: float = 0.1
    n_states: int = 5
    start_date: str = "2020-03-01"
    rate_mid: float = 0.07
    rate_spread: float = 0.35
    pop_range: tuple[int, int] = (200_000, 2_000_000)
    attack_rate: float = 0.06
    attack_spread: float = 0.5
    fatality: float = 0.03
    midpoint_range: tuple[float, float] = (0.55, 0.85)

    def __post_init__(self):
        for name in ("n_counties", "n_days", "n_static", "n_states"):
            if getattr(self, name) <= 0:
                raise DataError(f"SynthSpec.{name} must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise DataError("SynthSpec.beta must lie in [0, 1]")
        if self.noise < 0:
            raise DataError("SynthSpec.noise must be non-negative")
        lo, hi = self.midpoint_range
        if not 0.0 <= lo <= hi:
            raise DataError("SynthSpec.midpoint_range must satisfy 0 <= lo <= hi")
        if self.n_states > len(_STATE_FIPS):
            raise DataError(f"at most {len(_STATE_FIPS)} synthetic states")


def _latent(spec: SynthSpec, seed: int):
    rng = np.random.default_rng(seed)
    static = rng.standard_normal((spec.n_counties, spec.n_static))
    eps = rng.standard_normal(spec.n_counties)
    z = spec.beta * static[:, 0] + math.sqrt(1.0 - spec.beta**2) * eps
    return rng, static, z


def synthetic_rates(spec: SynthSpec, seed: int):
    """Static matrix and per-county growth rates exactly as the generator draws them."""
    rng, static, z = _latent(spec, seed)
    return rng, static, spec.rate_mid * np.exp(spec.rate_spread * z)


def generate_synthetic_panel(spec: SynthSpec, seed: int) -> FeaturePanel:
    """Seeded panel with logistic outbreak curves.

    Each county's growth rate is ``rate_mid * exp(rate_spread * z)`` with
    ``z = beta * static[:, 0] + sqrt(1 - beta**2) * noise``; the same ``z``
    scales the final attack size by ``exp(attack_spread * z)``. Expected daily
    cases follow the logistic derivative; observed counts are Poisson draws
    around a log-normally perturbed expectation, so cumulative series are
    monotone by construction.
    """
    rng, static, z = _latent(spec, seed)
    rate = spec.rate_mid * np.exp(spec.rate_spread * z)
    C, T = spec.n_counties, spec.n_days
    lo, hi = spec.pop_range
    population = rng.integers(lo, hi + 1, size=C)
    midpoint = rng.uniform(*spec.midpoint_range, size=C) * T
    attack = spec.attack_rate * np.exp(spec.attack_spread * z + 0.2 * rng.standard_normal(C))
    t = np.arange(T, dtype=float)

    def logistic(k, r, m):
        return k / (1.0 + np.exp(-r * (t - m)))

    cases_cum = np.zeros((C, T))
    deaths_cum = np.zeros((C, T))
    recovered_cum = np.zeros((C, T))
    hosp = np.zeros((C, T))
    for i in range(C):
        k = attack[i] * population[i]
        curve = logistic(k, rate[i], midpoint[i])
        expected = np.diff(curve, prepend=curve[0] - (curve[1] - curve[0]))
        shock = np.exp(spec.noise * rng.standard_normal(T) - 0.5 * spec.noise**2)
        lam = np.maximum(expected, 0.0) * shock
        daily_cases = rng.poisson(lam)
        daily_deaths = rng.poisson(spec.fatality * lam)
        cases_cum[i] = np.cumsum(daily_cases)
        deaths_cum[i] = np.cumsum(daily_deaths)
        lagged = np.concatenate([np.zeros(14), cases_cum[i, :-14]]) if T > 14 else np.zeros(T)
        recovered_cum[i] = np.floor((1.0 - spec.fatality) * lagged)
        hosp[i] = rng.poisson(0.05 * lam)

    # national stay-at-home pattern, county-specific strength
    policy = 1.0 / (1.0 + np.exp(-(t - 0.2 * T) / 4.0)) * (1.0 - 0.4 * t / T)
    strength = rng.uniform(0.5, 1.0, size=C)
    direction = np.array([-1.0, -0.5, -0.2, -1.2, -1.0, 0.4])
    mobility = (
        40.0 * strength[:, None, None] * policy[None, :, None] * direction[None, None, :]
        + 5.0 * rng.standard_normal((C, T, 6))
    )
    influenza = np.clip(8.0 * np.exp(-t / 25.0)[None, :] + 0.5 * rng.standard_normal((C, T)), 0.0, 10.0)
    dynamic = np.concatenate(
        [mobility, _compliance_rows(mobility)[:, :, None], influenza[:, :, None], hosp[:, :, None]], axis=2
    )

    n_st = spec.n_states
    codes = [_STATE_FIPS[i % n_st] for i in range(C)]
    counter: dict[str, int] = {}
    fips = []
    for st, sf in codes:
        counter[st] = counter.get(st, 0) + 1
        fips.append(f"{sf}{2 * counter[st] - 1:03d}")
    order = np.argsort(fips, kind="stable")

    static_names = tuple(f"static_{j:02d}" for j in range(spec.n_static))
    dynamic_names = MOBILITY_CATEGORIES + ("compliance", "influenza_activity", "covid_hospitalizations")
    schema = (
        tuple(FeatureInfo(n, "static", "float", "z", "") for n in static_names)
        + tuple(FeatureInfo(n, "dynamic", "mobility", "percent_change", "") for n in MOBILITY_CATEGORIES)
        + (
            FeatureInfo("compliance", "dynamic", "float", "score", ""),
            FeatureInfo("influenza_activity", "dynamic", "float", "level", ""),
            FeatureInfo("covid_hospitalizations", "dynamic", "float", "count", ""),
        )
        + tuple(FeatureInfo(n, "outbreak", "float", "count", "") for n in OUTBREAK_FIELDS)
    )
    start = np.datetime64(spec.start_date, "D")
    return FeaturePanel(
        fips=tuple(fips[i] for i in order),
        states=tuple(codes[i][0] for i in order),
        dates=start + np.arange(T),
        population=population[order],
        static_names=static_names,
        static=static[order],
        dynamic_names=dynamic_names,
        dynamic=dynamic[order],
        outbreak=np.stack([cases_cum, deaths_cum, recovered_cum], axis=2)[order],
        schema=schema,
    )


def write_raw_tables(panel: FeaturePanel, directory: str | os.PathLike) -> dict[str, tuple[Path, Path]]:
    """Export a panel as snapshot CSVs plus schema descriptors.

    Returns ``{kind: (csv_path, schema_path)}``; static/dynamic kinds may be
    absent when the panel has no such features.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ob, sts, dys = panel.to_tables()
    out = {}
    for kind, tbl in [("outbreak", ob), *(("static", t) for t in sts), *(("dynamic", t) for t in dys)]:
        csv_path = directory / f"{kind}.csv"
        schema_path = directory / f"{kind}.schema.json"
        frame = tbl.frame.copy()
        for c in tbl.schema.columns:
            if c.type == "date":
                frame[c.name] = [str(d) for d in frame[c.name]]
        _write_csv(csv_path, list(frame.columns), frame.itertuples(index=False, name=None))
        tbl.schema.save(schema_path)
        out[kind] = (csv_path, schema_path)
    return out
