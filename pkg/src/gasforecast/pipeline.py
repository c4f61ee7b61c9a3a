"""CSV ingestion, cleaning, scaling, reshaping, splitting and synthetic data.

Cleaning runs in a fixed order: rows with missing cells are dropped, then rows
whose target falls outside the box-plot fences, then rows holding any value
more than ``z_threshold`` column standard deviations from its column mean.
Row indices in reports always refer to positions in the original input.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .rng import SeededRng
from .tensor import Tensor

FEATURES = (
    "gasoline_price_usd",
    "free_gasoline_price_usd",
    "inflation_rate_pct",
    "commodity_price_index_pct",
    "population_growth_rate_pct",
    "population_total",
    "road_distance_km",
    "gdp_per_capita_usd",
    "vehicles_count",
)
TARGET = "gasoline_consumption_ml_day"
COLUMNS = ("date", *FEATURES, TARGET)

_DATE_RE = re.compile(r"^(\d{4})-(0[1-9]|1[0-2])$")


class SchemaError(ValueError):
    """CSV header does not match the canonical columns."""

    def __init__(self, missing: Sequence[str], unknown: Sequence[str]):
        self.missing = list(missing)
        self.unknown = list(unknown)
        super().__init__(f"CSV columns do not match schema: missing {self.missing}, unknown {self.unknown}")


@dataclass(frozen=True)
class RawRecord:
    date: str | None
    gasoline_price_usd: float | None
    free_gasoline_price_usd: float | None
    inflation_rate_pct: float | None
    commodity_price_index_pct: float | None
    population_growth_rate_pct: float | None
    population_total: float | None
    road_distance_km: float | None
    gdp_per_capita_usd: float | None
    vehicles_count: float | None
    gasoline_consumption_ml_day: float | None = None

    @property
    def year(self) -> int:
        return int(self.date[:4])

    def features(self) -> list[float | None]:
        return [getattr(self, name) for name in FEATURES]

    def is_complete(self, require_target: bool = True) -> bool:
        if self.date is None or any(v is None for v in self.features()):
            return False
        return self.gasoline_consumption_ml_day is not None or not require_target


def _parse_number(cell: str) -> float | None:
    try:
        value = float(cell.strip())
    except (ValueError, AttributeError):
        return None
    return value if math.isfinite(value) else None


def _parse_date(cell: str) -> str | None:
    cell = (cell or "").strip()
    return cell if _DATE_RE.match(cell) else None


def parse_csv_text(text: str) -> list[RawRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError(COLUMNS, [])
    missing = [c for c in COLUMNS if c not in header]
    unknown = [c for c in header if c not in COLUMNS]
    if missing or unknown:
        raise SchemaError(missing, unknown)
    pos = {name: header.index(name) for name in COLUMNS}
    out = []
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        row = row + [""] * (len(header) - len(row))
        values = {name: _parse_number(row[pos[name]]) for name in (*FEATURES, TARGET)}
        out.append(RawRecord(date=_parse_date(row[pos["date"]]), **values))
    return out


def load_csv(path) -> list[RawRecord]:
    """Read canonical records; unparsable cells become ``None``."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_csv_text(text)


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def records_to_csv(records: Sequence[RawRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for rec in records:
        writer.writerow([rec.date or ""] + [_fmt(getattr(rec, name)) for name in (*FEATURES, TARGET)])
    return buf.getvalue()


def write_csv(records: Sequence[RawRecord], path) -> None:
    Path(path).write_text(records_to_csv(records), encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# cleaning

@dataclass
class CleaningReport:
    rows_in: int = 0
    dropped_missing: list[int] = field(default_factory=list)
    dropped_boxplot: list[tuple[int, float]] = field(default_factory=list)
    dropped_zscore: list[tuple[int, str, float]] = field(default_factory=list)
    rows_out: int = 0
    bounds: dict | None = None
    notes: list[str] = field(default_factory=list)

    def dropped_rows(self) -> set[int]:
        return (set(self.dropped_missing) | {r for r, _ in self.dropped_boxplot}
                | {r for r, _, _ in self.dropped_zscore})

    def balanced(self) -> bool:
        return self.rows_out == self.rows_in - len(self.dropped_rows())

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["dropped_boxplot"] = [{"row": r, "value": v} for r, v in self.dropped_boxplot]
        doc["dropped_zscore"] = [{"row": r, "column": c, "z": z} for r, c, z in self.dropped_zscore]
        return doc


def drop_missing(records: Sequence[RawRecord], require_target: bool = True,
                 row_ids: Sequence[int] | None = None):
    """Drop incomplete rows. Returns ``(records, row_ids, report)``."""
    row_ids = list(range(len(records))) if row_ids is None else list(row_ids)
    report = CleaningReport(rows_in=len(records))
    kept, kept_ids = [], []
    for rid, rec in zip(row_ids, records):
        if rec.is_complete(require_target):
            kept.append(rec)
            kept_ids.append(rid)
        else:
            report.dropped_missing.append(rid)
    report.rows_out = len(kept)
    if records and not kept:
        report.notes.append("all rows dropped for missing values")
    return kept, kept_ids, report


class BoxplotBounds(NamedTuple):
    q1: float
    median: float
    q3: float
    lower: float
    upper: float


def boxplot_bounds(values) -> BoxplotBounds:
    """Quartiles by linear interpolation between order statistics and 1.5 IQR fences."""
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if vals.size < 4:
        raise ValueError(f"boxplot_bounds needs at least 4 values, got {vals.size}")
    q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75], method="linear")
    iqr = q3 - q1
    return BoxplotBounds(float(q1), float(med), float(q3), float(q1 - 1.5 * iqr), float(q3 + 1.5 * iqr))


def zscore_outliers(data, columns: Sequence[str], threshold: float = 3.0):
    """Flag rows holding any ``|z| > threshold``.

    ``z`` uses each column's own mean and population standard deviation,
    computed once before anything is removed. Columns with zero spread are
    skipped. Returns ``(keep_mask, flagged, skipped_columns)`` where
    ``flagged`` holds ``(row_position, column, z)`` triples.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    keep = np.ones(n, dtype=bool)
    flagged: list[tuple[int, str, float]] = []
    skipped: list[str] = []
    if n == 0:
        return keep, flagged, skipped
    for j, name in enumerate(columns):
        col = data[:, j]
        present = ~np.isnan(col)
        if not present.any():
            continue
        mu = col[present].mean()
        sd = col[present].std()
        if sd == 0.0:
            skipped.append(name)
            continue
        z = np.where(present, (col - mu) / sd, 0.0)
        for i in np.flatnonzero(np.abs(z) > threshold):
            flagged.append((int(i), name, float(z[i])))
            keep[i] = False
    flagged.sort()
    return keep, flagged, skipped


def records_matrix(records: Sequence[RawRecord], columns: Sequence[str] = (*FEATURES, TARGET)) -> np.ndarray:
    """Values as an ``(n, len(columns))`` array; missing cells become NaN."""
    out = np.full((len(records), len(columns)), np.nan)
    for i, rec in enumerate(records):
        for j, name in enumerate(columns):
            v = getattr(rec, name)
            if v is not None:
                out[i, j] = v
    return out


def clean(records: Sequence[RawRecord], require_target: bool = True,
          z_threshold: float = 3.0) -> tuple[list[RawRecord], CleaningReport]:
    """Missing-row drop, then box-plot fences on the target, then z-score filter."""
    report = CleaningReport(rows_in=len(records))
    kept, ids, frag = drop_missing(records, require_target)
    report.dropped_missing = frag.dropped_missing
    report.notes.extend(frag.notes)

    targets = np.array([r.gasoline_consumption_ml_day for r in kept
                        if r.gasoline_consumption_ml_day is not None], dtype=np.float64)
    if targets.size >= 4:
        b = boxplot_bounds(targets)
        report.bounds = b._asdict()
        nk, nid = [], []
        for rid, rec in zip(ids, kept):
            y = rec.gasoline_consumption_ml_day
            if y is not None and not (b.lower <= y <= b.upper):
                report.dropped_boxplot.append((rid, y))
            else:
                nk.append(rec)
                nid.append(rid)
        kept, ids = nk, nid
    elif kept:
        report.notes.append("box-plot filter skipped: fewer than 4 target values")

    columns = (*FEATURES, TARGET)
    keep, flagged, skipped = zscore_outliers(records_matrix(kept, columns), columns, z_threshold)
    report.dropped_zscore = [(ids[i], col, z) for i, col, z in flagged]
    for name in skipped:
        report.notes.append(f"z-score filter skipped constant column {name}")
    kept = [rec for rec, k in zip(kept, keep) if k]
    report.rows_out = len(kept)
    return kept, report


# ---------------------------------------------------------------------------
# scaling

@dataclass(frozen=True)
class ScalerParams:
    """Per-column statistics: ``(mean, std)`` for standard, ``(min, max)`` for minmax."""

    mode: str
    columns: tuple[str, ...]
    stats: tuple[tuple[float, float], ...]

    def stat(self, column: str) -> tuple[float, float]:
        try:
            return self.stats[self.columns.index(column)]
        except ValueError:
            raise KeyError(f"column {column!r} was not fitted by this scaler") from None

    def to_dict(self) -> dict:
        return {"mode": self.mode, "columns": list(self.columns), "stats": [list(s) for s in self.stats]}

    @classmethod
    def from_dict(cls, doc: dict) -> "ScalerParams":
        return cls(doc["mode"], tuple(doc["columns"]), tuple((float(a), float(b)) for a, b in doc["stats"]))


class ScalingError(ValueError):
    pass


SCALING_MODES = ("minmax", "standard")


def fit_scaler(data, columns: Sequence[str], mode: str = "minmax") -> ScalerParams:
    data = np.asarray(data, dtype=np.float64)
    if mode not in SCALING_MODES:
        raise ValueError(f"unknown scaling mode {mode!r}; expected one of {SCALING_MODES}")
    if data.ndim != 2 or data.shape[1] != len(columns) or data.shape[0] == 0:
        raise ScalingError(f"need a non-empty (n, {len(columns)}) array, got {data.shape}")
    stats = []
    for j, name in enumerate(columns):
        col = data[:, j]
        if mode == "standard":
            a, b = float(col.mean()), float(col.std())
            if b == 0.0:
                raise ScalingError(f"column {name} has zero standard deviation")
        else:
            a, b = float(col.min()), float(col.max())
            if b == a:
                raise ScalingError(f"column {name} has zero range")
        stats.append((a, b))
    return ScalerParams(mode, tuple(columns), tuple(stats))


def apply_scaler(data, params: ScalerParams, columns: Sequence[str] | None = None) -> np.ndarray:
    columns = params.columns if columns is None else tuple(columns)
    data = np.asarray(data, dtype=np.float64)
    out = np.empty_like(data)
    for j, name in enumerate(columns):
        a, b = params.stat(name)
        out[..., j] = (data[..., j] - a) / b if params.mode == "standard" else (data[..., j] - a) / (b - a)
    return out


def inverse_scale(values, params: ScalerParams, column: str) -> np.ndarray:
    a, b = params.stat(column)
    values = np.asarray(values, dtype=np.float64)
    return values * b + a if params.mode == "standard" else values * (b - a) + a


def scale_column(values, params: ScalerParams, column: str) -> np.ndarray:
    a, b = params.stat(column)
    values = np.asarray(values, dtype=np.float64)
    return (values - a) / b if params.mode == "standard" else (values - a) / (b - a)


# ---------------------------------------------------------------------------
# tensors and splitting

def reshape_3d(X) -> Tensor:
    """``(n, f)`` -> ``(n, 1, f)``; one time step per sample."""
    X = X if isinstance(X, Tensor) else Tensor(X)
    if X.ndim != 2:
        raise ValueError(f"reshape_3d expects (n, f), got {X.shape}")
    return X.reshape(X.shape[0], 1, X.shape[1])


def flatten_3d(X: Tensor) -> Tensor:
    return X.reshape(X.shape[0], X.shape[1] * X.shape[2])


@dataclass(frozen=True)
class TensorDataset:
    X: Tensor  # (n, 1, f), scaled
    y: Tensor  # (n,), scaled
    feature_names: tuple[str, ...]
    scaler: ScalerParams
    dates: tuple[str, ...] = ()

    def __post_init__(self):
        if self.X.ndim != 3 or self.X.shape[0] != self.y.shape[0] or self.X.shape[2] != len(self.feature_names):
            raise ValueError(f"inconsistent dataset: X {self.X.shape}, y {self.y.shape}, "
                             f"{len(self.feature_names)} feature names")

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def take(self, idx) -> "TensorDataset":
        idx = np.asarray(idx, dtype=np.int64)
        dates = tuple(self.dates[i] for i in idx) if self.dates else ()
        return replace(self, X=Tensor(self.X.data[idx]), y=Tensor(self.y.data[idx]), dates=dates)


def fit_record_scaler(records: Sequence[RawRecord], mode: str = "minmax") -> ScalerParams:
    columns = (*FEATURES, TARGET)
    return fit_scaler(records_matrix(records, columns), columns, mode)


def build_dataset(records: Sequence[RawRecord], scaler: ScalerParams) -> TensorDataset:
    """Scale complete records into an ``(n, 1, f)`` dataset (target scaled too)."""
    bad = [i for i, r in enumerate(records) if not r.is_complete(True)]
    if bad:
        raise ValueError(f"records {bad[:5]} are incomplete; clean them first")
    X = apply_scaler(records_matrix(records, FEATURES), scaler, FEATURES)
    y = scale_column(records_matrix(records, (TARGET,))[:, 0], scaler, TARGET)
    return TensorDataset(reshape_3d(X.reshape(len(records), len(FEATURES))), Tensor(y.reshape(-1)),
                         FEATURES, scaler, tuple(r.date for r in records))


def split_indices(n: int, test_fraction: float, seed: int = 0, mode: str = "chronological"):
    """``(train_idx, test_idx)``; chronological puts the last ceil(n * fraction) rows in test."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie strictly between 0 and 1, got {test_fraction}")
    n_test = math.ceil(n * test_fraction - 1e-9)
    if n and n_test >= n:
        raise ValueError(f"test_fraction {test_fraction} leaves no training rows out of {n}")
    if mode == "chronological":
        return np.arange(n - n_test), np.arange(n - n_test, n)
    if mode == "shuffled":
        perm = SeededRng(seed).permutation(n)
        return np.sort(perm[n_test:]), np.sort(perm[:n_test])
    raise ValueError(f"unknown split mode {mode!r}")


def train_test_split(data, test_fraction: float, seed: int = 0, mode: str = "chronological"):
    """Split a record list or :class:`TensorDataset` into ``(train, test)``."""
    train_idx, test_idx = split_indices(len(data), test_fraction, seed, mode)
    if isinstance(data, TensorDataset):
        return data.take(train_idx), data.take(test_idx)
    return [data[i] for i in train_idx], [data[i] for i in test_idx]


# ---------------------------------------------------------------------------
# annual aggregation and reference data

def annual_means(records: Sequence[RawRecord]):
    """Average complete-feature records per calendar year.

    Returns ``(years, features (m, 9), target (m,))``; target is NaN for years
    without any observed consumption.
    """
    by_year: dict[int, list[RawRecord]] = {}
    for rec in records:
        if rec.date is not None and rec.is_complete(False):
            by_year.setdefault(rec.year, []).append(rec)
    years = sorted(by_year)
    feats = np.array([records_matrix(by_year[y], FEATURES).mean(axis=0) for y in years]).reshape(len(years), len(FEATURES))
    target = []
    for y in years:
        vals = [r.gasoline_consumption_ml_day for r in by_year[y] if r.gasoline_consumption_ml_day is not None]
        target.append(float(np.mean(vals)) if vals else float("nan"))
    return np.array(years, dtype=np.int64), feats, np.array(target)


@dataclass(frozen=True)
class ReferenceRow:
    year: int
    actual: float | None
    ann_pred: float
    regression_pred: float
    hybrid_pred: float


REFERENCE_FILE = "reference_annual.csv"


def load_reference_series() -> list[ReferenceRow]:
    """Annual actual and predicted consumption 2007-2031 (ML/day), actuals to 2021."""
    text = resources.files("gasforecast").joinpath("resources", REFERENCE_FILE).read_text(encoding="utf-8")
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append(ReferenceRow(
            year=int(row["year"]),
            actual=float(row["actual"]) if row["actual"] else None,
            ann_pred=float(row["ann_pred"]),
            regression_pred=float(row["regression_pred"]),
            hybrid_pred=float(row["hybrid_pred"]),
        ))
    return rows


def reference_actuals() -> np.ndarray:
    return np.array([r.actual for r in load_reference_series() if r.actual is not None])


# ---------------------------------------------------------------------------
# synthetic data

def _add_months(start: str, k: int) -> str:
    y, m = int(start[:4]), int(start[5:7]) - 1 + k
    return f"{y + m // 12:04d}-{m % 12 + 1:02d}"


def generate_synthetic(seed: int = 42, n_months: int = 180, start: str = "2007-01") -> list[RawRecord]:
    """Deterministic monthly records with learnable structure.

    With ``t`` the month index, ``yr = t / 12`` and ``e`` a fresh standard
    normal draw per term (drawn in the order listed)::

        gasoline_price_usd         0.10 + 0.012 yr + 0.004 e, floored at 0.02
        free_gasoline_price_usd    0.35 + 0.02 yr + 0.08 sin(2 pi t / 48) + 0.01 e
        inflation_rate_pct         38 + 8 sin(2 pi t / 72) + e
        commodity_price_index_pct  15 + 0.8 yr + 2 sin(2 pi t / 36) + 0.8 e
        population_growth_rate_pct 1.35 - 0.025 yr + 0.03 e
        population_total           71e6 compounded monthly by growth / 1200
        road_distance_km           78000 + 1600 yr + 150 e
        gdp_per_capita_usd         5200 + 1600 sin(2 pi (t + 18) / 120) + 60 yr + 120 e
        vehicles_count             9.5e6 * 1.06**yr + 40000 e

    The consumption driver (ML/day) is::

        d = 37.5 + 2.2 vehicles/1e6 - 30 (gasoline_price - 0.1)
            - 4 tanh((inflation - 38) / 8) + 0.0015 (gdp - 5200)
            + 0.0001 (road - 78000)

    and consumption follows ``c_t = 0.5 c_{t-1} + 0.5 d_t + 0.5 e`` with
    ``c_0 = d_0``.
    """
    if n_months < 12:
        raise ValueError(f"n_months must be >= 12, got {n_months}")
    rng = SeededRng(seed)
    two_pi = 2.0 * math.pi
    pop = 71e6
    prev = None
    out = []
    for t in range(n_months):
        yr = t / 12.0
        gas = max(0.02, 0.10 + 0.012 * yr + 0.004 * rng.normal())
        free = 0.35 + 0.02 * yr + 0.08 * math.sin(two_pi * t / 48) + 0.01 * rng.normal()
        infl = 38.0 + 8.0 * math.sin(two_pi * t / 72) + rng.normal()
        cpi = 15.0 + 0.8 * yr + 2.0 * math.sin(two_pi * t / 36) + 0.8 * rng.normal()
        growth = 1.35 - 0.025 * yr + 0.03 * rng.normal()
        pop = pop * (1.0 + growth / 1200.0)
        road = 78000.0 + 1600.0 * yr + 150.0 * rng.normal()
        gdp = 5200.0 + 1600.0 * math.sin(two_pi * (t + 18) / 120) + 60.0 * yr + 120.0 * rng.normal()
        veh = 9.5e6 * 1.06 ** yr + 40000.0 * rng.normal()
        drive = (37.5 + 2.2 * veh / 1e6 - 30.0 * (gas - 0.1) - 4.0 * math.tanh((infl - 38.0) / 8.0)
                 + 0.0015 * (gdp - 5200.0) + 0.0001 * (road - 78000.0))
        noise = 0.5 * rng.normal()
        cons = drive if prev is None else 0.5 * prev + 0.5 * drive + noise
        prev = cons
        out.append(RawRecord(
            date=_add_months(start, t),
            gasoline_price_usd=round(gas, 6),
            free_gasoline_price_usd=round(free, 6),
            inflation_rate_pct=round(infl, 4),
            commodity_price_index_pct=round(cpi, 4),
            population_growth_rate_pct=round(growth, 5),
            population_total=float(round(pop)),
            road_distance_km=round(road, 2),
            gdp_per_capita_usd=round(gdp, 2),
            vehicles_count=float(round(veh)),
            gasoline_consumption_ml_day=round(cons, 4),
        ))
    return out


def record_from_values(date: str | None, features: Sequence[float], target: float | None = None) -> RawRecord:
    kw = {name: (None if v is None else float(v)) for name, v in zip(FEATURES, features)}
    return RawRecord(date=date, gasoline_consumption_ml_day=target, **kw)


def record_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(RawRecord))
