"""Metrics, perturbation sensitivity, trend forecasting and emissions conversion."""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .layers import Module
from .models import predict
from .pipeline import FEATURES, TARGET, ScalerParams, TensorDataset, apply_scaler, inverse_scale
from .tensor import Tensor


def _pair(actual, predicted, min_n: int = 1) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual.data if isinstance(actual, Tensor) else actual, dtype=np.float64).reshape(-1)
    p = np.asarray(predicted.data if isinstance(predicted, Tensor) else predicted, dtype=np.float64).reshape(-1)
    if a.shape != p.shape:
        raise ValueError(f"length mismatch: {a.size} actual vs {p.size} predicted")
    if a.size < min_n:
        raise ValueError(f"need at least {min_n} values, got {a.size}")
    return a, p


def mse(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.mean((a - p) ** 2))


def rmse(actual, predicted) -> float:
    return math.sqrt(mse(actual, predicted))


def mae(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.mean(np.abs(a - p)))


def r_squared(actual, predicted) -> float:
    """``1 - SSE / SS_y``; undefined (ValueError) for a constant actual series."""
    a, p = _pair(actual, predicted, min_n=2)
    ss_y = float(np.sum((a - a.mean()) ** 2))
    if ss_y == 0.0:
        raise ValueError("r_squared is undefined: actual values have zero variance")
    return 1.0 - float(np.sum((a - p) ** 2)) / ss_y


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    mse: float
    rmse: float
    r_squared: float | None
    n: int
    space: str = "scaled"

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_report(actual, predicted, space: str = "scaled") -> MetricsReport:
    a, p = _pair(actual, predicted)
    m = mse(a, p)
    try:
        r2 = r_squared(a, p)
    except ValueError:
        r2 = None
    return MetricsReport(mae(a, p), m, math.sqrt(m), r2, int(a.size), space)


class ScalerMismatchError(ValueError):
    pass


def evaluate(model: Module, dataset: TensorDataset, space: str = "scaled",
             scaler: ScalerParams | None = None) -> MetricsReport:
    """Score ``model`` on ``dataset``; ``space`` is ``scaled`` or ``original``.

    ``scaler`` is the scaler the model was trained with; when given it must
    match the dataset's.
    """
    if space not in ("scaled", "original"):
        raise ValueError(f"space must be 'scaled' or 'original', got {space!r}")
    if scaler is not None and scaler != dataset.scaler:
        raise ScalerMismatchError("dataset was scaled with different parameters than the model")
    if dataset.n_features != model.n_features:
        raise ScalerMismatchError(f"model expects {model.n_features} features, dataset has {dataset.n_features}")
    pred = predict(model, dataset.X)
    actual = dataset.y.numpy()
    if space == "original":
        pred = inverse_scale(pred, dataset.scaler, TARGET)
        actual = inverse_scale(actual, dataset.scaler, TARGET)
    return metrics_report(actual, pred, space)


# ---------------------------------------------------------------------------
# sensitivity

REPORT_GROUPS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("Gasoline Price (USD)", ("gasoline_price_usd",)),
    ("Free Gasoline Price (USD)", ("free_gasoline_price_usd",)),
    ("Inflation Rate (%)", ("inflation_rate_pct",)),
    ("Commodity Price Index (%)", ("commodity_price_index_pct",)),
    ("Population Metrics (Growth Rate & Total Population)",
     ("population_growth_rate_pct", "population_total")),
    ("Road Distance (Km)", ("road_distance_km",)),
    ("GDP per Capita (USD)", ("gdp_per_capita_usd",)),
    ("Number of Vehicles", ("vehicles_count",)),
)


@dataclass
class SensitivityReport:
    perturbation: float
    weights: dict[str, float]
    groups: list[tuple[str, float, tuple[str, ...]]]
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "perturbation": self.perturbation,
            "features": self.weights,
            "groups": [{"variable": label, "weight": w, "columns": list(cols)} for label, w, cols in self.groups],
            "skipped": self.skipped,
        }


def _as_predictor(model) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, Module):
        return lambda X: predict(model, X)
    return lambda X: np.asarray(model(X), dtype=np.float64).reshape(-1)


def sensitivity(model, X, perturbation: float = 0.10, feature_names: Sequence[str] | None = None,
                groups=REPORT_GROUPS) -> SensitivityReport:
    """One-at-a-time perturbation influence, normalised to sum to 1.

    Feature ``j`` is shifted by ``+/- perturbation * range_j`` (its observed
    range in ``X``) for every sample; the influence is the mean absolute
    output change, averaged over both directions. ``X`` may be ``(n, f)`` or
    ``(n, 1, f)``; the model sees the same layout.
    """
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    f = X.shape[-1]
    names = list(feature_names) if feature_names is not None else (
        list(FEATURES) if f == len(FEATURES) else [f"x{j + 1}" for j in range(f)])
    if len(names) != f:
        raise ValueError(f"{len(names)} feature names for {f} features")
    predictor = _as_predictor(model)
    base = predictor(X)
    flat = X.reshape(-1, f)
    influence: dict[str, float] = {}
    skipped: list[str] = []
    for j, name in enumerate(names):
        spread = float(flat[:, j].max() - flat[:, j].min())
        if spread == 0.0:
            skipped.append(name)
            continue
        delta = perturbation * spread
        total = 0.0
        for sign in (1.0, -1.0):
            shifted = X.copy()
            shifted[..., j] += sign * delta
            total += float(np.mean(np.abs(predictor(shifted) - base)))
        influence[name] = total / 2.0
    norm = sum(influence.values())
    if norm <= 0.0:
        raise ValueError("model output does not respond to any feature; weights are undefined")
    weights = {name: (influence[name] / norm if name in influence else 0.0) for name in names}

    grouped = []
    covered = set()
    if groups:
        for label, cols in groups:
            if all(c in weights for c in cols):
                grouped.append((label, sum(weights[c] for c in cols), tuple(cols)))
                covered.update(cols)
    for name in names:
        if name not in covered:
            grouped.append((name, weights[name], (name,)))
    return SensitivityReport(perturbation, weights, grouped, skipped)


# ---------------------------------------------------------------------------
# forecasting

class ScenarioGapError(ValueError):
    def __init__(self, gaps: Sequence[tuple[str, int]]):
        self.gaps = list(gaps)
        shown = ", ".join(f"{name}@{year}" for name, year in self.gaps[:20])
        super().__init__(f"scenario is missing {len(self.gaps)} feature values: {shown}")


def linear_trend(t, values):
    """Least-squares ``(slope, intercept)`` of ``values`` against ``t``."""
    t = np.asarray(t, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    tc = t - t.mean()
    denom = float(np.sum(tc * tc))
    slope = float(np.sum(tc * (v - v.mean())) / denom) if denom > 0 else 0.0
    return slope, float(v.mean() - slope * t.mean())


def extrapolate_features(history, horizon: int, years=None):
    """Continue each column of ``history`` along its least-squares line.

    ``history`` is ``(m,)`` or ``(m, f)`` with one row per year; ``years``
    defaults to ``0..m-1``. Returns ``(future_years, future_values)`` for the
    ``horizon`` steps after the last year.
    """
    hist = np.asarray(history, dtype=np.float64)
    vector = hist.ndim == 1
    if vector:
        hist = hist.reshape(-1, 1)
    m = hist.shape[0]
    if m < 2:
        raise ValueError(f"need at least 2 historical years, got {m}")
    years = np.arange(m) if years is None else np.asarray(years)
    future = years[-1] + np.arange(1, horizon + 1)
    out = np.empty((horizon, hist.shape[1]))
    for j in range(hist.shape[1]):
        slope, intercept = linear_trend(years, hist[:, j])
        out[:, j] = intercept + slope * future
    return future, (out[:, 0] if vector else out)


@dataclass(frozen=True)
class ForecastScenario:
    years: tuple[int, ...]
    feature_names: tuple[str, ...]
    values: np.ndarray  # (horizon, f); NaN marks a gap
    sources: dict[str, str]

    def gaps(self, required: Sequence[str] = FEATURES) -> list[tuple[str, int]]:
        missing = []
        for name in required:
            if name not in self.feature_names:
                missing.extend((name, y) for y in self.years)
                continue
            col = self.values[:, self.feature_names.index(name)]
            missing.extend((name, y) for y, v in zip(self.years, col) if not np.isfinite(v))
        return missing


def build_scenario(history_years, history_values, horizon: int,
                   overrides: Mapping[str, Mapping[int, float]] | None = None,
                   feature_names: Sequence[str] = FEATURES) -> ForecastScenario:
    """Linear-trend future paths, replaced per feature by user overrides.

    An overridden feature takes its values only from the override; years the
    override leaves out become gaps.
    """
    overrides = overrides or {}
    unknown = sorted(set(overrides) - set(feature_names))
    if unknown:
        raise ValueError(f"override columns not among features: {unknown}")
    if horizon == 0:
        return ForecastScenario((), tuple(feature_names), np.empty((0, len(feature_names))),
                                {n: "linear-trend" for n in feature_names})
    years, trend = extrapolate_features(np.asarray(history_values).reshape(len(history_years), -1),
                                        horizon, years=np.asarray(history_years))
    values = trend.copy()
    sources = {}
    for j, name in enumerate(feature_names):
        if name in overrides:
            path = overrides[name]
            values[:, j] = [path.get(int(y), np.nan) for y in years]
            sources[name] = "override"
        else:
            sources[name] = "linear-trend"
    return ForecastScenario(tuple(int(y) for y in years), tuple(feature_names), values, sources)


def recursive_forecast(model, scenario: ForecastScenario, scaler: ScalerParams) -> dict[int, float]:
    """Predicted consumption (original units) for each scenario year, in year order."""
    gaps = scenario.gaps()
    if gaps:
        raise ScenarioGapError(gaps)
    predictor = _as_predictor(model)
    cols = [scenario.feature_names.index(name) for name in FEATURES]
    out = {}
    for i in np.argsort(scenario.years, kind="stable"):
        row = scenario.values[i, cols].reshape(1, -1)
        scaled = apply_scaler(row, scaler, FEATURES).reshape(1, 1, len(FEATURES))
        pred = predictor(scaled)
        out[scenario.years[i]] = float(inverse_scale(pred, scaler, TARGET)[0])
    return out


def forecast_csv(forecast: Mapping[int, float]) -> str:
    buf = io.StringIO()
    buf.write("year,predicted_ml_day\n")
    for year in sorted(forecast):
        buf.write(f"{year},{forecast[year]!r}\n")
    return buf.getvalue()


def parse_forecast_csv(text: str) -> dict[int, float]:
    lines = text.strip().splitlines()
    if not lines or lines[0].strip() != "year,predicted_ml_day":
        raise ValueError("forecast CSV must have header 'year,predicted_ml_day'")
    out = {}
    for line in lines[1:]:
        if line.strip():
            year, value = line.split(",")
            out[int(year)] = float(value)
    return out


# ---------------------------------------------------------------------------
# emissions

@dataclass(frozen=True)
class EmissionsConfig:
    factor: float  # kg CO2 per litre
    days_per_year: float = 365.0

    def __post_init__(self):
        if not (self.factor > 0):
            raise ValueError(f"emission factor must be positive, got {self.factor}")
        if not (self.days_per_year > 0):
            raise ValueError("days_per_year must be positive")


def emissions(consumption: Mapping[int, float], config: EmissionsConfig) -> dict[int, float]:
    """ML/day -> tonnes CO2 per year: ``ml * 1e6 L * factor kg/L * days / 1000``."""
    return {year: consumption[year] * 1e6 * config.factor * config.days_per_year / 1000.0
            for year in sorted(consumption)}


def emissions_csv(tonnes: Mapping[int, float]) -> str:
    buf = io.StringIO()
    buf.write("year,tonnes_co2\n")
    for year in sorted(tonnes):
        buf.write(f"{year},{tonnes[year]!r}\n")
    return buf.getvalue()
