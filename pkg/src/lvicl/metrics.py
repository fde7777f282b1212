"""Point-forecast metrics: MSE, MAE, SMAPE, MASE and OWA against Naive2."""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, UndefinedMetricError


def _pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise DimensionError(f"prediction shape {pred.shape} != actual shape {actual.shape}")
    if pred.size == 0:
        raise DimensionError("metrics need at least one value")
    return pred, actual


def mse(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    return float(np.mean((pred - actual) ** 2))


def mae(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    return float(np.mean(np.abs(pred - actual)))


def smape(pred, actual) -> float:
    """``200/h * sum |y - yhat| / (|y| + |yhat|)``; 0/0 terms count as 0."""
    pred, actual = _pair(pred, actual)
    num = np.abs(actual - pred)
    den = np.abs(actual) + np.abs(pred)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
    return float(200.0 * np.mean(terms))


def mase_scale(insample, season: int) -> float:
    insample = np.asarray(insample, dtype=np.float64).reshape(-1)
    if season < 1 or insample.size <= season:
        raise UndefinedMetricError(f"MASE needs more than {season} in-sample points, got {insample.size}")
    return float(np.mean(np.abs(insample[season:] - insample[:-season])))


def mase(pred, actual, insample, season: int = 1) -> float:
    """Mean absolute error scaled by the in-sample seasonal-naive error."""
    pred, actual = _pair(pred, actual)
    scale = mase_scale(insample, season)
    if scale == 0.0:
        raise UndefinedMetricError("MASE scale is zero (in-sample series is flat at the seasonal lag)")
    return float(np.mean(np.abs(pred - actual)) / scale)


def owa(smape_value: float, mase_value: float, smape_naive2: float, mase_naive2: float) -> float:
    if smape_naive2 <= 0 or mase_naive2 <= 0:
        raise UndefinedMetricError(f"Naive2 denominators must be positive, got {smape_naive2}, {mase_naive2}")
    return 0.5 * (smape_value / smape_naive2 + mase_value / mase_naive2)


def acf(x: np.ndarray, lag: int) -> float:
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean()
    den = float(np.sum((x - mean) ** 2))
    if den == 0.0:
        return 0.0
    return float(np.sum((x[lag:] - mean) * (x[:-lag] - mean)) / den)


def seasonality_test(insample, season: int) -> bool:
    """90% autocorrelation test at the seasonal lag (M4 convention)."""
    x = np.asarray(insample, dtype=np.float64)
    if season <= 1 or x.size < 3 * season:
        return False
    coefs = [acf(x, k) for k in range(1, season + 1)]
    limit = 1.645 * math.sqrt((1.0 + 2.0 * sum(c * c for c in coefs[:-1])) / x.size)
    return abs(coefs[-1]) > limit


def naive2(insample, horizon: int, season: int) -> np.ndarray:
    """Seasonal naive when the series passes :func:`seasonality_test`, else last value.

    A simplification of the M4 Naive2 (which forecasts the naive value of the
    seasonally adjusted series and re-seasonalizes).
    """
    x = np.asarray(insample, dtype=np.float64).reshape(-1)
    if season > 1 and seasonality_test(x, season):
        last = x[-season:]
        return np.array([last[i % season] for i in range(horizon)])
    return np.full(horizon, x[-1])
