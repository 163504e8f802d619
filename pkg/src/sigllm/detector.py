"""Forecast based anomaly detection.

Every rolling window of the quantized signal is handed to a model which
continues it ``horizon`` steps ahead, several times. The overlapping
predictions are folded into one reconstructed series, compared against the
original, and the residual is smoothed and thresholded with a sliding
``mean + k * std`` rule.
"""

import csv
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.signal import lfilter

from sigllm import codec
from sigllm.backend import CompletionRequest, map_requests
from sigllm.errors import InvalidInputError, RepetitiveInputError
from sigllm.intervals import Detections, mask_to_intervals

LOGGER = logging.getLogger(__name__)

STATISTICS = ("mean", "median", "p5", "p95")
ERROR_KINDS = ("absolute", "squared")
TOKEN_SLACK = 8


@dataclass
class DetectorConfig:
    """Settings of the forecasting pipeline.

    The three ``*_span``/``threshold_*`` fractions are relative to the length
    of the error signal.
    """

    window_size: int = 140
    step_size: int = 1
    horizon: int = 5
    n_samples: int = 10
    statistic: str = "median"
    error: str = "squared"
    smoothing: bool = True
    smoothing_span: float = 0.01
    threshold_window: float = 1 / 3
    threshold_step: float = 1 / 10
    sigma_k: float = 4.0
    decimals: Optional[int] = None
    space_digits: bool = False
    temperature: float = 1.0
    numeric_only: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise InvalidInputError("horizon must be at least 1")
        if self.window_size < self.horizon:
            raise InvalidInputError("window_size must be at least the horizon")
        if self.step_size < 1 or self.n_samples < 1:
            raise InvalidInputError("step_size and n_samples must be positive")
        if self.statistic not in STATISTICS:
            raise InvalidInputError(f"statistic must be one of {STATISTICS}")
        if self.error not in ERROR_KINDS:
            raise InvalidInputError(f"error must be one of {ERROR_KINDS}")
        for name in ("smoothing_span", "threshold_window", "threshold_step"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise InvalidInputError(f"{name} must lie in (0, 1], got {value}")
        if self.threshold_step > self.threshold_window:
            raise InvalidInputError("threshold_step must not exceed threshold_window")

    def to_dict(self):
        return asdict(self)


@dataclass
class WindowForecast:
    """Parsed samples of one window. Each sample holds at most ``horizon`` values."""

    start: int
    samples: List[List[int]]
    dropped: int = 0
    truncated: int = 0
    fallback: Optional[str] = None


@dataclass
class ForecastEnsemble:
    """Predictions indexed by ``(time, offset, sample)``.

    ``predictions[t, k, j]`` is sample ``j`` of the window whose forecast
    reaches ``t`` at horizon position ``k``; NaN where no such value exists.
    Values are in the quantized integer space.
    """

    predictions: np.ndarray
    metadata: Dict = field(default_factory=dict)

    @property
    def forecastable(self):
        return ~np.all(np.isnan(self.predictions), axis=(1, 2))


def forecast_max_tokens(horizon, digits, space_digits):
    per_value = 2 * digits + 2 if space_digits else digits + 1
    return horizon * per_value + TOKEN_SLACK


def forecast_context(window, space_digits):
    separator = " , " if space_digits else ","
    return codec.serialize_window(window, space_digits) + separator


def forecast_starts(length, window_size, step_size):
    """Starts of the full windows that leave at least one value to predict."""
    windows = codec.make_windows(np.zeros(length), window_size, step_size)
    return [start for start, window in zip(windows.starts, windows.windows)
            if len(window) == window_size and start + window_size < length]


def _forecast_one(values, start, config, backend, max_tokens):
    window = values[start:start + config.window_size]
    request = CompletionRequest(
        context=forecast_context(window, config.space_digits),
        n_samples=config.n_samples,
        max_tokens=max_tokens,
        temperature=config.temperature,
        numeric_only=config.numeric_only,
        horizon=config.horizon,
    )
    persistence = [[int(window[-1])] * config.horizon] * config.n_samples
    try:
        response = backend.complete(request)
    except RepetitiveInputError:
        return WindowForecast(start, persistence, fallback="repetitive"), {}

    result = WindowForecast(start, [])
    for text in response.samples:
        parsed, _ = codec.parse_numeric_sequence(text)
        if not parsed:
            result.dropped += 1
            continue
        if len(parsed) < config.horizon:
            result.truncated += 1
        result.samples.append(parsed[:config.horizon])

    if not result.samples:
        result.samples = persistence
        result.fallback = "unusable"

    return result, response.usage


def forecast_windows(quantized, config, backend):
    """Ask the backend to continue every full window of ``quantized``.

    Samples that parse to nothing are dropped; short ones are kept as far as
    they go. A window left without any usable sample (or refused as
    repetitive) is continued by repeating its last value.

    Returns:
        tuple:
            List of ``WindowForecast`` ordered by start, and a metadata dict.
    """
    values = np.asarray(getattr(quantized, "values", quantized), dtype=np.int64)
    if len(values) <= config.window_size:
        raise InvalidInputError(
            f"series of length {len(values)} is too short for window {config.window_size}")

    starts = forecast_starts(len(values), config.window_size, config.step_size)
    max_tokens = forecast_max_tokens(
        config.horizon, codec.max_digits(values) + 1, config.space_digits)

    def run(start):
        return _forecast_one(values, start, config, backend, max_tokens)

    outcomes = map_requests(run, starts, getattr(backend, "parallelism", 1))

    forecasts = [forecast for forecast, _ in outcomes]
    metadata = {
        "windows": len(forecasts),
        "fallback_windows": [f.start for f in forecasts if f.fallback],
        "repetitive_windows": [f.start for f in forecasts if f.fallback == "repetitive"],
        "dropped_samples": sum(f.dropped for f in forecasts),
        "truncated_samples": sum(f.truncated for f in forecasts),
        "usage": {
            "prompt_tokens": sum(u.get("prompt_tokens", 0) for _, u in outcomes),
            "completion_tokens": sum(u.get("completion_tokens", 0) for _, u in outcomes),
        },
    }
    return forecasts, metadata


def build_ensemble(forecasts, length, config):
    predictions = np.full((length, config.horizon, config.n_samples), np.nan)
    for forecast in forecasts:
        first = forecast.start + config.window_size
        for j, sample in enumerate(forecast.samples[:config.n_samples]):
            for k, value in enumerate(sample):
                t = first + k
                if t < length:
                    predictions[t, k, j] = value

    return ForecastEnsemble(predictions)


def collapse_offsets(predictions):
    """Median over the windows that forecast the same point, per sample.

    Args:
        predictions (ndarray):
            Shape ``(T, offsets, samples)``, NaN for missing entries.

    Returns:
        ndarray:
            Shape ``(T, samples)``.
    """
    predictions = np.asarray(predictions, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmedian(predictions, axis=1)


def collapse_samples(per_sample, statistic="median"):
    """Fold the samples of each time step into one value.

    Percentiles interpolate linearly between the closest ranks.
    """
    per_sample = np.asarray(per_sample, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if statistic == "mean":
            return np.nanmean(per_sample, axis=-1)
        if statistic == "median":
            return np.nanmedian(per_sample, axis=-1)
        if statistic == "p5":
            return np.nanpercentile(per_sample, 5, axis=-1, method="linear")
        if statistic == "p95":
            return np.nanpercentile(per_sample, 95, axis=-1, method="linear")

    raise InvalidInputError(f"statistic must be one of {STATISTICS}, got {statistic!r}")


def compute_error(actual, predicted, kind="squared"):
    difference = np.asarray(actual, dtype=float) - np.asarray(predicted, dtype=float)
    if kind == "absolute":
        return np.abs(difference)
    if kind == "squared":
        return difference ** 2

    raise InvalidInputError(f"error kind must be one of {ERROR_KINDS}, got {kind!r}")


def smooth_ewma(errors, span):
    """Exponentially weighted moving average seeded with the first value.

    ``s[0] = e[0]`` and ``s[t] = lam * e[t] + (1 - lam) * s[t-1]`` with
    ``lam = 2 / (span + 1)``.
    """
    if span < 1:
        raise InvalidInputError(f"span must be at least 1, got {span}")
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        return errors.copy()

    lam = 2.0 / (span + 1.0)
    smoothed, _ = lfilter([lam], [1.0, lam - 1.0], errors, zi=[(1.0 - lam) * errors[0]])
    return smoothed


def threshold_windows(length, window_frac, step_frac):
    """``(start, stop)`` pairs of the sliding threshold windows.

    Windows advance until one reaches the end; that last one is truncated.
    A step longer than the window would skip positions and is refused.
    """
    if step_frac > window_frac:
        raise InvalidInputError(
            f"threshold step {step_frac} exceeds threshold window {window_frac}")
    size = max(1, int(np.floor(window_frac * length)))
    step = max(1, int(np.floor(step_frac * length)))
    windows = []
    start = 0
    while start < length:
        stop = min(start + size, length)
        windows.append((start, stop))
        if stop == length:
            break
        start += step

    return windows


def sliding_threshold(errors, window_frac=1 / 3, step_frac=1 / 10, k=4.0):
    """Flag values above ``mean + k * std`` of any sliding window containing them.

    The standard deviation is the population one. A constant window flags
    nothing.
    """
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise InvalidInputError("cannot threshold an empty error signal")

    mask = np.zeros(len(errors), dtype=bool)
    for start, stop in threshold_windows(len(errors), window_frac, step_frac):
        chunk = errors[start:stop]
        if chunk.min() == chunk.max():
            continue
        # fsum keeps the mean exact enough that ulp noise cannot flag values.
        mean = math.fsum(chunk) / len(chunk)
        std = math.sqrt(math.fsum((chunk - mean) ** 2) / len(chunk))
        mask[start:stop] |= chunk > mean + k * std

    return mask


def postprocess(actual, predicted, config):
    """Residual, smoothing and thresholding over the forecastable positions.

    Positions where ``predicted`` is NaN have no forecast and are left out of
    every statistic.

    Returns:
        tuple:
            Intervals, and a dict with the ``index``, ``errors`` and ``mask``
            arrays (over the forecastable positions only).
    """
    actual = np.asarray(actual, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    index = np.flatnonzero(~np.isnan(predicted))
    debug = {"index": index, "errors": np.zeros(0), "mask": np.zeros(0, dtype=bool)}
    if index.size == 0:
        return [], debug

    errors = compute_error(actual[index], predicted[index], config.error)
    if config.smoothing:
        span = max(1.0, config.smoothing_span * len(errors))
        errors = smooth_ewma(errors, span)

    mask = sliding_threshold(errors, config.threshold_window, config.threshold_step,
                             config.sigma_k)
    debug.update(errors=errors, mask=mask)
    return mask_to_intervals(mask, errors, index), debug


def reconstruct(ensemble, quantized, statistic="median"):
    """Collapse an ensemble into a real valued series (NaN where unforecast)."""
    per_sample = collapse_offsets(ensemble.predictions)
    collapsed = collapse_samples(per_sample, statistic)
    return codec.decode(collapsed, quantized)


def forecast_signal(signal, config, backend):
    """Encode ``signal`` and gather the forecast ensemble for it.

    Splitting this from ``run_detector`` lets ablation sweeps reuse one set
    of model calls for every post-processing variant.
    """
    signal = codec.as_signal(signal)
    quantized = codec.encode(signal, config.decimals)
    forecasts, metadata = forecast_windows(quantized, config, backend)
    ensemble = build_ensemble(forecasts, len(signal), config)
    metadata["decimals"] = quantized.decimals
    ensemble.metadata = metadata
    return quantized, ensemble


def detect_from_ensemble(signal, quantized, ensemble, config):
    signal = codec.as_signal(signal)
    predicted = reconstruct(ensemble, quantized, config.statistic)
    intervals, debug = postprocess(signal.values, predicted, config)
    debug["predicted"] = predicted
    return Detections(intervals, dict(ensemble.metadata)), debug


def run_detector(signal, config=None, backend=None, debug=None):
    """Forecast based detection end to end.

    Args:
        signal (Signal or array-like):
            Series longer than ``window_size + horizon``.
        config (DetectorConfig):
            Pipeline settings; defaults when omitted.
        backend (Backend):
            Model to forecast with.
        debug (dict or None):
            When given, filled with the reconstructed series, error signal
            and threshold mask.

    Returns:
        Detections
    """
    config = config or DetectorConfig()
    signal = codec.as_signal(signal)
    if len(signal) <= config.window_size + config.horizon:
        raise InvalidInputError(
            f"signal of length {len(signal)} needs more than "
            f"{config.window_size + config.horizon} values")

    began = time.perf_counter()
    quantized, ensemble = forecast_signal(signal, config, backend)
    detections, details = detect_from_ensemble(signal, quantized, ensemble, config)
    detections.metadata["timing"] = {"seconds": time.perf_counter() - began}
    if debug is not None:
        debug.update(details)

    LOGGER.info("detector found %d intervals over %d windows",
                len(detections), detections.metadata["windows"])
    return detections


def write_debug_csv(path, signal, debug):
    """Columnar dump of the reconstructed series, error and mask for plotting."""
    signal = codec.as_signal(signal)
    length = len(signal)
    errors = np.full(length, np.nan)
    mask = np.zeros(length, dtype=bool)
    errors[debug["index"]] = debug["errors"]
    mask[debug["index"]] = debug["mask"]
    predicted = debug.get("predicted", np.full(length, np.nan))

    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["timestamp", "value", "predicted", "error", "anomalous"])
        for t in range(length):
            writer.writerow([
                int(signal.timestamps[t]), repr(float(signal.values[t])),
                "" if np.isnan(predicted[t]) else repr(float(predicted[t])),
                "" if np.isnan(errors[t]) else repr(float(errors[t])),
                int(mask[t]),
            ])
