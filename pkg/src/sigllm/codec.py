"""Signal to text conversion.

A real valued series goes through four reversible steps before it reaches a
language model:

* shift by the minimum so every value is non-negative (``scale``),
* fix the precision and drop the decimal point (``quantize``),
* cut the integer series into rolling windows (``make_windows``),
* render each window as comma separated digits (``serialize_window``).

``parse_numeric_sequence`` reads model output back into integers.
"""

import math
import re
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from sigllm.errors import InvalidInputError

MAX_DIGITS = 6


@dataclass(frozen=True)
class Signal:
    """Univariate series with integer timestamps.

    Args:
        timestamps (ndarray):
            Strictly increasing integers.
        values (ndarray):
            Finite reals, same length as ``timestamps``.
    """

    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        timestamps = np.asarray(self.timestamps)
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or timestamps.ndim != 1:
            raise InvalidInputError("signal must be one dimensional")
        if len(values) == 0:
            raise InvalidInputError("signal is empty")
        if len(values) != len(timestamps):
            raise InvalidInputError(
                f"{len(timestamps)} timestamps for {len(values)} values")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("signal values must be finite")
        if not np.issubdtype(timestamps.dtype, np.integer):
            if not np.all(np.mod(timestamps, 1) == 0):
                raise InvalidInputError("timestamps must be integers")
            timestamps = timestamps.astype(np.int64)
        if np.any(np.diff(timestamps) <= 0):
            raise InvalidInputError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", timestamps.astype(np.int64))
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)

    @classmethod
    def from_values(cls, values, start=0):
        """Build a signal indexed ``start, start + 1, ...``."""
        values = np.asarray(values, dtype=float)
        return cls(np.arange(start, start + len(values), dtype=np.int64), values)


def as_signal(signal):
    """Accept a ``Signal`` or any 1-d array-like of values."""
    if isinstance(signal, Signal):
        return signal
    return Signal.from_values(signal)


@dataclass(frozen=True)
class ScaleTransform:
    min_offset: float


@dataclass(frozen=True)
class QuantizedSeries:
    """Non-negative integers plus what is needed to map them back.

    ``values[t] / 10**decimals + scale.min_offset`` recovers the input up to
    half a unit of the last kept decimal.
    """

    values: np.ndarray
    decimals: int
    scale: ScaleTransform = field(default_factory=lambda: ScaleTransform(0.0))

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class WindowSet:
    windows: List[np.ndarray]
    starts: List[int]
    window_size: int
    step_size: int

    def __len__(self):
        return len(self.windows)

    def coverage(self, length):
        """Number of windows covering each index of a series of ``length``."""
        counts = np.zeros(length, dtype=int)
        for start, window in zip(self.starts, self.windows):
            counts[start:start + len(window)] += 1

        return counts


def scale(signal):
    """Shift a series so that its minimum becomes zero.

    Returns:
        tuple:
            The shifted values and the ``ScaleTransform`` that undoes it.
    """
    values = as_signal(signal).values
    offset = float(values.min())
    return values - offset, ScaleTransform(offset)


def descale(scaled, transform):
    return np.asarray(scaled, dtype=float) + transform.min_offset


def default_decimals(scaled):
    """Pick a precision for a scaled series.

    Two decimals when the range exceeds 1. Otherwise as many decimals as fit
    in ``MAX_DIGITS`` digits for the largest value.
    """
    top = float(np.max(scaled)) if len(scaled) else 0.0
    if top > 1 or top <= 0:
        return 2

    decimals = MAX_DIGITS - 1 - math.floor(math.log10(top))
    while decimals > 0 and _round_half_up(top * 10.0 ** decimals) >= 10 ** MAX_DIGITS:
        decimals -= 1

    return decimals


def _round_half_up(values):
    return np.floor(np.asarray(values, dtype=float) + 0.5)


def quantize(scaled, decimals, transform=None):
    """Round to ``decimals`` digits and drop the decimal point.

    Ties round away from zero. Inputs must already be non-negative.
    """
    scaled = np.asarray(scaled, dtype=float)
    if decimals < 0:
        raise InvalidInputError(f"decimals must be non-negative, got {decimals}")
    if np.any(scaled < 0):
        raise InvalidInputError("quantize expects non-negative values; scale first")
    if not np.all(np.isfinite(scaled)):
        raise InvalidInputError("quantize expects finite values")

    rounded = _round_half_up(scaled * 10.0 ** decimals)
    if rounded.size and rounded.max() >= 2 ** 62:
        raise InvalidInputError(
            f"{decimals} decimals overflow the integer range for this series")

    return QuantizedSeries(rounded.astype(np.int64), int(decimals),
                           transform or ScaleTransform(0.0))


def dequantize(quantized):
    return np.asarray(quantized.values, dtype=float) / 10.0 ** quantized.decimals


def encode(signal, decimals=None, shift=True):
    """Scale and quantize in one go.

    Args:
        signal (Signal or array-like):
            Input series.
        decimals (int or None):
            Precision; ``default_decimals`` when ``None``.
        shift (bool):
            Subtract the minimum first. Without it the values must already
            be non-negative.

    Returns:
        QuantizedSeries
    """
    if shift:
        scaled, transform = scale(signal)
    else:
        scaled, transform = as_signal(signal).values, ScaleTransform(0.0)
    if decimals is None:
        decimals = default_decimals(scaled)

    return quantize(scaled, decimals, transform)


def decode(values, quantized):
    """Map integers produced under ``quantized``'s transform back to reals."""
    values = np.asarray(values, dtype=float) / 10.0 ** quantized.decimals
    return descale(values, quantized.scale)


def make_windows(series, window_size, step_size):
    """Cut ``series`` into rolling windows.

    Window ``i`` covers ``[i * step_size, i * step_size + window_size)``.
    Windows keep coming while their start lies inside the series, so the
    tail windows are truncated and every index is covered. A window as long
    as the series (or longer) gives a single window.
    """
    if window_size < 1 or step_size < 1:
        raise InvalidInputError("window_size and step_size must be positive")
    series = np.asarray(series)
    length = len(series)
    if length == 0:
        raise InvalidInputError("cannot window an empty series")
    if step_size > window_size and window_size < length:
        raise InvalidInputError(
            f"step {step_size} larger than window {window_size} would leave gaps")

    if window_size >= length:
        starts = [0]
    else:
        starts = list(range(0, length, step_size))

    windows = [series[start:start + window_size] for start in starts]
    return WindowSet(windows, starts, window_size, step_size)


def serialize_window(window, space_digits=False):
    """Render integers as ``"244,309,2,462"``.

    With ``space_digits`` every digit and comma is separated by a single
    space: ``"2 4 4 , 3 0 9 , 2 , 4 6 2"``.
    """
    numbers = []
    for value in window:
        value = int(value)
        if value < 0:
            raise InvalidInputError(f"cannot serialize negative value {value}")
        numbers.append(str(value))

    if space_digits:
        return " , ".join(" ".join(number) for number in numbers)

    return ",".join(numbers)


_TOKEN_SPLIT = re.compile(r"[,\n]")
_INNER_SPACE = re.compile(r"[ \t\r]+")


def parse_numeric_sequence(text) -> Tuple[List[int], int]:
    """Read the leading run of non-negative integers out of model output.

    Whitespace inside a token is removed, so spaced digits are accepted.
    Parsing stops at the first token that is not a plain integer.

    Returns:
        tuple:
            The integers, and how many non-empty tokens were discarded
            from the first malformed one onward.
    """
    tokens = [_INNER_SPACE.sub("", token) for token in _TOKEN_SPLIT.split(text or "")]
    tokens = [token for token in tokens if token]

    values = []
    for position, token in enumerate(tokens):
        if not token.isascii() or not token.isdigit():
            return values, len(tokens) - position
        values.append(int(token))

    return values, 0


def last_numeric_run(text) -> List[int]:
    """Integers at the end of a context, e.g. the window inside a prompt."""
    match = re.search(r"[\d][\d ,]*\.?\s*$", text or "")
    if match is None:
        return []
    values, _ = parse_numeric_sequence(match.group(0).rstrip().rstrip("."))
    return values


def max_digits(values: Sequence[int]) -> int:
    values = np.asarray(values)
    if values.size == 0:
        return 1
    return len(str(int(values.max())))
