"""Scoring detections against labelled anomalies, data loading, and the
moving average baseline."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from sigllm import codec
from sigllm.detector import DetectorConfig, postprocess
from sigllm.errors import DataError, InvalidInputError
from sigllm.intervals import AnomalyInterval, Detections, as_interval


@dataclass
class Dataset:
    """Named collection of signals and their labelled anomalies.

    Ground truth intervals are in timestamp units.
    """

    name: str
    signals: Dict[str, codec.Signal] = field(default_factory=dict)
    ground_truth: Dict[str, List[AnomalyInterval]] = field(default_factory=dict)

    def __post_init__(self):
        for signal_id, intervals in self.ground_truth.items():
            if signal_id not in self.signals:
                raise InvalidInputError(f"ground truth for unknown signal {signal_id!r}")
            timestamps = self.signals[signal_id].timestamps
            previous = None
            for interval in intervals:
                if interval.start < timestamps[0] or interval.end > timestamps[-1]:
                    raise InvalidInputError(
                        f"{signal_id}: interval {interval.start}-{interval.end} "
                        "outside the signal")
                if previous is not None and interval.start <= previous.end:
                    raise InvalidInputError(f"{signal_id}: intervals overlap or are unsorted")
                previous = interval

    @classmethod
    def load(cls, directory, name=None):
        """Read ``<id>.csv`` signals and optional ``<id>.json`` labels from a directory."""
        directory = Path(directory)
        signals, truth = {}, {}
        for path in sorted(directory.glob("*.csv")):
            signals[path.stem] = load_signal_csv(path)
            labels = path.with_suffix(".json")
            if labels.exists():
                truth[path.stem] = load_ground_truth(labels)
        return cls(name or directory.name, signals, truth)


@dataclass
class ScoreReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    signals: Dict[str, "ScoreReport"] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, tp, fp, fn):
        return cls(tp, fp, fn, *f1_score(tp, fp, fn))

    def to_dict(self):
        out = {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": self.precision,
               "recall": self.recall, "f1": self.f1}
        if self.signals:
            out["signals"] = {name: report.to_dict() for name, report in self.signals.items()}
        return out

    def table(self):
        """Aligned text table, one row per signal plus the aggregate."""
        header = ("signal", "tp", "fp", "fn", "precision", "recall", "f1")
        rows = [(name, r.tp, r.fp, r.fn, r.precision, r.recall, r.f1)
                for name, r in self.signals.items()]
        rows.append(("TOTAL", self.tp, self.fp, self.fn, self.precision, self.recall, self.f1))

        cells = [header] + [
            (str(name), str(tp), str(fp), str(fn), f"{p:.3f}", f"{r:.3f}", f"{f:.3f}")
            for name, tp, fp, fn, p, r, f in rows
        ]
        widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
        lines = []
        for row in cells:
            first = row[0].ljust(widths[0])
            rest = [cell.rjust(width) for cell, width in zip(row[1:], widths[1:])]
            lines.append("  ".join([first] + rest))
        return "\n".join(lines)


def overlap_confusion(predicted, truth):
    """Count detections under the any-overlap convention.

    A labelled interval is found when some prediction shares at least one
    point with it; a prediction touching no labelled interval is a false
    positive. Bounds are inclusive.

    Returns:
        tuple:
            ``(tp, fp, fn)``
    """
    predicted = [as_interval(item) for item in predicted]
    truth = [as_interval(item) for item in truth]

    tp = sum(1 for t in truth if any(p.overlaps(t) for p in predicted))
    fp = sum(1 for p in predicted if not any(p.overlaps(t) for t in truth))
    return tp, fp, len(truth) - tp


def f1_score(tp, fp, fn):
    """Precision, recall and F1, each 0 when undefined."""
    if min(tp, fp, fn) < 0:
        raise InvalidInputError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def score_signal(predicted, truth):
    return ScoreReport.from_counts(*overlap_confusion(predicted, truth))


def aggregate_report(reports):
    """Micro average: sum the counts of every signal, then score.

    Args:
        reports (dict or list):
            Per signal ``ScoreReport``s, keyed by signal id when a dict.
    """
    if not isinstance(reports, dict):
        reports = {str(i): report for i, report in enumerate(reports)}

    tp = sum(r.tp for r in reports.values())
    fp = sum(r.fp for r in reports.values())
    fn = sum(r.fn for r in reports.values())
    total = ScoreReport.from_counts(tp, fp, fn)
    total.signals = dict(reports)
    return total


def moving_average_forecast(values, window=10):
    """Causal mean of the previous ``window`` values; NaN for the first ones."""
    values = np.asarray(values, dtype=float)
    if window < 1:
        raise InvalidInputError("moving average window must be at least 1")
    if len(values) < window:
        raise InvalidInputError(
            f"signal of length {len(values)} shorter than moving average window {window}")

    predicted = np.full(len(values), np.nan)
    sums = np.cumsum(np.concatenate([[0.0], values]))
    predicted[window:] = (sums[window:-1] - sums[:-window - 1]) / window
    return predicted


def moving_average_detect(signal, ma_window=10, config=None):
    """Baseline detector: moving average forecast plus the detector's
    residual, smoothing and threshold steps."""
    config = config or DetectorConfig()
    signal = codec.as_signal(signal)
    predicted = moving_average_forecast(signal.values, ma_window)
    intervals, _ = postprocess(signal.values, predicted, config)
    return Detections(intervals, {"ma_window": ma_window})


def load_signal_csv(path):
    """Read a ``timestamp,value`` CSV into a ``Signal``.

    Raises:
        DataError:
            On a missing header column, a malformed row, a non finite value
            or timestamps that do not increase, with the offending line.
    """
    timestamps, values = [], []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path} is empty", 1)
        header = [column.strip() for column in header]
        if "timestamp" not in header or "value" not in header:
            raise DataError("expected columns 'timestamp,value'", 1)
        ts_col, value_col = header.index("timestamp"), header.index("value")

        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                timestamp = int(row[ts_col])
                value = float(row[value_col])
            except (IndexError, ValueError) as error:
                raise DataError(f"malformed row {row!r}: {error}", line) from error
            if not math.isfinite(value):
                raise DataError(f"non finite value {row[value_col]!r}", line)
            if timestamps and timestamp <= timestamps[-1]:
                raise DataError(f"timestamp {timestamp} does not increase", line)
            timestamps.append(timestamp)
            values.append(value)

    if not values:
        raise DataError(f"{path} holds no rows", 2)
    return codec.Signal(np.asarray(timestamps, dtype=np.int64), np.asarray(values))


def write_signal_csv(path, signal):
    signal = codec.as_signal(signal)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        handle.write("timestamp,value\n")
        for timestamp, value in zip(signal.timestamps, signal.values):
            handle.write(f"{int(timestamp)},{float(value)!r}\n")


def load_ground_truth(path):
    """Read ``[{"start": ..., "end": ...}, ...]`` into sorted intervals."""
    try:
        with open(path, encoding="utf-8") as handle:
            raw = json.load(handle)
    except json.JSONDecodeError as error:
        raise DataError(f"{path}: {error.msg}", error.lineno) from error

    if not isinstance(raw, list):
        raise DataError(f"{path}: expected a JSON array of intervals")
    intervals = []
    for position, item in enumerate(raw):
        try:
            start, end = item["start"], item["end"]
        except (KeyError, TypeError) as error:
            raise DataError(f"{path}: entry {position} lacks start/end") from error
        if not isinstance(start, int) or not isinstance(end, int) or end < start:
            raise DataError(f"{path}: entry {position} has invalid bounds {start}-{end}")
        intervals.append(AnomalyInterval(start, end))

    return sorted(intervals, key=lambda interval: interval.start)


def write_ground_truth(path, intervals):
    items = [{"start": int(i.start), "end": int(i.end)} for i in map(as_interval, intervals)]
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(items, handle)
        handle.write("\n")
