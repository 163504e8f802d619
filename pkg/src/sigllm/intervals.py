"""Anomaly intervals and the result type shared by all pipelines."""

from dataclasses import dataclass, field
from typing import Any, Dict, List

import numpy as np


@dataclass(frozen=True)
class AnomalyInterval:
    """Inclusive range of positions flagged as anomalous.

    ``start`` and ``end`` are 0-based indices into the signal unless the
    interval was converted to timestamps.
    """

    start: int
    end: int
    severity: float = 0.0

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError(f"interval end {self.end} precedes start {self.start}")

    def overlaps(self, other):
        return self.start <= other.end and other.start <= self.end

    def to_dict(self):
        return {"start": int(self.start), "end": int(self.end),
                "severity": float(self.severity)}


@dataclass
class Detections:
    """Intervals found in one signal plus whatever the pipeline wants to report."""

    intervals: List[AnomalyInterval]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.intervals)

    def __len__(self):
        return len(self.intervals)


def as_interval(item):
    if isinstance(item, AnomalyInterval):
        return item
    if isinstance(item, dict):
        return AnomalyInterval(int(item["start"]), int(item["end"]),
                               float(item.get("severity", 0.0)))
    start, end = item[0], item[1]
    severity = item[2] if len(item) > 2 else 0.0
    return AnomalyInterval(int(start), int(end), float(severity))


def mask_to_intervals(mask, scores=None, index=None):
    """Turn runs of ``True`` into intervals.

    Args:
        mask (array-like of bool):
            Flags, possibly over a subset of the signal positions.
        scores (array-like or None):
            Per position severity; an interval gets the maximum of its run.
        index (array-like of int or None):
            Signal position of each mask entry. Runs are split wherever the
            positions are not consecutive. Identity when omitted.

    Returns:
        list of AnomalyInterval
    """
    mask = np.asarray(mask, dtype=bool)
    positions = np.arange(len(mask)) if index is None else np.asarray(index)
    scores = np.zeros(len(mask)) if scores is None else np.asarray(scores, dtype=float)

    intervals = []
    run = None
    for i in range(len(mask)):
        if not mask[i]:
            run = None
            continue
        if run is not None and positions[i] == positions[run[-1]] + 1:
            run.append(i)
            continue
        run = [i]
        intervals.append(run)

    return [
        AnomalyInterval(int(positions[run[0]]), int(positions[run[-1]]),
                        float(np.max(scores[run])))
        for run in intervals
    ]


def intervals_to_mask(intervals, length):
    mask = np.zeros(length, dtype=bool)
    for interval in intervals:
        mask[interval.start:interval.end + 1] = True
    return mask
