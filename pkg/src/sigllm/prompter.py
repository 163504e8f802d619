"""Prompt based anomaly detection.

Each window is shown to the model with an instruction to list the anomalous
values. The values are mapped back to window positions, votes are merged
across samples (``alpha``) and then across overlapping windows (``beta``).
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Set

import numpy as np

from sigllm import codec
from sigllm.backend import CompletionRequest, map_requests
from sigllm.errors import InvalidInputError, RepetitiveInputError
from sigllm.intervals import Detections, mask_to_intervals

LOGGER = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "You are an exceptionally intelligent assistant that detects anomalies in time "
    "series data by listing all the anomalies. Below is a sequence, please return the "
    "anomalies in that sequence. Do not say anything like 'the anomalous indices in the "
    "sequence are', just return the numbers. Sequence: {sequence}."
)

# Absorbs float noise in ratios such as 4 / 10 >= 0.4.
_EPS = 1e-9


@dataclass
class PrompterConfig:
    window_size: int = 200
    step_size: int = 40
    n_samples: int = 10
    alpha: float = 0.4
    beta: float = 0.9
    saturation_cutoff: float = 0.5
    decimals: Optional[int] = None
    space_digits: bool = False
    temperature: float = 1.0
    numeric_only: bool = True
    max_tokens: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.alpha <= 1 or not 0 <= self.beta <= 1:
            raise InvalidInputError("alpha and beta must lie in [0, 1]")
        if not self.window_size > self.step_size >= 1:
            raise InvalidInputError("need window_size > step_size >= 1")
        if self.n_samples < 1:
            raise InvalidInputError("n_samples must be at least 1")
        if not 0 < self.saturation_cutoff <= 1:
            raise InvalidInputError("saturation_cutoff must lie in (0, 1]")

    @classmethod
    def long_context(cls, **overrides):
        """Settings used for long signals: windows of 500 moved by 100."""
        return cls(**{"window_size": 500, "step_size": 100, **overrides})

    def to_dict(self):
        return asdict(self)


@dataclass
class WindowVote:
    """What the samples of one window flagged.

    ``discarded`` is ``None`` for a usable vote, otherwise one of
    ``"saturated"``, ``"repetitive"`` or ``"unparseable"``.
    """

    index: int
    start: int
    length: int
    flagged: List[Set[int]] = field(default_factory=list)
    discarded: Optional[str] = None
    ignored_values: int = 0


def build_prompt(window_text):
    if not window_text or not window_text.strip():
        raise InvalidInputError("cannot build a prompt for an empty window")
    return PROMPT_TEMPLATE.format(sequence=window_text)


def values_to_indices(window, flagged_values):
    """Positions of the window holding any of the flagged values.

    Every occurrence counts. Values absent from the window are ignored.

    Returns:
        tuple:
            The set of positions and the number of ignored values.
    """
    positions = {}
    for position, value in enumerate(window):
        positions.setdefault(int(value), []).append(position)

    indices = set()
    ignored = 0
    for value in flagged_values:
        hits = positions.get(int(value))
        if hits is None:
            ignored += 1
        else:
            indices.update(hits)

    return indices, ignored


def filter_saturated(vote, cutoff=0.5):
    """Discard a window when every sample flags more than ``cutoff`` of it."""
    if vote.discarded or not vote.flagged:
        return vote
    limit = cutoff * vote.length
    if all(len(indices) > limit for indices in vote.flagged):
        vote.discarded = "saturated"
    return vote


def merge_samples(vote, alpha, n_samples=None):
    """Keep the window positions flagged by at least ``alpha`` of the samples."""
    if vote.discarded:
        raise InvalidInputError(f"window {vote.index} was discarded ({vote.discarded})")
    n_samples = n_samples or len(vote.flagged)

    counts = {}
    for indices in vote.flagged:
        for index in indices:
            counts[index] = counts.get(index, 0) + 1

    return {index for index, count in counts.items() if count / n_samples >= alpha - _EPS}


def _tally(per_window, window_size, length):
    votes = np.zeros(length)
    cover = np.zeros(length)
    for start, indices in per_window:
        stop = min(start + window_size, length)
        cover[start:stop] += 1
        for index in indices:
            if start + index < stop:
                votes[start + index] += 1
    return votes, cover


def window_vote_fractions(per_window, window_size, length, step_size=None):
    """Share of covering windows that flagged each position.

    Args:
        per_window (list):
            ``(start, indices)`` pairs of the usable windows, where
            ``indices`` are positions inside the window.
        window_size (int):
            Nominal window length; windows are cut at ``length``.
        length (int):
            Length of the series.
        step_size (int or None):
            When given, the denominator is capped at the nominal overlap
            ``ceil(window_size / step_size)``.

    Returns:
        ndarray:
            Fraction per position, 0 where no usable window covers it.
    """
    votes, cover = _tally(per_window, window_size, length)
    if step_size is not None:
        cover = np.minimum(cover, -(-window_size // step_size))

    fractions = np.zeros(length)
    np.divide(votes, cover, out=fractions, where=cover > 0)
    return fractions


def merge_windows(per_window, window_size, step_size, length, beta):
    """Global positions flagged by at least ``beta`` of the windows covering them.

    The denominator is the number of usable windows that actually cover the
    position, capped at the nominal overlap ``ceil(window_size / step_size)``.
    A position no window flagged is never kept, whatever ``beta``.
    """
    fractions = window_vote_fractions(per_window, window_size, length, step_size)
    keep = (fractions > 0) & (fractions >= beta - _EPS)
    return set(np.flatnonzero(keep).tolist())


def _ask(window, start, index, config, backend, max_tokens):
    vote = WindowVote(index, start, len(window))
    text = codec.serialize_window(window, config.space_digits)
    request = CompletionRequest(
        context=build_prompt(text),
        n_samples=config.n_samples,
        max_tokens=max_tokens,
        temperature=config.temperature,
        numeric_only=config.numeric_only,
    )
    try:
        response = backend.complete(request)
    except RepetitiveInputError:
        vote.discarded = "repetitive"
        return vote, {}

    unparseable = 0
    for sample in response.samples:
        values, discarded = codec.parse_numeric_sequence(sample)
        if not values and discarded:
            unparseable += 1
        indices, ignored = values_to_indices(window, values)
        vote.ignored_values += ignored
        vote.flagged.append(indices)

    if unparseable == len(response.samples):
        vote.discarded = "unparseable"
    return filter_saturated(vote, config.saturation_cutoff), response.usage


def collect_votes(signal, config, backend):
    """Query the backend for every window of ``signal``.

    Returns:
        tuple:
            ``WindowVote`` per window (in window order) and a metadata dict.
    """
    signal = codec.as_signal(signal)
    quantized = codec.encode(signal, config.decimals)
    windows = codec.make_windows(quantized.values, config.window_size, config.step_size)
    per_value = 2 * codec.max_digits(quantized.values) + 2
    max_tokens = config.max_tokens or config.window_size * per_value

    def run(item):
        index, (start, window) = item
        return _ask(window, start, index, config, backend, max_tokens)

    items = list(enumerate(zip(windows.starts, windows.windows)))
    outcomes = map_requests(run, items, getattr(backend, "parallelism", 1))

    votes = [vote for vote, _ in outcomes]
    metadata = {
        "decimals": quantized.decimals,
        "windows": len(votes),
        "discarded_windows": {
            reason: [v.start for v in votes if v.discarded == reason]
            for reason in ("saturated", "repetitive", "unparseable")
        },
        "ignored_values": sum(v.ignored_values for v in votes),
        "usage": {
            "prompt_tokens": sum(u.get("prompt_tokens", 0) for _, u in outcomes),
            "completion_tokens": sum(u.get("completion_tokens", 0) for _, u in outcomes),
        },
    }
    return votes, metadata


def merge_votes(votes, length, config):
    """Apply the alpha and beta rules and build intervals.

    An interval's severity is the largest window vote fraction inside it.
    """
    per_window = [(vote.start, merge_samples(vote, config.alpha, config.n_samples))
                  for vote in votes if not vote.discarded]
    flagged = merge_windows(per_window, config.window_size, config.step_size, length,
                            config.beta)
    mask = np.zeros(length, dtype=bool)
    mask[sorted(flagged)] = True
    fractions = window_vote_fractions(per_window, config.window_size, length,
                                      config.step_size)
    return mask_to_intervals(mask, fractions)


def run_prompter(signal, config=None, backend=None):
    """Prompt based detection end to end.

    Windows refused as repetitive count as having nothing to report.

    Returns:
        Detections
    """
    config = config or PrompterConfig()
    signal = codec.as_signal(signal)
    began = time.perf_counter()
    votes, metadata = collect_votes(signal, config, backend)
    intervals = merge_votes(votes, len(signal), config)
    metadata["timing"] = {"seconds": time.perf_counter() - began}
    LOGGER.info("prompter found %d intervals over %d windows", len(intervals), len(votes))
    return Detections(intervals, metadata)
