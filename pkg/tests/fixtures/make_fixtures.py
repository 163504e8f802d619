"""Regenerate the replay fixtures.

Run from anywhere with ``python3 tests/fixtures/make_fixtures.py``. Only do
this when the record format or a pipeline changes on purpose; the golden
records are regression baselines.

* detector: transcript recorded from the oracle stub forecasting the clean
  reference of a sine with two spikes.
* prompter: transcript written out here, with answers in the shapes models
  actually give (correct values, stray values, prose, over-eager lists).
"""

import json
import math
import os
from pathlib import Path

import numpy as np

from sigllm import codec
from sigllm.cli import main
from sigllm.evaluation import write_ground_truth, write_signal_csv
from sigllm.intervals import AnomalyInterval
from sigllm.prompter import build_prompt

HERE = Path(__file__).parent
START = 1_400_000_000
STEP = 300


def sine(length, period):
    return np.array([math.sin(2 * math.pi * t / period) for t in range(length)])


def detector_fixtures():
    reference = sine(300, 50)
    observed = reference.copy()
    observed[120] += 8.0
    observed[230] -= 8.0
    timestamps = START + STEP * np.arange(300)
    write_signal_csv(HERE / "detector_signal.csv", codec.Signal(timestamps, observed))
    write_signal_csv(HERE / "detector_reference.csv", codec.Signal(timestamps, reference))
    truth = [AnomalyInterval(int(timestamps[t]), int(timestamps[t])) for t in (120, 230)]
    write_ground_truth(HERE / "detector_truth.json", truth)

    transcript = HERE / "detector_transcript.jsonl"
    common = ["detect", "detector_signal.csv", "--pipeline", "detector", "--window", "40",
              "--samples", "5", "--seed", "7"]
    assert main(common + ["--backend", "oracle", "--reference", "detector_reference.csv",
                          "--sigma", "0.01", "--record", transcript.name,
                          "--out", os.devnull]) == 0
    assert main(common + ["--backend", "replay", "--transcript", transcript.name,
                          "--out", "detector_record.json"]) == 0


def prompter_answers(window, rng, n_samples):
    """Mostly right, sometimes noisy, occasionally useless."""
    window = [int(v) for v in window]
    median = sorted(window)[len(window) // 2]
    outliers = [str(v) for v in window if v > median + 25]
    answers = []
    for _ in range(n_samples):
        roll = rng.random()
        if roll < 0.1:
            answers.append("The sequence looks normal to me.")
        elif roll < 0.2:
            answers.append(",".join(str(v) for v in window[:len(window) * 2 // 3]))
        elif outliers and roll < 0.85:
            extra = [str(window[int(rng.integers(len(window)))])] if roll > 0.7 else []
            answers.append(",".join(outliers + extra))
        else:
            answers.append(str(int(rng.integers(0, 1000))))
    return answers


def prompter_fixtures():
    values = 50 + 10 * sine(120, 30)
    values[47] = 95.0
    values[48] = 93.0
    timestamps = START + STEP * np.arange(120)
    write_signal_csv(HERE / "prompter_signal.csv", codec.Signal(timestamps, values))
    write_ground_truth(HERE / "prompter_truth.json",
                       [AnomalyInterval(int(timestamps[47]), int(timestamps[48]))])

    quantized = codec.encode(values, 0)
    windows = codec.make_windows(quantized.values, 20, 10)
    rng = np.random.default_rng(11)
    entries = []
    for window in windows.windows:
        context = build_prompt(codec.serialize_window(window))
        if len(set(window.tolist())) == 1:
            entries.append({"context": context,
                            "error": {"kind": "repetitive", "message": "repetitive patterns"}})
        else:
            entries.append({"context": context, "samples": prompter_answers(window, rng, 10)})
    entries.sort(key=lambda entry: entry["context"])
    with open(HERE / "prompter_transcript.jsonl", "w", encoding="utf-8") as handle:
        for entry in entries:
            handle.write(json.dumps(entry, sort_keys=True) + "\n")

    assert main(["detect", "prompter_signal.csv", "--pipeline", "prompter", "--window", "20",
                 "--step", "10", "--decimals", "0", "--seed", "0", "--backend", "replay",
                 "--transcript", "prompter_transcript.jsonl",
                 "--out", "prompter_record.json"]) == 0


if __name__ == "__main__":
    os.chdir(HERE)
    detector_fixtures()
    prompter_fixtures()
