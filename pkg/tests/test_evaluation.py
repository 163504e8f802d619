import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_confusion, sine_with_spikes
from sigllm import codec
from sigllm.errors import DataError, InvalidInputError
from sigllm.evaluation import (
    Dataset, ScoreReport, aggregate_report, f1_score, load_ground_truth, load_signal_csv,
    moving_average_detect, moving_average_forecast, overlap_confusion, score_signal,
    write_ground_truth, write_signal_csv)
from sigllm.intervals import AnomalyInterval


def test_partial_overlap_counts():
    assert overlap_confusion([(10, 20)], [(15, 30)]) == (1, 0, 0)


def test_no_overlap():
    assert overlap_confusion([(1, 2), (50, 60)], [(10, 20)]) == (0, 2, 1)


def test_touching_endpoints_overlap():
    assert overlap_confusion([(5, 10)], [(10, 12)]) == (1, 0, 0)


def intervals(draw_max=80):
    pair = st.tuples(st.integers(0, draw_max), st.integers(0, 10)).map(
        lambda p: (p[0], p[0] + p[1]))
    return st.lists(pair, max_size=8)


@given(intervals(), intervals())
def test_confusion_matches_brute_force(predicted, truth):
    assert overlap_confusion(predicted, truth) == brute_confusion(predicted, truth)


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 5)), min_size=1, max_size=6))
def test_self_score_is_perfect(pairs):
    truth = [(start, start + width) for start, width in pairs]
    assert score_signal(truth, truth).f1 == 1.0


@given(intervals(), intervals(), st.integers(0, 80), st.integers(0, 10))
def test_overlapping_prediction_never_lowers_recall(predicted, truth, start, width):
    before = score_signal(predicted, truth).recall
    after = score_signal(predicted + [(start, start + width)], truth).recall
    assert after >= before


@pytest.mark.parametrize("counts, expected", [
    ((1, 0, 0), (1.0, 1.0, 1.0)),
    ((0, 2, 1), (0.0, 0.0, 0.0)),
    ((0, 0, 0), (0.0, 0.0, 0.0)),
])
def test_f1_examples(counts, expected):
    assert f1_score(*counts) == expected


def test_f1_mixed_counts():
    precision, recall, f1 = f1_score(3, 1, 2)
    assert (precision, recall) == (0.75, 0.6)
    assert f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    assert round(f1, 3) == 0.667


def test_f1_rejects_negative_counts():
    with pytest.raises(InvalidInputError):
        f1_score(-1, 0, 0)


def test_aggregate_is_micro():
    report = aggregate_report({"a": ScoreReport.from_counts(1, 0, 0),
                               "b": ScoreReport.from_counts(0, 1, 1)})
    assert (report.tp, report.fp, report.fn) == (1, 1, 1)
    assert report.f1 == 0.5
    assert set(report.to_dict()["signals"]) == {"a", "b"}


def test_aggregate_single_and_empty():
    single = ScoreReport.from_counts(3, 1, 2)
    assert aggregate_report([single]).f1 == single.f1
    empty = aggregate_report([])
    assert (empty.tp, empty.fp, empty.fn, empty.f1) == (0, 0, 0, 0.0)


@given(st.lists(st.tuples(intervals(40), intervals(40)), min_size=1, max_size=5))
def test_micro_equals_concatenation_with_offsets(per_signal):
    reports = [score_signal(p, t) for p, t in per_signal]
    shifted_p, shifted_t = [], []
    for position, (p, t) in enumerate(per_signal):
        offset = 1000 * position
        shifted_p += [(a + offset, b + offset) for a, b in p]
        shifted_t += [(a + offset, b + offset) for a, b in t]
    combined = score_signal(shifted_p, shifted_t)
    total = aggregate_report(reports)
    assert (total.tp, total.fp, total.fn) == (combined.tp, combined.fp, combined.fn)


def test_report_table_layout():
    table = aggregate_report({"sig": ScoreReport.from_counts(1, 0, 0)}).table().splitlines()
    assert table[0].split() == ["signal", "tp", "fp", "fn", "precision", "recall", "f1"]
    assert table[-1].split() == ["TOTAL", "1", "0", "0", "1.000", "1.000", "1.000"]


def test_moving_average_example():
    predicted = moving_average_forecast([1, 2, 3, 4], 2)
    assert predicted[2] == 1.5
    assert np.isnan(predicted[:2]).all()
    assert predicted[3] == 2.5


def test_moving_average_rejects_short_signal():
    with pytest.raises(InvalidInputError):
        moving_average_forecast([1.0, 2.0], 5)


def test_moving_average_constant_signal():
    assert moving_average_detect(np.full(300, 2.5)).intervals == []


def test_moving_average_finds_spikes():
    spikes = (300, 700, 1100, 1500, 1900)
    observed, _ = sine_with_spikes(spikes=spikes)
    detections = moving_average_detect(observed)
    tp, fp, fn = overlap_confusion(detections, [(s, s) for s in spikes])
    assert tp == 5 and fn == 0


def test_csv_example(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("timestamp,value\n1,0.5\n2,0.7")
    signal = load_signal_csv(path)
    assert signal.timestamps.tolist() == [1, 2]
    assert signal.values.tolist() == [0.5, 0.7]


@pytest.mark.parametrize("text, line", [
    ("", 1),
    ("time,value\n1,2\n", 1),
    ("timestamp,value\n", 2),
    ("timestamp,value\n1,0.5\n2,abc\n", 3),
    ("timestamp,value\n1,0.5\n1,0.6\n", 3),
    ("timestamp,value\n1,nan\n", 2),
])
def test_csv_errors_carry_line(tmp_path, text, line):
    path = tmp_path / "s.csv"
    path.write_text(text)
    with pytest.raises(DataError) as info:
        load_signal_csv(path)
    assert info.value.line == line


@given(st.lists(st.floats(-1e9, 1e9, allow_nan=False), min_size=1, max_size=30))
def test_csv_round_trip(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("csv") / "s.csv"
    signal = codec.Signal(np.arange(len(values)) * 60 + 1000, np.array(values))
    write_signal_csv(path, signal)
    loaded = load_signal_csv(path)
    assert loaded.timestamps.tolist() == signal.timestamps.tolist()
    assert loaded.values.tolist() == signal.values.tolist()


def test_ground_truth_example(tmp_path):
    path = tmp_path / "t.json"
    path.write_text('[{"start":1392768000,"end":1392940800}]')
    assert load_ground_truth(path) == [AnomalyInterval(1392768000, 1392940800)]


def test_ground_truth_round_trip(tmp_path):
    path = tmp_path / "t.json"
    truth = [AnomalyInterval(1, 4), AnomalyInterval(9, 9)]
    write_ground_truth(path, truth)
    assert load_ground_truth(path) == truth


@pytest.mark.parametrize("text", ['{"start": 1}', '[{"start": 1}]', '[{"start": 5, "end": 1}]',
                                  '[{"start": 1.5, "end": 2}]', '[{"start": 1,'])
def test_ground_truth_errors(tmp_path, text):
    path = tmp_path / "t.json"
    path.write_text(text)
    with pytest.raises(DataError):
        load_ground_truth(path)


def test_dataset_load_and_validation(tmp_path):
    write_signal_csv(tmp_path / "a.csv", codec.Signal.from_values([1.0, 2.0, 3.0], start=10))
    (tmp_path / "a.json").write_text(json.dumps([{"start": 11, "end": 12}]))
    write_signal_csv(tmp_path / "b.csv", codec.Signal.from_values([0.0, 1.0]))
    dataset = Dataset.load(tmp_path, "demo")
    assert sorted(dataset.signals) == ["a", "b"]
    assert dataset.ground_truth == {"a": [AnomalyInterval(11, 12)]}

    with pytest.raises(InvalidInputError):
        Dataset("x", {"a": dataset.signals["a"]}, {"a": [AnomalyInterval(5, 20)]})
    with pytest.raises(InvalidInputError):
        Dataset("x", {"a": dataset.signals["a"]},
                {"a": [AnomalyInterval(10, 11), AnomalyInterval(11, 12)]})
