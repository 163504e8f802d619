import json
import subprocess
import sys
from pathlib import Path

import httpx
import pytest

from sigllm import cli
from sigllm.cli import EXIT_BACKEND, EXIT_CONFIG, EXIT_DATA, EXIT_OK, main

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def in_fixtures(monkeypatch):
    monkeypatch.chdir(FIXTURES)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_convert_worked_example(tmp_path, capsys):
    path = write(tmp_path / "s.csv",
                 "timestamp,value\n1,0.2437\n2,0.3087\n3,0.002\n4,0.462\n")
    assert main(["convert", path, "--decimals", "3", "--no-scale"]) == EXIT_OK
    assert capsys.readouterr().out == "244,309,2,462\n"
    assert main(["convert", path, "--decimals", "3", "--no-scale", "--space"]) == EXIT_OK
    assert capsys.readouterr().out == "2 4 4 , 3 0 9 , 2 , 4 6 2\n"


def test_convert_windows(tmp_path, capsys):
    path = write(tmp_path / "s.csv", "timestamp,value\n" + "".join(
        f"{t},{t}\n" for t in range(6)))
    assert main(["convert", path, "--decimals", "0", "--window", "4", "--step", "2"]) == 0
    assert capsys.readouterr().out == "0,1,2,3\n2,3,4,5\n4,5\n"


def test_convert_empty_file(tmp_path, capsys):
    assert main(["convert", write(tmp_path / "s.csv", "")]) == EXIT_DATA
    assert "data error" in capsys.readouterr().err


def test_convert_missing_file(tmp_path):
    assert main(["convert", str(tmp_path / "nope.csv")]) == EXIT_DATA


@pytest.mark.parametrize("name", ["detector", "prompter"])
def test_replay_reproduces_golden_record(in_fixtures, tmp_path, name):
    out = tmp_path / "record.json"
    args = ["detect", f"{name}_signal.csv", "--pipeline", name, "--backend", "replay",
            "--transcript", f"{name}_transcript.jsonl", "--out", str(out)]
    if name == "detector":
        args += ["--window", "40", "--samples", "5", "--seed", "7"]
    else:
        args += ["--window", "20", "--step", "10", "--decimals", "0", "--seed", "0"]
    assert main(args) == EXIT_OK
    assert out.read_bytes() == (FIXTURES / f"{name}_record.json").read_bytes()


def test_oracle_run_is_byte_reproducible(in_fixtures, tmp_path):
    outputs = []
    for attempt in range(2):
        out = tmp_path / f"r{attempt}.json"
        assert main(["detect", "detector_signal.csv", "--pipeline", "detector",
                     "--backend", "oracle", "--reference", "detector_reference.csv",
                     "--window", "40", "--samples", "3", "--seed", "5",
                     "--out", str(out)]) == EXIT_OK
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]


def test_detect_with_config_file_and_debug_csv(in_fixtures, tmp_path):
    config = write(tmp_path / "run.json", json.dumps({
        "pipeline": "detector",
        "backend": {"kind": "replay", "transcript": "detector_transcript.jsonl"},
        "detector": {"window_size": 40, "n_samples": 5},
        "seed": 7,
    }))
    out, debug = tmp_path / "record.json", tmp_path / "debug.csv"
    assert main(["detect", "detector_signal.csv", "--config", config, "--out", str(out),
                 "--debug-csv", str(debug), "--timing"]) == EXIT_OK
    record = json.loads(out.read_text())
    golden = json.loads((FIXTURES / "detector_record.json").read_text())
    assert record["intervals"] == golden["intervals"]
    assert "seconds" in record["metadata"]["timing"]
    assert len(debug.read_text().splitlines()) == 301


def test_mavg_constant_signal(tmp_path, capsys):
    path = write(tmp_path / "s.csv", "timestamp,value\n" + "".join(
        f"{t},3.0\n" for t in range(50)))
    assert main(["detect", path, "--pipeline", "mavg"]) == EXIT_OK
    record = json.loads(capsys.readouterr().out)
    assert record["intervals"] == [] and record["partial"] is False
    assert record["config"]["settings"]["ma_window"] == 10


def test_backend_failure_flushes_partial_record(in_fixtures, tmp_path, monkeypatch):
    monkeypatch.setattr("sigllm.backend.time.sleep", lambda seconds: None)
    out = tmp_path / "record.json"
    code = main(["detect", "detector_signal.csv", "--pipeline", "detector",
                 "--backend", "http", "--endpoint", "http://127.0.0.1:9/v1", "--model", "m",
                 "--window", "40", "--samples", "1", "--out", str(out)])
    assert code == EXIT_BACKEND
    record = json.loads(out.read_text())
    assert record["partial"] is True and "error" in record


def test_replay_miss_is_backend_failure(in_fixtures, tmp_path):
    empty = write(tmp_path / "empty.jsonl", "")
    assert main(["detect", "detector_signal.csv", "--pipeline", "detector", "--backend",
                 "replay", "--transcript", empty, "--window", "40",
                 "--out", str(tmp_path / "r.json")]) == EXIT_BACKEND


@pytest.mark.parametrize("extra", [
    ["--alpha", "1.5", "--pipeline", "prompter"],
    ["--backend", "http"],
    ["--config", "no-such-config.json"],
    ["--pipeline", "detector", "--window", "2", "--horizon", "5"],
])
def test_configuration_errors(in_fixtures, extra):
    args = ["detect", "detector_signal.csv", "--backend", "persistence"] + extra
    assert main(args) == EXIT_CONFIG


def test_unknown_flag_exits_with_config_status(capsys):
    with pytest.raises(SystemExit) as info:
        main(["detect", "x.csv", "--bogus"])
    assert info.value.code == EXIT_CONFIG


def test_sweep_prompter_grid(in_fixtures, tmp_path):
    out = tmp_path / "sweep.jsonl"
    assert main(["sweep", "prompter_signal.csv", "--pipeline", "prompter", "--backend",
                 "replay", "--transcript", "prompter_transcript.jsonl", "--window", "20",
                 "--step", "10", "--decimals", "0", "--out", str(out)]) == EXIT_OK
    records = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(records) == 100
    cells = {(r["config"]["settings"]["alpha"], r["config"]["settings"]["beta"]): r
             for r in records}
    golden = json.loads((FIXTURES / "prompter_record.json").read_text())
    assert cells[(0.4, 0.9)]["intervals"] == golden["intervals"]
    counts = [len(cells[(a, 0.1)]["intervals"]) for a in cli.GRID]
    assert counts[0] >= counts[-1]


def test_sweep_detector_ablation(in_fixtures, tmp_path):
    out = tmp_path / "sweep.jsonl"
    assert main(["sweep", "detector_signal.csv", "--pipeline", "detector", "--backend",
                 "replay", "--transcript", "detector_transcript.jsonl", "--window", "40",
                 "--samples", "5", "--out", str(out)]) == EXIT_OK
    records = [json.loads(line) for line in out.read_text().splitlines()]
    variants = {(r["config"]["settings"]["statistic"], r["config"]["settings"]["error"],
                 r["config"]["settings"]["smoothing"]) for r in records}
    assert len(records) == len(variants) == 16


def test_evaluate_self_score(in_fixtures, capsys):
    truth = json.loads((FIXTURES / "detector_truth.json").read_text())
    record = json.loads((FIXTURES / "detector_record.json").read_text())
    assert [(i["start"], i["end"]) for i in record["intervals"]] == [
        (t["start"], t["end"]) for t in truth]
    assert main(["evaluate", "detector_record.json", "detector_truth.json"]) == EXIT_OK
    output = capsys.readouterr().out
    report = json.loads(output[output.index("{"):])
    assert report["f1"] == 1.0
    assert "TOTAL" in output


def test_evaluate_disjoint(tmp_path, capsys):
    detections = write(tmp_path / "d.json", json.dumps(
        {"signal_id": "s", "intervals": [{"start": 1, "end": 2}]}))
    truth = write(tmp_path / "t.json", json.dumps([{"start": 10, "end": 20}]))
    out = tmp_path / "report.json"
    assert main(["evaluate", detections, truth, "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert (report["tp"], report["fp"], report["fn"], report["f1"]) == (0, 1, 1, 0.0)


def test_evaluate_directories(tmp_path, capsys):
    (tmp_path / "det").mkdir()
    (tmp_path / "truth").mkdir()
    for name, found in (("a", True), ("b", False)):
        intervals = [{"start": 5, "end": 6}] if found else []
        write(tmp_path / "det" / f"{name}.json",
              json.dumps({"signal_id": name, "intervals": intervals}))
        write(tmp_path / "truth" / f"{name}.json", json.dumps([{"start": 5, "end": 5}]))
    out = tmp_path / "report.json"
    assert main(["evaluate", str(tmp_path / "det"), str(tmp_path / "truth"),
                 "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert (report["tp"], report["fn"]) == (1, 1)
    assert set(report["signals"]) == {"a", "b"}


def test_evaluate_mismatched_ids(tmp_path, capsys):
    detections = write(tmp_path / "d.json", json.dumps([
        {"signal_id": "a", "intervals": []}, {"signal_id": "b", "intervals": []}]))
    truth = write(tmp_path / "t.json", json.dumps({"a": [], "c": []}))
    assert main(["evaluate", detections, truth]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "b" in err and "c" in err


def test_module_entry_point(tmp_path):
    path = write(tmp_path / "s.csv", "timestamp,value\n1,1.5\n2,2.5\n")
    result = subprocess.run([sys.executable, "-m", "sigllm", "convert", path, "--decimals", "1"],
                            capture_output=True, text=True, check=False)
    assert result.returncode == 0
    assert result.stdout == "0,10\n"


def test_api_key_never_lands_in_record(in_fixtures, tmp_path, monkeypatch):
    monkeypatch.setenv("SIGLLM_API_KEY", "sk-very-secret")
    transport = httpx.MockTransport(lambda request: httpx.Response(503))
    monkeypatch.setattr("sigllm.backend.time.sleep", lambda seconds: None)
    original = httpx.Client

    def client(*args, **kwargs):
        kwargs["transport"] = transport
        return original(*args, **kwargs)

    monkeypatch.setattr(httpx, "Client", client)
    out = tmp_path / "record.json"
    code = main(["detect", "detector_signal.csv", "--pipeline", "detector", "--backend", "http",
                 "--endpoint", "http://model.test/v1", "--model", "m", "--window", "40",
                 "--samples", "1", "--out", str(out)])
    assert code == EXIT_BACKEND
    assert "sk-very-secret" not in out.read_text()
