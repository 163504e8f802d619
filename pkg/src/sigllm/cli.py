"""Command line entry point: ``sigllm convert | detect | sweep | evaluate``.

Settings come from an optional JSON config file; flags override it.

Exit codes: 0 success, 2 configuration error, 3 backend failure, 4 data error.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from sigllm import codec, evaluation
from sigllm.backend import BackendDescriptor, RecordingBackend, make_backend
from sigllm.detector import (
    ERROR_KINDS, STATISTICS, DetectorConfig, detect_from_ensemble, forecast_signal,
    run_detector, write_debug_csv)
from sigllm.errors import BackendError, DataError, InvalidInputError
from sigllm.intervals import Detections, as_interval
from sigllm.prompter import PrompterConfig, collect_votes, merge_votes, run_prompter

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_DATA = 4

PIPELINES = ("prompter", "detector", "mavg")
GRID = [round(0.1 * i, 1) for i in range(1, 11)]


class ConfigError(InvalidInputError):
    pass


def _load_config_file(path):
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as handle:
            config = json.load(handle)
    except (OSError, json.JSONDecodeError) as error:
        raise ConfigError(f"cannot read config {path}: {error}") from error
    if not isinstance(config, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return config


def _overrides(args, mapping):
    return {key: getattr(args, flag) for flag, key in mapping.items()
            if getattr(args, flag, None) is not None}


def resolve_config(args):
    """Merge the config file and the flags into a plain dict snapshot.

    The snapshot holds everything needed to re-run the same experiment.
    """
    config = _load_config_file(getattr(args, "config", None))
    pipeline = args.pipeline or config.get("pipeline", "detector")
    if pipeline not in PIPELINES:
        raise ConfigError(f"unknown pipeline {pipeline!r}")

    backend = dict(config.get("backend", {}))
    backend.update(_overrides(args, {
        "backend": "kind", "endpoint": "url", "model": "model", "transcript": "transcript",
        "sigma": "sigma", "parallelism": "parallelism", "chat": "chat",
        "logit_bias": "logit_bias", "chunked_tokenizer": "chunked_tokenizer",
    }))
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    backend["seed"] = seed

    settings = dict(config.get(pipeline, {}))
    codec_settings = config.get("codec", {})
    if "decimals" in codec_settings:
        settings["decimals"] = codec_settings["decimals"]
    if "space" in codec_settings:
        settings["space_digits"] = codec_settings["space"]

    common = {"window": "window_size", "step": "step_size", "samples": "n_samples",
              "decimals": "decimals", "space": "space_digits"}
    if pipeline == "prompter":
        settings.update(_overrides(args, {**common, "alpha": "alpha", "beta": "beta"}))
    elif pipeline == "detector":
        settings.update(_overrides(args, {
            **common, "horizon": "horizon", "statistic": "statistic", "error": "error"}))
        if args.no_smooth:
            settings["smoothing"] = False
    else:
        settings.update(_overrides(args, {"ma_window": "ma_window", "statistic": "statistic",
                                          "error": "error"}))
        if args.no_smooth:
            settings["smoothing"] = False

    reference = args.reference or config.get("reference")
    return {"pipeline": pipeline, "backend": backend, "settings": settings, "seed": seed,
            "reference": reference}


def _descriptor(snapshot):
    fields = {f.name for f in dataclasses.fields(BackendDescriptor)}
    unknown = set(snapshot["backend"]) - fields
    if unknown:
        raise ConfigError(f"unknown backend settings {sorted(unknown)}")
    try:
        return BackendDescriptor(**snapshot["backend"])
    except InvalidInputError as error:
        raise ConfigError(str(error)) from error


def _pipeline_config(snapshot, chunked_tokenizer):
    settings = dict(snapshot["settings"])
    pipeline = snapshot["pipeline"]
    ma_window = None
    if pipeline == "mavg":
        ma_window = settings.pop("ma_window", 10)
    else:
        settings.setdefault("space_digits", chunked_tokenizer)
    cls = PrompterConfig if pipeline == "prompter" else DetectorConfig
    try:
        return ma_window, cls(**settings)
    except (TypeError, InvalidInputError) as error:
        raise ConfigError(str(error)) from error


def _build_backend(snapshot, descriptor, signal, record_path=None):
    reference = None
    if descriptor.kind == "oracle":
        reference = signal
        if snapshot.get("reference"):
            reference = evaluation.load_signal_csv(snapshot["reference"])
    backend = make_backend(descriptor, observed=signal, reference=reference)
    if record_path:
        backend = RecordingBackend(backend, record_path)
    return backend


def interval_records(intervals, signal):
    """Intervals with both timestamps and indices, ready for JSON."""
    return [{
        "start": int(signal.timestamps[interval.start]),
        "end": int(signal.timestamps[interval.end]),
        "start_index": int(interval.start),
        "end_index": int(interval.end),
        "severity": float(interval.severity),
    } for interval in intervals]


def detection_record(signal_id, snapshot, signal, detections, include_timing=False,
                     partial=False, error=None):
    metadata = dict(detections.metadata) if detections is not None else {}
    if not include_timing:
        metadata.pop("timing", None)
    record = {
        "signal_id": signal_id,
        "pipeline": snapshot["pipeline"],
        "config": snapshot,
        "intervals": interval_records(detections.intervals, signal) if detections else [],
        "metadata": metadata,
        "partial": partial,
    }
    if error is not None:
        record["error"] = error
    return record


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(text, out):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_signal(path):
    return evaluation.load_signal_csv(path)


def cmd_convert(args):
    signal = _load_signal(args.signal)
    quantized = codec.encode(signal, args.decimals, shift=not args.no_scale)
    window = args.window or len(quantized)
    step = args.step or window
    windows = codec.make_windows(quantized.values, window, step)
    lines = [codec.serialize_window(w, bool(args.space)) for w in windows.windows]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _run(snapshot, signal, backend, pipeline_config, ma_window, debug):
    pipeline = snapshot["pipeline"]
    if pipeline == "prompter":
        return run_prompter(signal, pipeline_config, backend)
    if pipeline == "detector":
        return run_detector(signal, pipeline_config, backend, debug=debug)
    return evaluation.moving_average_detect(signal, ma_window, pipeline_config)


def cmd_detect(args):
    snapshot = resolve_config(args)
    signal = _load_signal(args.signal)
    signal_id = args.signal_id or Path(args.signal).stem
    descriptor = _descriptor(snapshot)
    ma_window, pipeline_config = _pipeline_config(snapshot, descriptor.chunked_tokenizer)
    snapshot["backend"] = descriptor.to_dict()
    snapshot["settings"] = pipeline_config.to_dict()
    if ma_window is not None:
        snapshot["settings"]["ma_window"] = ma_window

    backend = None
    if snapshot["pipeline"] != "mavg":
        backend = _build_backend(snapshot, descriptor, signal, args.record)

    debug = {} if args.debug_csv else None
    try:
        detections = _run(snapshot, signal, backend, pipeline_config, ma_window, debug)
    except BackendError as error:
        LOGGER.error("backend failure: %s", error)
        record = detection_record(signal_id, snapshot, signal, None, partial=True,
                                  error=str(error))
        _emit(dump_json(record), args.out)
        return EXIT_BACKEND
    finally:
        if isinstance(backend, RecordingBackend):
            backend.flush()

    if debug and "index" in debug:
        write_debug_csv(args.debug_csv, signal, debug)
    record = detection_record(signal_id, snapshot, signal, detections, args.timing)
    _emit(dump_json(record), args.out)
    return EXIT_OK


def sweep_records(snapshot, signal, signal_id, backend, pipeline_config):
    """One record per cell of the alpha/beta grid or the detector ablation grid.

    Model calls happen once; only the merging or post-processing varies.
    """
    records = []
    if snapshot["pipeline"] == "prompter":
        votes, metadata = collect_votes(signal, pipeline_config, backend)
        for alpha in GRID:
            for beta in GRID:
                cell = dataclasses.replace(pipeline_config, alpha=alpha, beta=beta)
                intervals = merge_votes(votes, len(signal), cell)
                cell_snapshot = {**snapshot, "settings": cell.to_dict()}
                detections = Detections(intervals, metadata)
                records.append(detection_record(signal_id, cell_snapshot, signal, detections))
        return records

    quantized, ensemble = forecast_signal(signal, pipeline_config, backend)
    for statistic in STATISTICS:
        for error in ERROR_KINDS:
            for smoothing in (True, False):
                cell = dataclasses.replace(pipeline_config, statistic=statistic, error=error,
                                           smoothing=smoothing)
                detections, _ = detect_from_ensemble(signal, quantized, ensemble, cell)
                cell_snapshot = {**snapshot, "settings": cell.to_dict()}
                records.append(detection_record(signal_id, cell_snapshot, signal, detections))
    return records


def cmd_sweep(args):
    snapshot = resolve_config(args)
    if snapshot["pipeline"] == "mavg":
        raise ConfigError("sweep supports the prompter and detector pipelines")
    signal = _load_signal(args.signal)
    signal_id = args.signal_id or Path(args.signal).stem
    descriptor = _descriptor(snapshot)
    _, pipeline_config = _pipeline_config(snapshot, descriptor.chunked_tokenizer)
    snapshot["backend"] = descriptor.to_dict()
    backend = _build_backend(snapshot, descriptor, signal, args.record)
    try:
        records = sweep_records(snapshot, signal, signal_id, backend, pipeline_config)
    except BackendError as error:
        LOGGER.error("backend failure: %s", error)
        return EXIT_BACKEND
    finally:
        if isinstance(backend, RecordingBackend):
            backend.flush()

    text = "".join(json.dumps(record, sort_keys=True) + "\n" for record in records)
    _emit(text, args.out)
    return EXIT_OK


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except json.JSONDecodeError as error:
        raise DataError(f"{path}: {error.msg}", error.lineno) from error


def load_detections(path):
    """Signal id to predicted intervals (timestamps) from one or many records."""
    path = Path(path)
    if path.is_dir():
        records = [_read_json(item) for item in sorted(path.glob("*.json"))]
    else:
        records = _read_json(path)
        if isinstance(records, dict):
            records = [records]
    try:
        return {record["signal_id"]: [as_interval(item) for item in record["intervals"]]
                for record in records}
    except (KeyError, TypeError) as error:
        raise DataError(f"{path}: not a detection record ({error})") from error


def load_truth(path):
    path = Path(path)
    if path.is_dir():
        return {item.stem: evaluation.load_ground_truth(item)
                for item in sorted(path.glob("*.json"))}

    raw = _read_json(path)
    if isinstance(raw, dict):
        return {signal_id: [as_interval(item) for item in items]
                for signal_id, items in raw.items()}
    return {path.stem: evaluation.load_ground_truth(path)}


def evaluate_files(detections_path, truth_path):
    predicted = load_detections(detections_path)
    truth = load_truth(truth_path)
    if len(predicted) == 1 and len(truth) == 1:
        (signal_id, intervals), = predicted.items()
        truth = {signal_id: next(iter(truth.values()))}

    missing_truth = sorted(set(predicted) - set(truth))
    missing_detections = sorted(set(truth) - set(predicted))
    if missing_truth or missing_detections:
        problems = []
        if missing_truth:
            problems.append(f"no ground truth for {', '.join(missing_truth)}")
        if missing_detections:
            problems.append(f"no detections for {', '.join(missing_detections)}")
        raise DataError("; ".join(problems))

    reports = {signal_id: evaluation.score_signal(predicted[signal_id], truth[signal_id])
               for signal_id in sorted(predicted)}
    return evaluation.aggregate_report(reports)


def cmd_evaluate(args):
    report = evaluate_files(args.detections, args.truth)
    text = dump_json(report.to_dict())
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(report.table())
    else:
        print(report.table())
        sys.stdout.write(text)
    return EXIT_OK


def _add_run_flags(parser):
    parser.add_argument("signal", help="CSV with columns timestamp,value")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--pipeline", choices=PIPELINES)
    parser.add_argument("--backend", choices=("http", "persistence", "oracle", "replay"))
    parser.add_argument("--endpoint", help="base URL of an OpenAI compatible API")
    parser.add_argument("--model")
    parser.add_argument("--chat", action="store_true", default=None,
                        help="use the chat completions route")
    parser.add_argument("--logit-bias", dest="logit_bias", action="store_true", default=None,
                        help="endpoint accepts logit_bias; restrict output to numbers")
    parser.add_argument("--chunked-tokenizer", dest="chunked_tokenizer", action="store_true",
                        default=None, help="tokenizer groups digits (spaces digits by default)")
    parser.add_argument("--transcript", help="replay transcript (JSON lines)")
    parser.add_argument("--record", help="write the model exchanges to this transcript")
    parser.add_argument("--reference", help="oracle backend: CSV it should forecast")
    parser.add_argument("--sigma", type=float, help="oracle noise, fraction of range")
    parser.add_argument("--parallelism", type=int)
    parser.add_argument("--window", type=int)
    parser.add_argument("--step", type=int)
    parser.add_argument("--horizon", type=int)
    parser.add_argument("--samples", type=int)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--statistic", choices=STATISTICS)
    parser.add_argument("--error", choices=ERROR_KINDS)
    parser.add_argument("--no-smooth", dest="no_smooth", action="store_true")
    parser.add_argument("--ma-window", dest="ma_window", type=int)
    parser.add_argument("--decimals", type=int)
    parser.add_argument("--space", dest="space", action="store_true", default=None)
    parser.add_argument("--no-space", dest="space", action="store_false")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--signal-id", dest="signal_id")
    parser.add_argument("--out")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sigllm", description="Time series anomaly detection with language models")
    parser.add_argument("-v", "--verbose", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    convert = commands.add_parser("convert", help="print a signal as model ready text")
    convert.add_argument("signal")
    convert.add_argument("--decimals", type=int)
    convert.add_argument("--space", dest="space", action="store_true", default=False)
    convert.add_argument("--no-space", dest="space", action="store_false")
    convert.add_argument("--no-scale", dest="no_scale", action="store_true",
                         help="keep the values as they are (must be non-negative)")
    convert.add_argument("--window", type=int, help="window size (default: whole series)")
    convert.add_argument("--step", type=int, help="step size (default: window size)")
    convert.add_argument("--out")
    convert.set_defaults(handler=cmd_convert)

    detect = commands.add_parser("detect", help="run a pipeline on one signal")
    _add_run_flags(detect)
    detect.add_argument("--debug-csv", dest="debug_csv",
                        help="detector: dump prediction, error and mask")
    detect.add_argument("--timing", action="store_true", help="keep timings in the record")
    detect.set_defaults(handler=cmd_detect)

    sweep = commands.add_parser("sweep", help="alpha/beta grid or detector ablation grid")
    _add_run_flags(sweep)
    sweep.set_defaults(handler=cmd_sweep)

    evaluate = commands.add_parser("evaluate", help="score detections against labels")
    evaluate.add_argument("detections", help="record JSON, list of records or directory")
    evaluate.add_argument("truth", help="labels JSON, {id: labels} JSON or directory")
    evaluate.add_argument("--out", help="write the JSON report here")
    evaluate.set_defaults(handler=cmd_evaluate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except ConfigError as error:
        print(f"sigllm: configuration error: {error}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as error:
        print(f"sigllm: backend failure: {error}", file=sys.stderr)
        return EXIT_BACKEND
    except (DataError, OSError) as error:
        print(f"sigllm: data error: {error}", file=sys.stderr)
        return EXIT_DATA
    except InvalidInputError as error:
        print(f"sigllm: invalid input: {error}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
