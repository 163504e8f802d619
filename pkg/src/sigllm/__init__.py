"""Time series anomaly detection with large language models.

``codec`` turns signals into text, ``backend`` talks to models, ``prompter``
and ``detector`` are the two detection pipelines and ``evaluation`` scores
their output.
"""

from sigllm.backend import (
    BackendDescriptor, CompletionRequest, CompletionResponse, HTTPBackend, OracleStub,
    PersistenceStub, RecordingBackend, ReplayStub, make_backend)
from sigllm.codec import Signal, decode, encode
from sigllm.detector import DetectorConfig, run_detector
from sigllm.evaluation import moving_average_detect, overlap_confusion, f1_score
from sigllm.intervals import AnomalyInterval, Detections
from sigllm.prompter import PrompterConfig, run_prompter

__version__ = "0.1.0"

__all__ = [
    "AnomalyInterval", "BackendDescriptor", "CompletionRequest", "CompletionResponse",
    "Detections", "DetectorConfig", "HTTPBackend", "OracleStub", "PersistenceStub",
    "PrompterConfig", "RecordingBackend", "ReplayStub", "Signal", "decode", "encode",
    "f1_score", "make_backend", "moving_average_detect", "overlap_confusion",
    "run_detector", "run_prompter",
]
