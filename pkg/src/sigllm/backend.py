"""Text completion backends.

Every backend exposes ``complete(request) -> CompletionResponse``. The HTTP
backend talks to any OpenAI compatible ``/completions`` or
``/chat/completions`` endpoint; the stubs are deterministic stand-ins used for
tests, demos and regression replays.
"""

import json
import logging
import os
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import httpx
import numpy as np

from sigllm import codec
from sigllm.errors import (
    BackendError, BackendUnavailableError, InvalidInputError, ReplayMissError, RepetitiveInputError,
    RequestRejectedError)

LOGGER = logging.getLogger(__name__)

API_KEY_ENV = "SIGLLM_API_KEY"
KINDS = ("http", "persistence", "oracle", "replay")

# Byte-level ids shared by the GPT-2 and cl100k vocabularies.
DEFAULT_NUMERIC_VOCAB = {str(digit): 15 + digit for digit in range(10)}
DEFAULT_NUMERIC_VOCAB.update({",": 11, " ": 220, "\n": 198})
NUMERIC_CHARACTERS = frozenset("0123456789, \n")

_REPETITIVE_MARKERS = ("repetitive",)


@dataclass(frozen=True)
class CompletionRequest:
    """One context to be continued ``n_samples`` times.

    ``horizon`` is a hint for the stubs: how many values the caller wants.
    The HTTP backend ignores it and relies on ``max_tokens``.
    """

    context: str
    n_samples: int = 1
    max_tokens: int = 64
    temperature: float = 1.0
    numeric_only: bool = False
    horizon: Optional[int] = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidInputError("n_samples must be at least 1")
        if self.max_tokens < 1:
            raise InvalidInputError("max_tokens must be at least 1")
        if self.temperature < 0:
            raise InvalidInputError("temperature must be non-negative")


@dataclass
class CompletionResponse:
    samples: List[str]
    usage: Dict[str, int] = field(
        default_factory=lambda: {"prompt_tokens": 0, "completion_tokens": 0})
    latency: float = 0.0


@dataclass(frozen=True)
class BackendDescriptor:
    """Declarative description of a backend, as found in run configs.

    Args:
        kind (str):
            One of ``http``, ``persistence``, ``oracle`` or ``replay``.
        url (str):
            Base URL of the endpoint, e.g. ``https://api.openai.com/v1``.
        model (str):
            Model name sent with every request.
        chunked_tokenizer (bool):
            The model's tokenizer groups several digits into one token, so
            serialized digits should be spaced out.
        chat (bool):
            Use the chat completions route with a system/user message pair.
        logit_bias (bool):
            The endpoint accepts a ``logit_bias`` map.
        transcript (str):
            Path of the replay transcript (``replay`` kind).
        seed (int):
            Seed of the oracle stub noise.
        sigma (float):
            Oracle noise, as a fraction of the reference range.
        parallelism (int):
            Maximum in-flight requests.
    """

    kind: str = "persistence"
    url: Optional[str] = None
    model: Optional[str] = None
    chunked_tokenizer: bool = False
    chat: bool = False
    logit_bias: bool = False
    transcript: Optional[str] = None
    seed: int = 0
    sigma: float = 0.01
    timeout: float = 120.0
    max_retries: int = 5
    parallelism: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown backend kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "http" and not (self.url and self.model):
            raise InvalidInputError("http backend needs both url and model")
        if self.kind == "replay" and not self.transcript:
            raise InvalidInputError("replay backend needs a transcript path")
        if self.parallelism < 1:
            raise InvalidInputError("parallelism must be at least 1")

    def to_dict(self):
        return asdict(self)


def build_numeric_bias(tokenizer_hint, supported=True, vocab=None, strategy="allow",
                       strength=100):
    """Logit bias map restricting generations to digits, commas and whitespace.

    Args:
        tokenizer_hint (bool):
            The tokenizer chunks digits. Only single characters are then
            allowed, which is what spaced serialization produces anyway.
        supported (bool):
            The endpoint accepts logit biases. When it does not, an empty map
            is returned and callers rely on the parser's robustness.
        vocab (dict or None):
            Token string to id. Defaults to the byte-level ids of the numeric
            characters. The ``deny`` strategy needs the full vocabulary.
        strategy (str):
            ``allow`` boosts the numeric tokens, ``deny`` suppresses all the
            others.
        strength (float):
            Magnitude of the bias.

    Returns:
        dict:
            Token id (as a string, which is what the wire format wants) to
            bias.
    """
    if not supported:
        return {}
    if strategy not in ("allow", "deny"):
        raise InvalidInputError(f"unknown bias strategy {strategy!r}")

    vocab = DEFAULT_NUMERIC_VOCAB if vocab is None else vocab

    def allowed(token):
        if tokenizer_hint and len(token) > 1:
            return False
        return len(token) > 0 and set(token) <= NUMERIC_CHARACTERS

    if strategy == "allow":
        ids = sorted(token_id for token, token_id in vocab.items() if allowed(token))
        return {str(token_id): strength for token_id in ids}

    ids = sorted(token_id for token, token_id in vocab.items() if not allowed(token))
    return {str(token_id): -strength for token_id in ids}


class Backend:
    """Common interface. Subclasses implement ``complete``."""

    parallelism = 4
    chunked_tokenizer = False

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        raise NotImplementedError


def _is_repetitive(message):
    message = (message or "").lower()
    return any(marker in message for marker in _REPETITIVE_MARKERS)


class HTTPBackend(Backend):
    """OpenAI compatible completions client with retries.

    Transient failures (timeouts, connection errors, 429 and 5xx) are retried
    with exponential backoff. Other 4xx responses raise
    ``RequestRejectedError``, or ``RepetitiveInputError`` when the server
    complains about a repetitive prompt; neither is retried.
    """

    def __init__(self, url, model, api_key=None, chat=False, system_prompt=None,
                 chunked_tokenizer=False, logit_bias=False, timeout=120.0, max_retries=5,
                 backoff_base=1.0, backoff_cap=30.0, parallelism=4, client=None,
                 sleep=None):
        self.url = url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.chat = chat
        self.system_prompt = system_prompt
        self.chunked_tokenizer = chunked_tokenizer
        self.logit_bias = logit_bias
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.parallelism = parallelism
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(parallelism)

    @property
    def endpoint(self):
        return self.url + ("/chat/completions" if self.chat else "/completions")

    def build_payload(self, request):
        payload = {
            "model": self.model,
            "n": request.n_samples,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        if self.chat:
            messages = []
            if self.system_prompt:
                messages.append({"role": "system", "content": self.system_prompt})
            messages.append({"role": "user", "content": request.context})
            payload["messages"] = messages
        else:
            payload["prompt"] = request.context

        if request.numeric_only:
            bias = build_numeric_bias(self.chunked_tokenizer, supported=self.logit_bias)
            if bias:
                payload["logit_bias"] = bias

        return payload

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _backoff(self, attempt):
        return min(self.backoff_cap, self.backoff_base * 2 ** attempt)

    def _parse(self, body, request):
        try:
            choices = body["choices"]
            if self.chat:
                samples = [choice["message"]["content"] or "" for choice in choices]
            else:
                samples = [choice["text"] for choice in choices]
        except (KeyError, TypeError) as error:
            raise RequestRejectedError(f"malformed response body: {error}") from error

        if len(samples) != request.n_samples:
            raise RequestRejectedError(
                f"expected {request.n_samples} choices, got {len(samples)}")

        usage = body.get("usage") or {}
        usage = {
            "prompt_tokens": int(usage.get("prompt_tokens", 0)),
            "completion_tokens": int(usage.get("completion_tokens", 0)),
        }
        return samples, usage

    @staticmethod
    def _error_message(response):
        try:
            body = response.json()
        except ValueError:
            return response.text
        error = body.get("error", body) if isinstance(body, dict) else body
        if isinstance(error, dict):
            return str(error.get("message", error))
        return str(error)

    def complete(self, request):
        payload = self.build_payload(request)
        last_error = None
        with self._slots:
            for attempt in range(self.max_retries + 1):
                if attempt:
                    delay = self._backoff(attempt - 1)
                    LOGGER.info("retrying in %.1fs after %s", delay, last_error)
                    (self._sleep or time.sleep)(delay)

                began = time.perf_counter()
                try:
                    response = self._client.post(
                        self.endpoint, json=payload, headers=self._headers(),
                        timeout=self.timeout)
                except (httpx.TimeoutException, httpx.TransportError) as error:
                    last_error = repr(error)
                    continue

                latency = (time.perf_counter() - began) * 1000
                status = response.status_code
                if status == 429 or status >= 500:
                    last_error = f"HTTP {status}"
                    continue
                if status >= 400:
                    message = self._error_message(response)
                    if _is_repetitive(message):
                        raise RepetitiveInputError(message, status)
                    raise RequestRejectedError(message, status)

                samples, usage = self._parse(response.json(), request)
                return CompletionResponse(samples, usage, latency)

        raise BackendUnavailableError(
            f"{self.endpoint} unavailable after {self.max_retries + 1} attempts: {last_error}")


def map_requests(function, items, parallelism=1):
    """``[function(item) for item in items]`` on a thread pool, in order.

    After the first backend failure the items not yet started are skipped,
    so an unreachable endpoint does not go through every retry schedule
    once per window. The failure is re-raised.
    """
    failed = threading.Event()

    def guarded(item):
        if failed.is_set():
            return None
        try:
            return function(item)
        except BackendError:
            failed.set()
            raise

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        futures = [pool.submit(guarded, item) for item in items]
        results = []
        for future in futures:
            results.append(future.result())
    return results


def _rng(seed, context):
    return np.random.default_rng([seed, zlib.crc32(context.encode("utf-8"))])


def _render(values, space_digits):
    return codec.serialize_window([int(value) for value in values], space_digits)


def _values_wanted(request):
    if request.horizon is not None:
        return request.horizon
    # Without a hint assume the shortest possible value: a digit and a comma.
    return max(1, (request.max_tokens + 1) // 2)


class PersistenceStub(Backend):
    """Continues every context by repeating its last value."""

    def __init__(self, parallelism=4):
        self.parallelism = parallelism

    def complete(self, request):
        history = codec.last_numeric_run(request.context)
        last = history[-1] if history else 0
        text = _render([last] * _values_wanted(request), " , " in request.context)
        return CompletionResponse([text] * request.n_samples)


class OracleStub(Backend):
    """A forecaster that knows the answer.

    Contexts are looked up among the windows of ``observed``; the reply is
    the matching continuation of ``reference`` plus seeded Gaussian noise,
    rounded back to non-negative integers. Using an anomaly free
    ``reference`` makes a forecaster that ignores injected anomalies.

    Args:
        observed (array-like of int):
            The quantized series the pipeline will send windows from.
        reference (array-like of int or None):
            What the oracle predicts. Defaults to ``observed``.
        sigma (float):
            Noise standard deviation as a fraction of the reference range.
        seed (int):
            Noise seed. The generator is derived from the seed and the
            context, so replies do not depend on request order.
    """

    def __init__(self, observed=(), reference=None, sigma=0.01, seed=0, parallelism=4):
        self.observed = np.asarray(observed, dtype=np.int64)
        self.reference = self.observed if reference is None else np.asarray(
            reference, dtype=np.int64)
        if len(self.reference) != len(self.observed):
            raise InvalidInputError("reference and observed must have the same length")
        self.sigma = sigma
        self.seed = seed
        self.parallelism = parallelism
        self._registered = {}
        self._index = {}
        self._lock = threading.Lock()

    @classmethod
    def from_signals(cls, observed, reference, decimals=None, sigma=0.01, seed=0,
                     parallelism=4):
        """Quantize both real valued series with the transform of ``observed``."""
        quantized = codec.encode(observed, decimals)
        reference = codec.as_signal(reference).values - quantized.scale.min_offset
        reference = codec.quantize(np.clip(reference, 0, None), quantized.decimals)
        return cls(quantized.values, reference.values, sigma, seed, parallelism)

    def register(self, context_values, continuation):
        """Map an exact window to a continuation, ahead of the series lookup."""
        self._registered[tuple(int(v) for v in context_values)] = list(continuation)

    @property
    def noise_scale(self):
        if len(self.reference) == 0:
            return 0.0
        return self.sigma * float(self.reference.max() - self.reference.min())

    def _lookup(self, window):
        key = tuple(window)
        if key in self._registered:
            return self._registered[key]

        length = len(window)
        with self._lock:
            index = self._index.get(length)
            if index is None:
                index = {}
                for start in range(len(self.observed) - length + 1):
                    index.setdefault(tuple(self.observed[start:start + length].tolist()), start)
                self._index[length] = index

        start = index.get(key)
        if start is None:
            return None
        return self.reference[start + length:].tolist()

    def continuation(self, context, count):
        window = codec.last_numeric_run(context)
        truth = self._lookup(window)
        if truth is None:
            truth = []
        truth = list(truth[:count])
        if len(truth) < count:
            # Past the end of the series (or unknown context): persist.
            last = truth[-1] if truth else (window[-1] if window else 0)
            truth += [last] * (count - len(truth))
        return np.asarray(truth, dtype=float)

    def complete(self, request):
        count = _values_wanted(request)
        truth = self.continuation(request.context, count)
        rng = _rng(self.seed, request.context)
        spaced = " , " in request.context
        samples = []
        for _ in range(request.n_samples):
            noisy = truth + rng.normal(0.0, self.noise_scale, size=count)
            noisy = np.clip(np.floor(noisy + 0.5), 0, None)
            samples.append(_render(noisy, spaced))

        return CompletionResponse(samples)


class ReplayStub(Backend):
    """Serves recorded responses from a JSON lines transcript.

    Each line holds ``context`` and either ``samples`` (list of strings) or
    ``error`` (``{"kind": "repetitive" | "rejected", "message": ...}``).
    Lookup is by exact context text; the first entry for a context wins.
    """

    def __init__(self, entries, parallelism=4):
        self.parallelism = parallelism
        self._entries = {}
        for entry in entries:
            self._entries.setdefault(entry["context"], entry)

    @classmethod
    def load(cls, path, parallelism=4):
        entries = []
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    entries.append(json.loads(line))
        return cls(entries, parallelism)

    def complete(self, request):
        entry = self._entries.get(request.context)
        if entry is None:
            raise ReplayMissError(f"no recorded response for context {request.context[:60]!r}")

        error = entry.get("error")
        if error:
            if error.get("kind") == "repetitive":
                raise RepetitiveInputError(error.get("message", "repetitive prompt"))
            raise RequestRejectedError(error.get("message", "rejected"), error.get("status"))

        samples = list(entry["samples"])
        if len(samples) != request.n_samples:
            raise ReplayMissError(
                f"recorded {len(samples)} samples, request asks for {request.n_samples}")
        usage = dict(entry.get("usage") or {"prompt_tokens": 0, "completion_tokens": 0})
        return CompletionResponse(samples, usage, 0.0)


class RecordingBackend(Backend):
    """Wraps a backend and appends every exchange to a transcript file.

    The transcript is written in request order of completion; ``ReplayStub``
    does not care about order.
    """

    def __init__(self, inner, path):
        self.inner = inner
        self.path = Path(path)
        self.parallelism = inner.parallelism
        self.chunked_tokenizer = inner.chunked_tokenizer
        self._lock = threading.Lock()
        self._entries = []

    def _write(self, entry):
        with self._lock:
            self._entries.append(entry)

    def flush(self):
        """Write the transcript sorted by context, for stable fixtures."""
        with self._lock:
            entries = sorted(self._entries, key=lambda entry: entry["context"])
        with open(self.path, "w", encoding="utf-8") as handle:
            for entry in entries:
                handle.write(json.dumps(entry, sort_keys=True) + "\n")

    def complete(self, request):
        entry = {"context": request.context, "n_samples": request.n_samples}
        try:
            response = self.inner.complete(request)
        except RepetitiveInputError as error:
            entry["error"] = {"kind": "repetitive", "message": str(error)}
            self._write(entry)
            raise
        except RequestRejectedError as error:
            entry["error"] = {"kind": "rejected", "message": str(error), "status": error.status}
            self._write(entry)
            raise

        entry["samples"] = response.samples
        entry["usage"] = response.usage
        self._write(entry)
        return response


def make_backend(descriptor, observed=None, reference=None, client=None):
    """Instantiate the backend a descriptor describes.

    ``observed`` and ``reference`` feed the oracle stub; see
    ``OracleStub.from_signals``.
    """
    if descriptor.kind == "http":
        return HTTPBackend(
            descriptor.url, descriptor.model, chat=descriptor.chat,
            chunked_tokenizer=descriptor.chunked_tokenizer,
            logit_bias=descriptor.logit_bias, timeout=descriptor.timeout,
            max_retries=descriptor.max_retries, parallelism=descriptor.parallelism,
            client=client)
    if descriptor.kind == "persistence":
        return PersistenceStub(descriptor.parallelism)
    if descriptor.kind == "replay":
        return ReplayStub.load(descriptor.transcript, descriptor.parallelism)

    if observed is None:
        raise InvalidInputError("oracle backend needs the observed signal")
    if reference is None:
        reference = observed
    return OracleStub.from_signals(observed, reference, sigma=descriptor.sigma,
                                   seed=descriptor.seed, parallelism=descriptor.parallelism)


def complete(request, backend):
    """Run ``request`` on a backend instance or descriptor."""
    if isinstance(backend, BackendDescriptor):
        backend = make_backend(backend)
    return backend.complete(request)
