"""Backends that turn an (images, text) request into text.

Two kinds share one caching front end: ``remote`` posts a chat-completions
body over HTTP, ``mock`` answers from a script file so whole pipelines can run
offline and reproducibly.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import httpx
import numpy as np
from PIL import Image

from .errors import (
    AuthError,
    ConfigError,
    LmmError,
    MalformedResponse,
    RateLimited,
    SchemaViolation,
    ServerError,
    Timeout,
)

log = logging.getLogger(__name__)

STAGES = ("context", "characteristic", "differential", "recognize")


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True, eq=False)
class ImagePart:
    """An RGB image attachment, sent as PNG."""

    pixels: np.ndarray
    media_type: str = "image/png"

    def __post_init__(self) -> None:
        if self.pixels.size == 0:
            raise ValueError("image attachment is empty")

    @classmethod
    def from_array(cls, pixels: np.ndarray, max_side: int | None = None) -> ImagePart:
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        h, w = pixels.shape[:2]
        if max_side and max(h, w) > max_side:
            scale = max_side / max(h, w)
            size = (max(1, round(w * scale)), max(1, round(h * scale)))
            pixels = np.asarray(Image.fromarray(pixels).resize(size, Image.Resampling.LANCZOS))
        return cls(pixels)

    @property
    def digest(self) -> str:
        return image_digest(self.pixels)

    def encode(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels).save(buf, format="PNG")
        return buf.getvalue()

    def data_url(self) -> str:
        return f"data:{self.media_type};base64," + base64.b64encode(self.encode()).decode("ascii")

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ImagePart) and self.digest == other.digest

    def __hash__(self) -> int:
        return hash(self.digest)


Part = Union[TextPart, ImagePart]


def image_digest(pixels: np.ndarray) -> str:
    """sha256 over shape and raw pixel bytes; independent of PNG encoder details."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h = hashlib.sha256("x".join(map(str, pixels.shape)).encode())
    h.update(pixels.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class LmmRequest:
    user_parts: tuple[Part, ...]
    system_prompt: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 512
    backend_id: str = ""
    stage: str = ""

    def __post_init__(self) -> None:
        if not self.user_parts:
            raise ValueError("a request needs at least one user part")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    @property
    def text(self) -> str:
        return "\n".join(p.text for p in self.user_parts if isinstance(p, TextPart))

    @property
    def images(self) -> list[ImagePart]:
        return [p for p in self.user_parts if isinstance(p, ImagePart)]


@dataclass(frozen=True)
class LmmResponse:
    text: str
    input_tokens: int = 0
    output_tokens: int = 0
    latency_ms: int = 0
    cached: bool = False
    retries: int = 0


def cache_key(req: LmmRequest, model: str = "") -> str:
    """Content hash of everything that determines the answer. Part order matters."""
    parts = []
    for p in req.user_parts:
        if isinstance(p, TextPart):
            parts.append(["text", p.text])
        else:
            parts.append(["image", p.media_type, p.digest])
    payload = {
        "backend_id": req.backend_id,
        "model": model,
        "system": req.system_prompt,
        "parts": parts,
        # repr keeps 0.0 and 0 apart from each other across platforms
        "temperature": repr(float(req.temperature)),
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class BackendConfig:
    kind: str = "mock"
    endpoint: str | None = None
    model: str = "mock"
    api_key_env: str = "OPENAI_API_KEY"
    requests_per_minute: int = 60
    max_retries: int = 5
    timeout_s: float = 60.0
    cache_dir: str | None = None
    mock_script: str | None = None
    road_max_side: int = 768
    backoff_base_s: float = 1.0
    backoff_factor: float = 2.0

    def validate(self) -> None:
        if self.kind not in ("remote", "mock"):
            raise ConfigError(f"backend kind must be 'remote' or 'mock', got {self.kind!r}")
        if self.kind == "remote" and (not self.endpoint or not self.model):
            raise ConfigError("a remote backend needs both endpoint and model")
        if self.requests_per_minute < 1:
            raise ConfigError("requests_per_minute must be >= 1")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")

    @property
    def backend_id(self) -> str:
        return f"{self.kind}:{self.model}"


class SystemClock:
    def monotonic(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class RateLimiter:
    """Sliding-window limiter: at most ``rpm`` acquisitions in any ``window`` seconds.

    A token bucket with capacity ``rpm`` can let through nearly ``2 * rpm``
    requests in one window (full bucket plus refill), so timestamps are kept
    instead.
    """

    def __init__(self, rpm: int, clock=None, window: float = 60.0):
        self.rpm = rpm
        self.window = window
        self.clock = clock or SystemClock()
        self._sent: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        with self._lock:
            while True:
                now = self.clock.monotonic()
                while self._sent and self._sent[0] + self.window <= now:
                    self._sent.popleft()
                if len(self._sent) < self.rpm:
                    self._sent.append(now)
                    return now
                deadline = self._sent[0] + self.window
                self.clock.sleep(deadline - now)
                if self.clock.monotonic() < deadline:
                    # float rounding can leave the clock a hair short; take the slot at the deadline
                    self._sent.popleft()
                    self._sent.append(deadline)
                    return deadline


class ResponseCache:
    """On-disk cache, one file per key: a JSON header line, then the raw text.

    Without a directory it degrades to an in-process dict.
    """

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        self._mem: dict[str, tuple[dict, str]] = {}
        self._lock = threading.Lock()
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.txt"

    def get(self, key: str) -> tuple[dict, str] | None:
        if self.directory is None:
            with self._lock:
                return self._mem.get(key)
        p = self._path(key)
        if not p.is_file():
            return None
        raw = p.read_bytes().decode("utf-8")
        header, _, text = raw.partition("\n")
        try:
            return json.loads(header), text
        except json.JSONDecodeError:
            log.warning("ignoring corrupt cache file %s", p)
            return None

    def put(self, key: str, header: dict, text: str) -> None:
        if self.directory is None:
            with self._lock:
                self._mem[key] = (header, text)
            return
        p = self._path(key)
        tmp = p.with_suffix(f".tmp{threading.get_ident()}")
        tmp.write_bytes((json.dumps(header, sort_keys=True) + "\n" + text).encode("utf-8"))
        os.replace(tmp, p)


class Backend:
    """Caching front end shared by the concrete backends.

    ``calls`` counts requests that reached the underlying model, so cache hits
    do not show up in it.
    """

    kind = "base"

    def __init__(self, cfg: BackendConfig, clock=None):
        cfg.validate()
        self.cfg = cfg
        self.clock = clock or SystemClock()
        self.cache = ResponseCache(cfg.cache_dir)
        self.calls = 0
        self._count_lock = threading.Lock()

    @property
    def backend_id(self) -> str:
        return self.cfg.backend_id

    def complete(self, req: LmmRequest, use_cache: bool = True) -> LmmResponse:
        if req.backend_id != self.backend_id:
            req = _with_backend(req, self.backend_id)
        key = cache_key(req, self.cfg.model)
        if use_cache:
            hit = self.cache.get(key)
            if hit is not None:
                header, text = hit
                return LmmResponse(text, header.get("input_tokens", 0), header.get("output_tokens", 0), 0, True)
        resp = self._call(req)
        with self._count_lock:
            self.calls += 1
        if not resp.text.strip():
            raise MalformedResponse(f"{self.backend_id} returned an empty answer")
        header = {
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "model": self.cfg.model,
            "stage": req.stage,
            "input_tokens": resp.input_tokens,
            "output_tokens": resp.output_tokens,
        }
        self.cache.put(key, header, resp.text)
        return resp

    def _call(self, req: LmmRequest) -> LmmResponse:
        raise NotImplementedError


def _with_backend(req: LmmRequest, backend_id: str) -> LmmRequest:
    return LmmRequest(req.user_parts, req.system_prompt, req.temperature, req.max_output_tokens, backend_id, req.stage)


class RemoteBackend(Backend):
    """Chat-completions client with exponential backoff and a request budget."""

    kind = "remote"

    def __init__(self, cfg: BackendConfig, clock=None, transport: httpx.BaseTransport | None = None, rng=None):
        super().__init__(cfg, clock)
        self.limiter = RateLimiter(cfg.requests_per_minute, self.clock)
        self.rng = rng or random.Random()
        self.client = httpx.Client(transport=transport, timeout=cfg.timeout_s)
        self.sent_at: list[float] = []

    def api_key(self) -> str:
        key = os.environ.get(self.cfg.api_key_env, "").strip()
        if not key:
            raise ConfigError(f"environment variable {self.cfg.api_key_env} is not set")
        return key

    def body(self, req: LmmRequest) -> dict[str, Any]:
        content: list[dict[str, Any]] = []
        for p in req.user_parts:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
            else:
                content.append({"type": "image_url", "image_url": {"url": p.data_url()}})
        messages = []
        if req.system_prompt:
            messages.append({"role": "system", "content": req.system_prompt})
        messages.append({"role": "user", "content": content})
        return {
            "model": self.cfg.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }

    def _backoff(self, attempt: int, retry_after: str | None) -> float:
        delay = self.cfg.backoff_base_s * self.cfg.backoff_factor**attempt
        delay *= 1.0 + 0.25 * self.rng.random()
        if retry_after:
            try:
                delay = max(delay, float(retry_after))
            except ValueError:
                pass
        return delay

    def _call(self, req: LmmRequest) -> LmmResponse:
        headers = {"Authorization": f"Bearer {self.api_key()}"}
        body = self.body(req)
        attempt = 0
        while True:
            sent = self.limiter.acquire()
            self.sent_at.append(sent)
            try:
                r = self.client.post(self.cfg.endpoint, json=body, headers=headers)
            except httpx.TimeoutException as e:
                if attempt >= self.cfg.max_retries:
                    raise Timeout(f"no answer within {self.cfg.timeout_s}s after {attempt} retries") from e
                self.clock.sleep(self._backoff(attempt, None))
                attempt += 1
                continue
            except httpx.TransportError as e:
                if attempt >= self.cfg.max_retries:
                    raise LmmError(f"transport failure after {attempt} retries: {e}") from e
                self.clock.sleep(self._backoff(attempt, None))
                attempt += 1
                continue
            latency = max(0, int((self.clock.monotonic() - sent) * 1000))
            status = r.status_code
            if status in (401, 403):
                raise AuthError(f"HTTP {status} from {self.cfg.endpoint}")
            if status == 429 or status >= 500:
                if attempt >= self.cfg.max_retries:
                    cls = RateLimited if status == 429 else ServerError
                    raise cls(f"HTTP {status} persisted through {attempt} retries")
                log.info("HTTP %d, retry %d", status, attempt + 1)
                self.clock.sleep(self._backoff(attempt, r.headers.get("retry-after")))
                attempt += 1
                continue
            if status >= 400:
                raise LmmError(f"HTTP {status}: {r.text[:200]}")
            return self._parse(r, latency, attempt)

    def _parse(self, r: httpx.Response, latency: int, retries: int) -> LmmResponse:
        try:
            doc = r.json()
            content = doc["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise MalformedResponse(f"unexpected response body: {r.text[:200]}") from e
        if isinstance(content, list):
            content = "".join(c.get("text", "") for c in content if isinstance(c, dict))
        if not isinstance(content, str) or not content.strip():
            raise MalformedResponse("response has no text content")
        usage = doc.get("usage") or {}
        return LmmResponse(
            content,
            int(usage.get("prompt_tokens", 0) or 0),
            int(usage.get("completion_tokens", 0) or 0),
            latency,
            False,
            retries,
        )


@dataclass
class MockRule:
    response: str = ""
    stage: str | None = None
    contains: str | None = None
    image_digest: str | None = None
    error: str | None = None

    def matches(self, req: LmmRequest) -> bool:
        if self.stage and self.stage != req.stage:
            return False
        if self.contains is not None and self.contains not in req.system_prompt + "\n" + req.text:
            return False
        if self.image_digest is not None and all(im.digest != self.image_digest for im in req.images):
            return False
        return True


@dataclass
class MockScript:
    """Ordered rules, first match wins; then per-stage defaults; then a digest-derived answer."""

    rules: list[MockRule] = field(default_factory=list)
    defaults: dict[str, str] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> MockScript:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("version") != 1:
            raise SchemaViolation(f"{path}: mock script needs version 1")
        try:
            rules = [MockRule(**r) for r in doc.get("rules", [])]
        except TypeError as e:
            raise SchemaViolation(f"{path}: bad rule ({e})") from e
        return cls(rules, dict(doc.get("defaults", {})))

    def save(self, path: str | Path) -> None:
        rules = []
        for r in self.rules:
            rules.append({k: v for k, v in vars(r).items() if v is not None})
        doc = {"version": 1, "rules": rules, "defaults": dict(sorted(self.defaults.items()))}
        Path(path).write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


_MOCK_ERRORS = {
    "AuthError": AuthError,
    "RateLimited": RateLimited,
    "Timeout": Timeout,
    "MalformedResponse": MalformedResponse,
    "ServerError": ServerError,
    "LmmError": LmmError,
}


def default_mock_answer(req: LmmRequest) -> str:
    tag = cache_key(req)[:8]
    if req.stage == "context":
        return f"Background: a road scene around the target sign ({tag}).\nCandidates:"
    if req.stage == "characteristic":
        return f"Shape: shape-{tag}\nColor: color-{tag}\nComposition: composition-{tag}"
    if req.stage == "differential":
        return f"Differences: differences-{tag}"
    return f"No confident answer ({tag})."


class MockBackend(Backend):
    kind = "mock"

    def __init__(self, cfg: BackendConfig | None = None, script: MockScript | None = None, clock=None):
        cfg = cfg or BackendConfig()
        super().__init__(cfg, clock)
        if script is None:
            script = MockScript.load(cfg.mock_script) if cfg.mock_script else MockScript()
        self.script = script
        self.requests: list[LmmRequest] = []
        self._req_lock = threading.Lock()

    def _call(self, req: LmmRequest) -> LmmResponse:
        with self._req_lock:
            self.requests.append(req)
        text = None
        for rule in self.script.rules:
            if rule.matches(req):
                if rule.error:
                    raise _MOCK_ERRORS.get(rule.error, LmmError)(f"scripted {rule.error}")
                text = rule.response
                break
        if text is None:
            text = self.script.defaults.get(req.stage) or default_mock_answer(req)
        return LmmResponse(text, len(req.text.split()) + 85 * len(req.images), len(text.split()), 0, False)


def make_backend(cfg: BackendConfig, clock=None, transport=None) -> Backend:
    cfg.validate()
    if cfg.kind == "mock":
        return MockBackend(cfg, clock=clock)
    return RemoteBackend(cfg, clock=clock, transport=transport)
