"""Multimodal chat-completions client for the curator and judge endpoints.

Speaks the OpenAI-compatible ``POST {base_url}/chat/completions`` protocol,
with frames sent as base64 PNG data URIs. Responses are cached on disk keyed by
(model, prompt, frame digests, decode params), so reruns are free and
deterministic.
"""

from __future__ import annotations

import base64
import enum
import io
import json
import logging
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import httpx
import numpy as np
from PIL import Image

from .corpus import canonical_digest, canonical_json
from .errors import (
    ConfigError,
    GatewayUnavailableError,
    ModelSeparationError,
    ProtocolError,
    RequestError,
)
from .video import FrameSequence

log = logging.getLogger(__name__)


class Role(str, enum.Enum):
    CURATOR = "Curator"
    JUDGE = "Judge"


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_id: str
    api_key_ref: str | None = None
    max_frames_per_request: int = 32
    timeout_s: float = 120.0

    def validate(self, role: str) -> None:
        if not self.model_id or not self.model_id.strip():
            raise ConfigError(f"{role} endpoint: model_id is empty")
        if not self.base_url:
            raise ConfigError(f"{role} endpoint: base_url is empty")
        if not (self.timeout_s > 0):
            raise ConfigError(f"{role} endpoint: timeout_s must be > 0")
        if self.max_frames_per_request < 1:
            raise ConfigError(f"{role} endpoint: max_frames_per_request must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EndpointConfig":
        known = {"base_url", "model_id", "api_key_ref", "max_frames_per_request", "timeout_s"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"endpoint config: unknown keys {sorted(extra)}")
        return cls(
            base_url=str(d.get("base_url", "")),
            model_id=str(d.get("model_id", "")),
            api_key_ref=d.get("api_key_ref"),
            max_frames_per_request=int(d.get("max_frames_per_request", 32)),
            timeout_s=float(d.get("timeout_s", 120.0)),
        )


@dataclass(frozen=True)
class GatewayConfig:
    curator: EndpointConfig | None
    judge: EndpointConfig | None
    rate_limit_rps: float = 2.0
    max_retries: int = 4
    backoff_base_ms: float = 500.0
    cache_dir: Path | None = None

    def endpoint(self, role: Role) -> EndpointConfig:
        ep = self.curator if role is Role.CURATOR else self.judge
        if ep is None:
            raise ConfigError(f"{role.value.lower()} endpoint is not configured")
        return ep


def _same_model(a: str, b: str) -> bool:
    return a.strip().casefold() == b.strip().casefold()


def validate_model_separation(cfg: GatewayConfig) -> None:
    """Refuse configurations where the judge could grade its own output."""
    if cfg.curator is None:
        raise ConfigError("curator endpoint is missing")
    if cfg.judge is None:
        raise ConfigError("judge endpoint is missing")
    cfg.curator.validate("curator")
    cfg.judge.validate("judge")
    if _same_model(cfg.curator.model_id, cfg.judge.model_id):
        raise ModelSeparationError(
            f"model separation violated: curator and judge both use {cfg.curator.model_id!r}; "
            "a judge must not grade its own model's output (self-preference)"
        )
    if cfg.max_retries < 0:
        raise ConfigError("max_retries must be >= 0")
    if cfg.backoff_base_ms < 0:
        raise ConfigError("backoff_base_ms must be >= 0")


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.0
    max_tokens: int = 512


@dataclass(frozen=True)
class ModelRequest:
    role: Role
    prompt_text: str
    frames: FrameSequence
    decode_params: DecodeParams = field(default_factory=DecodeParams)

    def __post_init__(self) -> None:
        if not self.prompt_text:
            raise ValueError("prompt_text must be nonempty")


@dataclass(frozen=True)
class ModelResponse:
    text: str
    model_id: str
    usage: Mapping[str, int] = field(default_factory=dict)
    from_cache: bool = False


class RateLimiter:
    """Spaces request starts at least ``1/rps`` apart across all threads."""

    def __init__(
        self,
        rps: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.interval = 1.0 / rps if rps and rps > 0 else 0.0
        self._clock = clock
        self._sleep = sleep
        self._next = float("-inf")
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until the next slot; returns the slot start time."""
        if self.interval == 0.0:
            return self._clock()
        with self._lock:
            now = self._clock()
            if now < self._next:
                self._sleep(self._next - now)
                now = self._clock()
            start = max(now, self._next)
            self._next = start + self.interval
            return start


def encode_frame_png(frame: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(frame)).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def build_payload(model_id: str, req: ModelRequest) -> dict[str, Any]:
    content: list[dict[str, Any]] = [
        {"type": "image_url", "image_url": {"url": encode_frame_png(f)}} for f in req.frames.frames
    ]
    content.append({"type": "text", "text": req.prompt_text})
    return {
        "model": model_id,
        "messages": [{"role": "user", "content": content}],
        "temperature": req.decode_params.temperature,
        "max_tokens": req.decode_params.max_tokens,
        "stream": False,
    }


def parse_completion(body: Any, fallback_model: str) -> ModelResponse:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise ProtocolError("response lacks choices[0].message.content") from None
    if isinstance(content, list):
        parts = [p.get("text") for p in content if isinstance(p, dict) and p.get("type") == "text"]
        if not parts or not all(isinstance(p, str) for p in parts):
            raise ProtocolError("response content parts carry no text")
        content = "".join(parts)
    if not isinstance(content, str):
        raise ProtocolError(f"response content is {type(content).__name__}, expected string")
    usage = body.get("usage")
    usage = {
        str(k): v for k, v in (usage.items() if isinstance(usage, dict) else ())
        if isinstance(v, int) and not isinstance(v, bool)
    }
    model = body.get("model") if isinstance(body.get("model"), str) else fallback_model
    return ModelResponse(text=content, model_id=model, usage=usage)


def cache_key(model_id: str, req: ModelRequest) -> str:
    return canonical_digest(
        {
            "model_id": model_id,
            "prompt_text": req.prompt_text,
            "frame_digests": req.frames.frame_digests(),
            "decode_params": asdict(req.decode_params),
        }
    )


def _retry_after(resp: httpx.Response) -> float:
    value = resp.headers.get("retry-after")
    if not value:
        return 0.0
    try:
        return max(0.0, float(value))
    except ValueError:
        return 0.0


class Gateway:
    """Shared, thread-safe client for both model roles.

    ``transport`` lets tests plug in an ``httpx.MockTransport``; ``sleep`` and
    ``rng`` make the backoff schedule observable.
    """

    def __init__(
        self,
        cfg: GatewayConfig,
        transport: httpx.BaseTransport | None = None,
        *,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
        rng: random.Random | None = None,
    ):
        validate_model_separation(cfg)
        self.cfg = cfg
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()
        self.limiter = RateLimiter(cfg.rate_limit_rps, clock=clock, sleep=sleep)
        self._client = httpx.Client(transport=transport)
        self._count_lock = threading.Lock()
        self.network_calls = 0
        self.backoff_delays: list[float] = []
        self._key_locks: dict[str, threading.Lock] = {}
        self._key_locks_guard = threading.Lock()
        self._headers = {role: self._auth_headers(cfg.endpoint(role)) for role in Role}

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "Gateway":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @staticmethod
    def _auth_headers(ep: EndpointConfig) -> dict[str, str]:
        if not ep.api_key_ref:
            return {}
        key = os.environ.get(ep.api_key_ref)
        if not key:
            raise ConfigError(f"environment variable {ep.api_key_ref} (API key for {ep.model_id}) is not set")
        return {"Authorization": f"Bearer {key}"}

    def model_id(self, role: Role) -> str:
        return self.cfg.endpoint(role).model_id

    def _backoff(self, attempt: int) -> float:
        cap = self.cfg.backoff_base_ms * (2 ** attempt) / 1000.0
        with self._rng_lock:
            return self._rng.uniform(0.0, cap)

    def complete_multimodal(self, req: ModelRequest) -> ModelResponse:
        ep = self.cfg.endpoint(req.role)
        if len(req.frames) > ep.max_frames_per_request:
            raise RequestError(
                f"{len(req.frames)} frames exceed the {ep.max_frames_per_request}-frame limit of {ep.model_id}"
            )
        url = ep.base_url.rstrip("/") + "/chat/completions"
        payload = build_payload(ep.model_id, req)
        last_problem = "no attempt made"
        for attempt in range(self.cfg.max_retries + 1):
            self.limiter.acquire()
            with self._count_lock:
                self.network_calls += 1
            wait_hint = 0.0
            try:
                resp = self._client.post(url, json=payload, headers=self._headers[req.role], timeout=ep.timeout_s)
            except httpx.TransportError as exc:
                last_problem = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 200:
                    try:
                        body = resp.json()
                    except (json.JSONDecodeError, UnicodeDecodeError):
                        raise ProtocolError(f"{ep.model_id}: response body is not JSON") from None
                    if not isinstance(body, dict):
                        raise ProtocolError(f"{ep.model_id}: response body is not an object")
                    return parse_completion(body, ep.model_id)
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_problem = f"HTTP {resp.status_code}"
                    wait_hint = _retry_after(resp)
                else:
                    raise RequestError(
                        f"{ep.model_id}: HTTP {resp.status_code}: {resp.text[:200]}", status_code=resp.status_code
                    )
            if attempt == self.cfg.max_retries:
                break
            delay = max(self._backoff(attempt), wait_hint)
            with self._count_lock:
                self.backoff_delays.append(delay)
            log.info("%s: %s, retry %d/%d in %.3fs", ep.model_id, last_problem, attempt + 1, self.cfg.max_retries, delay)
            self._sleep(delay)
        raise GatewayUnavailableError(
            f"{ep.model_id} unavailable after {self.cfg.max_retries + 1} attempts ({last_problem})"
        )

    def _key_lock(self, key: str) -> threading.Lock:
        with self._key_locks_guard:
            return self._key_locks.setdefault(key, threading.Lock())

    def cached_complete(self, req: ModelRequest) -> ModelResponse:
        cache_dir = self.cfg.cache_dir
        if cache_dir is None:
            return self.complete_multimodal(req)
        model_id = self.cfg.endpoint(req.role).model_id
        key = cache_key(model_id, req)
        path = Path(cache_dir) / f"{key}.json"
        with self._key_lock(key):
            hit = self._read_cache(path, key)
            if hit is not None:
                return hit
            resp = self.complete_multimodal(req)
            self._write_cache(path, key, resp)
            return resp

    @staticmethod
    def _read_cache(path: Path, key: str) -> ModelResponse | None:
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None
        except OSError as exc:
            log.warning("cache read failed for %s: %s; calling the model", path.name, exc)
            return None
        try:
            doc = json.loads(raw)
            if doc.get("key") != key or not isinstance(doc.get("text"), str):
                raise ValueError("cache entry does not match its key")
            return ModelResponse(
                text=doc["text"], model_id=str(doc["model_id"]), usage=dict(doc.get("usage") or {}), from_cache=True
            )
        except (ValueError, KeyError, AttributeError) as exc:
            log.warning("ignoring corrupt cache entry %s: %s", path.name, exc)
            return None

    @staticmethod
    def _write_cache(path: Path, key: str, resp: ModelResponse) -> None:
        doc = {"key": key, "text": resp.text, "model_id": resp.model_id, "usage": dict(resp.usage)}
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".tmp{threading.get_ident()}")
            tmp.write_text(canonical_json(doc), encoding="utf-8")
            os.replace(tmp, path)
        except OSError as exc:
            log.warning("cache write failed for %s: %s", path.name, exc)


def complete_multimodal(req: ModelRequest, cfg: GatewayConfig, transport: httpx.BaseTransport | None = None) -> ModelResponse:
    with Gateway(cfg, transport) as gw:
        return gw.complete_multimodal(req)


def cached_complete(req: ModelRequest, cfg: GatewayConfig, transport: httpx.BaseTransport | None = None) -> ModelResponse:
    with Gateway(cfg, transport) as gw:
        return gw.cached_complete(req)
