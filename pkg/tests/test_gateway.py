import json
import random
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signcurator.errors import (
    ConfigError,
    GatewayUnavailableError,
    ModelSeparationError,
    ProtocolError,
    RequestError,
)
from signcurator.gateway import (
    DecodeParams,
    EndpointConfig,
    Gateway,
    GatewayConfig,
    ModelRequest,
    RateLimiter,
    Role,
    build_payload,
    cache_key,
    complete_multimodal,
    validate_model_separation,
)
from signcurator.video import FrameSequence, plan_frame_samples

from mockvlm import gateway_config


def frames(n=2, value=0):
    plan = plan_frame_samples(float(n))
    fs = [np.full((224, 224, 3), value, dtype=np.uint8) for _ in range(n)]
    return FrameSequence(tuple(fs), plan, "digest")


def ok_body(text="hello", model="m"):
    return {"model": model, "choices": [{"message": {"content": text}}], "usage": {"prompt_tokens": 3}}


class Scripted:
    def __init__(self, *responses):
        self.responses = list(responses)
        self.seen = []

    def __call__(self, request):
        self.seen.append(request)
        status, body, headers = self.responses.pop(0)
        if isinstance(body, (dict, list)):
            return httpx.Response(status, json=body, headers=headers)
        return httpx.Response(status, content=body, headers=headers)


def gateway(script, **cfg_overrides):
    cfg = gateway_config(max_retries=cfg_overrides.pop("max_retries", 4))
    for k, v in cfg_overrides.items():
        cfg = GatewayConfig(**{**cfg.__dict__, k: v})
    sleeps = []
    gw = Gateway(cfg, httpx.MockTransport(script), sleep=sleeps.append, rng=random.Random(7))
    return gw, sleeps


def req(role=Role.CURATOR, prompt="describe", value=0):
    return ModelRequest(role, prompt, frames(value=value))


def test_separation_examples():
    validate_model_separation(gateway_config(curator="qwen2.5-vl-7b", judge="phi-4-multimodal-instruct"))
    with pytest.raises(ModelSeparationError, match="self-preference"):
        validate_model_separation(gateway_config(curator="qwen2.5-vl-7b", judge="qwen2.5-vl-7b"))
    with pytest.raises(ModelSeparationError):
        validate_model_separation(gateway_config(curator="Qwen2.5-VL-7B ", judge="qwen2.5-vl-7b"))
    with pytest.raises(ConfigError):
        validate_model_separation(GatewayConfig(curator=EndpointConfig("http://x", "a"), judge=None))


@settings(max_examples=100, deadline=None)
@given(st.text(min_size=1, max_size=20).filter(str.strip))
def test_same_model_never_constructs_a_gateway(model):
    calls = []
    with pytest.raises(ModelSeparationError):
        Gateway(gateway_config(curator=model, judge=model.upper()), httpx.MockTransport(calls.append))
    assert calls == []


def test_fixed_text():
    script = Scripted((200, ok_body("hi there"), {}))
    gw, _ = gateway(script)
    resp = gw.complete_multimodal(req())
    assert resp.text == "hi there" and not resp.from_cache
    assert resp.usage == {"prompt_tokens": 3}
    payload = json.loads(script.seen[0].content)
    content = payload["messages"][0]["content"]
    assert [c["type"] for c in content] == ["image_url", "image_url", "text"]
    assert content[0]["image_url"]["url"].startswith("data:image/png;base64,")
    assert payload["model"] == "qwen2.5-vl-7b" and payload["temperature"] == 0.0
    assert script.seen[0].url.path == "/v1/chat/completions"


def test_retry_after_two_429s():
    script = Scripted((429, {}, {"Retry-After": "2"}), (429, {}, {}), (200, ok_body(), {}))
    gw, sleeps = gateway(script, backoff_base_ms=500)
    assert gw.complete_multimodal(req()).text == "hello"
    assert gw.network_calls == 3
    rng = random.Random(7)
    schedule = [rng.uniform(0, 0.5), rng.uniform(0, 1.0)]
    assert sleeps == [max(schedule[0], 2.0), schedule[1]]
    assert gw.backoff_delays == sleeps


def test_server_errors_exhaust_retries():
    script = Scripted(*[(503, {}, {})] * 3)
    gw, sleeps = gateway(script, max_retries=2)
    with pytest.raises(GatewayUnavailableError):
        gw.complete_multimodal(req())
    assert gw.network_calls == 3 and len(sleeps) == 2


def test_transport_errors_are_retried():
    state = {"n": 0}

    def flaky(request):
        state["n"] += 1
        if state["n"] == 1:
            raise httpx.ConnectError("refused")
        return httpx.Response(200, json=ok_body())

    gw, sleeps = gateway(flaky)
    assert gw.complete_multimodal(req()).text == "hello"
    assert len(sleeps) == 1


def test_malformed_body_is_protocol_error_without_retry():
    gw, sleeps = gateway(Scripted((200, b"<html>", {})))
    with pytest.raises(ProtocolError):
        gw.complete_multimodal(req())
    assert gw.network_calls == 1 and sleeps == []

    gw, _ = gateway(Scripted((200, {"choices": []}, {})))
    with pytest.raises(ProtocolError):
        gw.complete_multimodal(req())


def test_client_error_not_retried():
    gw, sleeps = gateway(Scripted((400, {"error": "bad"}, {})))
    with pytest.raises(RequestError) as info:
        gw.complete_multimodal(req())
    assert info.value.status_code == 400 and sleeps == []


def test_frame_limit_enforced_before_network():
    cfg = GatewayConfig(
        curator=EndpointConfig("http://x/v1", "a", max_frames_per_request=1),
        judge=EndpointConfig("http://x/v1", "b"),
    )
    seen = []
    gw = Gateway(cfg, httpx.MockTransport(seen.append))
    with pytest.raises(RequestError):
        gw.complete_multimodal(req())
    assert seen == []


def test_content_parts_reply():
    body = {"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]}
    gw, _ = gateway(Scripted((200, body, {})))
    assert gw.complete_multimodal(req()).text == "ab"


def test_cache_hits_and_misses(tmp_path):
    calls = []

    def handler(request):
        calls.append(json.loads(request.content)["model"])
        return httpx.Response(200, json=ok_body(f"reply {len(calls)}"))

    cfg = gateway_config(cache_dir=tmp_path)
    gw = Gateway(cfg, httpx.MockTransport(handler))
    first = gw.cached_complete(req())
    second = gw.cached_complete(req())
    assert gw.network_calls == 1
    assert second.from_cache and second.text == first.text

    gw.cached_complete(req(value=1))
    assert gw.network_calls == 2

    gw.cached_complete(req(role=Role.JUDGE))
    assert calls[-1] == "phi-4-multimodal-instruct"
    assert len(list(tmp_path.glob("*.json"))) == 3

    fresh = Gateway(cfg, httpx.MockTransport(handler))
    assert fresh.cached_complete(req()).text == first.text
    assert fresh.network_calls == 0


def test_corrupt_cache_entry_degrades_to_network(tmp_path):
    cfg = gateway_config(cache_dir=tmp_path)
    gw = Gateway(cfg, httpx.MockTransport(lambda r: httpx.Response(200, json=ok_body())))
    r = req()
    (tmp_path / f"{cache_key('qwen2.5-vl-7b', r)}.json").write_text("{garbage")
    assert gw.cached_complete(r).text == "hello"
    assert gw.network_calls == 1


def test_cache_key_sensitivity():
    base = req()
    assert cache_key("a", base) != cache_key("b", base)
    assert cache_key("a", base) != cache_key("a", req(value=3))
    assert cache_key("a", base) != cache_key("a", ModelRequest(Role.CURATOR, "describe", base.frames, DecodeParams(0.7)))
    assert cache_key("a", base) == cache_key("a", req())


def test_rate_limiter_spacing():
    now = [0.0]
    slept = []

    def sleep(s):
        slept.append(s)
        now[0] += s

    lim = RateLimiter(2.0, clock=lambda: now[0], sleep=sleep)
    starts = [lim.acquire() for _ in range(4)]
    assert starts == [0.0, 0.5, 1.0, 1.5]


def test_api_key_from_environment(monkeypatch):
    cfg = GatewayConfig(
        curator=EndpointConfig("http://x/v1", "a", api_key_ref="TEST_CURATOR_KEY"),
        judge=EndpointConfig("http://x/v1", "b"),
        rate_limit_rps=0,
    )
    monkeypatch.delenv("TEST_CURATOR_KEY", raising=False)
    with pytest.raises(ConfigError, match="TEST_CURATOR_KEY"):
        Gateway(cfg)
    monkeypatch.setenv("TEST_CURATOR_KEY", "sekret")
    script = Scripted((200, ok_body(), {}))
    Gateway(cfg, httpx.MockTransport(script)).complete_multimodal(req())
    assert script.seen[0].headers["authorization"] == "Bearer sekret"


def test_build_payload_counts_images():
    p = build_payload("m", ModelRequest(Role.JUDGE, "x", frames(3)))
    assert sum(c["type"] == "image_url" for c in p["messages"][0]["content"]) == 3
    assert p["stream"] is False


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        n_images = sum(c["type"] == "image_url" for c in body["messages"][0]["content"])
        out = json.dumps(ok_body(f"{body['model']} saw {n_images} frames", body["model"])).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


def test_real_http_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        url = f"http://127.0.0.1:{server.server_port}/v1"
        cfg = GatewayConfig(curator=EndpointConfig(url, "cur"), judge=EndpointConfig(url, "jud"), rate_limit_rps=0)
        resp = complete_multimodal(req(Role.JUDGE), cfg)
        assert resp.text == "jud saw 2 frames"
        assert resp.model_id == "jud"
    finally:
        server.shutdown()
