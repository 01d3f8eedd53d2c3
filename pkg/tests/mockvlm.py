"""Scripted stand-ins for the VLM endpoint and the video decoder."""

from __future__ import annotations

import base64
import io
import json
import threading
from dataclasses import dataclass

import httpx
import numpy as np
from PIL import Image

from signcurator.corpus import CandidateVideo, Provenance, SourceKind, get_language, parse_timestamp
from signcurator.errors import InvalidMediaError
from signcurator.gateway import EndpointConfig, GatewayConfig
from signcurator.video import FrameSequence, content_digest

CURATOR_MODEL = "qwen2.5-vl-7b"
JUDGE_MODEL = "phi-4-multimodal-instruct"
BASE_URL = "http://vlm.test/v1"
FIXED_TIME = parse_timestamp("2025-01-01T00:00:00Z")

TASK_LINES = {
    "Task: face visibility check.": "face",
    "Task: sign language activity check.": "activity",
    "Task: text extraction.": "text",
    "Task: caption alignment judgment.": "judge",
}


@dataclass(frozen=True)
class Script:
    face: bool = True
    activity: bool = True
    text: str | None = "Today I learned School"
    aligned: bool = True


SIX_VIDEOS = {
    "v1-face": Script(face=False),
    "v2-activity": Script(activity=False),
    "v3-notext": Script(text=None),
    "v4-judge": Script(text="Follow for more songs", aligned=False),
    "v5-pass": Script(text="Hello, my name is Anna."),
    "v6-pass": Script(text="Today I learned School"),
}


def gateway_config(cache_dir=None, curator=CURATOR_MODEL, judge=JUDGE_MODEL, max_retries=1):
    return GatewayConfig(
        curator=EndpointConfig(BASE_URL, curator),
        judge=EndpointConfig(BASE_URL, judge),
        rate_limit_rps=0,
        max_retries=max_retries,
        backoff_base_ms=1,
        cache_dir=cache_dir,
    )


def candidates(ids, language="ase", duration_s=3.0):
    return [
        CandidateVideo(
            video_id=vid,
            source=Provenance(SourceKind.HASHTAG_QUERY, "asl"),
            language=get_language(language),
            media_locator=f"file:///media/{vid}.mp4",
            duration_s=duration_s,
            fetched_at=FIXED_TIME,
        )
        for vid in ids
    ]


class SyntheticFrames:
    """Frame source whose frames encode the video's index in the red channel."""

    def __init__(self, ids, broken=(), durations=None):
        self.index = {vid: i + 1 for i, vid in enumerate(ids)}
        self.broken = set(broken)
        self.durations = durations or {}

    def probe_duration(self, candidate):
        if candidate.video_id in self.durations:
            return self.durations[candidate.video_id]
        raise InvalidMediaError(f"cannot probe {candidate.video_id}")

    def frames_for(self, candidate, plan):
        if candidate.video_id in self.broken:
            raise InvalidMediaError(f"corrupt media for {candidate.video_id}")
        idx = self.index[candidate.video_id]
        frames = []
        for k in range(len(plan.timestamps_s)):
            f = np.zeros((224, 224, 3), dtype=np.uint8)
            f[..., 0] = idx * 20
            f[..., 1] = k
            frames.append(f)
        return FrameSequence(tuple(frames), plan, content_digest(candidate.video_id.encode()))


def _video_index(payload):
    url = payload["messages"][0]["content"][0]["image_url"]["url"]
    png = base64.b64decode(url.split(",", 1)[1])
    with Image.open(io.BytesIO(png)) as im:
        return int(np.asarray(im)[0, 0, 0]) // 20


def _prompt(payload):
    parts = payload["messages"][0]["content"]
    return next(p["text"] for p in parts if p["type"] == "text")


class ScriptedVLM:
    """OpenAI-style chat endpoint answering from per-video scripts.

    ``fail_after`` switches to HTTP 503 once that many replies have been served.
    """

    def __init__(self, scripts, ids=None, fail_after=None):
        self.scripts = scripts
        self.ids = list(ids or scripts)
        self.fail_after = fail_after
        self.served = 0
        self.requests = []
        self._lock = threading.Lock()

    def transport(self):
        return httpx.MockTransport(self.handler)

    def reply_for(self, stage, script):
        if stage == "face":
            return {"face_visible": script.face, "people_count": 1 if script.face else 0}
        if stage == "activity":
            return {"is_signing": script.activity}
        if stage == "text":
            if script.text is None:
                return {"text": None, "source": "None"}
            return {"text": script.text, "source": "EmbeddedText"}
        return {"aligned": script.aligned, "rationale": "scripted"}

    def handler(self, request):
        payload = json.loads(request.content)
        prompt = _prompt(payload)
        stage = TASK_LINES[prompt.splitlines()[0]]
        want_model = JUDGE_MODEL if stage == "judge" else CURATOR_MODEL
        if payload["model"] != want_model:
            return httpx.Response(400, json={"error": f"{stage} sent to {payload['model']}"})
        with self._lock:
            if self.fail_after is not None and self.served >= self.fail_after:
                return httpx.Response(503, json={"error": "overloaded"})
            self.served += 1
            vid = self.ids[_video_index(payload) - 1]
            self.requests.append((vid, stage))
        content = json.dumps(self.reply_for(stage, self.scripts[vid]))
        return httpx.Response(
            200,
            json={
                "model": payload["model"],
                "choices": [{"message": {"role": "assistant", "content": content}}],
                "usage": {"prompt_tokens": 10, "completion_tokens": 5},
            },
        )
