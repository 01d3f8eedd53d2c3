"""Frame sampling, 224x224 normalization and content digests.

Decoding is delegated to an external command (see ``SubprocessDecoder``); this
module never links a codec.
"""

from __future__ import annotations

import hashlib
import math
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence
from urllib.parse import urlparse

import numpy as np
from PIL import Image

from .corpus import CandidateVideo
from .errors import ConfigError, InvalidMediaError

TARGET_SIZE = 224
DEFAULT_RATE_HZ = 1.0
DEFAULT_MAX_FRAMES = 32


@dataclass(frozen=True)
class FramePlan:
    timestamps_s: tuple[float, ...]
    source_duration_s: float
    target_width: int = TARGET_SIZE
    target_height: int = TARGET_SIZE

    def __post_init__(self) -> None:
        ts = self.timestamps_s
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InvalidMediaError("frame timestamps must be strictly ascending")
        if ts and (ts[0] < 0 or ts[-1] >= self.source_duration_s):
            raise InvalidMediaError("frame timestamps must lie in [0, duration)")
        if self.target_width != TARGET_SIZE or self.target_height != TARGET_SIZE:
            raise InvalidMediaError(f"frames are fixed at {TARGET_SIZE}x{TARGET_SIZE}")

    def to_dict(self) -> dict:
        return {
            "timestamps_s": list(self.timestamps_s),
            "source_duration_s": self.source_duration_s,
            "target_width": self.target_width,
            "target_height": self.target_height,
        }


@dataclass(frozen=True, eq=False)
class FrameSequence:
    frames: tuple[np.ndarray, ...]
    plan: FramePlan
    media_digest: str

    def __post_init__(self) -> None:
        if len(self.frames) != len(self.plan.timestamps_s):
            raise InvalidMediaError(
                f"{len(self.frames)} frames for {len(self.plan.timestamps_s)} planned timestamps"
            )
        for f in self.frames:
            if f.shape != (TARGET_SIZE, TARGET_SIZE, 3) or f.dtype != np.uint8:
                raise InvalidMediaError(f"frame must be {TARGET_SIZE}x{TARGET_SIZE}x3 uint8, got {f.shape} {f.dtype}")

    def __len__(self) -> int:
        return len(self.frames)

    def frame_digests(self) -> list[str]:
        return [content_digest(np.ascontiguousarray(f).tobytes()) for f in self.frames]


def plan_frame_samples(
    duration_s: float, rate_hz: float = DEFAULT_RATE_HZ, max_frames: int = DEFAULT_MAX_FRAMES
) -> FramePlan:
    """Midpoint sampling at ``rate_hz``, or ``max_frames`` uniform midpoints if that is fewer.

    When ``duration_s * rate_hz`` is not an integer the last sampling interval
    is partial; its sample sits at the midpoint of the partial interval so it
    stays inside ``[0, duration_s)``.
    """
    if not (duration_s > 0) or not math.isfinite(duration_s):
        raise InvalidMediaError(f"duration must be > 0, got {duration_s}")
    if not (rate_hz > 0):
        raise ValueError(f"rate_hz must be > 0, got {rate_hz}")
    if max_frames < 1:
        raise ValueError(f"max_frames must be >= 1, got {max_frames}")

    if duration_s * rate_hz <= max_frames:
        n = math.ceil(duration_s * rate_hz)
        ts = []
        for k in range(n):
            if (k + 1) / rate_hz <= duration_s:
                ts.append((k + 0.5) / rate_hz)
            else:
                ts.append((k / rate_hz + duration_s) / 2.0)
    else:
        step = duration_s / max_frames
        ts = [(k + 0.5) * step for k in range(max_frames)]
    return FramePlan(tuple(ts), float(duration_s))


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centers, edge-clamped
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    i0 = np.floor(x).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, x - i0


def normalize_frame(image: np.ndarray, letterbox: bool = False) -> np.ndarray:
    """Resize an HxWx3 RGB image to 224x224 with bilinear interpolation.

    The default stretches (aspect ratio is not preserved). ``letterbox=True``
    scales to fit and pads with black.
    """
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidMediaError(f"expected an HxWx3 RGB image, got shape {arr.shape}")
    h, w = arr.shape[:2]
    if h == 0 or w == 0:
        raise InvalidMediaError("image has a zero dimension")

    if letterbox:
        scale = min(TARGET_SIZE / w, TARGET_SIZE / h)
        nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
        inner = _resize(arr, nh, nw)
        out = np.zeros((TARGET_SIZE, TARGET_SIZE, 3), dtype=np.uint8)
        top, left = (TARGET_SIZE - nh) // 2, (TARGET_SIZE - nw) // 2
        out[top : top + nh, left : left + nw] = inner
        return out
    return _resize(arr, TARGET_SIZE, TARGET_SIZE)


def _resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w) and arr.dtype == np.uint8:
        return arr.copy()
    src = arr.astype(np.float64)
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    fy = fy[:, None, None]
    out = top * (1 - fy) + bot * fy
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def content_digest(data: bytes) -> str:
    """SHA-256 of the exact bytes, hex-encoded."""
    return hashlib.sha256(data).hexdigest()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def local_path(locator: str) -> Path:
    parsed = urlparse(locator)
    if parsed.scheme == "file":
        return Path(parsed.path)
    if parsed.scheme in ("", ) or (len(parsed.scheme) == 1 and locator[1:2] == ":"):
        return Path(locator)
    raise InvalidMediaError(f"only local media locators are supported, got {locator!r}")


def load_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise InvalidMediaError(f"cannot read frame {path}: {exc}") from None


class FrameSource(Protocol):
    """Turns a candidate into the frames the VLM stages see."""

    def frames_for(self, candidate: CandidateVideo, plan: FramePlan) -> FrameSequence: ...

    def probe_duration(self, candidate: CandidateVideo) -> float: ...


def _fill(template: Sequence[str], values: dict[str, str]) -> list[str]:
    out = []
    for arg in template:
        for key, val in values.items():
            arg = arg.replace("{" + key + "}", val)
        out.append(arg)
    return out


class SubprocessDecoder:
    """Runs an external decoder: ``command`` with ``{input}``, ``{timestamps_csv}``, ``{outdir}``.

    The decoder writes ``frame_00000.<ext>`` ... (one lossless image per
    timestamp) into ``outdir``. An optional ``probe_command`` with ``{input}``
    prints the media duration in seconds on stdout.
    """

    def __init__(
        self,
        command: str | Sequence[str],
        probe_command: str | Sequence[str] | None = None,
        letterbox: bool = False,
        timeout_s: float = 300.0,
    ):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ConfigError("decoder command is empty")
        joined = " ".join(self.command)
        for ph in ("{input}", "{timestamps_csv}", "{outdir}"):
            if ph not in joined:
                raise ConfigError(f"decoder command lacks placeholder {ph}")
        if probe_command is None:
            self.probe_command = None
        else:
            self.probe_command = shlex.split(probe_command) if isinstance(probe_command, str) else list(probe_command)
        self.letterbox = letterbox
        self.timeout_s = timeout_s

    def _run(self, argv: list[str]) -> subprocess.CompletedProcess:
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout_s)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise InvalidMediaError(f"decoder failed to run: {exc}") from None
        if proc.returncode != 0:
            raise InvalidMediaError(f"decoder exited with {proc.returncode}: {proc.stderr.strip()}")
        return proc

    def probe_duration(self, candidate: CandidateVideo) -> float:
        if self.probe_command is None:
            raise InvalidMediaError(f"{candidate.video_id}: no duration and no probe command configured")
        path = local_path(candidate.media_locator)
        proc = self._run(_fill(self.probe_command, {"input": str(path)}))
        try:
            return float(proc.stdout.strip().split()[0])
        except (ValueError, IndexError):
            raise InvalidMediaError(f"probe printed no duration: {proc.stdout!r}") from None

    def frames_for(self, candidate: CandidateVideo, plan: FramePlan) -> FrameSequence:
        path = local_path(candidate.media_locator)
        if not path.is_file():
            raise InvalidMediaError(f"media not found: {path}")
        digest = file_digest(path)
        csv = ",".join(f"{t:.6f}" for t in plan.timestamps_s)
        with tempfile.TemporaryDirectory(prefix="signcurator-frames-") as outdir:
            self._run(_fill(self.command, {"input": str(path), "timestamps_csv": csv, "outdir": outdir}))
            frames = []
            for k in range(len(plan.timestamps_s)):
                hits = sorted(Path(outdir).glob(f"frame_{k:05d}.*"))
                if not hits:
                    raise InvalidMediaError(f"decoder produced no frame_{k:05d} for {candidate.video_id}")
                frames.append(normalize_frame(load_image(hits[0]), letterbox=self.letterbox))
        return FrameSequence(tuple(frames), plan, digest)
