"""Per-video state machine, bounded-parallel driver, checkpoint and resume.

Each video runs Face -> Activity -> Text -> Judge and stops at the first
negative verdict. Terminal records are appended to the audit log and the
checkpoint is atomically rewritten after each one, from a single writer
thread. An unrecoverable gateway outage halts the run with everything finished
so far on disk.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import (
    REJECTION_FOR_STAGE,
    STAGE_ORDER,
    CandidateVideo,
    DatasetManifest,
    PipelineRecord,
    RecordState,
    RejectionReason,
    Stage,
    StageVerdict,
    build_manifest,
    canonical_digest,
    canonical_json,
    format_timestamp,
    parse_timestamp,
    utcnow,
    with_duration,
)
from .errors import (
    ConfigError,
    GatewayUnavailableError,
    InvalidMediaError,
    PipelineHaltedError,
    ProcessingError,
    ResumeError,
    StateMachineError,
)
from .gateway import DecodeParams, Gateway, GatewayConfig, Role, validate_model_separation
from .ingestion import dedup_candidates
from .stages import TemplateSet, run_stage
from .video import DEFAULT_MAX_FRAMES, DEFAULT_RATE_HZ, FrameSource, plan_frame_samples

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplingConfig:
    rate_hz: float = DEFAULT_RATE_HZ
    max_frames: int = DEFAULT_MAX_FRAMES
    letterbox: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    gateway: GatewayConfig
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    templates_dir: Path | None = None
    workers: int = 1
    checkpoint_path: Path | None = None
    audit_path: Path | None = None
    decode: DecodeParams = field(default_factory=DecodeParams)

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        validate_model_separation(self.gateway)
        if not (self.sampling.rate_hz > 0):
            raise ConfigError("sampling.rate_hz must be > 0")
        if self.sampling.max_frames < 1:
            raise ConfigError("sampling.max_frames must be >= 1")
        for role in Role:
            ep = self.gateway.endpoint(role)
            if self.sampling.max_frames > ep.max_frames_per_request:
                raise ConfigError(
                    f"sampling.max_frames={self.sampling.max_frames} exceeds {ep.model_id}'s "
                    f"max_frames_per_request={ep.max_frames_per_request}"
                )
        if self.checkpoint_path is not None and self.audit_path is None:
            raise ConfigError("checkpointing needs an audit_path to hold the finished records")


def config_digest(cfg: PipelineConfig, templates: TemplateSet) -> str:
    """Digest of everything that changes verdicts; paths and worker counts are excluded."""

    def ep(e):
        return {"base_url": e.base_url, "model_id": e.model_id, "max_frames_per_request": e.max_frames_per_request}

    return canonical_digest(
        {
            "curator": ep(cfg.gateway.endpoint(Role.CURATOR)),
            "judge": ep(cfg.gateway.endpoint(Role.JUDGE)),
            "sampling": asdict(cfg.sampling),
            "templates": templates.digest(),
            "decode": asdict(cfg.decode),
        }
    )


# --------------------------------------------------------------------------
# state machine

_NEXT_STATE = {
    Stage.FACE: RecordState.FACE_CHECKED,
    Stage.ACTIVITY: RecordState.ACTIVITY_CHECKED,
    Stage.TEXT: RecordState.TEXT_EXTRACTED,
    Stage.JUDGE: RecordState.ACCEPTED,
}
_STATE_BEFORE = {
    Stage.FACE: RecordState.INGESTED,
    Stage.ACTIVITY: RecordState.FACE_CHECKED,
    Stage.TEXT: RecordState.ACTIVITY_CHECKED,
    Stage.JUDGE: RecordState.TEXT_EXTRACTED,
}


def advance_state(record: PipelineRecord, verdict: StageVerdict) -> PipelineRecord:
    if record.terminal:
        raise StateMachineError(f"{record.video_id}: cannot advance terminal record ({record.state.value})")
    if len(record.verdicts) >= len(STAGE_ORDER):
        raise StateMachineError(f"{record.video_id}: all stages already have verdicts")
    expected = STAGE_ORDER[len(record.verdicts)]
    if verdict.stage is not expected or record.state is not _STATE_BEFORE[expected]:
        raise StateMachineError(
            f"{record.video_id}: got a {verdict.stage.value} verdict in state {record.state.value}; "
            f"expected {expected.value}"
        )
    verdicts = record.verdicts + (verdict,)
    if not verdict.positive:
        return replace(
            record,
            state=RecordState.REJECTED,
            rejection_reason=REJECTION_FOR_STAGE[verdict.stage],
            verdicts=verdicts,
        )
    updated = replace(record, state=_NEXT_STATE[verdict.stage], verdicts=verdicts)
    if verdict.stage is Stage.TEXT:
        updated = replace(updated, extracted_text=verdict.outcome.text)
    return updated


def fail_record(record: PipelineRecord, message: str) -> PipelineRecord:
    if record.terminal:
        raise StateMachineError(f"{record.video_id}: cannot fail terminal record")
    return replace(
        record, state=RecordState.REJECTED, rejection_reason=RejectionReason.PROCESSING_ERROR, error=message
    )


# --------------------------------------------------------------------------
# checkpoint and audit files


@dataclass(frozen=True)
class Checkpoint:
    completed: Mapping[str, str]
    config_digest: str
    written_at: datetime = field(default_factory=utcnow)

    @classmethod
    def empty(cls, digest: str) -> "Checkpoint":
        return cls({}, digest)

    def to_dict(self) -> dict:
        return {
            "completed": dict(sorted(self.completed.items())),
            "config_digest": self.config_digest,
            "written_at": format_timestamp(self.written_at),
        }

    def save(self, path: str | Path) -> None:
        atomic_write(Path(path), canonical_json(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(dict(doc["completed"]), str(doc["config_digest"]), parse_timestamp(doc["written_at"]))
        except FileNotFoundError:
            raise
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ResumeError(f"unreadable checkpoint {path}: {exc}") from None


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def audit_line(record: PipelineRecord) -> str:
    return canonical_json(record.to_dict()) + "\n"


def read_audit(path: str | Path) -> list[PipelineRecord]:
    """Read an audit log; the last line per video wins and a torn final line is skipped."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    by_id: dict[str, PipelineRecord] = {}
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            rec = PipelineRecord.from_dict(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            if i == len(lines) - 1 and not text.endswith("\n"):
                log.warning("skipping torn final audit line in %s", path)
                continue
            raise ResumeError(f"{path}: malformed audit line {i + 1}: {exc}") from None
        by_id.pop(rec.video_id, None)
        by_id[rec.video_id] = rec
    return list(by_id.values())


# --------------------------------------------------------------------------
# driver


@dataclass
class RunResult:
    manifest: DatasetManifest
    records: list[PipelineRecord]

    @property
    def rejections(self) -> list[PipelineRecord]:
        return [r for r in self.records if r.state is RecordState.REJECTED]


class Pipeline:
    def __init__(
        self,
        cfg: PipelineConfig,
        frame_source: FrameSource,
        gateway: Gateway | None = None,
        templates: TemplateSet | None = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.frame_source = frame_source
        self.templates = templates or TemplateSet.load(cfg.templates_dir)
        self.gateway = gateway or Gateway(cfg.gateway)
        self.config_digest = config_digest(cfg, self.templates)

    # one video, all stages, on a worker thread
    def process(self, candidate: CandidateVideo) -> PipelineRecord:
        record = PipelineRecord(candidate)
        try:
            if candidate.duration_s is None:
                candidate = with_duration(candidate, self.frame_source.probe_duration(candidate))
                record = replace(record, candidate=candidate)
            s = self.cfg.sampling
            plan = plan_frame_samples(candidate.duration_s, s.rate_hz, s.max_frames)
            frames = self.frame_source.frames_for(candidate, plan)
        except InvalidMediaError as exc:
            return fail_record(record, f"media: {exc}")
        record = replace(record, frame_timestamps=plan.timestamps_s, media_digest=frames.media_digest)

        lang = candidate.language
        for stage in STAGE_ORDER:
            try:
                verdict = run_stage(
                    stage,
                    frames,
                    self.gateway,
                    self.templates.get(stage, lang),
                    lang,
                    caption=record.extracted_text if stage is Stage.JUDGE else None,
                    decode=self.cfg.decode,
                )
            except ProcessingError as exc:
                return fail_record(record, str(exc))
            record = advance_state(record, verdict)
            if record.terminal:
                return record
        raise StateMachineError(f"{record.video_id}: finished all stages without a terminal state")

    def _load_resumable(self, checkpoint: Checkpoint) -> dict[str, PipelineRecord]:
        if checkpoint.config_digest != self.config_digest:
            raise ResumeError(
                "checkpoint was written under a different configuration "
                f"({checkpoint.config_digest[:12]} != {self.config_digest[:12]}); refusing to resume"
            )
        if not checkpoint.completed:
            return {}
        audit_path = self.cfg.audit_path
        if audit_path is None or not Path(audit_path).exists():
            log.warning("no audit log to resume from; reprocessing %d videos", len(checkpoint.completed))
            return {}
        done = {}
        for rec in read_audit(audit_path):
            want = checkpoint.completed.get(rec.video_id)
            if want is not None and rec.digest() == want:
                done[rec.video_id] = rec
        lost = set(checkpoint.completed) - set(done)
        if lost:
            log.warning("%d checkpointed videos missing from the audit log; reprocessing them", len(lost))
        return done

    def run(
        self,
        candidates: Iterable[CandidateVideo],
        checkpoint: Checkpoint | None = None,
        created_at: datetime | None = None,
    ) -> RunResult:
        candidates = dedup_candidates(candidates)
        done = self._load_resumable(checkpoint) if checkpoint is not None else {}
        ckpt_path, audit_path = self.cfg.checkpoint_path, self.cfg.audit_path
        completed = {vid: rec.digest() for vid, rec in done.items()}

        if audit_path is not None:
            # rewrite with only the verified records, then append from here on
            atomic_write(Path(audit_path), "".join(audit_line(done[vid]) for vid in sorted(done)))
        if ckpt_path is not None:
            Checkpoint(dict(completed), self.config_digest).save(ckpt_path)

        todo = [c for c in candidates if c.video_id not in done]
        finished: dict[str, PipelineRecord] = dict(done)
        outage: GatewayUnavailableError | None = None

        def commit(rec: PipelineRecord) -> None:
            finished[rec.video_id] = rec
            completed[rec.video_id] = rec.digest()
            if audit_path is not None:
                with open(audit_path, "a", encoding="utf-8") as fh:
                    fh.write(audit_line(rec))
                    fh.flush()
            if ckpt_path is not None:
                Checkpoint(dict(completed), self.config_digest).save(ckpt_path)

        pool = ThreadPoolExecutor(max_workers=self.cfg.workers, thread_name_prefix="curator")
        try:
            pending: set[Future] = set()
            queue = list(reversed(todo))
            while queue or pending:
                while queue and outage is None and len(pending) < self.cfg.workers:
                    pending.add(pool.submit(self.process, queue.pop()))
                if not pending:
                    break
                ready, pending = wait(pending, return_when=FIRST_COMPLETED)
                for fut in ready:
                    try:
                        rec = fut.result()
                    except GatewayUnavailableError as exc:
                        outage = outage or exc
                        continue
                    commit(rec)
                if outage is not None:
                    queue.clear()
        finally:
            pool.shutdown(wait=True, cancel_futures=True)

        order = {c.video_id: i for i, c in enumerate(candidates)}
        records = sorted((r for r in finished.values() if r.video_id in order), key=lambda r: order[r.video_id])
        if outage is not None:
            raise PipelineHaltedError(
                f"halted after {len(records)} of {len(candidates)} videos: {outage}", records
            )
        manifest = build_manifest(
            (r for r in records if r.state is RecordState.ACCEPTED), self.config_digest, created_at
        )
        return RunResult(manifest, records)


def run_pipeline(
    candidates: Sequence[CandidateVideo],
    cfg: PipelineConfig,
    frame_source: FrameSource,
    gateway: Gateway | None = None,
    templates: TemplateSet | None = None,
    created_at: datetime | None = None,
) -> RunResult:
    return Pipeline(cfg, frame_source, gateway, templates).run(candidates, created_at=created_at)


def resume(
    checkpoint: Checkpoint,
    candidates: Sequence[CandidateVideo],
    cfg: PipelineConfig,
    frame_source: FrameSource,
    gateway: Gateway | None = None,
    templates: TemplateSet | None = None,
    created_at: datetime | None = None,
) -> RunResult:
    return Pipeline(cfg, frame_source, gateway, templates).run(candidates, checkpoint, created_at=created_at)
