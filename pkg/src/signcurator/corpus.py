"""Corpus data model: language tags, candidates, per-stage verdicts, pipeline
records and the accepted-corpus manifest.

Everything here is an immutable value type. Serialization goes through plain
``to_dict``/``from_dict`` pairs so the same shapes are used for the manifest,
the audit log and the checkpoint.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Any, Iterable, Mapping

from .errors import ManifestParseError, ValidationError

MANIFEST_VERSION = 1
_ISO_RE = re.compile(r"^[a-z]{3}$")


# --------------------------------------------------------------------------
# languages


@dataclass(frozen=True)
class LanguageCode:
    iso639_3: str
    display_name: str
    spoken_language: str

    def __post_init__(self) -> None:
        if not _ISO_RE.match(self.iso639_3):
            raise ValidationError(f"invalid ISO 639-3 code: {self.iso639_3!r}")

    def __str__(self) -> str:
        return self.iso639_3


LANGUAGES: dict[str, LanguageCode] = {}


def register_language(code: str, display_name: str, spoken_language: str) -> LanguageCode:
    lang = LanguageCode(code, display_name, spoken_language)
    LANGUAGES[code] = lang
    return lang


for _code, _name, _spoken in [
    ("ase", "American Sign Language", "en-US"),
    ("asf", "Australian Sign Language", "en-AU"),
    ("bfi", "British Sign Language", "en-GB"),
    ("csl", "Chinese Sign Language", "zh"),
    ("fsl", "French Sign Language", "fr"),
    ("gsg", "German Sign Language", "de"),
    ("ise", "Italian Sign Language", "it"),
    ("swl", "Swedish Sign Language", "sv"),
]:
    register_language(_code, _name, _spoken)

BUILTIN_LANGUAGES = tuple(LANGUAGES)


def get_language(code: str | LanguageCode) -> LanguageCode:
    if isinstance(code, LanguageCode):
        return code
    try:
        return LANGUAGES[code]
    except KeyError:
        raise ValidationError(f"unknown sign language code: {code!r}") from None


# --------------------------------------------------------------------------
# enums


class SourceKind(str, enum.Enum):
    HASHTAG_QUERY = "HashtagQuery"
    USER_HANDLE = "UserHandle"
    MANIFEST_FILE = "ManifestFile"


class Stage(str, enum.Enum):
    FACE = "Face"
    ACTIVITY = "Activity"
    TEXT = "Text"
    JUDGE = "Judge"


STAGE_ORDER: tuple[Stage, ...] = (Stage.FACE, Stage.ACTIVITY, Stage.TEXT, Stage.JUDGE)


class RecordState(str, enum.Enum):
    INGESTED = "Ingested"
    FACE_CHECKED = "FaceChecked"
    ACTIVITY_CHECKED = "ActivityChecked"
    TEXT_EXTRACTED = "TextExtracted"
    JUDGED = "Judged"
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"

    @property
    def terminal(self) -> bool:
        return self in (RecordState.ACCEPTED, RecordState.REJECTED)


class RejectionReason(str, enum.Enum):
    FACE_NOT_VISIBLE = "FaceNotVisible"
    NOT_SIGNING = "NotSigning"
    NO_TEXT = "NoText"
    MISALIGNED_TEXT = "MisalignedText"
    PROCESSING_ERROR = "ProcessingError"


class TextSource(str, enum.Enum):
    FORMAL_CAPTION = "FormalCaption"
    EMBEDDED_TEXT = "EmbeddedText"
    NONE = "None"


REJECTION_FOR_STAGE = {
    Stage.FACE: RejectionReason.FACE_NOT_VISIBLE,
    Stage.ACTIVITY: RejectionReason.NOT_SIGNING,
    Stage.TEXT: RejectionReason.NO_TEXT,
    Stage.JUDGE: RejectionReason.MISALIGNED_TEXT,
}

# number of verdicts a non-terminal record in each state carries
_VERDICTS_FOR_STATE = {
    RecordState.INGESTED: 0,
    RecordState.FACE_CHECKED: 1,
    RecordState.ACTIVITY_CHECKED: 2,
    RecordState.TEXT_EXTRACTED: 3,
    RecordState.JUDGED: 4,
}


# --------------------------------------------------------------------------
# timestamps


def format_timestamp(ts: datetime) -> str:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    ts = ts.astimezone(timezone.utc)
    fmt = "%Y-%m-%dT%H:%M:%S.%fZ" if ts.microsecond else "%Y-%m-%dT%H:%M:%SZ"
    return ts.strftime(fmt)


def parse_timestamp(text: str) -> datetime:
    if not isinstance(text, str):
        raise ValidationError(f"timestamp must be a string, got {type(text).__name__}")
    norm = text[:-1] + "+00:00" if text.endswith(("Z", "z")) else text
    try:
        ts = datetime.fromisoformat(norm)
    except ValueError:
        raise ValidationError(f"not an RFC 3339 timestamp: {text!r}") from None
    if ts.tzinfo is None:
        raise ValidationError(f"timestamp lacks a UTC offset: {text!r}")
    return ts.astimezone(timezone.utc)


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


# --------------------------------------------------------------------------
# candidates


@dataclass(frozen=True)
class Provenance:
    """Where a candidate came from. User handles are stored hashed."""

    kind: SourceKind
    value: str

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "value": self.value}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Provenance":
        return cls(SourceKind(d["kind"]), str(d["value"]))


@dataclass(frozen=True)
class CandidateVideo:
    video_id: str
    source: Provenance
    language: LanguageCode
    media_locator: str
    duration_s: float | None = None
    description_text: str | None = None
    fetched_at: datetime = field(default_factory=utcnow)

    def __post_init__(self) -> None:
        if not self.video_id:
            raise ValidationError("video_id must be nonempty")
        if self.duration_s is not None:
            if not math.isfinite(self.duration_s) or self.duration_s < 0:
                raise ValidationError(f"{self.video_id}: duration_s must be >= 0, got {self.duration_s}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "video_id": self.video_id,
            "source": self.source.to_dict(),
            "language": self.language.iso639_3,
            "media_locator": self.media_locator,
            "duration_s": self.duration_s,
            "description_text": self.description_text,
            "fetched_at": format_timestamp(self.fetched_at),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CandidateVideo":
        duration = d.get("duration_s")
        return cls(
            video_id=str(d["video_id"]),
            source=Provenance.from_dict(d["source"]),
            language=get_language(d["language"]),
            media_locator=str(d["media_locator"]),
            duration_s=None if duration is None else float(duration),
            description_text=d.get("description_text"),
            fetched_at=parse_timestamp(d["fetched_at"]),
        )


# --------------------------------------------------------------------------
# stage outcomes


@dataclass(frozen=True)
class FaceVerdict:
    face_visible: bool
    people_count: int

    @property
    def positive(self) -> bool:
        return self.face_visible

    def to_dict(self) -> dict[str, Any]:
        return {"face_visible": self.face_visible, "people_count": self.people_count}


@dataclass(frozen=True)
class ActivityVerdict:
    is_signing: bool

    @property
    def positive(self) -> bool:
        return self.is_signing

    def to_dict(self) -> dict[str, Any]:
        return {"is_signing": self.is_signing}


@dataclass(frozen=True)
class TextExtraction:
    text: str | None
    source: TextSource

    def __post_init__(self) -> None:
        if (self.source is TextSource.NONE) != (self.text is None):
            raise ValidationError("TextExtraction: source None iff text absent")
        if self.text is not None and not self.text.strip():
            raise ValidationError("TextExtraction: text must be nonempty after trimming")

    @classmethod
    def none(cls) -> "TextExtraction":
        return cls(None, TextSource.NONE)

    @property
    def positive(self) -> bool:
        return self.text is not None

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "source": self.source.value}


@dataclass(frozen=True)
class JudgeVerdict:
    aligned: bool
    rationale: str | None = None

    @property
    def positive(self) -> bool:
        return self.aligned

    def to_dict(self) -> dict[str, Any]:
        return {"aligned": self.aligned, "rationale": self.rationale}


def outcome_from_dict(stage: Stage, d: Mapping[str, Any]):
    if stage is Stage.FACE:
        return FaceVerdict(bool(d["face_visible"]), int(d["people_count"]))
    if stage is Stage.ACTIVITY:
        return ActivityVerdict(bool(d["is_signing"]))
    if stage is Stage.TEXT:
        return TextExtraction(d.get("text"), TextSource(d["source"]))
    return JudgeVerdict(bool(d["aligned"]), d.get("rationale"))


@dataclass(frozen=True)
class StageVerdict:
    stage: Stage
    outcome: FaceVerdict | ActivityVerdict | TextExtraction | JudgeVerdict
    model_id: str
    raw_response: str
    latency_ms: float = 0.0
    cached: bool = False
    attempts: int = 1

    def __post_init__(self) -> None:
        if not self.model_id:
            raise ValidationError("StageVerdict.model_id must be nonempty")

    @property
    def positive(self) -> bool:
        return self.outcome.positive

    def content_dict(self) -> dict[str, Any]:
        """The run-independent part: excludes timing and cache provenance."""
        return {
            "stage": self.stage.value,
            "outcome": self.outcome.to_dict(),
            "model_id": self.model_id,
            "raw_response": self.raw_response,
        }

    def digest(self) -> str:
        return canonical_digest(self.content_dict())

    def to_dict(self) -> dict[str, Any]:
        d = self.content_dict()
        d.update(latency_ms=self.latency_ms, cached=self.cached, attempts=self.attempts)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StageVerdict":
        stage = Stage(d["stage"])
        return cls(
            stage=stage,
            outcome=outcome_from_dict(stage, d["outcome"]),
            model_id=str(d["model_id"]),
            raw_response=str(d["raw_response"]),
            latency_ms=float(d.get("latency_ms", 0.0)),
            cached=bool(d.get("cached", False)),
            attempts=int(d.get("attempts", 1)),
        )


# --------------------------------------------------------------------------
# pipeline records


@dataclass(frozen=True)
class PipelineRecord:
    candidate: CandidateVideo
    state: RecordState = RecordState.INGESTED
    rejection_reason: RejectionReason | None = None
    verdicts: tuple[StageVerdict, ...] = ()
    extracted_text: str | None = None
    error: str | None = None
    frame_timestamps: tuple[float, ...] = ()
    media_digest: str | None = None

    @property
    def video_id(self) -> str:
        return self.candidate.video_id

    @property
    def terminal(self) -> bool:
        return self.state.terminal

    def verdict_for(self, stage: Stage) -> StageVerdict | None:
        for v in self.verdicts:
            if v.stage is stage:
                return v
        return None

    def content_dict(self) -> dict[str, Any]:
        return {
            "candidate": self.candidate.to_dict(),
            "state": self.state.value,
            "rejection_reason": self.rejection_reason.value if self.rejection_reason else None,
            "verdicts": [v.content_dict() for v in self.verdicts],
            "extracted_text": self.extracted_text,
            "error": self.error,
            "frame_timestamps": list(self.frame_timestamps),
            "media_digest": self.media_digest,
        }

    def digest(self) -> str:
        return canonical_digest(self.content_dict())

    def to_dict(self) -> dict[str, Any]:
        d = self.content_dict()
        d["verdicts"] = [v.to_dict() for v in self.verdicts]
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PipelineRecord":
        reason = d.get("rejection_reason")
        return cls(
            candidate=CandidateVideo.from_dict(d["candidate"]),
            state=RecordState(d["state"]),
            rejection_reason=RejectionReason(reason) if reason else None,
            verdicts=tuple(StageVerdict.from_dict(v) for v in d.get("verdicts", ())),
            extracted_text=d.get("extracted_text"),
            error=d.get("error"),
            frame_timestamps=tuple(float(t) for t in d.get("frame_timestamps") or ()),
            media_digest=d.get("media_digest"),
        )


@dataclass(frozen=True)
class RecordValidation:
    ok: bool
    violation: str | None = None

    def __bool__(self) -> bool:
        return self.ok


def validate_record(r: PipelineRecord) -> RecordValidation:
    """Check every PipelineRecord invariant; report the first one violated."""

    def bad(msg: str) -> RecordValidation:
        return RecordValidation(False, msg)

    rejected = r.state is RecordState.REJECTED
    if rejected != (r.rejection_reason is not None):
        return bad("rejection_reason must be present exactly when state is Rejected")

    if r.state is RecordState.ACCEPTED and not (r.extracted_text and r.extracted_text.strip()):
        return bad("Accepted record requires nonempty extracted_text")

    stages = [v.stage for v in r.verdicts]
    if stages != list(STAGE_ORDER[: len(stages)]):
        return bad(f"verdicts out of stage order: {[s.value for s in stages]}")

    for v in r.verdicts:
        if not v.model_id:
            return bad(f"{v.stage.value} verdict lacks model_id")

    if rejected and r.rejection_reason is not RejectionReason.PROCESSING_ERROR:
        if not r.verdicts:
            return bad(f"{r.rejection_reason.value} rejection without any verdict")
        last = r.verdicts[-1]
        if REJECTION_FOR_STAGE[last.stage] is not r.rejection_reason:
            return bad(
                f"rejection reason {r.rejection_reason.value} does not match "
                f"last verdict stage {last.stage.value}"
            )
        if last.positive:
            return bad(f"rejecting {last.stage.value} verdict is positive")
        prior = r.verdicts[:-1]
    else:
        prior = r.verdicts
    for v in prior:
        if not v.positive:
            return bad(f"negative {v.stage.value} verdict followed by further processing")

    if r.state is RecordState.ACCEPTED:
        if len(r.verdicts) != len(STAGE_ORDER):
            return bad("Accepted record requires exactly Face, Activity, Text, Judge verdicts")
    elif not rejected:
        want = _VERDICTS_FOR_STATE[r.state]
        if len(r.verdicts) != want:
            return bad(f"state {r.state.value} expects {want} verdicts, found {len(r.verdicts)}")

    text_v = r.verdict_for(Stage.TEXT)
    if text_v is not None and text_v.positive and r.extracted_text != text_v.outcome.text:
        return bad("extracted_text differs from the Text verdict")
    if text_v is None and r.extracted_text is not None:
        return bad("extracted_text set without a Text verdict")
    return RecordValidation(True)


# --------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestRecord:
    """Projection of an accepted record; carries no media or user handles."""

    video_id: str
    language: str
    duration_s: float
    extracted_text: str
    verdict_digests: tuple[str, ...]
    state: str = RecordState.ACCEPTED.value

    @classmethod
    def from_record(cls, r: PipelineRecord) -> "ManifestRecord":
        if r.state is not RecordState.ACCEPTED:
            raise ValidationError(f"{r.video_id}: only Accepted records enter the manifest (state {r.state.value})")
        check = validate_record(r)
        if not check:
            raise ValidationError(f"{r.video_id}: {check.violation}")
        if r.candidate.duration_s is None:
            raise ValidationError(f"{r.video_id}: accepted record has no duration")
        return cls(
            video_id=r.video_id,
            language=r.candidate.language.iso639_3,
            duration_s=float(r.candidate.duration_s),
            extracted_text=r.extracted_text or "",
            verdict_digests=tuple(v.digest() for v in r.verdicts),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "video_id": self.video_id,
            "language": self.language,
            "duration_s": self.duration_s,
            "extracted_text": self.extracted_text,
            "verdict_digests": list(self.verdict_digests),
            "state": self.state,
        }

    @property
    def sort_key(self) -> tuple[str, str]:
        return (self.language, self.video_id)


@dataclass(frozen=True)
class LanguageTotals:
    video_count: int
    total_seconds: float

    @property
    def total_hours(self) -> float:
        return self.total_seconds / 3600.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "video_count": self.video_count,
            "total_seconds": self.total_seconds,
            "total_hours": self.total_hours,
        }


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...]
    per_language_totals: Mapping[str, LanguageTotals]
    config_digest: str
    created_at: datetime
    version: int = MANIFEST_VERSION

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (
            self.version == other.version
            and self.records == other.records
            and dict(self.per_language_totals) == dict(other.per_language_totals)
            and self.config_digest == other.config_digest
            and self.created_at == other.created_at
        )

    __hash__ = None  # type: ignore[assignment]


def compute_totals(records: Iterable[ManifestRecord]) -> dict[str, LanguageTotals]:
    by_lang: dict[str, list[float]] = {}
    for rec in records:
        by_lang.setdefault(rec.language, []).append(rec.duration_s)
    return {
        lang: LanguageTotals(len(durs), math.fsum(durs))
        for lang, durs in sorted(by_lang.items())
    }


def build_manifest(
    records: Iterable[PipelineRecord | ManifestRecord],
    config_digest: str,
    created_at: datetime | None = None,
) -> DatasetManifest:
    projected = []
    for r in records:
        projected.append(r if isinstance(r, ManifestRecord) else ManifestRecord.from_record(r))
    seen: set[str] = set()
    for rec in projected:
        if rec.video_id in seen:
            raise ValidationError(f"duplicate video_id in manifest: {rec.video_id}")
        seen.add(rec.video_id)
    projected.sort(key=lambda rec: rec.sort_key)
    return DatasetManifest(
        records=tuple(projected),
        per_language_totals=compute_totals(projected),
        config_digest=config_digest,
        created_at=created_at or utcnow(),
    )


def validate_manifest(m: DatasetManifest) -> None:
    """Raise ValidationError naming the first offending record or language."""
    seen: set[str] = set()
    for rec in m.records:
        if rec.state != RecordState.ACCEPTED.value:
            raise ValidationError(f"record {rec.video_id}: state {rec.state} is not Accepted")
        if not rec.video_id:
            raise ValidationError("record with empty video_id")
        if rec.video_id in seen:
            raise ValidationError(f"record {rec.video_id}: duplicate video_id")
        seen.add(rec.video_id)
        if not _ISO_RE.match(rec.language):
            raise ValidationError(f"record {rec.video_id}: invalid language {rec.language!r}")
        if not math.isfinite(rec.duration_s) or rec.duration_s < 0:
            raise ValidationError(f"record {rec.video_id}: invalid duration {rec.duration_s}")
        if not rec.extracted_text.strip():
            raise ValidationError(f"record {rec.video_id}: empty extracted_text")
        if len(rec.verdict_digests) != len(STAGE_ORDER):
            raise ValidationError(f"record {rec.video_id}: expected 4 verdict digests")
    expected = compute_totals(m.records)
    stated = dict(m.per_language_totals)
    if set(expected) != set(stated):
        raise ValidationError(
            f"per_language_totals languages {sorted(stated)} do not match records {sorted(expected)}"
        )
    for lang, want in expected.items():
        got = stated[lang]
        if got.video_count != want.video_count:
            raise ValidationError(
                f"per_language_totals[{lang}]: video_count {got.video_count} but {want.video_count} records"
            )
        if abs(got.total_hours - want.total_hours) > 1e-9:
            raise ValidationError(
                f"per_language_totals[{lang}]: total_hours {got.total_hours} but records sum to {want.total_hours}"
            )


def manifest_to_dict(m: DatasetManifest) -> dict[str, Any]:
    records = sorted(m.records, key=lambda rec: rec.sort_key)
    return {
        "version": m.version,
        "records": [rec.to_dict() for rec in records],
        "per_language_totals": {k: v.to_dict() for k, v in sorted(m.per_language_totals.items())},
        "config_digest": m.config_digest,
        "created_at": format_timestamp(m.created_at),
    }


def serialize_manifest(m: DatasetManifest) -> str:
    return canonical_json(manifest_to_dict(m), indent=2) + "\n"


_TOP_KEYS = {"version", "records", "per_language_totals", "config_digest", "created_at"}


def parse_manifest(text: str) -> DatasetManifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise ManifestParseError("manifest must be a mapping at top level", 1, 1)
    missing = _TOP_KEYS - set(doc)
    if missing:
        raise ManifestParseError(f"manifest lacks keys: {sorted(missing)}")
    if doc["version"] != MANIFEST_VERSION:
        raise ValidationError(f"unsupported manifest version {doc['version']!r}")
    records = []
    for i, raw in enumerate(doc["records"]):
        try:
            records.append(
                ManifestRecord(
                    video_id=str(raw["video_id"]),
                    language=str(raw["language"]),
                    duration_s=float(raw["duration_s"]),
                    extracted_text=str(raw["extracted_text"]),
                    verdict_digests=tuple(raw["verdict_digests"]),
                    state=str(raw.get("state", "")),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            name = raw.get("video_id", f"#{i}") if isinstance(raw, dict) else f"#{i}"
            raise ValidationError(f"record {name}: malformed ({exc})") from None
    totals = {}
    for lang, raw in doc["per_language_totals"].items():
        try:
            count = int(raw["video_count"])
            seconds = float(raw["total_seconds"]) if "total_seconds" in raw else float(raw["total_hours"]) * 3600.0
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"per_language_totals[{lang}]: malformed ({exc})") from None
        totals[lang] = LanguageTotals(count, seconds)
        if "total_hours" in raw and abs(float(raw["total_hours"]) - totals[lang].total_hours) > 1e-9:
            raise ValidationError(f"per_language_totals[{lang}]: total_hours inconsistent with total_seconds")
    m = DatasetManifest(
        records=tuple(sorted(records, key=lambda rec: rec.sort_key)),
        per_language_totals=totals,
        config_digest=str(doc["config_digest"]),
        created_at=parse_timestamp(doc["created_at"]),
        version=doc["version"],
    )
    validate_manifest(m)
    return m


# --------------------------------------------------------------------------
# gold labels


@dataclass(frozen=True)
class GoldLabel:
    video_id: str
    is_valid_pair: bool
    gold_translation: str | None = None

    def __post_init__(self) -> None:
        if not self.video_id:
            raise ValidationError("GoldLabel.video_id must be nonempty")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GoldLabel":
        valid = d["is_valid_pair"]
        if not isinstance(valid, bool):
            raise ValidationError(f"{d.get('video_id')}: is_valid_pair must be a boolean")
        return cls(str(d["video_id"]), valid, d.get("gold_translation"))

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"video_id": self.video_id, "is_valid_pair": self.is_valid_pair}
        if self.gold_translation is not None:
            d["gold_translation"] = self.gold_translation
        return d


def read_jsonl(text: str, what: str = "record") -> list[dict[str, Any]]:
    """Parse line-delimited JSON, skipping blank lines; errors name the line."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"malformed {what}: {exc.msg}", lineno, exc.colno) from None
        if not isinstance(row, dict):
            raise ManifestParseError(f"{what} must be an object", lineno, 1)
        row["__line__"] = lineno
        rows.append(row)
    return rows


def parse_gold_labels(text: str) -> list[GoldLabel]:
    out = []
    for row in read_jsonl(text, "gold label"):
        lineno = row.pop("__line__")
        try:
            out.append(GoldLabel.from_dict(row))
        except KeyError as exc:
            raise ManifestParseError(f"gold label missing field {exc}", lineno, 1) from None
    return out


# --------------------------------------------------------------------------
# canonical encoding


def canonical_json(obj: Any, indent: int | None = None) -> str:
    if indent is None:
        return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"), allow_nan=False)
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=indent, allow_nan=False)


def canonical_digest(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def with_duration(c: CandidateVideo, duration_s: float) -> CandidateVideo:
    return replace(c, duration_s=float(duration_s))
