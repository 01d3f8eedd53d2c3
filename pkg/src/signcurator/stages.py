"""The four VLM stages: prompt templates, strict reply parsing, stage calls.

Face, activity and text extraction go to the curator model; the alignment
judgment goes to the judge model. A reply that cannot be parsed earns one
reprompt; a second failure becomes a ``ProcessingError``.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Protocol

from .corpus import (
    ActivityVerdict,
    FaceVerdict,
    JudgeVerdict,
    LanguageCode,
    Stage,
    StageVerdict,
    TextExtraction,
    TextSource,
    canonical_digest,
    get_language,
)
from .errors import (
    ConfigError,
    ProcessingError,
    ProtocolError,
    RequestError,
    TemplateError,
    UnparseableResponseError,
)
from .gateway import DecodeParams, ModelRequest, ModelResponse, Role
from .video import FrameSequence

log = logging.getLogger(__name__)

PLACEHOLDERS = ("language_name", "spoken_language", "caption_context")
_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

NO_TEXT_SENTINEL = "No text found."
CAPTION_OPEN = "<<<CAPTION>>>"
CAPTION_CLOSE = "<<<END CAPTION>>>"

STAGE_FILE_NAMES = {Stage.FACE: "face", Stage.ACTIVITY: "activity", Stage.TEXT: "text", Stage.JUDGE: "judge"}
STAGE_ROLES = {Stage.FACE: Role.CURATOR, Stage.ACTIVITY: Role.CURATOR, Stage.TEXT: Role.CURATOR, Stage.JUDGE: Role.JUDGE}

OUTPUT_SCHEMA_HINTS = {
    Stage.FACE: (
        "Reply with a single JSON object and nothing else, in exactly this form:\n"
        '{"face_visible": true or false, "people_count": <number of people visible>}'
    ),
    Stage.ACTIVITY: (
        "Reply with a single JSON object and nothing else, in exactly this form:\n"
        '{"is_signing": true or false}'
    ),
    Stage.TEXT: (
        "Reply with a single JSON object and nothing else, in exactly this form:\n"
        '{"text": "<extracted text>" or null, "source": "FormalCaption" or "EmbeddedText" or "None"}\n'
        'If both a caption track and embedded text exist, put the caption in "text" and the embedded '
        'text in an extra "embedded_text" field.'
    ),
    Stage.JUDGE: (
        "Reply with a single JSON object and nothing else, in exactly this form:\n"
        '{"aligned": true or false, "rationale": "<one short sentence>"}'
    ),
}

REPROMPT_SUFFIX = (
    "\n\nYour previous reply could not be read. Reply again with only the JSON object described above, "
    "without any other text."
)

SPOKEN_LANGUAGE_NAMES = {
    "en": "English",
    "de": "German",
    "fr": "French",
    "it": "Italian",
    "sv": "Swedish",
    "zh": "Chinese",
    "es": "Spanish",
    "pt": "Portuguese",
    "nl": "Dutch",
    "ja": "Japanese",
}


def spoken_language_name(tag: str) -> str:
    base = tag.split("-")[0].lower()
    return SPOKEN_LANGUAGE_NAMES.get(base, tag)


@dataclass(frozen=True)
class PromptTemplate:
    stage: Stage
    body: str
    output_schema_hint: str

    def __post_init__(self) -> None:
        unknown = self.placeholders - set(PLACEHOLDERS)
        if unknown:
            raise TemplateError(f"{self.stage.value} template uses unknown placeholders {sorted(unknown)}")
        if self.stage is Stage.JUDGE and "caption_context" not in self.placeholders:
            raise TemplateError("judge template must embed {caption_context}")

    @property
    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RE.findall(self.body))

    @classmethod
    def for_stage(cls, stage: Stage, body: str) -> "PromptTemplate":
        return cls(stage, body, OUTPUT_SCHEMA_HINTS[stage])


def delimit_caption(caption: str) -> str:
    # any run of "<" that could start a delimiter gets backslash-escaped
    escaped = re.sub(r"<{3,}", lambda m: "\\<" * len(m.group()), caption)
    return f"{CAPTION_OPEN}\n{escaped}\n{CAPTION_CLOSE}"


def render_prompt(tpl: PromptTemplate, language: LanguageCode | str, caption_context: str | None = None) -> str:
    lang = get_language(language)
    values = {
        "language_name": lang.display_name,
        "spoken_language": spoken_language_name(lang.spoken_language),
    }
    if caption_context is not None:
        values["caption_context"] = delimit_caption(caption_context)

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in values:
            raise TemplateError(f"{tpl.stage.value} template: unresolved placeholder {{{name}}}")
        return values[name]

    body = _PLACEHOLDER_RE.sub(sub, tpl.body)
    return body.rstrip() + "\n\n" + tpl.output_schema_hint


class TemplateSet:
    """One active template per (stage, language), falling back to a stage default.

    Files are named ``<stage>.txt`` or ``<stage>.<iso639_3>.txt`` with stage in
    face/activity/text/judge. ``directory`` entries override the shipped ones.
    """

    def __init__(self, templates: Mapping[tuple[Stage, str | None], PromptTemplate]):
        self._templates = dict(templates)
        for stage in Stage:
            if (stage, None) not in self._templates:
                raise TemplateError(f"no default template for stage {stage.value}")

    def get(self, stage: Stage, language: LanguageCode | str | None = None) -> PromptTemplate:
        code = get_language(language).iso639_3 if language is not None else None
        return self._templates.get((stage, code)) or self._templates[(stage, None)]

    def digest(self) -> str:
        entries = sorted(
            (stage.value, code or "", tpl.body) for (stage, code), tpl in self._templates.items()
        )
        return canonical_digest(entries)

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "TemplateSet":
        templates: dict[tuple[Stage, str | None], PromptTemplate] = {}
        shipped = resources.files("signcurator").joinpath("templates")
        for stage, name in STAGE_FILE_NAMES.items():
            body = shipped.joinpath(f"{name}.txt").read_text(encoding="utf-8")
            templates[(stage, None)] = PromptTemplate.for_stage(stage, body)
        if directory is not None:
            directory = Path(directory)
            if not directory.is_dir():
                raise ConfigError(f"template directory {directory} does not exist")
            by_name = {name: stage for stage, name in STAGE_FILE_NAMES.items()}
            for path in sorted(directory.glob("*.txt")):
                parts = path.name[: -len(".txt")].split(".")
                if parts[0] not in by_name or len(parts) > 2:
                    log.warning("ignoring unrecognized template file %s", path.name)
                    continue
                stage = by_name[parts[0]]
                code = get_language(parts[1]).iso639_3 if len(parts) == 2 else None
                templates[(stage, code)] = PromptTemplate.for_stage(stage, path.read_text(encoding="utf-8"))
        return cls(templates)


# --------------------------------------------------------------------------
# reply parsing

_FENCE_RE = re.compile(r"```[A-Za-z0-9_-]*[ \t]*\n?(.*?)```", re.DOTALL)


def _first_json_object(raw: str) -> dict[str, Any] | None:
    candidates = [m.group(1) for m in _FENCE_RE.finditer(raw)] + [raw]
    decoder = json.JSONDecoder()
    for text in candidates:
        pos = text.find("{")
        while pos != -1:
            try:
                obj, _ = decoder.raw_decode(text, pos)
            except json.JSONDecodeError:
                obj = None
            except RecursionError:
                return None
            if isinstance(obj, dict):
                return obj
            pos = text.find("{", pos + 1)
    return None


def _bool_field(obj: Mapping[str, Any], name: str, raw: str) -> bool:
    value = obj.get(name)
    if not isinstance(value, bool):
        raise UnparseableResponseError(f"field {name!r} must be true or false, got {value!r}", raw)
    return value


def _optional_str(obj: Mapping[str, Any], name: str, raw: str) -> str | None:
    value = obj.get(name)
    if value is None:
        return None
    if not isinstance(value, str):
        raise UnparseableResponseError(f"field {name!r} must be a string or null", raw)
    value = value.strip()
    return value or None


def _parse_text(obj: Mapping[str, Any], raw: str) -> TextExtraction:
    if not ({"text", "source", "formal_caption", "embedded_text"} & set(obj)):
        raise UnparseableResponseError("text reply lacks 'text' and 'source'", raw)
    text = _optional_str(obj, "text", raw)
    formal = _optional_str(obj, "formal_caption", raw)
    embedded = _optional_str(obj, "embedded_text", raw)
    source = obj.get("source")
    if source is not None and source not in {s.value for s in TextSource}:
        raise UnparseableResponseError(f"unknown text source {source!r}", raw)
    if text == NO_TEXT_SENTINEL:
        text = None

    if formal:
        return TextExtraction(formal, TextSource.FORMAL_CAPTION)
    if text is not None:
        if source in (None, TextSource.NONE.value):
            raise UnparseableResponseError("text present but source is None", raw)
        return TextExtraction(text, TextSource(source))
    if embedded:
        return TextExtraction(embedded, TextSource.EMBEDDED_TEXT)
    return TextExtraction.none()


def parse_verdict(raw: str, stage: Stage):
    """Map a model reply to the stage's typed verdict or raise ``UnparseableResponseError``."""
    if not isinstance(raw, str):
        raise UnparseableResponseError(f"reply is {type(raw).__name__}, not text", str(raw))
    obj = _first_json_object(raw)
    if obj is None:
        if stage is Stage.TEXT and NO_TEXT_SENTINEL in raw:
            return TextExtraction.none()
        raise UnparseableResponseError(f"no JSON object in {stage.value} reply", raw)

    if stage is Stage.FACE:
        visible = _bool_field(obj, "face_visible", raw)
        count = obj.get("people_count")
        if isinstance(count, bool) or not isinstance(count, int) or count < 0:
            raise UnparseableResponseError(f"people_count must be a nonnegative integer, got {count!r}", raw)
        if count == 0 and visible:
            log.warning("face reply claims a visible face with people_count=0; treating face as not visible")
            visible = False
        return FaceVerdict(visible, count)
    if stage is Stage.ACTIVITY:
        return ActivityVerdict(_bool_field(obj, "is_signing", raw))
    if stage is Stage.TEXT:
        return _parse_text(obj, raw)
    return JudgeVerdict(_bool_field(obj, "aligned", raw), _optional_str(obj, "rationale", raw))


# --------------------------------------------------------------------------
# stage calls


class CompletionBackend(Protocol):
    def cached_complete(self, req: ModelRequest) -> ModelResponse: ...

    def model_id(self, role: Role) -> str: ...


def run_stage(
    stage: Stage,
    frames: FrameSequence,
    gw: CompletionBackend,
    tpl: PromptTemplate,
    language: LanguageCode | str,
    caption: str | None = None,
    decode: DecodeParams | None = None,
) -> StageVerdict:
    if tpl.stage is not stage:
        raise TemplateError(f"{tpl.stage.value} template used for the {stage.value} stage")
    if len(frames) == 0:
        raise ProcessingError(f"{stage.value}: no frames to send")
    role = STAGE_ROLES[stage]
    prompt = render_prompt(tpl, language, caption)
    decode = decode or DecodeParams()
    started = time.perf_counter()
    problem: UnparseableResponseError | None = None
    for attempt in (1, 2):
        text = prompt if attempt == 1 else prompt + REPROMPT_SUFFIX
        try:
            resp = gw.cached_complete(ModelRequest(role, text, frames, decode))
        except (RequestError, ProtocolError) as exc:
            raise ProcessingError(f"{stage.value}: {exc}") from exc
        try:
            outcome = parse_verdict(resp.text, stage)
        except UnparseableResponseError as exc:
            problem = exc
            log.info("%s reply unparseable (attempt %d): %s", stage.value, attempt, exc)
            continue
        return StageVerdict(
            stage=stage,
            outcome=outcome,
            model_id=gw.model_id(role),
            raw_response=resp.text,
            latency_ms=(time.perf_counter() - started) * 1000.0,
            cached=resp.from_cache,
            attempts=attempt,
        )
    raise ProcessingError(f"{stage.value}: reply unparseable after reprompt: {problem}")


def detect_face(frames, gw, tpl, language, decode=None) -> StageVerdict:
    return run_stage(Stage.FACE, frames, gw, tpl, language, decode=decode)


def detect_sign_activity(frames, gw, tpl, language, decode=None) -> StageVerdict:
    return run_stage(Stage.ACTIVITY, frames, gw, tpl, language, decode=decode)


def extract_text(frames, gw, tpl, language, decode=None) -> StageVerdict:
    return run_stage(Stage.TEXT, frames, gw, tpl, language, decode=decode)


def judge_alignment(frames, text: str, gw, tpl, language, decode=None) -> StageVerdict:
    if not text or not text.strip():
        raise ValueError("judge_alignment needs nonempty text")
    return run_stage(Stage.JUDGE, frames, gw, tpl, language, caption=text, decode=decode)
