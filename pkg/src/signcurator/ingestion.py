"""Candidate ingestion: hashtag/user/manifest sources -> deduplicated candidates.

Live platform crawling is not done here. A ``CandidateFetcher`` supplies raw
items for hashtag and user sources; ``DirectoryFetcher`` is the file-backed
reference implementation used for replays and tests.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import yaml

from .corpus import (
    CandidateVideo,
    LanguageCode,
    Provenance,
    SourceKind,
    get_language,
    parse_timestamp,
    read_jsonl,
    utcnow,
)
from .errors import ConfigError, IngestionError, ManifestParseError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hashtag:
    tag: str
    variant: str  # "english" | "native"


class HashtagTable:
    """Per-language hashtags, each tagged english or native."""

    def __init__(self, entries: Mapping[str, Mapping[str, Sequence[str]]]):
        self._entries: dict[str, dict[str, list[str]]] = {}
        for code, lists in entries.items():
            if not isinstance(lists, Mapping):
                raise ConfigError(f"hashtag table entry for {code!r} must be a mapping")
            unknown = set(lists) - {"english", "native"}
            if unknown:
                raise ConfigError(f"hashtag table entry for {code!r} has unknown keys {sorted(unknown)}")
            self._entries[code] = {
                "english": [str(t) for t in lists.get("english") or []],
                "native": [str(t) for t in lists.get("native") or []],
            }

    def __contains__(self, code: object) -> bool:
        return str(code) in self._entries

    def languages(self) -> list[str]:
        return list(self._entries)

    def hashtags(self, code: str) -> list[Hashtag]:
        lists = self._entries[code]
        return [Hashtag(t, "english") for t in lists["english"]] + [
            Hashtag(t, "native") for t in lists["native"]
        ]

    def validate(self) -> None:
        for code, lists in self._entries.items():
            for variant in ("english", "native"):
                if not [t for t in lists[variant] if t.strip()]:
                    raise ConfigError(f"hashtag table: {code} needs at least one {variant} hashtag")

    @classmethod
    def from_file(cls, path: str | Path) -> "HashtagTable":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read hashtag table {path}: {exc}") from None
        return cls.from_text(text)

    @classmethod
    def from_text(cls, text: str) -> "HashtagTable":
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed hashtag table: {exc}") from None
        if not isinstance(data, Mapping):
            raise ConfigError("hashtag table must map ISO 639-3 codes to lists")
        return cls(data)

    @classmethod
    def default(cls) -> "HashtagTable":
        text = resources.files("signcurator").joinpath("data/hashtags.yaml").read_text(encoding="utf-8")
        return cls.from_text(text)


@dataclass(frozen=True)
class CrawlSource:
    kind: SourceKind
    value: str
    language: LanguageCode

    def __post_init__(self) -> None:
        if not self.value:
            raise ValidationError("CrawlSource.value must be nonempty")

    def provenance(self) -> Provenance:
        if self.kind is SourceKind.USER_HANDLE:
            return Provenance(self.kind, hash_handle(self.value))
        return Provenance(self.kind, self.value)


def hash_handle(handle: str) -> str:
    """Stable pseudonym for a user handle; raw handles never get persisted."""
    norm = handle.strip().lstrip("@").lower()
    return "sha256:" + hashlib.sha256(norm.encode("utf-8")).hexdigest()


def build_queries(language: str | LanguageCode, table: HashtagTable) -> list[CrawlSource]:
    lang = get_language(language)
    if lang.iso639_3 not in table:
        raise ConfigError(f"hashtag table has no entry for {lang.iso639_3}")
    lists = {v: [h for h in table.hashtags(lang.iso639_3) if h.variant == v] for v in ("english", "native")}
    for variant, tags in lists.items():
        if not [h for h in tags if h.tag.strip()]:
            raise ConfigError(f"hashtag table: {lang.iso639_3} needs at least one {variant} hashtag")
    seen: set[str] = set()
    out = []
    for h in table.hashtags(lang.iso639_3):
        tag = h.tag.strip().lstrip("#")
        key = tag.casefold()
        if not tag or key in seen:
            continue
        seen.add(key)
        out.append(CrawlSource(SourceKind.HASHTAG_QUERY, tag, lang))
    return out


class CandidateFetcher(Protocol):
    """Returns raw crawl items for a hashtag or user source.

    Each item is a mapping with at least ``video_id`` and ``media_locator``;
    ``duration_s`` and ``description_text`` are optional. Raise
    ``IngestionError(retryable=True)`` on transient failures.
    """

    def fetch(self, source: CrawlSource) -> Iterable[Mapping[str, Any]]: ...


class DirectoryFetcher:
    """Replays pre-crawled results from ``<root>/<kind>/<value>.jsonl``.

    ``kind`` is ``hashtag`` or ``user``. User files are looked up by the hashed
    handle first, then by the raw handle.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, source: CrawlSource) -> Path:
        if source.kind is SourceKind.HASHTAG_QUERY:
            return self.root / "hashtag" / f"{source.value}.jsonl"
        hashed = hash_handle(source.value).split(":", 1)[1]
        p = self.root / "user" / f"{hashed}.jsonl"
        return p if p.exists() else self.root / "user" / f"{source.value.lstrip('@')}.jsonl"

    def fetch(self, source: CrawlSource) -> list[dict[str, Any]]:
        path = self._path(source)
        if not path.exists():
            return []
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise IngestionError(f"fetch failed for {source.kind.value} {source.value}: {exc}", retryable=True) from None
        return read_jsonl(text, "crawl item")


def _candidate_from_item(
    item: Mapping[str, Any], provenance: Provenance, language: LanguageCode, fetched_at: datetime
) -> CandidateVideo:
    vid = item.get("video_id")
    if not isinstance(vid, str) or not vid:
        raise ValidationError("missing or empty video_id")
    loc = item.get("media_locator")
    if not isinstance(loc, str) or not loc:
        raise ValidationError("missing or empty media_locator")
    item_lang = item.get("language")
    if item_lang is not None and item_lang != language.iso639_3:
        raise ValidationError(f"language {item_lang!r} does not match source language {language.iso639_3}")
    duration = item.get("duration_s")
    if duration is not None and (isinstance(duration, bool) or not isinstance(duration, (int, float))):
        raise ValidationError(f"duration_s must be a number, got {duration!r}")
    desc = item.get("description_text")
    if desc is not None and not isinstance(desc, str):
        raise ValidationError("description_text must be a string")
    ts = item.get("fetched_at")
    return CandidateVideo(
        video_id=vid,
        source=provenance,
        language=language,
        media_locator=loc,
        duration_s=None if duration is None else float(duration),
        description_text=desc,
        fetched_at=parse_timestamp(ts) if ts else fetched_at,
    )


def parse_crawl_manifest(text: str, provenance: Provenance, fetched_at: datetime | None = None) -> list[CandidateVideo]:
    """All-or-nothing parse of a crawl manifest (one JSON object per line)."""
    fetched_at = fetched_at or utcnow()
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            item = json.loads(line)
            if not isinstance(item, dict):
                raise ValidationError("line is not a JSON object")
            if "language" not in item:
                raise ValidationError("missing language")
            lang = get_language(item["language"])
            out.append(_candidate_from_item(item, provenance, lang, fetched_at))
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"crawl manifest: {exc.msg}", lineno, exc.colno) from None
        except ValidationError as exc:
            raise ManifestParseError(f"crawl manifest: {exc}", lineno, 1) from None
    return out


def load_crawl_source(
    source: CrawlSource, fetcher: CandidateFetcher | None = None, fetched_at: datetime | None = None
) -> list[CandidateVideo]:
    fetched_at = fetched_at or utcnow()
    prov = source.provenance()
    if source.kind is SourceKind.MANIFEST_FILE:
        path = Path(source.value)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise IngestionError(f"cannot read crawl manifest {path}: {exc}") from exc
        cands = parse_crawl_manifest(text, prov, fetched_at)
        for c in cands:
            if c.language != source.language:
                log.debug("%s: manifest language %s overrides source language %s", c.video_id, c.language, source.language)
        return cands

    if fetcher is None:
        raise ConfigError(f"{source.kind.value} sources need a fetcher")
    try:
        items = list(fetcher.fetch(source))
    except IngestionError:
        raise
    except Exception as exc:  # fetchers are third-party code
        raise IngestionError(f"fetcher failed for {source.kind.value} {source.value}: {exc}", retryable=True) from exc
    out = []
    for i, item in enumerate(items):
        try:
            out.append(_candidate_from_item(item, prov, source.language, fetched_at))
        except ValidationError as exc:
            raise IngestionError(f"{source.kind.value} {source.value}: item {i}: {exc}") from None
    return out


def dedup_candidates(candidates: Iterable[CandidateVideo]) -> list[CandidateVideo]:
    """Keep the first candidate per video_id, preserving first-seen order."""
    seen: set[str] = set()
    out = []
    for c in candidates:
        if c.video_id in seen:
            continue
        seen.add(c.video_id)
        out.append(c)
    return out


def ingest(
    sources: Sequence[CrawlSource], fetcher: CandidateFetcher | None = None, workers: int = 4
) -> list[CandidateVideo]:
    """Load all sources (concurrently) and merge them in source order."""
    fetched_at = utcnow()
    if not sources:
        return []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        batches = list(pool.map(lambda s: load_crawl_source(s, fetcher, fetched_at), sources))
    return dedup_candidates(c for batch in batches for c in batch)


def write_candidates(candidates: Iterable[CandidateVideo], path: str | Path) -> None:
    lines = [json.dumps(c.to_dict(), sort_keys=True, ensure_ascii=False) for c in candidates]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_candidates(path: str | Path) -> list[CandidateVideo]:
    """Read a candidate file written by ``write_candidates`` or a bare crawl manifest."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    rows = read_jsonl(text, "candidate")
    if rows and all("source" in r for r in rows):
        out = []
        for r in rows:
            lineno = r.pop("__line__")
            try:
                out.append(CandidateVideo.from_dict(r))
            except (KeyError, ValueError, ValidationError) as exc:
                raise ManifestParseError(f"candidate file: {exc}", lineno, 1) from None
        return out
    return parse_crawl_manifest(text, Provenance(SourceKind.MANIFEST_FILE, str(path)))
