"""One config file for every subcommand.

Precedence, lowest first: config file, command-line flags, environment.
Relative paths in the file resolve against the file's directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .corpus import SourceKind, get_language
from .errors import ConfigError, ValidationError
from .gateway import DecodeParams, EndpointConfig, GatewayConfig
from .ingestion import CrawlSource, HashtagTable, build_queries
from .pipeline import PipelineConfig, SamplingConfig

ENV_CACHE_DIR = "SIGN_CURATOR_CACHE_DIR"
ENV_WORKERS = "SIGN_CURATOR_WORKERS"

_TOP_KEYS = {
    "gateway",
    "sampling",
    "decode",
    "decoder",
    "templates_dir",
    "workers",
    "checkpoint_path",
    "audit_path",
    "hashtags",
    "languages",
    "sources",
    "crawl_dir",
    "candidates_path",
    "manifest_path",
    "scorer_url",
}
_GATEWAY_KEYS = {"curator", "judge", "rate_limit_rps", "max_retries", "backoff_base_ms", "cache_dir"}


@dataclass(frozen=True)
class DecoderConfig:
    command: str | list[str]
    probe_command: str | list[str] | None = None
    timeout_s: float = 300.0


@dataclass(frozen=True)
class CliConfig:
    gateway: GatewayConfig | None = None
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    decode: DecodeParams = field(default_factory=DecodeParams)
    decoder: DecoderConfig | None = None
    templates_dir: Path | None = None
    workers: int = 1
    checkpoint_path: Path | None = None
    audit_path: Path | None = None
    hashtags_path: Path | None = None
    languages: tuple[str, ...] = ()
    sources: tuple[CrawlSource, ...] = ()
    crawl_dir: Path | None = None
    candidates_path: Path | None = None
    manifest_path: Path | None = None
    scorer_url: str | None = None

    def pipeline_config(self) -> PipelineConfig:
        if self.gateway is None:
            raise ConfigError("config has no gateway section")
        cfg = PipelineConfig(
            gateway=self.gateway,
            sampling=self.sampling,
            templates_dir=self.templates_dir,
            workers=self.workers,
            checkpoint_path=self.checkpoint_path,
            audit_path=self.audit_path,
            decode=self.decode,
        )
        cfg.validate()
        return cfg

    def hashtag_table(self) -> HashtagTable:
        return HashtagTable.from_file(self.hashtags_path) if self.hashtags_path else HashtagTable.default()

    def crawl_sources(self, language: str | None = None) -> list[CrawlSource]:
        """Explicit sources plus hashtag queries for each configured language."""
        table = self.hashtag_table()
        out = list(self.sources)
        for code in self.languages:
            out.extend(build_queries(code, table))
        if language is not None:
            want = get_language(language)
            out = [s for s in out if s.language == want]
        return out

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.gateway is not None:
            self.pipeline_config()


def _path(value: Any, base: Path) -> Path | None:
    if value is None or value == "":
        return None
    p = Path(os.path.expanduser(str(value)))
    return p if p.is_absolute() else base / p


def _section(doc: Mapping[str, Any], key: str) -> Mapping[str, Any]:
    sec = doc.get(key) or {}
    if not isinstance(sec, Mapping):
        raise ConfigError(f"config section {key!r} must be a mapping")
    return sec


def _gateway(sec: Mapping[str, Any], base: Path) -> GatewayConfig | None:
    if not sec:
        return None
    extra = set(sec) - _GATEWAY_KEYS
    if extra:
        raise ConfigError(f"gateway config: unknown keys {sorted(extra)}")
    eps = {}
    for role in ("curator", "judge"):
        d = sec.get(role)
        if d is None:
            raise ConfigError(f"gateway config: {role} endpoint is missing")
        if not isinstance(d, Mapping):
            raise ConfigError(f"gateway config: {role} must be a mapping")
        eps[role] = EndpointConfig.from_dict(d)
    return GatewayConfig(
        curator=eps["curator"],
        judge=eps["judge"],
        rate_limit_rps=float(sec.get("rate_limit_rps", 2.0)),
        max_retries=int(sec.get("max_retries", 4)),
        backoff_base_ms=float(sec.get("backoff_base_ms", 500.0)),
        cache_dir=_path(sec.get("cache_dir"), base),
    )


def _sources(items: Any) -> tuple[CrawlSource, ...]:
    if not items:
        return ()
    if not isinstance(items, list):
        raise ConfigError("sources must be a list")
    out = []
    for i, item in enumerate(items):
        try:
            out.append(CrawlSource(SourceKind(item["kind"]), str(item["value"]), get_language(item["language"])))
        except (KeyError, TypeError, ValueError, ValidationError) as exc:
            raise ConfigError(f"sources[{i}]: {exc}") from None
    return tuple(out)


def parse_config(doc: Mapping[str, Any], base: Path) -> CliConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("config root must be a mapping")
    extra = set(doc) - _TOP_KEYS
    if extra:
        raise ConfigError(f"unknown config keys {sorted(extra)}")
    try:
        samp = _section(doc, "sampling")
        dec = _section(doc, "decode")
        decoder = _section(doc, "decoder")
        return CliConfig(
            gateway=_gateway(_section(doc, "gateway"), base),
            sampling=SamplingConfig(
                rate_hz=float(samp.get("rate_hz", 1.0)),
                max_frames=int(samp.get("max_frames", 32)),
                letterbox=bool(samp.get("letterbox", False)),
            ),
            decode=DecodeParams(
                temperature=float(dec.get("temperature", 0.0)), max_tokens=int(dec.get("max_tokens", 512))
            ),
            decoder=DecoderConfig(
                command=decoder["command"],
                probe_command=decoder.get("probe_command"),
                timeout_s=float(decoder.get("timeout_s", 300.0)),
            )
            if decoder
            else None,
            templates_dir=_path(doc.get("templates_dir"), base),
            workers=int(doc.get("workers", 1)),
            checkpoint_path=_path(doc.get("checkpoint_path"), base),
            audit_path=_path(doc.get("audit_path"), base),
            hashtags_path=_path(doc.get("hashtags"), base),
            languages=tuple(get_language(c).iso639_3 for c in doc.get("languages") or ()),
            sources=_sources(doc.get("sources")),
            crawl_dir=_path(doc.get("crawl_dir"), base),
            candidates_path=_path(doc.get("candidates_path"), base),
            manifest_path=_path(doc.get("manifest_path"), base),
            scorer_url=doc.get("scorer_url") or None,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise ConfigError(f"bad config value: {exc}") from None


def load_config(
    path: str | Path | None,
    flags: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> CliConfig:
    """Read ``path`` (YAML or JSON), then apply flag and environment overrides.

    ``flags`` holds only options the user actually passed; keys are
    ``CliConfig`` field names, plus ``cache_dir`` for the gateway.
    """
    env = os.environ if env is None else env
    if path is None:
        cfg = CliConfig()
    else:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {p} is not valid YAML/JSON: {exc}") from None
        cfg = parse_config(doc, p.resolve().parent)

    overrides = dict(flags or {})
    if ENV_WORKERS in env:
        try:
            overrides["workers"] = int(env[ENV_WORKERS])
        except ValueError:
            raise ConfigError(f"{ENV_WORKERS} must be an integer, got {env[ENV_WORKERS]!r}") from None
    if env.get(ENV_CACHE_DIR):
        overrides["cache_dir"] = Path(env[ENV_CACHE_DIR])

    cache_dir = overrides.pop("cache_dir", None)
    if cache_dir is not None and cfg.gateway is not None:
        cfg = replace(cfg, gateway=replace(cfg.gateway, cache_dir=Path(cache_dir)))
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg
