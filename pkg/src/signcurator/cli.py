"""Command-line entry point.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .config import CliConfig, load_config
from .corpus import (
    GoldLabel,
    PipelineRecord,
    RecordState,
    get_language,
    parse_gold_labels,
    parse_manifest,
    read_jsonl,
    serialize_manifest,
)
from .errors import (
    ConfigError,
    CuratorError,
    ManifestParseError,
    PipelineHaltedError,
    ResumeError,
    ValidationError,
)
from .ingestion import DirectoryFetcher, ingest, read_candidates, write_candidates
from .metrics import (
    agreement_report,
    classification_metrics,
    confusion_matrix,
    dataset_stats,
    extractions_from_audit,
    format_stats_table,
    predictions_from_audit,
)
from .pipeline import Checkpoint, Pipeline, atomic_write
from .video import SubprocessDecoder

log = logging.getLogger("signcurator")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="signcurator", description="Curate sign-language video/text pairs with VLM stages.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", type=Path)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--language")

    sp = sub.add_parser("ingest", help="crawl sources -> candidate file")
    common(sp)
    sp.add_argument("--workers", type=int)

    for name, helptext in (("run", "candidates -> dataset manifest + audit"), ("resume", "continue a halted run")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--candidates", type=Path)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--cache-dir", type=Path)

    sp = sub.add_parser("eval", help="predictions + gold labels -> classification report")
    common(sp, config=False)
    sp.add_argument("--pred", type=Path, required=True)
    sp.add_argument("--gold", type=Path, required=True)
    sp.add_argument("--include-processing-errors", action="store_true")
    sp.add_argument("--missing-as-negative", action="store_true")

    sp = sub.add_parser("agreement", help="extractions + gold translations -> BLEU/chrF")
    common(sp)
    sp.add_argument("--pred", type=Path, required=True)
    sp.add_argument("--gold", type=Path, required=True)

    sp = sub.add_parser("stats", help="manifest -> per-language table")
    common(sp, config=False)
    sp.add_argument("--manifest", type=Path, required=True)

    sp = sub.add_parser("export", help="manifest -> release form (video ids + text)")
    common(sp, config=False)
    sp.add_argument("--manifest", type=Path, required=True)
    return p


# --------------------------------------------------------------------------
# helpers


def _read(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"no such file: {path}") from None


def _config(args, **flags) -> CliConfig:
    passed = {k: v for k, v in flags.items() if v is not None}
    cfg = load_config(getattr(args, "config", None), passed)
    cfg.validate()
    return cfg


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write(out, text)


def _load_predictions(path: Path) -> tuple[list[PipelineRecord] | None, list[dict]]:
    """Audit records if the file is an audit log, else plain rows."""
    rows = read_jsonl(_read(path), "prediction")
    if rows and all("candidate" in r for r in rows):
        recs: dict[str, PipelineRecord] = {}
        for r in rows:
            lineno = r.pop("__line__")
            try:
                rec = PipelineRecord.from_dict(r)
            except (KeyError, ValueError, TypeError) as exc:
                raise ManifestParseError(f"audit record: {exc}", lineno, 1) from None
            recs.pop(rec.video_id, None)
            recs[rec.video_id] = rec
        return list(recs.values()), []
    for r in rows:
        if "video_id" not in r:
            raise ManifestParseError("prediction row lacks video_id", r["__line__"], 1)
    return None, rows


def _fmt(v: float | None) -> str:
    return "undefined" if v is None else f"{v:.2f}"


# --------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    cfg = _config(args, workers=args.workers)
    sources = cfg.crawl_sources(args.language)
    if not sources:
        raise ConfigError("no sources configured (set 'sources' or 'languages')")
    fetcher = DirectoryFetcher(cfg.crawl_dir) if cfg.crawl_dir else None
    cands = ingest(sources, fetcher, workers=cfg.workers)
    out = args.out or cfg.candidates_path
    if out is None:
        raise ConfigError("ingest needs --out or candidates_path")
    write_candidates(cands, out)
    print(f"{len(cands)} candidates from {len(sources)} sources -> {out}")
    return 0


def _run_paths(cfg: CliConfig, out: Path) -> CliConfig:
    return replace(
        cfg,
        audit_path=cfg.audit_path or out.with_name(out.name + ".audit.jsonl"),
        checkpoint_path=cfg.checkpoint_path or out.with_name(out.name + ".checkpoint.json"),
    )


def _cmd_run(args, resuming: bool) -> int:
    cfg = _config(args, workers=args.workers, cache_dir=args.cache_dir)
    out = args.out or cfg.manifest_path
    if out is None:
        raise ConfigError(f"{args.command} needs --out or manifest_path")
    cfg = _run_paths(cfg, out)
    pcfg = cfg.pipeline_config()
    if cfg.decoder is None:
        raise ConfigError("config has no decoder section")
    cand_path = args.candidates or cfg.candidates_path
    if cand_path is None:
        raise ConfigError(f"{args.command} needs --candidates or candidates_path")
    if not Path(cand_path).exists():
        raise ValidationError(f"no such file: {cand_path}")
    cands = read_candidates(cand_path)
    if args.language:
        lang = get_language(args.language)
        cands = [c for c in cands if c.language == lang]

    checkpoint = None
    if resuming:
        try:
            checkpoint = Checkpoint.load(pcfg.checkpoint_path)
        except FileNotFoundError:
            raise ResumeError(f"no checkpoint at {pcfg.checkpoint_path}") from None

    decoder = SubprocessDecoder(
        cfg.decoder.command, cfg.decoder.probe_command, pcfg.sampling.letterbox, cfg.decoder.timeout_s
    )
    pipeline = Pipeline(pcfg, decoder)
    try:
        result = pipeline.run(cands, checkpoint)
    except PipelineHaltedError as exc:
        print(f"error: {exc}; finished records are checkpointed, rerun with 'resume'", file=sys.stderr)
        return 2
    finally:
        pipeline.gateway.close()
    atomic_write(out, serialize_manifest(result.manifest))
    counts: dict[str, int] = {}
    for r in result.records:
        key = r.state.value if r.state is RecordState.ACCEPTED else r.rejection_reason.value
        counts[key] = counts.get(key, 0) + 1
    summary = ", ".join(f"{k} {v}" for k, v in sorted(counts.items()))
    print(f"{len(result.manifest.records)} accepted of {len(result.records)} ({summary}) -> {out}")
    print(f"network calls: {pipeline.gateway.network_calls}")
    return 0


def cmd_run(args) -> int:
    return _cmd_run(args, resuming=False)


def cmd_resume(args) -> int:
    return _cmd_run(args, resuming=True)


def cmd_eval(args) -> int:
    gold = parse_gold_labels(_read(args.gold))
    records, rows = _load_predictions(args.pred)
    languages: dict[str, str] = {}
    if records is not None:
        preds, excluded = predictions_from_audit(records, args.include_processing_errors)
        languages = {r.video_id: r.candidate.language.iso639_3 for r in records}
    else:
        preds, excluded = {}, set()
        for r in rows:
            preds[str(r["video_id"])] = bool(r.get("accepted"))
            if r.get("language"):
                languages[str(r["video_id"])] = get_language(r["language"]).iso639_3

    def block(labels: list[GoldLabel]) -> dict:
        cm = confusion_matrix(preds, labels, excluded, args.missing_as_negative)
        rep = classification_metrics(cm)
        return {"confusion_matrix": cm.to_dict(), "n": cm.total, **rep.to_dict()}

    report: dict = {"languages": {}}
    if args.language:
        want = get_language(args.language).iso639_3
        gold = [g for g in gold if languages.get(g.video_id) == want]
    by_lang: dict[str, list[GoldLabel]] = {}
    for g in gold:
        if g.video_id in languages:
            by_lang.setdefault(languages[g.video_id], []).append(g)
    for lang in sorted(by_lang):
        report["languages"][lang] = block(by_lang[lang])
    report["overall"] = block(gold)
    report["excluded_processing_errors"] = sorted(excluded & {g.video_id for g in gold})

    lines = [f"{'subset':<10} {'n':>5} {'accuracy':>9} {'precision':>9} {'recall':>9}"]
    for name, b in list(report["languages"].items()) + [("overall", report["overall"])]:
        lines.append(
            f"{name:<10} {b['n']:>5} {_fmt(b['accuracy']):>9} {_fmt(b['precision']):>9} {_fmt(b['recall']):>9}"
        )
    print("\n".join(lines))
    if args.out:
        atomic_write(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_agreement(args) -> int:
    cfg = _config(args)
    gold_labels = parse_gold_labels(_read(args.gold))
    records, rows = _load_predictions(args.pred)
    languages: dict[str, str] = {}
    if records is not None:
        extractions = extractions_from_audit(records)
        languages = {r.video_id: r.candidate.language.iso639_3 for r in records}
    else:
        extractions = {}
        for r in rows:
            extractions[str(r["video_id"])] = r.get("text")
            if r.get("language"):
                languages[str(r["video_id"])] = get_language(r["language"]).iso639_3
    gold = {g.video_id: g.gold_translation for g in gold_labels if g.gold_translation}
    if args.language:
        want = get_language(args.language).iso639_3
        gold = {k: v for k, v in gold.items() if languages.get(k) == want}

    report: dict = {"languages": {}}
    by_lang: dict[str, dict[str, str]] = {}
    for vid, text in gold.items():
        if vid in languages:
            by_lang.setdefault(languages[vid], {})[vid] = text
    for lang in sorted(by_lang):
        report["languages"][lang] = agreement_report(extractions, by_lang[lang], cfg.scorer_url).to_dict()
    report["overall"] = agreement_report(extractions, gold, cfg.scorer_url).to_dict()

    lines = [f"{'subset':<10} {'n_scored':>8} {'n_excluded':>10} {'BLEU':>7} {'chrF':>7}"]
    for name, b in list(report["languages"].items()) + [("overall", report["overall"])]:
        lines.append(f"{name:<10} {b['n_scored']:>8} {b['n_excluded']:>10} {b['bleu']:>7.2f} {b['chrf']:>7.2f}")
    lines.append(report["overall"]["bleu_signature"])
    lines.append(report["overall"]["chrf_signature"])
    print("\n".join(lines))
    if args.out:
        atomic_write(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_stats(args) -> int:
    manifest = parse_manifest(_read(args.manifest))
    stats = dataset_stats(manifest)
    if args.language:
        want = get_language(args.language).iso639_3
        rows = tuple(r for r in stats.rows if r.language == want)
        stats = type(stats)(rows, sum(r.videos for r in rows), sum(r.hours for r in rows))
    sys.stdout.write(format_stats_table(stats))
    if args.out:
        atomic_write(args.out, json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_export(args) -> int:
    manifest = parse_manifest(_read(args.manifest))
    want = get_language(args.language).iso639_3 if args.language else None
    lines = [
        json.dumps({"video_id": r.video_id, "language": r.language, "text": r.extracted_text}, ensure_ascii=False)
        for r in manifest.records
        if want is None or r.language == want
    ]
    _emit("".join(line + "\n" for line in lines), args.out)
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "run": cmd_run,
    "resume": cmd_resume,
    "eval": cmd_eval,
    "agreement": cmd_agreement,
    "stats": cmd_stats,
    "export": cmd_export,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CuratorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
