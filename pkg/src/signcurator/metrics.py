"""Evaluation: classification metrics, corpus BLEU/chrF, agreement and dataset statistics."""

from __future__ import annotations

import enum
import logging
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import httpx

from .corpus import (
    DatasetManifest,
    GoldLabel,
    PipelineRecord,
    RecordState,
    RejectionReason,
    Stage,
    TextExtraction,
    get_language,
)
from .errors import (
    CoverageError,
    EmptyReportError,
    FeatureUnavailableError,
    UndefinedMetricError,
    ValidationError,
)
from .stages import NO_TEXT_SENTINEL

log = logging.getLogger(__name__)

BLEU_SIGNATURE = "BLEU|nrefs:1|case:mixed|eff:no|tok:13a|smooth:exp"
CHRF_SIGNATURE = "chrF|nrefs:1|case:mixed|eff:yes|nc:6|nw:0|space:no"

BLEU_ORDER = 4
CHRF_ORDER = 6
CHRF_BETA = 2


# --------------------------------------------------------------------------
# classification


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ValidationError(f"confusion matrix {name} must be a nonnegative int, got {v!r}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass(frozen=True)
class ClassificationReport:
    """``None`` marks a metric whose denominator is zero."""

    accuracy: float | None
    precision: float | None
    recall: float | None

    def rounded(self, places: int = 2) -> dict:
        return {k: None if v is None else round(v, places) for k, v in self.to_dict().items()}

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall}


def confusion_matrix(
    predictions: Mapping[str, bool],
    gold: Iterable[GoldLabel],
    exclude: Iterable[str] = (),
    missing_as_negative: bool = False,
) -> ConfusionMatrix:
    """Tally predicted-accept against gold validity.

    Gold ids in ``exclude`` are dropped. A gold id with no prediction is an
    error unless ``missing_as_negative`` counts it as a rejection.
    """
    skip = set(exclude)
    tp = fp = fn = tn = 0
    missing = []
    for g in gold:
        if g.video_id in skip:
            continue
        if g.video_id in predictions:
            pred = bool(predictions[g.video_id])
        elif missing_as_negative:
            pred = False
        else:
            missing.append(g.video_id)
            continue
        if pred and g.is_valid_pair:
            tp += 1
        elif pred:
            fp += 1
        elif g.is_valid_pair:
            fn += 1
        else:
            tn += 1
    if missing:
        raise CoverageError(missing)
    return ConfusionMatrix(tp, fp, fn, tn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def classification_metrics(cm: ConfusionMatrix) -> ClassificationReport:
    if cm.total == 0:
        raise UndefinedMetricError("confusion matrix is empty; no metric is defined")
    return ClassificationReport(
        accuracy=_ratio(cm.tp + cm.tn, cm.total),
        precision=_ratio(cm.tp, cm.tp + cm.fp),
        recall=_ratio(cm.tp, cm.tp + cm.fn),
    )


def predictions_from_audit(
    records: Iterable[PipelineRecord], include_processing_errors: bool = False
) -> tuple[dict[str, bool], set[str]]:
    """Accept/reject predictions from terminal audit records.

    Returns ``(predictions, excluded_ids)``. Processing errors are excluded
    unless ``include_processing_errors``, in which case they count as rejections.
    """
    preds: dict[str, bool] = {}
    excluded: set[str] = set()
    for r in records:
        if not r.terminal:
            continue
        if r.rejection_reason is RejectionReason.PROCESSING_ERROR and not include_processing_errors:
            excluded.add(r.video_id)
            preds.pop(r.video_id, None)
            continue
        excluded.discard(r.video_id)
        preds[r.video_id] = r.state is RecordState.ACCEPTED
    return preds, excluded


def extractions_from_audit(records: Iterable[PipelineRecord]) -> dict[str, TextExtraction | None]:
    """Text-stage outcome per video; ``None`` where the text stage never ran."""
    out: dict[str, TextExtraction | None] = {}
    for r in records:
        v = r.verdict_for(Stage.TEXT)
        out[r.video_id] = v.outcome if v is not None else None
    return out


# --------------------------------------------------------------------------
# 13a tokenization

# symbols padded unconditionally
_13A_SYMBOLS = re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])")
# period/comma not preceded by a digit
_13A_PUNCT_BEFORE = re.compile(r"([^0-9])([\.,])")
# period/comma not followed by a digit
_13A_PUNCT_AFTER = re.compile(r"([\.,])([^0-9])")
# dash after a digit
_13A_DASH = re.compile(r"([0-9])(-)")


def tokenize_13a(text: str) -> list[str]:
    line = text.replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = line.replace("&quot;", '"').replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">")
    line = f" {line} "
    line = _13A_SYMBOLS.sub(r" \1 ", line)
    line = _13A_PUNCT_BEFORE.sub(r"\1 \2 ", line)
    line = _13A_PUNCT_AFTER.sub(r" \1 \2", line)
    line = _13A_DASH.sub(r"\1 \2 ", line)
    return line.split()


# --------------------------------------------------------------------------
# corpus scores


class MetricName(str, enum.Enum):
    BLEU = "BLEU"
    CHRF = "chrF"
    EXTERNAL = "External"


@dataclass(frozen=True)
class CorpusScore:
    metric: MetricName
    value: float
    signature: str
    n: int

    def to_dict(self) -> dict:
        return {"metric": self.metric.value, "value": self.value, "signature": self.signature, "n": self.n}


def _check_pairs(hyps: Sequence[str], refs: Sequence[str]) -> None:
    if len(hyps) != len(refs):
        raise ValidationError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise ValidationError("corpus is empty")


def _ngrams(items: Sequence, n: int) -> Counter:
    return Counter(tuple(items[i : i + n]) for i in range(len(items) - n + 1))


@dataclass(frozen=True)
class BleuStats:
    correct: tuple[int, ...]
    total: tuple[int, ...]
    ref_total: tuple[int, ...]
    hyp_len: int
    ref_len: int


def bleu_stats(hyps: Sequence[str], refs: Sequence[str]) -> BleuStats:
    correct = [0] * BLEU_ORDER
    total = [0] * BLEU_ORDER
    ref_total = [0] * BLEU_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        h, r = tokenize_13a(hyp), tokenize_13a(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, BLEU_ORDER + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(0, len(h) - n + 1)
            ref_total[n - 1] += max(0, len(r) - n + 1)
    return BleuStats(tuple(correct), tuple(total), tuple(ref_total), hyp_len, ref_len)


def bleu_from_stats(s: BleuStats) -> float:
    """Corpus BLEU in [0, 100] with exponential smoothing over all four orders.

    An order that neither side of the corpus is long enough to populate counts
    as fully matched, so identical short corpora still score 100.
    """
    if s.hyp_len == 0 or not any(s.correct):
        return 0.0
    log_sum = 0.0
    smooth = 1.0
    for n in range(BLEU_ORDER):
        if s.total[n] == 0:
            if s.ref_total[n] == 0:
                continue
            return 0.0
        if s.correct[n] == 0:
            smooth *= 2.0
            log_sum += math.log(1.0 / (smooth * s.total[n]))
        else:
            log_sum += math.log(s.correct[n] / s.total[n])
    bp = 1.0 if s.hyp_len >= s.ref_len else math.exp(1.0 - s.ref_len / s.hyp_len)
    return 100.0 * bp * math.exp(log_sum / BLEU_ORDER)


def bleu_corpus(hyps: Sequence[str], refs: Sequence[str]) -> CorpusScore:
    _check_pairs(hyps, refs)
    return CorpusScore(MetricName.BLEU, bleu_from_stats(bleu_stats(hyps, refs)), BLEU_SIGNATURE, len(hyps))


def _strip_ws(text: str) -> str:
    return "".join(text.split())


def chrf_stats(hyps: Sequence[str], refs: Sequence[str]) -> list[tuple[int, int, int]]:
    """Per order: (hypothesis n-grams, reference n-grams, matches), summed over the corpus.

    A segment's hypothesis n-grams of some order are not counted when its
    reference has none of that order.
    """
    stats = [[0, 0, 0] for _ in range(CHRF_ORDER)]
    for hyp, ref in zip(hyps, refs):
        h, r = _strip_ws(hyp), _strip_ws(ref)
        for n in range(1, CHRF_ORDER + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            row = stats[n - 1]
            row[0] += sum(hc.values()) if rc else 0
            row[1] += sum(rc.values())
            row[2] += sum(min(c, rc[g]) for g, c in hc.items())
    return [tuple(row) for row in stats]


def chrf_from_stats(stats: Sequence[tuple[int, int, int]], beta: float = CHRF_BETA) -> float:
    """Average precision and recall over orders populated on both sides, then one F-beta."""
    prec_sum = rec_sum = 0.0
    effective = 0
    for n_hyp, n_ref, n_match in stats:
        if n_hyp > 0:
            prec_sum += n_match / n_hyp
        if n_ref > 0:
            rec_sum += n_match / n_ref
        if n_hyp > 0 and n_ref > 0:
            effective += 1
    if effective == 0:
        return 0.0
    p, r = prec_sum / effective, rec_sum / effective
    if p + r == 0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * p * r / (b2 * p + r)


def chrf_corpus(hyps: Sequence[str], refs: Sequence[str]) -> CorpusScore:
    _check_pairs(hyps, refs)
    return CorpusScore(MetricName.CHRF, chrf_from_stats(chrf_stats(hyps, refs)), CHRF_SIGNATURE, len(hyps))


# --------------------------------------------------------------------------
# external learned metric


def score_external(
    pairs: Sequence[tuple[str, str]],
    scorer_url: str,
    batch_size: int = 64,
    workers: int = 4,
    timeout_s: float = 60.0,
    transport: httpx.BaseTransport | None = None,
) -> list[float]:
    """Score pairs via ``POST {scorer_url}/score``; batches run concurrently, order is kept."""
    if not pairs:
        return []
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    batches = [pairs[i : i + batch_size] for i in range(0, len(pairs), batch_size)]
    url = scorer_url.rstrip("/") + "/score"

    with httpx.Client(timeout=timeout_s, transport=transport) as client:

        def one(batch: Sequence[tuple[str, str]]) -> list[float]:
            body = {"pairs": [{"hypothesis": h, "reference": r} for h, r in batch]}
            try:
                resp = client.post(url, json=body)
            except httpx.HTTPError as exc:
                raise FeatureUnavailableError(f"external scorer unreachable: {exc}") from None
            if resp.status_code != 200:
                raise FeatureUnavailableError(f"external scorer returned HTTP {resp.status_code}")
            try:
                scores = resp.json()["scores"]
                scores = [float(s) for s in scores]
            except (ValueError, KeyError, TypeError):
                raise FeatureUnavailableError("external scorer sent a malformed reply") from None
            if len(scores) != len(batch):
                raise FeatureUnavailableError(f"external scorer returned {len(scores)} scores for {len(batch)} pairs")
            return scores

        with ThreadPoolExecutor(max_workers=max(1, min(workers, len(batches)))) as pool:
            results = list(pool.map(one, batches))
    return [s for chunk in results for s in chunk]


# --------------------------------------------------------------------------
# caption agreement


@dataclass(frozen=True)
class AgreementReport:
    bleu: CorpusScore
    chrf: CorpusScore
    n_scored: int
    n_excluded: int
    external: float | None = None

    def to_dict(self) -> dict:
        d = {
            "bleu": self.bleu.value,
            "bleu_signature": self.bleu.signature,
            "chrf": self.chrf.value,
            "chrf_signature": self.chrf.signature,
            "n_scored": self.n_scored,
            "n_excluded": self.n_excluded,
        }
        if self.external is not None:
            d["external"] = self.external
        return d


def _usable_text(x: TextExtraction | str | None) -> str | None:
    text = x.text if isinstance(x, TextExtraction) else x
    if text is None or not text.strip() or text.strip() == NO_TEXT_SENTINEL:
        return None
    return text


def agreement_report(
    extractions: Mapping[str, TextExtraction | str | None],
    gold: Mapping[str, str],
    scorer_url: str | None = None,
    transport: httpx.BaseTransport | None = None,
) -> AgreementReport:
    """Score extracted text against gold translations, skipping videos with no text.

    Gold ids whose extraction is missing, empty or the no-text sentinel count
    toward ``n_excluded``. An unreachable external scorer drops that column.
    """
    if not gold:
        raise ValidationError("agreement report needs at least one gold translation")
    hyps, refs = [], []
    excluded = 0
    for vid in sorted(gold):
        text = _usable_text(extractions.get(vid))
        if text is None:
            excluded += 1
            continue
        hyps.append(text)
        refs.append(gold[vid])
    if not hyps:
        raise EmptyReportError(f"no scorable pairs among {len(gold)} gold translations")
    external = None
    if scorer_url:
        try:
            scores = score_external(list(zip(hyps, refs)), scorer_url, transport=transport)
            external = math.fsum(scores) / len(scores)
        except FeatureUnavailableError as exc:
            log.warning("omitting external score: %s", exc)
    return AgreementReport(bleu_corpus(hyps, refs), chrf_corpus(hyps, refs), len(hyps), excluded, external)


# --------------------------------------------------------------------------
# dataset statistics


@dataclass(frozen=True)
class LanguageStats:
    language: str
    name: str
    videos: int
    hours: float


@dataclass(frozen=True)
class DatasetStats:
    rows: tuple[LanguageStats, ...]
    total_videos: int
    total_hours: float

    def to_dict(self) -> dict:
        return {
            "languages": {
                r.language: {"name": r.name, "videos": r.videos, "hours": r.hours} for r in self.rows
            },
            "total_videos": self.total_videos,
            "total_hours": self.total_hours,
        }


def dataset_stats(manifest: DatasetManifest) -> DatasetStats:
    rows = []
    seconds = []
    for code, t in sorted(manifest.per_language_totals.items()):
        try:
            name = get_language(code).display_name
        except ValidationError:
            name = code
        rows.append(LanguageStats(code, name, t.video_count, t.total_hours))
        seconds.append(t.total_seconds)
    return DatasetStats(tuple(rows), sum(r.videos for r in rows), math.fsum(seconds) / 3600.0)


def _fmt_hours(h: float) -> str:
    return f"{round(h, 2):.2f}".rstrip("0").rstrip(".")


def format_stats_table(stats: DatasetStats) -> str:
    rows = [("Language", "ISO", "Videos", "Hours")]
    rows += [(r.name, r.language, str(r.videos), _fmt_hours(r.hours)) for r in stats.rows]
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = [
        "  ".join(
            cell.ljust(widths[i]) if i < 2 else cell.rjust(widths[i]) for i, cell in enumerate(row)
        ).rstrip()
        for row in rows
    ]
    lines.append(f"Total {stats.total_videos} {_fmt_hours(stats.total_hours)}")
    return "\n".join(lines) + "\n"
