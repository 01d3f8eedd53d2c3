"""Curate sign-language video/text pairs from social-media clips with vision-language models."""

from .corpus import (
    CandidateVideo,
    DatasetManifest,
    GoldLabel,
    LanguageCode,
    ManifestRecord,
    PipelineRecord,
    Provenance,
    RecordState,
    RejectionReason,
    SourceKind,
    Stage,
    StageVerdict,
    TextExtraction,
    TextSource,
    build_manifest,
    get_language,
    parse_manifest,
    serialize_manifest,
    validate_record,
)
from .errors import CuratorError, ModelSeparationError, ValidationError
from .gateway import DecodeParams, EndpointConfig, Gateway, GatewayConfig, Role, validate_model_separation
from .ingestion import CrawlSource, HashtagTable, build_queries, dedup_candidates, ingest, load_crawl_source
from .metrics import (
    ClassificationReport,
    ConfusionMatrix,
    CorpusScore,
    agreement_report,
    bleu_corpus,
    chrf_corpus,
    classification_metrics,
    confusion_matrix,
    dataset_stats,
    score_external,
    tokenize_13a,
)
from .pipeline import Checkpoint, Pipeline, PipelineConfig, SamplingConfig, resume, run_pipeline
from .stages import TemplateSet, detect_face, detect_sign_activity, extract_text, judge_alignment, render_prompt
from .video import FramePlan, FrameSequence, SubprocessDecoder, normalize_frame, plan_frame_samples

__version__ = "0.1.0"
