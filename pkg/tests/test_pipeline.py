import json
from dataclasses import replace

import pytest

from signcurator.corpus import (
    RecordState,
    RejectionReason,
    Stage,
    serialize_manifest,
    validate_record,
)
from signcurator.errors import (
    ConfigError,
    ModelSeparationError,
    PipelineHaltedError,
    ResumeError,
    StateMachineError,
)
from signcurator.pipeline import (
    Checkpoint,
    Pipeline,
    PipelineConfig,
    SamplingConfig,
    advance_state,
    config_digest,
    fail_record,
    read_audit,
)
from signcurator.stages import TemplateSet

from builders import accepted, record_through, verdict
from mockvlm import FIXED_TIME, SIX_VIDEOS, ScriptedVLM, SyntheticFrames, candidates, gateway_config

IDS = list(SIX_VIDEOS)


def pipeline_cfg(tmp_path, workers=1, sampling=None, cache=True):
    return PipelineConfig(
        gateway=gateway_config(tmp_path / "cache" if cache else None),
        sampling=sampling or SamplingConfig(),
        workers=workers,
        checkpoint_path=tmp_path / "ckpt.json",
        audit_path=tmp_path / "audit.jsonl",
    )


def run(tmp_path, vlm, make_gateway, workers=1, checkpoint=None, cfg=None):
    cfg = cfg or pipeline_cfg(tmp_path, workers)
    gw = make_gateway(vlm, cfg.gateway.cache_dir)
    p = Pipeline(cfg, SyntheticFrames(IDS), gw)
    return p.run(candidates(IDS), checkpoint, created_at=FIXED_TIME), gw


# state machine


def test_advance_examples():
    rec = record_through("a", [(Stage.FACE, False)])
    assert rec.state is RecordState.REJECTED and rec.rejection_reason is RejectionReason.FACE_NOT_VISIBLE

    acc = accepted("b", text="Hello")
    assert acc.state is RecordState.ACCEPTED and acc.extracted_text == "Hello"

    judged = record_through("c", [(Stage.FACE, True), (Stage.ACTIVITY, True), (Stage.TEXT, True), (Stage.JUDGE, False)])
    assert judged.rejection_reason is RejectionReason.MISALIGNED_TEXT

    no_text = record_through("d", [(Stage.FACE, True), (Stage.ACTIVITY, True), (Stage.TEXT, False)])
    assert no_text.rejection_reason is RejectionReason.NO_TEXT and no_text.extracted_text is None


def test_advance_rejects_out_of_order_and_terminal():
    rec = record_through("a", [(Stage.FACE, True)])
    with pytest.raises(StateMachineError):
        advance_state(rec, verdict(Stage.TEXT))
    done = record_through("b", [(Stage.FACE, False)])
    with pytest.raises(StateMachineError):
        advance_state(done, verdict(Stage.ACTIVITY))
    with pytest.raises(StateMachineError):
        fail_record(done, "late")


def test_fail_record():
    rec = fail_record(record_through("a", [(Stage.FACE, True)]), "boom")
    assert rec.rejection_reason is RejectionReason.PROCESSING_ERROR and rec.error == "boom"
    assert validate_record(rec)


# config


def test_config_validation(tmp_path):
    with pytest.raises(ModelSeparationError):
        PipelineConfig(gateway=gateway_config(curator="m", judge="m")).validate()
    with pytest.raises(ConfigError):
        PipelineConfig(gateway=gateway_config(), workers=0).validate()
    with pytest.raises(ConfigError, match="max_frames"):
        PipelineConfig(gateway=gateway_config(), sampling=SamplingConfig(max_frames=64)).validate()


def test_config_digest_tracks_only_verdict_inputs(tmp_path):
    t = TemplateSet.load()
    base = pipeline_cfg(tmp_path)
    d = config_digest(base, t)
    assert config_digest(replace(base, workers=8, audit_path=tmp_path / "x"), t) == d
    assert config_digest(replace(base, gateway=replace(base.gateway, max_retries=9)), t) == d
    assert config_digest(replace(base, sampling=SamplingConfig(rate_hz=2.0)), t) != d
    assert config_digest(replace(base, gateway=gateway_config(judge="other-judge")), t) != d


# end to end


def test_six_video_run(tmp_path, six_vlm, make_gateway):
    result, gw = run(tmp_path, six_vlm, make_gateway)
    assert [r.video_id for r in result.manifest.records] == ["v5-pass", "v6-pass"]
    reasons = {r.video_id: r.rejection_reason for r in result.records if r.state is RecordState.REJECTED}
    assert reasons == {
        "v1-face": RejectionReason.FACE_NOT_VISIBLE,
        "v2-activity": RejectionReason.NOT_SIGNING,
        "v3-notext": RejectionReason.NO_TEXT,
        "v4-judge": RejectionReason.MISALIGNED_TEXT,
    }
    assert all(validate_record(r) for r in result.records)
    # short-circuit: 1 + 2 + 3 + 4 + 4 + 4 calls
    assert gw.network_calls == 18
    judge_calls = [vid for vid, stage in six_vlm.requests if stage == "judge"]
    assert judge_calls == ["v4-judge", "v5-pass", "v6-pass"]

    audit = read_audit(tmp_path / "audit.jsonl")
    assert {r.video_id for r in audit} == set(IDS)
    ckpt = Checkpoint.load(tmp_path / "ckpt.json")
    assert ckpt.completed == {r.video_id: r.digest() for r in result.records}
    rec = next(r for r in result.records if r.video_id == "v5-pass")
    assert rec.frame_timestamps == (0.5, 1.5, 2.5) and rec.extracted_text == "Hello, my name is Anna."


def test_zero_candidates(tmp_path, six_vlm, make_gateway):
    cfg = pipeline_cfg(tmp_path)
    p = Pipeline(cfg, SyntheticFrames(IDS), make_gateway(six_vlm))
    result = p.run([], created_at=FIXED_TIME)
    assert result.manifest.records == () and result.records == []
    assert (tmp_path / "audit.jsonl").read_text() == ""


def test_warm_cache_rerun(tmp_path, six_vlm, make_gateway):
    first, _ = run(tmp_path, six_vlm, make_gateway)
    second, gw = run(tmp_path, ScriptedVLM(SIX_VIDEOS), make_gateway)
    assert gw.network_calls == 0
    assert serialize_manifest(first.manifest) == serialize_manifest(second.manifest)
    assert all(v.cached for r in second.records for v in r.verdicts)
    assert [r.digest() for r in first.records] == [r.digest() for r in second.records]


def test_parallel_matches_serial(tmp_path, make_gateway):
    serial, _ = run(tmp_path / "a", ScriptedVLM(SIX_VIDEOS), make_gateway, workers=1)
    parallel, _ = run(tmp_path / "b", ScriptedVLM(SIX_VIDEOS), make_gateway, workers=4)
    assert serialize_manifest(serial.manifest) == serialize_manifest(parallel.manifest)
    assert [r.digest() for r in serial.records] == [r.digest() for r in parallel.records]


def test_kill_and_resume(tmp_path, make_gateway):
    reference, _ = run(tmp_path / "ref", ScriptedVLM(SIX_VIDEOS), make_gateway)

    work = tmp_path / "work"
    cfg = pipeline_cfg(work)
    # 1 + 2 + 3 calls finish the first three videos; then the endpoint goes down
    with pytest.raises(PipelineHaltedError) as info:
        run(work, ScriptedVLM(SIX_VIDEOS, fail_after=6), make_gateway, cfg=cfg)
    assert [r.video_id for r in info.value.records] == IDS[:3]
    ckpt = Checkpoint.load(cfg.checkpoint_path)
    assert set(ckpt.completed) == set(IDS[:3])

    # a torn trailing line from the crash must not break resume
    with open(cfg.audit_path, "a") as fh:
        fh.write('{"candidate": {"video_id": "v4-ju')

    healthy = ScriptedVLM(SIX_VIDEOS)
    resumed, gw = run(work, healthy, make_gateway, checkpoint=ckpt, cfg=cfg)
    assert {vid for vid, _ in healthy.requests} == set(IDS[3:])
    assert resumed.manifest == reference.manifest
    assert [r.digest() for r in resumed.records] == [r.digest() for r in reference.records]
    assert len((cfg.audit_path).read_text().splitlines()) == 6


def test_resume_refuses_changed_config(tmp_path, six_vlm, make_gateway):
    run(tmp_path, six_vlm, make_gateway)
    ckpt = Checkpoint.load(tmp_path / "ckpt.json")
    changed = pipeline_cfg(tmp_path, sampling=SamplingConfig(rate_hz=2.0))
    with pytest.raises(ResumeError, match="different configuration"):
        run(tmp_path, six_vlm, make_gateway, checkpoint=ckpt, cfg=changed)


def test_resume_with_empty_checkpoint_equals_fresh(tmp_path, make_gateway):
    fresh, _ = run(tmp_path / "a", ScriptedVLM(SIX_VIDEOS), make_gateway)
    cfg = pipeline_cfg(tmp_path / "b")
    digest = config_digest(cfg, TemplateSet.load())
    resumed, _ = run(tmp_path / "b", ScriptedVLM(SIX_VIDEOS), make_gateway, checkpoint=Checkpoint.empty(digest), cfg=cfg)
    assert resumed.manifest == fresh.manifest


def test_media_failure_is_processing_error(tmp_path, six_vlm, make_gateway):
    cfg = pipeline_cfg(tmp_path)
    p = Pipeline(cfg, SyntheticFrames(IDS, broken={"v5-pass"}), make_gateway(six_vlm))
    result = p.run(candidates(IDS), created_at=FIXED_TIME)
    rec = next(r for r in result.records if r.video_id == "v5-pass")
    assert rec.rejection_reason is RejectionReason.PROCESSING_ERROR
    assert "corrupt media" in rec.error and rec.verdicts == ()
    assert [r.video_id for r in result.manifest.records] == ["v6-pass"]


def test_missing_duration_is_probed(tmp_path, six_vlm, make_gateway):
    cfg = pipeline_cfg(tmp_path)
    frames = SyntheticFrames(IDS, durations={"v5-pass": 5.0})
    p = Pipeline(cfg, frames, make_gateway(six_vlm))
    cands = candidates(["v5-pass", "v6-pass"], duration_s=None)
    result = p.run(cands, created_at=FIXED_TIME)
    by_id = {r.video_id: r for r in result.records}
    assert by_id["v5-pass"].state is RecordState.ACCEPTED
    assert by_id["v5-pass"].candidate.duration_s == 5.0
    assert by_id["v6-pass"].rejection_reason is RejectionReason.PROCESSING_ERROR


def test_duplicate_candidates_processed_once(tmp_path, six_vlm, make_gateway):
    cfg = pipeline_cfg(tmp_path)
    p = Pipeline(cfg, SyntheticFrames(IDS), make_gateway(six_vlm))
    result = p.run(candidates(["v5-pass", "v5-pass"]), created_at=FIXED_TIME)
    assert len(result.records) == 1


def test_read_audit_last_wins_and_rejects_midfile_garbage(tmp_path):
    a1 = record_through("a", [(Stage.FACE, False)])
    a2 = accepted("a")
    p = tmp_path / "audit.jsonl"
    p.write_text(json.dumps(a1.to_dict()) + "\n" + json.dumps(a2.to_dict()) + "\n")
    assert read_audit(p) == [a2]
    p.write_text("garbage\n" + json.dumps(a2.to_dict()) + "\n")
    with pytest.raises(ResumeError):
        read_audit(p)
