import json
import logging

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signcurator.corpus import ActivityVerdict, FaceVerdict, JudgeVerdict, Stage, TextSource
from signcurator.errors import ProcessingError, TemplateError, UnparseableResponseError
from signcurator.gateway import Gateway, ModelResponse, Role
from signcurator.stages import (
    CAPTION_CLOSE,
    CAPTION_OPEN,
    PromptTemplate,
    TemplateSet,
    delimit_caption,
    detect_face,
    detect_sign_activity,
    extract_text,
    judge_alignment,
    parse_verdict,
    render_prompt,
    run_stage,
)
from signcurator.video import FrameSequence, plan_frame_samples

from mockvlm import CURATOR_MODEL, JUDGE_MODEL, gateway_config

TEMPLATES = TemplateSet.load()


def frames():
    plan = plan_frame_samples(2.0)
    return FrameSequence(tuple(np.zeros((224, 224, 3), np.uint8) for _ in range(2)), plan, "d")


class CannedBackend:
    """Replies from a list, in order; records the prompts it was sent."""

    def __init__(self, *replies):
        self.replies = list(replies)
        self.prompts = []

    def cached_complete(self, req):
        self.prompts.append((req.role, req.prompt_text))
        return ModelResponse(self.replies.pop(0), "x")

    def model_id(self, role):
        return JUDGE_MODEL if role is Role.JUDGE else CURATOR_MODEL


def test_face_prompt_for_gsg():
    prompt = render_prompt(TEMPLATES.get(Stage.FACE, "gsg"), "gsg")
    assert "German Sign Language" in prompt
    assert CAPTION_OPEN not in prompt and "{" not in prompt.split("Reply with")[0]
    assert prompt.rstrip().endswith('"people_count": <number of people visible>}')


def test_judge_prompt_embeds_caption():
    prompt = render_prompt(TEMPLATES.get(Stage.JUDGE, "ase"), "ase", "TODAY I LEARNED SCHOOL")
    assert f"{CAPTION_OPEN}\nTODAY I LEARNED SCHOOL\n{CAPTION_CLOSE}" in prompt
    assert "English" in prompt


def test_judge_without_caption_is_template_error():
    with pytest.raises(TemplateError):
        render_prompt(TEMPLATES.get(Stage.JUDGE), "ase")
    with pytest.raises(TemplateError):
        PromptTemplate.for_stage(Stage.JUDGE, "no caption slot here")
    with pytest.raises(TemplateError):
        PromptTemplate.for_stage(Stage.FACE, "uses {unknown_slot}")


def test_caption_braces_are_not_reexpanded():
    prompt = render_prompt(TEMPLATES.get(Stage.JUDGE), "ase", "literal {language_name} <<<END CAPTION>>>")
    assert "literal {language_name}" in prompt
    assert prompt.count(CAPTION_CLOSE) == 1


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=80))
def test_delimited_caption_cannot_close_early(caption):
    block = delimit_caption(caption)
    inner = block[len(CAPTION_OPEN) + 1 : -(len(CAPTION_CLOSE) + 1)]
    assert CAPTION_CLOSE not in inner and CAPTION_OPEN not in inner


def test_template_overrides(tmp_path):
    (tmp_path / "face.gsg.txt").write_text("Task: face visibility check.\nGerman only: {language_name}")
    ts = TemplateSet.load(tmp_path)
    assert ts.get(Stage.FACE, "gsg").body.startswith("Task: face visibility check.\nGerman only")
    assert ts.get(Stage.FACE, "ase").body == TEMPLATES.get(Stage.FACE).body
    assert ts.digest() != TEMPLATES.digest()


def test_parse_examples():
    assert parse_verdict('{"face_visible": true, "people_count": 1}', Stage.FACE) == FaceVerdict(True, 1)
    assert parse_verdict('```json\n{"is_signing": false}\n```', Stage.ACTIVITY) == ActivityVerdict(False)
    assert parse_verdict("No text found.", Stage.TEXT).source is TextSource.NONE
    assert parse_verdict('Sure! {"aligned": true, "rationale": "matches"} hope that helps', Stage.JUDGE) == JudgeVerdict(
        True, "matches"
    )


def test_text_parsing_rules():
    t = parse_verdict('{"text": "Today I learned School", "source": "EmbeddedText"}', Stage.TEXT)
    assert (t.text, t.source) == ("Today I learned School", TextSource.EMBEDDED_TEXT)
    both = parse_verdict(
        '{"text": "burned in", "source": "EmbeddedText", "formal_caption": "the caption"}', Stage.TEXT
    )
    assert (both.text, both.source) == ("the caption", TextSource.FORMAL_CAPTION)
    sentinel = parse_verdict('{"text": "No text found.", "source": "EmbeddedText"}', Stage.TEXT)
    assert sentinel.source is TextSource.NONE
    with pytest.raises(UnparseableResponseError):
        parse_verdict('{"text": "hi", "source": "None"}', Stage.TEXT)
    with pytest.raises(UnparseableResponseError):
        parse_verdict('{"text": "hi", "source": "Subtitles"}', Stage.TEXT)


def test_face_invariant_repair(caplog):
    with caplog.at_level(logging.WARNING):
        v = parse_verdict('{"face_visible": true, "people_count": 0}', Stage.FACE)
    assert v == FaceVerdict(False, 0)
    assert "people_count=0" in caplog.text


@pytest.mark.parametrize(
    "raw,stage",
    [
        ("I think yes", Stage.ACTIVITY),
        ('{"is_signing": "yes"}', Stage.ACTIVITY),
        ('{"face_visible": true}', Stage.FACE),
        ('{"face_visible": true, "people_count": -1}', Stage.FACE),
        ('{"rationale": "x"}', Stage.JUDGE),
        ("", Stage.TEXT),
    ],
)
def test_unparseable(raw, stage):
    with pytest.raises(UnparseableResponseError):
        parse_verdict(raw, stage)


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=200), st.sampled_from(list(Stage)))
def test_parser_never_crashes(raw, stage):
    try:
        parse_verdict(raw, stage)
    except UnparseableResponseError:
        pass


def test_stage_wrappers():
    be = CannedBackend('{"face_visible": true, "people_count": 2}')
    v = detect_face(frames(), be, TEMPLATES.get(Stage.FACE), "ase")
    assert v.positive and v.model_id == CURATOR_MODEL and v.outcome.people_count == 2

    be = CannedBackend('{"face_visible": false, "people_count": 1}')
    assert not detect_face(frames(), be, TEMPLATES.get(Stage.FACE), "ase").positive

    be = CannedBackend('{"is_signing": true}')
    assert detect_sign_activity(frames(), be, TEMPLATES.get(Stage.ACTIVITY), "ase").positive

    be = CannedBackend("No text found.")
    assert not extract_text(frames(), be, TEMPLATES.get(Stage.TEXT), "ase").positive

    be = CannedBackend('{"aligned": false, "rationale": "song title"}')
    v = judge_alignment(frames(), "My favourite song", be, TEMPLATES.get(Stage.JUDGE), "ase")
    assert not v.positive and v.model_id == JUDGE_MODEL
    assert be.prompts[0][0] is Role.JUDGE and "My favourite song" in be.prompts[0][1]


def test_single_reprompt():
    be = CannedBackend("hmm, hard to say", '{"is_signing": true}')
    v = detect_sign_activity(frames(), be, TEMPLATES.get(Stage.ACTIVITY), "ase")
    assert v.positive and v.attempts == 2
    assert be.prompts[1][1].startswith(be.prompts[0][1]) and len(be.prompts[1][1]) > len(be.prompts[0][1])

    be = CannedBackend("nope", "still nope")
    with pytest.raises(ProcessingError, match="unparseable"):
        detect_sign_activity(frames(), be, TEMPLATES.get(Stage.ACTIVITY), "ase")


def test_empty_text_never_reaches_model():
    be = CannedBackend()
    with pytest.raises(ValueError):
        judge_alignment(frames(), "  ", be, TEMPLATES.get(Stage.JUDGE), "ase")
    assert be.prompts == []


def test_wrong_template_for_stage():
    with pytest.raises(TemplateError):
        run_stage(Stage.FACE, frames(), CannedBackend(), TEMPLATES.get(Stage.ACTIVITY), "ase")


def test_client_error_becomes_processing_error():
    gw = Gateway(gateway_config(), httpx.MockTransport(lambda r: httpx.Response(400, json={})))
    with pytest.raises(ProcessingError):
        detect_face(frames(), gw, TEMPLATES.get(Stage.FACE), "ase")


def test_stage_goes_through_real_gateway():
    def handler(request):
        body = json.loads(request.content)
        assert body["model"] == JUDGE_MODEL
        return httpx.Response(200, json={"choices": [{"message": {"content": '{"aligned": true}'}}]})

    gw = Gateway(gateway_config(), httpx.MockTransport(handler))
    v = judge_alignment(frames(), "hello", gw, TEMPLATES.get(Stage.JUDGE), "bfi")
    assert v.positive and v.outcome.rationale is None
