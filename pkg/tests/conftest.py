import random

import pytest

from signcurator.gateway import Gateway

from mockvlm import SIX_VIDEOS, ScriptedVLM, gateway_config


@pytest.fixture
def make_gateway():
    made = []

    def build(vlm, cache_dir=None, **kw):
        gw = Gateway(
            gateway_config(cache_dir, **kw),
            vlm.transport(),
            sleep=lambda s: None,
            rng=random.Random(0),
        )
        made.append(gw)
        return gw

    yield build
    for gw in made:
        gw.close()


@pytest.fixture
def six_vlm():
    return ScriptedVLM(SIX_VIDEOS)
