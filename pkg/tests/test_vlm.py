import json

import numpy as np
import pytest

from prefpolicy.data import FrameStore, sample_pairs
from prefpolicy.envs import make_env
from prefpolicy.errors import TeacherNetworkError
from prefpolicy.teachers import TeacherConfig, label_pairs, oracle_label
from prefpolicy.vlm import (
    API_KEY_ENV,
    MockVlmServer,
    OracleResponder,
    ScriptedResponder,
    VlmClient,
    encode_png,
    load_template,
    parse_token,
)


@pytest.fixture(scope="module")
def reach_pairs(small_reach):
    return sample_pairs(small_reach, 12, 16, 0)


@pytest.fixture(scope="module")
def frames(small_reach):
    return FrameStore(small_reach, make_env("point_reach").render)


def _label(pairs, frames, server, **kw):
    cfg = TeacherConfig(kind="vlm_mock", endpoint=server.url, task_description="reach", **kw)
    return label_pairs(pairs, cfg, frame_store=frames)


@pytest.mark.parametrize(
    "text,label",
    [("0", 0.0), ("1", 1.0), ("-1", 0.5), (" 1.\n", 1.0), ("2", None), ("0 or 1", None), ("", None), (None, None)],
)
def test_parse_token(text, label):
    assert parse_token(text) == label


def test_templates_have_placeholders():
    assert "{task_description}" in load_template("stage1")
    assert "{stage1_response}" in load_template("stage2")


def test_png_roundtrip():
    from base64 import b64decode
    from io import BytesIO

    from PIL import Image

    img = make_env("point_reach").render(np.array([0.1, 0.2, 0.3, 0.4]))
    back = np.asarray(Image.open(BytesIO(b64decode(encode_png(img)))))
    assert np.array_equal(back, img)


def test_oracle_backed_mock_matches_oracle(reach_pairs, frames):
    responder = OracleResponder()
    responder.register(reach_pairs, frames, 0.1)
    with MockVlmServer(responder) as server:
        prefs = _label(reach_pairs, frames, server, epsilon=0.1)
    assert len(prefs) == len(reach_pairs)
    assert [p.label for p in prefs.pairs] == [oracle_label(a, b, 0.1) for a, b in reach_pairs]
    # two requests per pair: six images then a text-only extraction prompt
    first = [r for r in server.requests if any(c["type"] == "image" for c in r["messages"][0]["content"])]
    assert len(first) == len(reach_pairs) and len(server.requests) == 2 * len(reach_pairs)
    assert all(sum(c["type"] == "image" for c in r["messages"][0]["content"]) == 6 for r in first)
    for p in prefs.pairs:
        raw = json.loads(p.raw_response)
        assert parse_token(raw["stage2"]) == p.label


def test_scripted_minus_one_is_equal(reach_pairs, frames):
    with MockVlmServer(ScriptedResponder(["-1"])) as server:
        prefs = _label(reach_pairs[:3], frames, server)
    assert [p.label for p in prefs.pairs] == [0.5, 0.5, 0.5]


def test_garbage_exhausts_retries_and_drops_record(reach_pairs, frames):
    with MockVlmServer(ScriptedResponder(["I think the second one, maybe"])) as server:
        prefs = _label(reach_pairs[:1], frames, server, max_retries=3, max_concurrency=1)
    assert len(prefs) == 0
    assert prefs.metadata["invalid"] == 1 and prefs.metadata["queries"] == 1
    assert len(server.requests) == 6


def test_retry_recovers_after_garbage(reach_pairs, frames):
    with MockVlmServer(ScriptedResponder(["???", "0"])) as server:
        prefs = _label(reach_pairs[:1], frames, server, max_concurrency=1)
    assert [p.label for p in prefs.pairs] == [0.0]


def test_http_errors_are_retried(reach_pairs, frames):
    calls = {"n": 0}

    def flaky(body):
        calls["n"] += 1
        return (500, "overloaded") if calls["n"] == 1 else (200, "1")

    with MockVlmServer(flaky) as server:
        prefs = _label(reach_pairs[:1], frames, server, max_concurrency=1)
    assert [p.label for p in prefs.pairs] == [1.0]


def test_unreachable_endpoint_is_network_error(reach_pairs, frames):
    cfg = TeacherConfig(kind="vlm", endpoint="http://127.0.0.1:9/v1/chat", timeout=1.0, max_retries=1)
    with pytest.raises(TeacherNetworkError):
        label_pairs(reach_pairs[:2], cfg, frame_store=frames)


def test_concurrent_labels_keep_query_order(reach_pairs, frames):
    responder = OracleResponder()
    responder.register(reach_pairs, frames, 0.1)
    with MockVlmServer(responder) as server:
        prefs = _label(reach_pairs, frames, server, epsilon=0.1, max_concurrency=6)
    assert [p.query_id for p in prefs.pairs] == list(range(len(reach_pairs)))


def test_api_key_sent_as_bearer(monkeypatch, reach_pairs, frames):
    monkeypatch.setenv(API_KEY_ENV, "secret-token")
    with MockVlmServer(ScriptedResponder(["0"])) as server:
        client = VlmClient(server.url, "m")
        assert client.session.headers["Authorization"] == "Bearer secret-token"
        assert client.query(["aGk="] * 6, "reach").label == 0.0
