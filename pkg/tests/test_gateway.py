import threading
import time

import numpy as np
import pytest

from w4o.errors import BackendTimeout, MalformedResponse, PortUnavailable, RemoteError, RetriesExhausted
from w4o.gateway import (
    BackendRequest,
    Gateway,
    GatewayConfig,
    MockServer,
    RemoteCritic,
    RemoteDepth,
    RemoteDreamer,
    RemotePlanner,
    RemoteSegmenter,
    call,
    decode_depth,
    decode_mask,
    decode_png,
    encode_depth,
    encode_mask,
    encode_png,
    serve_mock,
)
from w4o.geometry import DepthMap
from w4o.manip_policy import Observation
from w4o.oracle import oracle_suite
from w4o.scene_sim import default_camera, sample_layout
from w4o.world_agents import BackendSuite, reflective_generate

FAST = dict(backoff_base=0.0, timeout=5.0)
DREAM_OK = {"image_png_b64": encode_png(np.zeros((2, 2, 3), np.uint8))}


def image(seed=0, shape=(24, 32, 3)):
    return np.random.default_rng(seed).integers(0, 256, size=shape, dtype=np.uint8)


@pytest.fixture
def server_factory():
    servers = []

    def make(script):
        srv = serve_mock(script)
        servers.append(srv)
        return srv

    yield make
    for srv in servers:
        srv.close()


# ---------------------------------------------------------------- codecs

def test_png_round_trip_is_bit_exact():
    for shape in [(5, 7, 3), (480, 640, 3), (9, 4)]:
        img = image(1, shape)
        np.testing.assert_array_equal(decode_png(encode_png(img)), img)


def test_png_rejects_non_uint8():
    with pytest.raises(ValueError):
        encode_png(np.zeros((2, 2, 3), dtype=float))


def test_mask_round_trip():
    mask = image(2, (10, 12)) > 128
    np.testing.assert_array_equal(decode_mask(encode_mask(mask)), mask)


def test_depth_round_trip_float32():
    values = np.array([[0.0, 0.5, 1.25], [2.0, 0.0, 3.5]])
    back = decode_depth(encode_depth(DepthMap.from_array(values)))
    np.testing.assert_array_equal(back.values, values)
    np.testing.assert_array_equal(back.valid, values > 0)


def test_depth_size_mismatch_is_malformed():
    doc = encode_depth(DepthMap.from_array(np.ones((2, 3))))
    doc["width"] = 4
    with pytest.raises(MalformedResponse):
        decode_depth(doc)


def test_request_validation_and_stable_body():
    with pytest.raises(ValueError):
        BackendRequest("teleport", {})
    with pytest.raises(Exception):
        BackendRequest("dream", {"image_png_b64": "x"})
    req = BackendRequest("dream", {"prompt": "p", "image_png_b64": "abc"})
    assert req.body() == b'{"image_png_b64":"abc","prompt":"p"}'
    assert req.request_id != BackendRequest("dream", {"prompt": "p", "image_png_b64": "abc"}).request_id


def test_config_validation(monkeypatch):
    with pytest.raises(ValueError):
        GatewayConfig(max_retries=-1)
    with pytest.raises(ValueError):
        GatewayConfig(timeout=0)
    monkeypatch.setenv("W4O_BACKEND_URL", "http://example.invalid:1")
    assert GatewayConfig().resolved_url() == "http://example.invalid:1"


# ---------------------------------------------------------------- retry semantics

def test_single_success_is_one_request(server_factory):
    srv = server_factory({"dream": [{"body": DREAM_OK}]})
    doc = call(GatewayConfig(srv.url, **FAST), BackendRequest("dream", {"image_png_b64": "a", "prompt": "p"}))
    assert doc == DREAM_OK
    assert len(srv.requests) == 1


def test_two_503_then_success_reuses_request_id_and_body(server_factory):
    srv = server_factory({"dream": [{"status": 503}, {"status": 503}, {"body": DREAM_OK}]})
    req = BackendRequest("dream", {"image_png_b64": encode_png(image(3)), "prompt": "lift"})
    doc = call(GatewayConfig(srv.url, max_retries=2, **FAST), req)
    assert doc == DREAM_OK
    assert len(srv.requests) == 3
    assert {r.request_id for r in srv.requests} == {req.request_id}
    assert {r.body for r in srv.requests} == {req.body()}
    assert [r.ordinal for r in srv.requests] == [0, 1, 2]


@pytest.mark.parametrize("max_retries", [0, 1, 2, 4])
def test_always_503_exhausts_after_max_retries_plus_one(server_factory, max_retries):
    srv = server_factory({"depth": [{"status": 503}]})
    with pytest.raises(RetriesExhausted) as info:
        call(GatewayConfig(srv.url, max_retries=max_retries, **FAST), BackendRequest("depth", {"image_png_b64": "a"}))
    assert not isinstance(info.value, BackendTimeout)
    assert info.value.attempts == max_retries + 1
    assert len(srv.requests) == max_retries + 1


def test_client_error_is_not_retried(server_factory):
    srv = server_factory({"segment": [{"status": 422, "body": {"error": "bad label"}}]})
    with pytest.raises(RemoteError) as info:
        call(GatewayConfig(srv.url, **FAST), BackendRequest("segment", {"image_png_b64": "a", "label": "x"}))
    assert info.value.status == 422
    assert "bad label" in str(info.value)
    assert len(srv.requests) == 1


def test_timeouts_raise_backend_timeout(server_factory):
    srv = server_factory({"plan": [{"delay": 0.5, "body": {"subtasks": ["a"], "targets": ["b"]}}]})
    cfg = GatewayConfig(srv.url, max_retries=1, backoff_base=0.0, timeout=0.1)
    with pytest.raises(BackendTimeout) as info:
        call(cfg, BackendRequest("plan", {"task": "t", "image_png_b64": "a"}))
    assert info.value.attempts == 2
    assert isinstance(info.value, RetriesExhausted)


def test_timeout_then_success_recovers(server_factory):
    ok = {"subtasks": ["a"], "targets": ["b"]}
    srv = server_factory({"plan": [{"delay": 0.5, "body": ok}, {"body": ok}]})
    cfg = GatewayConfig(srv.url, max_retries=1, backoff_base=0.0, timeout=0.1)
    assert call(cfg, BackendRequest("plan", {"task": "t", "image_png_b64": "a"})) == ok


def test_connection_refused_exhausts():
    with MockServer({}) as srv:
        url = srv.url
    with pytest.raises(RetriesExhausted) as info:
        call(GatewayConfig(url, max_retries=1, **FAST), BackendRequest("depth", {"image_png_b64": "a"}))
    assert info.value.attempts == 2


def test_backoff_doubles(server_factory, monkeypatch):
    sleeps = []
    monkeypatch.setattr("w4o.gateway.time.sleep", sleeps.append)
    srv = server_factory({"depth": [{"status": 500}]})
    with pytest.raises(RetriesExhausted):
        call(GatewayConfig(srv.url, max_retries=3, backoff_base=0.25), BackendRequest("depth", {"image_png_b64": "a"}))
    assert sleeps == [0.25, 0.5, 1.0]


# ---------------------------------------------------------------- schema

@pytest.mark.parametrize(
    "kind, payload, entry",
    [
        ("dream", {"image_png_b64": "a", "prompt": "p"}, {"raw": "not json"}),
        ("dream", {"image_png_b64": "a", "prompt": "p"}, {"body": {"image": "wrong key"}}),
        ("critique", {"image_before_b64": "a", "image_after_b64": "b", "subtask": "s"}, {"body": {"decision": "revise"}}),
        ("critique", {"image_before_b64": "a", "image_after_b64": "b", "subtask": "s"}, {"body": {"decision": "maybe"}}),
        ("plan", {"task": "t", "image_png_b64": "a"}, {"body": {"subtasks": "one", "targets": []}}),
        ("depth", {"image_png_b64": "a"}, {"body": {"width": 0, "height": 1, "depth_f32le_b64": ""}}),
    ],
)
def test_malformed_responses_rejected(server_factory, kind, payload, entry):
    srv = server_factory({kind: [entry]})
    with pytest.raises(MalformedResponse):
        call(GatewayConfig(srv.url, **FAST), BackendRequest(kind, payload))
    assert len(srv.requests) == 1


def test_unscripted_kind_is_404(server_factory):
    srv = server_factory({"dream": [{"body": DREAM_OK}]})
    with pytest.raises(RemoteError) as info:
        call(GatewayConfig(srv.url, **FAST), BackendRequest("depth", {"image_png_b64": "a"}))
    assert info.value.status == 404


def test_mock_server_validation():
    with pytest.raises(ValueError):
        MockServer({"teleport": [{}]})
    with MockServer({}) as srv:
        with pytest.raises(PortUnavailable):
            MockServer({}, port=srv.port)


# ---------------------------------------------------------------- remote adapters

def test_remote_dream_echo_is_bit_exact(server_factory):
    srv = server_factory({"dream": [{"echo": True}]})
    img = image(4, (240, 320, 3))
    out = RemoteDreamer(Gateway(GatewayConfig(srv.url, **FAST))).dream(img, "anything")
    assert out.dtype == np.uint8
    np.testing.assert_array_equal(out, img)


def test_remote_adapters_decode_payloads(server_factory):
    mask = image(5, (6, 8)) > 100
    depth = DepthMap.from_array(np.linspace(0, 2, 48).reshape(6, 8))
    srv = server_factory(
        {
            "plan": [{"body": {"subtasks": ["Move the x up"], "targets": ["x"]}}],
            "critique": [{"body": {"decision": "revise", "revised_prompt": "lift higher", "rationale": "low"}}],
            "depth": [{"body": encode_depth(depth)}],
            "segment": [{"body": {"mask_png_b64": encode_mask(mask)}}],
        }
    )
    gw = Gateway(GatewayConfig(srv.url, **FAST))
    img = image(6, (6, 8, 3))
    assert RemotePlanner(gw).plan("task", img) == (["Move the x up"], ["x"])
    verdict = RemoteCritic(gw).critique(img, img, "Move the x up")
    assert (verdict.decision, verdict.revised_prompt, verdict.rationale) == ("revise", "lift higher", "low")
    np.testing.assert_array_equal(RemoteDepth(gw).estimate(img).values, depth.values.astype(np.float32))
    np.testing.assert_array_equal(RemoteSegmenter(gw).segment(img, "x"), mask)
    sent = srv.requests[0].json()
    assert sent["task"] == "task"
    np.testing.assert_array_equal(decode_png(sent["image_png_b64"]), img)


def test_env_var_overrides_base_url(server_factory, monkeypatch):
    srv = server_factory({"dream": [{"body": DREAM_OK}]})
    monkeypatch.setenv("W4O_BACKEND_URL", srv.url)
    call(GatewayConfig("http://127.0.0.1:9", **FAST), BackendRequest("dream", {"image_png_b64": "a", "prompt": "p"}))
    assert len(srv.requests) == 1


def test_single_flight_serializes_calls(server_factory):
    srv = server_factory({"depth": [{"delay": 0.2, "body": encode_depth(DepthMap.from_array(np.ones((1, 1))))}]})
    cfg = GatewayConfig(srv.url, single_flight=True, **FAST)

    def worker():
        call(cfg, BackendRequest("depth", {"image_png_b64": "a"}))

    threads = [threading.Thread(target=worker) for _ in range(3)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert time.perf_counter() - t0 >= 0.6
    assert len(srv.requests) == 3


# ---------------------------------------------------------------- loop traces over HTTP

def remote_loop_suite(url):
    cam = default_camera()
    oracle, world = oracle_suite(cam)
    gw = Gateway(GatewayConfig(url, **FAST))
    suite = BackendSuite(
        planner=oracle.planner,
        dreamer=RemoteDreamer(gw),
        critic=RemoteCritic(gw),
        depth_estimator=oracle.depth_estimator,
        segmenter=oracle.segmenter,
    )
    obs = Observation.from_view(world.observe(sample_layout("pick-place", 1)), cam)
    return suite, obs


def test_revised_prompt_reaches_dreamer_verbatim(server_factory):
    srv = server_factory(
        {
            "dream": [{"echo": True}],
            "critique": [
                {"body": {"decision": "revise", "revised_prompt": "lift higher"}},
                {"body": {"decision": "accept"}},
            ],
        }
    )
    suite, obs = remote_loop_suite(srv.url)
    pred = reflective_generate(obs.image, "Move the tomato vertically upward", suite, 3, target="tomato", reference=obs)
    dreams = [r.json() for r in srv.requests if r.kind == "dream"]
    assert [d["prompt"] for d in dreams] == ["Move the tomato vertically upward", "lift higher"]
    assert pred.prompt_history == ("Move the tomato vertically upward", "lift higher")


def test_three_iteration_trace_alternates(server_factory):
    srv = server_factory(
        {
            "dream": [{"echo": True}],
            "critique": [
                {"body": {"decision": "revise", "revised_prompt": "again 1"}},
                {"body": {"decision": "revise", "revised_prompt": "again 2"}},
                {"body": {"decision": "accept"}},
            ],
        }
    )
    suite, obs = remote_loop_suite(srv.url)
    pred = reflective_generate(obs.image, "Move the tomato vertically upward", suite, 3, target="tomato", reference=obs)
    assert srv.kinds() == ["dream", "critique"] * 3
    assert pred.iterations_used == 3
    # every critique judges the original instruction against the original image
    for r in srv.requests:
        if r.kind == "critique":
            doc = r.json()
            assert doc["subtask"] == "Move the tomato vertically upward"
            np.testing.assert_array_equal(decode_png(doc["image_before_b64"]), obs.image)
