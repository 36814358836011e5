import json
import threading
import urllib.request

import numpy as np
import pytest

from rangecorr.estimate import EngineConfig, run_trace
from rangecorr.model import POS
from rangecorr.neural import baseline_fixes, kaiming_init, predict_corrections
from rangecorr.serve import FixService, MessageError, epoch_message, make_server, parse_message
from rangecorr.geo import lla_to_ecef


@pytest.fixture(scope="module")
def model():
    params = kaiming_init([14, 8, 8, 1], seed=2, output_scale=1.0)
    params.feature_std = np.full(14, 50.0)
    return params


def test_message_round_trip(short_trace):
    ep = short_trace.epochs[3]
    sid, back = parse_message(json.loads(json.dumps(epoch_message("a", ep))))
    assert sid == "a" and back.timestamp == ep.timestamp
    np.testing.assert_array_equal(back.prn, ep.prn)
    np.testing.assert_array_equal(back.pseudorange, ep.pseudorange)
    np.testing.assert_array_equal(back.sat_vel, ep.sat_vel)
    np.testing.assert_allclose(back.elevation, ep.elevation, rtol=4e-16)


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda m: m.pop("session_id"), "session_id"),
        (lambda m: m.update(utc_s="soon"), "utc_s"),
        (lambda m: m.update(epoch={}), "epoch must be a list"),
        (lambda m: m["epoch"][0].pop("prr"), r"epoch\[0\]\.prr"),
        (lambda m: m["epoch"][1].update(prn=33), "1..32"),
        (lambda m: m["epoch"][1].update(prn=m["epoch"][0]["prn"]), "duplicate"),
        (lambda m: m["epoch"][0].update(range_sigma=-1.0), "positive"),
        (lambda m: m["epoch"][0].update(cn0=float("nan")), "finite"),
    ],
)
def test_malformed_messages(short_trace, mutate, match):
    msg = epoch_message("s", short_trace.epochs[0])
    mutate(msg)
    with pytest.raises(MessageError, match=match):
        parse_message(msg)


def test_unknown_fields_are_ignored(short_trace):
    msg = epoch_message("s", short_trace.epochs[0])
    msg["client"] = "phone"
    msg["epoch"][0]["carrier_phase"] = 1.0
    parse_message(msg)


def _replay(service, sid, epochs):
    return [service.handle_request(epoch_message(sid, ep)) for ep in epochs]


def test_statuses_follow_the_window(short_trace):
    service = FixService(config=EngineConfig(engine="mhe_ac", horizon=3))
    out = _replay(service, "s", short_trace.epochs[:8])
    assert [r["status"] for r in out] == ["WARMUP"] * 3 + ["OK"] * 5
    assert all(r["lat_deg"] is not None for r in out)


def test_online_matches_offline(short_trace, model):
    cfg = EngineConfig(engine="mhe_ac", horizon=5)
    service = FixService(model, cfg)
    online = _replay(service, "s", short_trace.epochs)
    eps = [parse_message(epoch_message("s", ep))[1] for ep in short_trace.epochs]
    corr = predict_corrections(model, eps, baseline_fixes(eps))
    assert max(np.max(np.abs(c)) for c in corr) > 0.1
    offline = run_trace(eps, corr, cfg)
    got = np.array([r["ecef"] for r in online])
    assert np.max(np.abs(got - offline.positions)) <= 1e-6
    assert [r["status"] for r in online] == offline.status


def test_sessions_are_isolated(short_trace):
    cfg = EngineConfig(engine="mhe_ac", horizon=4)
    shared = FixService(config=cfg)
    eps_a, eps_b = short_trace.epochs[:15], short_trace.epochs[30:45]
    mixed_a, mixed_b = [], []
    for a, b in zip(eps_a, eps_b):
        mixed_a.append(shared.handle_request(epoch_message("a", a)))
        mixed_b.append(shared.handle_request(epoch_message("b", b)))
    assert [r["ecef"] for r in mixed_a] == [r["ecef"] for r in _replay(FixService(config=cfg), "a", eps_a)]
    assert [r["ecef"] for r in mixed_b] == [r["ecef"] for r in _replay(FixService(config=cfg), "b", eps_b)]
    assert set(shared.sessions) == {"a", "b"}


def test_cache_is_bounded_and_cleared_on_gap(short_trace):
    service = FixService(config=EngineConfig(engine="mhe_ac", horizon=5))
    sizes = []
    for ep in short_trace.epochs[:20]:
        service.handle_request(epoch_message("s", ep))
        sizes.append(service.sessions["s"].cache_size)
    assert max(sizes) == 6 and sizes[:6] == [1, 2, 3, 4, 5, 6]
    late = short_trace.epochs[40]
    assert late.timestamp - short_trace.epochs[19].timestamp > 10
    assert service.handle_request(epoch_message("s", late))["status"] == "RESET"
    assert service.sessions["s"].cache_size == 1


@pytest.mark.parametrize("dt,expected", [(5.0, "keep"), (10.0, "keep"), (12.0, "reset")])
def test_gap_rule_through_the_service(short_trace, dt, expected):
    service = FixService(config=EngineConfig(engine="mhe_ac", horizon=2))
    e0 = short_trace.epochs[0]
    service.handle_request(epoch_message("s", e0))
    nxt = next(e for e in short_trace.epochs if e.timestamp == e0.timestamp + dt)
    status = service.handle_request(epoch_message("s", nxt))["status"]
    assert (status == "RESET") == (expected == "reset")


def test_malformed_request_leaves_the_session_alone(short_trace):
    service = FixService(config=EngineConfig(engine="mhe_ac", horizon=3))
    _replay(service, "s", short_trace.epochs[:4])
    before = service.sessions["s"].cache_size
    bad = epoch_message("s", short_trace.epochs[4])
    bad["epoch"][0]["sat_x"] = "far"
    resp = service.handle_request(bad)
    assert resp["status"] == "ERROR" and "sat_x" in resp["message"]
    assert service.sessions["s"].cache_size == before
    replay = service.handle_request(epoch_message("s", short_trace.epochs[2]))
    assert replay["status"] == "ERROR" and service.sessions["s"].cache_size == before
    assert service.handle_request(epoch_message("s", short_trace.epochs[4]))["status"] == "OK"


def test_metrics_counters(short_trace):
    service = FixService(config=EngineConfig(engine="mhe_ac", horizon=2))
    fresh = service.serve_metrics()
    assert fresh["requests"] == 0 and fresh["latency_ms"]["p50"] == 0.0
    out = _replay(service, "s", short_trace.epochs[:7])
    service.handle_request({"nope": 1})
    m = service.serve_metrics()
    assert m["requests"] == 8 and m["warmup"] == 2 and m["ok"] == 5 and m["errors"] == 1
    lat = [r["latency_ms"] for r in out] + [service.metrics.latencies_ms[-1]]
    assert m["latency_ms"]["p50"] == pytest.approx(float(np.percentile(lat, 50)))


def test_fix_is_reported_in_geodetic_coordinates(clean_trace):
    service = FixService(config=EngineConfig(engine="mhe_ac", horizon=3))
    r = _replay(service, "s", clean_trace.epochs[:6])[-1]
    ecef = lla_to_ecef(np.array([np.radians(r["lat_deg"]), np.radians(r["lon_deg"]), r["alt_m"]]))
    np.testing.assert_allclose(ecef, r["ecef"], atol=1e-6)
    np.testing.assert_allclose(r["ecef"], clean_trace.truth_states()[5, POS], atol=0.5)


def test_http_endpoints(short_trace):
    service = FixService(config=EngineConfig(engine="mhe_ac", horizon=2))
    server = make_server(service, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    try:
        def post(payload):
            req = urllib.request.Request(base + "/fix", data=payload, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req) as resp:
                    return resp.status, json.loads(resp.read())
            except urllib.error.HTTPError as err:
                return err.code, json.loads(err.read())

        code, body = post(json.dumps(epoch_message("h", short_trace.epochs[0])).encode())
        assert code == 200 and body["status"] == "WARMUP"
        code, body = post(b"{not json")
        assert code == 400 and body["status"] == "ERROR"
        with urllib.request.urlopen(base + "/metrics") as resp:
            metrics = json.loads(resp.read())
        assert metrics["requests"] == 2 and metrics["errors"] == 1
    finally:
        server.shutdown()
        server.server_close()
