"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The training criteria run real training jobs on synthetic days and take a few
minutes each on one CPU core.
"""
import time

import numpy as np
import pytest
from oracles import batched_linear_least_squares, brute_force_edt

from rangecorr.bench import horizontal_score, profile_horizons
from rangecorr.cli import main as cli_main
from rangecorr.diff import finite_diff_gradient, mhe_adjoint
from rangecorr.edf import RoutePolyline, build_cost_map, edt, interpolate_route, route_distance
from rangecorr.estimate import EngineConfig, HorizonProblem, mhe_solve, run_trace
from rangecorr.geo import ecef_to_lla, geodesic_distance
from rangecorr.model import POS, STATE_DIM, NoiseModel, dynamics_matrix, measurement_covariance
from rangecorr.model import measurement_jacobian, process_covariance, riccati_update
from rangecorr.neural import baseline_fixes, mlp_forward, predict_corrections
from rangecorr.serve import FixService, epoch_message, parse_message
from rangecorr.sim import ScenarioConfig, synthesize_days, synthesize_trace
from rangecorr.train import Batch, TrainConfig, TrainingTrace, batch_gradient, evaluate_rmse, init_parameters
from rangecorr.train import train_corrector

ROUTE = [(37.4, -122.1), (37.4030, -122.1), (37.4030, -122.0960), (37.4060, -122.0960)]


def _train_cfg(loss, **kw):
    # N = 15, arrival cost off, damped GN with alpha = 0.5 and 10 iterations
    base = dict(loss=loss, horizon=15, step_size=0.5, max_iters=10, layers=40, batch_size=1, epochs=30, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def static_world():
    days = synthesize_days(ScenarioConfig(duration=300.0, seed=5), 3)
    traces = [TrainingTrace.from_sim(d) for d in days]
    return traces[:2], traces[2]


@pytest.fixture(scope="module")
def trained_3d(static_world):
    train, test = static_world
    t0 = time.perf_counter()
    params, report = train_corrector(train, _train_cfg("3d"))
    return params, evaluate_rmse(params, test), time.perf_counter() - t0


def test_criterion_01_estimator_equivalences(report_criterion):
    trace = synthesize_trace(ScenarioConfig(duration=100.0, seed=21))
    ekf = run_trace(trace.epochs, None, EngineConfig(engine="ekf"))
    mhef = run_trace(trace.epochs, None, EngineConfig(engine="mhe_f", horizon=5))
    d_filter = np.abs(ekf.states - mhef.states).max()

    rng = np.random.default_rng(0)
    truth = trace.truth_states()
    warm = truth + rng.normal(0.0, 5.0, truth.shape)
    problem = HorizonProblem(
        trace.epochs,
        warm,
        corrections=[rng.normal(0.0, 3.0, e.n_visible) for e in trace.epochs],
        prior_state=truth[0] + 1.0,
        prior_covariance=np.eye(STATE_DIM) * 0.05,
        include_arrival_cost=True,
        linearization=warm,
        linear=True,
    )
    mhe = mhe_solve(problem, step_size=1.0, max_iters=5, tol=1e-7).trajectory
    d_batch = np.abs(mhe - batched_linear_least_squares(problem)).max()
    ok = report_criterion(
        1, "estimator equivalences", d_filter <= 1e-6 and d_batch <= 1e-6,
        f"EKF vs MHE-F {d_filter:.2e} m, linear MHE-AC vs batched LS {d_batch:.2e} m (100 epochs, <= 1e-6)",
    )
    assert ok


def _random_horizon(trace, rng, linear):
    n = int(rng.integers(1, 6)) + 1
    start = int(rng.integers(0, len(trace.epochs) - n))
    eps = trace.epochs[start : start + n]
    m = int(rng.integers(4, min(10, min(e.n_visible for e in eps)) + 1))
    eps = [e.subset(np.sort(rng.choice(e.n_visible, m, replace=False))) for e in eps]
    truth = trace.truth_states()[start : start + n]
    warm = truth + rng.normal(0.0, 5.0, truth.shape)
    return HorizonProblem(
        eps,
        warm,
        corrections=[rng.normal(0.0, 10.0, m) for _ in eps],
        prior_state=truth[0] + rng.normal(0.0, 2.0, STATE_DIM),
        prior_covariance=np.eye(STATE_DIM) * 0.05,
        include_arrival_cost=bool(rng.integers(2)),
        linearization=warm if linear else None,
        linear=linear,
    )


def _solve(p):
    return mhe_solve(p, step_size=1.0, max_iters=50, tol=1e-7)


def _end_to_end_error(rng):
    days = synthesize_days(ScenarioConfig(duration=40.0, seed=6), 2)
    traces = [TrainingTrace.from_sim(d) for d in days]
    cfg = TrainConfig(layers=3, hidden=8, horizon=3, subsequence=8, zero_last_layer=False, output_scale=1.0,
                      step_size=1.0, max_iters=50, adjoint_tol=1e-6, seed=3)
    params = init_parameters(cfg, traces)
    for b in params.biases:
        b[:] = rng.normal(0.0, 0.2, b.shape)  # keep units off the ReLU kink
    batch = Batch([(0, 5), (1, 20)], cfg.subsequence)
    _, grads, _ = batch_gradient(params, cfg, traces, batch)
    h = 1e-4
    pairs = []
    for k, arr in enumerate(params.arrays()):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = batch_gradient(params, cfg, traces, batch)[0]
            flat[i] = old - h
            down = batch_gradient(params, cfg, traces, batch)[0]
            flat[i] = old
            pairs.append((grads[k].reshape(-1)[i], (up - down) / (2 * h)))
    pairs = np.array(pairs)
    return np.abs(pairs[:, 0] - pairs[:, 1]).max() / np.abs(pairs[:, 1]).max()


def test_criterion_02_gradient_correctness(report_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    trace = synthesize_trace(ScenarioConfig(duration=120.0, seed=13))
    worst = {False: 0.0, True: 0.0}
    for linear in (False, True):
        for _ in range(100):
            p = _random_horizon(trace, rng, linear)
            seed = rng.normal(size=(len(p.epochs), STATE_DIM))
            g = np.concatenate(mhe_adjoint(p, _solve(p), seed))
            # central differences are exact on linear problems for any step; a long one keeps solver round-off small
            fd = np.concatenate(finite_diff_gradient(_solve, p, seed, h=100.0 if linear else 1e-1))
            worst[linear] = max(worst[linear], np.abs(g - fd).max() / np.abs(fd).max())
    e2e = _end_to_end_error(rng)
    elapsed = time.perf_counter() - t0
    ok = worst[False] <= 1e-3 and worst[True] <= 1e-8 and e2e <= 1e-3
    ok = report_criterion(
        2, "gradient correctness", ok,
        f"adjoint vs FD worst rel {worst[False]:.2e} (<= 1e-3), linear {worst[True]:.2e} (<= 1e-8), "
        f"3-layer end-to-end {e2e:.2e} (<= 1e-3); {elapsed:.0f} s",
    )
    assert ok


def test_criterion_03_oracle_recovery(static_world, trained_3d, report_criterion):
    _, test = static_world
    params, rmse, seconds = trained_3d
    uncorrected = evaluate_rmse(init_parameters(_train_cfg("3d"), static_world[0]), test)
    ok = report_criterion(
        3, "oracle recovery", rmse <= 0.5 * uncorrected,
        f"test-day horizontal RMSE {rmse:.2f} m vs uncorrected {uncorrected:.2f} m "
        f"(ratio {rmse / uncorrected:.3f} <= 0.5); trained in {seconds:.0f} s",
    )
    assert ok


def test_criterion_04_two_dimensional_labels(static_world, trained_3d, report_criterion):
    train, test = static_world
    flat = [TrainingTrace(t.epochs, latlon=t.latlon, fixes=t.fixes, features=t.features) for t in train]
    params, _ = train_corrector(flat, _train_cfg("2d"))
    rmse_2d = evaluate_rmse(params, test)
    rmse_3d = trained_3d[1]
    gap = abs(rmse_2d - rmse_3d) / rmse_3d
    ok = report_criterion(
        4, "2D-label parity", gap <= 0.2,
        f"2D-trained {rmse_2d:.2f} m vs 3D-trained {rmse_3d:.2f} m (relative gap {gap:.3f} <= 0.2)",
    )
    assert ok


def test_criterion_05_edf_weak_supervision(report_criterion):
    route = RoutePolyline.from_degrees(ROUTE)
    cost_map = build_cost_map(route)
    days = synthesize_days(ScenarioConfig(duration=300.0, seed=5, trajectory="route", route=route, speed=5.0), 3)
    # EDF training sees no position labels at all
    train = [TrainingTrace(list(d.epochs)) for d in days[:2]]
    test = TrainingTrace.from_sim(days[2])
    dense = interpolate_route(route, 0.5)

    def cross_track(params):
        corr = mlp_forward(params, test.features)
        res = run_trace(test.epochs, [corr[k, e.prn - 1] for k, e in enumerate(test.epochs)], EngineConfig())
        lla = ecef_to_lla(res.positions)
        return float(np.sqrt(np.mean(route_distance(dense, lla[:, 0], lla[:, 1]) ** 2)))

    cfg = _train_cfg("edf", epochs=12)
    before = cross_track(init_parameters(cfg, train))
    params, _ = train_corrector(train, cfg, cost_map=cost_map)
    after = cross_track(params)
    reduction = 1.0 - after / before
    ok = report_criterion(
        5, "EDF weak supervision", reduction >= 0.3,
        f"cross-track RMSE {before:.2f} m -> {after:.2f} m ({100 * reduction:.0f}% reduction, >= 30%)",
    )
    assert ok


def test_criterion_06_horizon_profile(report_criterion):
    trace = synthesize_trace(ScenarioConfig(duration=200.0, seed=2))
    horizons = (1, 5, 15, 30, 65)
    rows = profile_horizons(trace.epochs, trace.truth_states()[:, POS], horizons=horizons,
                            noise=NoiseModel(1.0, 1.0))
    assert all(r["status"] == "ok" for r in rows)
    table = {(r["engine"], r["N"]): r for r in rows}
    err = {e: np.array([table[e, n]["forward_rmse_m"] for n in horizons]) for e in ("mhe_f", "mhe_ac", "mhe_noac")}
    flat = np.ptp(err["mhe_f"]) <= 0.01 * err["mhe_f"].mean()
    ac_first = err["mhe_ac"][1] <= err["mhe_noac"][1]
    crossings = [n for n, a, b in zip(horizons, err["mhe_ac"], err["mhe_noac"]) if b <= a]
    monotone = all(
        np.all(np.diff([table[e, n]["forward_time_s"] for n in horizons]) > 0) for e in ("mhe_ac", "mhe_noac")
    )
    ok = flat and ac_first and bool(crossings) and monotone
    fmt = lambda a: "/".join(f"{v:.2f}" for v in a)  # noqa: E731
    ok = report_criterion(
        6, "horizon profile", ok,
        f"N={list(horizons)} MHE-F {fmt(err['mhe_f'])}, w/ AC {fmt(err['mhe_ac'])}, w/o AC {fmt(err['mhe_noac'])}; "
        f"crossover at N={crossings[0] if crossings else None}; forward time monotone: {monotone}",
    )
    assert ok


def test_criterion_07_edt_exactness(report_criterion):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(50):
        grid = rng.random((64, 64)) < rng.uniform(0.005, 0.2)
        grid[rng.integers(64), rng.integers(64)] = True
        mismatches += int(not np.array_equal(edt(grid), brute_force_edt(grid, (1.0, 1.0))))
    ok = report_criterion(7, "EDT exactness", mismatches == 0, f"{50 - mismatches}/50 random 64x64 grids identical")
    assert ok


def test_criterion_08_riccati(report_criterion):
    P = np.array([[1.0]])
    worst = 0.0
    for k in range(1, 200):
        P = riccati_update(P, 1.0, 1.0, 0.0, 1.0)
        worst = max(worst, abs(P[0, 0] * (k + 1) - 1.0))
    trace = synthesize_trace(ScenarioConfig(duration=5.0, seed=8))
    ep = trace.epochs[0]
    C = measurement_jacobian(trace.truth[0].state, ep)
    A, Q, R = dynamics_matrix(1.0), process_covariance(1.0, NoiseModel(1.0, 1.0)), measurement_covariance(ep)
    S = np.eye(STATE_DIM) * 0.05
    for _ in range(500):
        S = riccati_update(S, A, C, Q, R)
    residual = np.abs(riccati_update(S, A, C, Q, R) - S).max()
    ok = report_criterion(
        8, "Riccati", worst <= 1e-14 and residual <= 1e-8,
        f"scalar P_k*(k+1)-1 worst {worst:.1e}; 8-state fixed-point residual {residual:.1e} (<= 1e-8)",
    )
    assert ok


def test_criterion_09_metrics(report_criterion):
    score = horizontal_score(np.arange(1, 101))
    d = geodesic_distance(np.array([0.0, 0.0]), np.array([0.0, np.radians(1.0)]))
    ok = report_criterion(
        9, "metrics", abs(score - 72.775) <= 1e-9 and abs(d - 111319.491) <= 0.01,
        f"score(1..100) = {score:.3f}; (0,0)->(0,1 deg) = {d:.3f} m",
    )
    assert ok


def test_criterion_10_service(static_world, trained_3d, report_criterion):
    _, test = static_world
    params = trained_3d[0]
    cfg = EngineConfig(engine="mhe_ac", horizon=5)
    service = FixService(params, cfg)
    t0 = time.perf_counter()
    online = [service.handle_request(epoch_message("replay", ep)) for ep in test.epochs]
    total = time.perf_counter() - t0
    eps = [parse_message(epoch_message("replay", ep))[1] for ep in test.epochs]
    offline = run_trace(eps, predict_corrections(params, eps, baseline_fixes(eps)), cfg)
    diff = np.abs(np.array([r["ecef"] for r in online]) - offline.positions).max()
    worst_ms = max(r["latency_ms"] for r in online)

    gaps = {}
    for dt in (5.0, 10.0, 12.0):
        s = FixService(None, cfg)
        s.handle_request(epoch_message("g", test.epochs[0]))
        nxt = next(e for e in test.epochs if e.timestamp == test.epochs[0].timestamp + dt)
        gaps[dt] = s.handle_request(epoch_message("g", nxt))["status"]
    gap_ok = gaps[5.0] != "RESET" and gaps[10.0] != "RESET" and gaps[12.0] == "RESET"

    ok = diff <= 1e-6 and gap_ok and worst_ms < 1000.0 and total < len(test.epochs)
    ok = report_criterion(
        10, "service", ok,
        f"online vs offline {diff:.1e} m; gap +5/+10/+12 s -> {gaps[5.0]}/{gaps[10.0]}/{gaps[12.0]}; "
        f"worst latency {worst_ms:.1f} ms over {len(online)} epochs replayed in {total:.1f} s",
    )
    assert ok


def test_criterion_11_determinism(tmp_path, report_criterion):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli_main(["simulate", "--seed", "3", "--days", "2", "--duration", "60", "--out", str(out)]) == 0
        runs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same_files = runs[0] == runs[1] and len(runs[0]) == 4

    days = synthesize_days(ScenarioConfig(duration=60.0, seed=9), 2)
    traces = [TrainingTrace.from_sim(d) for d in days]
    cfg = TrainConfig(layers=4, hidden=10, horizon=3, subsequence=10, batch_size=2, epochs=3, seed=4)
    curves = [train_corrector(traces, cfg)[1].losses for _ in range(2)]
    same_curves = curves[0] == curves[1] and len(curves[0]) > 0
    ok = report_criterion(
        11, "determinism", same_files and same_curves,
        f"simulate outputs byte-identical: {same_files}; {len(curves[0])}-step loss curves identical: {same_curves}",
    )
    assert ok
