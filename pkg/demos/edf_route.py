"""Train with a route map instead of position labels.

The cost of a fix is its distance to the nearest mapped road, read from a
smoothed distance field. No ground-truth positions are used in training.

Run: python demos/edf_route.py
"""
import numpy as np

from rangecorr.edf import RoutePolyline, build_cost_map, interpolate_route, route_distance
from rangecorr.estimate import EngineConfig, run_trace
from rangecorr.geo import ecef_to_lla
from rangecorr.neural import predict_corrections
from rangecorr.sim import ScenarioConfig, synthesize_days
from rangecorr.train import TrainConfig, TrainingTrace, init_parameters, train_corrector

route = RoutePolyline.from_degrees([(37.4, -122.1), (37.4030, -122.1), (37.4030, -122.0960), (37.4060, -122.0960)])
cost_map = build_cost_map(route)
print(f"cost map {cost_map.shape[0]} x {cost_map.shape[1]} cells")

days = synthesize_days(ScenarioConfig(duration=300.0, seed=5, trajectory="route", route=route, speed=5.0), 3)
train = [TrainingTrace(list(d.epochs)) for d in days[:2]]
test = days[2]
dense = interpolate_route(route, 0.5)


def cross_track(params):
    res = run_trace(test.epochs, predict_corrections(params, test.epochs), EngineConfig())
    lla = ecef_to_lla(res.positions)
    return float(np.sqrt(np.mean(route_distance(dense, lla[:, 0], lla[:, 1]) ** 2)))


cfg = TrainConfig(loss="edf", horizon=15, layers=40, batch_size=1, epochs=12)
print(f"cross-track RMSE before training: {cross_track(init_parameters(cfg, train)):.2f} m")
params, _ = train_corrector(train, cfg, cost_map=cost_map,
                            callback=lambda e, p, r: print(f"epoch {e:2d}  map loss {r.rows[-1][1]:.3f}"))
print(f"cross-track RMSE after training:  {cross_track(params):.2f} m")
