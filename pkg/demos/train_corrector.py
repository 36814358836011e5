"""Learn pseudorange corrections from two labeled days and test on a third.

The network is trained through the moving-horizon solver, so the loss is
measured on positions rather than on the corrections themselves. This is a
short run; the acceptance suite trains for longer.

Run: python demos/train_corrector.py
"""
from rangecorr.sim import ScenarioConfig, synthesize_days
from rangecorr.train import TrainConfig, TrainingTrace, evaluate_rmse, init_parameters, train_corrector

days = synthesize_days(ScenarioConfig(duration=200.0, seed=5), 3)
traces = [TrainingTrace.from_sim(d) for d in days]
train, test = traces[:2], traces[2]

cfg = TrainConfig(loss="3d", horizon=15, layers=40, batch_size=1, epochs=10)
print(f"test day without corrections: {evaluate_rmse(init_parameters(cfg, train), test):.2f} m")


def show(epoch, params, report):
    print(f"epoch {epoch:2d}  train loss {report.rows[-1][1]:10.3f}  test RMSE {evaluate_rmse(params, test):6.2f} m")


params, report = train_corrector(train, cfg, callback=show)
