"""Replay a simulated trace against the HTTP fix service, one request per epoch.

Run: python demos/service_replay.py
"""
import json
import threading
import urllib.request

from rangecorr.estimate import EngineConfig
from rangecorr.serve import FixService, epoch_message, make_server
from rangecorr.sim import ScenarioConfig, synthesize_trace

trace = synthesize_trace(ScenarioConfig(duration=40.0, seed=3))
server = make_server(FixService(config=EngineConfig(engine="mhe_ac", horizon=5)), port=0)
threading.Thread(target=server.serve_forever, daemon=True).start()
base = f"http://127.0.0.1:{server.server_address[1]}"

# drop a 15 s stretch so the session restarts
epochs = trace.epochs[:20] + trace.epochs[35:]
for ep in epochs:
    body = json.dumps(epoch_message("demo", ep)).encode()
    req = urllib.request.Request(base + "/fix", data=body, headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req) as resp:
        fix = json.loads(resp.read())
    print(f"t={fix['utc_s']:.0f}  {fix['status']:<6} {fix['lat_deg']:.6f} {fix['lon_deg']:.6f}  {fix['latency_ms']:.1f} ms")

with urllib.request.urlopen(base + "/metrics") as resp:
    print(json.dumps(json.loads(resp.read()), indent=2))
server.shutdown()
