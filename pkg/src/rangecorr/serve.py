"""HTTP inference service: per-client moving-horizon sessions over JSON.

``POST /fix`` takes::

    {"session_id": "...", "utc_s": 36000.0,
     "epoch": [{"prn": 5, "sat_x": ..., "sat_y": ..., "sat_z": ...,
                "sat_vx": ..., "sat_vy": ..., "sat_vz": ...,
                "pseudorange_corrected": ..., "prr": ..., "cn0": ...,
                "elevation_deg": ..., "range_sigma": ..., "rate_sigma": ...}, ...]}

and answers ``{"utc_s", "lat_deg", "lon_deg", "alt_m", "status", "latency_ms"}``
with status ``OK``, ``WARMUP``, ``RESET`` or ``ERROR``. ``GET /metrics``
returns request counters and latency percentiles.
"""
from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .bench import TRACE_COLUMNS
from .estimate import EngineConfig, MovingHorizonEstimator, gap_check
from .geo import ecef_to_lla
from .model import POS, Epoch
from .neural import BaselineTracker, MlpParameters, epoch_features, mlp_forward, FeatureTensor

log = logging.getLogger(__name__)

SAT_FIELDS = TRACE_COLUMNS[1:]


class MessageError(ValueError):
    """Malformed request payload."""


def parse_message(msg) -> tuple[str, Epoch]:
    """Validate a request and build its :class:`Epoch`. Unknown fields are ignored."""
    if not isinstance(msg, dict):
        raise MessageError("request must be a JSON object")
    sid = msg.get("session_id")
    if not isinstance(sid, str) or not sid:
        raise MessageError("session_id must be a non-empty string")
    utc = msg.get("utc_s")
    if isinstance(utc, bool) or not isinstance(utc, (int, float)) or not math.isfinite(utc):
        raise MessageError("utc_s must be a finite number")
    records = msg.get("epoch")
    if not isinstance(records, list):
        raise MessageError("epoch must be a list of satellite records")
    cols = {c: [] for c in SAT_FIELDS}
    for k, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise MessageError(f"epoch[{k}] must be an object")
        for c in SAT_FIELDS:
            v = rec.get(c)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise MessageError(f"epoch[{k}].{c} must be a finite number")
            cols[c].append(float(v))
        if not float(rec["prn"]).is_integer() or not 1 <= rec["prn"] <= 32:
            raise MessageError(f"epoch[{k}].prn must be an integer in 1..32")
        if rec["range_sigma"] <= 0 or rec["rate_sigma"] <= 0:
            raise MessageError(f"epoch[{k}] sigmas must be positive")
    if len(set(cols["prn"])) != len(cols["prn"]):
        raise MessageError("duplicate prn in epoch")
    epoch = Epoch(
        timestamp=float(utc),
        prn=np.array(cols["prn"], dtype=int),
        sat_pos=np.column_stack([cols["sat_x"], cols["sat_y"], cols["sat_z"]]),
        sat_vel=np.column_stack([cols["sat_vx"], cols["sat_vy"], cols["sat_vz"]]),
        pseudorange=cols["pseudorange_corrected"],
        pseudorange_rate=cols["prr"],
        cn0=cols["cn0"],
        elevation=np.radians(cols["elevation_deg"]),
        range_sigma=cols["range_sigma"],
        rate_sigma=cols["rate_sigma"],
    )
    return sid, epoch


def epoch_message(session_id: str, epoch: Epoch) -> dict:
    """Request payload for ``epoch`` (the inverse of :func:`parse_message`)."""
    el = np.degrees(epoch.elevation)
    recs = []
    for i in range(epoch.n_visible):
        recs.append(
            {
                "prn": int(epoch.prn[i]),
                "sat_x": float(epoch.sat_pos[i, 0]),
                "sat_y": float(epoch.sat_pos[i, 1]),
                "sat_z": float(epoch.sat_pos[i, 2]),
                "sat_vx": float(epoch.sat_vel[i, 0]),
                "sat_vy": float(epoch.sat_vel[i, 1]),
                "sat_vz": float(epoch.sat_vel[i, 2]),
                "pseudorange_corrected": float(epoch.pseudorange[i]),
                "prr": float(epoch.pseudorange_rate[i]),
                "cn0": float(epoch.cn0[i]),
                "elevation_deg": float(el[i]),
                "range_sigma": float(epoch.range_sigma[i]),
                "rate_sigma": float(epoch.rate_sigma[i]),
            }
        )
    return {"session_id": session_id, "utc_s": float(epoch.timestamp), "epoch": recs}


@dataclass
class ClientSession:
    session_id: str
    estimator: MovingHorizonEstimator
    model: MlpParameters | None = None
    baseline: BaselineTracker = field(default_factory=BaselineTracker)
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def cache_size(self) -> int:
        return len(self.estimator)

    def corrections(self, epoch: Epoch):
        fix = self.baseline.step(epoch)
        if self.model is None:
            return None
        v, m = epoch_features(epoch, fix)
        corr = mlp_forward(self.model, FeatureTensor(v[None], m[None]))[0]
        return corr[epoch.prn - 1]

    def process(self, epoch: Epoch):
        last = self.estimator.last_timestamp
        if last is not None:
            gap_check(last, epoch.timestamp, self.estimator.config.gap_threshold)  # raises if not increasing
        return self.estimator.step(epoch, self.corrections(epoch))


class Metrics:
    def __init__(self):
        self._lock = threading.Lock()
        self.counts = {"requests": 0, "ok": 0, "warmup": 0, "resets": 0, "errors": 0}
        self.latencies_ms = []

    def record(self, status: str, latency_ms: float):
        with self._lock:
            self.counts["requests"] += 1
            key = {"OK": "ok", "WARMUP": "warmup", "RESET": "resets", "ERROR": "errors"}[status]
            self.counts[key] += 1
            self.latencies_ms.append(latency_ms)

    def snapshot(self) -> dict:
        with self._lock:
            lat = np.array(self.latencies_ms)
            snap = dict(self.counts)
        if lat.size:
            snap["latency_ms"] = {
                "p50": float(np.percentile(lat, 50)),
                "p95": float(np.percentile(lat, 95)),
                "mean": float(lat.mean()),
            }
        else:
            snap["latency_ms"] = {"p50": 0.0, "p95": 0.0, "mean": 0.0}
        return snap


class FixService:
    """Session registry plus request handling; independent of the transport."""

    def __init__(self, model: MlpParameters | None = None, config: EngineConfig | None = None, cost_map=None):
        self.model = model
        self.config = config or EngineConfig(engine="mhe_ac", horizon=5)
        self.cost_map = cost_map  # reserved for map-aware clients; fixes are not map-registered
        self.sessions: dict[str, ClientSession] = {}
        self._lock = threading.Lock()
        self.metrics = Metrics()

    def session(self, sid: str) -> ClientSession:
        with self._lock:
            s = self.sessions.get(sid)
            if s is None:
                s = ClientSession(sid, MovingHorizonEstimator(self.config), self.model)
                self.sessions[sid] = s
            return s

    def handle_request(self, msg) -> dict:
        t0 = time.perf_counter()
        utc = msg.get("utc_s") if isinstance(msg, dict) else None
        try:
            sid, epoch = parse_message(msg)
            sess = self.session(sid)
            with sess.lock:
                res = sess.process(epoch)
        except ValueError as exc:
            return self._respond(utc, None, "ERROR", t0, str(exc))
        if res.status == "ERROR":
            return self._respond(res.timestamp, None, "ERROR", t0, res.message)
        return self._respond(res.timestamp, res.state, res.status, t0)

    def _respond(self, utc, state, status, t0, message=""):
        out = {"utc_s": utc, "lat_deg": None, "lon_deg": None, "alt_m": None, "status": status}
        if state is not None:
            lla = ecef_to_lla(state[POS])
            out.update(lat_deg=math.degrees(lla[0]), lon_deg=math.degrees(lla[1]), alt_m=float(lla[2]))
            out["ecef"] = [float(v) for v in state[POS]]
        if message:
            out["message"] = message
        latency = (time.perf_counter() - t0) * 1000.0
        out["latency_ms"] = latency
        self.metrics.record(status, latency)
        return out

    def serve_metrics(self) -> dict:
        return self.metrics.snapshot()


def make_handler(service: FixService):
    class Handler(BaseHTTPRequestHandler):
        def _send(self, code, payload):
            body = json.dumps(payload).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):  # noqa: N802
            if self.path != "/fix":
                self._send(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            try:
                msg = json.loads(self.rfile.read(length) or b"null")
            except json.JSONDecodeError as exc:
                self._send(400, service._respond(None, None, "ERROR", time.perf_counter(), f"invalid JSON: {exc}"))
                return
            resp = service.handle_request(msg)
            self._send(200 if resp["status"] != "ERROR" else 400, resp)

        def do_GET(self):  # noqa: N802
            if self.path != "/metrics":
                self._send(404, {"error": "not found"})
                return
            self._send(200, service.serve_metrics())

        def log_message(self, fmt, *args):
            log.debug("%s - %s", self.address_string(), fmt % args)

    return Handler


def make_server(service: FixService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    return ThreadingHTTPServer((host, port), make_handler(service))
