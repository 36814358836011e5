"""Trace files, evaluation metrics and horizon profiling.

Trace CSV (one row per epoch and satellite, rows grouped by epoch in time
order)::

    utc_s,prn,sat_x,sat_y,sat_z,sat_vx,sat_vy,sat_vz,pseudorange_corrected,prr,cn0,elevation_deg,range_sigma,rate_sigma

Label / prediction track CSV::

    utc_s,lat_deg,lon_deg[,alt_m]

Profile CSV::

    engine,N,forward_rmse_m,forward_time_s,backward_time_s,train_loss,status
"""
from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diff import adjoint_flat, filter_adjoint
from .estimate import ENGINES, EngineConfig, MovingHorizonEstimator, horizontal_rmse_ecef
from .geo import ecef_to_lla, geodesic_distance
from .model import POS, Epoch

TRACE_COLUMNS = (
    "utc_s",
    "prn",
    "sat_x",
    "sat_y",
    "sat_z",
    "sat_vx",
    "sat_vy",
    "sat_vz",
    "pseudorange_corrected",
    "prr",
    "cn0",
    "elevation_deg",
    "range_sigma",
    "rate_sigma",
)
TRACK_COLUMNS = ("utc_s", "lat_deg", "lon_deg", "alt_m")
PROFILE_COLUMNS = ("engine", "N", "forward_rmse_m", "forward_time_s", "backward_time_s", "train_loss", "status")
JOIN_TOLERANCE = 0.5


class SchemaError(ValueError):
    """A file does not follow the documented CSV schema."""


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    tmp.replace(path)


def _fmt(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# traces


def trace_to_csv(epochs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for ep in epochs:
        el_deg = np.degrees(ep.elevation)
        for i in range(ep.n_visible):
            w.writerow(
                [_fmt(ep.timestamp), int(ep.prn[i])]
                + [_fmt(v) for v in ep.sat_pos[i]]
                + [_fmt(v) for v in ep.sat_vel[i]]
                + [
                    _fmt(ep.pseudorange[i]),
                    _fmt(ep.pseudorange_rate[i]),
                    _fmt(ep.cn0[i]),
                    _fmt(el_deg[i]),
                    _fmt(ep.range_sigma[i]),
                    _fmt(ep.rate_sigma[i]),
                ]
            )
    return buf.getvalue()


def emit_trace(epochs, path) -> None:
    """Write epochs in the trace CSV schema (epochs without satellites produce no rows)."""
    atomic_write_text(path, trace_to_csv(epochs))


def _float(row, col, lineno):
    try:
        v = float(row[col])
    except (KeyError, TypeError, ValueError):
        raise SchemaError(f"line {lineno}: column {col!r} is not a number: {row.get(col)!r}") from None
    if not math.isfinite(v):
        raise SchemaError(f"line {lineno}: column {col!r} is not finite")
    return v


def parse_trace(text: str, source: str = "<trace>") -> list:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise SchemaError(f"{source}: missing header row")
    missing = [c for c in TRACE_COLUMNS if c not in reader.fieldnames]
    if missing:
        raise SchemaError(f"{source}: missing column(s) {', '.join(missing)}")

    groups = []  # (utc, rows)
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        utc = _float(row, "utc_s", lineno)
        if groups and utc == groups[-1][0]:
            groups[-1][1].append((lineno, row))
            continue
        if groups and utc < groups[-1][0]:
            raise SchemaError(f"{source}: line {lineno}: epochs out of time order ({utc} after {groups[-1][0]})")
        if utc in seen:
            raise SchemaError(f"{source}: line {lineno}: rows of epoch {utc} are not contiguous")
        seen.add(utc)
        groups.append((utc, [(lineno, row)]))

    epochs = []
    for k, (utc, rows) in enumerate(groups):
        prn = []
        vals = {c: [] for c in TRACE_COLUMNS[2:]}
        for lineno, row in rows:
            try:
                p = int(row["prn"])
            except (TypeError, ValueError):
                raise SchemaError(f"{source}: line {lineno}: column 'prn' is not an integer") from None
            if not 1 <= p <= 32:
                raise SchemaError(f"{source}: line {lineno}: prn {p} outside 1..32")
            if p in prn:
                raise SchemaError(f"{source}: line {lineno}: duplicate prn {p} in epoch {utc}")
            prn.append(p)
            for c in vals:
                vals[c].append(_float(row, c, lineno))
            if vals["range_sigma"][-1] <= 0 or vals["rate_sigma"][-1] <= 0:
                raise SchemaError(f"{source}: line {lineno}: sigmas must be positive")
        nxt = groups[k + 1][0] - utc if k + 1 < len(groups) else float("nan")
        epochs.append(
            Epoch(
                timestamp=utc,
                prn=prn,
                sat_pos=np.column_stack([vals["sat_x"], vals["sat_y"], vals["sat_z"]]),
                sat_vel=np.column_stack([vals["sat_vx"], vals["sat_vy"], vals["sat_vz"]]),
                pseudorange=vals["pseudorange_corrected"],
                pseudorange_rate=vals["prr"],
                cn0=vals["cn0"],
                elevation=np.radians(vals["elevation_deg"]),
                range_sigma=vals["range_sigma"],
                rate_sigma=vals["rate_sigma"],
                sampling_interval_to_next=nxt,
            )
        )
    return epochs


@dataclass
class Track:
    """Time-tagged positions: ``lat``/``lon`` in degrees, ``alt`` meters (may be NaN)."""

    utc: np.ndarray
    lat_deg: np.ndarray
    lon_deg: np.ndarray
    alt_m: np.ndarray | None = None

    def __post_init__(self):
        self.utc = np.asarray(self.utc, dtype=float)
        self.lat_deg = np.asarray(self.lat_deg, dtype=float)
        self.lon_deg = np.asarray(self.lon_deg, dtype=float)
        self.alt_m = np.full(self.utc.shape, np.nan) if self.alt_m is None else np.asarray(self.alt_m, dtype=float)

    def __len__(self):
        return len(self.utc)

    @classmethod
    def from_ecef(cls, utc, positions) -> "Track":
        positions = np.asarray(positions, dtype=float)
        ok = np.all(np.isfinite(positions), axis=1)
        lla = ecef_to_lla(positions[ok])
        return cls(np.asarray(utc)[ok], np.degrees(lla[:, 0]), np.degrees(lla[:, 1]), lla[:, 2])

    def ecef(self) -> np.ndarray:
        from .geo import lla_to_ecef

        alt = np.nan_to_num(self.alt_m)
        return lla_to_ecef(np.column_stack([np.radians(self.lat_deg), np.radians(self.lon_deg), alt]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        for t, la, lo, al in zip(self.utc, self.lat_deg, self.lon_deg, self.alt_m):
            w.writerow([_fmt(t), _fmt(la), _fmt(lo), "" if math.isnan(al) else _fmt(al)])
        return buf.getvalue()


def write_track(track: Track, path) -> None:
    atomic_write_text(path, track.to_csv())


def parse_track(text: str, source: str = "<track>") -> Track:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise SchemaError(f"{source}: missing header row")
    missing = [c for c in TRACK_COLUMNS[:3] if c not in reader.fieldnames]
    if missing:
        raise SchemaError(f"{source}: missing column(s) {', '.join(missing)}")
    has_alt = "alt_m" in reader.fieldnames
    utc, lat, lon, alt = [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        utc.append(_float(row, "utc_s", lineno))
        lat.append(_float(row, "lat_deg", lineno))
        lon.append(_float(row, "lon_deg", lineno))
        alt.append(_float(row, "alt_m", lineno) if has_alt and row.get("alt_m", "") != "" else np.nan)
    return Track(utc, lat, lon, alt)


def read_track(path) -> Track:
    return parse_track(Path(path).read_text(), str(path))


def join_nearest(utc_a, utc_b, tolerance: float = JOIN_TOLERANCE):
    """Index pairs ``(i, j)`` matching each ``utc_a[i]`` to its nearest ``utc_b[j]``."""
    utc_b = np.asarray(utc_b, dtype=float)
    order = np.argsort(utc_b, kind="stable")
    sb = utc_b[order]
    pairs = []
    if sb.size == 0:
        return pairs
    for i, t in enumerate(np.asarray(utc_a, dtype=float)):
        k = int(np.searchsorted(sb, t))
        cands = [c for c in (k - 1, k) if 0 <= c < sb.size]
        best = min(cands, key=lambda c: abs(sb[c] - t))
        if abs(sb[best] - t) <= tolerance:
            pairs.append((i, int(order[best])))
    return pairs


def ingest(path, labels=None):
    """Read a trace CSV and optionally join a label track onto its epochs.

    Returns ``(epochs, labels)`` where ``labels`` is a :class:`Track` aligned
    one-to-one with the epochs (or ``None``).
    """
    epochs = parse_trace(Path(path).read_text(), str(path))
    if labels is None:
        return epochs, None
    track = read_track(labels)
    utc = np.array([e.timestamp for e in epochs])
    pairs = join_nearest(utc, track.utc)
    if len(pairs) != len(epochs):
        joined = {i for i, _ in pairs}
        bad = [utc[i] for i in range(len(utc)) if i not in joined][:5]
        raise SchemaError(f"{labels}: no label within {JOIN_TOLERANCE} s for epoch(s) {bad}")
    idx = np.array([j for _, j in pairs])
    return epochs, Track(utc, track.lat_deg[idx], track.lon_deg[idx], track.alt_m[idx])


# ---------------------------------------------------------------------------
# metrics


def horizontal_errors(pred: Track, label: Track, tolerance: float = JOIN_TOLERANCE) -> np.ndarray:
    """Geodesic (Vincenty) distance of every prediction with a label within ``tolerance``."""
    pairs = join_nearest(pred.utc, label.utc, tolerance)
    if not pairs:
        raise ValueError("prediction and label tracks do not overlap in time")
    out = np.empty(len(pairs))
    for k, (i, j) in enumerate(pairs):
        a = (math.radians(pred.lat_deg[i]), math.radians(pred.lon_deg[i]))
        b = (math.radians(label.lat_deg[j]), math.radians(label.lon_deg[j]))
        out[k] = geodesic_distance(a, b, fallback=True)
    return out


def horizontal_score(errors) -> float:
    """Mean of the 50th and 95th percentiles (linear interpolation between ranks)."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("no errors to score")
    p50, p95 = np.percentile(e, [50, 95], method="linear")
    return float((p50 + p95) / 2.0)


@dataclass
class EvalReport:
    errors: np.ndarray
    percentiles: dict
    score: float
    engine: dict = field(default_factory=dict)
    runtime_s: float = float("nan")

    @classmethod
    def from_errors(cls, errors, engine=None, runtime_s=float("nan")) -> "EvalReport":
        e = np.asarray(errors, dtype=float)
        pct = {p: float(np.percentile(e, p, method="linear")) for p in (50, 68, 95)}
        return cls(e, pct, horizontal_score(e), engine or {}, runtime_s)

    def as_dict(self) -> dict:
        return {
            "score_m": self.score,
            "p50_m": self.percentiles[50],
            "p68_m": self.percentiles[68],
            "p95_m": self.percentiles[95],
            "mean_m": float(np.mean(self.errors)),
            "n": int(self.errors.size),
            "engine": self.engine,
            "runtime_s": None if math.isnan(self.runtime_s) else self.runtime_s,
        }


def evaluate_engine(epochs, labels: Track, config: EngineConfig, corrections=None) -> tuple[EvalReport, Track]:
    """Run one engine over ``epochs`` and score it against ``labels``."""
    from .estimate import run_trace

    t0 = time.perf_counter()
    res = run_trace(epochs, corrections, config)
    runtime = time.perf_counter() - t0
    track = Track.from_ecef(res.timestamps, res.positions)
    errs = horizontal_errors(track, labels)
    engine = {"engine": config.engine, "horizon": config.horizon}
    return EvalReport.from_errors(errs, engine, runtime), track


# ---------------------------------------------------------------------------
# profiling


def _loss_3d_seed(traj, labels):
    d = traj[:, POS] - labels
    seed = np.zeros_like(traj)
    seed[:, POS] = 2.0 * d / len(traj)
    return float(np.sum(d * d)) / len(traj), seed


def profile_engine(epochs, truth_positions, config: EngineConfig, corrections=None, repeats: int = 1) -> dict:
    """Forward accuracy/time and backward time/loss of one engine at one horizon."""
    row = {"engine": config.engine, "N": config.horizon}
    truth_positions = np.asarray(truth_positions, dtype=float)
    best = math.inf
    steps = None
    for _ in range(max(1, repeats)):
        est = MovingHorizonEstimator(config)
        t0 = time.perf_counter()
        out = [est.step(ep, None if corrections is None else corrections[k]) for k, ep in enumerate(epochs)]
        best = min(best, time.perf_counter() - t0)
        steps = out
    states = np.array([s.state for s in steps])
    row["forward_rmse_m"] = horizontal_rmse_ecef(states[:, POS], truth_positions)
    row["forward_time_s"] = best
    failures = sum(s.status == "ERROR" for s in steps)

    if config.engine in ("mhe_ac", "mhe_noac"):
        t0 = time.perf_counter()
        losses = []
        for k, s in enumerate(steps):
            if s.report is None:
                continue
            n = s.report.trajectory.shape[0]
            labels = truth_positions[k - n + 1 : k + 1]
            value, seed = _loss_3d_seed(s.report.trajectory, labels)
            adjoint_flat(s.report, seed, tol=None)
            losses.append(value)
        row["backward_time_s"] = time.perf_counter() - t0
        row["train_loss"] = float(np.mean(losses)) if losses else float("nan")
    elif config.engine in ("ekf", "mhe_f"):
        t0 = time.perf_counter()
        traj, _ = filter_adjoint(epochs, corrections, np.zeros((len(epochs), 8)), config.noise, config.p0)
        value, seed = _loss_3d_seed(traj, truth_positions)
        filter_adjoint(epochs, corrections, seed, config.noise, config.p0)
        row["backward_time_s"] = time.perf_counter() - t0
        row["train_loss"] = value
    else:
        row["backward_time_s"] = float("nan")
        row["train_loss"] = float("nan")
    row["status"] = "ok" if failures == 0 else f"failures={failures}"
    return row


def profile_horizons(epochs, truth_positions, engines=("mhe_f", "mhe_ac", "mhe_noac"), horizons=(1, 5, 15, 30, 65),
                     noise=None, corrections=None, repeats: int = 1) -> list:
    """Profile every engine at every horizon; failing cells are recorded, not raised."""
    rows = []
    for engine in engines:
        if engine not in ENGINES:
            raise ValueError(f"unknown engine {engine!r}")
        for N in horizons:
            kwargs = {"engine": engine, "horizon": int(N)}
            if noise is not None:
                kwargs["noise"] = noise
            try:
                rows.append(profile_engine(epochs, truth_positions, EngineConfig(**kwargs), corrections, repeats))
            except Exception as exc:  # noqa: BLE001 - a failed cell must not end the sweep
                rows.append(
                    {
                        "engine": engine,
                        "N": int(N),
                        "forward_rmse_m": float("nan"),
                        "forward_time_s": float("nan"),
                        "backward_time_s": float("nan"),
                        "train_loss": float("nan"),
                        "status": f"error: {exc}".replace(",", ";"),
                    }
                )
    return rows


def profile_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROFILE_COLUMNS)
    for r in rows:
        w.writerow([r["engine"], r["N"]] + [_fmt(r[c]) for c in PROFILE_COLUMNS[2:6]] + [r["status"]])
    return buf.getvalue()
