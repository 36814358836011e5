"""End-to-end training of the correction network through the horizon solver.

Per batch the network runs once over every epoch of every subsequence, each
length ``N+1`` window is solved (no arrival cost), the loss gradient is pulled
back to the corrections by implicit differentiation, and the accumulated
correction gradients are pushed through the network for one Adam step.
"""
from __future__ import annotations

import configparser
import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .diff import adjoint_flat
from .edf import EdfCostMap, sample_cost
from .estimate import EngineConfig, EstimationError, HorizonProblem, horizontal_rmse_ecef, mhe_solve, run_trace
from .geo import WGS84_A, ecef_to_lla, ecef_to_lla_jacobian
from .model import POS, STATE_DIM, NoiseModel, dynamics_matrix
from .neural import (
    FeatureTensor,
    MlpParameters,
    baseline_fixes,
    build_features,
    config_hash,
    feature_statistics,
    kaiming_init,
    layer_widths,
    mlp_backward,
    mlp_forward,
)

log = logging.getLogger(__name__)

LOSS_KINDS = ("3d", "2d", "edf")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses: each returns (value, dL/dpositions) for an (n, 3) ECEF track


def loss_3d(pred, label):
    """Squared Euclidean distance, summed over rows."""
    if label is None:
        raise ValueError("3D loss needs position labels")
    d = np.asarray(pred, dtype=float) - np.asarray(label, dtype=float)
    return float(np.sum(d * d)), 2.0 * d


def loss_2d(pred, label):
    """Squared (lat, lon) difference in radians; altitude is free."""
    if label is None:
        raise ValueError("2D loss needs lat/lon labels")
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    label = np.atleast_2d(np.asarray(label, dtype=float))
    lla = ecef_to_lla(pred)
    d = lla[:, :2] - label[:, :2]
    jac = ecef_to_lla_jacobian(pred)[:, :2, :]
    grad = 2.0 * np.einsum("ni,nij->nj", d, jac)
    return float(np.sum(d * d)), grad


def loss_edf(pred, cost_map: EdfCostMap):
    """Mean distance-field cost over the positions of a horizon."""
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    n = pred.shape[0]
    lla = ecef_to_lla(pred)
    cost, grad_ll = sample_cost(cost_map, lla[:, 0], lla[:, 1])
    jac = ecef_to_lla_jacobian(pred)[:, :2, :]
    grad = np.einsum("ni,nij->nj", grad_ll, jac) / n
    return float(np.mean(cost)), grad


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    loss: str = "3d"
    horizon: int = 15
    batch_size: int = 4
    subsequence: int = 60
    lr: float = 0.01
    decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    seed: int = 0
    step_size: float = 0.5
    max_iters: int = 10
    adjoint_tol: float = 1.0
    supervise: str = "horizon"  # horizon | newest
    loss_scale_2d: float = WGS84_A**2
    layers: int = 40
    hidden: int = 20
    output_scale: float = 10.0
    zero_last_layer: bool = True
    q_pos: float = 1.0
    q_clock: float = 1.0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.supervise not in ("horizon", "newest"):
            raise ValueError("supervise must be 'horizon' or 'newest'")
        if not 0 <= self.horizon < self.subsequence:
            raise ValueError("need 0 <= horizon < subsequence length")
        for name in ("batch_size", "subsequence", "lr", "epochs", "step_size", "max_iters", "layers", "hidden"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")

    def noise(self) -> NoiseModel:
        return NoiseModel(self.q_pos, self.q_clock)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_mapping(cls, mapping) -> "TrainConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        for key, raw in mapping.items():
            if key not in types:
                raise ValueError(f"unknown training option {key!r}")
            current = getattr(defaults, key)
            if isinstance(current, bool):
                kwargs[key] = str(raw).strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                kwargs[key] = int(raw)
            elif isinstance(current, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw).strip()
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, section: str = "train") -> "TrainConfig":
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(path)
        return cls.from_mapping(dict(parser[section]) if parser.has_section(section) else {})

    def to_file(self, path, section: str = "train") -> None:
        parser = configparser.ConfigParser()
        parser[section] = {k: str(v) for k, v in self.as_dict().items()}
        with open(path, "w") as fh:
            parser.write(fh)


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainingTrace:
    """Epochs with optional labels: ECEF positions and/or (lat, lon) radians."""

    epochs: list
    positions: np.ndarray | None = None
    latlon: np.ndarray | None = None
    fixes: list | None = None
    features: FeatureTensor | None = None

    def __post_init__(self):
        if self.positions is not None and self.latlon is None:
            self.latlon = ecef_to_lla(np.asarray(self.positions))[:, :2]
        if self.fixes is None:
            self.fixes = baseline_fixes(self.epochs)
        if self.features is None:
            self.features = build_features(self.epochs, self.fixes)

    def __len__(self):
        return len(self.epochs)

    @classmethod
    def from_sim(cls, trace) -> "TrainingTrace":
        return cls(list(trace.epochs), trace.truth_states()[:, POS])


@dataclass
class Batch:
    """``B`` subsequences given as ``(trace index, start)`` pairs of length ``L``."""

    items: list
    length: int


def sequential_loader(traces, cfg: TrainConfig, rng: np.random.Generator):
    """Batches for one pass over the data.

    Each trace is cut at a random offset in ``[0, L)`` into consecutive
    length-``L`` subsequences; subsequences from all traces are shuffled and
    grouped ``B`` at a time.
    """
    L = cfg.subsequence
    subs = []
    for t, tr in enumerate(traces):
        n = len(tr)
        offset = int(rng.integers(0, L))
        count = max(0, (n - offset) // L)
        if count == 0:
            warnings.warn(f"trace {t} ({n} epochs) is shorter than one subsequence after offset {offset}; dropped")
            continue
        subs += [(t, offset + i * L) for i in range(count)]
    order = rng.permutation(len(subs))
    subs = [subs[i] for i in order]
    for i in range(0, len(subs), cfg.batch_size):
        yield Batch(subs[i : i + cfg.batch_size], L)


def horizon_windows(length: int, horizon: int):
    """Start indices of the sliding ``horizon + 1`` windows inside a subsequence."""
    return range(0, length - horizon)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new params, new state)``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


def _set_arrays(params: MlpParameters, arrays) -> MlpParameters:
    out = params.copy()
    out.weights = [a.copy() for a in arrays[0::2]]
    out.biases = [a.copy() for a in arrays[1::2]]
    return out


# ---------------------------------------------------------------------------
# horizon objective


def horizon_loss(cfg: TrainConfig, traj: np.ndarray, tr: TrainingTrace, idx: np.ndarray, cost_map=None):
    """Loss value and seed ``dL/dX`` (n, 8) for a solved window."""
    pos = traj[:, POS]
    n = len(idx)
    sel = slice(None) if cfg.supervise == "horizon" else slice(n - 1, n)
    seed = np.zeros((n, STATE_DIM))
    if cfg.loss == "edf":
        if cost_map is None:
            raise ValueError("EDF loss needs a cost map")
        value, g = loss_edf(pos[sel], cost_map)
    elif cfg.loss == "3d":
        if tr.positions is None:
            raise ValueError("3D loss needs position labels")
        value, g = loss_3d(pos[sel], tr.positions[idx][sel])
        m = g.shape[0]
        value, g = value / m, g / m
    else:
        if tr.latlon is None:
            raise ValueError("2D loss needs lat/lon labels")
        value, g = loss_2d(pos[sel], tr.latlon[idx][sel])
        m = g.shape[0]
        value, g = cfg.loss_scale_2d * value / m, cfg.loss_scale_2d * g / m
    rows = np.arange(n)[sel]
    seed[np.ix_(rows, POS)] = g
    return value, seed


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_rmse, skipped)
    losses: list = field(default_factory=list)  # per-batch losses
    skipped: int = 0

    def write_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_rmse_m", "skipped_horizons"])
            for r in self.rows:
                w.writerow([r[0], repr(float(r[1])), repr(float(r[2])), r[3]])
        tmp.replace(path)


def evaluate_rmse(params: MlpParameters, trace: TrainingTrace, engine: EngineConfig | None = None) -> float:
    """Horizontal RMSE on a labeled trace using the inference engine."""
    corr = mlp_forward(params, trace.features)
    corrections = [corr[k, ep.prn - 1] for k, ep in enumerate(trace.epochs)]
    res = run_trace(trace.epochs, corrections, engine or EngineConfig(engine="mhe_ac", horizon=5))
    if trace.positions is None:
        return float("nan")
    return horizontal_rmse_ecef(res.positions, trace.positions)


def batch_gradient(params, cfg: TrainConfig, traces, batch: Batch, cost_map=None):
    """Loss, parameter gradients and skip count of one batch."""
    L = batch.length
    N = cfg.horizon
    feats = FeatureTensor.stack([traces[t].features[s : s + L] for t, s in batch.items])
    corr, cache = mlp_forward(params, feats, return_cache=True)
    grad_corr = np.zeros_like(corr)
    noise = cfg.noise()
    total, count, skipped = 0.0, 0, 0

    for b, (t, s) in enumerate(batch.items):
        tr = traces[t]
        prev = None
        for i in horizon_windows(L, N):
            idx = np.arange(s + i, s + i + N + 1)
            local = np.arange(i, i + N + 1)
            if tr.features.flagged[idx].any():
                skipped += 1
                prev = None
                continue
            epochs = [tr.epochs[k] for k in idx]
            corrections = [corr[b, j, ep.prn - 1] for j, ep in zip(local, epochs)]
            if prev is None:
                warm = np.array([tr.fixes[k] for k in idx])
            else:
                T = epochs[-1].timestamp - epochs[-2].timestamp
                warm = np.vstack([prev[1:], dynamics_matrix(T) @ prev[-1]])
            try:
                prob = HorizonProblem(epochs, warm, noise, corrections, include_arrival_cost=False)
                rep = mhe_solve(prob, cfg.step_size, cfg.max_iters, tol=1e-6)
                value, seed = horizon_loss(cfg, rep.trajectory, tr, idx, cost_map)
                g = adjoint_flat(rep, seed, cfg.adjoint_tol)
            except (EstimationError, np.linalg.LinAlgError):
                skipped += 1
                prev = None
                continue
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss in trace {t} at epochs {idx[0]}..{idx[-1]}")
            prev = rep.trajectory
            total += value
            count += 1
            pos = 0
            for j, ep in zip(local, epochs):
                m = ep.n_visible
                grad_corr[b, j, ep.prn - 1] += g[pos : pos + m]
                pos += m

    if count == 0:
        return float("nan"), None, skipped
    grad_corr /= count
    dW, db = mlp_backward(params, feats, grad_corr, cache)
    grads = []
    for a, c in zip(dW, db):
        grads += [a, c]
    return total / count, grads, skipped


def init_parameters(cfg: TrainConfig, traces) -> MlpParameters:
    params = kaiming_init(
        layer_widths(cfg.layers, cfg.hidden),
        seed=cfg.seed,
        zero_last=cfg.zero_last_layer,
        output_scale=cfg.output_scale,
    )
    stacked = FeatureTensor(
        np.concatenate([t.features.values for t in traces]), np.concatenate([t.features.mask for t in traces])
    )
    params.feature_mean, params.feature_std = feature_statistics(stacked)
    params.config_hash = config_hash(cfg.as_dict())
    return params


def train_corrector(traces, cfg: TrainConfig, cost_map=None, validation=None, params=None, callback=None):
    """Train the correction network; returns ``(params, TrainReport)``.

    ``traces`` are :class:`TrainingTrace` objects (labels as the loss needs).
    ``validation`` is an optional labeled trace evaluated after every epoch
    with the inference engine (arrival cost on, ``N = 5``).
    """
    traces = list(traces)
    if cfg.loss == "edf" and cost_map is None:
        raise ValueError("EDF training needs a cost map")
    for t in traces:
        if cfg.loss == "3d" and t.positions is None:
            raise ValueError("3D training needs position labels")
        if cfg.loss == "2d" and t.latlon is None:
            raise ValueError("2D training needs lat/lon labels")
    rng = np.random.default_rng(cfg.seed)
    params = init_parameters(cfg, traces) if params is None else params.copy()
    state = AdamState.zeros_like(params.arrays())
    report = TrainReport()

    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.decay**epoch
        losses, skipped = [], 0
        for batch in sequential_loader(traces, cfg, rng):
            value, grads, sk = batch_gradient(params, cfg, traces, batch, cost_map)
            skipped += sk
            if grads is None:
                continue
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(f"non-finite gradient at epoch {epoch}")
            arrays, state = adam_step(params.arrays(), grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            params = _set_arrays(params, arrays)
            losses.append(value)
            report.losses.append(value)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        val = evaluate_rmse(params, validation) if validation is not None else float("nan")
        report.rows.append((epoch, mean_loss, val, skipped))
        report.skipped += skipped
        log.info("epoch %d loss %.6g val_rmse %.4g skipped %d", epoch, mean_loss, val, skipped)
        if callback is not None:
            callback(epoch, params, report)
    if not report.losses:
        raise TrainingError(f"no subsequence of length {cfg.subsequence} fit in the training traces")
    return params, report
