"""Satellite-wise MLP that maps per-satellite features to pseudorange corrections.

Features live in a fixed 32-slot layout per epoch (slot ``prn - 1``) with a
visibility mask; the same network is applied to every visible slot and
invisible slots are forced to zero on the way out and on the way back.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimate import EstimationError, wls_residuals, wls_solve
from .geo import ecef_to_lla, ecef_vector_to_ned, unit_geometry_vector
from .model import NUM_SV, POS, VEL, Epoch, dynamics_matrix

FEATURE_NAMES = (
    "cn0",
    "elevation",
    "prn",
    "lat",
    "lon",
    "alt",
    "g_north",
    "g_east",
    "g_down",
    "d_north",
    "d_east",
    "d_down",
    "residual",
    "residual_rss",
)
NUM_FEATURES = len(FEATURE_NAMES)
MIN_SPEED = 0.1
CHECKPOINT_VERSION = 1


@dataclass
class FeatureTensor:
    """``values[..., SV, I]`` raw features and ``mask[..., SV]`` visibility."""

    values: np.ndarray
    mask: np.ndarray
    flagged: np.ndarray | None = None  # (...,) epochs without a baseline fix

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape[:-1] != self.mask.shape or self.values.shape[-1] != NUM_FEATURES:
            raise ValueError(f"feature shape {self.values.shape} does not match mask {self.mask.shape}")
        if self.flagged is None:
            self.flagged = np.zeros(self.mask.shape[:-1], dtype=bool)

    def __getitem__(self, idx):
        return FeatureTensor(self.values[idx], self.mask[idx], self.flagged[idx])

    @classmethod
    def stack(cls, items):
        items = list(items)
        return cls(
            np.stack([f.values for f in items]),
            np.stack([f.mask for f in items]),
            np.stack([f.flagged for f in items]),
        )


def epoch_features(epoch: Epoch, fix) -> tuple[np.ndarray, np.ndarray]:
    """Features ``(SV, I)`` and mask ``(SV,)`` of one epoch given its baseline fix."""
    values = np.zeros((NUM_SV, NUM_FEATURES))
    mask = np.zeros(NUM_SV, dtype=bool)
    if fix is None or epoch.n_visible == 0:
        return values, mask
    slots = epoch.prn - 1
    lla = ecef_to_lla(fix[POS])
    g, _ = unit_geometry_vector(fix[POS], epoch.sat_pos)
    g_ned = ecef_vector_to_ned(g, lla)
    vel_ned = ecef_vector_to_ned(fix[VEL], lla)
    speed = float(np.linalg.norm(vel_ned))
    d_ned = vel_ned / speed if speed >= MIN_SPEED else np.zeros(3)
    res = wls_residuals(epoch, fix)
    rss = float(np.sqrt(np.sum(res**2)))

    values[slots, 0] = epoch.cn0
    values[slots, 1] = epoch.elevation
    values[slots, 2] = epoch.prn / NUM_SV
    values[slots, 3:6] = lla
    values[slots, 6:9] = g_ned
    values[slots, 9:12] = d_ned
    values[slots, 12] = res
    values[slots, 13] = rss
    mask[slots] = True
    return values, mask


class BaselineTracker:
    """Sequential WLS baseline on uncorrected pseudoranges.

    Each fix starts from the previous one; when WLS fails the previous fix is
    propagated, and with no previous fix the epoch gets ``None``.
    """

    def __init__(self):
        self.prev = None
        self.prev_time = None

    def step(self, epoch: Epoch):
        try:
            fix = wls_solve(epoch, init=None if self.prev is None else self.prev[POS])
        except EstimationError:
            fix = None
            if self.prev is not None:
                fix = dynamics_matrix(epoch.timestamp - self.prev_time) @ self.prev
        self.prev = fix
        self.prev_time = epoch.timestamp
        return fix


def baseline_fixes(epochs) -> list:
    """WLS fix per epoch (see :class:`BaselineTracker`)."""
    tracker = BaselineTracker()
    return [tracker.step(ep) for ep in epochs]


def build_features(epochs, fixes=None) -> FeatureTensor:
    """Raw feature tensor ``(len(epochs), SV, I)`` for a run of epochs."""
    if fixes is None:
        fixes = baseline_fixes(epochs)
    vals, masks, flagged = [], [], []
    for ep, fix in zip(epochs, fixes):
        v, m = epoch_features(ep, fix)
        vals.append(v)
        masks.append(m)
        flagged.append(fix is None)
    return FeatureTensor(
        np.array(vals).reshape(-1, NUM_SV, NUM_FEATURES),
        np.array(masks).reshape(-1, NUM_SV),
        np.array(flagged, dtype=bool),
    )


def feature_statistics(features: FeatureTensor) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std over visible slots only."""
    x = features.values[features.mask]
    if x.shape[0] == 0:
        raise ValueError("no visible slots to compute statistics from")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


@dataclass
class MlpParameters:
    weights: list
    biases: list
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(NUM_FEATURES))
    feature_std: np.ndarray = field(default_factory=lambda: np.ones(NUM_FEATURES))
    output_scale: float = 1.0
    config_hash: str = ""

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k}: weight {W.shape} and bias {b.shape} disagree")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k} input width {W.shape[1]} != previous output {self.weights[k - 1].shape[0]}")
        if self.weights[-1].shape[0] != 1:
            raise ValueError("output layer must have width 1")

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParameters":
        return MlpParameters(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.feature_mean.copy(),
            self.feature_std.copy(),
            self.output_scale,
            self.config_hash,
        )

    def arrays(self) -> list:
        """Trainable arrays in a fixed order (W0, b0, W1, b1, ...)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out


def layer_widths(n_layers: int = 40, hidden: int = 20, inputs: int = NUM_FEATURES) -> list:
    """``[inputs, hidden, ..., hidden, 1]`` for ``n_layers`` linear layers."""
    if n_layers < 1:
        raise ValueError("need at least one layer")
    return [inputs] + [hidden] * (n_layers - 1) + [1]


def kaiming_init(widths=None, seed: int = 0, zero_last: bool = False, output_scale: float = 1.0) -> MlpParameters:
    """He-normal weights ``N(0, 2 / fan_in)`` and zero biases."""
    widths = layer_widths() if widths is None else list(widths)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if zero_last:
        weights[-1][:] = 0.0
    return MlpParameters(weights, biases, output_scale=output_scale)


def _normalized_inputs(params: MlpParameters, features: FeatureTensor) -> np.ndarray:
    if features.values.shape[-1] != params.input_width:
        raise ValueError(f"features have width {features.values.shape[-1]}, network expects {params.input_width}")
    x = features.values[features.mask]
    return (x - params.feature_mean) / params.feature_std


def mlp_forward(params: MlpParameters, features: FeatureTensor, return_cache: bool = False):
    """Corrections ``(..., SV)`` in meters; zero wherever the mask is off."""
    h = _normalized_inputs(params, features)
    acts = [h]
    last = params.n_layers - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W.T + b
        h = np.maximum(z, 0.0) if k < last else z
        acts.append(h)
    out = np.zeros(features.mask.shape)
    out[features.mask] = params.output_scale * h[:, 0]
    if return_cache:
        return out, acts
    return out


def mlp_backward(params: MlpParameters, features: FeatureTensor, grad_out, cache=None):
    """Parameter gradients ``(dW list, db list)`` for upstream ``dL/d corrections``."""
    grad_out = np.asarray(grad_out, dtype=float)
    if grad_out.shape != features.mask.shape:
        raise ValueError(f"gradient shape {grad_out.shape} does not match {features.mask.shape}")
    if cache is None:
        _, cache = mlp_forward(params, features, return_cache=True)
    acts = cache
    delta = (params.output_scale * grad_out[features.mask])[:, None]
    dWs = [None] * params.n_layers
    dbs = [None] * params.n_layers
    for k in range(params.n_layers - 1, -1, -1):
        dWs[k] = delta.T @ acts[k]
        dbs[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ params.weights[k]) * (acts[k] > 0.0)
    return dWs, dbs


def predict_corrections(params: MlpParameters, epochs, fixes=None) -> list:
    """Per-epoch correction arrays aligned with each epoch's PRNs."""
    feats = build_features(epochs, fixes)
    corr = mlp_forward(params, feats)
    return [corr[k, ep.prn - 1] for k, ep in enumerate(epochs)]


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(params: MlpParameters, path, extra: dict | None = None) -> None:
    """Write an ``.npz`` container with layer arrays, normalization and metadata."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "shapes": [list(W.shape) for W in params.weights],
        "output_scale": params.output_scale,
        "config_hash": params.config_hash,
        "features": list(FEATURE_NAMES),
    }
    if extra:
        meta["extra"] = extra
    arrays = {"feature_mean": params.feature_mean, "feature_std": params.feature_std}
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{k}"] = W
        arrays[f"b{k}"] = b
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path) -> MlpParameters:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        n = len(meta["shapes"])
        weights = [data[f"W{k}"].copy() for k in range(n)]
        biases = [data[f"b{k}"].copy() for k in range(n)]
        for W, shape in zip(weights, meta["shapes"]):
            if list(W.shape) != shape:
                raise ValueError(f"{path}: layer shape {W.shape} disagrees with header {shape}")
        return MlpParameters(
            weights,
            biases,
            data["feature_mean"].copy(),
            data["feature_std"].copy(),
            float(meta["output_scale"]),
            meta.get("config_hash", ""),
        )
