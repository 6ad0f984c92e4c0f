"""Keypoint regressors: a single-frame model and two temporal encoders.

Pipeline per window of frames::

    keypoints -> encoder MLP -> phi_t -> temporal stage -> Phi_t -> IEF regressor -> params_t

The temporal stage is either a one-layer masked transformer (absent frames
are excluded from attention and keep ``Phi_t = phi_t``) or a stack of
residual temporal convolutions that sees absent frames as zero features.
Forward and backward passes are written by hand; every layer returns a
cache consumed by its ``_bwd`` counterpart.

Parameter vectors use the solver layout ``[r_gl(3), t_gl(3), theta_b(3(J-1)), beta(B)]``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .body_model import BodyModel, FrameParams, fk_batch
from .camera import project_with_jacobian
from .scene_sim import FrameObservation, ObservedSequence, substream
from .solver import SequenceEstimate

FORMAT_VERSION = "1"
MODEL_KINDS = ("single_frame", "transformer", "conv")
LN_EPS = 1e-5
_INIT_STREAM = 11
_SHUFFLE_STREAM = 12
# Upright body seen from the front by a y-down camera: a half turn about x.
REFERENCE_ORIENTATION = np.array([math.pi, 0.0, 0.0])


class NeuralError(RuntimeError):
    pass


class NonFiniteLossError(NeuralError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss in epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


# ------------------------------------------------------------ configuration


@dataclass(frozen=True)
class NetConfig:
    joint_count: int = 17
    shape_dim: int = 2
    d: int = 64
    enc_hidden: int = 64
    heads: int = 4
    ffn_hidden: int = 128
    reg_hidden: int = 128
    ief_steps: int = 3

    def __post_init__(self):
        if self.d % 2 or self.d % self.heads:
            raise ValueError(f"d={self.d} must be even and divisible by heads={self.heads}")
        if min(self.joint_count, self.enc_hidden, self.ffn_hidden, self.reg_hidden, self.ief_steps) < 1:
            raise ValueError("network sizes must be positive")

    @property
    def param_dim(self) -> int:
        return 6 + 3 * (self.joint_count - 1) + self.shape_dim

    @classmethod
    def for_model(cls, model: BodyModel, **kw) -> "NetConfig":
        return cls(joint_count=model.joint_count, shape_dim=model.shape_dim, **kw)


@dataclass(frozen=True)
class TrainConfig:
    window: int = 16
    window_stride: int = 1
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    lambda_2d: float = 1.0
    lambda_smpl: float = 1.0
    lambda_sm: float = 0.1
    seed: int = 0
    freeze_encoder: bool = False

    def __post_init__(self):
        if min(self.window, self.window_stride, self.batch_size) < 1 or self.epochs < 0:
            raise ValueError("window, stride, batch size must be positive and epochs non-negative")
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("invalid optimizer hyperparameters")
        if min(self.lambda_2d, self.lambda_smpl, self.lambda_sm) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ weights


def _shapes(cfg: NetConfig, kind: str) -> dict[str, tuple[int, ...]]:
    d, P = cfg.d, cfg.param_dim
    s = {
        "enc.W1": (3 * cfg.joint_count, cfg.enc_hidden),
        "enc.b1": (cfg.enc_hidden,),
        "enc.W2": (cfg.enc_hidden, d),
        "enc.b2": (d,),
        "reg.W1": (d + P, cfg.reg_hidden),
        "reg.b1": (cfg.reg_hidden,),
        "reg.W2": (cfg.reg_hidden, P),
        "reg.b2": (P,),
        "reg.mean": (P,),
    }
    if kind == "transformer":
        for n in ("q", "k", "v", "o"):
            s[f"tf.W{n}"] = (d, d)
            s[f"tf.b{n}"] = (d,)
        for n in ("ln1", "ln2"):
            s[f"tf.{n}.g"] = (d,)
            s[f"tf.{n}.b"] = (d,)
        s["tf.W1"] = (d, cfg.ffn_hidden)
        s["tf.b1"] = (cfg.ffn_hidden,)
        s["tf.W2"] = (cfg.ffn_hidden, d)
        s["tf.b2"] = (d,)
    elif kind == "conv":
        for blk in (0, 1):
            for n in ("a", "b"):
                s[f"conv{blk}.W{n}"] = (3, d, d)
                s[f"conv{blk}.b{n}"] = (d,)
    elif kind != "single_frame":
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    return s


@dataclass(eq=False)
class TemporalModelWeights:
    """Named parameter arrays of one model; ``reg.mean`` is a fixed starting point, not trained."""

    config: NetConfig
    kind: str
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        expected = _shapes(self.config, self.kind)
        if set(expected) != set(self.arrays):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            raise NeuralError(f"weights mismatch for {self.kind}: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            a = np.asarray(self.arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise NeuralError(f"weight {name!r} has shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                raise NeuralError(f"weight {name!r} has non-finite entries")
            self.arrays[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "TemporalModelWeights":
        return TemporalModelWeights(self.config, self.kind, {k: v.copy() for k, v in self.arrays.items()})

    def trainable(self, freeze_encoder: bool = False) -> list[str]:
        return [
            k for k in self.arrays
            if k != "reg.mean" and not (freeze_encoder and k.startswith("enc."))
        ]

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "config": asdict(self.config),
            "arrays": {
                k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(self.arrays.items())
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TemporalModelWeights":
        version = str(doc.get("format_version"))
        if version != FORMAT_VERSION:
            raise NeuralError(f"weights format_version {version!r} not supported (reader is {FORMAT_VERSION!r})")
        cfg = NetConfig(**doc["config"])
        arrays = {}
        for k, v in doc["arrays"].items():
            data = np.asarray(v["data"], dtype=np.float64)
            if data.size != math.prod(v["shape"]):
                raise NeuralError(f"weight {k!r}: {data.size} values for shape {v['shape']}")
            arrays[k] = data.reshape(v["shape"])
        return cls(cfg, doc["kind"], arrays)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_json()))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "TemporalModelWeights":
        return cls.from_json(json.loads(Path(path).read_text()))


def default_mean_params(cfg: NetConfig, depth: float = 4.5) -> np.ndarray:
    mean = np.zeros(cfg.param_dim)
    mean[0:3] = REFERENCE_ORIENTATION
    mean[5] = depth
    return mean


def _he(rng, shape, fan_in, scale=1.0):
    return scale * math.sqrt(2.0 / fan_in) * rng.standard_normal(shape)


def init_weights(cfg: NetConfig, kind: str, seed: int = 0, mean: np.ndarray | None = None,
                 base: TemporalModelWeights | None = None) -> TemporalModelWeights:
    """Fresh weights; encoder and regressor are copied from ``base`` when given.

    Layers that write into a residual stream (attention output, second FFN
    layer, second convolution of each block) start at zero, so a fresh
    temporal stage is the identity.
    """
    rng = substream(seed, _INIT_STREAM, MODEL_KINDS.index(kind))
    shapes = _shapes(cfg, kind)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if base is not None and name.split(".")[0] in ("enc", "reg"):
            if base.config != cfg:
                raise NeuralError("base weights were built for a different network config")
            arrays[name] = base[name].copy()
        elif name in ("tf.Wo", "tf.W2") or (name.startswith("conv") and name.endswith("Wb")):
            arrays[name] = np.zeros(shape)
        elif name.endswith((".g",)):
            arrays[name] = np.ones(shape)
        elif name == "reg.mean":
            arrays[name] = default_mean_params(cfg) if mean is None else np.array(mean, dtype=np.float64)
        elif name == "reg.W2":
            arrays[name] = _he(rng, shape, shape[0], 0.01)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        elif len(shape) == 3:
            arrays[name] = _he(rng, shape, shape[0] * shape[1])
        else:
            arrays[name] = _he(rng, shape, shape[0])
    return TemporalModelWeights(cfg, kind, arrays)


# ------------------------------------------------------------------ encoder


@dataclass(frozen=True, eq=False)
class FrameFeature:
    phi: np.ndarray
    valid: bool
    t: int


def keypoint_inputs(keypoints: np.ndarray, width, height) -> np.ndarray:
    """``(N, J, 3)`` detections to ``(N, 3J)`` inputs: coordinates in [-1, 1] (0 where unseen) and confidence."""
    kp = np.asarray(keypoints, dtype=np.float64)
    size = np.stack([np.broadcast_to(width, kp.shape[:-2]), np.broadcast_to(height, kp.shape[:-2])], axis=-1)
    seen = kp[..., 2:3] > 0
    uv = np.where(seen, 2.0 * kp[..., :2] / size[..., None, :] - 1.0, 0.0)
    return np.concatenate([uv, kp[..., 2:3]], axis=-1).reshape(*kp.shape[:-2], -1)


def _relu(x):
    return np.maximum(x, 0.0)


def _encoder_fwd(W, x, valid):
    z1 = x @ W["enc.W1"] + W["enc.b1"]
    h1 = _relu(z1)
    phi = h1 @ W["enc.W2"] + W["enc.b2"]
    mask = np.asarray(valid, dtype=bool)[:, None]
    return np.where(mask, phi, 0.0), (x, z1, h1, mask)


def _encoder_bwd(W, cache, dphi, G):
    x, z1, h1, mask = cache
    dphi = np.where(mask, dphi, 0.0)
    G["enc.W2"] += h1.T @ dphi
    G["enc.b2"] += dphi.sum(axis=0)
    dz1 = (dphi @ W["enc.W2"].T) * (z1 > 0)
    G["enc.W1"] += x.T @ dz1
    G["enc.b1"] += dz1.sum(axis=0)


def encode_frames(keypoints, valid, width, height, weights: TemporalModelWeights) -> np.ndarray:
    """Features ``(N, d)``; rows of absent frames are exactly zero."""
    return _encoder_fwd(weights, keypoint_inputs(keypoints, width, height), valid)[0]


def encode_frame(obs: FrameObservation, weights: TemporalModelWeights) -> FrameFeature:
    phi = encode_frames(obs.keypoints[None], [obs.valid], obs.camera.width, obs.camera.height, weights)[0]
    return FrameFeature(phi, bool(obs.valid), int(obs.t))


def positional_encoding(t, d: int) -> np.ndarray:
    """Sinusoidal code: entries ``2k, 2k+1`` are ``sin, cos`` of ``t / 10000^(2k/d)``."""
    if d % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {d}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("positional encoding needs t >= 0")
    freq = 10000.0 ** (-np.arange(0, d, 2) / d)
    ang = t[..., None] * freq
    out = np.empty(t.shape + (d,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# -------------------------------------------------------------- transformer


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv)


def _ln_bwd(cache, g, dy):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


class TemporalOutput(NamedTuple):
    Phi: np.ndarray  # (T, d)
    attention: np.ndarray | None  # (heads, T, T), zero columns at absent keys
    empty: bool  # no valid frame in the window; residual is zero everywhere


def _tf_fwd(W, phi, valid, heads):
    T, d = phi.shape
    m = np.asarray(valid, dtype=bool)
    if not m.any():
        return TemporalOutput(phi.copy(), None, True), None
    dh = d // heads
    mc = m[:, None]
    h = np.where(mc, phi + positional_encoding(np.arange(T), d), 0.0)
    a, ln1 = _ln_fwd(h, W["tf.ln1.g"], W["tf.ln1.b"])

    def split(x):
        return x.reshape(T, heads, dh).transpose(1, 0, 2)

    Q = split(a @ W["tf.Wq"] + W["tf.bq"])
    K = split(a @ W["tf.Wk"] + W["tf.bk"])
    V = split(np.where(mc, a @ W["tf.Wv"] + W["tf.bv"], 0.0))
    S = (Q @ K.transpose(0, 2, 1)) / math.sqrt(dh)
    S = np.where(m[None, None, :], S, -np.inf)
    S = S - S.max(axis=-1, keepdims=True)
    E = np.exp(S)
    P = E / E.sum(axis=-1, keepdims=True)
    O = (P @ V).transpose(1, 0, 2).reshape(T, d)
    attn = np.where(mc, O @ W["tf.Wo"] + W["tf.bo"], 0.0)
    h2 = h + attn
    f, ln2 = _ln_fwd(h2, W["tf.ln2.g"], W["tf.ln2.b"])
    z = f @ W["tf.W1"] + W["tf.b1"]
    r = _relu(z)
    ffn = r @ W["tf.W2"] + W["tf.b2"]
    delta = np.where(mc, attn + ffn, 0.0)
    cache = (mc, heads, a, ln1, Q, K, V, P, O, ln2, f, z, r)
    return TemporalOutput(phi + delta, P, False), cache


def _tf_bwd(W, cache, dPhi, G):
    if cache is None:
        return dPhi.copy()
    mc, heads, a, ln1, Q, K, V, P, O, ln2, f, z, r = cache
    T, d = dPhi.shape
    dh = d // heads
    ddelta = np.where(mc, dPhi, 0.0)
    G["tf.W2"] += r.T @ ddelta
    G["tf.b2"] += ddelta.sum(axis=0)
    dz = (ddelta @ W["tf.W2"].T) * (z > 0)
    G["tf.W1"] += f.T @ dz
    G["tf.b1"] += dz.sum(axis=0)
    dh2, dg, db = _ln_bwd(ln2, W["tf.ln2.g"], dz @ W["tf.W1"].T)
    G["tf.ln2.g"] += dg
    G["tf.ln2.b"] += db
    dattn = np.where(mc, ddelta + dh2, 0.0)
    G["tf.Wo"] += O.T @ dattn
    G["tf.bo"] += dattn.sum(axis=0)
    dO = (dattn @ W["tf.Wo"].T).reshape(T, heads, dh).transpose(1, 0, 2)
    dP = dO @ V.transpose(0, 2, 1)
    dV = P.transpose(0, 2, 1) @ dO
    dS = P * (dP - np.sum(P * dP, axis=-1, keepdims=True)) / math.sqrt(dh)
    dQ = dS @ K
    dK = dS.transpose(0, 2, 1) @ Q

    def merge(x):
        return x.transpose(1, 0, 2).reshape(T, d)

    dQ, dK, dV = merge(dQ), merge(dK), np.where(mc, merge(dV), 0.0)
    da = np.zeros_like(a)
    for n, dx in (("q", dQ), ("k", dK), ("v", dV)):
        G[f"tf.W{n}"] += a.T @ dx
        G[f"tf.b{n}"] += dx.sum(axis=0)
        da += dx @ W[f"tf.W{n}"].T
    dh_, dg, db = _ln_bwd(ln1, W["tf.ln1.g"], da)
    G["tf.ln1.g"] += dg
    G["tf.ln1.b"] += db
    return dPhi + np.where(mc, dh2 + dh_, 0.0)


def transformer_forward(features, weights: TemporalModelWeights, valid=None) -> TemporalOutput:
    """Masked self-attention over one window.

    ``features`` is a list of :class:`FrameFeature` or a ``(T, d)`` array
    with ``valid`` given separately. Outputs at valid frames do not depend
    on the feature values of absent frames.
    """
    phi, valid = _stack_features(features, valid)
    return _tf_fwd(weights, phi, valid, weights.config.heads)[0]


def _stack_features(features, valid):
    if valid is None:
        phi = np.stack([f.phi for f in features])
        valid = np.array([f.valid for f in features], dtype=bool)
    else:
        phi = np.asarray(features, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool)
    if phi.ndim != 2 or len(phi) < 1:
        raise ValueError("need a non-empty window of features")
    return phi, valid


# --------------------------------------------------------------------- conv


def _conv_fwd1(x, Wt, b):
    T = len(x)
    xp = np.pad(x, ((1, 1), (0, 0)))
    return xp[0:T] @ Wt[0] + xp[1 : T + 1] @ Wt[1] + xp[2 : T + 2] @ Wt[2] + b, xp


def _conv_bwd1(xp, Wt, dy, gW, gb):
    T = len(dy)
    dxp = np.zeros_like(xp)
    for k in range(3):
        gW[k] += xp[k : k + T].T @ dy
        dxp[k : k + T] += dy @ Wt[k].T
    gb += dy.sum(axis=0)
    return dxp[1 : T + 1]


def _conv_fwd(W, phi):
    h = phi
    caches = []
    for blk in (0, 1):
        y1, xp1 = _conv_fwd1(h, W[f"conv{blk}.Wa"], W[f"conv{blk}.ba"])
        r = _relu(y1)
        y2, xp2 = _conv_fwd1(r, W[f"conv{blk}.Wb"], W[f"conv{blk}.bb"])
        caches.append((xp1, y1, xp2))
        h = h + y2
    return h, caches


def _conv_bwd(W, caches, dPhi, G):
    dh = dPhi
    for blk in (1, 0):
        xp1, y1, xp2 = caches[blk]
        dr = _conv_bwd1(xp2, W[f"conv{blk}.Wb"], dh, G[f"conv{blk}.Wb"], G[f"conv{blk}.bb"])
        dy1 = dr * (y1 > 0)
        dh = dh + _conv_bwd1(xp1, W[f"conv{blk}.Wa"], dy1, G[f"conv{blk}.Wa"], G[f"conv{blk}.ba"])
    return dh


def conv_forward(features, weights: TemporalModelWeights, valid=None) -> np.ndarray:
    """Two residual blocks of kernel-3 temporal convolutions with zero padding at the window edges.

    Absent frames are not masked here: the encoder already hands them over
    as zero features, and the convolution treats those zeros as data.
    """
    phi, _ = _stack_features(features, valid)
    return _conv_fwd(weights, phi)[0]


# ---------------------------------------------------------------- regressor


def _reg_fwd(W, Phi, steps):
    theta = np.broadcast_to(W["reg.mean"], (len(Phi), W["reg.mean"].size)).copy()
    caches = []
    for _ in range(steps):
        inp = np.concatenate([Phi, theta], axis=1)
        z = inp @ W["reg.W1"] + W["reg.b1"]
        r = _relu(z)
        theta = theta + r @ W["reg.W2"] + W["reg.b2"]
        caches.append((inp, z, r))
    return theta, caches


def _reg_bwd(W, caches, dtheta, G):
    d = W["reg.W1"].shape[0] - W["reg.mean"].size
    dPhi = np.zeros((len(dtheta), d))
    for inp, z, r in reversed(caches):
        G["reg.W2"] += r.T @ dtheta
        G["reg.b2"] += dtheta.sum(axis=0)
        dz = (dtheta @ W["reg.W2"].T) * (z > 0)
        G["reg.W1"] += inp.T @ dz
        G["reg.b1"] += dz.sum(axis=0)
        dinp = dz @ W["reg.W1"].T
        dPhi += dinp[:, :d]
        dtheta = dtheta + dinp[:, d:]
    return dPhi


def regress_params(Phi, weights: TemporalModelWeights, steps: int | None = None) -> np.ndarray:
    """Iterative error feedback from the mean parameters: ``(N, d) -> (N, param_dim)``."""
    Phi = np.atleast_2d(np.asarray(Phi, dtype=np.float64))
    if Phi.shape[1] != weights.config.d:
        raise ValueError(f"feature dimension {Phi.shape[1]} != {weights.config.d}")
    return _reg_fwd(weights, Phi, weights.config.ief_steps if steps is None else steps)[0]


def split_params(theta: np.ndarray, cfg: NetConfig) -> tuple[list[FrameParams], np.ndarray]:
    """Per-frame rigid and body parameters plus per-frame shape ``(N, B)``."""
    B = cfg.shape_dim
    frames = [FrameParams.from_vector(row[:-B]) for row in theta]
    return frames, theta[:, -B:].copy()


# ------------------------------------------------------------ full forward


class WindowInput(NamedTuple):
    x: np.ndarray  # (T, 3J) encoder inputs
    valid: np.ndarray  # (T,) bool
    keypoints: np.ndarray  # (T, J, 3) detections in pixels
    focal: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    target: np.ndarray | None  # (T, P) pseudo ground truth
    t: np.ndarray  # frame indices, used for gap lengths


def _forward(W, win: WindowInput, phi=None):
    """Window prediction and all caches; ``phi`` skips the encoder when precomputed."""
    enc_cache = None
    if phi is None:
        phi, enc_cache = _encoder_fwd(W, win.x, win.valid)
    if W.kind == "transformer":
        out, t_cache = _tf_fwd(W, phi, win.valid, W.config.heads)
        Phi = out.Phi
    elif W.kind == "conv":
        Phi, t_cache = _conv_fwd(W, phi)
    else:
        Phi, t_cache = phi, None
    theta, r_cache = _reg_fwd(W, Phi, W.config.ief_steps)
    return theta, (enc_cache, t_cache, r_cache)


def _backward(W, caches, dtheta, G):
    enc_cache, t_cache, r_cache = caches
    dPhi = _reg_bwd(W, r_cache, dtheta, G)
    if W.kind == "transformer":
        dphi = _tf_bwd(W, t_cache, dPhi, G)
    elif W.kind == "conv":
        dphi = _conv_bwd(W, t_cache, dPhi, G)
    else:
        dphi = dPhi
    if enc_cache is not None:
        _encoder_bwd(W, enc_cache, dphi, G)


def predict_window(weights: TemporalModelWeights, win: WindowInput) -> np.ndarray:
    return _forward(weights, win)[0]


# ------------------------------------------------------------------- losses


class LossTerms(NamedTuple):
    l2d: float
    lsmpl: float
    lsm_joint: float
    lsm_param: float
    total: float
    grad: np.ndarray  # d total / d predictions, (T, P)

    @property
    def lsm(self) -> float:
        return self.lsm_joint + self.lsm_param


def _smpl_columns(J: int, B: int) -> np.ndarray:
    nth = 3 * (J - 1)
    return np.concatenate([np.arange(0, 3), np.arange(6, 6 + nth + B)])


def smoothing_pairs_window(valid, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Consecutive valid frames with weight ``1 / gap``."""
    idx = np.flatnonzero(np.asarray(valid, dtype=bool))
    i, k = idx[:-1], idx[1:]
    t = np.asarray(t)
    return i, k, 1.0 / (t[k] - t[i])


def compute_losses(pred, pseudo_gt, keypoints, focal, cx, cy, valid, model: BodyModel,
                   lambdas=(1.0, 1.0, 0.1), t=None, smooth: bool = True) -> LossTerms:
    """Masked training losses of one window and their gradient w.r.t. ``pred``.

    ``l2d``: confidence-weighted L1 pixel error of projected joints against
    detections, averaged over valid frames. ``lsmpl``: squared error of
    orientation, body pose and shape against pseudo ground truth, averaged
    over valid frames (translation is supervised through ``l2d`` only).
    Smoothness terms average body-frame joint and body-pose differences over
    consecutive valid pairs.
    """
    pred = np.asarray(pred, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    vi = np.flatnonzero(valid)
    if vi.size == 0:
        raise NeuralError("no valid frames")
    T, P = pred.shape
    J, B = model.joint_count, model.shape_dim
    nth = 3 * (J - 1)
    lam2d, lamsmpl, lamsm = lambdas
    t = np.arange(T) if t is None else np.asarray(t)
    need_jac = True
    p = pred[vi]
    fk = fk_batch(model, p[:, 0:3], p[:, 3:6], p[:, 6 : 6 + nth].reshape(-1, J - 1, 3), p[:, -B:], need_jac)
    grad = np.zeros_like(pred)
    n = vi.size

    kp = np.asarray(keypoints, dtype=np.float64)[vi]
    f_ = np.asarray(focal, dtype=np.float64)[vi][:, None]
    uv, Jp = project_with_jacobian(fk.X, f_, np.asarray(cx, dtype=np.float64)[vi][:, None],
                                   np.asarray(cy, dtype=np.float64)[vi][:, None])
    res = uv - kp[..., :2]
    conf = kp[..., 2]
    l2d = float(np.sum(conf[..., None] * np.abs(res))) / n
    d_uv = conf[..., None] * np.sign(res) / n
    dX = np.einsum("nja,njab->njb", d_uv, Jp)
    grad[vi] += lam2d * np.einsum("njb,njbp->np", dX, fk.jac)

    cols = _smpl_columns(J, B)
    diff = pred[vi][:, cols] - np.asarray(pseudo_gt, dtype=np.float64)[vi][:, cols]
    lsmpl = float(np.sum(diff * diff)) / n
    grad[vi[:, None], cols] += lamsmpl * 2.0 * diff / n

    lsm_j = lsm_p = 0.0
    if smooth:
        i, k, w = smoothing_pairs_window(valid, t)
        if i.size:
            pos = np.empty(T, dtype=np.int64)
            pos[vi] = np.arange(n)
            pi, pk = pos[i], pos[k]
            D = fk.X_body[pi] - fk.X_body[pk]
            npair = i.size
            lsm_j = float(np.sum(w[:, None, None] * D * D)) / npair
            gD = (2.0 * w / npair)[:, None, None] * D
            gi = np.einsum("nja,njap->np", gD, fk.jac_body[pi])
            gk = np.einsum("nja,njap->np", gD, fk.jac_body[pk])
            np.add.at(grad[:, 6:], i, lamsm * gi)
            np.add.at(grad[:, 6:], k, -lamsm * gk)
            dth = pred[i, 6 : 6 + nth] - pred[k, 6 : 6 + nth]
            lsm_p = float(np.sum(w[:, None] * dth * dth)) / npair
            gp = lamsm * (2.0 * w / npair)[:, None] * dth
            np.add.at(grad[:, 6 : 6 + nth], i, gp)
            np.add.at(grad[:, 6 : 6 + nth], k, -gp)
    total = lam2d * l2d + lamsmpl * lsmpl + lamsm * (lsm_j + lsm_p)
    return LossTerms(l2d, lsmpl, lsm_j, lsm_p, total, grad)


def window_loss_and_grad(weights: TemporalModelWeights, win: WindowInput, model: BodyModel,
                         cfg: TrainConfig, phi=None, grads: dict | None = None) -> LossTerms:
    """Losses of one window; parameter gradients are accumulated into ``grads`` when given."""
    theta, caches = _forward(weights, win, phi)
    terms = compute_losses(
        theta, win.target, win.keypoints, win.focal, win.cx, win.cy, win.valid, model,
        (cfg.lambda_2d, cfg.lambda_smpl, cfg.lambda_sm), win.t, smooth=weights.kind != "single_frame",
    )
    if grads is not None:
        _backward(weights, caches, terms.grad, grads)
    return terms


# ----------------------------------------------------------------- training data


def unwrap_orientation(r: np.ndarray, ref: np.ndarray = REFERENCE_ORIENTATION) -> np.ndarray:
    """Of the two axis-angle vectors ``r`` and ``r - 2 pi r/|r|`` (same rotation), the one closer to ``ref``."""
    r = np.asarray(r, dtype=np.float64)
    n = np.linalg.norm(r, axis=-1, keepdims=True)
    alt = np.where(n > 0, r - 2.0 * math.pi * r / np.where(n > 0, n, 1.0), r)
    closer = np.linalg.norm(alt - ref, axis=-1) < np.linalg.norm(r - ref, axis=-1)
    return np.where(closer[..., None], alt, r)


def targets_from_estimate(est: SequenceEstimate) -> np.ndarray:
    """Pseudo ground truth rows ``(T, P)`` with orientations unwrapped toward the reference."""
    rows = []
    for fr in est.frames:
        rows.append(np.concatenate([unwrap_orientation(fr.r_gl), fr.t_gl, fr.theta_b.ravel(), est.beta]))
    return np.stack(rows)


def _sequence_window_input(seq: ObservedSequence, target, lo: int, hi: int) -> WindowInput:
    a = seq.arrays
    width = np.array([f.camera.width for f in seq.frames[lo:hi]], dtype=np.float64)
    height = np.array([f.camera.height for f in seq.frames[lo:hi]], dtype=np.float64)
    kp = a.keypoints[lo:hi]
    return WindowInput(
        keypoint_inputs(kp, width, height),
        a.valid[lo:hi].astype(bool),
        kp,
        a.focal[lo:hi],
        a.cx[lo:hi],
        a.cy[lo:hi],
        None if target is None else target[lo:hi],
        a.t[lo:hi],
    )


def window_bounds(T: int, window: int, stride: int) -> list[tuple[int, int]]:
    """Start/stop pairs covering ``[0, T)``; the last window is aligned to the end."""
    if T <= window:
        return [(0, T)]
    starts = list(range(0, T - window + 1, stride))
    if starts[-1] != T - window:
        starts.append(T - window)
    return [(s, s + window) for s in starts]


def make_windows(seqs: Sequence[ObservedSequence], targets: Sequence[np.ndarray],
                 window: int, stride: int) -> list[WindowInput]:
    out = []
    for seq, tgt in zip(seqs, targets):
        for lo, hi in window_bounds(len(seq), window, stride):
            win = _sequence_window_input(seq, tgt, lo, hi)
            if win.valid.any():
                out.append(win)
    return out


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainResult:
    weights: TemporalModelWeights
    curve: tuple[dict, ...]  # per epoch: epoch, l2d, lsmpl, lsm, total


def _mean_target(windows: Sequence[WindowInput]) -> np.ndarray:
    rows = np.concatenate([w.target[w.valid] for w in windows])
    return rows.mean(axis=0)


def train(
    seqs: Sequence[ObservedSequence],
    targets: Sequence[np.ndarray],
    kind: str,
    cfg: TrainConfig,
    model: BodyModel,
    init: TemporalModelWeights | None = None,
    net: NetConfig | None = None,
) -> TrainResult:
    """Adam on mini-batches of windows; gradients are averaged over a batch in a fixed order.

    ``init`` supplies the starting weights; a single-frame ``init`` for a
    temporal ``kind`` provides the encoder and regressor while the temporal
    stage is freshly initialized. Without ``init`` the regressor starts from
    the mean pseudo-ground-truth parameters.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    # frames are independent for the single-frame model: tile without overlap
    stride = cfg.window if kind == "single_frame" else cfg.window_stride
    windows = make_windows(seqs, targets, cfg.window, stride)
    if not windows:
        raise NeuralError("no training windows with valid frames")
    if init is None:
        net = net or NetConfig.for_model(model)
        W = init_weights(net, kind, cfg.seed, mean=_mean_target(windows))
    elif init.kind != kind:
        W = init_weights(init.config, kind, cfg.seed, base=init)
    else:
        W = init.copy()
    batch = cfg.batch_size
    names = W.trainable(cfg.freeze_encoder)
    m = {k: np.zeros_like(W[k]) for k in names}
    v = {k: np.zeros_like(W[k]) for k in names}
    phis = None
    if cfg.freeze_encoder:
        phis = [_encoder_fwd(W, win.x, win.valid)[0] for win in windows]
    step = 0
    curve = []
    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, _SHUFFLE_STREAM, epoch).permutation(len(windows))
        sums = np.zeros(4)
        for b, lo in enumerate(range(0, len(order), batch)):
            idx = order[lo : lo + batch]
            G = {k: np.zeros_like(W[k]) for k in W.arrays}
            for i in idx:
                terms = window_loss_and_grad(W, windows[i], model, cfg, None if phis is None else phis[i], G)
                if not np.isfinite(terms.total):
                    raise NonFiniteLossError(epoch, b)
                sums += (terms.l2d, terms.lsmpl, terms.lsm, terms.total)
            step += 1
            c1 = 1.0 - cfg.beta1**step
            c2 = 1.0 - cfg.beta2**step
            for k in names:
                g = G[k] / len(idx)
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g
                W.arrays[k] = W.arrays[k] - cfg.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + cfg.adam_eps)
        mean = sums / len(windows)
        curve.append({"epoch": epoch, "l2d": mean[0], "lsmpl": mean[1], "lsm": mean[2], "total": mean[3]})
    return TrainResult(W, tuple(curve))


def write_loss_curve(curve: Sequence[dict], path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "l2d", "lsmpl", "lsm", "total"])
        for row in curve:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in ("l2d", "lsmpl", "lsm", "total")])


def read_loss_curve(path) -> list[dict]:
    with Path(path).open() as fh:
        return [
            {"epoch": int(r["epoch"]), **{k: float(r[k]) for k in ("l2d", "lsmpl", "lsm", "total")}}
            for r in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------- inference


def predict_sequence(seq: ObservedSequence, weights: TemporalModelWeights, model: BodyModel,
                     window: int = 16) -> SequenceEstimate:
    """Per-frame parameters over consecutive non-overlapping windows.

    Shape is averaged over valid frames. Absent frames get the regressor's
    output for a zero feature and are flagged unconverged.
    """
    T = len(seq)
    theta = np.empty((T, weights.config.param_dim))
    for lo in range(0, T, window):
        hi = min(lo + window, T)
        theta[lo:hi] = predict_window(weights, _sequence_window_input(seq, None, lo, hi))
    frames, betas = split_params(theta, weights.config)
    valid = seq.arrays.valid.astype(bool)
    beta = betas[valid].mean(axis=0) if valid.any() else betas.mean(axis=0)
    return SequenceEstimate(beta, tuple(frames), valid.copy())
