"""Synthetic multi-shot observations of a moving body.

World frame is y-up. The subject's pelvis stays at the world origin and the
world motion is a smooth sequence of (global orientation, body pose). Each
shot views that motion from its own static camera, so camera-frame
quantities jump at shot boundaries while the body-frame pose does not.

Randomness: every stream is ``np.random.default_rng(mix_seed(seed, ...))``
where :func:`mix_seed` is a splitmix64 fold of the integer keys.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .body_model import (
    BodyModel,
    FrameParams,
    forward_kinematics,
    geodesic_angle,
    pose_joints,
    rodrigues,
    rotation_log,
)
from .camera import Camera, project

FORMAT_VERSION = "1"
LONG_TRACKLET_FRAMES = 20
TRACKLET_MODES = ("single_shot", "continuous_identity", "multi_shot")

_MASK64 = (1 << 64) - 1

# Axis-angle boxes (radians) for each joint's own rotation; unlisted joints
# (leaves) stay at zero.
JOINT_LIMITS = {
    "r_hip": ((-0.9, 0.3), (-0.3, 0.3), (-0.3, 0.1)),
    "l_hip": ((-0.9, 0.3), (-0.3, 0.3), (-0.1, 0.3)),
    "r_knee": ((0.0, 1.2), (-0.05, 0.05), (-0.05, 0.05)),
    "l_knee": ((0.0, 1.2), (-0.05, 0.05), (-0.05, 0.05)),
    "spine": ((-0.3, 0.3), (-0.4, 0.4), (-0.2, 0.2)),
    "thorax": ((-0.2, 0.2), (-0.3, 0.3), (-0.2, 0.2)),
    "neck": ((-0.4, 0.4), (-0.5, 0.5), (-0.3, 0.3)),
    "l_shoulder": ((-1.2, 0.5), (-0.5, 0.5), (0.0, 1.2)),
    "r_shoulder": ((-1.2, 0.5), (-0.5, 0.5), (-1.2, 0.0)),
    "l_elbow": ((-1.5, 0.0), (-0.1, 0.1), (-0.1, 0.1)),
    "r_elbow": ((-1.5, 0.0), (-0.1, 0.1), (-0.1, 0.1)),
}
WORLD_YAW_RANGE = (-0.6, 0.6)
WORLD_TILT = 0.1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a 64-bit seed, one splitmix64 round per key."""
    h = splitmix64(int(seed) & _MASK64)
    for k in keys:
        h = splitmix64(h ^ (int(k) & _MASK64))
    return h


def substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(mix_seed(seed, *keys))


# stream tags
_MOTION, _SHOTS, _OBS = 1, 2, 3


@dataclass(frozen=True)
class MotionConfig:
    frame_count: int = 64
    keyframe_spacing: int = 8
    max_joint_speed: float = 0.15
    beta_range: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.frame_count < 2:
            raise ValueError("frame_count must be >= 2")
        if self.keyframe_spacing < 2:
            raise ValueError("keyframe_spacing must be >= 2")
        if self.max_joint_speed <= 0:
            raise ValueError("max_joint_speed must be positive")


@dataclass(frozen=True)
class ShotConfig:
    mean_shot_length: float = 10.0
    camera_distance_range: tuple[float, float] = (3.0, 6.0)
    truncation_prob: float = 0.4
    missing_prob: float = 0.1
    closeup_distance_range: tuple[float, float] = (0.6, 0.8)
    azimuth_range: tuple[float, float] = (-1.75, 1.75)
    elevation_range: tuple[float, float] = (-0.1, 0.15)
    closeup_elevation_range: tuple[float, float] = (-0.1, 0.05)

    def __post_init__(self):
        for name in ("truncation_prob", "missing_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.mean_shot_length < 1:
            raise ValueError("mean_shot_length must be >= 1")


@dataclass(frozen=True, eq=False)
class Motion:
    """World-frame ground truth: body pose, global orientation, shape."""

    theta_b: np.ndarray  # (T, J-1, 3)
    r_world: np.ndarray  # (T, 3)
    beta: np.ndarray  # (B,)

    @property
    def frame_count(self) -> int:
        return int(self.theta_b.shape[0])


@dataclass(frozen=True, eq=False)
class Shot:
    shot_id: int
    start: int
    stop: int  # exclusive
    camera: Camera
    R_cw: np.ndarray  # world -> camera rotation
    center: np.ndarray  # camera center in world
    closeup: bool

    @property
    def length(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True, eq=False)
class FrameGT:
    params: FrameParams
    x3d: np.ndarray  # (J, 3) camera frame

    def __eq__(self, other):
        if not isinstance(other, FrameGT):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.x3d, other.x3d)


@dataclass(frozen=True, eq=False)
class FrameObservation:
    t: int
    shot_id: int
    valid: int
    keypoints: np.ndarray  # (J, 3): u, v, confidence
    camera: Camera
    gt: FrameGT | None = None

    def __eq__(self, other):
        if not isinstance(other, FrameObservation):
            return NotImplemented
        return (
            self.t == other.t
            and self.shot_id == other.shot_id
            and self.valid == other.valid
            and self.camera == other.camera
            and np.array_equal(self.keypoints, other.keypoints)
            and self.gt == other.gt
        )


@dataclass(frozen=True, eq=False)
class SequenceArrays:
    t: np.ndarray
    shot_id: np.ndarray
    valid: np.ndarray
    keypoints: np.ndarray  # (T, J, 3)
    focal: np.ndarray
    cx: np.ndarray
    cy: np.ndarray


@dataclass(frozen=True, eq=False)
class ObservedSequence:
    identity: int
    frames: tuple[FrameObservation, ...]
    beta_gt: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        ts = [f.t for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("frame indices must be strictly increasing")
        shots = [f.shot_id for f in self.frames]
        if any(b < a for a, b in zip(shots, shots[1:])):
            raise ValueError("shot ids must be non-decreasing")

    def __len__(self) -> int:
        return len(self.frames)

    @cached_property
    def arrays(self) -> SequenceArrays:
        fr = self.frames
        return SequenceArrays(
            t=np.array([f.t for f in fr], dtype=np.int64),
            shot_id=np.array([f.shot_id for f in fr], dtype=np.int64),
            valid=np.array([f.valid for f in fr], dtype=np.int64),
            keypoints=np.stack([f.keypoints for f in fr]),
            focal=np.array([f.camera.focal for f in fr]),
            cx=np.array([f.camera.cx for f in fr]),
            cy=np.array([f.camera.cy for f in fr]),
        )

    @property
    def has_gt(self) -> bool:
        return all(f.gt is not None for f in self.frames)

    def boundaries(self) -> list[int]:
        """Positions ``i`` such that frames ``i`` and ``i + 1`` straddle a shot change."""
        s = self.arrays.shot_id
        return [int(i) for i in np.flatnonzero(s[1:] != s[:-1])]

    def __eq__(self, other):
        if not isinstance(other, ObservedSequence):
            return NotImplemented
        same_beta = (self.beta_gt is None and other.beta_gt is None) or (
            self.beta_gt is not None
            and other.beta_gt is not None
            and np.array_equal(self.beta_gt, other.beta_gt)
        )
        return self.identity == other.identity and same_beta and self.frames == other.frames


@dataclass(frozen=True)
class SequenceDataset:
    sequences: tuple[ObservedSequence, ...]
    config: dict = field(default_factory=dict)
    format_version: str = FORMAT_VERSION


# ---------------------------------------------------------------- motion


def _limit_boxes(model: BodyModel) -> tuple[np.ndarray, np.ndarray]:
    lo = np.zeros((model.joint_count - 1, 3))
    hi = np.zeros((model.joint_count - 1, 3))
    for name, box in JOINT_LIMITS.items():
        if name in model.joint_names:
            j = model.joint_index(name) - 1
            lo[j] = [b[0] for b in box]
            hi[j] = [b[1] for b in box]
    return lo, hi


def _slerp(R0: np.ndarray, R1: np.ndarray, s) -> np.ndarray:
    """Geodesic interpolation ``R0 exp(s log(R0^T R1))`` with broadcastable ``s``."""
    rel = rotation_log(np.swapaxes(R0, -1, -2) @ R1)
    s = np.asarray(s, dtype=np.float64)
    return R0 @ rodrigues(rel * s[..., None])


def _cap_step(R_prev: np.ndarray, R_new: np.ndarray, budget: float) -> np.ndarray:
    """Pull ``R_new`` toward ``R_prev`` so their geodesic distance is at most ``budget``."""
    ang = geodesic_angle(R_prev, R_new)
    frac = np.where(ang > budget, budget / np.maximum(ang, 1e-300), 1.0)
    return _slerp(R_prev, R_new, frac)


def sample_motion(model: BodyModel, cfg: MotionConfig, sequence_index: int = 0) -> Motion:
    """Smooth keyframed motion within joint limits.

    Keyframes are sampled uniformly inside the joint limit boxes, capped so
    consecutive keyframes are at most ``max_joint_speed * spacing`` apart,
    and interpolated per joint along the geodesic.
    """
    rng = substream(cfg.rng_seed, _MOTION, sequence_index)
    T, s = cfg.frame_count, cfg.keyframe_spacing
    n_key = math.ceil((T - 1) / s) + 1
    lo, hi = _limit_boxes(model)
    budget = cfg.max_joint_speed * s * (1.0 - 1e-9)

    beta = rng.uniform(-cfg.beta_range, cfg.beta_range, size=model.shape_dim)
    key_body = rng.uniform(lo, hi, size=(n_key,) + lo.shape)
    yaw = rng.uniform(*WORLD_YAW_RANGE, size=n_key)
    tilt = rng.uniform(-WORLD_TILT, WORLD_TILT, size=(n_key, 2))
    key_world = np.stack([tilt[:, 0], yaw, tilt[:, 1]], axis=-1)

    Rb = rodrigues(key_body)
    Rw = rodrigues(key_world)
    for k in range(1, n_key):
        Rb[k] = _cap_step(Rb[k - 1], Rb[k], budget)
        Rw[k] = _cap_step(Rw[k - 1], Rw[k], budget)

    t = np.arange(T)
    seg = np.minimum(t // s, n_key - 2)
    frac = (t - seg * s) / s
    body = _slerp(Rb[seg], Rb[seg + 1], frac[:, None])
    world = _slerp(Rw[seg], Rw[seg + 1], frac)
    return Motion(theta_b=rotation_log(body), r_world=rotation_log(world), beta=beta)


# ----------------------------------------------------------------- shots


def _look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World->camera rotation for a camera at ``center`` looking at ``target`` (y-up world)."""
    f = target - center
    f = f / np.linalg.norm(f)
    right = np.cross(f, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.stack([right, down, f])


def shot_lengths(T: int, mean_length: float, rng: np.random.Generator) -> list[int]:
    """Geometric shot lengths (clipped to >= 2) covering ``T`` frames."""
    if mean_length >= T or T < 4:
        return [T]
    lengths: list[int] = []
    remaining = T
    while remaining > 0:
        L = max(2, int(rng.geometric(1.0 / mean_length)))
        if L >= remaining - 1:
            L = remaining
        lengths.append(L)
        remaining -= L
    return lengths


def make_shot(
    shot_id: int,
    start: int,
    stop: int,
    closeup: bool,
    cfg: ShotConfig,
    rng: np.random.Generator,
    camera: Camera | None = None,
) -> Shot:
    """Place a static camera on a sphere around the subject.

    Wide shots frame the whole body; close-ups aim at the upper chest from
    well under a meter so hips and legs fall below the image.
    """
    cam = camera or Camera()
    cam = Camera(cam.focal, cam.cx, cam.cy, cam.width, cam.height, shot_id)
    az = rng.uniform(*cfg.azimuth_range)
    if closeup:
        dist = rng.uniform(*cfg.closeup_distance_range)
        el = rng.uniform(*cfg.closeup_elevation_range)
        target = np.array([0.0, 0.55, 0.0])
    else:
        dist = rng.uniform(*cfg.camera_distance_range)
        el = rng.uniform(*cfg.elevation_range)
        target = np.array([0.0, 0.1, 0.0])
    direction = np.array([math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])
    center = target + dist * direction
    return Shot(shot_id, start, stop, cam, _look_at(center, target), center, closeup)


def sample_shots(T: int, cfg: ShotConfig, seed: int, sequence_index: int = 0) -> list[Shot]:
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = substream(seed, _SHOTS, sequence_index)
    shots = []
    start = 0
    for i, L in enumerate(shot_lengths(T, cfg.mean_shot_length, rng)):
        closeup = bool(rng.random() < cfg.truncation_prob)
        shots.append(make_shot(i, start, start + L, closeup, cfg, rng))
        start += L
    return shots


# ----------------------------------------------------------- observations


def camera_frame_params(motion: Motion, shot: Shot, t: int) -> FrameParams:
    R = shot.R_cw @ rodrigues(motion.r_world[t])
    return FrameParams(rotation_log(R), -shot.R_cw @ shot.center, motion.theta_b[t])


def synthesize_observations(
    model: BodyModel,
    motion: Motion,
    shots: Sequence[Shot],
    noise_sigma_px: float = 2.0,
    missing_prob: float = 0.1,
    seed: int = 0,
    identity: int = 0,
) -> ObservedSequence:
    T = motion.frame_count
    if sum(s.length for s in shots) != T:
        raise ValueError("shot schedule does not cover the motion")
    rng = substream(seed, _OBS, identity)
    X_b = forward_kinematics(model, motion.theta_b, motion.beta)
    frames = []
    for shot in shots:
        for t in range(shot.start, shot.stop):
            params = camera_frame_params(motion, shot, t)
            X = pose_joints(X_b[t], params.r_gl, params.t_gl)
            uv, visible = project(X, shot.camera)
            noise = rng.normal(0.0, 1.0, size=uv.shape) * noise_sigma_px
            conf = rng.uniform(0.5, 1.0, size=model.joint_count)
            missing = rng.random() < missing_prob
            conf = np.where(visible, conf, 0.0)
            kp = np.concatenate([uv + noise, conf[:, None]], axis=1)
            if missing:
                kp = np.zeros_like(kp)
            frames.append(
                FrameObservation(
                    t=t,
                    shot_id=shot.shot_id,
                    valid=0 if missing else 1,
                    keypoints=kp,
                    camera=shot.camera,
                    gt=FrameGT(params, X),
                )
            )
    return ObservedSequence(identity, tuple(frames), motion.beta.copy())


def generate_dataset(
    model: BodyModel,
    n_sequences: int,
    motion_cfg: MotionConfig,
    shot_cfg: ShotConfig,
    noise_sigma_px: float = 2.0,
) -> SequenceDataset:
    """Independent sequences; sequence ``i`` depends only on (seed, i)."""
    seed = motion_cfg.rng_seed
    seqs = []
    for i in range(n_sequences):
        seqs.append(generate_sequence(model, i, motion_cfg, shot_cfg, noise_sigma_px))
    config = {
        "motion": asdict(motion_cfg),
        "shots": asdict(shot_cfg),
        "noise_sigma_px": noise_sigma_px,
        "n_sequences": n_sequences,
        "seed": seed,
    }
    # normalize tuples to lists so the snapshot survives a JSON round trip
    return SequenceDataset(tuple(seqs), json.loads(json.dumps(config)))


def generate_sequence(
    model: BodyModel,
    index: int,
    motion_cfg: MotionConfig,
    shot_cfg: ShotConfig,
    noise_sigma_px: float = 2.0,
) -> ObservedSequence:
    seed = motion_cfg.rng_seed
    motion = sample_motion(model, motion_cfg, index)
    shots = sample_shots(motion.frame_count, shot_cfg, seed, index)
    return synthesize_observations(
        model, motion, shots, noise_sigma_px, shot_cfg.missing_prob, seed, identity=index
    )


def two_shot_scene(
    model: BodyModel,
    seed: int,
    frames_per_shot: int = 8,
    truncated_shot: int = 1,
    noise_sigma_px: float = 2.0,
    missing_prob: float = 0.0,
    motion_cfg: MotionConfig | None = None,
    shot_cfg: ShotConfig | None = None,
) -> ObservedSequence:
    """Two shots of equal length, one of them a lower-body-truncating close-up.

    ``truncated_shot`` is 0 or 1, or ``None`` for two wide shots.
    """
    shot_cfg = shot_cfg or ShotConfig()
    motion_cfg = motion_cfg or MotionConfig()
    motion_cfg = MotionConfig(
        2 * frames_per_shot,
        motion_cfg.keyframe_spacing,
        motion_cfg.max_joint_speed,
        motion_cfg.beta_range,
        seed,
    )
    motion = sample_motion(model, motion_cfg)
    rng = substream(seed, _SHOTS, 0)
    shots = [
        make_shot(i, i * frames_per_shot, (i + 1) * frames_per_shot, truncated_shot == i, shot_cfg, rng)
        for i in range(2)
    ]
    return synthesize_observations(model, motion, shots, noise_sigma_px, missing_prob, seed)


# -------------------------------------------------------------- tracklets


@dataclass(frozen=True)
class Tracklet:
    identity: int
    frame_positions: tuple[int, ...]  # indices into the sequence's frames
    span: int  # frames covered, first to last inclusive (gaps count)


@dataclass(frozen=True)
class TrackletStats:
    count_all: int
    count_long: int
    length_all: int
    length_long: int


def assemble_tracklets(
    sequences: Iterable[ObservedSequence], mode: str, long_threshold: int = LONG_TRACKLET_FRAMES
) -> tuple[list[Tracklet], TrackletStats]:
    """Group valid frames into tracklets.

    single_shot breaks at shot changes and at absent frames, continuous_identity
    only at absent frames, multi_shot keeps one tracklet per identity.
    """
    if mode not in TRACKLET_MODES:
        raise ValueError(f"unknown tracklet mode {mode!r}; expected one of {TRACKLET_MODES}")
    tracklets: list[Tracklet] = []
    for seq in sequences:
        current: list[int] = []
        prev = None
        for i, fr in enumerate(seq.frames):
            if not fr.valid:
                if mode != "multi_shot" and current:
                    tracklets.append(_tracklet(seq, current))
                    current = []
                continue
            if mode == "single_shot" and current and fr.shot_id != seq.frames[prev].shot_id:
                tracklets.append(_tracklet(seq, current))
                current = []
            current.append(i)
            prev = i
        if current:
            tracklets.append(_tracklet(seq, current))
    longs = [tr for tr in tracklets if tr.span >= long_threshold]
    stats = TrackletStats(
        count_all=len(tracklets),
        count_long=len(longs),
        length_all=sum(tr.span for tr in tracklets),
        length_long=sum(tr.span for tr in longs),
    )
    return tracklets, stats


def _tracklet(seq: ObservedSequence, positions: list[int]) -> Tracklet:
    span = seq.frames[positions[-1]].t - seq.frames[positions[0]].t + 1
    return Tracklet(seq.identity, tuple(positions), span)


# -------------------------------------------------------------------- I/O


class DatasetFormatError(ValueError):
    pass


class DatasetVersionError(DatasetFormatError):
    pass


def _frame_to_json(fr: FrameObservation) -> dict:
    gt = None
    if fr.gt is not None:
        gt = {
            "r_gl": fr.gt.params.r_gl.tolist(),
            "t_gl": fr.gt.params.t_gl.tolist(),
            "theta_b": fr.gt.params.theta_b.ravel().tolist(),
            "x3d": fr.gt.x3d.ravel().tolist(),
        }
    return {
        "t": fr.t,
        "shot_id": fr.shot_id,
        "valid": fr.valid,
        "cam": fr.camera.to_dict(),
        "kp2d": fr.keypoints.tolist(),
        "gt": gt,
    }


def sequence_to_json(seq: ObservedSequence) -> dict:
    return {
        "identity": seq.identity,
        "beta_gt": None if seq.beta_gt is None else seq.beta_gt.tolist(),
        "frames": [_frame_to_json(f) for f in seq.frames],
        "format_version": FORMAT_VERSION,
    }


def write_dataset(dataset: SequenceDataset, path: str | Path) -> None:
    """JSON Lines: a header record with the generator config, then one sequence per line."""
    path = Path(path)
    lines = [json.dumps({"format_version": dataset.format_version, "header": dataset.config})]
    lines += [json.dumps(sequence_to_json(s)) for s in dataset.sequences]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def _field(d: dict, name: str, lineno: int, where: str = "sequence"):
    if name not in d:
        raise DatasetFormatError(f"line {lineno}: {where} record missing field '{name}'")
    return d[name]


def _check_version(d: dict, lineno: int) -> None:
    version = str(_field(d, "format_version", lineno))
    if version != FORMAT_VERSION:
        raise DatasetVersionError(
            f"line {lineno}: format_version {version!r} not supported (reader is {FORMAT_VERSION!r})"
        )


def _frame_from_json(d: dict, lineno: int) -> FrameObservation:
    get = lambda name: _field(d, name, lineno, "frame")  # noqa: E731
    shot_id = int(get("shot_id"))
    cam = Camera.from_dict(get("cam"), shot_id)
    kp = np.asarray(get("kp2d"), dtype=np.float64)
    if kp.ndim != 2 or kp.shape[1] != 3:
        raise DatasetFormatError(f"line {lineno}: frame field 'kp2d' must be J x 3")
    gt_raw = get("gt")
    gt = None
    if gt_raw is not None:
        theta = np.asarray(_field(gt_raw, "theta_b", lineno, "gt"), dtype=np.float64)
        x3d = np.asarray(_field(gt_raw, "x3d", lineno, "gt"), dtype=np.float64)
        params = FrameParams(
            np.asarray(_field(gt_raw, "r_gl", lineno, "gt")),
            np.asarray(_field(gt_raw, "t_gl", lineno, "gt")),
            theta.reshape(-1, 3),
        )
        gt = FrameGT(params, x3d.reshape(-1, 3))
    return FrameObservation(int(get("t")), shot_id, int(get("valid")), kp, cam, gt)


def sequence_from_json(d: dict, lineno: int = 1) -> ObservedSequence:
    _check_version(d, lineno)
    frames = [_frame_from_json(f, lineno) for f in _field(d, "frames", lineno)]
    beta = _field(d, "beta_gt", lineno)
    try:
        return ObservedSequence(
            int(_field(d, "identity", lineno)),
            tuple(frames),
            None if beta is None else np.asarray(beta, dtype=np.float64),
        )
    except ValueError as exc:
        raise DatasetFormatError(f"line {lineno}: {exc}") from exc


def read_dataset(path: str | Path) -> SequenceDataset:
    path = Path(path)
    config: dict = {}
    seqs = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if "header" in d:
                _check_version(d, lineno)
                config = d["header"]
                continue
            seqs.append(sequence_from_json(d, lineno))
    return SequenceDataset(tuple(seqs), config)
