"""Joints-only articulated body model.

The skeleton is a 17-joint tree rooted at the pelvis. Joint ``j`` carries a
rest bone vector (its offset from the parent in the rest pose) and a linear
shape basis that deforms that bone. Every non-root joint owns an axis-angle
rotation that turns the bones of its children; the root orientation is the
global orientation ``r_gl`` and is applied separately by :func:`pose_joints`.

Array conventions: joints are ``(J, 3)`` in meters, body pose ``theta_b`` is
``(J - 1, 3)`` and shape ``beta`` is ``(B,)``. Most functions also accept
leading batch dimensions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

_TAYLOR_EPS = 1e-8
_DERIV_TAYLOR_EPS = 1e-6

JOINT_NAMES = (
    "pelvis",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
)

_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)

# y up, body facing +z, subject's left on +x
_REST_OFFSETS = (
    (0.0, 0.0, 0.0),
    (-0.10, -0.05, 0.0), (0.0, -0.42, 0.0), (0.0, -0.42, 0.0),
    (0.10, -0.05, 0.0), (0.0, -0.42, 0.0), (0.0, -0.42, 0.0),
    (0.0, 0.22, 0.0), (0.0, 0.22, 0.0), (0.0, 0.10, 0.0), (0.0, 0.12, 0.0),
    (0.17, 0.05, 0.0), (0.0, -0.27, 0.0), (0.0, -0.25, 0.0),
    (-0.17, 0.05, 0.0), (0.0, -0.27, 0.0), (0.0, -0.25, 0.0),
)

_LIMB_JOINTS = frozenset(
    ("r_knee", "r_ankle", "l_knee", "l_ankle", "l_elbow", "l_wrist", "r_elbow", "r_wrist")
)

UPPER_BODY = frozenset(
    ("spine", "thorax", "neck", "head", "l_shoulder", "l_elbow", "l_wrist",
     "r_shoulder", "r_elbow", "r_wrist")
)


class ModelError(ValueError):
    """Raised for malformed skeletons or mismatched parameter shapes."""


@dataclass(frozen=True, eq=False)
class BodyModel:
    parents: np.ndarray
    rest_offsets: np.ndarray
    shape_basis: np.ndarray  # (J, B, 3)
    joint_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        rest = np.asarray(self.rest_offsets, dtype=np.float64)
        basis = np.asarray(self.shape_basis, dtype=np.float64)
        J = parents.shape[0]
        if rest.shape != (J, 3):
            raise ModelError(f"rest_offsets must be ({J}, 3), got {rest.shape}")
        if basis.ndim != 3 or basis.shape[0] != J or basis.shape[2] != 3:
            raise ModelError(f"shape_basis must be ({J}, B, 3), got {basis.shape}")
        roots = np.flatnonzero(parents < 0)
        if roots.tolist() != [0]:
            raise ModelError("exactly one root is required and it must be joint 0")
        if np.any(parents[1:] >= np.arange(1, J)):
            raise ModelError("parents must be topologically ordered (parent[j] < j)")
        if np.any(rest[0] != 0.0):
            raise ModelError("root rest offset must be zero")
        names = tuple(self.joint_names) or tuple(f"joint_{j}" for j in range(J))
        if len(names) != J:
            raise ModelError("joint_names length does not match joint count")
        for arr in (parents, rest, basis):
            arr.setflags(write=False)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_offsets", rest)
        object.__setattr__(self, "shape_basis", basis)
        object.__setattr__(self, "joint_names", names)

    @property
    def joint_count(self) -> int:
        return int(self.parents.shape[0])

    @property
    def shape_dim(self) -> int:
        return int(self.shape_basis.shape[1])

    @property
    def param_dim(self) -> int:
        """Length of one frame's (r_gl, t_gl, theta_b) block plus beta."""
        return 6 + 3 * (self.joint_count - 1) + self.shape_dim

    @cached_property
    def descendants(self) -> tuple[np.ndarray, ...]:
        """Strict descendants of every joint."""
        J = self.joint_count
        desc: list[list[int]] = [[] for _ in range(J)]
        for j in range(J - 1, 0, -1):
            p = int(self.parents[j])
            desc[p].extend([j] + desc[j])
        return tuple(np.array(sorted(d), dtype=np.int64) for d in desc)

    def joint_index(self, name: str) -> int:
        return self.joint_names.index(name)

    def to_dict(self) -> dict:
        return {
            "joint_count": self.joint_count,
            "parents": self.parents.tolist(),
            "rest_offsets": self.rest_offsets.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "joint_names": list(self.joint_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BodyModel":
        model = cls(
            parents=np.asarray(d["parents"]),
            rest_offsets=np.asarray(d["rest_offsets"], dtype=np.float64),
            shape_basis=np.asarray(d["shape_basis"], dtype=np.float64),
            joint_names=tuple(d.get("joint_names", ())),
        )
        if int(d["joint_count"]) != model.joint_count:
            raise ModelError("joint_count disagrees with parents")
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "BodyModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_body_model() -> BodyModel:
    """17-joint skeleton with a 2-D shape space.

    Shape dim 0 scales every bone by 10% per unit; dim 1 lengthens limbs and
    shortens the torso by 10% per unit.
    """
    rest = np.array(_REST_OFFSETS)
    limb = np.array([name in _LIMB_JOINTS for name in JOINT_NAMES], dtype=np.float64)
    basis = np.stack([0.1 * rest, 0.1 * rest * (2.0 * limb - 1.0)[:, None]], axis=1)
    return BodyModel(np.array(_PARENTS), rest, basis, JOINT_NAMES)


@dataclass(frozen=True, eq=False)
class FrameParams:
    """Per-frame global orientation, root translation and body pose."""

    r_gl: np.ndarray
    t_gl: np.ndarray
    theta_b: np.ndarray  # (J - 1, 3)

    def __post_init__(self):
        for name in ("r_gl", "t_gl", "theta_b"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.r_gl.shape != (3,) or self.t_gl.shape != (3,):
            raise ModelError("r_gl and t_gl must be 3-vectors")
        if self.theta_b.ndim != 2 or self.theta_b.shape[1] != 3:
            raise ModelError("theta_b must be (J - 1, 3)")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.r_gl, self.t_gl, self.theta_b.ravel()])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "FrameParams":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:3], vec[3:6], vec[6:].reshape(-1, 3))

    @classmethod
    def rest(cls, model: BodyModel) -> "FrameParams":
        return cls(np.zeros(3), np.zeros(3), np.zeros((model.joint_count - 1, 3)))

    def __eq__(self, other):
        if not isinstance(other, FrameParams):
            return NotImplemented
        return bool(np.array_equal(self.vector(), other.vector()))


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1] = -v[..., 2]
    K[..., 0, 2] = v[..., 1]
    K[..., 1, 0] = v[..., 2]
    K[..., 1, 2] = -v[..., 0]
    K[..., 2, 0] = -v[..., 1]
    K[..., 2, 1] = v[..., 0]
    return K


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Exponential map from axis-angle ``(..., 3)`` to rotation ``(..., 3, 3)``."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)[..., None, None]
    K = skew(v)
    K2 = K @ K
    small = theta < _TAYLOR_EPS
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * K2


def rodrigues_derivative(axis_angle: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and its partials; ``dR[..., k, :, :] = dR / dv_k``."""
    v = np.asarray(axis_angle, dtype=np.float64)
    R = rodrigues(v)
    batch = v.shape[:-1]
    E = np.broadcast_to(skew(np.eye(3)), batch + (3, 3, 3))
    theta2 = np.sum(v * v, axis=-1)
    small = theta2 < _DERIV_TAYLOR_EPS**2

    # dR/dv_k = (v_k [v]x + [v x (I - R) e_k]x) R / |v|^2
    K = skew(v)
    IminusR = np.eye(3) - R
    cols = np.swapaxes(IminusR, -1, -2)  # row k is (I - R) e_k
    cross = np.cross(v[..., None, :], cols)
    num = v[..., :, None, None] * K[..., None, :, :] + skew(cross)
    safe = np.where(small, 1.0, theta2)[..., None, None, None]
    dR = (num @ R[..., None, :, :]) / safe

    if np.any(small):
        # first-order expansion about zero
        Ks = K[..., None, :, :]
        approx = E + 0.5 * (E @ Ks + Ks @ E)
        dR = np.where(small[..., None, None, None], approx, dR)
    return R, dR


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle of rotation matrices ``(..., 3, 3)``."""
    from scipy.spatial.transform import Rotation

    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = Rotation.from_matrix(flat).as_rotvec()
    return out.reshape(R.shape[:-2] + (3,))


def geodesic_angle(R1: np.ndarray, R2: np.ndarray) -> np.ndarray:
    """Angle of the relative rotation ``R1^T R2``."""
    rel = np.swapaxes(R1, -1, -2) @ R2
    c = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


def bone_vectors(model: BodyModel, beta: np.ndarray) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape[-1] != model.shape_dim:
        raise ModelError(f"beta must have {model.shape_dim} entries, got {beta.shape[-1]}")
    return model.rest_offsets + np.einsum("...b,jbc->...jc", beta, model.shape_basis)


def _check_theta(model: BodyModel, theta_b: np.ndarray) -> np.ndarray:
    theta_b = np.asarray(theta_b, dtype=np.float64)
    if theta_b.shape[-2:] != (model.joint_count - 1, 3):
        raise ModelError(
            f"theta_b must end in ({model.joint_count - 1}, 3), got {theta_b.shape}"
        )
    return theta_b


def forward_kinematics(model: BodyModel, theta_b: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Body-frame joints with the root at the origin."""
    theta_b = _check_theta(model, theta_b)
    bones = bone_vectors(model, beta)
    local = rodrigues(theta_b)
    batch = np.broadcast_shapes(theta_b.shape[:-2], bones.shape[:-2])
    J = model.joint_count
    X = np.zeros(batch + (J, 3))
    G = np.zeros(batch + (J, 3, 3))
    G[..., 0, :, :] = np.eye(3)
    bones = np.broadcast_to(bones, batch + (J, 3))
    for j in range(1, J):
        p = model.parents[j]
        X[..., j, :] = X[..., p, :] + np.einsum("...ab,...b->...a", G[..., p, :, :], bones[..., j, :])
        G[..., j, :, :] = G[..., p, :, :] @ local[..., j - 1, :, :]
    return X


def pose_joints(X_b: np.ndarray, r_gl: np.ndarray, t_gl: np.ndarray) -> np.ndarray:
    """Rigidly place body-frame joints: ``X = R_gl X_b + t_gl``."""
    R = rodrigues(r_gl)
    t = np.asarray(t_gl, dtype=np.float64)
    return np.einsum("...ab,...jb->...ja", R, X_b) + t[..., None, :]


def canonicalize(X: np.ndarray, r_gl: np.ndarray, root: int = 0) -> np.ndarray:
    """Undo global orientation about the root: ``R_gl^T (X - X[root])``."""
    R = rodrigues(r_gl)
    centered = X - X[..., root : root + 1, :]
    return np.einsum("...ba,...jb->...ja", R, centered)


class FKResult(NamedTuple):
    X: np.ndarray  # (N, J, 3) camera frame
    jac: np.ndarray | None  # (N, J, 3, P) columns [r_gl, t_gl, theta_b, beta]
    X_body: np.ndarray  # (N, J, 3) root at origin, no global orientation
    jac_body: np.ndarray | None  # (N, J, 3, 3(J-1) + B) columns [theta_b, beta]


def fk_batch(
    model: BodyModel,
    r_gl: np.ndarray,
    t_gl: np.ndarray,
    theta_b: np.ndarray,
    beta: np.ndarray,
    jacobian: bool = True,
) -> FKResult:
    """Batched joints and Jacobians in both the camera and the body frame.

    Inputs carry a leading frame axis ``N``; ``beta`` may be ``(B,)`` or
    ``(N, B)``. Body-frame quantities never touch ``r_gl`` or ``t_gl``.
    """
    r_gl = np.atleast_2d(np.asarray(r_gl, dtype=np.float64))
    t_gl = np.atleast_2d(np.asarray(t_gl, dtype=np.float64))
    theta_b = _check_theta(model, theta_b)
    if theta_b.ndim == 2:
        theta_b = theta_b[None]
    N = r_gl.shape[0]
    J = model.joint_count
    B = model.shape_dim
    bones = np.broadcast_to(bone_vectors(model, beta), (N, J, 3))

    if jacobian:
        R_gl, dR_gl = rodrigues_derivative(r_gl)
        R_loc, dR_loc = rodrigues_derivative(theta_b)
    else:
        R_gl = rodrigues(r_gl)
        R_loc = rodrigues(theta_b)

    Xb = np.zeros((N, J, 3))
    Gb = np.zeros((N, J, 3, 3))
    Gb[:, 0] = np.eye(3)
    for j in range(1, J):
        p = model.parents[j]
        Xb[:, j] = Xb[:, p] + np.einsum("nab,nb->na", Gb[:, p], bones[:, j])
        Gb[:, j] = Gb[:, p] @ R_loc[:, j - 1]
    X = np.einsum("nab,njb->nja", R_gl, Xb) + t_gl[:, None, :]
    if not jacobian:
        return FKResult(X, None, Xb, None)

    nth = 3 * (J - 1)
    jac_b = np.zeros((N, J, 3, nth + B))
    for j in range(1, J):
        desc = model.descendants[j]
        if desc.size == 0:
            continue
        Gp = Gb[:, model.parents[j]]
        # dX_d/dtheta_jk = Gp dR_k R^T Gp^T (X_d - X_j) for strict descendants d
        A = Gp[:, None] @ dR_loc[:, j - 1] @ np.swapaxes(R_loc[:, j - 1], -1, -2)[:, None]
        A = A @ np.swapaxes(Gp, -1, -2)[:, None]
        diff = Xb[:, desc] - Xb[:, j : j + 1]
        col = 3 * (j - 1)
        jac_b[:, desc, :, col : col + 3] = np.einsum("nkab,ndb->ndak", A, diff)
    basis = model.shape_basis  # (J, B, 3)
    for j in range(1, J):
        p = model.parents[j]
        jac_b[:, j, :, nth:] = jac_b[:, p, :, nth:] + np.einsum("nab,kb->nak", Gb[:, p], basis[j])

    jac = np.empty((N, J, 3, 6 + nth + B))
    jac[..., 0:3] = np.einsum("nkab,njb->njak", dR_gl, Xb)
    jac[..., 3:6] = np.eye(3)
    jac[..., 6:] = np.einsum("nab,njbp->njap", R_gl, jac_b)
    return FKResult(X, jac, Xb, jac_b)


def posed_joints_and_jacobian(model, r_gl, t_gl, theta_b, beta, jacobian: bool = True):
    """Camera-frame joints ``(N, J, 3)`` and Jacobian ``(N, J, 3, P)``."""
    res = fk_batch(model, r_gl, t_gl, theta_b, beta, jacobian)
    return res.X, res.jac


def fk_jacobian(model: BodyModel, params: FrameParams, beta: np.ndarray) -> np.ndarray:
    """Jacobian of camera-frame joints, shape ``(3J, 3 + 3 + 3(J-1) + B)``."""
    _, jac = posed_joints_and_jacobian(
        model, params.r_gl[None], params.t_gl[None], params.theta_b[None], beta
    )
    return jac[0].reshape(3 * model.joint_count, -1)
