"""Pinhole camera with fixed intrinsics and image-bound visibility."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Z_MIN = 0.1


@dataclass(frozen=True)
class Camera:
    focal: float = 500.0
    cx: float = 256.0
    cy: float = 256.0
    width: int = 512
    height: int = 512
    shot_id: int = 0

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def principal(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    def to_dict(self) -> dict:
        return {"focal": self.focal, "cx": self.cx, "cy": self.cy, "w": self.width, "h": self.height}

    @classmethod
    def from_dict(cls, d: dict, shot_id: int = 0) -> "Camera":
        return cls(float(d["focal"]), float(d["cx"]), float(d["cy"]), int(d["w"]), int(d["h"]), shot_id)


def project(X: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points ``(..., 3)``.

    Returns pixel coordinates ``(..., 2)`` and a visibility mask. Points at
    or behind ``Z_MIN`` are reported invisible; their coordinates are
    computed at the clamped depth so they stay finite.
    """
    X = np.asarray(X, dtype=np.float64)
    z = X[..., 2]
    zc = np.maximum(z, Z_MIN)
    u = cam.focal * X[..., 0] / zc + cam.cx
    v = cam.focal * X[..., 1] / zc + cam.cy
    uv = np.stack([u, v], axis=-1)
    visible = (z > Z_MIN) & (u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height)
    return uv, visible


def project_with_jacobian(X: np.ndarray, focal, cx, cy):
    """Batched projection with per-point ``(2, 3)`` Jacobians.

    ``focal``, ``cx``, ``cy`` broadcast against the leading axes of ``X``
    (e.g. per-frame arrays of shape ``(N, 1)`` for ``X`` of shape
    ``(N, J, 3)``). Depth is clamped at ``Z_MIN``; below it the depth column
    of the Jacobian is zero.
    """
    X = np.asarray(X, dtype=np.float64)
    z = X[..., 2]
    clamped = z <= Z_MIN
    zc = np.where(clamped, Z_MIN, z)
    f = np.asarray(focal, dtype=np.float64)
    fz = f / zc
    uv = np.stack([fz * X[..., 0] + cx, fz * X[..., 1] + cy], axis=-1)
    jac = np.zeros(X.shape[:-1] + (2, 3))
    jac[..., 0, 0] = fz
    jac[..., 1, 1] = fz
    jac[..., 0, 2] = np.where(clamped, 0.0, -fz * X[..., 0] / zc)
    jac[..., 1, 2] = np.where(clamped, 0.0, -fz * X[..., 1] / zc)
    return uv, jac
