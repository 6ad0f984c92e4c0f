"""Fitting energy for a tracklet and its analytic gradient.

Parameter layout for a whole sequence: ``[beta (B) | frame_0 | frame_1 | ...]``
where each frame block is ``[r_gl (3), t_gl (3), theta_b (3(J-1))]``.

Three smoothing modes share one evaluator:

* ``single_frame``: no temporal terms.
* ``single_shot``: consecutive valid frames of the same shot, joint term on
  camera-frame joints.
* ``multi_shot``: all consecutive valid frames, joint term on canonical
  (body-frame) joints, so it is blind to per-frame ``r_gl`` and ``t_gl``.

Pairs separated by absent frames are weighted by ``1 / gap``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .body_model import BodyModel, FrameParams, fk_batch
from .camera import project_with_jacobian
from .scene_sim import FrameObservation, ObservedSequence

MODES = ("single_frame", "single_shot", "multi_shot")


class NonFiniteEnergyError(FloatingPointError):
    def __init__(self, frame: int, term: str):
        super().__init__(f"non-finite {term} energy at frame {frame}")
        self.frame = frame
        self.term = term


@dataclass(frozen=True)
class Weights:
    w_proj: float = 1.0
    w_prior_pose: float = 0.1
    w_prior_shape: float = 1.0
    w_sm_joint: float = 5.0
    w_sm_param: float = 1.0
    gm_sigma: float = 50.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"weight {name} must be >= 0, got {value}")


@dataclass(frozen=True, eq=False)
class EnergyBreakdown:
    e_proj: float
    e_prior: float
    e_sm_joint: float
    e_sm_param: float
    total: float
    per_frame_proj: np.ndarray
    per_frame_prior: np.ndarray
    per_frame_sm_joint: np.ndarray  # pair (i, next valid) booked on frame i
    per_frame_sm_param: np.ndarray

    def as_dict(self) -> dict:
        return {
            "e_proj": self.e_proj,
            "e_prior": self.e_prior,
            "e_sm_joint": self.e_sm_joint,
            "e_sm_param": self.e_sm_param,
            "total": self.total,
        }


def frame_block_size(model: BodyModel) -> int:
    return 6 + 3 * (model.joint_count - 1)


def pack(beta: np.ndarray, frames: list[FrameParams]) -> np.ndarray:
    return np.concatenate([np.asarray(beta, dtype=np.float64)] + [f.vector() for f in frames])


def unpack(x: np.ndarray, model: BodyModel, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a packed vector into ``beta`` and a ``(T, frame_block)`` array."""
    B = model.shape_dim
    F = frame_block_size(model)
    if x.shape != (B + T * F,):
        raise ValueError(f"parameter layout mismatch: expected {B + T * F} entries, got {x.shape}")
    return x[:B], x[B:].reshape(T, F)


def geman_mcclure(r2: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """``rho(r) = s^2 r^2 / (s^2 + r^2)`` and its derivative w.r.t. ``r^2``."""
    s2 = sigma * sigma
    denom = s2 + r2
    return s2 * r2 / denom, (s2 / denom) ** 2


def smoothing_pairs(seq: ObservedSequence, mode: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pairs of frame positions ``(i, k)`` and their ``1 / gap`` weights."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    a = seq.arrays
    if mode == "single_frame":
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)
    valid = np.flatnonzero(a.valid)
    i, k = valid[:-1], valid[1:]
    if mode == "single_shot":
        same = a.shot_id[i] == a.shot_id[k]
        i, k = i[same], k[same]
    return i, k, 1.0 / (a.t[k] - a.t[i])


class _HessianBuilder:
    """Accumulates dense blocks at arbitrary global indices into a sparse symmetric matrix."""

    def __init__(self, n: int):
        self.n = n
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []

    def add(self, idx: np.ndarray, blocks: np.ndarray) -> None:
        P = idx.shape[-1]
        self.rows.append(np.broadcast_to(idx[:, :, None], (len(idx), P, P)).ravel())
        self.cols.append(np.broadcast_to(idx[:, None, :], (len(idx), P, P)).ravel())
        self.vals.append(blocks.ravel())

    def add_entries(self, rows, cols, vals) -> None:
        self.rows.append(np.asarray(rows))
        self.cols.append(np.asarray(cols))
        self.vals.append(np.broadcast_to(vals, np.shape(rows)).ravel())

    def add_diag(self, idx, value: float) -> None:
        self.add_entries(idx, idx, np.full(np.size(idx), float(value)))

    def matrix(self) -> sparse.csc_matrix:
        if not self.rows:
            return sparse.csc_matrix((self.n, self.n))
        return sparse.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.n, self.n),
        ).tocsc()


def _proj_terms(X, jac, kp, focal, cx, cy, sigma, curvature=False):
    """Per-frame Geman-McClure data term and its gradient w.r.t. frame params."""
    uv, Jp = project_with_jacobian(X, focal[:, None], cx[:, None], cy[:, None])
    res = uv - kp[..., :2]
    conf = kp[..., 2]
    r2 = np.sum(res * res, axis=-1)
    rho, drho = geman_mcclure(r2, sigma)
    e = np.sum(conf * rho, axis=-1)
    if jac is None:
        return e, None
    g_uv = (2.0 * conf * drho)[..., None] * res
    g_X = np.einsum("nja,njab->njb", g_uv, Jp)
    g = np.einsum("njb,njbp->np", g_X, jac)
    if not curvature:
        return e, g
    Jr = (Jp @ jac).reshape(len(X), -1, jac.shape[-1])  # (N, 2J, P)
    w = np.repeat(2.0 * conf * drho, 2, axis=-1)
    H = np.swapaxes(Jr * w[..., None], -1, -2) @ Jr
    return e, g, H


def evaluate(
    x: np.ndarray,
    seq: ObservedSequence,
    weights: Weights,
    model: BodyModel,
    mode: str = "multi_shot",
    gradient: bool = True,
    curvature: bool = False,
):
    """Total energy of a packed parameter vector and, optionally, its gradient.

    With ``curvature=True`` a third value is returned: the sparse
    Gauss-Newton approximation of the Hessian (Geman-McClure terms weighted
    by their first derivative), used to precondition the solver.
    """
    gradient = gradient or curvature
    T = len(seq)
    B = model.shape_dim
    nth = 3 * (model.joint_count - 1)
    beta, fr = unpack(np.asarray(x, dtype=np.float64), model, T)
    a = seq.arrays
    r, t, theta = fr[:, 0:3], fr[:, 3:6], fr[:, 6:]
    i_pair, k_pair, w_pair = smoothing_pairs(seq, mode)

    valid = np.flatnonzero(a.valid)
    need_fk = valid.size > 0 or i_pair.size > 0
    g_fr = np.zeros_like(fr) if gradient else None
    g_beta = np.zeros(B) if gradient else None

    F = fr.shape[1]
    hess = _HessianBuilder(B + T * F) if curvature else None
    frame_cols = B + F * np.arange(T)[:, None] + np.arange(F)  # (T, F) global columns
    beta_cols = np.broadcast_to(np.arange(B), (T, B))
    per_proj = np.zeros(T)
    if need_fk:
        fk = fk_batch(model, r, t, theta.reshape(T, -1, 3), beta, jacobian=gradient)
    if valid.size:
        jac_v = fk.jac[valid] if gradient else None
        out = _proj_terms(
            fk.X[valid], jac_v, a.keypoints[valid], a.focal[valid], a.cx[valid], a.cy[valid],
            weights.gm_sigma, curvature,
        )
        e, g = out[0], out[1]
        if curvature:
            hess.add(np.hstack([frame_cols, beta_cols])[valid], weights.w_proj * out[2])
        per_proj[valid] = e
        if gradient:
            g_fr[valid] += weights.w_proj * g[:, :-B]
            g_beta += weights.w_proj * g[:, -B:].sum(axis=0)
        bad = ~np.isfinite(e)
        if bad.any():
            raise NonFiniteEnergyError(int(a.t[valid[np.argmax(bad)]]), "projection")

    per_prior = weights.w_prior_pose * np.sum(theta * theta, axis=1) + weights.w_prior_shape * float(
        beta @ beta
    )
    if gradient:
        g_fr[:, 6:] += 2.0 * weights.w_prior_pose * theta
        g_beta += 2.0 * weights.w_prior_shape * T * beta
    if curvature:
        hess.add_diag(frame_cols[:, 6:].ravel(), 2.0 * weights.w_prior_pose)
        hess.add_diag(np.arange(B), 2.0 * weights.w_prior_shape * T)

    per_smj = np.zeros(T)
    per_smp = np.zeros(T)
    if i_pair.size:
        if mode == "multi_shot":
            Xs, jacs, cols = fk.X_body, fk.jac_body, slice(6, None)
        else:
            Xs, jacs, cols = fk.X, fk.jac, slice(0, None)
        D = Xs[i_pair] - Xs[k_pair]
        e_j = w_pair * np.sum(D * D, axis=(1, 2))
        dtheta = theta[i_pair] - theta[k_pair]
        e_p = w_pair * np.sum(dtheta * dtheta, axis=1)
        np.add.at(per_smj, i_pair, e_j)
        np.add.at(per_smp, i_pair, e_p)
        if gradient:
            gD = (2.0 * weights.w_sm_joint * w_pair)[:, None, None] * D
            gi = np.einsum("nja,njap->np", gD, jacs[i_pair])
            gk = np.einsum("nja,njap->np", gD, jacs[k_pair])
            np.add.at(g_fr[:, cols], i_pair, gi[:, :-B])
            np.subtract.at(g_fr[:, cols], k_pair, gk[:, :-B])
            g_beta += gi[:, -B:].sum(axis=0) - gk[:, -B:].sum(axis=0)
            gp = (2.0 * weights.w_sm_param * w_pair)[:, None] * dtheta
            np.add.at(g_fr[:, 6:], i_pair, gp)
            np.subtract.at(g_fr[:, 6:], k_pair, gp)
        if curvature:
            # D depends on [frame i cols, frame k cols, beta]; beta columns cancel to J_i - J_k
            n = i_pair.size
            Ji = jacs[i_pair].reshape(n, -1, jacs.shape[-1])
            Jk = jacs[k_pair].reshape(n, -1, jacs.shape[-1])
            Jd = np.concatenate([Ji[..., :-B], -Jk[..., :-B], Ji[..., -B:] - Jk[..., -B:]], axis=-1)
            idx = np.hstack([frame_cols[i_pair][:, cols], frame_cols[k_pair][:, cols], beta_cols[:n]])
            scale = (2.0 * weights.w_sm_joint * w_pair)[:, None, None]
            hess.add(idx, scale * (np.swapaxes(Jd, -1, -2) @ Jd))
            th_i, th_k = frame_cols[i_pair][:, 6:], frame_cols[k_pair][:, 6:]
            wp = np.repeat(2.0 * weights.w_sm_param * w_pair, th_i.shape[1])
            hess.add_entries(th_i.ravel(), th_i.ravel(), wp)
            hess.add_entries(th_k.ravel(), th_k.ravel(), wp)
            hess.add_entries(th_i.ravel(), th_k.ravel(), -wp)
            hess.add_entries(th_k.ravel(), th_i.ravel(), -wp)

    e_proj = float(per_proj.sum())
    e_prior = float(per_prior.sum())
    e_smj = float(per_smj.sum())
    e_smp = float(per_smp.sum())
    total = weights.w_proj * e_proj + e_prior + weights.w_sm_joint * e_smj + weights.w_sm_param * e_smp
    if not np.isfinite(total):
        raise NonFiniteEnergyError(int(a.t[int(np.argmax(~np.isfinite(per_prior + per_smj)))]), "total")
    breakdown = EnergyBreakdown(
        e_proj, e_prior, e_smj, e_smp, total, per_proj, per_prior, per_smj, per_smp
    )
    grad = np.concatenate([g_beta, g_fr.ravel()]) if gradient else None
    if curvature:
        return breakdown, grad, hess.matrix()
    return breakdown, grad


def total_energy(sequence_params, seq, weights, model, mode="multi_shot"):
    """Breakdown and gradient for ``(beta, [FrameParams...])`` or a packed vector."""
    if isinstance(sequence_params, tuple):
        beta, frames = sequence_params
        if len(frames) != len(seq):
            raise ValueError(f"parameter layout mismatch: {len(frames)} frames for a {len(seq)}-frame sequence")
        x = pack(beta, list(frames))
    else:
        x = np.asarray(sequence_params, dtype=np.float64)
    return evaluate(x, seq, weights, model, mode)


# Single-term helpers; gradients are w.r.t. (frame vector, beta) unless noted.


def e_proj(frame: FrameParams, beta, obs: FrameObservation, model: BodyModel, weights: Weights = Weights()):
    fk = fk_batch(model, frame.r_gl[None], frame.t_gl[None], frame.theta_b[None], beta)
    cam = obs.camera
    e, g = _proj_terms(
        fk.X, fk.jac, obs.keypoints[None], np.array([cam.focal]), np.array([cam.cx]), np.array([cam.cy]),
        weights.gm_sigma,
    )
    B = model.shape_dim
    return float(e[0]), g[0, :-B], g[0, -B:]


def e_prior(frame: FrameParams, beta, weights: Weights = Weights()):
    beta = np.asarray(beta, dtype=np.float64)
    value = weights.w_prior_pose * float(np.sum(frame.theta_b**2)) + weights.w_prior_shape * float(beta @ beta)
    g_frame = np.zeros(6 + frame.theta_b.size)
    g_frame[6:] = 2.0 * weights.w_prior_pose * frame.theta_b.ravel()
    return value, g_frame, 2.0 * weights.w_prior_shape * beta


def e_sm_joint(frame_t: FrameParams, frame_t1: FrameParams, beta, model: BodyModel):
    """Squared distance of canonical joints; gradients for both frames and beta."""
    theta = np.stack([frame_t.theta_b, frame_t1.theta_b])
    fk = fk_batch(model, np.zeros((2, 3)), np.zeros((2, 3)), theta, beta)
    D = fk.X_body[0] - fk.X_body[1]
    value = float(np.sum(D * D))
    g = 2.0 * np.einsum("ja,njap->np", D, fk.jac_body)
    nth = theta[0].size
    g_t = np.concatenate([np.zeros(6), g[0, :nth]])
    g_t1 = np.concatenate([np.zeros(6), -g[1, :nth]])
    return value, g_t, g_t1, g[0, nth:] - g[1, nth:]


def e_sm_param(frame_t: FrameParams, frame_t1: FrameParams):
    d = (frame_t.theta_b - frame_t1.theta_b).ravel()
    g = np.concatenate([np.zeros(6), 2.0 * d])
    return float(d @ d), g, -g
