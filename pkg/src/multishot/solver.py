"""Sequence initialization and L-BFGS minimization of the fitting energy."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .body_model import BodyModel, FrameParams, fk_batch, rodrigues, rotation_log
from .objectives import (
    MODES,
    EnergyBreakdown,
    NonFiniteEnergyError,
    Weights,
    evaluate,
    frame_block_size,
    pack,
    unpack,
)
from .scene_sim import ObservedSequence, substream

INIT_STRATEGIES = ("perturbed_gt", "coarse")
BETA_BOUND = 3.0
_INIT_STREAM = 7


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    mode: str = "multi_shot"
    weights: Weights = field(default_factory=Weights)
    max_iters: int = 300
    grad_tol: float = 1e-6
    step_tol: float = 1e-9
    energy_tol: float = 1e-10
    init: str = "perturbed_gt"
    init_noise: float = 0.2
    history: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.init not in INIT_STRATEGIES:
            raise ValueError(f"unknown init {self.init!r}; expected one of {INIT_STRATEGIES}")
        if min(self.grad_tol, self.step_tol) <= 0 or self.max_iters < 0:
            raise ValueError("tolerances must be positive and max_iters non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver config keys: {sorted(unknown)}")
        d = dict(d)
        if "mode" in d:
            d["mode"] = d["mode"].replace("-", "_")
        if "weights" in d:
            d["weights"] = Weights(**d["weights"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SequenceEstimate:
    beta: np.ndarray
    frames: tuple[FrameParams, ...]
    converged: np.ndarray  # per frame
    energy: EnergyBreakdown | None = None
    iterations: int = 0
    energy_trace: tuple[float, ...] = ()

    def vector(self) -> np.ndarray:
        return pack(self.beta, list(self.frames))

    @classmethod
    def from_vector(cls, x, model: BodyModel, T: int, **kw) -> "SequenceEstimate":
        beta, fr = unpack(np.asarray(x, dtype=np.float64), model, T)
        frames = tuple(FrameParams.from_vector(row) for row in fr)
        kw.setdefault("converged", np.zeros(T, dtype=bool))
        return cls(beta.copy(), frames, **kw)

    def joints(self, model: BodyModel) -> np.ndarray:
        """Camera-frame joints ``(T, J, 3)``."""
        r = np.stack([f.r_gl for f in self.frames])
        t = np.stack([f.t_gl for f in self.frames])
        th = np.stack([f.theta_b for f in self.frames])
        return fk_batch(model, r, t, th, self.beta, jacobian=False).X


# ------------------------------------------------------------ init


def _upright_rotation(yaw: float) -> np.ndarray:
    """Camera-frame orientation of an upright body turned by ``yaw`` about its vertical axis."""
    flip = np.diag([1.0, -1.0, -1.0])  # body y-up / facing +z seen by a y-down camera
    return flip @ rodrigues(np.array([0.0, yaw, 0.0]))


def coarse_frame_init(kp: np.ndarray, focal: float, cx: float, cy: float, model: BodyModel,
                      weights: Weights = Weights(), n_yaw: int = 36) -> FrameParams:
    """Rest pose placed by a yaw grid search on the reprojection energy."""
    from .objectives import _proj_terms

    J = model.joint_count
    conf = kp[:, 2]
    seen = conf > 0
    rest = np.zeros((J - 1, 3))
    Xb = fk_batch(model, np.zeros(3), np.zeros(3), rest, np.zeros(model.shape_dim), jacobian=False).X_body[0]

    ratios = []
    for j in range(1, J):
        p = model.parents[j]
        if seen[j] and seen[p]:
            l2d = float(np.linalg.norm(kp[j, :2] - kp[p, :2]))
            if l2d > 1.0:
                ratios.append(np.linalg.norm(model.rest_offsets[j]) * focal / l2d)
    depth = float(np.median(ratios)) if ratios else 4.0
    if not seen.any():
        return FrameParams(rotation_log(_upright_rotation(0.0)), np.array([0.0, 0.0, depth]), rest)

    centroid = np.average(kp[seen, :2], axis=0, weights=conf[seen])
    ray = np.array([(centroid[0] - cx) / focal, (centroid[1] - cy) / focal, 1.0])
    candidates = []
    for k in range(n_yaw):
        R = _upright_rotation(2.0 * math.pi * k / n_yaw)
        offset = np.average((Xb @ R.T)[seen], axis=0, weights=conf[seen])
        t = ray * depth - offset
        candidates.append((R, t))
    Rs = np.stack([c[0] for c in candidates])
    ts = np.stack([c[1] for c in candidates])
    X = np.einsum("nab,jb->nja", Rs, Xb) + ts[:, None, :]
    n = len(candidates)
    e, _ = _proj_terms(X, None, np.broadcast_to(kp, (n,) + kp.shape), np.full(n, focal),
                       np.full(n, cx), np.full(n, cy), weights.gm_sigma)
    best = int(np.argmin(e))
    return FrameParams(rotation_log(Rs[best]), ts[best], rest)


def initialize_sequence(
    seq: ObservedSequence,
    model: BodyModel,
    strategy: str = "perturbed_gt",
    init_noise: float = 0.2,
    seed: int = 0,
    weights: Weights = Weights(),
) -> SequenceEstimate:
    """Starting point for the solver.

    ``perturbed_gt`` adds Gaussian noise of scale ``init_noise`` to every
    ground-truth parameter; ``coarse`` uses only detections. Absent frames
    get the rest pose and are flagged unconverged under both strategies.
    """
    if strategy not in INIT_STRATEGIES:
        raise ValueError(f"unknown init strategy {strategy!r}")
    T = len(seq)
    valid = seq.arrays.valid.astype(bool)
    rest = FrameParams.rest(model)
    if strategy == "perturbed_gt":
        if not seq.has_gt or seq.beta_gt is None:
            raise SolverError("perturbed_gt initialization requires ground truth")
        rng = substream(seed, _INIT_STREAM, seq.identity)
        beta = seq.beta_gt + init_noise * rng.standard_normal(model.shape_dim)
        frames = []
        for fr in seq.frames:
            noise = init_noise * rng.standard_normal(frame_block_size(model))
            if fr.valid:
                frames.append(FrameParams.from_vector(fr.gt.params.vector() + noise))
            else:
                frames.append(rest)
    else:
        a = seq.arrays
        beta = np.zeros(model.shape_dim)
        frames = [
            coarse_frame_init(a.keypoints[i], a.focal[i], a.cx[i], a.cy[i], model, weights)
            if valid[i] else rest
            for i in range(T)
        ]
    beta = np.clip(beta, -BETA_BOUND, BETA_BOUND)
    return SequenceEstimate(beta, tuple(frames), np.zeros(T, dtype=bool))


# ------------------------------------------------------------ L-BFGS


class _Preconditioner:
    """Factorized damped Gauss-Newton matrix, applied as the initial inverse Hessian."""

    def __init__(self, H: sparse.csc_matrix, active: np.ndarray | None = None, damping: float = 1e-9):
        n = H.shape[0]
        d = H.diagonal()
        mu = damping * max(1.0, float(np.abs(d).max(initial=0.0)))
        A = H + mu * sparse.identity(n, format="csc")
        if active is not None and active.any():
            # decouple fixed coordinates so they receive no correction
            keep = sparse.diags((~active).astype(np.float64))
            A = keep @ A @ keep + sparse.diags(active.astype(np.float64))
        self.lu = splu(A.tocsc())

    def solve(self, q: np.ndarray) -> np.ndarray:
        return self.lu.solve(q)


def _two_loop(g: np.ndarray, S: list, Y: list, precond: _Preconditioner) -> np.ndarray:
    """L-BFGS direction with the preconditioner as initial inverse Hessian."""
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    q = precond.solve(q)
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _projected_gradient_norm(x: np.ndarray, g: np.ndarray, B: int) -> float:
    if not g.size:
        return 0.0
    pg = g.copy()
    pg[:B] = x[:B] - np.clip(x[:B] - g[:B], -BETA_BOUND, BETA_BOUND)
    return float(np.max(np.abs(pg)))


def _project(x: np.ndarray, B: int) -> np.ndarray:
    x = x.copy()
    x[:B] = np.clip(x[:B], -BETA_BOUND, BETA_BOUND)
    return x


def optimize_sequence(
    seq: ObservedSequence,
    cfg: SolverConfig,
    init: SequenceEstimate,
    model: BodyModel,
) -> SequenceEstimate:
    """Minimize the sequence energy in ``cfg.mode``.

    Quasi-Newton direction whose initial inverse Hessian is the factorized
    sparse Gauss-Newton matrix of the current iterate, refined by up to
    ``cfg.history`` secant pairs (none by default), then a backtracking line
    search with Armijo constant 1e-4 and step halving, beta projected onto
    its box after each trial. Only accepted steps change the iterate, so the
    energy trace is non-increasing.
    """
    T = len(seq)
    B = model.shape_dim
    W = cfg.weights
    x = _project(init.vector(), B)
    if x.shape != (B + T * frame_block_size(model),):
        raise ValueError("initial estimate does not match the sequence layout")

    def f_and_g(z):
        return evaluate(z, seq, W, model, cfg.mode, curvature=True)

    br, g, blocks = f_and_g(x)
    f = br.total
    trace = [f]
    S: list[np.ndarray] = []
    Y: list[np.ndarray] = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        gnorm = _projected_gradient_norm(x, g, B)
        if gnorm <= cfg.grad_tol:
            converged = True
            it -= 1
            break
        # shape entries pinned at a bound with the gradient pointing outward stay fixed
        active = np.zeros_like(x, dtype=bool)
        active[:B] = ((x[:B] <= -BETA_BOUND) & (g[:B] > 0)) | ((x[:B] >= BETA_BOUND) & (g[:B] < 0))
        g_free = np.where(active, 0.0, g)
        precond = _Preconditioner(blocks, active)
        d = _two_loop(g_free, S, Y, precond)
        if d @ g_free >= 0:
            S.clear()
            Y.clear()
            d = _two_loop(g_free, S, Y, precond)
        d[active] = 0.0
        step = 1.0
        accepted = False
        for _ in range(60):
            x_new = _project(x + step * d, B)
            try:
                br_new, g_new, blocks_new = f_and_g(x_new)
            except NonFiniteEnergyError:
                step *= 0.5
                continue
            if br_new.total <= f + 1e-4 * float(g @ (x_new - x)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            it -= 1
            break
        s = x_new - x
        y = g_new - g
        if cfg.history and s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            if len(S) > cfg.history:
                S.pop(0)
                Y.pop(0)
        decrease = f - br_new.total
        x, f, g, br, blocks = x_new, br_new.total, g_new, br_new, blocks_new
        trace.append(f)
        if np.max(np.abs(s)) <= cfg.step_tol * max(1.0, float(np.max(np.abs(x)))):
            converged = True
            break
        if decrease <= cfg.energy_tol * max(1.0, abs(f)):
            converged = True
            break

    flags = seq.arrays.valid.astype(bool) & converged
    return SequenceEstimate.from_vector(
        x, model, T, converged=flags, energy=br, iterations=it, energy_trace=tuple(trace)
    )


def solve(seq: ObservedSequence, cfg: SolverConfig, model: BodyModel) -> SequenceEstimate:
    init = initialize_sequence(seq, model, cfg.init, cfg.init_noise, cfg.seed, cfg.weights)
    return optimize_sequence(seq, cfg, init, model)


# ------------------------------------------------------------ I/O

ESTIMATES_VERSION = "1"


def estimate_to_json(seq: ObservedSequence, est: SequenceEstimate, model: BodyModel) -> dict:
    X = est.joints(model)
    e = est.energy
    per_frame = None
    if e is not None:
        per_frame = e.per_frame_proj + e.per_frame_prior + e.per_frame_sm_joint + e.per_frame_sm_param
    return {
        "identity": seq.identity,
        "beta": est.beta.tolist(),
        "iterations": est.iterations,
        "energy": None if e is None else e.as_dict(),
        "frames": [
            {
                "t": fr.t,
                "r_gl": p.r_gl.tolist(),
                "t_gl": p.t_gl.tolist(),
                "theta_b": p.theta_b.ravel().tolist(),
                "x3d": X[i].ravel().tolist(),
                "converged": bool(est.converged[i]),
                "energy": None if per_frame is None else float(per_frame[i]),
            }
            for i, (fr, p) in enumerate(zip(seq.frames, est.frames))
        ],
    }


def write_estimates(path, seqs, estimates, model: BodyModel, mode: str) -> None:
    doc = {
        "format_version": ESTIMATES_VERSION,
        "mode": mode,
        "sequences": [estimate_to_json(s, e, model) for s, e in zip(seqs, estimates)],
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def read_estimates(path) -> dict[int, SequenceEstimate]:
    """Estimates keyed by sequence identity (energy breakdowns are not restored)."""
    doc = json.loads(Path(path).read_text())
    if str(doc.get("format_version")) != ESTIMATES_VERSION:
        raise ValueError(f"estimates format_version {doc.get('format_version')!r} not supported")
    out = {}
    for s in doc["sequences"]:
        frames = tuple(
            FrameParams(np.array(f["r_gl"]), np.array(f["t_gl"]), np.array(f["theta_b"]).reshape(-1, 3))
            for f in s["frames"]
        )
        conv = np.array([f["converged"] for f in s["frames"]], dtype=bool)
        out[int(s["identity"])] = SequenceEstimate(
            np.array(s["beta"]), frames, conv, None, int(s["iterations"])
        )
    return out


def with_mode(cfg: SolverConfig, mode: str) -> SolverConfig:
    return replace(cfg, mode=mode)
