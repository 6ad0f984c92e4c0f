"""PCK, cross-shot PCK, MPJPE and PA-MPJPE."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .body_model import BodyModel, FrameParams, fk_batch
from .camera import project
from .scene_sim import ObservedSequence

DEFAULT_ALPHAS = (0.05, 0.1, 0.2)


class MetricError(ValueError):
    pass


class NoShotBoundaryError(MetricError):
    def __init__(self, msg: str = "no shot boundaries"):
        super().__init__(msg)


@dataclass(frozen=True, eq=False)
class PckReport:
    alphas: tuple[float, ...]
    pck: np.ndarray  # percent per alpha
    per_joint: np.ndarray  # (n_alpha, J) percent, NaN where a joint was never evaluated
    pairs: int

    def rows(self) -> list[tuple[float, float, int]]:
        return [(a, float(p), self.pairs) for a, p in zip(self.alphas, self.pck)]


def _bbox_size(gt_2d: np.ndarray) -> np.ndarray:
    extent = gt_2d.max(axis=-2) - gt_2d.min(axis=-2)
    return extent.max(axis=-1)


def pck_counts(pred_2d, gt_2d, mask, alphas):
    """Hits ``(n_alpha, ..., J)`` for each alpha; distances normalized by the GT box."""
    pred_2d = np.asarray(pred_2d, dtype=np.float64)
    gt_2d = np.asarray(gt_2d, dtype=np.float64)
    if pred_2d.shape != gt_2d.shape:
        raise MetricError(f"joint count mismatch: {pred_2d.shape} vs {gt_2d.shape}")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), gt_2d.shape[:-1])
    dist = np.linalg.norm(pred_2d - gt_2d, axis=-1)
    size = _bbox_size(gt_2d)[..., None]
    hits = np.stack([(dist <= a * size) & mask for a in alphas])
    return hits, mask


def pck(pred_2d, gt_2d, mask=True, alpha: float = 0.1) -> float:
    """Percent of evaluated joints within ``alpha * max(bbox_w, bbox_h)`` of the GT."""
    hits, mask = pck_counts(pred_2d, gt_2d, mask, (alpha,))
    n = int(mask.sum())
    if n == 0:
        raise MetricError("empty evaluation set")
    return 100.0 * float(hits.sum()) / n


def _posed(model: BodyModel, theta_b, beta, frame: FrameParams) -> np.ndarray:
    return fk_batch(model, frame.r_gl[None], frame.t_gl[None], np.asarray(theta_b)[None], beta,
                    jacobian=False).X[0]


def gt_keypoints(seq: ObservedSequence, i: int) -> np.ndarray:
    """Ground-truth 2D joints of frame ``i``: exact projection of the GT 3D joints when available."""
    fr = seq.frames[i]
    if fr.gt is not None:
        return project(fr.gt.x3d, fr.camera)[0]
    return fr.keypoints[:, :2]


def boundary_pairs(seq: ObservedSequence) -> list[tuple[int, int]]:
    """For each shot change, the last valid frame before it and the first valid frame after it."""
    a = seq.arrays
    pairs = []
    for b in seq.boundaries():
        before = [i for i in range(b, -1, -1) if a.shot_id[i] == a.shot_id[b] and a.valid[i]]
        after = [i for i in range(b + 1, len(seq)) if a.shot_id[i] == a.shot_id[b + 1] and a.valid[i]]
        if before and after:
            pairs.append((before[0], after[0]))
    return pairs


def cross_shot_counts(estimate, seq: ObservedSequence, model: BodyModel, alphas=DEFAULT_ALPHAS):
    """Hit and evaluation counts summed over boundaries and both transfer directions.

    The body pose and shape of one frame are placed with the other frame's
    estimated global orientation and translation, projected into the other
    frame's camera, and scored against that frame's ground-truth 2D joints
    (every joint, including ones truncated in the source frame).
    """
    if not seq.boundaries():
        raise NoShotBoundaryError()
    pairs = boundary_pairs(seq)
    if not pairs:
        raise NoShotBoundaryError("no shot boundaries with valid frames on both sides")
    J = model.joint_count
    hits = np.zeros((len(alphas), J), dtype=np.int64)
    total = np.zeros(J, dtype=np.int64)
    for i, k in pairs:
        for src, dst in ((i, k), (k, i)):
            X = _posed(model, estimate.frames[src].theta_b, estimate.beta, estimate.frames[dst])
            uv = project(X, seq.frames[dst].camera)[0]
            h, m = pck_counts(uv, gt_keypoints(seq, dst), True, alphas)
            hits += h
            total += m
    return hits, total, len(pairs)


def report_from_counts(hits, total, pairs, alphas) -> PckReport:
    n = total.sum()
    if n == 0:
        raise MetricError("empty evaluation set")
    with np.errstate(invalid="ignore", divide="ignore"):
        per_joint = 100.0 * hits / total
    return PckReport(tuple(alphas), 100.0 * hits.sum(axis=1) / n, per_joint, int(pairs))


def cross_shot_pck(estimate, seq: ObservedSequence, model: BodyModel, alphas=DEFAULT_ALPHAS) -> PckReport:
    hits, total, pairs = cross_shot_counts(estimate, seq, model, alphas)
    return report_from_counts(hits, total, pairs, alphas)


def aggregate_cross_shot(estimates, seqs, model, alphas=DEFAULT_ALPHAS) -> PckReport:
    """Pooled report over sequences; sequences without usable boundaries are skipped."""
    hits = np.zeros((len(alphas), model.joint_count), dtype=np.int64)
    total = np.zeros(model.joint_count, dtype=np.int64)
    pairs = 0
    for est, seq in zip(estimates, seqs):
        try:
            h, t, p = cross_shot_counts(est, seq, model, alphas)
        except NoShotBoundaryError:
            continue
        hits += h
        total += t
        pairs += p
    if pairs == 0:
        raise NoShotBoundaryError()
    return report_from_counts(hits, total, pairs, alphas)


# ------------------------------------------------------------------ 3D


def mpjpe(pred_3d, gt_3d, root: int = 0) -> float:
    """Mean joint error in millimeters after aligning the roots."""
    pred = np.asarray(pred_3d, dtype=np.float64)
    gt = np.asarray(gt_3d, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"joint count mismatch: {pred.shape} vs {gt.shape}")
    pred = pred - pred[..., root : root + 1, :]
    gt = gt - gt[..., root : root + 1, :]
    return 1000.0 * float(np.linalg.norm(pred - gt, axis=-1).mean())


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity transform of ``pred`` (J, 3) that best matches ``gt`` in least squares."""
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    P = pred - mu_p
    G = gt - mu_g
    for name, A in (("pred", P), ("gt", G)):
        sv = np.linalg.svd(A, compute_uv=False)
        if sv.size < 2 or sv[1] <= 1e-9 * max(sv[0], 1e-300):
            raise MetricError(f"degenerate (collinear) point set in {name}")
    U, S, Vt = np.linalg.svd(P.T @ G)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    R = U @ D @ Vt  # applied on the right: P @ R
    scale = float(np.sum(S * np.diag(D))) / float(np.sum(P * P))
    return scale * P @ R + mu_g


def pa_mpjpe(pred_3d, gt_3d) -> float:
    """Mean joint error in millimeters after optimal similarity alignment (per frame)."""
    pred = np.asarray(pred_3d, dtype=np.float64)
    gt = np.asarray(gt_3d, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"joint count mismatch: {pred.shape} vs {gt.shape}")
    if pred.shape[-2] < 3:
        raise MetricError("Procrustes alignment needs at least 3 joints")
    flat_p = pred.reshape(-1, *pred.shape[-2:])
    flat_g = gt.reshape(-1, *gt.shape[-2:])
    errs = [np.linalg.norm(procrustes_align(p, g) - g, axis=-1).mean() for p, g in zip(flat_p, flat_g)]
    return 1000.0 * float(np.mean(errs))


# ------------------------------------------------------------- reports


def write_pck_csv(report: PckReport, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "pck", "pairs"])
        for a, p, n in report.rows():
            w.writerow([repr(float(a)), repr(p), n])


def read_pck_csv(path) -> list[tuple[float, float, int]]:
    with Path(path).open() as fh:
        return [(float(r["alpha"]), float(r["pck"]), int(r["pairs"])) for r in csv.DictReader(fh)]


def report_to_json(report: PckReport) -> dict:
    return {
        "alphas": list(report.alphas),
        "pck": report.pck.tolist(),
        "per_joint": [[None if np.isnan(v) else float(v) for v in row] for row in report.per_joint],
        "pairs": report.pairs,
    }


def write_report_json(report: PckReport, path) -> None:
    Path(path).write_text(json.dumps(report_to_json(report), indent=2))


def sequence_errors(estimate, seq: ObservedSequence, model: BodyModel) -> tuple[float, float]:
    """(MPJPE, PA-MPJPE) over the valid frames of a sequence with ground truth."""
    valid = np.flatnonzero(seq.arrays.valid)
    if valid.size == 0 or not seq.has_gt:
        raise MetricError("no valid frames with ground truth")
    X = estimate.joints(model)[valid]
    gt = np.stack([seq.frames[i].gt.x3d for i in valid])
    return mpjpe(X, gt), pa_mpjpe(X, gt)


def pooled_errors(estimates: Sequence, seqs: Sequence[ObservedSequence], model: BodyModel):
    preds, gts = [], []
    for est, seq in zip(estimates, seqs):
        valid = np.flatnonzero(seq.arrays.valid)
        if valid.size == 0:
            continue
        preds.append(est.joints(model)[valid])
        gts.append(np.stack([seq.frames[i].gt.x3d for i in valid]))
    if not preds:
        raise MetricError("no valid frames with ground truth")
    P = np.concatenate(preds)
    G = np.concatenate(gts)
    return mpjpe(P, G), pa_mpjpe(P, G)
