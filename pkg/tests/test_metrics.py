import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multishot.body_model import rodrigues
from multishot.metrics import (
    MetricError,
    NoShotBoundaryError,
    aggregate_cross_shot,
    boundary_pairs,
    cross_shot_pck,
    mpjpe,
    pa_mpjpe,
    pck,
    pck_counts,
    read_pck_csv,
    report_to_json,
    write_pck_csv,
    write_report_json,
)
from multishot.scene_sim import MotionConfig, ObservedSequence, two_shot_scene
from multishot.solver import initialize_sequence


def skeleton(seed=0, J=17):
    return np.random.default_rng(seed).normal(0, 0.3, (J, 3))


# ------------------------------------------------------------------------ PCK


def test_pck_perfect_prediction():
    gt = np.random.default_rng(0).uniform(0, 200, (17, 2))
    assert pck(gt, gt, alpha=0.05) == 100.0


def test_pck_just_outside_threshold():
    gt = np.random.default_rng(1).uniform(0, 200, (17, 2))
    size = (gt.max(0) - gt.min(0)).max()
    pred = gt + [0.1 * size + 1e-6, 0.0]
    assert pck(pred, gt, alpha=0.1) == 0.0


def test_pck_half_of_four_joints():
    gt = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0], [100.0, 100.0]])
    pred = gt + [[5.0, 0.0], [0.0, 9.9], [20.0, 0.0], [0.0, -50.0]]
    assert pck(pred, gt, alpha=0.1) == 50.0


def test_pck_mask_and_errors():
    gt = np.random.default_rng(2).uniform(0, 200, (17, 2))
    pred = gt.copy()
    pred[:5] += 500.0
    mask = np.ones(17, bool)
    mask[:5] = False
    assert pck(pred, gt, mask) == 100.0
    with pytest.raises(MetricError):
        pck(pred, gt, np.zeros(17, bool))
    with pytest.raises(MetricError):
        pck(pred[:16], gt)


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_pck_monotone_in_alpha(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 300, (4, 17, 2))
    pred = gt + rng.normal(0, 20, gt.shape)
    hits, _ = pck_counts(pred, gt, True, np.sort(rng.uniform(0, 0.5, 6)))
    counts = hits.sum(axis=(1, 2))
    assert np.all(np.diff(counts) >= 0)


# ---------------------------------------------------------------- cross-shot


def gt_estimate(model, seq):
    return initialize_sequence(seq, model, "perturbed_gt", init_noise=0.0)


def test_cross_shot_ground_truth_is_perfect(model):
    # a frozen body makes the transfer exact; under normal motion the pose differs across the cut
    still = MotionConfig(max_joint_speed=1e-9)
    for seed in range(3):
        seq = two_shot_scene(model, seed, frames_per_shot=5, noise_sigma_px=0.0, motion_cfg=still)
        rep = cross_shot_pck(gt_estimate(model, seq), seq, model, alphas=(0.05,))
        assert rep.pck[0] == 100.0
        assert rep.pairs == 1


def test_cross_shot_requires_boundary(model, scene):
    one = ObservedSequence(0, tuple(f for f in scene.frames if f.shot_id == 0), scene.beta_gt)
    with pytest.raises(NoShotBoundaryError, match="no shot boundaries"):
        cross_shot_pck(gt_estimate(model, one), one, model)
    with pytest.raises(NoShotBoundaryError):
        aggregate_cross_shot([gt_estimate(model, one)], [one], model)


def test_boundary_pairs_skip_invalid_frames(model):
    seq = two_shot_scene(model, 5, frames_per_shot=6, missing_prob=0.5)
    for i, k in boundary_pairs(seq):
        assert seq.frames[i].valid and seq.frames[k].valid
        assert seq.frames[i].shot_id + 1 == seq.frames[k].shot_id


def test_cross_shot_pck_monotone_in_alpha(model, scene):
    est = initialize_sequence(scene, model, "perturbed_gt", 0.3, seed=1)
    rep = cross_shot_pck(est, scene, model, alphas=(0.05, 0.1, 0.2, 0.5))
    assert np.all(np.diff(rep.pck) >= 0)


# ------------------------------------------------------------------------- 3D


def test_mpjpe_cases():
    gt = skeleton()
    assert mpjpe(gt, gt) == 0.0
    assert mpjpe(gt + [1.0, 2.0, 3.0], gt) == pytest.approx(0.0, abs=1e-12)
    pred = gt.copy()
    pred[1:] += [0.01, 0.0, 0.0]
    assert mpjpe(pred, gt) == pytest.approx(10.0 * 16 / 17)


def test_pa_mpjpe_removes_similarity():
    gt = skeleton(1)
    R = rodrigues(np.array([0.3, -1.2, 2.0]))
    pred = 1.7 * gt @ R.T + [0.5, -2.0, 3.0]
    assert pa_mpjpe(pred, gt) < 1e-9
    assert pa_mpjpe(gt, gt) < 1e-12


def euler_grid(step_deg=2.0):
    """Rotations z(a) y(b) z(c) on a regular grid covering SO(3)."""
    a = np.radians(np.arange(0.0, 360.0, step_deg))
    b = np.radians(np.arange(0.0, 180.0 + step_deg / 2, step_deg))
    return a, b


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def rot_y(b):
    c, s = np.cos(b), np.sin(b)
    z, o = np.zeros_like(b), np.ones_like(b)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def test_pa_mpjpe_matches_brute_force_grid():
    """Mean error at the least squares grid point; Procrustes solves the same least squares problem."""
    rng = np.random.default_rng(2)
    gt = rng.normal(0, 0.3, (5, 3))
    pred = 1.3 * rng.normal(0, 0.3, (5, 3)) + 1.0
    P = pred - pred.mean(0)
    G = gt - gt.mean(0)
    a, b = euler_grid()
    Rz = rot_z(a)
    R = np.einsum("iab,mbc,kcd->mikad", Rz, rot_y(b), Rz).reshape(-1, 3, 3)
    Q = np.einsum("nab,jb->nja", R, P)
    # a negative scale would be a reflection
    s_ls = np.maximum(np.einsum("nja,ja->n", Q, G) / np.sum(P * P), 0.0)
    sse = np.sum((s_ls[:, None, None] * Q - G) ** 2, axis=(1, 2))
    top = Q[np.argsort(sse)[:200]]
    E = np.linspace(0.0, 3.0, 3001)[:, None, None, None] * top[None] - G
    i, j = np.unravel_index(np.argmin(np.sum(E * E, axis=(-1, -2))), E.shape[:2])
    best = 1000.0 * float(np.linalg.norm(E[i, j], axis=-1).mean())
    assert pa_mpjpe(pred, gt) == pytest.approx(best, rel=0.02)


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_pa_never_exceeds_root_aligned(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(0, 0.3, (17, 3))
    pred = gt + rng.normal(0, 0.1, gt.shape)
    assert pa_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-9


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_metrics_invariant_to_rigid_change_of_both(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(0, 0.3, (17, 3))
    pred = gt + rng.normal(0, 0.1, gt.shape)
    R, t = rodrigues(rng.normal(size=3)), rng.normal(size=3)
    assert mpjpe(pred @ R.T + t, gt @ R.T + t) == pytest.approx(mpjpe(pred, gt), rel=1e-9)
    assert pa_mpjpe(pred @ R.T + t, gt @ R.T + t) == pytest.approx(pa_mpjpe(pred, gt), rel=1e-7)


def test_pa_rejects_degenerate_input():
    line = np.outer(np.arange(5.0), [1.0, 0.0, 0.0])
    with pytest.raises(MetricError, match="collinear"):
        pa_mpjpe(line, skeleton(3, 5))
    with pytest.raises(MetricError):
        pa_mpjpe(skeleton(0, 2), skeleton(1, 2))
    with pytest.raises(MetricError):
        mpjpe(skeleton(0, 4), skeleton(0, 5))


# ------------------------------------------------------------------------ I/O


def test_report_io(model, scene, tmp_path):
    est = initialize_sequence(scene, model, "perturbed_gt", 0.2, seed=2)
    rep = cross_shot_pck(est, scene, model)
    write_pck_csv(rep, tmp_path / "r.csv")
    assert read_pck_csv(tmp_path / "r.csv") == rep.rows()
    write_report_json(rep, tmp_path / "r.json")
    doc = report_to_json(rep)
    assert doc["pairs"] == rep.pairs and len(doc["per_joint"]) == len(rep.alphas)
    assert (tmp_path / "r.json").read_text().startswith("{")
