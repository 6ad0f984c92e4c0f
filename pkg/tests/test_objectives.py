import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multishot.body_model import BodyModel, FrameParams, fk_batch
from multishot.camera import Camera, project
from multishot.objectives import (
    MODES,
    Weights,
    e_prior,
    e_proj,
    e_sm_joint,
    e_sm_param,
    evaluate,
    geman_mcclure,
    pack,
    smoothing_pairs,
    total_energy,
)
from multishot.scene_sim import FrameObservation, ObservedSequence, two_shot_scene
from multishot.solver import initialize_sequence

from conftest import central_difference, relative_error


def random_frame(rng, J=17, depth=4.0):
    return FrameParams(rng.normal(0, 1, 3), rng.normal(0, 0.3, 3) + [0, 0, depth], rng.normal(0, 0.4, (J - 1, 3)))


def exact_observation(model, frame, beta, conf=1.0, valid=1):
    X = fk_batch(model, frame.r_gl[None], frame.t_gl[None], frame.theta_b[None], beta, False).X[0]
    uv, _ = project(X, Camera())
    kp = np.concatenate([uv, np.full((len(uv), 1), conf)], axis=1)
    return FrameObservation(0, 0, valid, kp, Camera())


def perturbed(model, seq, noise, seed):
    est = initialize_sequence(seq, model, "perturbed_gt", noise, seed)
    return est.vector()


# ----------------------------------------------------------------- projection


def test_perfect_fit_has_zero_projection_energy(model):
    rng = np.random.default_rng(0)
    fr, beta = random_frame(rng), rng.normal(0, 0.5, 2)
    value, g_frame, g_beta = e_proj(fr, beta, exact_observation(model, fr, beta), model)
    assert value == pytest.approx(0.0, abs=1e-18)
    assert np.abs(g_frame).max() < 1e-9


def test_zero_confidence_frame_is_unobserved(model):
    rng = np.random.default_rng(1)
    fr, beta = random_frame(rng), rng.normal(0, 0.5, 2)
    obs = exact_observation(model, fr, beta, conf=0.0)
    obs = FrameObservation(0, 0, 1, obs.keypoints + [30.0, -20.0, 0.0], obs.camera)
    value, g_frame, g_beta = e_proj(fr, beta, obs, model)
    assert value == 0.0
    assert not np.any(g_frame) and not np.any(g_beta)


def test_geman_mcclure_at_sigma():
    sigma = 50.0
    rho, _ = geman_mcclure(np.array([sigma**2]), sigma)
    assert rho[0] == pytest.approx(sigma**2 / 2, rel=1e-15)


def test_single_joint_residual_closed_form(model):
    rng = np.random.default_rng(2)
    fr, beta = random_frame(rng), np.zeros(2)
    obs = exact_observation(model, fr, beta)
    kp = obs.keypoints.copy()
    kp[:, 2] = 0.0
    kp[5, 2] = 1.0
    kp[5, :2] += [30.0, 40.0]  # r = 50 = sigma
    value, *_ = e_proj(fr, beta, FrameObservation(0, 0, 1, kp, obs.camera), model)
    assert value == pytest.approx(50.0**2 / 2, rel=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.floats(1.0, 200.0))
def test_geman_mcclure_bounded(seed, sigma):
    rng = np.random.default_rng(seed)
    r2 = rng.exponential(sigma**2 * 10, 17)
    conf = rng.uniform(0, 1, 17)
    rho, _ = geman_mcclure(r2, sigma)
    assert np.all(rho >= 0)
    assert float(conf @ rho) <= sigma**2 * conf.sum()


# ---------------------------------------------------------------------- prior


def test_prior_at_rest_is_zero(model):
    value, g, gb = e_prior(FrameParams.rest(model), np.zeros(2))
    assert value == 0.0 and not g.any() and not gb.any()


def test_prior_single_entry():
    theta = np.zeros((16, 3))
    theta[4, 1] = 1.0
    value, *_ = e_prior(FrameParams(np.zeros(3), np.zeros(3), theta), np.zeros(2))
    assert value == pytest.approx(0.1)


def test_prior_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    fr, beta = random_frame(rng), rng.normal(size=2)
    _, g, gb = e_prior(fr, beta)
    z = np.concatenate([fr.vector(), beta])
    fd = central_difference(lambda v: e_prior(FrameParams.from_vector(v[:-2]), v[-2:])[0], z)
    assert np.abs(np.concatenate([g, gb]) - fd).max() < 1e-6
    assert np.allclose(g[6:], 0.2 * fr.theta_b.ravel())


# ----------------------------------------------------------------- smoothness


def test_joint_smoothness_ignores_rigid_parameters(model):
    rng = np.random.default_rng(4)
    theta = rng.normal(0, 0.4, (16, 3))
    a = FrameParams(rng.normal(size=3), rng.normal(size=3), theta)
    b = FrameParams(rng.normal(size=3), rng.normal(size=3), theta)
    value, g_a, g_b, g_beta = e_sm_joint(a, b, rng.normal(size=2), model)
    assert value == 0.0
    assert not g_a[:6].any() and not g_b[:6].any()


def test_joint_smoothness_small_elbow_angle():
    rest = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    chain = BodyModel(np.array([-1, 0, 1]), rest, np.zeros((3, 1, 3)))
    delta = 0.01
    a = FrameParams(np.zeros(3), np.zeros(3), np.zeros((2, 3)))
    b = FrameParams(np.zeros(3), np.zeros(3), np.array([[0.0, 0.0, delta], [0.0, 0.0, 0.0]]))
    value, *_ = e_sm_joint(a, b, np.zeros(1), chain)
    assert value == pytest.approx((1.0 * delta) ** 2, rel=0.01)


def test_param_smoothness_cases():
    z = np.zeros((16, 3))
    a = FrameParams(np.ones(3), np.zeros(3), z)
    assert e_sm_param(a, FrameParams(np.zeros(3), np.ones(3), z))[0] == 0.0
    e = z.copy()
    e[7, 2] = 1.0
    assert e_sm_param(a, FrameParams(np.zeros(3), np.zeros(3), e))[0] == 1.0
    rng = np.random.default_rng(5)
    p, q = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
    brute = sum((p.ravel()[i] - q.ravel()[i]) ** 2 for i in range(48))
    value = e_sm_param(FrameParams(np.zeros(3), np.zeros(3), p), FrameParams(np.zeros(3), np.zeros(3), q))[0]
    assert abs(value - brute) < 1e-12


def test_single_term_helpers_agree_with_sequence_energy(model, scene):
    x = perturbed(model, scene, 0.1, 0)
    W = Weights()
    br, _ = evaluate(x, scene, W, model, "multi_shot")
    B = 2
    frames = [FrameParams.from_vector(row) for row in x[B:].reshape(len(scene), -1)]
    beta = x[:B]
    proj = sum(e_proj(f, beta, o, model)[0] for f, o in zip(frames, scene.frames))
    smj = sum(e_sm_joint(frames[i], frames[i + 1], beta, model)[0] for i in range(len(frames) - 1))
    smp = sum(e_sm_param(frames[i], frames[i + 1])[0] for i in range(len(frames) - 1))
    assert br.e_proj == pytest.approx(proj, rel=1e-12)
    assert br.e_sm_joint == pytest.approx(smj, rel=1e-12)
    assert br.e_sm_param == pytest.approx(smp, rel=1e-12)


# ---------------------------------------------------------------------- total


def test_single_frame_sequence_has_no_smoothness(model):
    seq = two_shot_scene(model, 0, frames_per_shot=2)
    one = ObservedSequence(0, seq.frames[:1], seq.beta_gt)
    x = perturbed(model, one, 0.2, 1)
    br, _ = evaluate(x, one, Weights(), model)
    assert br.e_sm_joint == 0.0 and br.e_sm_param == 0.0
    assert br.total == pytest.approx(br.e_proj + br.e_prior, rel=1e-14)


def test_all_invalid_frames_leave_only_prior(model, scene):
    frames = tuple(
        FrameObservation(f.t, f.shot_id, 0, np.zeros_like(f.keypoints), f.camera, f.gt) for f in scene.frames
    )
    seq = ObservedSequence(0, frames, scene.beta_gt)
    x = np.random.default_rng(6).normal(0, 0.3, 2 + 54 * len(seq))
    br, _ = evaluate(x, seq, Weights(), model)
    assert br.e_proj == 0.0 and br.e_sm_joint == 0.0 and br.e_sm_param == 0.0
    assert br.total == br.e_prior > 0


def test_layout_mismatch(model, scene):
    with pytest.raises(ValueError):
        evaluate(np.zeros(10), scene, Weights(), model)
    fr = FrameParams.rest(model)
    with pytest.raises(ValueError):
        total_energy((np.zeros(2), [fr]), scene, Weights(), model)


def test_breakdown_total_is_weighted_sum(model, scene):
    W = Weights(w_proj=0.7, w_prior_pose=0.3, w_prior_shape=2.0, w_sm_joint=3.0, w_sm_param=0.5)
    x = perturbed(model, scene, 0.2, 2)
    br, _ = evaluate(x, scene, W, model)
    expected = 0.7 * br.e_proj + br.e_prior + 3.0 * br.e_sm_joint + 0.5 * br.e_sm_param
    assert abs(br.total - expected) < 1e-10 * max(1.0, br.total)
    assert br.per_frame_proj.sum() == pytest.approx(br.e_proj)
    assert min(br.e_proj, br.e_prior, br.e_sm_joint, br.e_sm_param) >= 0


def test_smoothness_invariant_to_rigid_changes(model, scene):
    x = perturbed(model, scene, 0.2, 3)
    y = x.copy()
    rng = np.random.default_rng(7)
    for i in range(len(scene)):
        y[2 + 54 * i : 2 + 54 * i + 6] = rng.normal(size=6) + [0, 0, 0, 0, 0, 5]
    a, _ = evaluate(x, scene, Weights(), model, "multi_shot")
    b, _ = evaluate(y, scene, Weights(), model, "multi_shot")
    assert a.e_sm_joint == b.e_sm_joint
    assert a.e_sm_param == b.e_sm_param


def test_single_shot_smoothness_uses_camera_frame(model, scene):
    x = perturbed(model, scene, 0.2, 4)
    y = x.copy()
    y[2 + 3 : 2 + 6] += [0.3, 0.0, 0.0]  # move frame 0 root
    a, _ = evaluate(x, scene, Weights(), model, "single_shot")
    b, _ = evaluate(y, scene, Weights(), model, "single_shot")
    assert a.e_sm_joint != b.e_sm_joint


def test_smoothing_pairs_by_mode(model):
    seq = two_shot_scene(model, 1, frames_per_shot=4, missing_prob=0.0)
    frames = list(seq.frames)
    f = frames[2]
    frames[2] = FrameObservation(f.t, f.shot_id, 0, np.zeros_like(f.keypoints), f.camera, f.gt)
    seq = ObservedSequence(0, tuple(frames), seq.beta_gt)
    i, k, w = smoothing_pairs(seq, "multi_shot")
    assert list(zip(i, k)) == [(0, 1), (1, 3), (3, 4), (4, 5), (5, 6), (6, 7)]
    assert w[1] == 0.5 and np.all(np.delete(w, 1) == 1.0)
    i, k, _ = smoothing_pairs(seq, "single_shot")
    assert (3, 4) not in list(zip(i, k))
    assert smoothing_pairs(seq, "single_frame")[0].size == 0
    with pytest.raises(ValueError):
        smoothing_pairs(seq, "bogus")


def _random_instance(model, seed):
    rng = np.random.default_rng(seed)
    seq = two_shot_scene(
        model, seed, frames_per_shot=int(rng.integers(1, 3)) + 1,
        truncated_shot=[None, 0, 1][seed % 3], missing_prob=0.25,
    )
    seq = ObservedSequence(0, seq.frames[: min(len(seq), 5)], seq.beta_gt)
    x = initialize_sequence(seq, model, "perturbed_gt", 0.3, seed).vector()
    x[:2] = rng.normal(0, 1, 2)
    W = Weights(*rng.uniform(0.1, 3.0, 5), gm_sigma=float(rng.uniform(20, 80)))
    return seq, x, W, MODES[seed % 3]


def test_gradient_matches_finite_differences_on_random_instances(model):
    worst = 0.0
    for seed in range(25):
        seq, x, W, mode = _random_instance(model, seed)
        _, g = evaluate(x, seq, W, model, mode)
        fd = central_difference(lambda z: evaluate(z, seq, W, model, mode, gradient=False)[0].total, x)
        worst = max(worst, relative_error(g, fd))
    assert worst < 1e-4


def test_curvature_exact_for_quadratic_terms(model, scene):
    """Without the data and joint terms the energy is quadratic, so the returned matrix is its Hessian."""
    W = Weights(w_proj=0.0, w_sm_joint=0.0, w_prior_pose=0.4, w_prior_shape=1.5, w_sm_param=2.0)
    x = perturbed(model, scene, 0.3, 5)
    _, _, H = evaluate(x, scene, W, model, "multi_shot", curvature=True)
    cols = np.random.default_rng(8).choice(x.size, 30, replace=False)
    for c in cols:
        e = np.zeros_like(x)
        e[c] = 1e-4
        gp = evaluate(x + e, scene, W, model)[1]
        gm = evaluate(x - e, scene, W, model)[1]
        assert np.abs(H[:, c].toarray().ravel() - (gp - gm) / 2e-4).max() < 1e-6


@pytest.mark.parametrize("mode", MODES)
def test_curvature_symmetric_positive_semidefinite(model, scene, mode):
    x = perturbed(model, scene, 0.2, 6)
    _, _, H = evaluate(x, scene, Weights(), model, mode, curvature=True)
    Hd = H.toarray()
    assert np.abs(Hd - Hd.T).max() < 1e-8 * np.abs(Hd).max()
    assert np.linalg.eigvalsh(Hd).min() > -1e-8 * np.abs(Hd).max()


def test_total_energy_accepts_parameter_tuple(model, scene):
    x = perturbed(model, scene, 0.2, 7)
    frames = [FrameParams.from_vector(r) for r in x[2:].reshape(len(scene), -1)]
    a, ga = total_energy((x[:2], frames), scene, Weights(), model)
    b, gb = total_energy(pack(x[:2], frames), scene, Weights(), model)
    assert a.total == b.total and np.array_equal(ga, gb)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        Weights(w_sm_joint=-1.0)
