import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relocvo.errors import ConfigurationError, DegenerateMarginalizationError, ObservationInvalid, TrackingLostError
from relocvo.geometry import SE3
from relocvo.odometry import (
    DROPPED,
    MARGINALIZED,
    DirectOdometry,
    Frame,
    Keyframe,
    OdometryConfig,
    RelativePrior,
    Window,
    bilinear,
    collect_observations,
    marginalize_keyframe,
    photometric_residual,
    select_reloc_priors,
    track_frame,
    window_energy,
    windowed_ba,
)
from relocvo.reloc import RelocResult
from relocvo.solver import MarginalFactor, MarginalPrior, VariableBlock, linearize

from synthetic import (
    CAMERA,
    SMOOTH,
    frame_at,
    keyframe_at,
    path_pose,
    perturb,
    photometric_case,
    photometric_fd_error,
    relative_translation_error,
    world,
)

BA_STOPS = (0.0, 0.3, 0.6, 0.9)


def reloc(fid, pose):
    return RelocResult(fid, pose, [], [], 0, 0.0)


@pytest.fixture(scope="module")
def smooth():
    return world(0, SMOOTH)


def bare_keyframe(fid, pose, reloc_pose=None):
    """Keyframe without points, so only pose factors act on it."""
    frame = Frame(fid, 0.1 * fid, [np.zeros((16, 16)), np.zeros((8, 8))])
    return Keyframe(frame, pose, CAMERA, reloc=None if reloc_pose is None else reloc(fid, reloc_pose))


def ba_window(w, relocs=None, information=1e2, weight=1e3):
    """Four keyframes along the path, all but the first displaced by 5 cm."""
    truth = {k: path_pose(s) for k, s in enumerate(BA_STOPS)}
    kfs = []
    for k in truth:
        kf = keyframe_at(w, truth[k], k, fixed=k == 0, reloc=None if relocs is None else reloc(k, relocs[k]))
        if k:
            kf.pose = perturb(truth[k], np.random.default_rng(k))
        kfs.append(kf)
    return Window(w=weight, information=np.eye(6) * information, keyframes=kfs), truth


# -- photometric residual ------------------------------------------------------


def test_residual_vanishes_against_own_frame(smooth):
    kf = keyframe_at(smooth, path_pose(0.4), 0)
    for i in range(0, len(kf), 7):
        r = photometric_residual(kf.point(i), kf, kf.frame, kf.pose)[0]
        assert np.abs(r).max() < 1e-12


def test_rendered_pair_residual_is_interpolation_error(smooth):
    host = keyframe_at(smooth, path_pose(0.0), 0)
    target = keyframe_at(smooth, path_pose(0.3), 1)
    worst, seen = 0.0, 0
    for i in range(len(host)):
        try:
            r = photometric_residual(host.point(i), host, target)[0]
        except ObservationInvalid:
            continue
        worst, seen = max(worst, np.abs(r).max()), seen + 1
    assert seen > 50
    assert worst < 1e-3


def test_residual_jacobians_match_central_differences(smooth):
    rng = np.random.default_rng(11)
    errors = []
    while len(errors) < 20:
        try:
            errors.append(photometric_fd_error(*photometric_case(smooth, rng)))
        except ObservationInvalid:
            continue
    assert max(errors) < 1e-4


def test_residual_outside_target_is_invalid(smooth):
    host = keyframe_at(smooth, path_pose(0.0), 0)
    away = SE3.exp(np.r_[0, 0, 0, 0, np.pi, 0]) @ host.pose
    with pytest.raises(ObservationInvalid):
        photometric_residual(host.point(0), host, host.frame, away)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 14), st.integers(0, 10), st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.integers(0, 3))
def test_bilinear_gradient_matches_value(x, y, fu, fv, seed):
    img = np.random.default_rng(seed).random((12, 16))
    uv = np.array([x + fu, y + fv])  # strictly inside one cell, where the interpolant is smooth
    _, g = bilinear(img, uv)
    h = 1e-6
    for axis in range(2):
        e = np.zeros(2)
        e[axis] = h
        fd = (bilinear(img, uv + e)[0] - bilinear(img, uv - e)[0]) / (2 * h)
        assert abs(fd - g[axis]) < 1e-6


# -- priors -------------------------------------------------------------------


@given(st.integers(0, 5), st.integers(0, 5))
def test_relative_prior_needs_distinct_keyframes(i, j):
    if i == j:
        with pytest.raises(ConfigurationError):
            RelativePrior(i, j, SE3.identity())
    else:
        assert RelativePrior(i, j, SE3.identity()).i == i


@given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6))
def test_relative_prior_information_must_be_nonnegative_diagonal(diag):
    if min(diag) < 0:
        with pytest.raises(ConfigurationError):
            RelativePrior(0, 1, SE3.identity(), np.diag(diag))
    else:
        RelativePrior(0, 1, SE3.identity(), np.diag(diag))


def test_relative_prior_rejects_off_diagonal_information():
    info = np.eye(6)
    info[0, 1] = 0.5
    with pytest.raises(ConfigurationError):
        RelativePrior(0, 1, SE3.identity(), info)


def _prior_window(relocalized):
    kfs = [bare_keyframe(k, SE3.identity(), SE3.identity() if k in relocalized else None) for k in (1, 2, 3, 4)]
    return Window(keyframes=kfs)


def test_priors_pick_latest_earlier_partners():
    priors = select_reloc_priors(_prior_window({1, 2, 3, 4}), 4)
    assert [(p.i, p.j) for p in priors] == [(4, 3), (4, 2)]


def test_no_relocalization_gives_no_priors():
    win = _prior_window(set())
    assert all(select_reloc_priors(win, k) == [] for k in (1, 2, 3, 4))
    assert win.priors() == []


def test_single_partner_gives_single_prior():
    priors = select_reloc_priors(_prior_window({2, 4}), 4)
    assert [(p.i, p.j) for p in priors] == [(4, 2)]


def test_prior_transform_is_relative_relocalization():
    a = SE3.exp(np.r_[0.1, 0.2, 0.3, 0.01, 0.02, 0.03])
    b = SE3.exp(np.r_[-0.2, 0.0, 0.5, 0.0, -0.04, 0.0])
    win = Window(keyframes=[bare_keyframe(0, a, a), bare_keyframe(1, b, b)])
    (prior,) = select_reloc_priors(win, 1)
    np.testing.assert_allclose(prior.T.matrix(), (b @ a.inverse()).matrix(), atol=1e-12)
    assert prior.energy(win.poses()) < 1e-20


# -- tracking -----------------------------------------------------------------


def test_tracking_identical_frame_with_identity_prior(smooth):
    ref = keyframe_at(smooth, path_pose(0.0), 0, fixed=True)
    frame, _ = frame_at(smooth, path_pose(0.0), 1)
    res = track_frame(Window(keyframes=[ref]), frame, RelativePrior(0, 1, SE3.identity()))
    assert np.abs((res.pose @ ref.pose.inverse()).log()).max() < 1e-12
    assert res.energy < 1e-20


@pytest.mark.parametrize("s", [0.1, 0.2, 0.3])
def test_tracking_with_perfect_prior(smooth, s):
    ref = keyframe_at(smooth, path_pose(0.0), 0, fixed=True)
    gt = path_pose(s)
    frame, _ = frame_at(smooth, gt, 1)
    res = track_frame(Window(keyframes=[ref]), frame, RelativePrior(0, 1, ref.pose @ gt.inverse()))
    assert np.linalg.norm(res.pose.inverse().t - gt.inverse().t) < 1e-3


def test_tracking_prior_must_start_at_reference(smooth):
    ref = keyframe_at(smooth, path_pose(0.0), 0)
    frame, _ = frame_at(smooth, path_pose(0.1), 1)
    with pytest.raises(ConfigurationError):
        track_frame(Window(keyframes=[ref]), frame, RelativePrior(5, 1, SE3.identity()))


def test_tracking_lost_on_unrelated_frame(smooth):
    ref = keyframe_at(smooth, path_pose(0.0), 0)
    frame = Frame(1, 0.1, [np.zeros(im.shape) for im in ref.frame.pyramid])
    with pytest.raises(TrackingLostError):
        track_frame(Window(keyframes=[ref]), frame)


def test_constant_motion_tracking(smooth):
    _, depth = frame_at(smooth, path_pose(0.0), 0)
    odo = DirectOdometry(CAMERA, OdometryConfig(keyframe_every=100), path_pose(0.0), depth)
    worst = 0.0
    for k in range(12):
        gt = path_pose(0.03 * k)
        frame, _ = frame_at(smooth, gt, k)
        odo.process(frame)
        worst = max(worst, np.linalg.norm(odo.records[-1].pose.inverse().t - gt.inverse().t))
    assert worst < 1e-2


def test_static_scene_tracks_identity(smooth):
    start = path_pose(0.0)
    frame, depth = frame_at(smooth, start, 0)
    odo = DirectOdometry(CAMERA, OdometryConfig(keyframe_every=2), start, depth)
    for k in range(8):
        odo.process(Frame(k, 0.1 * k, frame.pyramid))
    for rec in odo.records:
        assert np.abs((rec.pose @ start.inverse()).log()).max() < 1e-6


# -- bundle adjustment -------------------------------------------------------


def test_ba_at_ground_truth_does_not_move(smooth):
    truth = {k: path_pose(s) for k, s in enumerate(BA_STOPS)}
    win = Window(keyframes=[keyframe_at(smooth, truth[k], k, fixed=k == 0) for k in truth])
    res = windowed_ba(win)
    # rendered intensities are exact texture samples, so bilinear reconstruction leaves an
    # energy floor near 1e-6 that the weakly observed translation/rotation direction can trade
    assert res.energies[0].photo < 1e-5
    assert res.energies[0].total - res.final.total < 1e-6
    assert relative_translation_error(win.poses(), truth) < 2e-3


def test_ba_recovers_perturbed_poses(smooth):
    win, truth = ba_window(smooth)
    assert relative_translation_error(win.poses(), truth) > 0.02
    windowed_ba(win, max_iterations=30, decrease_tolerance=0)
    assert relative_translation_error(win.poses(), truth) < 5e-3


def test_ba_perfect_priors_beat_no_priors(smooth):
    plain, truth = ba_window(smooth)
    windowed_ba(plain, max_iterations=30, decrease_tolerance=0)
    with_priors, _ = ba_window(smooth, relocs=truth)
    windowed_ba(with_priors, max_iterations=30, decrease_tolerance=0)
    assert relative_translation_error(with_priors.poses(), truth) < relative_translation_error(plain.poses(), truth)


def test_ba_needs_two_keyframes(smooth):
    with pytest.raises(ConfigurationError):
        windowed_ba(Window(keyframes=[keyframe_at(smooth, path_pose(0.0), 0)]))


def test_energy_log_decomposes_at_every_iterate(smooth):
    truth = {k: path_pose(s) for k, s in enumerate(BA_STOPS)}
    rng = np.random.default_rng(5)
    relocs = {k: perturb(p, rng, 0.01) for k, p in truth.items()}
    win, _ = ba_window(smooth, relocs=relocs)
    obs = collect_observations(win.keyframes)
    res = windowed_ba(win, max_iterations=10, decrease_tolerance=0)
    assert res.iterations > 1
    for e in res.energies:
        assert abs(e.total - (e.photo + win.w * e.pose + e.marginal)) < 1e-9
    # the last iterate recomputed on the updated window over the same observations
    again = window_energy(win, obs)
    assert abs(again.total - res.final.total) < 1e-9


def test_priors_dominate_at_large_weight(smooth):
    truth = {k: path_pose(s) for k, s in enumerate(BA_STOPS)}
    rng = np.random.default_rng(7)
    offset = {k: SE3.exp(np.r_[rng.normal(scale=0.01, size=3), rng.normal(scale=0.005, size=3)]) @ p
              for k, p in truth.items()}
    win, _ = ba_window(smooth, relocs=offset, weight=1e6)
    windowed_ba(win, max_iterations=50, decrease_tolerance=0)
    poses = win.poses()
    assert max(np.abs(p.error(poses)).max() for p in win.priors()) < 1e-6


def test_zero_information_priors_match_no_priors(smooth):
    a, truth = ba_window(smooth, relocs={k: path_pose(s) for k, s in enumerate(BA_STOPS)}, information=0.0)
    b, _ = ba_window(smooth)
    assert len(a.priors()) > 0
    ra = windowed_ba(a, max_iterations=30, decrease_tolerance=0)
    rb = windowed_ba(b, max_iterations=30, decrease_tolerance=0)
    assert ra.iterations == rb.iterations
    for k in truth:
        assert np.abs(a.poses()[k].matrix() - b.poses()[k].matrix()).max() < 1e-12
    for x, y in zip(a.keyframes, b.keyframes):
        assert np.abs(x.idepth - y.idepth).max() < 1e-12


# -- marginalization ---------------------------------------------------------


def test_marginalizing_from_pair_leaves_unary_prior(smooth):
    win = Window(keyframes=[keyframe_at(smooth, path_pose(s), k, fixed=k == 0) for k, s in enumerate((0.0, 0.3))])
    ev = marginalize_keyframe(win, 0)
    assert win.ids() == [1]
    assert win.marginal.keys == [1] and win.marginal.H.shape == (6, 6)
    status = ev.keyframe.status
    assert np.all((status == MARGINALIZED) | (status == DROPPED))
    assert ev.marginalized_points + ev.dropped_points == len(ev.keyframe)


def test_marginalizing_only_keyframe_is_degenerate(smooth):
    win = Window(keyframes=[keyframe_at(smooth, path_pose(0.0), 0)])
    with pytest.raises(DegenerateMarginalizationError):
        marginalize_keyframe(win, 0)


def test_marginalization_event_carries_relocalization(smooth):
    pose = path_pose(0.0)
    found = reloc(0, pose)
    win = Window(keyframes=[keyframe_at(smooth, pose, 0, reloc=found), keyframe_at(smooth, path_pose(0.3), 1)])
    ev = marginalize_keyframe(win, 0)
    assert ev.reloc is found
    assert ev.keyframe.id == 0


def _stationary_gradient(win):
    factors = [p.factor(win.w) for p in win.priors()] + [MarginalFactor(win.marginal)]
    blocks = [VariableBlock(k, 6, i == 0) for i, k in enumerate(win.ids())]
    return np.abs(linearize(factors, win.poses(), blocks).b).max()


def test_marginalized_survivors_keep_full_solution():
    # pose-only window: consistent relocalization priors against a conflicting Gaussian prior
    rng = np.random.default_rng(3)
    truth = [SE3.exp(np.r_[0.3 * k, 0.05 * k, 0, 0, 0.1 * k, 0]) for k in range(4)]
    relocs = [SE3.exp(rng.normal(scale=0.02, size=6)) @ t for t in truth]
    A = rng.normal(size=(24, 24))
    anchor = {k: SE3.exp(rng.normal(scale=0.05, size=6)) @ truth[k] for k in range(4)}
    seed = MarginalPrior(list(range(4)), [6] * 4, A @ A.T + 24 * np.eye(24), rng.normal(size=24), anchor)
    # max_priors covers every partner so dropping a keyframe cannot promote a new prior
    win = Window(max_priors=3, marginal=seed, keyframes=[bare_keyframe(k, truth[k], relocs[k]) for k in range(4)])
    windowed_ba(win, max_iterations=100, step_tolerance=1e-14, decrease_tolerance=0)
    assert _stationary_gradient(win) < 1e-6
    full = win.poses()
    marginalize_keyframe(win, 2)
    assert win.ids() == [0, 1, 3]
    assert _stationary_gradient(win) < 1e-6
    windowed_ba(win, max_iterations=100, step_tolerance=1e-14, decrease_tolerance=0)
    for k in win.ids():
        assert np.abs((full[k].inverse() @ win.poses()[k]).log()).max() < 1e-9


def test_odometry_flush_emits_every_keyframe(smooth):
    _, depth = frame_at(smooth, path_pose(0.0), 0)
    odo = DirectOdometry(CAMERA, OdometryConfig(window_size=3, keyframe_every=2), path_pose(0.0), depth)
    events = []
    for k in range(12):
        frame, _ = frame_at(smooth, path_pose(0.03 * k), k)
        events += odo.process(frame)
    assert len(odo.window) == 3
    events += odo.finish()
    assert [ev.keyframe.id for ev in events] == list(range(0, 12, 2))
    assert sorted(odo.keyframe_trajectory()) == list(range(0, 12, 2))


@pytest.mark.parametrize("field,value", [("window_size", 1), ("keyframe_every", 0), ("w", -1.0), ("prior_information", -1.0)])
def test_odometry_config_validation(field, value):
    with pytest.raises(ConfigurationError):
        OdometryConfig(**{field: value})
