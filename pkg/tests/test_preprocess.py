import numpy as np
import pytest

from dynskin import preprocess as pp
from dynskin.body_model import forward_kinematics
from dynskin.rotations import rodrigues
from dynskin.synthetic import PoseSequence, gen_motion
from oracles import quat_from_axis_angle


def _seq(poses, fps):
    return PoseSequence(np.asarray(poses, dtype=np.float64), fps, "clip")


def test_same_rate_is_identity(rng):
    s = _seq(rng.normal(size=(12, 21)), 60.0)
    out = pp.resample_sequence(s, 60.0)
    np.testing.assert_array_equal(out.poses, s.poses)


def test_constant_pose_stays_constant(rng):
    row = rng.normal(0, 0.5, 21)
    out = pp.resample_sequence(_seq(np.tile(row, (50, 1)), 100.0), 60.0)
    np.testing.assert_allclose(out.poses, np.tile(row, (len(out), 1)), atol=1e-12)


def test_linear_ramp_100_to_60():
    T = 101  # one second at 100 fps
    poses = np.zeros((T, 21))
    t = np.arange(T) / 100.0
    poses[:, :3] = np.outer(t, [1.0, -2.0, 0.5])
    # a rotation about a fixed axis whose angle grows linearly
    axis = np.array([0.0, 0.6, 0.8])
    poses[:, 6:9] = np.outer(0.9 * t, axis)
    out = pp.resample_sequence(_seq(poses, 100.0), 60.0)
    assert len(out) == 61 and out.fps == 60.0
    tt = np.arange(61) / 60.0
    np.testing.assert_allclose(out.poses[:, :3], np.outer(tt, [1.0, -2.0, 0.5]), atol=1e-9)
    np.testing.assert_allclose(out.poses[:, 6:9], np.outer(0.9 * tt, axis), atol=1e-9)
    np.testing.assert_array_equal(out.poses[0], poses[0])


def test_slerp_takes_the_short_way():
    # 170 degrees and -170 degrees about z are 20 degrees apart through 180
    a = np.zeros(21)
    b = np.zeros(21)
    a[5] = np.deg2rad(170)
    b[5] = np.deg2rad(-170)
    out = pp.resample_sequence(_seq([a, b], 1.0), 2.0)
    mid = out.poses[1, 3:6]
    assert np.isclose(abs(mid[2]), np.pi, atol=1e-9)


def test_slerp_matches_quaternion_oracle(rng):
    r0, r1 = rng.normal(0, 0.7, 3), rng.normal(0, 0.7, 3)
    q0 = np.array(quat_from_axis_angle(r0))
    q1 = np.array(quat_from_axis_angle(r1))
    if q0 @ q1 < 0:
        q1 = -q1
    om = np.arccos(np.clip(q0 @ q1, -1, 1))
    u = 0.4
    ref = (np.sin((1 - u) * om) * q0 + np.sin(u * om) * q1) / np.sin(om)
    got = pp._slerp_batch(q0[None], q1[None], np.array([u]))[0]
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_invalid_rates():
    with pytest.raises(ValueError):
        pp.resample_sequence(_seq(np.zeros((3, 21)), 60.0), 0.0)
    with pytest.raises(ValueError):
        pp.resample_sequence(_seq(np.zeros((3, 21)), 60.0), 30.0, from_fps=-1.0)


def test_z_up_to_y_up_is_minus_quarter_turn_about_x():
    q = pp.up_axis_rotation("z", "y")
    np.testing.assert_allclose(q, [np.cos(np.pi / 4), -np.sin(np.pi / 4), 0, 0], atol=1e-15)
    poses = np.zeros((1, 21))
    poses[0, 2] = 1.0
    out = pp.reorient_root(_seq(poses, 60.0))
    np.testing.assert_allclose(out.poses[0, :3], [0.0, 1.0, 0.0], atol=1e-15)


def test_reorient_inverse_is_identity(rng):
    s = _seq(rng.normal(0, 0.5, (20, 21)), 60.0)
    back = pp.reorient_root(pp.reorient_root(s, "z", "y"), "y", "z")
    np.testing.assert_allclose(back.poses, s.poses, atol=1e-12)


def test_reorient_leaves_child_joints_and_conjugates_world(small_model):
    s = gen_motion("jumping_jack", 30, seed=3)
    out = pp.reorient_root(s)
    np.testing.assert_array_equal(out.poses[:, 6:], s.poses[:, 6:])
    C = rodrigues(np.array([-np.pi / 2, 0, 0]))
    J = small_model.rest_joints
    for t in (5, 20):
        G = forward_kinematics(small_model.parents, s.poses[t], J)
        G2 = forward_kinematics(small_model.parents, out.poses[t], J)
        np.testing.assert_allclose(G2[:, :3, :3], C @ G[:, :3, :3], atol=1e-12)
        np.testing.assert_allclose(G2[:, :3, 3] - J[0], (G[:, :3, 3] - J[0]) @ C.T, atol=1e-12)


def test_reorient_rejects_unknown_axis():
    with pytest.raises(ValueError):
        pp.up_axis_rotation("w", "y")


def test_histogram_cases():
    assert pp.motion_length_histogram([]) == []
    lengths = [120, 180, 240, 260, 320, 399, 400]
    h = pp.motion_length_histogram(lengths, bucket=100)
    assert h == [(100, 200, 2), (200, 300, 2), (300, 400, 2), (400, 500, 1)]
    assert sum(c for _, _, c in h) == len(lengths)
    with pytest.raises(ValueError):
        pp.motion_length_histogram(lengths, bucket=0)
