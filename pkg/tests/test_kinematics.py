import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seggrasp.kinematics import (DOWN, KinematicChain, axis_angle, forward_kinematics, gripper_position,
                                 jacobian, reference_chain, resolved_rate_step, start_configuration,
                                 translation)

CHAIN = reference_chain()
angles = st.lists(st.floats(-3.0, 3.0), min_size=7, max_size=7).map(np.array)


def _rigid(R):
    return np.allclose(R.T @ R, np.eye(3), atol=1e-9) and abs(np.linalg.det(R) - 1) < 1e-9


def test_home_pose_by_hand():
    # links stretch along +x except the 0.27 m shoulder riser above a 0.6 m base
    tool, cam = forward_kinematics(CHAIN, np.zeros(7))
    reach = 0.07 + 0.36 + 0.07 + 0.37 + 0.10 + 0.08
    np.testing.assert_allclose(tool.translation, [reach, 0, 0.6 + 0.27], atol=1e-12)
    np.testing.assert_allclose(tool.rotation, np.eye(3), atol=1e-12)
    # camera: 5 cm back along the approach (tool x), 3 cm toward -tool z, optical axis = approach
    np.testing.assert_allclose(cam.translation, [reach - 0.05, 0, 0.87 - 0.03], atol=1e-12)
    np.testing.assert_allclose(cam.rotation[:, 2], [1, 0, 0], atol=1e-12)


@given(angles, st.floats(-3, 3))
@settings(max_examples=40)
def test_base_rotation_rotates_gripper(q, theta):
    p0 = gripper_position(CHAIN, q)
    q2 = q.copy()
    q2[0] += theta
    p1 = gripper_position(CHAIN, q2)
    np.testing.assert_allclose(p1, axis_angle((0, 0, 1), theta) @ p0, atol=1e-9)


@given(angles, st.integers(0, 6))
@settings(max_examples=40)
def test_angle_periodicity(q, j):
    q2 = q.copy()
    q2[j] += 2 * np.pi
    a, b = forward_kinematics(CHAIN, q), forward_kinematics(CHAIN, q2)
    for pa, pb in zip(a, b):
        np.testing.assert_allclose(pa.translation, pb.translation, atol=1e-9)
        np.testing.assert_allclose(pa.rotation, pb.rotation, atol=1e-9)


@given(angles)
@settings(max_examples=60)
def test_poses_rigid(q):
    for pose in forward_kinematics(CHAIN, q):
        assert _rigid(pose.rotation)


def test_non_rigid_chain_rejected():
    bad = translation(0, 0, 0)
    bad[0, 0] = 2
    with pytest.raises(ValueError):
        KinematicChain(np.eye(4), [np.eye(4)] * 7, [(0, 0, 1)] * 7, bad, np.eye(4))


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(100):
        q = rng.uniform(-2.5, 2.5, 7)
        J = jacobian(CHAIN, q)
        assert np.all(np.isfinite(J))
        fd = np.zeros((3, 7))
        for i in range(7):
            e = np.zeros(7)
            e[i] = h
            fd[:, i] = (gripper_position(CHAIN, q + e) - gripper_position(CHAIN, q - e)) / (2 * h)
        assert np.max(np.abs(J[:3] - fd)) < 1e-5


def test_jacobian_axis_through_end_effector_has_zero_linear_part():
    # at zero angles the last joint (roll about +x) passes through the gripper midpoint
    J = jacobian(CHAIN, np.zeros(7))
    np.testing.assert_allclose(J[:3, 6], 0, atol=1e-12)
    np.testing.assert_allclose(J[3:, 6], [1, 0, 0], atol=1e-12)


def test_resolved_rate_zero_at_target():
    q = start_configuration(CHAIN)
    assert np.all(resolved_rate_step(CHAIN, q, gripper_position(CHAIN, q), 0.02) == 0)


def test_resolved_rate_converges():
    rng = np.random.default_rng(1)
    for _ in range(5):
        q = start_configuration(CHAIN)
        target = np.array([rng.uniform(0.4, 0.7), rng.uniform(-0.1, 0.1), rng.uniform(0.2, 0.6)])
        for _ in range(500):
            q = q + resolved_rate_step(CHAIN, q, target, 0.02)
        assert np.linalg.norm(gripper_position(CHAIN, q) - target) < 2e-3


@given(st.floats(0.4, 0.7), st.floats(-0.12, 0.12), st.floats(0.15, 0.6), st.floats(0.001, 0.05))
@settings(max_examples=40)
def test_resolved_rate_clamped_and_descending(x, y, z, max_step):
    q = start_configuration(CHAIN)
    target = np.array([x, y, z])
    dq = resolved_rate_step(CHAIN, q, target, max_step)
    assert np.max(np.abs(dq)) <= max_step + 1e-15
    before = np.linalg.norm(gripper_position(CHAIN, q) - target)
    after = np.linalg.norm(gripper_position(CHAIN, q + dq) - target)
    if before > 1e-3:
        assert after < before


def test_straight_line_tracking_is_monotone():
    q = start_configuration(CHAIN)
    target = np.array([0.5, 0.05, 0.3])
    errs = []
    for _ in range(150):
        q = q + resolved_rate_step(CHAIN, q, target, 0.02, DOWN, gain=0.5)
        errs.append(np.linalg.norm(gripper_position(CHAIN, q) - target))
    assert all(b <= a + 1e-12 for a, b in zip(errs[1:], errs[2:]))


def test_start_configuration_points_down():
    q = start_configuration(CHAIN)
    tool, _ = forward_kinematics(CHAIN, q)
    np.testing.assert_allclose(tool.translation, [0.55, 0, 0.70], atol=1e-6)
    np.testing.assert_allclose(tool.rotation, DOWN, atol=1e-6)
    assert np.all(q >= CHAIN.lower) and np.all(q <= CHAIN.upper)
