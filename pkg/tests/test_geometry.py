import numpy as np
import pytest

from telesim.geometry import (
    Pose,
    orientation_angle_between,
    quat_from_axis_angle,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_to_rotvec,
)


def test_quat_normalize_keeps_unit_inputs_exact():
    q = np.array([1.0, 0.0, 0.0, 0.0])
    assert np.array_equal(quat_normalize(q), q)


def test_quat_normalize_rejects_zero():
    with pytest.raises(ValueError):
        quat_normalize([0, 0, 0, 0])


def test_pose_invariant_unit_norm():
    p = Pose((1, 2, 3), (2, 0, 0, 0))
    assert abs(np.linalg.norm(p.orientation) - 1.0) <= 1e-9


def test_pose_is_immutable():
    p = Pose()
    with pytest.raises(AttributeError):
        p.position = np.zeros(3)
    with pytest.raises(ValueError):
        p.position[0] = 1.0


def test_compose_inverse_roundtrip():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = Pose(rng.normal(size=3), rng.normal(size=4))
        b = Pose(rng.normal(size=3), rng.normal(size=4))
        ab = a.compose(b)
        back = a.inverse().compose(ab)
        assert np.allclose(back.position, b.position, atol=1e-12)
        assert min(
            np.abs(back.orientation - b.orientation).max(),
            np.abs(back.orientation + b.orientation).max(),
        ) < 1e-12


def test_rotation_right_handed():
    # +90 deg about z maps x to y
    q = quat_from_axis_angle((0, 0, 1), np.pi / 2)
    assert np.allclose(quat_rotate(q, (1, 0, 0)), (0, 1, 0), atol=1e-15)


def test_rotvec_roundtrip():
    rng = np.random.default_rng(4)
    for _ in range(100):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0, np.pi - 1e-6)
        q = quat_from_axis_angle(axis, angle)
        rv = quat_to_rotvec(q)
        assert np.isclose(np.linalg.norm(rv), angle, atol=1e-12)


def test_orientation_angle_between():
    qa = quat_from_axis_angle((1, 0, 0), 0.3)
    qb = quat_from_axis_angle((1, 0, 0), 0.8)
    assert np.isclose(orientation_angle_between(qa, qb), 0.5, atol=1e-12)
