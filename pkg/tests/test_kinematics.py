import numpy as np
import pytest

from telesim import kinematics as kin
from telesim.geometry import Pose, quat_conj, quat_mul, quat_to_rotvec

# content hashes of the shipped chain configs; these pin the canonical text
PLANAR2_DIGEST = "da4e26ffd6daef0fea596dbfbb70308a1f36b1ea168b6f0a11f62e080a5a4abb"
PSM6_DIGEST = "e6cf0dd4e5652ec7ba8273bca86925f0eb075c07deaad3d3bccc23d968662c98"


@pytest.fixture(scope="module")
def planar2():
    return kin.builtin_chain("planar2")


@pytest.fixture(scope="module")
def psm6():
    return kin.builtin_chain("psm6")


def finite_difference_jacobian(chain, q, h=1e-6):
    n = chain.n
    J = np.zeros((6, n))
    for i in range(n):
        qp = np.array(q, dtype=float)
        qm = qp.copy()
        qp[i] += h
        qm[i] -= h
        fp, fm = kin.fk(chain, qp), kin.fk(chain, qm)
        J[:3, i] = (fp.position - fm.position) / (2 * h)
        rel = quat_mul(fp.orientation, quat_conj(fm.orientation))
        J[3:, i] = quat_to_rotvec(rel) / (2 * h)
    return J


class TestLoadChain:
    def test_planar2_digest_stable_across_loads(self):
        a = kin.builtin_chain("planar2")
        b = kin.builtin_chain("planar2")
        assert a.digest == b.digest == PLANAR2_DIGEST

    def test_digest_ignores_comments_and_whitespace(self):
        text = kin.builtin_chain_text("planar2")
        noisy = "# extra comment\n" + text.replace(" axis=", "   axis=") + "\n\n"
        assert kin.load_chain(noisy).digest == PLANAR2_DIGEST

    def test_inverted_limits_rejected(self):
        text = (
            "joint a revolute axis=0,0,1 origin_pos=0,0,0 origin_quat=1,0,0,0 limits=1.0,0.5\n"
            "ee_offset origin_pos=0,0,0 origin_quat=1,0,0,0\n"
        )
        with pytest.raises(kin.ChainParseError, match="limits inverted"):
            kin.load_chain(text)

    def test_non_unit_axis_rejected(self):
        text = (
            "joint a revolute axis=0,0,2 origin_pos=0,0,0 origin_quat=1,0,0,0 limits=-1,1\n"
            "ee_offset origin_pos=0,0,0 origin_quat=1,0,0,0\n"
        )
        with pytest.raises(kin.ChainParseError, match="axis"):
            kin.load_chain(text)

    def test_parse_error_carries_line_number(self):
        with pytest.raises(kin.ChainParseError, match="line 2"):
            kin.load_chain("# comment\njoint broken\n")

    def test_psm6_layout(self, psm6):
        assert psm6.n == 6
        assert psm6.joints[2].kind == kin.PRISMATIC
        assert psm6.digest == PSM6_DIGEST

    def test_missing_ee_offset(self):
        with pytest.raises(kin.ChainError, match="ee_offset"):
            kin.load_chain(
                "joint a revolute axis=0,0,1 origin_pos=0,0,0 origin_quat=1,0,0,0 limits=-1,1\n"
            )


class TestFk:
    def test_straight_configuration(self, planar2):
        p = kin.fk(planar2, [0.0, 0.0])
        assert np.allclose(p.position, (2, 0, 0), atol=1e-12)
        assert np.allclose(p.orientation, (1, 0, 0, 0), atol=1e-12)

    def test_rigid_rotation(self, planar2):
        p = kin.fk(planar2, [np.pi / 2, 0.0])
        assert np.allclose(p.position, (0, 2, 0), atol=1e-12)

    def test_elbow_bend(self, planar2):
        p = kin.fk(planar2, [0.0, np.pi / 2])
        assert np.allclose(p.position, (1, 1, 0), atol=1e-12)

    def test_determinism_bit_identical(self, psm6):
        q = [0.2, -0.4, 0.1, 1.0, -0.3, 0.7]
        a, b = kin.fk(psm6, q), kin.fk(psm6, q)
        assert np.array_equal(a.position, b.position)
        assert np.array_equal(a.orientation, b.orientation)

    def test_length_mismatch(self, planar2):
        with pytest.raises(kin.ChainError, match="length"):
            kin.fk(planar2, [0.0, 0.0, 0.0])


class TestJacobian:
    def test_planar2_column_values(self, planar2):
        J = kin.jacobian(planar2, [0.0, 0.0])
        assert np.allclose(J[:3, 0], (0, 2, 0), atol=1e-12)
        assert np.allclose(J[:3, 1], (0, 1, 0), atol=1e-12)
        assert np.allclose(J[3:, 0], (0, 0, 1), atol=1e-12)

    @pytest.mark.parametrize("chain_name", ["planar2", "psm6"])
    def test_matches_finite_differences(self, chain_name):
        chain = kin.builtin_chain(chain_name)
        rng = np.random.default_rng(7)
        lo, hi = chain.lower_limits(), chain.upper_limits()
        for _ in range(100):
            q = rng.uniform(lo, hi)
            J = kin.jacobian(chain, q)
            J_fd = finite_difference_jacobian(chain, q)
            assert np.abs(J - J_fd).max() < 1e-5

    def test_prismatic_column_has_zero_angular_part(self, psm6):
        J = kin.jacobian(psm6, [0.3, -0.2, 0.1, 0.5, 0.2, -0.1])
        assert np.array_equal(J[3:, 2], np.zeros(3))


class TestClampLimits:
    def test_below_lo(self, planar2):
        assert kin.clamp_limits(planar2, [-10.0, 0.0])[0] == planar2.joints[0].limits[0]

    def test_within_unchanged(self, planar2):
        q = np.array([0.5, -0.5])
        assert np.array_equal(kin.clamp_limits(planar2, q), q)

    def test_nan_rejected(self, planar2):
        with pytest.raises(kin.ChainError, match="non-finite"):
            kin.clamp_limits(planar2, [np.nan, 0.0])


class TestIkSolve:
    def test_orientation_free_reaches_planar_target(self, planar2):
        res = kin.ik_solve(planar2, [0.1, 0.1], Pose((1, 1, 0)), kin.IkSettings(ori_weight=0.0))
        assert res.converged
        assert np.linalg.norm(kin.fk(planar2, res.q).position - (1, 1, 0)) <= 1e-4

    def test_already_at_target(self, psm6):
        rng = np.random.default_rng(11)
        lo, hi = psm6.lower_limits(), psm6.upper_limits()
        for _ in range(20):
            q = rng.uniform(lo, hi)
            res = kin.ik_solve(psm6, q, kin.fk(psm6, q))
            assert res.converged
            assert res.iters <= 1
            assert np.abs(res.q - q).max() <= 1e-9

    def test_unreachable_target(self, planar2):
        res = kin.ik_solve(planar2, [0.1, 0.1], Pose((5, 0, 0)), kin.IkSettings(ori_weight=0.0))
        assert not res.converged
        assert np.all(np.isfinite(res.q))
        assert np.all(res.q >= planar2.lower_limits() - 1e-12)
        assert np.all(res.q <= planar2.upper_limits() + 1e-12)

    def test_q0_out_of_limits_rejected(self, planar2):
        with pytest.raises(kin.ChainError, match="limits"):
            kin.ik_solve(planar2, [5.0, 0.0], Pose((1, 1, 0)))

    def test_non_finite_target_rejected(self, planar2):
        # Pose itself refuses non-finite values, so smuggle one in duck-typed
        class Broken:
            position = np.array([np.nan, 0.0, 0.0])
            orientation = np.array([1.0, 0.0, 0.0, 0.0])

        with pytest.raises(kin.ChainError, match="non-finite"):
            kin.ik_solve(planar2, [0.0, 0.0], Broken())
        with pytest.raises(ValueError):
            Pose((np.nan, 0.0, 0.0))


class TestIkProperties:
    def test_round_trip_sample(self, psm6):
        # the acceptance suite runs the full 1000-sample version
        rng = np.random.default_rng(123)
        lo, hi = psm6.lower_limits(), psm6.upper_limits()
        neutral = psm6.neutral_q()
        failures = 0
        for _ in range(200):
            q = rng.uniform(lo, hi)
            target = kin.fk(psm6, q)
            res = kin.ik_solve(psm6, neutral, target)
            if not res.converged:
                failures += 1
                continue
            cur = kin.fk(psm6, res.q)
            e_pos, e_ang = kin.pose_error(cur, target)
            assert np.linalg.norm(e_pos) <= 1e-4
            assert np.linalg.norm(e_ang) <= 1e-3
        assert failures <= 2

    def test_every_evaluated_iterate_within_limits(self, psm6, monkeypatch):
        seen = []
        original = kin._ik_errors

        def recording(chain, q, tp, tq, want_jac=True):
            seen.append(np.array(q))
            return original(chain, q, tp, tq, want_jac)

        monkeypatch.setattr(kin, "_ik_errors", recording)
        rng = np.random.default_rng(5)
        lo, hi = psm6.lower_limits(), psm6.upper_limits()
        for _ in range(20):
            target = kin.fk(psm6, rng.uniform(lo, hi))
            kin.ik_solve(psm6, psm6.neutral_q(), target)
        assert seen
        for q in seen:
            assert np.all(q >= lo - 1e-12) and np.all(q <= hi + 1e-12)

    def test_orientation_free_position_error_monotone(self, planar2, monkeypatch):
        # reconstruct the accept/reject decisions from the evaluation trace:
        # a candidate is accepted iff it improves on the current error
        rng = np.random.default_rng(9)
        for _ in range(30):
            angle = rng.uniform(0, 2 * np.pi)
            radius = rng.uniform(0.2, 1.8)
            target = Pose((radius * np.cos(angle), radius * np.sin(angle), 0.0))
            trace = []
            original = kin._ik_errors

            def recording(chain, q, tp, tq, want_jac=True, _trace=trace):
                out = original(chain, q, tp, tq, want_jac)
                _trace.append(out[2])
                return out

            monkeypatch.setattr(kin, "_ik_errors", recording)
            res = kin.ik_solve(planar2, [0.1, 0.1], target, kin.IkSettings(ori_weight=0.0))
            monkeypatch.setattr(kin, "_ik_errors", original)
            if not res.converged:
                continue
            accepted = [trace[0]]
            for pe in trace[1:]:
                if pe < accepted[-1]:
                    accepted.append(pe)
            for prev, cur in zip(accepted, accepted[1:]):
                assert cur <= prev + 1e-12
