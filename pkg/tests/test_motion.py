import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motok.motion import (
    MotionError,
    MotionSequence,
    SkeletonSpec,
    from_features,
    quat_from_yaw,
    read_motion,
    to_global_joints,
    write_motion,
)


def make_motion(T=8, J=4, fps=30.0, seed=0):
    rng = np.random.default_rng(seed)
    skel = SkeletonSpec(joint_count=J)
    yaw = rng.uniform(-np.pi, np.pi, size=T)
    return MotionSequence(
        fps=fps,
        root_translation=rng.normal(size=(T, 3)),
        root_rotation=quat_from_yaw(yaw),
        local_joints=rng.normal(size=(T, J, 3)),
        skeleton=skel,
    )


class TestSkeleton:
    def test_defaults(self):
        s = SkeletonSpec()
        assert s.joint_count == 22
        assert s.feature_width == 3 * 22 + 7

    def test_rejects_tiny(self):
        with pytest.raises(MotionError):
            SkeletonSpec(joint_count=1)

    def test_rejects_bad_parent(self):
        with pytest.raises(MotionError):
            SkeletonSpec(joint_count=3, joint_names=("a", "b", "c"),
                         parent_index=(-1, 2, 1))


class TestMotionSequence:
    def test_rejects_non_unit_quaternion(self):
        m = make_motion()
        q = np.array(m.root_rotation)
        q[0] *= 1.01
        with pytest.raises(MotionError):
            MotionSequence(fps=m.fps, root_translation=m.root_translation,
                           root_rotation=q, local_joints=m.local_joints,
                           skeleton=m.skeleton)

    def test_rejects_nan(self):
        m = make_motion()
        lj = np.array(m.local_joints)
        lj[0, 0, 0] = np.nan
        with pytest.raises(MotionError):
            MotionSequence(fps=m.fps, root_translation=m.root_translation,
                           root_rotation=m.root_rotation, local_joints=lj,
                           skeleton=m.skeleton)

    def test_feature_round_trip(self):
        m = make_motion()
        back = from_features(m.features(), m.skeleton, m.fps)
        np.testing.assert_array_equal(back.local_joints, m.local_joints)
        np.testing.assert_array_equal(back.root_translation, m.root_translation)

    def test_feature_width(self):
        m = make_motion(J=6)
        assert m.features().shape == (8, 3 * 6 + 7)


class TestGlobalJoints:
    def test_identity_transform(self):
        J, T = 4, 5
        skel = SkeletonSpec(joint_count=J)
        local = np.random.default_rng(1).normal(size=(T, J, 3))
        quat = np.tile([1.0, 0, 0, 0], (T, 1))
        m = MotionSequence(fps=30, root_translation=np.zeros((T, 3)),
                           root_rotation=quat, local_joints=local, skeleton=skel)
        np.testing.assert_allclose(to_global_joints(m).positions, local)

    def test_rigid_shift(self):
        J, T = 3, 4
        skel = SkeletonSpec(joint_count=J)
        local = np.random.default_rng(2).normal(size=(T, J, 3))
        quat = np.tile([1.0, 0, 0, 0], (T, 1))
        trans = np.tile([1.0, 0, 0], (T, 1))
        m = MotionSequence(fps=30, root_translation=trans, root_rotation=quat,
                           local_joints=local, skeleton=skel)
        np.testing.assert_allclose(to_global_joints(m).positions,
                                   local + np.array([1.0, 0, 0]))

    def test_yaw_90(self):
        # local joint at (1, 0, 0) under a 90 degree yaw lands at (0, 1, 0)
        skel = SkeletonSpec(joint_count=2)
        local = np.zeros((1, 2, 3))
        local[0, 1] = [1.0, 0, 0]
        trans = np.array([[0.5, -0.25, 0.0]])
        m = MotionSequence(fps=30, root_translation=trans,
                           root_rotation=quat_from_yaw(np.array([np.pi / 2])),
                           local_joints=local, skeleton=skel)
        got = to_global_joints(m).positions[0, 1]
        np.testing.assert_allclose(got, [0.5, 0.75, 0.0], atol=1e-12)

    @given(st.integers(0, 4), st.integers(5, 8))
    @settings(max_examples=20, deadline=None)
    def test_commutes_with_slicing(self, a, b):
        m = make_motion(T=8)
        whole = to_global_joints(m).positions[a:b]
        part = to_global_joints(m.slice(a, b)).positions
        np.testing.assert_allclose(part, whole)


class TestMotionFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        m = make_motion(T=6, J=5)
        p = tmp_path / "m.motion"
        write_motion(m, p)
        back = read_motion(p)
        np.testing.assert_array_equal(back.features(), m.features())
        assert back.fps == m.fps
        assert back.skeleton == m.skeleton

    def test_rejects_non_unit_quaternion_file(self, tmp_path):
        m = make_motion(T=2, J=2)
        p = tmp_path / "m.motion"
        write_motion(m, p)
        lines = p.read_text().splitlines()
        row = lines[6].split()
        row[-4] = "2.0"  # break the quaternion
        lines[6] = " ".join(row)
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(MotionError):
            read_motion(p)

    def test_rejects_zero_frames(self, tmp_path):
        m = make_motion(T=2, J=2)
        p = tmp_path / "m.motion"
        write_motion(m, p)
        lines = p.read_text().splitlines()
        lines[5] = "frames 0"
        p.write_text("\n".join(lines[:6]) + "\n")
        with pytest.raises(MotionError):
            read_motion(p)

    def test_parse_error_cites_line(self, tmp_path):
        m = make_motion(T=3, J=2)
        p = tmp_path / "m.motion"
        write_motion(m, p)
        lines = p.read_text().splitlines()
        lines[7] = "not a number"
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(MotionError, match="line 8"):
            read_motion(p)
