import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pose_geometry import (
    FLAT_POSE_DIM,
    InvalidPose,
    Keypoint,
    KeypointIndex,
    LEFT_RIGHT_PAIRS,
    MissingJoints,
    NoCommonJoints,
    PoseSkeleton,
    flatten_pose,
    mirror_pose,
    neutral_skeleton,
    pckh,
    pckh_counts,
    pose_bbox,
    pose_distance,
    read_pose_jsonl,
    shoulder_head_length,
    unflatten_pose,
    visible_joint_count,
    write_pose_jsonl,
)


def skeleton(points=None, confidence=1.0):
    """17 keypoints on a diagonal unless points are given"""
    points = points if points is not None else [(float(i), float(2 * i)) for i in range(17)]
    return PoseSkeleton(tuple(Keypoint(x, y, confidence) for x, y in points))


def head_skeleton(nose=(0.0, 0.0), left=(-3.0, 4.0), right=(3.0, 4.0), confidence=1.0):
    points = [(10.0, 10.0)] * 17
    points[KeypointIndex.NOSE] = nose
    points[KeypointIndex.LEFT_SHOULDER] = left
    points[KeypointIndex.RIGHT_SHOULDER] = right
    return skeleton(points, confidence)


coordinates = st.floats(min_value=-500, max_value=500, allow_nan=False, allow_infinity=False)
confidences = st.floats(min_value=0.0, max_value=1.0)
skeletons = st.lists(st.tuples(coordinates, coordinates, confidences), min_size=17, max_size=17).map(
    lambda rows: PoseSkeleton(tuple(Keypoint(x, y, c) for x, y, c in rows)))


class TestTypes:
    def test_keypoint_rejects_out_of_range_confidence(self):
        with pytest.raises(InvalidPose):
            Keypoint(0.0, 0.0, 1.5)

    def test_keypoint_rejects_non_finite(self):
        with pytest.raises(InvalidPose):
            Keypoint(float('nan'), 0.0, 0.5)

    def test_skeleton_needs_seventeen_keypoints(self):
        with pytest.raises(InvalidPose):
            PoseSkeleton(tuple(Keypoint(0.0, 0.0, 1.0) for _ in range(16)))

    def test_visibility_threshold_is_inclusive(self):
        assert Keypoint(0, 0, 0.3).visible(0.3)
        assert not Keypoint(0, 0, 0.29).visible(0.3)


class TestFlatten:
    def test_layout_is_x_y_confidence_per_joint(self):
        s = skeleton()
        flat = flatten_pose(s)
        assert flat.shape == (FLAT_POSE_DIM,)
        assert flat[0:3].tolist() == [0.0, 0.0, 1.0]
        assert flat[3:6].tolist() == [1.0, 2.0, 1.0]
        assert flat[48:51].tolist() == [16.0, 32.0, 1.0]

    @given(skeletons)
    def test_unflatten_inverts_flatten(self, s):
        assert unflatten_pose(flatten_pose(s)) == s

    def test_unflatten_rejects_wrong_length(self):
        with pytest.raises(InvalidPose):
            unflatten_pose(np.zeros(50))


class TestShoulderHeadLength:
    def test_three_four_five(self):
        # nose (0,0), shoulders midpoint (0,4) -> 4; shifted nose gives 5
        assert shoulder_head_length(head_skeleton()) == pytest.approx(4.0)
        assert shoulder_head_length(head_skeleton(nose=(3.0, 0.0))) == pytest.approx(5.0)

    def test_missing_nose(self):
        s = head_skeleton()
        keypoints = list(s.keypoints)
        keypoints[KeypointIndex.NOSE] = Keypoint(0.0, 0.0, 0.1)
        with pytest.raises(MissingJoints):
            shoulder_head_length(PoseSkeleton(tuple(keypoints)))


class TestPoseDistance:
    def test_translation_distance(self):
        a = skeleton()
        assert pose_distance(a, a.translated(3.0, 4.0)) == pytest.approx(5.0)

    def test_only_common_joints_count(self):
        a = skeleton()
        keypoints = list(a.translated(10.0, 0.0).keypoints)
        for i in range(1, 17):
            keypoints[i] = Keypoint(keypoints[i].x, keypoints[i].y, 0.0)
        keypoints[0] = Keypoint(a[0].x + 1.0, a[0].y, 1.0)
        assert pose_distance(a, PoseSkeleton(tuple(keypoints))) == pytest.approx(1.0)

    def test_no_common_joints(self):
        with pytest.raises(NoCommonJoints):
            pose_distance(skeleton(), skeleton(confidence=0.0))

    @given(skeletons, skeletons)
    def test_symmetric_and_non_negative(self, a, b):
        try:
            d = pose_distance(a, b)
        except NoCommonJoints:
            return
        assert d >= 0.0
        assert d == pytest.approx(pose_distance(b, a))

    @given(skeletons, skeletons, st.floats(min_value=0.01, max_value=100.0))
    def test_scales_linearly(self, a, b, k):
        try:
            d = pose_distance(a, b)
        except NoCommonJoints:
            return
        assert pose_distance(a.scaled(k), b.scaled(k)) == pytest.approx(k * d, rel=1e-9, abs=1e-9)


class TestPckh:
    def test_identical_skeletons_score_one(self):
        s = head_skeleton()
        assert pckh(s, s) == 1.0

    def test_hits_within_radius_inclusive(self):
        gt = head_skeleton()  # head length 4, radius 2 at alpha 0.5
        keypoints = list(gt.keypoints)
        keypoints[KeypointIndex.LEFT_ANKLE] = Keypoint(10.0, 12.0, 1.0)  # exactly 2 px off: hit
        keypoints[KeypointIndex.RIGHT_ANKLE] = Keypoint(10.0, 12.5, 1.0)  # 2.5 px off: miss
        assert pckh_counts(PoseSkeleton(tuple(keypoints)), gt) == (16, 17)

    def test_predicted_confidence_is_ignored(self):
        gt = head_skeleton()
        predicted = PoseSkeleton(tuple(Keypoint(k.x, k.y, 0.0) for k in gt.keypoints))
        assert pckh(predicted, gt) == 1.0

    def test_rejects_non_positive_alpha(self):
        with pytest.raises(ValueError):
            pckh(head_skeleton(), head_skeleton(), alpha=0.0)

    @given(st.floats(min_value=-20, max_value=20), st.floats(min_value=0.1, max_value=2.0))
    def test_monotone_in_alpha(self, offset, alpha):
        gt = head_skeleton()
        predicted = gt.translated(offset, offset / 2)
        assert pckh(predicted, gt, alpha) <= pckh(predicted, gt, alpha * 1.5)


class TestHelpers:
    def test_visible_joint_count(self):
        s = head_skeleton()
        keypoints = list(s.keypoints)
        for i in range(5):
            keypoints[i + 7] = Keypoint(0.0, 0.0, 0.2)
        assert visible_joint_count(PoseSkeleton(tuple(keypoints)), 0.3) == 12

    def test_pose_bbox(self):
        assert pose_bbox(skeleton()) == (0.0, 0.0, 16.0, 32.0)
        with pytest.raises(MissingJoints):
            pose_bbox(skeleton(confidence=0.0))

    def test_mirror_swaps_sides_and_flips_x(self):
        s = skeleton()
        mirrored = mirror_pose(s, 64)
        for left, right in LEFT_RIGHT_PAIRS:
            assert mirrored[left].x == 63 - s[right].x
            assert mirrored[left].y == s[right].y
        assert mirrored[KeypointIndex.NOSE].x == 63.0
        assert mirror_pose(mirrored, 64) == s

    def test_neutral_skeleton_is_centred_and_upright(self):
        s = neutral_skeleton(32, 32)
        assert s[KeypointIndex.NOSE].x == pytest.approx(15.5)
        assert s[KeypointIndex.LEFT_ANKLE].y > s[KeypointIndex.LEFT_HIP].y > s[KeypointIndex.LEFT_SHOULDER].y
        assert all(k.confidence == 1.0 for k in s.keypoints)
        min_x, min_y, max_x, max_y = pose_bbox(s)
        assert 0 <= min_x and max_x < 32 and 0 <= min_y and max_y < 32
        assert math.isclose((min_x + max_x) / 2, 15.5)


class TestPoseFiles:
    def test_round_trip_with_multiple_detections(self, tmp_path):
        path = tmp_path / 'video.jsonl'
        detections = {0: [skeleton()], 3: [skeleton(), head_skeleton()]}
        write_pose_jsonl(path, detections)
        assert read_pose_jsonl(path) == detections

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / 'bad.jsonl'
        path.write_text('{"frame_index": 0, "keypoints": [[0, 0, 1]]}\n', encoding='utf-8')
        with pytest.raises(InvalidPose, match=r'bad\.jsonl:1'):
            read_pose_jsonl(path)
