"""Pose types, distances, visibility tests and the PCKh metric.

Skeletons are 2D, 17 keypoints in COCO order, each with pixel x/y and a
detector confidence. Everything here is a pure function on frozen values.
"""
import json
import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

NUM_KEYPOINTS = 17
FLAT_POSE_DIM = NUM_KEYPOINTS * 3
DEFAULT_VISIBILITY_THRESHOLD = 0.3
DEFAULT_MAJORITY_COUNT = 9
DEFAULT_PCKH_ALPHA = 0.5


class KeypointIndex(IntEnum):
    """17 keypoints from COCO pose format."""
    NOSE = 0
    LEFT_EYE = 1
    RIGHT_EYE = 2
    LEFT_EAR = 3
    RIGHT_EAR = 4
    LEFT_SHOULDER = 5
    RIGHT_SHOULDER = 6
    LEFT_ELBOW = 7
    RIGHT_ELBOW = 8
    LEFT_WRIST = 9
    RIGHT_WRIST = 10
    LEFT_HIP = 11
    RIGHT_HIP = 12
    LEFT_KNEE = 13
    RIGHT_KNEE = 14
    LEFT_ANKLE = 15
    RIGHT_ANKLE = 16


COCO_LIMBS = (
    (KeypointIndex.LEFT_ANKLE, KeypointIndex.LEFT_KNEE),
    (KeypointIndex.LEFT_KNEE, KeypointIndex.LEFT_HIP),
    (KeypointIndex.RIGHT_ANKLE, KeypointIndex.RIGHT_KNEE),
    (KeypointIndex.RIGHT_KNEE, KeypointIndex.RIGHT_HIP),
    (KeypointIndex.LEFT_HIP, KeypointIndex.RIGHT_HIP),
    (KeypointIndex.LEFT_SHOULDER, KeypointIndex.LEFT_HIP),
    (KeypointIndex.RIGHT_SHOULDER, KeypointIndex.RIGHT_HIP),
    (KeypointIndex.LEFT_SHOULDER, KeypointIndex.RIGHT_SHOULDER),
    (KeypointIndex.LEFT_SHOULDER, KeypointIndex.LEFT_ELBOW),
    (KeypointIndex.RIGHT_SHOULDER, KeypointIndex.RIGHT_ELBOW),
    (KeypointIndex.LEFT_ELBOW, KeypointIndex.LEFT_WRIST),
    (KeypointIndex.RIGHT_ELBOW, KeypointIndex.RIGHT_WRIST),
    (KeypointIndex.LEFT_EYE, KeypointIndex.RIGHT_EYE),
    (KeypointIndex.NOSE, KeypointIndex.LEFT_EYE),
    (KeypointIndex.NOSE, KeypointIndex.RIGHT_EYE),
    (KeypointIndex.LEFT_EYE, KeypointIndex.LEFT_EAR),
    (KeypointIndex.RIGHT_EYE, KeypointIndex.RIGHT_EAR),
)

LEFT_RIGHT_PAIRS = (
    (KeypointIndex.LEFT_EYE, KeypointIndex.RIGHT_EYE),
    (KeypointIndex.LEFT_EAR, KeypointIndex.RIGHT_EAR),
    (KeypointIndex.LEFT_SHOULDER, KeypointIndex.RIGHT_SHOULDER),
    (KeypointIndex.LEFT_ELBOW, KeypointIndex.RIGHT_ELBOW),
    (KeypointIndex.LEFT_WRIST, KeypointIndex.RIGHT_WRIST),
    (KeypointIndex.LEFT_HIP, KeypointIndex.RIGHT_HIP),
    (KeypointIndex.LEFT_KNEE, KeypointIndex.RIGHT_KNEE),
    (KeypointIndex.LEFT_ANKLE, KeypointIndex.RIGHT_ANKLE),
)


class InvalidPose(ValueError):
    pass


class MissingJoints(ValueError):
    pass


class NoCommonJoints(ValueError):
    pass


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    confidence: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InvalidPose(f"keypoint coordinates must be finite, got ({self.x}, {self.y})")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidPose(f"keypoint confidence must be in [0, 1], got {self.confidence}")

    def visible(self, threshold: float) -> bool:
        return self.confidence >= threshold


@dataclass(frozen=True)
class PoseSkeleton:
    keypoints: tuple

    def __post_init__(self):
        object.__setattr__(self, 'keypoints', tuple(self.keypoints))
        if len(self.keypoints) != NUM_KEYPOINTS:
            raise InvalidPose(f"a skeleton has exactly {NUM_KEYPOINTS} keypoints, got {len(self.keypoints)}")

    def __getitem__(self, index) -> Keypoint:
        return self.keypoints[index]

    @classmethod
    def from_array(cls, array) -> "PoseSkeleton":
        """Build from anything shaped (17, 3): rows of (x, y, confidence)."""
        array = np.asarray(array, dtype=np.float64)
        if array.shape != (NUM_KEYPOINTS, 3):
            raise InvalidPose(f"expected shape (17, 3), got {array.shape}")
        return cls(tuple(Keypoint(float(x), float(y), float(c)) for x, y, c in array))

    def to_array(self) -> np.ndarray:
        return np.array([(k.x, k.y, k.confidence) for k in self.keypoints], dtype=np.float64)

    def to_list(self):
        return [[k.x, k.y, k.confidence] for k in self.keypoints]

    def translated(self, dx: float, dy: float) -> "PoseSkeleton":
        return PoseSkeleton(tuple(Keypoint(k.x + dx, k.y + dy, k.confidence) for k in self.keypoints))

    def scaled(self, factor: float) -> "PoseSkeleton":
        return PoseSkeleton(tuple(Keypoint(k.x * factor, k.y * factor, k.confidence) for k in self.keypoints))


def flatten_pose(skeleton: PoseSkeleton) -> np.ndarray:
    """(x0, y0, c0, x1, y1, c1, ...) as a length-51 float64 vector."""
    return skeleton.to_array().reshape(FLAT_POSE_DIM)


def unflatten_pose(vector) -> PoseSkeleton:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (FLAT_POSE_DIM,):
        raise InvalidPose(f"expected a length-{FLAT_POSE_DIM} vector, got shape {vector.shape}")
    return PoseSkeleton.from_array(vector.reshape(NUM_KEYPOINTS, 3))


def visible_joint_count(skeleton: PoseSkeleton, threshold: float = DEFAULT_VISIBILITY_THRESHOLD) -> int:
    return sum(1 for k in skeleton.keypoints if k.visible(threshold))


def shoulder_head_length(skeleton: PoseSkeleton, threshold: float = DEFAULT_VISIBILITY_THRESHOLD) -> float:
    """Distance from the nose to the midpoint of the shoulders.

    COCO skeletons have no head-top joint, so the nose stands in for the head.
    """
    nose = skeleton[KeypointIndex.NOSE]
    left = skeleton[KeypointIndex.LEFT_SHOULDER]
    right = skeleton[KeypointIndex.RIGHT_SHOULDER]
    missing = [name for name, k in (('nose', nose), ('left_shoulder', left), ('right_shoulder', right))
               if not k.visible(threshold)]
    if missing:
        raise MissingJoints(f"joints below visibility threshold {threshold}: {', '.join(missing)}")
    mid_x = (left.x + right.x) / 2.0
    mid_y = (left.y + right.y) / 2.0
    return math.hypot(nose.x - mid_x, nose.y - mid_y)


def pose_distance(a: PoseSkeleton, b: PoseSkeleton,
                  visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD) -> float:
    """Mean joint displacement over joints visible in both skeletons."""
    pa, pb = a.to_array(), b.to_array()
    common = (pa[:, 2] >= visibility_threshold) & (pb[:, 2] >= visibility_threshold)
    if not common.any():
        raise NoCommonJoints("no joint is visible in both skeletons")
    displacement = np.linalg.norm(pa[common, :2] - pb[common, :2], axis=1)
    return float(np.mean(displacement))


def pckh_counts(predicted: PoseSkeleton, ground_truth: PoseSkeleton, alpha: float = DEFAULT_PCKH_ALPHA,
                visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD):
    """(hits, evaluated joints) behind pckh"""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    radius = alpha * shoulder_head_length(ground_truth, visibility_threshold)
    pred, gt = predicted.to_array(), ground_truth.to_array()
    visible = gt[:, 2] >= visibility_threshold
    distances = np.linalg.norm(pred[visible, :2] - gt[visible, :2], axis=1)
    return int(np.count_nonzero(distances <= radius)), int(np.count_nonzero(visible))


def pckh(predicted: PoseSkeleton, ground_truth: PoseSkeleton, alpha: float = DEFAULT_PCKH_ALPHA,
         visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD) -> float:
    """Fraction of ground-truth-visible joints predicted within alpha head lengths.

    Predicted confidences are ignored; only the predicted coordinates count.
    """
    hits, evaluated = pckh_counts(predicted, ground_truth, alpha, visibility_threshold)
    return hits / evaluated


def pose_bbox(skeleton: PoseSkeleton, threshold: float = DEFAULT_VISIBILITY_THRESHOLD):
    """(min_x, min_y, max_x, max_y) over visible joints, as floats."""
    points = skeleton.to_array()
    points = points[points[:, 2] >= threshold]
    if len(points) == 0:
        raise MissingJoints("no visible joints to bound")
    return (float(points[:, 0].min()), float(points[:, 1].min()),
            float(points[:, 0].max()), float(points[:, 1].max()))


def mirror_pose(skeleton: PoseSkeleton, width: int) -> PoseSkeleton:
    """Horizontal flip inside an image of the given width; left/right joints swap."""
    keypoints = [Keypoint(width - 1 - k.x, k.y, k.confidence) for k in skeleton.keypoints]
    for left, right in LEFT_RIGHT_PAIRS:
        keypoints[left], keypoints[right] = keypoints[right], keypoints[left]
    return PoseSkeleton(tuple(keypoints))


def neutral_skeleton(width: int, height: int) -> PoseSkeleton:
    """Upright figure centred in the frame with the arms hanging at the sides."""
    cx = (width - 1) / 2.0
    top = height * 0.15
    unit = height * 0.7 / 8.0  # nose to ankle spans eight units
    offsets = {
        KeypointIndex.NOSE: (0.0, 0.0),
        KeypointIndex.LEFT_EYE: (0.15, -0.15),
        KeypointIndex.RIGHT_EYE: (-0.15, -0.15),
        KeypointIndex.LEFT_EAR: (0.35, 0.0),
        KeypointIndex.RIGHT_EAR: (-0.35, 0.0),
        KeypointIndex.LEFT_SHOULDER: (0.8, 1.0),
        KeypointIndex.RIGHT_SHOULDER: (-0.8, 1.0),
        KeypointIndex.LEFT_ELBOW: (0.9, 2.3),
        KeypointIndex.RIGHT_ELBOW: (-0.9, 2.3),
        KeypointIndex.LEFT_WRIST: (0.9, 3.5),
        KeypointIndex.RIGHT_WRIST: (-0.9, 3.5),
        KeypointIndex.LEFT_HIP: (0.5, 3.6),
        KeypointIndex.RIGHT_HIP: (-0.5, 3.6),
        KeypointIndex.LEFT_KNEE: (0.5, 5.8),
        KeypointIndex.RIGHT_KNEE: (-0.5, 5.8),
        KeypointIndex.LEFT_ANKLE: (0.5, 8.0),
        KeypointIndex.RIGHT_ANKLE: (-0.5, 8.0),
    }
    return PoseSkeleton(tuple(
        Keypoint(cx + dx * unit, top + dy * unit, 1.0) for dx, dy in (offsets[i] for i in KeypointIndex)
    ))


def read_pose_jsonl(path):
    """Read a detector pose file into {frame_index: [PoseSkeleton, ...]}.

    One JSON object per line: {"frame_index": int, "keypoints": [[x, y, c] x 17]}.
    Repeated frame indices are extra detections in the same frame.
    """
    detections = {}
    with open(path, 'r', encoding='utf-8') as pose_file:
        for line_number, line in enumerate(pose_file, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                frame_index = int(record['frame_index'])
                skeleton = PoseSkeleton.from_array(record['keypoints'])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise InvalidPose(f"{path}:{line_number}: {e}") from e
            if frame_index < 0:
                raise InvalidPose(f"{path}:{line_number}: negative frame_index {frame_index}")
            detections.setdefault(frame_index, []).append(skeleton)
    return detections


def write_pose_jsonl(path, detections):
    """Inverse of read_pose_jsonl; frames written in ascending order."""
    with open(path, 'w', encoding='utf-8') as pose_file:
        for frame_index in sorted(detections):
            for skeleton in detections[frame_index]:
                pose_file.write(json.dumps({"frame_index": frame_index, "keypoints": skeleton.to_list()}) + '\n')
