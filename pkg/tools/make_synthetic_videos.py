"""Write a scripted synthetic video set whose curation outcome is known in advance.

Video "walk" moves one stick figure to the right; its translations, plus a
few planted distractor frames, fix which frames the greedy keyframe rule
keeps (WALK_KEYFRAMES). Video "frozen" moves the skeleton but never changes
the picture, so every candidate is too similar and the video is rejected.
"""
import argparse
import os
import sys

import numpy as np
from PIL import Image

# Add parent directory to path to allow imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from pose_geometry import Keypoint, KeypointIndex, PoseSkeleton, write_pose_jsonl
from utils.terminal_colors import print_header, print_info, print_success

FRAME_SIZE = 64
BACKGROUND = 200
BODY = 40
TOP = 10

# (dx, dy) from the nose at (cx, TOP); nose to shoulder midpoint is 6 px
SKELETON_TEMPLATE = {
    KeypointIndex.NOSE: (0, 0),
    KeypointIndex.LEFT_EYE: (1, -1),
    KeypointIndex.RIGHT_EYE: (-1, -1),
    KeypointIndex.LEFT_EAR: (2, 0),
    KeypointIndex.RIGHT_EAR: (-2, 0),
    KeypointIndex.LEFT_SHOULDER: (4, 6),
    KeypointIndex.RIGHT_SHOULDER: (-4, 6),
    KeypointIndex.LEFT_ELBOW: (6, 12),
    KeypointIndex.RIGHT_ELBOW: (-6, 12),
    KeypointIndex.LEFT_WRIST: (7, 18),
    KeypointIndex.RIGHT_WRIST: (-7, 18),
    KeypointIndex.LEFT_HIP: (3, 20),
    KeypointIndex.RIGHT_HIP: (-3, 20),
    KeypointIndex.LEFT_KNEE: (3, 28),
    KeypointIndex.RIGHT_KNEE: (-3, 28),
    KeypointIndex.LEFT_ANKLE: (3, 36),
    KeypointIndex.RIGHT_ANKLE: (-3, 36),
}
HEAD_LENGTH = 6.0

# frame index -> (horizontal shift of the figure, note)
WALK_SCRIPT = (
    (0.0, 'kept: first eligible frame'),
    (2.0, 'too close'),
    (4.0, 'too close'),
    (6.0, 'two people: fails the filter'),
    (6.0, 'eight visible joints: fails the filter'),
    (6.5, 'kept: moved 6.5 >= 6'),
    (9.0, 'too close'),
    (12.0, 'too close (5.5)'),
    (12.5, 'kept: moved exactly 6'),
    (14.0, 'too close'),
    (18.0, 'too close (5.5)'),
    (18.4, 'too close (5.9)'),
    (19.0, 'kept: moved 6.5'),
    (26.0, 'nose hidden: no head length, not eligible'),
)
WALK_KEYFRAMES = (0, 5, 8, 12)
FROZEN_FRAMES = 4

LOW_VISIBILITY_JOINTS = (
    KeypointIndex.LEFT_EYE, KeypointIndex.RIGHT_EYE, KeypointIndex.LEFT_EAR, KeypointIndex.RIGHT_EAR,
    KeypointIndex.LEFT_WRIST, KeypointIndex.RIGHT_WRIST, KeypointIndex.LEFT_KNEE, KeypointIndex.RIGHT_KNEE,
    KeypointIndex.LEFT_ANKLE,
)


def figure_skeleton(cx: float, confidence: float = 0.9, hidden=()) -> PoseSkeleton:
    return PoseSkeleton(tuple(
        Keypoint(cx + SKELETON_TEMPLATE[i][0], TOP + SKELETON_TEMPLATE[i][1], 0.0 if i in hidden else confidence)
        for i in KeypointIndex
    ))


def render_frame(cx: float, stripe_value: int, size: int = FRAME_SIZE) -> np.ndarray:
    """Flat background, a dark body box under the figure and a per-frame colour stripe on top."""
    image = np.full((size, size, 3), BACKGROUND, dtype=np.uint8)
    left = int(cx) - 8
    image[8:48, left:left + 16] = BODY
    image[0:6, :] = stripe_value
    return image


def walk_video():
    """(frames, detections) for the scripted walking figure"""
    frames, detections = {}, {}
    for frame_index, (shift, _) in enumerate(WALK_SCRIPT):
        cx = 16.0 + shift
        frames[frame_index] = render_frame(cx, 100 + 4 * frame_index)
        if frame_index == 3:
            detections[frame_index] = [figure_skeleton(cx), figure_skeleton(cx + 20.0)]
        elif frame_index == 4:
            detections[frame_index] = [figure_skeleton(cx, hidden=LOW_VISIBILITY_JOINTS)]
        elif frame_index == 13:
            detections[frame_index] = [figure_skeleton(cx, hidden=(KeypointIndex.NOSE,))]
        else:
            detections[frame_index] = [figure_skeleton(cx)]
    return frames, detections


def frozen_video():
    """The skeleton walks but every frame shows the same picture"""
    still = render_frame(16.0, 100)
    frames = {i: still.copy() for i in range(FROZEN_FRAMES)}
    detections = {i: [figure_skeleton(16.0 + 8.0 * i)] for i in range(FROZEN_FRAMES)}
    return frames, detections


def write_video(frames_dir, poses_dir, video_id, frames, detections):
    video_dir = os.path.join(frames_dir, video_id)
    os.makedirs(video_dir, exist_ok=True)
    os.makedirs(poses_dir, exist_ok=True)
    for frame_index, image in frames.items():
        Image.fromarray(image).save(os.path.join(video_dir, f"{frame_index:06d}.png"), format='PNG')
    write_pose_jsonl(os.path.join(poses_dir, f"{video_id}.jsonl"), detections)


def make_fixture(root, include_frozen=True):
    """Write frames/ and poses/ under root; returns (frames_dir, poses_dir)."""
    frames_dir = os.path.join(root, 'frames')
    poses_dir = os.path.join(root, 'poses')
    write_video(frames_dir, poses_dir, 'walk', *walk_video())
    if include_frozen:
        write_video(frames_dir, poses_dir, 'frozen', *frozen_video())
    return frames_dir, poses_dir


def main():
    parser = argparse.ArgumentParser(description='Write the scripted synthetic video fixture')
    parser.add_argument('--output', type=str, default='data', help='Root directory for frames/ and poses/')
    parser.add_argument('--show_examples', action='store_true', help='Show usage examples and exit')
    args = parser.parse_args()

    if args.show_examples:
        print_header("\n=== Sample Usage ===")
        print_info("Write the fixture under data/ and build the dataset from it:")
        print("  python tools/make_synthetic_videos.py --output data")
        print("  python nonrigid_edit.py dataset build --frames data/frames --poses data/poses")
        print()
        return

    frames_dir, poses_dir = make_fixture(args.output)
    print_success(f"Frames written to {frames_dir}, poses to {poses_dir}")
    print_info(f"Expected keyframes for 'walk': {list(WALK_KEYFRAMES)}; 'frozen' is rejected")


if __name__ == '__main__':
    main()
