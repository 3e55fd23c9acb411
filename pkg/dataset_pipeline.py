"""Video frames + pose files -> keyframes -> frame pairs -> assets + manifest.

Input layout:
    <frames_dir>/<video_id>/<frame_index>.png|.jpg   pre-extracted frames
    <poses_dir>/<video_id>.jsonl                    detector output, see pose_geometry

Output: one JSON Lines manifest plus PNG assets under <manifest_dir>/assets/.
"""
import hashlib
import json
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from pose_geometry import (
    DEFAULT_MAJORITY_COUNT,
    DEFAULT_VISIBILITY_THRESHOLD,
    InvalidPose,
    MissingJoints,
    NoCommonJoints,
    PoseSkeleton,
    pose_bbox,
    pose_distance,
    read_pose_jsonl,
    shoulder_head_length,
    visible_joint_count,
)
from utils.terminal_colors import print_info, print_warning

FRAME_EXTENSIONS = ('.png', '.jpg', '.jpeg')

TRAIN_SPLIT = 'train'
VAL_SPLIT = 'val'
SPLITS = (TRAIN_SPLIT, VAL_SPLIT)

MANIFEST_KEYS = (
    'pair_id', 'video_id', 'split', 'target_frame_index', 'reference_frame_index',
    'mask_bbox', 'reference_crop_bbox', 'target_pose', 'reference_pose', 'caption',
    'image_width', 'image_height',
    'target_path', 'reference_path', 'masked_target_path', 'mask_path', 'reference_crop_path',
)


class DatasetInputError(OSError):
    """Frames or pose files missing or unreadable."""


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD
    majority_count: int = DEFAULT_MAJORITY_COUNT
    min_pose_dist_factor: float = 1.0
    sim_min: float = 0.35
    sim_max: float = 0.98
    max_keyframes: int = 5
    mask_dilation: float = 0.1
    fill_value: int = 128
    histogram_bins: int = 64
    reference_resolution: int = 64
    val_fraction: float = 0.2

    @classmethod
    def from_run_config(cls, config) -> "PipelineConfig":
        return cls(**{name: getattr(config, name) for name in cls.__dataclass_fields__})


@dataclass(frozen=True)
class FrameRecord:
    video_id: str
    frame_index: int
    image: np.ndarray = field(repr=False)
    poses: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'poses', tuple(self.poses))
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be >= 0, got {self.frame_index}")
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.size == 0:
            raise ValueError(f"expected a non-empty HxWx3 image, got shape {self.image.shape}")

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True)
class FramePair:
    video_id: str
    target_frame_index: int
    reference_frame_index: int
    mask_bbox: tuple
    reference_crop_bbox: tuple
    target_pose: PoseSkeleton
    reference_pose: PoseSkeleton
    caption: Optional[str] = None

    def __post_init__(self):
        if self.target_frame_index == self.reference_frame_index:
            raise ValueError("target and reference frames must differ")
        for name in ('mask_bbox', 'reference_crop_bbox'):
            x0, y0, x1, y1 = getattr(self, name)
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"{name} {getattr(self, name)} is empty")

    @property
    def pair_id(self) -> str:
        return pair_id_for(self.video_id, self.target_frame_index, self.reference_frame_index)


def pair_id_for(video_id, target_frame_index, reference_frame_index) -> str:
    return f"{video_id}:{target_frame_index:06d}:{reference_frame_index:06d}"


@dataclass(frozen=True)
class ManifestRecord:
    pair: FramePair
    image_width: int
    image_height: int
    target_path: str
    reference_path: str
    masked_target_path: str
    mask_path: str
    reference_crop_path: str
    split: str = TRAIN_SPLIT

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {', '.join(SPLITS)}, got {self.split!r}")

    @property
    def pair_id(self) -> str:
        return self.pair.pair_id

    @property
    def caption(self) -> Optional[str]:
        return self.pair.caption

    def with_caption(self, caption: Optional[str]) -> "ManifestRecord":
        return replace(self, pair=replace(self.pair, caption=caption))

    def to_dict(self) -> dict:
        p = self.pair
        values = {
            'pair_id': p.pair_id,
            'video_id': p.video_id,
            'split': self.split,
            'target_frame_index': p.target_frame_index,
            'reference_frame_index': p.reference_frame_index,
            'mask_bbox': list(p.mask_bbox),
            'reference_crop_bbox': list(p.reference_crop_bbox),
            'target_pose': p.target_pose.to_list(),
            'reference_pose': p.reference_pose.to_list(),
            'caption': p.caption,
            'image_width': self.image_width,
            'image_height': self.image_height,
            'target_path': self.target_path,
            'reference_path': self.reference_path,
            'masked_target_path': self.masked_target_path,
            'mask_path': self.mask_path,
            'reference_crop_path': self.reference_crop_path,
        }
        return {key: values[key] for key in MANIFEST_KEYS}

    @classmethod
    def from_dict(cls, data) -> "ManifestRecord":
        missing = [key for key in MANIFEST_KEYS if key not in data]
        if missing:
            raise ManifestError(f"manifest record missing keys: {', '.join(missing)}")
        pair = FramePair(
            video_id=data['video_id'],
            target_frame_index=int(data['target_frame_index']),
            reference_frame_index=int(data['reference_frame_index']),
            mask_bbox=tuple(int(v) for v in data['mask_bbox']),
            reference_crop_bbox=tuple(int(v) for v in data['reference_crop_bbox']),
            target_pose=PoseSkeleton.from_array(data['target_pose']),
            reference_pose=PoseSkeleton.from_array(data['reference_pose']),
            caption=data['caption'],
        )
        if pair.pair_id != data['pair_id']:
            raise ManifestError(f"pair_id {data['pair_id']} does not match its frames")
        return cls(pair, int(data['image_width']), int(data['image_height']),
                   data['target_path'], data['reference_path'], data['masked_target_path'],
                   data['mask_path'], data['reference_crop_path'], data['split'])


@dataclass(frozen=True)
class ManifestStats:
    videos: int = 0
    frames: int = 0
    pairs: int = 0
    captions: int = 0
    mean_caption_length: float = 0.0


# --- filtering and keyframe selection -------------------------------------------------

def frame_filter(record: FrameRecord, visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD,
                 majority_count: int = DEFAULT_MAJORITY_COUNT) -> bool:
    """Exactly one person, with at least majority_count joints visible."""
    if len(record.poses) != 1:
        return False
    return visible_joint_count(record.poses[0], visibility_threshold) >= majority_count


def histogram_similarity(a: np.ndarray, b: np.ndarray, bins: int = 64) -> float:
    """Mean per-channel intersection of L1-normalised colour histograms."""
    if a.size == 0 or b.size == 0:
        raise ValueError("histogram_similarity needs non-empty images")
    scores = []
    for channel in range(3):
        ha, _ = np.histogram(a[..., channel], bins=bins, range=(0, 256))
        hb, _ = np.histogram(b[..., channel], bins=bins, range=(0, 256))
        ha = ha / ha.sum()
        hb = hb / hb.sum()
        scores.append(np.minimum(ha, hb).sum())
    return float(min(1.0, max(0.0, np.mean(scores))))


def _anchor_length(record: FrameRecord, threshold: float) -> Optional[float]:
    try:
        return shoulder_head_length(record.poses[0], threshold)
    except MissingJoints:
        return None


def select_keyframes(frames, min_pose_dist_factor: float = 1.0, sim_min: float = 0.35,
                     sim_max: float = 0.98, max_keyframes: int = 5,
                     visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD, bins: int = 64):
    """Greedy forward scan over filtered, time-ordered frames.

    A frame is kept when it moved at least min_pose_dist_factor head lengths
    away from the last kept frame and its histogram similarity to that frame
    lies in [sim_min, sim_max]. Fewer than two keyframes rejects the video.
    """
    if max_keyframes < 2:
        raise ValueError("max_keyframes must be >= 2")
    kept = []
    anchor_length = None
    for record in frames:
        length = _anchor_length(record, visibility_threshold)
        if length is None:
            continue
        if not kept:
            kept.append(record)
            anchor_length = length
            continue
        last = kept[-1]
        try:
            distance = pose_distance(last.poses[0], record.poses[0], visibility_threshold)
        except NoCommonJoints:
            continue
        if distance < min_pose_dist_factor * anchor_length:
            continue
        similarity = histogram_similarity(last.image, record.image, bins)
        if not sim_min <= similarity <= sim_max:
            continue
        kept.append(record)
        anchor_length = length
        if len(kept) == max_keyframes:
            break
    return kept if len(kept) >= 2 else []


# --- pairs and assets ------------------------------------------------------------------

def dilated_bbox(skeleton: PoseSkeleton, width: int, height: int, dilation: float,
                 visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD):
    """Half-open integer box around the visible joints, grown by dilation x diagonal per side."""
    min_x, min_y, max_x, max_y = pose_bbox(skeleton, visibility_threshold)
    pad = dilation * math.hypot(max_x - min_x, max_y - min_y)
    x0 = min(max(int(math.floor(min_x - pad)), 0), width - 1)
    y0 = min(max(int(math.floor(min_y - pad)), 0), height - 1)
    x1 = max(min(int(math.ceil(max_x + pad)), width), x0 + 1)
    y1 = max(min(int(math.ceil(max_y + pad)), height), y0 + 1)
    return (x0, y0, x1, y1)


def make_pairs(keyframes, mask_dilation: float = 0.1,
               visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD):
    """Every ordered (target, reference) pair of distinct keyframes."""
    if len(keyframes) < 2:
        raise ValueError("make_pairs needs at least two keyframes")
    pairs = []
    for target in keyframes:
        for reference in keyframes:
            if target.frame_index == reference.frame_index:
                continue
            pairs.append(FramePair(
                video_id=target.video_id,
                target_frame_index=target.frame_index,
                reference_frame_index=reference.frame_index,
                mask_bbox=dilated_bbox(target.poses[0], target.width, target.height,
                                       mask_dilation, visibility_threshold),
                reference_crop_bbox=dilated_bbox(reference.poses[0], reference.width, reference.height,
                                                 mask_dilation, visibility_threshold),
                target_pose=target.poses[0],
                reference_pose=reference.poses[0],
            ))
    return pairs


def bbox_mask(height: int, width: int, bbox) -> np.ndarray:
    x0, y0, x1, y1 = bbox
    mask = np.zeros((height, width), dtype=np.uint8)
    mask[y0:y1, x0:x1] = 1
    return mask


def render_pair_assets(pair: FramePair, frames, fill_value: int = 128, reference_resolution: int = 64):
    """(masked_target, mask, reference_crop) for one pair.

    frames maps frame_index -> FrameRecord. The mask is 1 inside mask_bbox.
    """
    try:
        target = frames[pair.target_frame_index].image
        reference = frames[pair.reference_frame_index].image
    except KeyError as e:
        raise DatasetInputError(f"{pair.video_id}: frame {e.args[0]} not available") from e
    mask = bbox_mask(target.shape[0], target.shape[1], pair.mask_bbox)
    masked_target = target.copy()
    masked_target[mask.astype(bool)] = fill_value
    x0, y0, x1, y1 = pair.reference_crop_bbox
    crop = Image.fromarray(reference[y0:y1, x0:x1])
    crop = crop.resize((reference_resolution, reference_resolution), Image.BILINEAR)
    return masked_target, mask, np.asarray(crop, dtype=np.uint8)


# --- input loading ----------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert('RGB'), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetInputError(f"cannot read image {path}: {e}") from e


def write_png(path, array):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(array).save(path, format='PNG')


def list_videos(frames_dir):
    if not os.path.isdir(frames_dir):
        raise DatasetInputError(f"frames directory not found: {frames_dir}")
    return sorted(name for name in os.listdir(frames_dir) if os.path.isdir(os.path.join(frames_dir, name)))


def load_video(video_id, frames_dir, poses_dir):
    """FrameRecords for one video, ordered by frame index."""
    video_dir = os.path.join(frames_dir, video_id)
    pose_path = os.path.join(poses_dir, f"{video_id}.jsonl")
    if not os.path.isfile(pose_path):
        raise DatasetInputError(f"pose file not found for video {video_id}: {pose_path}")
    try:
        detections = read_pose_jsonl(pose_path)
    except InvalidPose as e:
        raise DatasetInputError(str(e)) from e

    records = []
    for name in os.listdir(video_dir):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in FRAME_EXTENSIONS or not stem.isdigit():
            continue
        frame_index = int(stem)
        image = read_image(os.path.join(video_dir, name))
        records.append(FrameRecord(video_id, frame_index, image, tuple(detections.get(frame_index, ()))))
    records.sort(key=lambda r: r.frame_index)
    return records


# --- manifest assembly ------------------------------------------------------------------

class BuildOutputs:
    """Files and directories one build created, so a failed build removes exactly those."""

    def __init__(self):
        self.files = []
        self.directories = []
        self._lock = threading.Lock()

    def makedirs(self, path):
        created = []
        head = os.path.abspath(path)
        while head and not os.path.isdir(head):
            created.append(head)
            head = os.path.dirname(head)
        os.makedirs(path, exist_ok=True)
        with self._lock:
            self.directories.extend(created)

    def add_file(self, path):
        with self._lock:
            self.files.append(os.path.abspath(path))

    def write_png(self, path, array):
        self.makedirs(os.path.dirname(path))
        existed = os.path.exists(path)
        try:
            write_png(path, array)
        finally:
            if not existed and os.path.exists(path):
                self.add_file(path)

    def remove(self):
        for path in self.files:
            if os.path.isfile(path):
                os.remove(path)
        # deepest first; a directory still holding files this build did not create stays
        for directory in sorted(set(self.directories), key=len, reverse=True):
            try:
                os.rmdir(directory)
            except OSError:
                pass


def _relative(path, root):
    return os.path.relpath(path, root).replace(os.sep, '/')


def process_video(video_id, frames_dir, poses_dir, manifest_dir, config: PipelineConfig,
                  outputs: Optional[BuildOutputs] = None):
    """Filter, select, pair and render one video; returns its ManifestRecords."""
    outputs = outputs or BuildOutputs()
    frames = load_video(video_id, frames_dir, poses_dir)
    passing = [r for r in frames if frame_filter(r, config.visibility_threshold, config.majority_count)]
    keyframes = select_keyframes(passing, config.min_pose_dist_factor, config.sim_min, config.sim_max,
                                 config.max_keyframes, config.visibility_threshold, config.histogram_bins)
    if not keyframes:
        print_warning(f"{video_id}: rejected ({len(passing)}/{len(frames)} frames passed the filter)")
        return []
    print_info(f"{video_id}: keyframes {[r.frame_index for r in keyframes]}")

    by_index = {r.frame_index: r for r in keyframes}
    asset_dir = os.path.join(manifest_dir, 'assets', video_id)
    records = []
    for pair in make_pairs(keyframes, config.mask_dilation, config.visibility_threshold):
        masked_target, mask, reference_crop = render_pair_assets(
            pair, by_index, config.fill_value, config.reference_resolution)
        stem = f"{pair.target_frame_index:06d}_{pair.reference_frame_index:06d}"
        paths = {
            'target': os.path.join(asset_dir, f"{pair.target_frame_index:06d}_frame.png"),
            'reference': os.path.join(asset_dir, f"{pair.reference_frame_index:06d}_frame.png"),
            'masked': os.path.join(asset_dir, f"{stem}_masked.png"),
            'mask': os.path.join(asset_dir, f"{stem}_mask.png"),
            'crop': os.path.join(asset_dir, f"{stem}_reference_crop.png"),
        }
        outputs.write_png(paths['masked'], masked_target)
        outputs.write_png(paths['mask'], mask * 255)
        outputs.write_png(paths['crop'], reference_crop)
        target = by_index[pair.target_frame_index]
        records.append(ManifestRecord(
            pair, target.width, target.height,
            target_path=_relative(paths['target'], manifest_dir),
            reference_path=_relative(paths['reference'], manifest_dir),
            masked_target_path=_relative(paths['masked'], manifest_dir),
            mask_path=_relative(paths['mask'], manifest_dir),
            reference_crop_path=_relative(paths['crop'], manifest_dir),
        ))
    for record in keyframes:
        outputs.write_png(os.path.join(asset_dir, f"{record.frame_index:06d}_frame.png"), record.image)
    return records


def held_out_videos(video_ids, val_fraction: float) -> frozenset:
    """Videos whose pairs go to the validation split.

    Videos are ranked by a hash of their id and the first
    round(val_fraction * n) are held out. A positive fraction holds out at
    least one video and always leaves one for training; a single video is
    never held out.
    """
    videos = sorted(set(video_ids))
    if val_fraction <= 0.0 or len(videos) < 2:
        return frozenset()
    count = min(max(1, round(val_fraction * len(videos))), len(videos) - 1)
    ranked = sorted(videos, key=lambda v: (hashlib.sha256(v.encode('utf-8')).hexdigest(), v))
    return frozenset(ranked[:count])


def assign_splits(records, val_fraction: float):
    held_out = held_out_videos((r.pair.video_id for r in records), val_fraction)
    return [replace(r, split=VAL_SPLIT if r.pair.video_id in held_out else TRAIN_SPLIT) for r in records]


def build_dataset(frames_dir, poses_dir, manifest_path, config: PipelineConfig = PipelineConfig(), jobs: int = 1):
    """Run the whole curation pipeline and write the manifest.

    Videos are processed independently (on `jobs` threads); the manifest is
    written once, ordered by video, target frame and reference frame, with
    whole videos held out for validation. On failure the files and
    directories this call created are removed; anything already there stays.
    """
    manifest_dir = os.path.dirname(os.path.abspath(manifest_path))
    outputs = BuildOutputs()
    try:
        videos = list_videos(frames_dir)
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_video = list(pool.map(
                lambda v: process_video(v, frames_dir, poses_dir, manifest_dir, config, outputs), videos))
        records = sorted((r for batch in per_video for r in batch),
                         key=lambda r: (r.pair.video_id, r.pair.target_frame_index, r.pair.reference_frame_index))
        records = assign_splits(records, config.val_fraction)
        held_out = sorted({r.pair.video_id for r in records if r.split == VAL_SPLIT})
        if held_out:
            print_info(f"Held out for validation: {', '.join(held_out)}")
        elif config.val_fraction > 0.0 and records:
            print_warning("Only one video survived curation; no validation split")
        outputs.makedirs(manifest_dir)
        outputs.add_file(manifest_path)
        write_manifest(manifest_path, records)
    except BaseException:
        outputs.remove()
        raise
    return records


def write_manifest(path, records):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as manifest_file:
        for record in records:
            manifest_file.write(json.dumps(record.to_dict(), ensure_ascii=False) + '\n')
    return path


def read_manifest(path):
    records = []
    with open(path, 'r', encoding='utf-8') as manifest_file:
        for line_number, line in enumerate(manifest_file, 1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, InvalidPose, TypeError, ValueError) as e:
                raise ManifestError(f"{path}:{line_number}: {e}") from e
    return records


def resolve_asset(manifest_path, relative_path):
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), relative_path)


def validate_manifest(manifest_path, records=None):
    """Raise ManifestError listing every referenced file that does not exist."""
    records = read_manifest(manifest_path) if records is None else records
    missing = []
    for record in records:
        for relative in (record.target_path, record.reference_path, record.masked_target_path,
                         record.mask_path, record.reference_crop_path):
            if not os.path.isfile(resolve_asset(manifest_path, relative)):
                missing.append(relative)
    if missing:
        raise ManifestError(f"{len(missing)} manifest assets missing, first: {missing[0]}")
    return records


def manifest_stats(manifest) -> ManifestStats:
    """Counts in the dataset-summary layout; manifest is a path or a record list."""
    records = read_manifest(manifest) if isinstance(manifest, (str, os.PathLike)) else list(manifest)
    if not records:
        return ManifestStats()
    frames = set()
    for r in records:
        frames.add((r.pair.video_id, r.pair.target_frame_index))
        frames.add((r.pair.video_id, r.pair.reference_frame_index))
    captions = [r.caption for r in records if r.caption]
    mean_length = sum(len(c) for c in captions) / len(captions) if captions else 0.0
    return ManifestStats(
        videos=len({r.pair.video_id for r in records}),
        frames=len(frames),
        pairs=len(records),
        captions=len(captions),
        mean_caption_length=mean_length,
    )


STATS_COLUMNS = ('Dataset', 'Videos', 'Frames', 'Pairs', 'Captions', 'Caption Length')


def stats_row(stats: ManifestStats, dataset_name: str):
    return (dataset_name, f"{stats.videos:,}", f"{stats.frames:,}", f"{stats.pairs:,}",
            f"{stats.captions:,}", f"{stats.mean_caption_length:.1f}")


def stats_table_rows(manifest, dataset_name: str = 'dataset'):
    """One row for the whole manifest, then one per non-empty split."""
    records = read_manifest(manifest) if isinstance(manifest, (str, os.PathLike)) else list(manifest)
    rows = [stats_row(manifest_stats(records), dataset_name)]
    for split in SPLITS:
        subset = [r for r in records if r.split == split]
        if subset:
            rows.append(stats_row(manifest_stats(subset), f"{dataset_name}/{split}"))
    return rows
