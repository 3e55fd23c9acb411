"""Metrics for generated edits: FID, PCKh over a set, rater-study aggregation.

FID here runs on a fixed random-projection feature extractor, so values are
comparable within a run but not with Inception-based numbers.
"""
import csv
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Optional

import numpy as np
import scipy.linalg
from PIL import Image, ImageDraw

from conditioning import Variant
from dataset_pipeline import VAL_SPLIT
from pose_geometry import (
    COCO_LIMBS,
    DEFAULT_PCKH_ALPHA,
    DEFAULT_VISIBILITY_THRESHOLD,
    MissingJoints,
    PoseSkeleton,
    pckh_counts,
)

EIGENVALUE_TOLERANCE = 1e-10
RESIDUAL_TOLERANCE = 1e-6
RATINGS_COLUMNS = ('scene_id', 'config', 'question', 'rater_id', 'score')


class DimensionMismatch(ValueError):
    pass


class NumericalFailure(ArithmeticError):
    pass


class EmptyInput(ValueError):
    pass


class RatingsFormatError(ValueError):
    pass


# --- FID ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray = field(repr=False)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1:
            # n scalar samples
            features = features.reshape(-1, 1)
        if features.ndim != 2:
            raise ValueError(f"features must be an (n, d) matrix, got shape {features.shape}")
        if features.shape[0] < 2:
            raise EmptyInput(f"need at least 2 feature vectors for a covariance, got {features.shape[0]}")
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, 'features', features)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if covariance.shape != (len(mean), len(mean)):
            raise DimensionMismatch(f"covariance {covariance.shape} does not match mean of length {len(mean)}")
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'covariance', covariance)

    @property
    def d(self) -> int:
        return len(self.mean)

    @classmethod
    def from_features(cls, feature_set: FeatureSet) -> "GaussianStats":
        features = feature_set.features
        return cls(features.mean(axis=0), np.cov(features, rowvar=False))


def _psd_sqrt(matrix: np.ndarray, name: str):
    """Symmetric square root via eigh; tiny negative eigenvalues are clamped to 0."""
    symmetric = (matrix + matrix.T) / 2.0
    eigenvalues, eigenvectors = scipy.linalg.eigh(symmetric)
    scale = max(1.0, float(np.max(np.abs(eigenvalues)))) if eigenvalues.size else 1.0
    if np.any(eigenvalues < -EIGENVALUE_TOLERANCE * scale):
        raise NumericalFailure(f"{name} is not positive semi-definite (min eigenvalue {eigenvalues.min():.3e})")
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    root = (eigenvectors * np.sqrt(eigenvalues)) @ eigenvectors.T
    residual = np.linalg.norm(root @ root - symmetric) / max(np.linalg.norm(symmetric), 1.0)
    if residual > RESIDUAL_TOLERANCE:
        raise NumericalFailure(f"square root of {name} has residual {residual:.3e}")
    return root, eigenvalues


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))

    tr((S_a S_b)^(1/2)) is taken as tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)),
    which is symmetric and so has a real square root.
    """
    if a.d != b.d:
        raise DimensionMismatch(f"feature dimensions differ: {a.d} vs {b.d}")
    root_a, _ = _psd_sqrt(a.covariance, 'covariance a')
    product = root_a @ b.covariance @ root_a
    _, product_eigenvalues = _psd_sqrt(product, 'covariance product')
    diff = a.mean - b.mean
    distance = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance)
                     - 2.0 * np.sum(np.sqrt(product_eigenvalues)))
    return max(distance, 0.0)


def fid(a, b) -> float:
    """Frechet distance between two FeatureSets (or precomputed GaussianStats)."""
    stats_a = a if isinstance(a, GaussianStats) else GaussianStats.from_features(a)
    stats_b = b if isinstance(b, GaussianStats) else GaussianStats.from_features(b)
    return frechet_distance(stats_a, stats_b)


class RandomProjectionFeatures:
    """Fixed seeded linear features: resize, scale to [0, 1], project to dim."""

    def __init__(self, dim: int = 64, resolution: int = 32, seed: int = 0):
        self.dim = dim
        self.resolution = resolution
        rng = np.random.default_rng(seed)
        in_dim = resolution * resolution * 3
        self.projection = rng.standard_normal((in_dim, dim)) / np.sqrt(in_dim)

    def embed(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.uint8)
        if image.shape[:2] != (self.resolution, self.resolution):
            image = np.asarray(Image.fromarray(image).resize((self.resolution, self.resolution), Image.BILINEAR))
        return (image.astype(np.float64) / 255.0).reshape(-1) @ self.projection

    def __call__(self, images) -> FeatureSet:
        return FeatureSet(np.stack([self.embed(image) for image in images]))


# --- PCKh over a set ---------------------------------------------------------------

@dataclass(frozen=True)
class PCKhResult:
    score: float
    evaluated: int
    skipped: int


def pckh_over_set(predicted_poses, ground_truth_poses, alpha: float = DEFAULT_PCKH_ALPHA,
                  visibility_threshold: float = DEFAULT_VISIBILITY_THRESHOLD) -> PCKhResult:
    """Mean per-pair PCKh. Pairs whose ground truth has no head length are skipped."""
    predicted_poses, ground_truth_poses = list(predicted_poses), list(ground_truth_poses)
    if len(predicted_poses) != len(ground_truth_poses):
        raise ValueError(f"{len(predicted_poses)} predictions for {len(ground_truth_poses)} ground truths")
    if not predicted_poses:
        raise EmptyInput("no pose pairs to evaluate")
    scores, skipped = [], 0
    for predicted, ground_truth in zip(predicted_poses, ground_truth_poses):
        try:
            hits, evaluated = pckh_counts(predicted, ground_truth, alpha, visibility_threshold)
        except MissingJoints:
            skipped += 1
            continue
        scores.append(Fraction(hits, evaluated))
    if not scores:
        raise EmptyInput(f"all {skipped} pose pairs lack a measurable head length")
    return PCKhResult(float(sum(scores) / len(scores)), len(scores), skipped)


# --- rater study -------------------------------------------------------------------

class Question(Enum):
    IDENTITY = 'identity'
    CONTROL = 'control'
    INTERACTION = 'interaction'


@dataclass(frozen=True)
class RatingRecord:
    scene_id: str
    config: Variant
    question: Question
    rater_id: str
    score: int

    def __post_init__(self):
        if self.score not in (0, 1):
            raise ValueError(f"score must be 0 or 1, got {self.score!r}")


def read_ratings_csv(path):
    """Parse scene_id,config,question,rater_id,score; any bad line raises RatingsFormatError."""
    records = []
    try:
        with open(path, 'r', newline='', encoding='utf-8') as ratings_file:
            reader = csv.reader(ratings_file)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != RATINGS_COLUMNS:
                raise RatingsFormatError(f"{path}:1: header must be {','.join(RATINGS_COLUMNS)}, got {header}")
            for line_number, row in enumerate(reader, 2):
                if not row or not any(cell.strip() for cell in row):
                    continue
                if len(row) != len(RATINGS_COLUMNS):
                    raise RatingsFormatError(f"{path}:{line_number}: expected 5 fields, got {len(row)}")
                scene_id, config, question, rater_id, score = (cell.strip() for cell in row)
                try:
                    records.append(RatingRecord(scene_id, Variant.parse(config), Question(question.lower()),
                                                rater_id, int(score)))
                except ValueError as e:
                    raise RatingsFormatError(f"{path}:{line_number}: {e}") from e
    except UnicodeDecodeError as e:
        raise RatingsFormatError(f"{path}: not UTF-8 text: {e}") from e
    return records


def aggregate_ratings(records):
    """{(variant, question): percentage of 1 scores}; integer sums keep it order-independent."""
    totals = {}
    for record in records:
        key = (record.config, record.question)
        ones, count = totals.get(key, (0, 0))
        totals[key] = (ones + record.score, count + 1)
    return {key: 100 * ones / count for key, (ones, count) in totals.items()}


def format_percentage(value: float) -> str:
    """61 -> '61%', 63.5 -> '63.5%' (one decimal at most)"""
    text = f"{value:.1f}"
    if text.endswith('.0'):
        text = text[:-2]
    return f"{text}%"


def ratings_by_label(percentages):
    """{variant label: {question: 'NN%'}} for the report"""
    table = {}
    for (variant, question), value in sorted(percentages.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value)):
        table.setdefault(variant.label, {})[question.value] = format_percentage(value)
    return table


RATINGS_TABLE_COLUMNS = ('Config',) + tuple(q.value.capitalize() for q in Question)


def ratings_table_rows(percentages):
    """One row per rated variant, in variant order; unrated questions read N/A."""
    rows = []
    for variant in Variant:
        if not any(key[0] == variant for key in percentages):
            continue
        row = [variant.label]
        for question in Question:
            value = percentages.get((variant, question))
            row.append('N/A' if value is None else format_percentage(value))
        rows.append(row)
    return rows


# --- pose overlay ------------------------------------------------------------------

LIMB_COLORS = (
    (255, 0, 0), (255, 85, 0), (255, 170, 0), (255, 255, 0), (170, 255, 0), (85, 255, 0),
    (0, 255, 0), (0, 255, 85), (0, 255, 170), (0, 255, 255), (0, 170, 255), (0, 85, 255),
    (0, 0, 255), (85, 0, 255), (170, 0, 255), (255, 0, 255), (255, 0, 170),
)
KEYPOINT_COLOR = (255, 255, 255)


def pose_overlay(image: np.ndarray, skeleton: PoseSkeleton, threshold: float = DEFAULT_VISIBILITY_THRESHOLD,
                 radius: int = 2, line_width: int = 1) -> np.ndarray:
    """Draw visible limbs (fixed color per limb) and keypoints over a copy of image."""
    canvas = Image.fromarray(np.asarray(image, dtype=np.uint8).copy())
    draw = ImageDraw.Draw(canvas)
    height, width = canvas.height, canvas.width

    def point(k):
        return (min(max(k.x, 0.0), width - 1.0), min(max(k.y, 0.0), height - 1.0))

    for (a, b), color in zip(COCO_LIMBS, LIMB_COLORS):
        if skeleton[a].visible(threshold) and skeleton[b].visible(threshold):
            draw.line([point(skeleton[a]), point(skeleton[b])], fill=color, width=line_width)
    for keypoint in skeleton.keypoints:
        if keypoint.visible(threshold):
            x, y = point(keypoint)
            draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=KEYPOINT_COLOR)
    return np.asarray(canvas)


# --- report ------------------------------------------------------------------------
#
# {'seed': last seed written,
#  'configs': {variant: {split: {'label', 'images', 'seed', 'fid'?, 'pckh'?, ...}}},
#  'ratings': {subset: {variant label: {question: 'NN%'}}}}

class ReportFormatError(ValueError):
    pass


def build_metric_report(seed: int, variant, fid_value: Optional[float] = None,
                        pckh_result: Optional[PCKhResult] = None, ratings=None, image_count: int = 0,
                        split: str = VAL_SPLIT):
    """Report for one evaluation run; ratings maps a subset name to aggregate_ratings output."""
    variant = Variant.parse(variant)
    entry = {'label': variant.label, 'images': image_count, 'seed': seed}
    if fid_value is not None:
        entry['fid'] = fid_value
    if pckh_result is not None:
        entry['pckh'] = pckh_result.score
        entry['pckh_evaluated'] = pckh_result.evaluated
        entry['pckh_skipped'] = pckh_result.skipped
    report = {'seed': seed, 'configs': {variant.value: {split: entry}}}
    subsets = {subset: ratings_by_label(p) for subset, p in (ratings or {}).items() if p}
    if subsets:
        report['ratings'] = subsets
    return report


def merge_metric_reports(existing, update):
    """update wins per (config, split) and per ratings subset; everything else in existing is kept."""
    merged = {'seed': update['seed'],
              'configs': {variant: dict(splits) for variant, splits in existing.get('configs', {}).items()}}
    for variant, splits in update['configs'].items():
        merged['configs'].setdefault(variant, {}).update(splits)
    ratings = {**existing.get('ratings', {}), **update.get('ratings', {})}
    if ratings:
        merged['ratings'] = ratings
    return merged


def read_metric_report(path):
    """The report at path, or None when there is none yet."""
    if not os.path.isfile(path):
        return None
    try:
        with open(path, 'r', encoding='utf-8') as report_file:
            report = json.load(report_file)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ReportFormatError(f"{path}: not a JSON report: {e}") from e
    configs = report.get('configs') if isinstance(report, dict) else None
    if not isinstance(configs, dict) or not all(
            isinstance(splits, dict) and all(isinstance(entry, dict) for entry in splits.values())
            for splits in configs.values()):
        raise ReportFormatError(f"{path}: expected configs keyed by variant, then split")
    if not isinstance(report.get('ratings', {}), dict):
        raise ReportFormatError(f"{path}: ratings must be keyed by subset")
    return report


def write_metric_report(path, report):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as report_file:
        json.dump(report, report_file, indent=2, sort_keys=True)
        report_file.write('\n')
    return path


def update_metric_report(path, report):
    """Merge report into the one already at path (if any) and write the result."""
    existing = read_metric_report(path)
    merged = report if existing is None else merge_metric_reports(existing, report)
    write_metric_report(path, merged)
    return merged
