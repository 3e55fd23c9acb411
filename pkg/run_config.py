"""Run configuration: defaults < KEY=value config file < command-line flags.

The config file uses the same dotenv format as the credentials file, so one
parser (python-dotenv) covers both.
"""
import os
from dataclasses import asdict, dataclass, fields

from dotenv import dotenv_values, set_key

DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'config', 'run_config.env')
DEFAULT_PROMPT_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'config', 'caption_prompt.txt')

VARIANT_CHOICES = ('c1', 'c2', 'c3', 'c4')
_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    frames_dir: str = 'data/frames'
    poses_dir: str = 'data/poses'
    manifest_path: str = 'data/manifest/manifest.jsonl'
    checkpoint_dir: str = 'checkpoints'
    reports_dir: str = 'reports'
    log_dir: str = 'run_logs'
    caption_prompt_path: str = DEFAULT_PROMPT_PATH

    # dataset curation
    visibility_threshold: float = 0.3
    majority_count: int = 9
    min_pose_dist_factor: float = 1.0
    sim_min: float = 0.35
    sim_max: float = 0.98
    max_keyframes: int = 5
    mask_dilation: float = 0.1
    fill_value: int = 128
    histogram_bins: int = 64
    reference_resolution: int = 64
    val_fraction: float = 0.2

    # captioning
    fewshot_count: int = 10
    caption_retries: int = 3
    caption_backoff: float = 1.0
    caption_timeout: float = 30.0
    caption_max_in_flight: int = 4

    # conditioning
    variant: str = 'c4'
    combine_reference_pose: bool = False

    # diffusion
    image_size: int = 32
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_width: int = 32
    context_width: int = 64
    attention_heads: int = 4
    guidance_weight: float = 3.0
    cond_dropout: float = 0.1
    learning_rate: float = 2e-3
    batch_size: int = 8
    epochs: int = 200
    checkpoint_every: int = 50
    sample_steps: int = 100
    augment_flip: bool = False

    # evaluation
    pckh_alpha: float = 0.5
    fid_feature_dim: int = 64

    seed: int = 0
    jobs: int = 1

    def validate(self) -> "RunConfig":
        checks = [
            (0.0 <= self.visibility_threshold <= 1.0, 'VISIBILITY_THRESHOLD must be in [0, 1]'),
            (0 <= self.majority_count <= 17, 'MAJORITY_COUNT must be in [0, 17]'),
            (self.min_pose_dist_factor >= 0.0, 'MIN_POSE_DIST_FACTOR must be >= 0'),
            (0.0 <= self.sim_min <= self.sim_max <= 1.0, 'need 0 <= SIM_MIN <= SIM_MAX <= 1'),
            (self.max_keyframes >= 2, 'MAX_KEYFRAMES must be >= 2'),
            (self.mask_dilation >= 0.0, 'MASK_DILATION must be >= 0'),
            (0 <= self.fill_value <= 255, 'FILL_VALUE must be in [0, 255]'),
            (self.histogram_bins >= 1, 'HISTOGRAM_BINS must be >= 1'),
            (self.reference_resolution >= 8, 'REFERENCE_RESOLUTION must be >= 8'),
            (0.0 <= self.val_fraction < 1.0, 'VAL_FRACTION must be in [0, 1)'),
            (self.fewshot_count >= 0, 'FEWSHOT_COUNT must be >= 0'),
            (self.caption_retries >= 0, 'CAPTION_RETRIES must be >= 0'),
            (self.caption_max_in_flight >= 1, 'CAPTION_MAX_IN_FLIGHT must be >= 1'),
            (self.variant in VARIANT_CHOICES, f'VARIANT must be one of {", ".join(VARIANT_CHOICES)}'),
            (self.image_size >= 8 and self.image_size % 4 == 0, 'IMAGE_SIZE must be a multiple of 4, >= 8'),
            (self.timesteps >= 1, 'TIMESTEPS must be >= 1'),
            (0.0 < self.beta_start <= self.beta_end < 1.0, 'need 0 < BETA_START <= BETA_END < 1'),
            (self.base_width >= 2, 'BASE_WIDTH must be >= 2'),
            (self.context_width >= 1, 'CONTEXT_WIDTH must be >= 1'),
            (self.attention_heads >= 1 and self.base_width % self.attention_heads == 0,
             'ATTENTION_HEADS must divide BASE_WIDTH'),
            (0.0 <= self.cond_dropout <= 1.0, 'COND_DROPOUT must be in [0, 1]'),
            (self.learning_rate > 0.0, 'LEARNING_RATE must be > 0'),
            (self.batch_size >= 1, 'BATCH_SIZE must be >= 1'),
            (self.epochs >= 0, 'EPOCHS must be >= 0'),
            (self.checkpoint_every >= 1, 'CHECKPOINT_EVERY must be >= 1'),
            (1 <= self.sample_steps <= self.timesteps, 'need 1 <= SAMPLE_STEPS <= TIMESTEPS'),
            (self.pckh_alpha > 0.0, 'PCKH_ALPHA must be > 0'),
            (self.fid_feature_dim >= 1, 'FID_FEATURE_DIM must be >= 1'),
            (self.jobs >= 1, 'JOBS must be >= 1'),
        ]
        problems = [message for ok, message in checks if not ok]
        if problems:
            raise ConfigError('; '.join(problems))
        return self

    def to_env(self):
        """Flat KEY -> string mapping, the on-disk representation."""
        return {name.upper(): _to_text(value) for name, value in asdict(self).items()}

    def replace(self, **overrides) -> "RunConfig":
        values = asdict(self)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig(**values).validate()


def _to_text(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    return str(value)


def _coerce(name, kind, raw):
    text = str(raw).strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"{name.upper()}: {e}") from e


def config_from_mapping(mapping) -> RunConfig:
    """Build a RunConfig from KEY=value pairs; unknown keys are rejected."""
    known = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for key, raw in mapping.items():
        name = key.lower()
        if name not in known:
            raise ConfigError(f"unknown config key {key}")
        if raw is None:
            continue
        values[name] = _coerce(name, known[name], raw)
    return RunConfig(**values)


def load_run_config(path=None, **overrides) -> RunConfig:
    """Defaults, then the config file (if any), then non-None overrides."""
    mapping = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        mapping = dotenv_values(path)
    config = config_from_mapping(mapping)
    return config.replace(**overrides)


def write_run_config(path, config: RunConfig):
    """Record a config next to an artifact, one KEY=value line per field."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8'):
        pass
    for key, value in config.to_env().items():
        set_key(path, key, value, quote_mode='never')
    return path
