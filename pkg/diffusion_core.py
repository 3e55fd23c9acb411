"""Pixel-space inpainting diffusion at toy scale.

Images are 3-channel tensors in [-1, 1]. The denoiser sees the noisy target,
the binary mask and the masked target stacked on the channel axis, plus a
conditioning context through cross-attention, and predicts the added noise.
Timesteps run from 1 to T.
"""
import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from PIL import Image
from torch import nn
from torch.nn import functional as F
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from conditioning import ConditioningBundle, ConditioningEncoder, ModalityMismatch, make_adapters
from dataset_pipeline import TRAIN_SPLIT, ManifestError, read_image, read_manifest, resolve_asset
from pose_geometry import Keypoint, PoseSkeleton, mirror_pose
from run_config import RunConfig, config_from_mapping
from utils.terminal_colors import print_info, print_success, print_warning

CHECKPOINT_FORMAT = 'nonrigid-edit-checkpoint'
CHECKPOINT_VERSION = 1
LOSS_LOG_COLUMNS = ('step', 'epoch', 'loss')


class InvalidSchedule(ValueError):
    pass


class NonFiniteLoss(ArithmeticError):
    def __init__(self, batch_index, loss_value=float('nan')):
        super().__init__(f"non-finite loss {loss_value} at batch {batch_index}")
        self.batch_index = batch_index
        self.loss_value = loss_value


class CheckpointError(ValueError):
    pass


# --- noise schedule ----------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t) -> float:
        """alpha_bar at timestep t in 1..T; t == 0 is the clean image (1.0)."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def to_dict(self):
        return {'timesteps': self.T, 'betas': [float(b) for b in self.betas]}


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule with T steps"""
    if int(T) != T or T < 1:
        raise InvalidSchedule(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidSchedule(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def schedule_from_betas(betas) -> DiffusionSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) == 0:
        raise InvalidSchedule("betas must be a non-empty vector")
    if not (np.all(betas > 0) and np.all(betas < 1) and np.all(np.diff(betas) >= 0)):
        raise InvalidSchedule("betas must be non-decreasing and inside (0, 1)")
    return DiffusionSchedule(betas)


def _timestep_tensor(t, batch_size, schedule, device=None):
    t = torch.as_tensor(t, dtype=torch.long, device=device)
    if t.ndim == 0:
        t = t.expand(batch_size)
    if t.min() < 1 or t.max() > schedule.T:
        raise ValueError(f"timesteps must lie in [1, {schedule.T}], got {t.tolist()}")
    return t


def q_sample(x0: torch.Tensor, t, epsilon: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, per batch item"""
    t = _timestep_tensor(t, x0.shape[0], schedule, x0.device)
    alpha_bars = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype, device=x0.device)[t - 1]
    alpha_bars = alpha_bars.view(-1, *([1] * (x0.ndim - 1)))
    return alpha_bars.sqrt() * x0 + (1.0 - alpha_bars).sqrt() * epsilon


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding, (B,) -> (B, dim)"""
    half = dim // 2
    frequencies = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    angles = t.to(torch.float64)[:, None] * frequencies[None, :]
    embedding = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        embedding = F.pad(embedding, (0, 1))
    return embedding


# --- denoiser ----------------------------------------------------------------------

def _group_count(channels: int) -> int:
    return max(g for g in range(1, min(8, channels) + 1) if channels % g == 0)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm_feature = nn.GroupNorm(_group_count(in_channels), in_channels)
        self.conv_feature = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.linear_time = nn.Linear(time_dim, out_channels)
        self.norm_merged = nn.GroupNorm(_group_count(out_channels), out_channels)
        self.conv_merged = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)
        if in_channels == out_channels:
            self.residual_layer = nn.Identity()
        else:
            self.residual_layer = nn.Conv2d(in_channels, out_channels, kernel_size=1)

    def forward(self, feature, time):
        residue = feature
        feature = self.conv_feature(F.silu(self.norm_feature(feature)))
        merged = feature + self.linear_time(F.silu(time))[:, :, None, None]
        merged = self.conv_merged(F.silu(self.norm_merged(merged)))
        return merged + self.residual_layer(residue)


class CrossAttentionBlock(nn.Module):
    """Pixels attend over the context rows; residual around the attention."""

    def __init__(self, channels: int, context_width: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(_group_count(channels), channels)
        self.attention = nn.MultiheadAttention(channels, heads, kdim=context_width, vdim=context_width,
                                               batch_first=True)

    def forward(self, x, context):
        n, c, h, w = x.shape
        query = self.norm(x).view(n, c, h * w).transpose(1, 2)
        attended, _ = self.attention(query, context, context, need_weights=False)
        return x + attended.transpose(1, 2).reshape(n, c, h, w)


class InpaintingDenoiser(nn.Module):
    """Two-resolution U-Net with one cross-attention block per resolution.

    Input channels are noisy (C) + mask (1) + masked target (C). The 768-wide
    context is first projected down to context_width.
    """

    def __init__(self, image_channels=3, base_width=32, context_width=64, attention_heads=4, context_dim=768):
        super().__init__()
        if base_width % attention_heads:
            raise ValueError(f"attention_heads ({attention_heads}) must divide base_width ({base_width})")
        self.image_channels = image_channels
        self.in_channels = 2 * image_channels + 1
        self.base_width = base_width
        w = base_width
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.context_projection = nn.Linear(context_dim, context_width)
        self.context_norm = nn.LayerNorm(context_width)
        self.conv_input = nn.Conv2d(self.in_channels, w, kernel_size=3, padding=1)
        self.down_block = ResidualBlock(w, w, w)
        self.down_attention = CrossAttentionBlock(w, context_width, attention_heads)
        self.downsample = nn.Conv2d(w, 2 * w, kernel_size=3, stride=2, padding=1)
        self.mid_block = ResidualBlock(2 * w, 2 * w, w)
        self.mid_attention = CrossAttentionBlock(2 * w, context_width, attention_heads)
        self.upsample = nn.Conv2d(2 * w, w, kernel_size=3, padding=1)
        self.up_block = ResidualBlock(2 * w, w, w)
        self.up_attention = CrossAttentionBlock(w, context_width, attention_heads)
        self.norm_output = nn.GroupNorm(_group_count(w), w)
        self.conv_output = nn.Conv2d(w, image_channels, kernel_size=3, padding=1)

    def forward(self, noisy, mask, masked_target, t, context):
        x = torch.cat([noisy, mask, masked_target], dim=1)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"denoiser expects {self.in_channels} input channels, got {x.shape[1]}")
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ValueError(f"spatial size must be even, got {tuple(x.shape[-2:])}")
        t = torch.as_tensor(t, device=x.device)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        time = self.time_mlp(timestep_embedding(t, self.base_width).to(x.dtype))
        if context.ndim == 2:
            context = context.unsqueeze(0).expand(x.shape[0], -1, -1)
        context = self.context_norm(self.context_projection(context))

        skip = self.down_attention(self.down_block(self.conv_input(x), time), context)
        h = self.mid_attention(self.mid_block(self.downsample(skip), time), context)
        h = self.upsample(F.interpolate(h, size=skip.shape[-2:], mode='nearest'))
        h = self.up_attention(self.up_block(torch.cat([h, skip], dim=1), time), context)
        return self.conv_output(F.silu(self.norm_output(h)))


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --- objective and guidance --------------------------------------------------------

@dataclass
class TrainingBatch:
    x0: torch.Tensor
    mask: torch.Tensor
    masked_target: torch.Tensor
    context: torch.Tensor
    uncond_context: torch.Tensor


def training_loss(denoiser, batch: TrainingBatch, schedule: DiffusionSchedule, generator=None,
                  cond_dropout: float = 0.0, batch_index: int = 0) -> torch.Tensor:
    """Mean-per-element squared error between the added noise and the prediction.

    t is drawn uniformly from 1..T per item; with probability cond_dropout an
    item's context is swapped for the unconditional one.
    """
    x0 = batch.x0
    size = x0.shape[0]
    if size == 0:
        raise ValueError("empty batch")
    t = torch.randint(1, schedule.T + 1, (size,), generator=generator)
    epsilon = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    context = batch.context
    if cond_dropout > 0.0:
        drop = torch.rand(size, generator=generator) < cond_dropout
        uncond = batch.uncond_context.expand_as(context)
        context = torch.where(drop[:, None, None], uncond, context)
    noisy = q_sample(x0, t, epsilon, schedule)
    prediction = denoiser(noisy, batch.mask, batch.masked_target, t, context)
    loss = F.mse_loss(prediction, epsilon)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(batch_index, float(loss.detach()))
    return loss


@dataclass(frozen=True)
class DenoiserInput:
    noisy: torch.Tensor
    mask: torch.Tensor
    masked_target: torch.Tensor
    t: object

    def __post_init__(self):
        if self.mask.shape[1] != 1:
            raise ValueError(f"mask must have one channel, got {self.mask.shape[1]}")
        spatial = {tuple(self.noisy.shape[-2:]), tuple(self.mask.shape[-2:]), tuple(self.masked_target.shape[-2:])}
        if len(spatial) != 1:
            raise ValueError(f"noisy, mask and masked target differ in size: {sorted(spatial)}")


def cfg_epsilon(denoiser, inputs: DenoiserInput, cond_context, uncond_context, w: float) -> torch.Tensor:
    """eps_u + w (eps_c - eps_u); w == 0 and w == 1 return one branch untouched."""
    if cond_context.shape != uncond_context.shape:
        raise ModalityMismatch(f"context shapes differ: {tuple(cond_context.shape)} vs {tuple(uncond_context.shape)}")
    args = (inputs.noisy, inputs.mask, inputs.masked_target, inputs.t)
    eps_u = denoiser(*args, uncond_context)
    if w == 0:
        return eps_u
    eps_c = denoiser(*args, cond_context)
    if w == 1:
        return eps_c
    return eps_u + w * (eps_c - eps_u)


def respaced_timesteps(T: int, steps: int):
    """Evenly spaced timesteps from T down to 1; all of them when steps == T."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return [T]
    return sorted({int(round(v)) for v in np.linspace(1, T, steps)}, reverse=True)


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """uint8 (H, W, 3) -> (3, H, W) in [-1, 1]"""
    return torch.as_tensor(np.asarray(image, dtype=np.float64) / 127.5 - 1.0, dtype=dtype).permute(2, 0, 1)


def tensor_to_image(tensor: torch.Tensor) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> uint8 (H, W, 3)"""
    pixels = ((tensor.detach().to(torch.float64).clamp(-1.0, 1.0) + 1.0) * 127.5).round()
    return pixels.permute(1, 2, 0).cpu().numpy().astype(np.uint8)


@torch.no_grad()
def sample_edit(denoiser, masked_target: np.ndarray, mask: np.ndarray, bundle: ConditioningBundle,
                schedule: DiffusionSchedule, w: float = 3.0, generator=None, steps: Optional[int] = None) -> np.ndarray:
    """Ancestral sampling with guidance, then paste the result into the masked region.

    masked_target is uint8 (H, W, 3), mask is (H, W) with 1 where the person
    is generated. At every step the pixels outside the mask are replaced by
    masked_target noised to the step's timestep, and at the end they are
    copied from masked_target exactly.
    """
    steps = schedule.T if steps is None else steps
    mask = np.asarray(mask)
    masked_target = np.asarray(masked_target, dtype=np.uint8)
    if mask.shape != masked_target.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {masked_target.shape[:2]}")
    keep = mask == 0
    if keep.all():
        return masked_target.copy()

    denoiser.eval()
    dtype = next(denoiser.parameters()).dtype
    conditioned = image_to_tensor(masked_target, dtype).unsqueeze(0)
    mask_tensor = torch.as_tensor(mask != 0, dtype=dtype)[None, None]
    context = bundle.context.to(dtype).unsqueeze(0)
    uncond = bundle.uncond_context.to(dtype).unsqueeze(0)
    generate = mask_tensor.bool()

    def known_region(x, t):
        noised = q_sample(conditioned, t, torch.randn(x.shape, generator=generator, dtype=dtype), schedule)
        return torch.where(generate, x, noised)

    timesteps = respaced_timesteps(schedule.T, steps)
    x = known_region(torch.randn(conditioned.shape, generator=generator, dtype=dtype), timesteps[0])
    for i, t in enumerate(timesteps):
        previous = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        alpha_bar = schedule.alpha_bar(t)
        alpha_bar_prev = schedule.alpha_bar(previous)
        beta = 1.0 - alpha_bar / alpha_bar_prev

        inputs = DenoiserInput(x, mask_tensor, conditioned, torch.tensor([t]))
        epsilon = cfg_epsilon(denoiser, inputs, context, uncond, w)
        x0_pred = ((x - math.sqrt(1.0 - alpha_bar) * epsilon) / math.sqrt(alpha_bar)).clamp(-1.0, 1.0)
        mean = (math.sqrt(alpha_bar_prev) * beta / (1.0 - alpha_bar)) * x0_pred \
            + (math.sqrt(1.0 - beta) * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)) * x
        if previous > 0:
            variance = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
            x = mean + math.sqrt(variance) * torch.randn(x.shape, generator=generator, dtype=dtype)
            x = known_region(x, previous)
        else:
            x = mean

    generated = tensor_to_image(x[0])
    return np.where(keep[..., None], masked_target, generated)


def psnr(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Peak signal-to-noise ratio in dB for 8-bit images, optionally inside mask only"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mask is not None:
        selected = np.asarray(mask) != 0
        a, b = a[selected], b[selected]
        if a.size == 0:
            raise ValueError("mask selects no pixels")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float('inf')
    return 10.0 * math.log10(255.0 ** 2 / mse)


# --- data --------------------------------------------------------------------------

def rescale_pose(skeleton: PoseSkeleton, sx: float, sy: float) -> PoseSkeleton:
    return PoseSkeleton(tuple(Keypoint(k.x * sx, k.y * sy, k.confidence) for k in skeleton.keypoints))


def resize_image(image: np.ndarray, size: int, resample=Image.BILINEAR) -> np.ndarray:
    if image.shape[:2] == (size, size):
        return image
    return np.asarray(Image.fromarray(image).resize((size, size), resample))


def _scaled_bbox_mask(bbox, width, height, size) -> np.ndarray:
    """Half-open bbox in source pixels -> 0/1 mask at size x size (pixel centres inside)"""
    x0, y0, x1, y1 = bbox
    centres = (np.arange(size) + 0.5) / size
    cols = (centres * width >= x0) & (centres * width < x1)
    rows = (centres * height >= y0) & (centres * height < y1)
    return (rows[:, None] & cols[None, :]).astype(np.uint8)


class EditPairDataset(Dataset):
    """Manifest pairs at training resolution.

    Each item carries the target image (x0), mask, masked target, the reference
    crop's image hidden state, caption text rows and the pose vector.
    """

    def __init__(self, records, manifest_path, encoder: ConditioningEncoder, image_size=32, fill_value=128,
                 augment_flip=False, seed=0):
        self.records = list(records)
        self.manifest_path = manifest_path
        self.encoder = encoder
        self.image_size = image_size
        self.fill_value = fill_value
        self.augment_flip = augment_flip
        self.flip_generator = torch.Generator().manual_seed(seed)

    def __len__(self):
        return len(self.records)

    def load(self, index, flip=False):
        record = self.records[index]
        size = self.image_size
        target = read_image(resolve_asset(self.manifest_path, record.target_path))
        crop = read_image(resolve_asset(self.manifest_path, record.reference_crop_path))
        height, width = target.shape[:2]
        target = resize_image(target, size)
        mask = _scaled_bbox_mask(record.pair.mask_bbox, width, height, size)
        target_pose = rescale_pose(record.pair.target_pose, size / width, size / height)
        reference_pose = rescale_pose(record.pair.reference_pose, size / width, size / height)
        if flip:
            target, mask, crop = target[:, ::-1], mask[:, ::-1], crop[:, ::-1]
            target_pose, reference_pose = mirror_pose(target_pose, size), mirror_pose(reference_pose, size)
        masked = np.where(mask[..., None] != 0, np.uint8(self.fill_value), target)
        return {
            'target': np.ascontiguousarray(target),
            'mask': np.ascontiguousarray(mask),
            'masked_target': np.ascontiguousarray(masked),
            'reference_crop': np.ascontiguousarray(crop),
            'caption': record.caption or '',
            'target_pose': target_pose,
            'reference_pose': reference_pose,
        }

    def __getitem__(self, index):
        flip = self.augment_flip and bool(torch.rand(1, generator=self.flip_generator) < 0.5)
        item = self.load(index, flip)
        encoder = self.encoder
        dtype = encoder.dtype
        with torch.no_grad():
            pose_vector = encoder.pose_vector(item['target_pose'], item['reference_pose'])
            text = encoder.encode_text(item['caption']) if encoder.variant.uses_text \
                else torch.zeros(0, dtype=dtype)
            hidden = encoder.image_hidden(item['reference_crop'])
        return {
            'x0': image_to_tensor(item['target'], dtype),
            'mask': torch.as_tensor(item['mask'], dtype=dtype).unsqueeze(0),
            'masked_target': image_to_tensor(item['masked_target'], dtype),
            'image_hidden': hidden,
            'text': text,
            'pose_vector': pose_vector,
        }


def make_training_batch(encoder: ConditioningEncoder, items) -> TrainingBatch:
    """Run the learnable projections over a collated dataset batch."""
    text = items['text'] if encoder.variant.uses_text else None
    poses = items['pose_vector'] if encoder.variant.uses_pose else None
    context = encoder.batch_context(items['image_hidden'], text, poses)
    return TrainingBatch(items['x0'], items['mask'], items['masked_target'], context,
                         encoder.unconditional_context().unsqueeze(0))


# --- checkpoints -------------------------------------------------------------------

@dataclass
class Checkpoint:
    denoiser_state: dict
    encoder_state: dict
    schedule: dict
    run_config: dict
    epoch: int = 0
    step: int = 0

    @property
    def config(self) -> RunConfig:
        return config_from_mapping(self.run_config)


def build_models(config: RunConfig):
    """Fresh (encoder, denoiser) for a run config; weights depend only on config.seed."""
    torch.manual_seed(config.seed)
    image_adapter, text_adapter = make_adapters('toy', config.reference_resolution)
    encoder = ConditioningEncoder(config.variant, image_adapter, text_adapter, config.combine_reference_pose,
                                  (config.image_size, config.image_size), config.seed)
    denoiser = InpaintingDenoiser(3, config.base_width, config.context_width, config.attention_heads)
    return encoder, denoiser


def make_checkpoint(config: RunConfig, encoder, denoiser, schedule, epoch, step=0) -> Checkpoint:
    """epoch counts completed epochs, step the optimizer steps applied to these weights."""
    return Checkpoint(
        denoiser_state={k: v.detach().clone() for k, v in denoiser.state_dict().items()},
        encoder_state={k: v.detach().clone() for k, v in encoder.state_dict().items()},
        schedule=schedule.to_dict(),
        run_config=config.to_env(),
        epoch=epoch,
        step=step,
    )


def save_checkpoint(path, checkpoint: Checkpoint):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    torch.save({
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'epoch': checkpoint.epoch,
        'step': checkpoint.step,
        'run_config': checkpoint.run_config,
        'schedule': checkpoint.schedule,
        'denoiser': checkpoint.denoiser_state,
        'encoder': checkpoint.encoder_state,
    }, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as e:
        raise CheckpointError(f"{path}: unreadable checkpoint: {e}") from e
    if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    missing = [key for key in ('epoch', 'run_config', 'schedule', 'denoiser', 'encoder') if key not in payload]
    if missing:
        raise CheckpointError(f"{path}: missing {', '.join(missing)}")
    return Checkpoint(payload['denoiser'], payload['encoder'], payload['schedule'], payload['run_config'],
                      payload['epoch'], int(payload.get('step', 0)))


def restore_models(checkpoint: Checkpoint):
    """(config, encoder, denoiser, schedule) rebuilt from a checkpoint"""
    config = checkpoint.config
    encoder, denoiser = build_models(config)
    encoder.load_state_dict(checkpoint.encoder_state)
    denoiser.load_state_dict(checkpoint.denoiser_state)
    schedule = schedule_from_betas(checkpoint.schedule['betas'])
    return config, encoder, denoiser, schedule


# --- training loop -----------------------------------------------------------------

def train(config: RunConfig, manifest_path, epochs: Optional[int] = None, checkpoint_dir=None,
          loss_log_path=None) -> Checkpoint:
    """Train encoder projections and denoiser jointly on the train split of a manifest.

    Writes epoch_NNNN.pt every checkpoint_every epochs, final.pt at the end and
    a step,epoch,loss CSV. On a non-finite loss the last weights that produced
    a finite loss go to last_good.pt and the error propagates.
    """
    epochs = config.epochs if epochs is None else epochs
    checkpoint_dir = checkpoint_dir or config.checkpoint_dir
    loss_log_path = loss_log_path or os.path.join(checkpoint_dir, 'loss_log.csv')
    os.makedirs(checkpoint_dir, exist_ok=True)

    records = [r for r in read_manifest(manifest_path) if r.split == TRAIN_SPLIT]
    if not records:
        raise ManifestError(f"{manifest_path}: manifest has no training pairs")

    schedule = make_schedule(config.timesteps, config.beta_start, config.beta_end)
    encoder, denoiser = build_models(config)
    dataset = EditPairDataset(records, manifest_path, encoder, config.image_size, config.fill_value,
                              config.augment_flip, config.seed)
    loader = DataLoader(dataset, batch_size=config.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(config.seed))
    optimizer = torch.optim.Adam(list(denoiser.parameters()) + list(encoder.parameters()), lr=config.learning_rate)
    noise_generator = torch.Generator().manual_seed(config.seed + 1)

    print_info(f"Training variant {config.variant} on {len(records)} pairs: {epochs} epochs, "
               f"{len(loader)} batches per epoch, {parameter_count(denoiser)} denoiser parameters")

    step = 0
    # weights that last produced a finite loss, taken before the step they fed
    last_good = make_checkpoint(config, encoder, denoiser, schedule, 0, 0)
    with open(loss_log_path, 'w', newline='', encoding='utf-8') as log_file:
        writer = csv.writer(log_file)
        writer.writerow(LOSS_LOG_COLUMNS)
        progress = tqdm(range(1, epochs + 1), desc="Training", unit="epoch")
        for epoch in progress:
            denoiser.train()
            for batch_index, items in enumerate(loader):
                batch = make_training_batch(encoder, items)
                try:
                    loss = training_loss(denoiser, batch, schedule, noise_generator, config.cond_dropout,
                                         batch_index)
                except NonFiniteLoss:
                    path = save_checkpoint(os.path.join(checkpoint_dir, 'last_good.pt'), last_good)
                    print_warning(f"Non-finite loss at epoch {epoch}, batch {batch_index}; last good state "
                                  f"(epoch {last_good.epoch}, step {last_good.step}) saved to {path}")
                    raise
                last_good = make_checkpoint(config, encoder, denoiser, schedule, epoch - 1, step)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                step += 1
                writer.writerow((step, epoch, f"{loss.item():.8f}"))
                progress.set_description(f"[Epoch {epoch:4d}] loss {loss.item():.6f}")
            if epoch % config.checkpoint_every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"epoch_{epoch:04d}.pt"),
                                make_checkpoint(config, encoder, denoiser, schedule, epoch, step))

    checkpoint = make_checkpoint(config, encoder, denoiser, schedule, epochs, step)
    path = save_checkpoint(os.path.join(checkpoint_dir, 'final.pt'), checkpoint)
    print_success(f"Checkpoint saved to {path}")
    return checkpoint


def read_loss_log(path):
    with open(path, 'r', newline='', encoding='utf-8') as log_file:
        return [(int(row['step']), int(row['epoch']), float(row['loss'])) for row in csv.DictReader(log_file)]
