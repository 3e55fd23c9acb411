"""Cross-attention context for the inpainting denoiser.

A context is a (rows, 768) matrix: 257 image rows, then 77 text rows (if the
variant uses text), then one pose row (if the variant uses pose). The
unconditional context has the same layout with each slot replaced by its
"nothing" encoding: zero image state, null caption, neutral skeleton.
"""
import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Protocol

import numpy as np
import torch
from PIL import Image
from torch import nn
from torch.nn import functional as F

from pose_geometry import FLAT_POSE_DIM, PoseSkeleton, flatten_pose, neutral_skeleton

EMBED_DIM = 768
IMAGE_TOKENS = 257
IMAGE_HIDDEN_DIM = 1024
TEXT_TOKENS = 77
POSE_TOKENS = 1


class ModalityMismatch(ValueError):
    pass


class AdapterUnavailable(RuntimeError):
    pass


class Variant(Enum):
    C1 = 'c1'
    C2 = 'c2'
    C3 = 'c3'
    C4 = 'c4'

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def uses_text(self) -> bool:
        return self in (Variant.C3, Variant.C4)

    @property
    def uses_pose(self) -> bool:
        return self in (Variant.C2, Variant.C4)

    @property
    def rows(self) -> int:
        return IMAGE_TOKENS + (TEXT_TOKENS if self.uses_text else 0) + (POSE_TOKENS if self.uses_pose else 0)

    @classmethod
    def parse(cls, value) -> "Variant":
        """Accept a Variant, 'c1'..'c4' (any case) or a label such as 'img-pose-text'."""
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        for variant in cls:
            if text in (variant.value, variant.label):
                return variant
        raise ValueError(f"unknown conditioning variant {value!r}; expected one of c1, c2, c3, c4")


_LABELS = {Variant.C1: 'img', Variant.C2: 'img-pose', Variant.C3: 'img-text', Variant.C4: 'img-pose-text'}


def check_embedding(matrix: torch.Tensor, rows: int, name: str) -> torch.Tensor:
    if matrix.shape[-2:] != (rows, EMBED_DIM):
        raise ModalityMismatch(f"{name} embedding must be ({rows}, {EMBED_DIM}), got {tuple(matrix.shape)}")
    if not torch.isfinite(matrix).all():
        raise ModalityMismatch(f"{name} embedding has non-finite values")
    return matrix


@dataclass(frozen=True)
class ConditioningBundle:
    variant: Variant
    context: torch.Tensor
    uncond_context: torch.Tensor

    def __post_init__(self):
        check_embedding(self.context, self.variant.rows, 'context')
        if self.uncond_context.shape != self.context.shape:
            raise ModalityMismatch(f"unconditional context {tuple(self.uncond_context.shape)} does not match "
                                   f"context {tuple(self.context.shape)}")


# --- adapters ----------------------------------------------------------------------

class ImageEncoderAdapter(Protocol):
    resolution: int

    def hidden_state(self, image: np.ndarray) -> np.ndarray:
        """(257, 1024) last hidden state for an RGB uint8 image"""
        ...


class TextEncoderAdapter(Protocol):
    def encode(self, caption: Optional[str]) -> np.ndarray:
        """(77, 768) token embeddings; blank or None is the null caption"""
        ...


def _seeded_normal(shape, *parts) -> np.ndarray:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part if isinstance(part, bytes) else str(part).encode('utf-8'))
        digest.update(b'\x00')
    seed = int.from_bytes(digest.digest()[:8], 'big')
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


class ToyImageEncoder:
    """Stand-in for a vision transformer: hidden state is a seeded hash of the pixels.

    The all-zero image maps to the all-zero hidden state.
    """
    name = 'toy'

    def __init__(self, resolution: int = 64):
        self.resolution = resolution

    def prepare(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.uint8)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected an RGB image (H, W, 3), got shape {image.shape}")
        if image.shape[:2] != (self.resolution, self.resolution):
            image = np.asarray(Image.fromarray(image).resize((self.resolution, self.resolution), Image.BILINEAR))
        return image

    def hidden_state(self, image: np.ndarray) -> np.ndarray:
        image = self.prepare(image)
        if not image.any():
            return np.zeros((IMAGE_TOKENS, IMAGE_HIDDEN_DIM), dtype=np.float32)
        return _seeded_normal((IMAGE_TOKENS, IMAGE_HIDDEN_DIM), 'image', image.shape, image.tobytes())


class ToyTextEncoder:
    """Stand-in for a text transformer: one seeded row per (word, position).

    Captions are split on whitespace, lower-cased and truncated to 75 words;
    row 0 is a start token and the rows after the last word are padding, so
    the blank caption is all start + padding rows.
    """
    name = 'toy'
    max_words = TEXT_TOKENS - 2

    def tokens(self, caption: Optional[str]):
        words = (caption or '').lower().split()[:self.max_words]
        return ['<start>'] + words + ['<end>'] + ['<pad>'] * (self.max_words - len(words))

    def encode(self, caption: Optional[str]) -> np.ndarray:
        rows = [_seeded_normal(EMBED_DIM, 'text', position, token)
                for position, token in enumerate(self.tokens(caption))]
        return np.stack(rows)


ADAPTERS = {'toy': (ToyImageEncoder, ToyTextEncoder)}


def make_adapters(name: str = 'toy', resolution: int = 64):
    """(image adapter, text adapter) registered under name."""
    if name not in ADAPTERS:
        raise AdapterUnavailable(f"no encoder adapter named {name!r}; available: {', '.join(sorted(ADAPTERS))}")
    image_cls, text_cls = ADAPTERS[name]
    return image_cls(resolution), text_cls()


# --- learnable projections ---------------------------------------------------------

class ProjectionLayer(nn.Module):
    """Affine map in_dim -> out_dim.

    Weights start uniform in +-1/sqrt(in_dim) from a fixed seed; bias starts at zero.
    """

    def __init__(self, in_dim: int, out_dim: int = EMBED_DIM, seed: int = 0):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        bound = 1.0 / np.sqrt(in_dim)
        generator = torch.Generator().manual_seed(seed)
        weight = (torch.rand(out_dim, in_dim, generator=generator) * 2.0 - 1.0) * bound
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight, self.bias)


class ConditioningEncoder(nn.Module):
    """Owns the learnable projections and builds contexts for one variant.

    The pose projection takes the flattened target pose (51 values), or the
    target and reference poses side by side (102 values) when
    combine_reference_pose is set.
    """

    def __init__(self, variant, image_adapter=None, text_adapter=None, combine_reference_pose=False,
                 neutral_size=(32, 32), seed=0):
        super().__init__()
        self.variant = Variant.parse(variant)
        default_image, default_text = make_adapters('toy')
        self.image_adapter = image_adapter or default_image
        self.text_adapter = text_adapter or default_text
        self.combine_reference_pose = combine_reference_pose
        self.neutral_size = tuple(neutral_size)
        self.pose_dim = FLAT_POSE_DIM * (2 if combine_reference_pose else 1)
        self.image_projection = ProjectionLayer(IMAGE_HIDDEN_DIM, EMBED_DIM, seed)
        self.pose_projection = ProjectionLayer(self.pose_dim, EMBED_DIM, seed + 1)
        neutral = torch.as_tensor(flatten_pose(neutral_skeleton(*self.neutral_size)), dtype=torch.float32)
        self.register_buffer('neutral_pose', neutral.repeat(2 if combine_reference_pose else 1))

    @property
    def dtype(self):
        return self.image_projection.weight.dtype

    # single-sample encoders

    def image_hidden(self, image: np.ndarray) -> torch.Tensor:
        if self.image_adapter is None:
            raise AdapterUnavailable("no image encoder adapter configured")
        hidden = torch.as_tensor(self.image_adapter.hidden_state(image), dtype=self.dtype)
        if hidden.shape != (IMAGE_TOKENS, IMAGE_HIDDEN_DIM):
            raise AdapterUnavailable(f"image adapter returned shape {tuple(hidden.shape)}, "
                                     f"expected ({IMAGE_TOKENS}, {IMAGE_HIDDEN_DIM})")
        return hidden

    def encode_image(self, image: np.ndarray) -> torch.Tensor:
        return self.image_projection(self.image_hidden(image))

    def encode_text(self, caption: Optional[str]) -> torch.Tensor:
        if self.text_adapter is None:
            raise AdapterUnavailable("no text encoder adapter configured")
        text = torch.as_tensor(self.text_adapter.encode(caption), dtype=self.dtype)
        return check_embedding(text, TEXT_TOKENS, 'text')

    def pose_vector(self, target_pose: PoseSkeleton, reference_pose: Optional[PoseSkeleton] = None) -> torch.Tensor:
        vector = flatten_pose(target_pose)
        if self.combine_reference_pose:
            if reference_pose is None:
                raise ModalityMismatch("combined pose conditioning needs the reference pose too")
            vector = np.concatenate([vector, flatten_pose(reference_pose)])
        return torch.as_tensor(vector, dtype=self.dtype)

    def embed_pose(self, target_pose: PoseSkeleton, reference_pose: Optional[PoseSkeleton] = None) -> torch.Tensor:
        return self.pose_projection(self.pose_vector(target_pose, reference_pose)).unsqueeze(0)

    # assembly

    def _require(self, text_emb, pose_emb):
        if self.variant.uses_text != (text_emb is not None):
            raise ModalityMismatch(f"variant {self.variant.value} ({self.variant.label}) "
                                   f"{'needs' if self.variant.uses_text else 'takes no'} text embedding")
        if self.variant.uses_pose != (pose_emb is not None):
            raise ModalityMismatch(f"variant {self.variant.value} ({self.variant.label}) "
                                   f"{'needs' if self.variant.uses_pose else 'takes no'} pose embedding")

    def unconditional_context(self) -> torch.Tensor:
        parts = [self.image_projection(torch.zeros(IMAGE_TOKENS, IMAGE_HIDDEN_DIM, dtype=self.dtype))]
        if self.variant.uses_text:
            parts.append(self.encode_text(''))
        if self.variant.uses_pose:
            parts.append(self.pose_projection(self.neutral_pose.to(self.dtype)).unsqueeze(0))
        return torch.cat(parts, dim=0)

    def assemble_bundle(self, image_emb, text_emb=None, pose_emb=None) -> ConditioningBundle:
        self._require(text_emb, pose_emb)
        parts = [check_embedding(image_emb, IMAGE_TOKENS, 'image')]
        if text_emb is not None:
            parts.append(check_embedding(text_emb, TEXT_TOKENS, 'text'))
        if pose_emb is not None:
            parts.append(check_embedding(pose_emb, POSE_TOKENS, 'pose'))
        return ConditioningBundle(self.variant, torch.cat(parts, dim=0), self.unconditional_context())

    def bundle_for(self, reference_crop, caption=None, target_pose=None, reference_pose=None) -> ConditioningBundle:
        """Encode raw inputs and assemble; modalities the variant does not use must be None."""
        if not self.variant.uses_text and caption:
            raise ModalityMismatch(f"variant {self.variant.value} ({self.variant.label}) has no text slot")
        if not self.variant.uses_pose and target_pose is not None:
            raise ModalityMismatch(f"variant {self.variant.value} ({self.variant.label}) has no pose slot")
        if self.variant.uses_pose and target_pose is None:
            raise ModalityMismatch(f"variant {self.variant.value} ({self.variant.label}) needs a target pose")
        text_emb = self.encode_text(caption) if self.variant.uses_text else None
        pose_emb = self.embed_pose(target_pose, reference_pose) if self.variant.uses_pose else None
        return self.assemble_bundle(self.encode_image(reference_crop), text_emb, pose_emb)

    # batched path used by training

    def batch_context(self, image_hidden, text=None, pose_vectors=None) -> torch.Tensor:
        """(B, rows, 768) from (B, 257, 1024) hidden states, (B, 77, 768) text and (B, pose_dim) poses."""
        parts = [self.image_projection(image_hidden)]
        if self.variant.uses_text:
            if text is None:
                raise ModalityMismatch(f"variant {self.variant.value} needs text embeddings")
            parts.append(text)
        if self.variant.uses_pose:
            if pose_vectors is None:
                raise ModalityMismatch(f"variant {self.variant.value} needs pose vectors")
            parts.append(self.pose_projection(pose_vectors).unsqueeze(1))
        return torch.cat(parts, dim=1)

    def batch_unconditional(self, batch_size: int) -> torch.Tensor:
        uncond = self.unconditional_context()
        return uncond.unsqueeze(0).expand(batch_size, -1, -1)
