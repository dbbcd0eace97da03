"""Procedural captioned-shapes dataset and the toy caption embedder."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue")
SIZES = ("small", "large")
LABELS = list(itertools.product(SHAPES, COLORS, SIZES))

NULL_TOKEN = "<null>"
CONTEXT_LEN = 4

_RGB = {"red": (1.0, -0.8, -0.8), "green": (-0.8, 1.0, -0.8), "blue": (-0.8, -0.8, 1.0)}
_BACKGROUND = 0.0
_SUPERSAMPLE = 4


class Vocab:
    """Closed caption vocabulary; id 0 is the NULL token."""

    def __init__(self):
        self.tokens = [NULL_TOKEN, *SIZES, *COLORS, *SHAPES]
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}

    @property
    def null_id(self) -> int:
        return self.ids[NULL_TOKEN]

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, caption: str, length: int = CONTEXT_LEN) -> list[int]:
        words = caption.split()
        if len(words) > length:
            raise ValueError(f"caption longer than {length} tokens: {caption!r}")
        unknown = [w for w in words if w not in self.ids or w == NULL_TOKEN]
        if unknown:
            raise KeyError(f"unknown token(s) {unknown} in caption {caption!r}")
        ids = [self.ids[w] for w in words]
        return ids + [self.null_id] * (length - len(ids))

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids if i != self.null_id)


VOCAB = Vocab()


def caption_for(label: tuple[str, str, str]) -> str:
    shape, color, size = label
    return f"{size} {color} {shape}"


def parse_caption(caption: str) -> tuple[str, str, str]:
    size, color, shape = caption.split()
    if shape not in SHAPES or color not in COLORS or size not in SIZES:
        raise ValueError(f"not a shapes caption: {caption!r}")
    return shape, color, size


@dataclass(frozen=True)
class ShapeSample:
    image: torch.Tensor  # [3, H, W] in [-1, 1]
    caption_tokens: tuple[int, ...]
    label: tuple[str, str, str]
    position_seed: int

    @property
    def caption(self) -> str:
        return caption_for(self.label)


def _coverage(shape: str, cx: float, cy: float, r: float, h: int, w: int) -> np.ndarray:
    s = _SUPERSAMPLE
    ys = (np.arange(h * s) + 0.5) / s
    xs = (np.arange(w * s) + 0.5) / s
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        mask = dx**2 + dy**2 <= r**2
    elif shape == "square":
        mask = (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    else:
        # upward triangle inscribed in the circle of radius r
        top, base = cy - r, cy + 0.5 * r
        half = (yy - top) / (base - top) * r * 0.866
        mask = (yy >= top) & (yy <= base) & (np.abs(dx) <= half)
    return mask.reshape(h, s, w, s).mean(axis=(1, 3))


def render_shape(label: tuple[str, str, str], position_seed: int, h: int, w: int) -> np.ndarray:
    """Anti-aliased render of one shape; deterministic in (label, position_seed, h, w)."""
    shape, color, size = label
    rng = np.random.default_rng(position_seed)
    frac = rng.uniform(0.12, 0.18) if size == "small" else rng.uniform(0.28, 0.36)
    r = frac * min(h, w)
    cx = rng.uniform(r + 1, w - r - 1)
    cy = rng.uniform(r + 1, h - r - 1)
    cov = _coverage(shape, cx, cy, r, h, w)
    rgb = np.asarray(_RGB[color])[:, None, None]
    img = _BACKGROUND * (1 - cov)[None] + rgb * cov[None]
    return img.astype(np.float32)


def gen_dataset(n: int, H: int = 32, W: int = 32, seed: int = 0) -> list[ShapeSample]:
    """``n`` renders cycling through all 18 label combinations in a seeded order."""
    if H < 16 or W < 16:
        raise ValueError("H and W must be >= 16")
    rng = np.random.default_rng(seed)
    pos_seeds = rng.integers(0, 2**31 - 1, size=n)
    samples = []
    for i in range(n):
        if i % len(LABELS) == 0:
            order = rng.permutation(len(LABELS))
        label = LABELS[order[i % len(LABELS)]]
        img = render_shape(label, int(pos_seeds[i]), H, W)
        tokens = tuple(VOCAB.encode(caption_for(label)))
        samples.append(ShapeSample(torch.from_numpy(img), tokens, label, int(pos_seeds[i])))
    return samples


def stack_batch(samples: list[ShapeSample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.stack([s.image for s in samples])
    tokens = torch.tensor([s.caption_tokens for s in samples], dtype=torch.long)
    return images, tokens


class CaptionEmbedder(nn.Module):
    """Learned lookup table mapping caption tokens to context vectors."""

    def __init__(self, context_dim: int, vocab_size: int = len(VOCAB), seed: int = 0):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, context_dim)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.embedding.weight.copy_(torch.randn(vocab_size, context_dim, generator=gen))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.numel() and int(tokens.max()) >= self.embedding.num_embeddings:
            raise KeyError("token id out of vocabulary")
        return self.embedding(tokens)

    def null_tokens(self, batch: int, length: int = CONTEXT_LEN) -> torch.Tensor:
        return torch.full((batch, length), VOCAB.null_id, dtype=torch.long)


def embed_captions(tokens: torch.Tensor, embedder: CaptionEmbedder) -> torch.Tensor:
    return embedder(tokens)
