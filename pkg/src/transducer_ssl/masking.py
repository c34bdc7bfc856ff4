"""Span masking for contrastive pretraining and chunk-wise attention masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class SpanMask:
    indices: np.ndarray  # sorted, unique, int64
    length: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.length):
            raise ValueError(f"masked indices must lie in [0, {self.length})")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("masked indices must be sorted and unique")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.size)

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.length, dtype=bool)
        out[self.indices] = True
        return out


def spans_to_mask(starts, length: int, span: int) -> SpanMask:
    covered = np.zeros(length, dtype=bool)
    for s in starts:
        covered[s : min(s + span, length)] = True
    return SpanMask(np.flatnonzero(covered), length)


def sample_span_mask(length: int, rng: np.random.Generator, p: float = 0.065, span: int = 10) -> SpanMask:
    """Draw span starts i.i.d. with probability ``p`` and mask ``span`` steps from each.

    Spans are clipped at the sequence end and merged where they overlap.
    An empty draw falls back to a single uniformly placed span.
    """
    if length <= 0:
        raise ValueError("cannot mask an empty sequence")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"mask probability must be in (0, 1], got {p}")
    if span < 1:
        raise ValueError("span must be >= 1")
    starts = np.flatnonzero(rng.random(length) < p)
    if starts.size == 0:
        starts = rng.integers(0, length, size=1)
    return spans_to_mask(starts, length, span)


def apply_feature_mask(latent: torch.Tensor, mask: SpanMask, mask_vector: torch.Tensor) -> torch.Tensor:
    """Replace rows ``mask.indices`` of a [T, D] latent by ``mask_vector``."""
    if latent.shape[0] != mask.length:
        raise ValueError(f"mask length {mask.length} != latent length {latent.shape[0]}")
    if len(mask) == 0:
        return latent
    sel = torch.from_numpy(mask.as_bool()).to(latent.device).unsqueeze(-1)
    return torch.where(sel, mask_vector.to(latent.dtype).expand_as(latent), latent)


def chunk_attention_mask(length: int, chunk_size: int, left_chunks: int) -> torch.Tensor:
    """Boolean [T, T] mask: frame t sees chunks chunk(t) - left_chunks .. chunk(t).

    >>> chunk_attention_mask(4, 2, 0).int().tolist()
    [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]]
    """
    if length <= 0:
        raise ValueError("cannot build a mask for an empty sequence")
    if chunk_size < 1 or left_chunks < 0:
        raise ValueError("chunk_size must be >= 1 and left_chunks >= 0")
    chunk = torch.arange(length) // chunk_size
    diff = chunk[:, None] - chunk[None, :]
    return (diff >= 0) & (diff <= left_chunks)


def full_attention_mask(length: int) -> torch.Tensor:
    if length <= 0:
        raise ValueError("cannot build a mask for an empty sequence")
    return torch.ones(length, length, dtype=torch.bool)


def latency_ms(chunk_size: int, frame_ms: float = 80.0) -> float:
    """Algorithmic look-ahead of chunked attention: one full chunk."""
    return chunk_size * frame_ms


def format_mask(mask: torch.Tensor) -> str:
    return "\n".join(" ".join("1" if v else "0" for v in row) for row in mask.tolist())


def batch_attention_mask(lengths: torch.Tensor, max_len: int, chunk_size=None, left_chunks: int = 0) -> torch.Tensor:
    """[B, T, T] mask for a padded batch.

    Keys beyond each utterance's length are hidden. Padded query rows see
    only themselves so no row is empty; their outputs are never used.
    """
    base = full_attention_mask(max_len) if chunk_size is None else chunk_attention_mask(max_len, chunk_size, left_chunks)
    pos = torch.arange(max_len)
    valid = pos[None, :] < lengths[:, None]  # [B, T]
    mask = base[None] & valid[:, None, :]
    pad_rows = ~valid
    eye = torch.eye(max_len, dtype=torch.bool)[None]
    return torch.where(pad_rows[:, :, None], eye, mask)
