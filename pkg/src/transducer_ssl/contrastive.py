"""Contrastive objective over masked frames with a linear target projection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .masking import SpanMask

COSINE_EPS = 1e-8


@dataclass
class ContrastiveConfig:
    num_negatives: int = 100
    temperature: float = 1.0
    target_dim: int = 64
    mask_prob: float = 0.065
    mask_span: int = 10
    negatives_from_masked_only: bool = False

    def __post_init__(self):
        if self.num_negatives < 1:
            raise ValueError("num_negatives must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


class TargetProjection(nn.Module):
    """Per-frame linear map from the unmasked latent to contrastive targets q."""

    def __init__(self, d_model: int, target_dim: int):
        super().__init__()
        self.linear = nn.Linear(d_model, target_dim)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        return self.linear(latent)


class ContextProjection(nn.Module):
    """Maps context vectors c into the target space when dims differ."""

    def __init__(self, d_model: int, target_dim: int):
        super().__init__()
        self.linear = nn.Linear(d_model, target_dim)

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        return self.linear(c)


def sample_distractors(t: int, length: int, k: int, rng: np.random.Generator, pool: Optional[np.ndarray] = None) -> np.ndarray:
    """K indices drawn uniformly, with replacement, from the pool minus ``t``.

    ``pool`` defaults to every step of the utterance.
    """
    if pool is None:
        if length < 2:
            raise ValueError("need at least two timesteps to draw distractors")
        # draw from [0, length-1) and shift past t: uniform over the others
        draws = rng.integers(0, length - 1, size=k)
        return draws + (draws >= t)
    candidates = np.asarray(pool)[np.asarray(pool) != t]
    if candidates.size == 0:
        raise ValueError(f"no distractor candidates other than {t}")
    return candidates[rng.integers(0, candidates.size, size=k)]


def sample_all_distractors(mask: SpanMask, k: int, rng: np.random.Generator, masked_only: bool = False) -> np.ndarray:
    """[|M_T|, K] distractor indices, one row per masked step."""
    pool = mask.indices if masked_only else None
    if len(mask) == 0:
        return np.zeros((0, k), dtype=np.int64)
    return np.stack([sample_distractors(int(t), mask.length, k, rng, pool) for t in mask.indices])


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine along the last axis with norms clamped below at 1e-8."""
    na = a.norm(dim=-1).clamp_min(COSINE_EPS)
    nb = b.norm(dim=-1).clamp_min(COSINE_EPS)
    return (a * b).sum(-1) / (na * nb)


def contrastive_loss(
    c: torch.Tensor,
    q: torch.Tensor,
    mask: SpanMask,
    distractors: np.ndarray,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Summed InfoNCE loss over masked steps of one utterance.

    Args:
        c: [T, D] context vectors.
        q: [T, D] targets (same time axis as ``c``).
        mask: masked positions M_T; must be non-empty.
        distractors: [|M_T|, K] indices into ``q``.

    Returns:
        Scalar: -sum_t log softmax(sim(c_t, [q_t, q_distractors]) / temperature)[0].
    """
    if len(mask) == 0:
        raise ValueError("contrastive loss needs at least one masked position")
    if c.shape[0] != q.shape[0] or c.shape[0] != mask.length:
        raise ValueError("c, q and mask must share the time axis")
    idx = torch.from_numpy(mask.indices)
    negs = torch.as_tensor(np.asarray(distractors), dtype=torch.long)
    if negs.shape[0] != len(mask):
        raise ValueError("need one distractor row per masked position")
    used = torch.cat([idx, negs.flatten()]).unique()
    if bool((c[idx].norm(dim=-1) == 0).any()) or bool((q[used].norm(dim=-1) == 0).any()):
        raise ValueError("zero-norm vector in cosine similarity")
    cand = torch.cat([q[idx].unsqueeze(1), q[negs]], dim=1)  # [M, K+1, D]
    sims = cosine_similarity(c[idx].unsqueeze(1), cand) / temperature
    return -torch.log_softmax(sims, dim=-1)[:, 0].sum()
