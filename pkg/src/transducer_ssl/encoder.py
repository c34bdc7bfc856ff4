"""Convolutional feature encoder and pre-norm relative-attention Transformer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .frontend import NUM_MEL_BINS
from .masking import SpanMask, batch_attention_mask


@dataclass
class EncoderConfig:
    conv_channels: tuple[int, int] = (64, 128)
    conv_kernel: tuple[int, int] = (3, 3)
    conv_stride: tuple[int, int] = (1, 1)
    pool_strides: tuple[int, int] = (2, 4)
    num_layers: int = 2
    d_model: int = 64
    ffn_dim: int = 128
    num_heads: int = 4
    max_relative_distance: int = 64
    num_mel_bins: int = NUM_MEL_BINS

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.conv_kernel = tuple(self.conv_kernel)
        self.conv_stride = tuple(self.conv_stride)
        self.pool_strides = tuple(self.pool_strides)
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.conv_stride != (1, 1):
            raise ValueError("only unit convolution stride is supported")
        if any(k % 2 == 0 for k in self.conv_kernel):
            raise ValueError("convolution kernel sizes must be odd")

    @property
    def downsampling(self) -> int:
        return math.prod(self.pool_strides)

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        return cls(num_layers=18, d_model=512, ffn_dim=2048, num_heads=8)


def downsample_length(T, pool_strides: Sequence[int] = (2, 4)):
    """Frames surviving the max-pool cascade (floor at every stage).

    Works on ints and integer tensors alike.
    """
    for s in pool_strides:
        T = T // s
    return T


class ConvBlock(nn.Module):
    """Two conv -> LayerNorm -> ReLU stages followed by time-axis max pooling.

    Convolutions are padded causally in time (all padding on the past side)
    and symmetrically in frequency, so an output frame never depends on
    input frames after it.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: tuple[int, int], pool: int):
        super().__init__()
        self.kernel = kernel
        self.pool = pool
        self.convs = nn.ModuleList([nn.Conv2d(in_ch, out_ch, kernel), nn.Conv2d(out_ch, out_ch, kernel)])
        self.norms = nn.ModuleList([nn.LayerNorm(out_ch), nn.LayerNorm(out_ch)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, C, T, F]
        kt, kf = self.kernel
        for conv, norm in zip(self.convs, self.norms):
            x = conv(F.pad(x, (kf // 2, kf // 2, kt - 1, 0)))
            x = norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
            x = F.relu(x)
        return F.max_pool2d(x, kernel_size=(self.pool, 1), stride=(self.pool, 1))


class ConvFeatureEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c1, c2 = cfg.conv_channels
        p1, p2 = cfg.pool_strides
        self.pool_strides = cfg.pool_strides
        self.blocks = nn.ModuleList([ConvBlock(1, c1, cfg.conv_kernel, p1), ConvBlock(c1, c2, cfg.conv_kernel, p2)])
        self.proj = nn.Linear(c2 * cfg.num_mel_bins, cfg.d_model)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """[B, T, F] features -> [B, T', d_model] latent z."""
        if features.shape[1] < math.prod(self.pool_strides):
            raise ValueError(f"need at least {math.prod(self.pool_strides)} frames, got {features.shape[1]}")
        x = features.unsqueeze(1)
        for block in self.blocks:
            x = block(x)
        B, C, T, Fq = x.shape
        return self.proj(x.permute(0, 2, 1, 3).reshape(B, T, C * Fq))


def relative_positions(length: int, max_distance: int) -> torch.Tensor:
    """Table indices of clamp(tau - t, +-max_distance), shifted to be >= 0."""
    pos = torch.arange(length)
    return (pos[None, :] - pos[:, None]).clamp(-max_distance, max_distance) + max_distance


def relative_attention(q, k, v, pos, mask):
    """Softmax(q_t . (k_tau + p_{t,tau})) weighted sum of values.

    Args:
        q, k, v: [..., T, d].
        pos: [T, T, d] relative embeddings p_{t,tau}.
        mask: boolean, broadcastable to [..., T, T]; True = visible.

    Returns:
        (output [..., T, d], weights [..., T, T]). Hidden entries get weight 0.
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any(dim=-1).all()):
        raise ValueError("attention mask has a row with no visible position")
    scores = q @ k.transpose(-1, -2) + torch.einsum("...td,tsd->...ts", q, pos)
    scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class RelativeMultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, num_heads: int, max_relative_distance: int):
        super().__init__()
        self.num_heads = num_heads
        self.d_head = d_model // num_heads
        self.max_relative_distance = max_relative_distance
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        # shared across heads
        self.rel_emb = nn.Embedding(2 * max_relative_distance + 1, self.d_head)
        nn.init.uniform_(self.rel_emb.weight, -self.d_head**-0.5, self.d_head**-0.5)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.num_heads, self.d_head).permute(2, 0, 3, 1, 4)
        pos = self.rel_emb(relative_positions(T, self.max_relative_distance).to(x.device))
        if mask.dim() == 3:
            mask = mask[:, None]
        ctx, _ = relative_attention(q * self.d_head**-0.5, k, v, pos, mask)
        return self.out(ctx.transpose(1, 2).reshape(B, T, D))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + Attn(LN(x)), then + FFN(LN(.))."""

    def __init__(self, d_model: int, num_heads: int, ffn_dim: int, max_relative_distance: int):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d_model)
        self.attn = RelativeMultiHeadAttention(d_model, num_heads, max_relative_distance)
        self.ffn_norm = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(nn.Linear(d_model, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, d_model))
        nn.init.zeros_(self.ffn[2].weight)
        nn.init.zeros_(self.ffn[2].bias)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.attn_norm(x), mask)
        return x + self.ffn(self.ffn_norm(x))


class EncoderOutput(NamedTuple):
    context: torch.Tensor  # c, [B, T', d_model]
    latent: torch.Tensor  # z before masking, [B, T', d_model]
    lengths: torch.Tensor  # [B]


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.conv = ConvFeatureEncoder(cfg)
        self.mask_vector = nn.Parameter(torch.empty(cfg.d_model).uniform_())
        self.context_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.layers = nn.ModuleList(
            TransformerBlock(cfg.d_model, cfg.num_heads, cfg.ffn_dim, cfg.max_relative_distance)
            for _ in range(cfg.num_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.d_model)

    def output_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        return downsample_length(lengths, self.cfg.pool_strides)

    def context(self, z: torch.Tensor, mask: torch.Tensor, num_layers: Optional[int] = None) -> torch.Tensor:
        x = self.context_proj(z)
        for layer in self.layers[:num_layers]:
            x = layer(x, mask)
        return self.final_norm(x)

    def contextualize(
        self,
        z: torch.Tensor,
        lengths: torch.Tensor,
        chunk_size: Optional[int] = None,
        left_chunks: int = 0,
        span_masks: Optional[Sequence[Optional[SpanMask]]] = None,
    ) -> torch.Tensor:
        """Context network over latent z [B, T', D] with optional span masking."""
        x = z
        if span_masks is not None:
            sel = torch.zeros(z.shape[:2], dtype=torch.bool)
            for b, m in enumerate(span_masks):
                if m is None:
                    continue
                if m.length != int(lengths[b]):
                    raise ValueError(f"span mask length {m.length} != encoded length {int(lengths[b])}")
                sel[b, torch.from_numpy(m.indices)] = True
            x = torch.where(sel[..., None], self.mask_vector.to(z.dtype).expand_as(z), z)
        mask = batch_attention_mask(lengths, z.shape[1], chunk_size, left_chunks)
        return self.context(x, mask)

    def forward(
        self,
        features: torch.Tensor,
        lengths: Optional[torch.Tensor] = None,
        chunk_size: Optional[int] = None,
        left_chunks: int = 0,
        span_masks: Optional[Sequence[Optional[SpanMask]]] = None,
    ) -> EncoderOutput:
        """Encode a padded batch [B, T, 80].

        ``chunk_size=None`` gives full-context attention. ``span_masks`` holds
        one optional SpanMask per utterance, replacing those latent frames
        with the learned mask vector before the context network.
        """
        if lengths is None:
            lengths = torch.full((features.shape[0],), features.shape[1], dtype=torch.long)
        z = self.conv(features)
        out_lengths = self.output_lengths(lengths)
        c = self.contextualize(z, out_lengths, chunk_size, left_chunks, span_masks)
        return EncoderOutput(c, z, out_lengths)
