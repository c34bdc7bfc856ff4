"""Shared oracles for the test suite."""

import numpy as np
import torch

from transducer_ssl.model import ModelConfig

TINY_MODEL = {
    "vocab_size": 5,
    "encoder": {
        "conv_channels": [2, 2],
        "num_layers": 1,
        "d_model": 8,
        "ffn_dim": 8,
        "num_heads": 2,
        "max_relative_distance": 4,
    },
    "prediction": {"num_blocks": 2, "lstm_cell": 4, "proj_dim": 4, "embed_dim": 3},
    "joint": {"joint_dim": 6},
    "contrastive": {"num_negatives": 3, "target_dim": 8, "mask_prob": 0.3, "mask_span": 2},
}


def tiny_config(**overrides) -> ModelConfig:
    cfg = ModelConfig.from_dict(TINY_MODEL)
    for k, v in overrides.items():
        setattr(cfg.encoder, k, v)
    return cfg


def randomize_(module, seed=0, scale=0.5):
    """Overwrite every parameter with random values (zero-initialised layers included)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def central_difference(fn, tensor: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """d fn / d tensor by central differences, one coordinate at a time."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            g[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    if b is None:
        b = torch.zeros_like(a)
    scale = max(float(a.norm()), float(b.norm()))
    if scale < 1e-10:
        return 0.0
    return float((a - b).norm()) / scale


def levenshtein_oracle(a, b) -> int:
    """Edit distance by memoised recursion (independent of the DP table in scoring)."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def softmax_list(xs):
    m = max(xs)
    e = [np.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]
