"""Transformer-Transducer with the contrastive pretraining head attached."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .contrastive import ContextProjection, ContrastiveConfig, TargetProjection
from .encoder import Encoder, EncoderConfig
from .transducer import JointConfig, JointNetwork, PredictionConfig, PredictionNetwork, greedy_decode


@dataclass
class ModelConfig:
    vocab_size: int = 29
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    joint: JointConfig = field(default_factory=JointConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        return cls(
            vocab_size=d.pop("vocab_size", 29),
            encoder=EncoderConfig(**d.pop("encoder", {})),
            prediction=PredictionConfig(**d.pop("prediction", {})),
            joint=JointConfig(**d.pop("joint", {})),
            contrastive=ContrastiveConfig(**d.pop("contrastive", {})),
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        for k in ("conv_channels", "conv_kernel", "conv_stride", "pool_strides"):
            out["encoder"][k] = list(out["encoder"][k])
        return out


class TransducerModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.encoder.d_model
        self.encoder = Encoder(cfg.encoder)
        self.target_proj = TargetProjection(d, cfg.contrastive.target_dim)
        self.context_head = (
            ContextProjection(d, cfg.contrastive.target_dim) if cfg.contrastive.target_dim != d else nn.Identity()
        )
        self.prediction = PredictionNetwork(cfg.vocab_size, cfg.prediction)
        self.joint = JointNetwork(d, cfg.prediction.proj_dim, cfg.joint.joint_dim, cfg.vocab_size)

    def decode(self, features: torch.Tensor, chunk_size=None, left_chunks: int = 0, max_symbols_per_frame: int = 10):
        """Greedy hypothesis for one utterance [T, 80]."""
        with torch.no_grad():
            c = self.encoder(features.unsqueeze(0), chunk_size=chunk_size, left_chunks=left_chunks).context[0]
        return greedy_decode(self.prediction, self.joint, c, max_symbols_per_frame)
