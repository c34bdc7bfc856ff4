"""Multitask self-supervised pretraining and streaming fine-tuning for a
Transformer-Transducer speech recognizer, sized for a single CPU."""

from .contrastive import ContrastiveConfig, contrastive_loss, sample_distractors
from .encoder import Encoder, EncoderConfig, downsample_length, relative_attention
from .frontend import Batch, ManifestEntry, Utterance, Vocabulary, load_manifest, log_mel, make_batches, upconvert_8k
from .masking import SpanMask, apply_feature_mask, chunk_attention_mask, sample_span_mask
from .model import ModelConfig, TransducerModel
from .scoring import EvalReport, evaluate, wer
from .trainer import ScheduleConfig, TrainOptions, TrainState, load_checkpoint, lr_at_step, save_checkpoint
from .transducer import greedy_decode, transducer_loss, transducer_loss_bruteforce

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ContrastiveConfig",
    "Encoder",
    "EncoderConfig",
    "EvalReport",
    "ManifestEntry",
    "ModelConfig",
    "ScheduleConfig",
    "SpanMask",
    "TrainOptions",
    "TrainState",
    "TransducerModel",
    "Utterance",
    "Vocabulary",
    "apply_feature_mask",
    "chunk_attention_mask",
    "contrastive_loss",
    "downsample_length",
    "evaluate",
    "greedy_decode",
    "load_checkpoint",
    "load_manifest",
    "log_mel",
    "lr_at_step",
    "make_batches",
    "relative_attention",
    "sample_distractors",
    "sample_span_mask",
    "save_checkpoint",
    "transducer_loss",
    "transducer_loss_bruteforce",
    "upconvert_8k",
    "wer",
]
