"""Multitask pretraining, streaming fine-tuning, LR schedule and checkpoints."""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import torch

from .contrastive import ContrastiveConfig, contrastive_loss, sample_all_distractors
from .frontend import Batch
from .masking import sample_span_mask
from .model import ModelConfig, TransducerModel
from .transducer import batch_transducer_loss

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class ScheduleConfig:
    k: float = 5.0
    warmup: int = 25000
    total_steps: int = 420000
    d_model: int = 512

    def __post_init__(self):
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.k <= 0:
            raise ValueError("k must be positive")


def lr_at_step(n: int, cfg: ScheduleConfig) -> float:
    """k * d_model^-0.5 * min(n^-0.5, n * warmup^-1.5), for n >= 1."""
    if n < 1:
        raise ValueError("learning-rate schedule is defined for steps n >= 1")
    return cfg.k * cfg.d_model**-0.5 * min(n**-0.5, n * cfg.warmup**-1.5)


@dataclass
class TrainOptions:
    alpha: float = 0.5
    grad_clip: float = 5.0
    chunk_size: Optional[int] = 4
    left_chunks: int = 18

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Batch streams
# ---------------------------------------------------------------------------


class AlternatingSampler:
    """Infinite batch stream alternating labeled and unlabeled batches.

    Each origin is replayed epoch after epoch, permuted per epoch from
    (seed, origin, epoch); the i-th yielded batch is a pure function of i,
    so a resumed run can pick up exactly where it stopped. Without
    unlabeled batches the stream is labeled-only (fine-tuning).
    """

    def __init__(self, labeled: Sequence[Batch], unlabeled: Optional[Sequence[Batch]], seed: int):
        if not labeled:
            raise ValueError("labeled batch stream is empty")
        self.streams = [list(labeled)] + ([list(unlabeled)] if unlabeled else [])
        self.seed = seed

    def batch_at(self, i: int) -> Batch:
        origin = i % len(self.streams)
        j = i // len(self.streams)
        stream = self.streams[origin]
        epoch, pos = divmod(j, len(stream))
        perm = np.random.default_rng([self.seed, origin, epoch]).permutation(len(stream))
        return stream[perm[pos]]

    def __iter__(self) -> Iterator[Batch]:
        i = 0
        while True:
            yield self.batch_at(i)
            i += 1


def alternating_sampler(labeled, unlabeled, seed: int) -> Iterator[Batch]:
    if not unlabeled:
        raise ValueError("pretraining needs both labeled and unlabeled batches")
    return iter(AlternatingSampler(labeled, unlabeled, seed))


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


def encode_latent(model: TransducerModel, batch: Batch):
    z = model.encoder.conv(batch.features.to(_dtype(model)))
    return z, model.encoder.output_lengths(batch.lengths)


def transducer_objective(model, batch: Batch, chunk_size=None, left_chunks: int = 0, latent=None) -> torch.Tensor:
    """Mean per-utterance transducer loss of a labeled batch."""
    if not batch.labeled:
        raise ValueError(f"batch {batch.index} has no transcripts")
    z, lengths = latent if latent is not None else encode_latent(model, batch)
    c = model.encoder.contextualize(z, lengths, chunk_size, left_chunks)
    h = model.prediction(batch.targets)
    log_probs = model.joint(c, h)
    return batch_transducer_loss(log_probs, batch.targets, lengths, batch.target_lengths).mean()


def contrastive_objective(model, batch: Batch, rng: np.random.Generator, cfg: ContrastiveConfig, latent=None) -> torch.Tensor:
    """Mean per-utterance contrastive loss with freshly sampled span masks."""
    z, lengths = latent if latent is not None else encode_latent(model, batch)
    masks = [sample_span_mask(int(n), rng, cfg.mask_prob, cfg.mask_span) for n in lengths]
    c = model.context_head(model.encoder.contextualize(z, lengths, None, 0, masks))
    q = model.target_proj(z)
    losses = []
    for b, m in enumerate(masks):
        n = m.length
        negs = sample_all_distractors(m, cfg.num_negatives, rng, cfg.negatives_from_masked_only)
        losses.append(contrastive_loss(c[b, :n], q[b, :n], m, negs, cfg.temperature))
    return torch.stack(losses).mean()


def pretrain_loss(model, batch: Batch, alpha: float, rng: np.random.Generator, cfg: ContrastiveConfig):
    """alpha * L_trans + (1 - alpha) * L_c on labeled batches, L_c alone otherwise.

    The transducer term sees the unmasked input with full-context attention;
    a term whose weight is zero is not evaluated.
    """
    latent = encode_latent(model, batch)
    parts = {}
    if batch.labeled and alpha > 0.0:
        parts["trans_loss"] = transducer_objective(model, batch, latent=latent)
    if not batch.labeled or alpha < 1.0:
        parts["contrastive_loss"] = contrastive_objective(model, batch, rng, cfg, latent=latent)
    if not batch.labeled:
        loss = parts["contrastive_loss"]
    elif alpha == 1.0:
        loss = parts["trans_loss"]
    elif alpha == 0.0:
        loss = parts["contrastive_loss"]
    else:
        loss = alpha * parts["trans_loss"] + (1.0 - alpha) * parts["contrastive_loss"]
    return loss, parts


# ---------------------------------------------------------------------------
# Training state and steps
# ---------------------------------------------------------------------------


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def make_optimizer(model) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=0.0, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0)


def build_model(cfg: ModelConfig, seed: int, dtype=torch.float32) -> TransducerModel:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = TransducerModel(cfg)
    return model.to(dtype)


@dataclass
class TrainState:
    model: TransducerModel
    optimizer: torch.optim.Optimizer
    schedule: ScheduleConfig
    options: TrainOptions
    seed: int
    stage: str = "pretrain"
    step: int = 0

    @classmethod
    def create(cls, model_cfg: ModelConfig, schedule: ScheduleConfig, options: TrainOptions, seed: int, stage="pretrain", dtype=torch.float32):
        model = build_model(model_cfg, seed, dtype)
        return cls(model, make_optimizer(model), schedule, options, seed, stage)

    def step_rng(self) -> np.random.Generator:
        """Randomness for the upcoming update, derived from (seed, step)."""
        return np.random.default_rng([self.seed, self.step])


def _update(state: TrainState, loss: torch.Tensor, batch: Batch) -> dict:
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss on batch {batch.index} ({', '.join(batch.ids)})")
    opt = state.optimizer
    opt.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for p in state.model.parameters() if p.grad is not None]
    grad_norm = torch.nn.utils.clip_grad_norm_(params, state.options.grad_clip)
    lr = lr_at_step(state.step + 1, state.schedule)
    for group in opt.param_groups:
        group["lr"] = lr
    opt.step()
    state.step += 1
    return {"step": state.step, "lr": lr, "grad_norm": float(grad_norm)}


def pretrain_step(state: TrainState, batch: Batch, ccfg: Optional[ContrastiveConfig] = None) -> dict:
    ccfg = ccfg or state.model.cfg.contrastive
    state.model.train()
    loss, parts = pretrain_loss(state.model, batch, state.options.alpha, state.step_rng(), ccfg)
    metrics = _update(state, loss, batch)
    metrics.update(stage="pretrain", origin=batch.origin, loss=float(loss.detach()), **{k: float(v.detach()) for k, v in parts.items()})
    return metrics


def finetune_step(state: TrainState, batch: Batch) -> dict:
    if not batch.labeled:
        raise ValueError(f"fine-tuning needs labeled batches; batch {batch.index} is unlabeled")
    state.model.train()
    opts = state.options
    loss = transducer_objective(state.model, batch, opts.chunk_size, opts.left_chunks)
    metrics = _update(state, loss, batch)
    metrics.update(stage="finetune", origin=batch.origin, loss=float(loss.detach()), trans_loss=float(loss.detach()))
    return metrics


@torch.no_grad()
def validation_loss(model, batches: Sequence[Batch], chunk_size=None, left_chunks: int = 0) -> float:
    """Utterance-weighted mean transducer loss over labeled batches."""
    model.eval()
    total, count = 0.0, 0
    for b in batches:
        total += float(transducer_objective(model, b, chunk_size, left_chunks)) * len(b)
        count += len(b)
    return total / max(count, 1)


def train(
    state: TrainState,
    sampler: AlternatingSampler,
    num_steps: int,
    val_batches: Sequence[Batch] = (),
    val_interval: int = 0,
    log: Optional[Callable[[dict], None]] = None,
    callback: Optional[Callable[[TrainState, dict], bool]] = None,
) -> TrainState:
    """Run ``num_steps`` further updates; batch i of the stream feeds update i.

    ``callback`` may return True to stop early.
    """
    step_fn = pretrain_step if state.stage == "pretrain" else finetune_step
    streaming = state.stage == "finetune"
    start = time.perf_counter()
    for _ in range(num_steps):
        metrics = step_fn(state, sampler.batch_at(state.step))
        if val_interval and val_batches and state.step % val_interval == 0:
            chunk = state.options.chunk_size if streaming else None
            metrics["val_loss"] = validation_loss(state.model, val_batches, chunk, state.options.left_chunks)
        metrics["wall_time"] = time.perf_counter() - start
        if log is not None:
            log(metrics)
        if callback is not None and callback(state, metrics):
            break
    return state


def jsonl_logger(stream) -> Callable[[dict], None]:
    def _log(metrics: dict) -> None:
        stream.write(json.dumps(metrics) + "\n")
        stream.flush()

    return _log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TTSSLCK\x00"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")  # magic, version, header length
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


def _named_tensors(state: TrainState) -> list[tuple[str, torch.Tensor]]:
    out = [(f"model.{n}", t.detach()) for n, t in state.model.state_dict().items()]
    names = [n for n, _ in state.model.named_parameters()]
    opt_state = state.optimizer.state_dict()["state"]
    for i, n in enumerate(names):
        for key, value in sorted(opt_state.get(i, {}).items()):
            out.append((f"optim.{n}.{key}", torch.as_tensor(value)))
    return out


def save_checkpoint(state: TrainState, path) -> None:
    """Versioned single-file checkpoint: JSON header plus little-endian tensor data."""
    index, chunks, offset = [], [], 0
    for name, t in _named_tensors(state):
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype} for {name}")
        data = np.ascontiguousarray(t.cpu().numpy(), dtype=_DTYPES[t.dtype]).tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "stage": state.stage,
        "step": state.step,
        "seed": state.seed,
        "model_config": state.model.cfg.to_dict(),
        "schedule": asdict(state.schedule),
        "options": asdict(state.options),
        "tensors": index,
        "crc32": zlib.crc32(payload),
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        f.write(payload)


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _PREAMBLE.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, hlen = _PREAMBLE.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(raw[_PREAMBLE.size : _PREAMBLE.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    payload = raw[_PREAMBLE.size + hlen :]
    if zlib.crc32(payload) != header.get("crc32"):
        raise CheckpointError(f"{path}: tensor data failed its checksum (truncated or corrupt)")
    tensors = {}
    for rec in header["tensors"]:
        buf = payload[rec["offset"] : rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(buf, dtype=rec["dtype"]).reshape(rec["shape"])
        tensors[rec["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return header, tensors


def load_checkpoint(path) -> TrainState:
    """Restore the full training state written by ``save_checkpoint``."""
    header, tensors = read_checkpoint(path)
    model_cfg = ModelConfig.from_dict(header["model_config"])
    model = TransducerModel(model_cfg)
    model_sd = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    dtype = next(iter(model_sd.values())).dtype
    model = model.to(dtype)
    try:
        model.load_state_dict(model_sd, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameters do not match the stored config ({e})") from e
    optimizer = make_optimizer(model)
    sd = optimizer.state_dict()
    state = {}
    for i, (n, _) in enumerate(model.named_parameters()):
        entry = {key: tensors[f"optim.{n}.{key}"] for key in ("step", "exp_avg", "exp_avg_sq") if f"optim.{n}.{key}" in tensors}
        if entry:
            state[i] = entry
    sd["state"] = state
    optimizer.load_state_dict(sd)
    return TrainState(
        model=model,
        optimizer=optimizer,
        schedule=ScheduleConfig(**header["schedule"]),
        options=TrainOptions(**header["options"]),
        seed=header["seed"],
        stage=header["stage"],
        step=header["step"],
    )


def init_finetune(path, schedule: ScheduleConfig, options: TrainOptions, seed: Optional[int] = None) -> TrainState:
    """Start fine-tuning from a pretraining checkpoint.

    Keeps every model parameter; resets the step counter, optimizer moments
    and schedule.
    """
    pre = load_checkpoint(path)
    return TrainState(
        model=pre.model,
        optimizer=make_optimizer(pre.model),
        schedule=schedule,
        options=options,
        seed=pre.seed if seed is None else seed,
        stage="finetune",
        step=0,
    )
