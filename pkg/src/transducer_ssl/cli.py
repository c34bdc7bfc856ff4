"""Command line entry points: pretrain, finetune, decode, eval, mask-dump, synth."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .frontend import Utterance, Vocabulary, frame_cost, load_corpus, make_batches
from .masking import chunk_attention_mask, format_mask
from .model import ModelConfig
from .scoring import decode_corpus, evaluate
from .trainer import (
    AlternatingSampler,
    ScheduleConfig,
    TrainOptions,
    TrainState,
    init_finetune,
    jsonl_logger,
    load_checkpoint,
    save_checkpoint,
    train,
)

logger = logging.getLogger("transducer_ssl")


class ConfigError(ValueError):
    pass


@dataclass
class StageConfig:
    steps: int
    schedule: ScheduleConfig


@dataclass
class RunConfig:
    """Everything a run needs, read from one JSON document.

    Paths are resolved relative to the config file's directory.
    """

    model: ModelConfig
    pretrain: StageConfig
    finetune: StageConfig
    vocab: Vocabulary
    seed: int = 0
    alpha: float = 0.5
    labeled_frames: int = 2000
    unlabeled_frames: int = 4000
    batch_cap: int = 900_000
    chunk_size: Optional[int] = 4
    left_chunks: int = 18
    grad_clip: float = 5.0
    val_interval: int = 100
    max_symbols_per_frame: int = 10
    labeled: Optional[Path] = None
    unlabeled: Optional[Path] = None
    valid: Optional[Path] = None
    test: dict[str, Path] = field(default_factory=dict)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        base = path.parent
        try:
            pre = raw.get("pretrain", {})
            fine = raw.get("finetune", {})
            data = raw.get("data", {})
            model = ModelConfig.from_dict(raw.get("model", {}))
            vocab = Vocabulary(raw["vocab"]) if "vocab" in raw else Vocabulary()
            if len(vocab) != model.vocab_size:
                raise ConfigError(f"vocab has {len(vocab)} ids but model.vocab_size={model.vocab_size}")
            d_model = model.encoder.d_model
            pre_sched = {"k": 5.0, "warmup": 25000, "total_steps": 420000, "d_model": d_model} | pre.get("schedule", {})
            fine_sched = {"k": 6.0, "warmup": 25000, "total_steps": 5000, "d_model": d_model} | fine.get("schedule", {})

            def resolve(p):
                if p is None:
                    return None
                full = base / p
                if not full.exists():
                    raise ConfigError(f"referenced path does not exist: {full}")
                return full

            test = data.get("test", {})
            if isinstance(test, str):
                test = {"test": test}
            cfg = cls(
                model=model,
                pretrain=StageConfig(int(pre.get("steps", 420000)), ScheduleConfig(**pre_sched)),
                finetune=StageConfig(int(fine.get("steps", 5000)), ScheduleConfig(**fine_sched)),
                vocab=vocab,
                seed=int(raw.get("seed", 0)),
                alpha=float(pre.get("alpha", 0.5)),
                labeled_frames=int(pre.get("labeled_frames", 2000)),
                unlabeled_frames=int(pre.get("unlabeled_frames", 4000)),
                batch_cap=int(fine.get("batch_cap", 900_000)),
                chunk_size=fine.get("chunk_size", 4),
                left_chunks=int(fine.get("left_chunks", 18)),
                grad_clip=float(raw.get("grad_clip", 5.0)),
                val_interval=int(raw.get("val_interval", 100)),
                max_symbols_per_frame=int(raw.get("max_symbols_per_frame", 10)),
                labeled=resolve(data.get("labeled")),
                unlabeled=resolve(data.get("unlabeled")),
                valid=resolve(data.get("valid")),
                test={k: resolve(v) for k, v in test.items()},
            )
        except (TypeError, ValueError, KeyError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"bad config {path}: {e}") from e
        return cfg

    def require_streaming(self) -> None:
        if self.chunk_size is None or int(self.chunk_size) < 1:
            raise ConfigError("finetune.chunk_size (>= 1) is required for streaming runs")

    def options(self) -> TrainOptions:
        return TrainOptions(self.alpha, self.grad_clip, self.chunk_size, self.left_chunks)

    def corpus(self, path) -> list[Utterance]:
        return load_corpus(path, len(self.vocab))


def _require(path, what: str):
    if path is None:
        raise ConfigError(f"config has no {what} manifest")
    return path


def _metrics_sink(path):
    if path is None:
        return jsonl_logger(sys.stderr), None
    f = open(path, "w")
    return jsonl_logger(f), f


def cmd_pretrain(args, cfg: RunConfig) -> int:
    labeled = cfg.corpus(_require(cfg.labeled, "labeled"))
    unlabeled = cfg.corpus(_require(cfg.unlabeled, "unlabeled"))
    lab_batches = make_batches(labeled, cfg.labeled_frames, cfg.seed, "labeled", cost=frame_cost)
    unl_batches = make_batches(unlabeled, cfg.unlabeled_frames, cfg.seed + 1, "unlabeled", cost=frame_cost)
    if args.resume:
        state = load_checkpoint(args.resume)
    else:
        state = TrainState.create(cfg.model, cfg.pretrain.schedule, cfg.options(), cfg.seed, stage="pretrain")
    val = make_batches(cfg.corpus(cfg.valid), cfg.batch_cap, 0) if cfg.valid else []
    steps = args.steps if args.steps is not None else cfg.pretrain.steps - state.step
    log, fh = _metrics_sink(args.metrics)
    try:
        train(state, AlternatingSampler(lab_batches, unl_batches, cfg.seed), steps, val, cfg.val_interval, log)
    finally:
        if fh:
            fh.close()
    save_checkpoint(state, args.out)
    logger.info("pretraining stopped at step %d; checkpoint %s", state.step, args.out)
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    cfg.require_streaming()
    labeled = cfg.corpus(_require(cfg.labeled, "labeled"))
    batches = make_batches(labeled, cfg.batch_cap, cfg.seed, "labeled")
    if args.resume:
        state = load_checkpoint(args.resume)
    elif args.init:
        state = init_finetune(args.init, cfg.finetune.schedule, cfg.options(), cfg.seed)
    else:
        state = TrainState.create(cfg.model, cfg.finetune.schedule, cfg.options(), cfg.seed, stage="finetune")
    val = make_batches(cfg.corpus(cfg.valid), cfg.batch_cap, 0) if cfg.valid else []
    steps = args.steps if args.steps is not None else cfg.finetune.steps - state.step
    log, fh = _metrics_sink(args.metrics)
    try:
        train(state, AlternatingSampler(batches, None, cfg.seed), steps, val, cfg.val_interval, log)
    finally:
        if fh:
            fh.close()
    save_checkpoint(state, args.out)
    logger.info("fine-tuning stopped at step %d; checkpoint %s", state.step, args.out)
    return 0


def _streaming_args(cfg: RunConfig, state: TrainState):
    if state.stage == "finetune":
        cfg.require_streaming()
        return cfg.chunk_size, cfg.left_chunks
    return None, 0


def cmd_decode(args, cfg: RunConfig) -> int:
    state = load_checkpoint(args.checkpoint)
    chunk, left = _streaming_args(cfg, state)
    utts = cfg.corpus(args.manifest)
    hyps = decode_corpus(state.model, utts, chunk, left, cfg.max_symbols_per_frame)
    out = open(args.output, "w") if args.output else sys.stdout
    try:
        for u, h in zip(utts, hyps):
            out.write(f"{u.id}\t{cfg.vocab.decode(h)}\n")
    finally:
        if args.output:
            out.close()
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    state = load_checkpoint(args.checkpoint)
    chunk, left = _streaming_args(cfg, state)
    if args.test:
        tests = {}
        for item in args.test:
            name, sep, path = item.partition("=")
            if not sep:
                name, path = Path(item).stem, item
            tests[name] = path
    else:
        tests = cfg.test
    if not tests:
        raise ConfigError("no test manifests given (--test or data.test)")
    sets = {name: cfg.corpus(path) for name, path in tests.items()}
    report = evaluate(state.model, sets, cfg.vocab, chunk, left, cfg.max_symbols_per_frame)
    json.dump(report.to_dict(), sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def cmd_mask_dump(args, cfg=None) -> int:
    print(format_mask(chunk_attention_mask(args.frames, args.chunk, args.left_chunks)))
    return 0


def cmd_synth(args, cfg=None) -> int:
    from .synth import write_toy_setup

    path = write_toy_setup(args.out, seed=args.seed, as_audio=args.audio)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transducer-ssl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="multitask contrastive + transducer pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="continue from a pretraining checkpoint")
    p.add_argument("--metrics", help="JSONL metrics file (default: stderr)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="streaming transducer fine-tuning")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="pretraining checkpoint to start from")
    p.add_argument("--resume", help="continue from a fine-tuning checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("decode", help="greedy decoding, one 'id<TAB>text' line per utterance")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="WER report as JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", action="append", help="manifest or name=manifest; repeatable")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mask-dump", help="print a chunk attention mask as 0/1 rows")
    p.add_argument("--config")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--chunk", type=int, required=True)
    p.add_argument("--left-chunks", type=int, default=0)
    p.set_defaults(func=cmd_mask_dump)

    p = sub.add_parser("synth", help="write a synthetic toy corpus and config.json")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--audio", action="store_true", help="store wav files instead of features")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    cfg = None
    try:
        if getattr(args, "config", None) and args.func not in (cmd_synth,):
            cfg = RunConfig.from_json(args.config)
        return args.func(args, cfg)
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any failure maps to a nonzero exit
        logger.error("%s: %s", type(e).__name__, e)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
