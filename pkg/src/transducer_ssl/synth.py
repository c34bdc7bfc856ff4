"""Synthetic tone-sequence corpora for end-to-end runs at toy scale.

Every character is rendered as a two-tone burst with a characteristic
frequency pair below 4 kHz, so 8 kHz renditions stay decodable after the
high-bank zeroing.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .frontend import (
    ManifestEntry,
    Utterance,
    Vocabulary,
    log_mel,
    num_frames,
    upconvert_8k,
    write_features,
    write_manifest,
    write_wav,
)

LEXICON = (
    "the", "cat", "sat", "on", "a", "mat", "dog", "ran", "to", "big", "red", "sun",
    "we", "go", "up", "it", "is", "hot", "bed", "fox",
)


def _tone_table(vocab: Vocabulary, rng: np.random.Generator) -> dict[str, tuple[float, float]]:
    letters = [s for s in vocab.symbols if s != " "]
    grid = np.geomspace(250.0, 3600.0, 2 * len(letters))
    perm = rng.permutation(len(grid))
    return {ch: (grid[perm[2 * i]], grid[perm[2 * i + 1]]) for i, ch in enumerate(letters)}


def render(text: str, tones, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Waveform for ``text``; spaces become short low-level noise gaps."""
    pieces = [0.01 * rng.standard_normal(int(0.05 * sample_rate))]
    for ch in text:
        dur = rng.uniform(0.12, 0.18) if ch != " " else rng.uniform(0.06, 0.1)
        n = int(dur * sample_rate)
        t = np.arange(n) / sample_rate
        if ch == " ":
            pieces.append(0.01 * rng.standard_normal(n))
            continue
        f1, f2 = tones[ch]
        env = np.minimum(1.0, np.minimum(t, t[::-1]) / 0.01)
        sig = 0.3 * np.sin(2 * np.pi * f1 * t + rng.uniform(0, 2 * np.pi))
        sig += 0.2 * np.sin(2 * np.pi * f2 * t + rng.uniform(0, 2 * np.pi))
        pieces.append(env * sig + 0.01 * rng.standard_normal(n))
    pieces.append(0.01 * rng.standard_normal(int(0.05 * sample_rate)))
    return np.concatenate(pieces)


def random_text(rng: np.random.Generator, min_words: int = 1, max_words: int = 3) -> str:
    n = int(rng.integers(min_words, max_words + 1))
    return " ".join(LEXICON[i] for i in rng.integers(0, len(LEXICON), size=n))


def make_utterances(
    n: int,
    seed: int,
    vocab: Vocabulary,
    labeled: bool = True,
    frac_8k: float = 0.0,
    prefix: str = "utt",
    tone_seed: int = 1234,
    max_words: int = 3,
) -> list[Utterance]:
    """In-memory corpus; ``tone_seed`` fixes the character-to-tone mapping."""
    tones = _tone_table(vocab, np.random.default_rng(tone_seed))
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        text = random_text(rng, max_words=max_words)
        sr = 8000 if rng.random() < frac_8k else 16000
        feats = log_mel(render(text, tones, sr, rng), sr)
        if sr == 8000:
            feats = upconvert_8k(feats)
        out.append(
            Utterance(
                id=f"{prefix}{i:04d}",
                features=feats,
                transcript=vocab.encode(text) if labeled else None,
                sample_rate_tag="8k" if sr == 8000 else "16k",
            )
        )
    return out


def write_corpus(
    out_dir,
    name: str,
    n: int,
    seed: int,
    vocab: Vocabulary,
    labeled: bool = True,
    frac_8k: float = 0.0,
    as_audio: bool = False,
    tone_seed: int = 1234,
) -> Path:
    """Write a corpus (features or wav files) plus its JSONL manifest."""
    out_dir = Path(out_dir)
    (out_dir / name).mkdir(parents=True, exist_ok=True)
    tones = _tone_table(vocab, np.random.default_rng(tone_seed))
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        text = random_text(rng)
        sr = 8000 if rng.random() < frac_8k else 16000
        tag = "8k" if sr == 8000 else "16k"
        wav = render(text, tones, sr, rng)
        uid = f"{name}{i:04d}"
        entry = ManifestEntry(
            id=uid,
            num_frames=num_frames(len(wav), sr),
            sample_rate_tag=tag,
            transcript=vocab.encode(text) if labeled else None,
        )
        if as_audio:
            entry.audio_path = f"{name}/{uid}.wav"
            write_wav(out_dir / entry.audio_path, wav, sr)
        else:
            entry.feature_path = f"{name}/{uid}.feat"
            write_features(out_dir / entry.feature_path, log_mel(wav, sr))
        entries.append(entry)
    manifest = out_dir / f"{name}.jsonl"
    write_manifest(entries, manifest)
    return manifest


TOY_MODEL = {
    "vocab_size": 29,
    "encoder": {
        "conv_channels": [4, 8],
        "num_layers": 2,
        "d_model": 64,
        "ffn_dim": 128,
        "num_heads": 4,
        "max_relative_distance": 64,
    },
    "prediction": {"num_blocks": 2, "lstm_cell": 64, "proj_dim": 64, "embed_dim": 32},
    "joint": {"joint_dim": 64},
    "contrastive": {"num_negatives": 100, "temperature": 1.0, "target_dim": 64, "mask_prob": 0.065, "mask_span": 10},
}


def write_toy_setup(out_dir, seed: int = 0, as_audio: bool = False) -> Path:
    """Generate labeled/unlabeled/valid/test corpora and a matching config.json."""
    out_dir = Path(out_dir)
    vocab = Vocabulary()
    write_corpus(out_dir, "labeled", 20, seed + 1, vocab, as_audio=as_audio)
    write_corpus(out_dir, "unlabeled", 40, seed + 2, vocab, labeled=False, frac_8k=0.3, as_audio=as_audio)
    write_corpus(out_dir, "valid", 5, seed + 3, vocab, as_audio=as_audio)
    write_corpus(out_dir, "test", 10, seed + 4, vocab, as_audio=as_audio)
    config = {
        "seed": seed,
        "vocab": vocab.symbols,
        "model": TOY_MODEL,
        "data": {
            "labeled": "labeled.jsonl",
            "unlabeled": "unlabeled.jsonl",
            "valid": "valid.jsonl",
            "test": {"test": "test.jsonl", "train": "labeled.jsonl"},
        },
        "pretrain": {
            "steps": 1000,
            "alpha": 0.5,
            "labeled_frames": 2000,
            "unlabeled_frames": 4000,
            "schedule": {"k": 0.5, "warmup": 200, "total_steps": 1000, "d_model": 64},
        },
        "finetune": {
            "steps": 2000,
            "batch_cap": 900000,
            "chunk_size": 4,
            "left_chunks": 18,
            "schedule": {"k": 0.6, "warmup": 200, "total_steps": 2000, "d_model": 64},
        },
        "grad_clip": 5.0,
        "val_interval": 50,
        "max_symbols_per_frame": 10,
    }
    path = out_dir / "config.json"
    path.write_text(json.dumps(config, indent=2) + "\n")
    return path
