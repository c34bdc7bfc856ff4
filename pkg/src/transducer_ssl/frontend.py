"""Data ingestion: manifests, log-Mel features, 8 kHz handling and batching."""

from __future__ import annotations

import json
import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

NUM_MEL_BINS = 80
WINDOW_MS = 25
HOP_MS = 10
ENERGY_FLOOR = 1e-10
LOG_ENERGY_FLOOR = math.log(ENERGY_FLOOR)
MAX_FRAMES = 3000  # 30 s at a 10 ms hop
MEL_FMAX = 8000.0  # every sample rate shares the 16 kHz bank layout
N_FFT = {16000: 512, 8000: 256}
SAMPLE_RATES = {"8k": 8000, "16k": 16000}

FEATURE_MAGIC = b"LMF1"
_FEATURE_HEADER = struct.Struct("<4sIII")  # magic, T, dim, reserved


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Toy vocabulary
# ---------------------------------------------------------------------------


class Vocabulary:
    """Fixed character vocabulary. Id 0 is blank, id 1 the word separator."""

    BLANK = 0

    def __init__(self, symbols: str = " abcdefghijklmnopqrstuvwxyz'"):
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in vocabulary")
        if symbols[0] != " ":
            raise ValueError("the first symbol must be the space separator")
        self.symbols = symbols
        self._index = {ch: i + 1 for i, ch in enumerate(symbols)}

    def __len__(self) -> int:
        return len(self.symbols) + 1

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and other.symbols == self.symbols

    def __hash__(self) -> int:
        return hash(self.symbols)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[ch] for ch in text]
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.symbols[i - 1] for i in ids if i != self.BLANK)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    num_frames: int
    sample_rate_tag: str = "16k"
    feature_path: Optional[str] = None
    audio_path: Optional[str] = None
    transcript: Optional[list[int]] = None

    @property
    def labeled(self) -> bool:
        return self.transcript is not None

    def validate(self, vocab_size: Optional[int] = None) -> None:
        if self.sample_rate_tag not in SAMPLE_RATES:
            raise ManifestError(f"unknown sample_rate_tag {self.sample_rate_tag!r}")
        if (self.feature_path is None) == (self.audio_path is None):
            raise ManifestError("exactly one of feature_path/audio_path must be set")
        if self.num_frames <= 0:
            raise ManifestError("num_frames must be positive")
        if self.transcript is not None and vocab_size is not None:
            for tok in self.transcript:
                if not 0 < tok < vocab_size:
                    raise ManifestError(f"token id {tok} outside vocabulary (1..{vocab_size - 1})")

    def to_json(self) -> dict:
        out = {"id": self.id}
        if self.feature_path is not None:
            out["feature_path"] = self.feature_path
        if self.audio_path is not None:
            out["audio_path"] = self.audio_path
        if self.transcript is not None:
            out["transcript"] = list(self.transcript)
        out["sample_rate_tag"] = self.sample_rate_tag
        out["num_frames"] = self.num_frames
        return out


_ENTRY_FIELDS = {"id", "feature_path", "audio_path", "transcript", "sample_rate_tag", "num_frames"}


def load_manifest(path, vocab_size: Optional[int] = None) -> list[ManifestEntry]:
    """Read a JSON Lines manifest. Blank lines are skipped.

    Raises:
        ManifestError: naming the 1-based line number of the first bad record.
    """
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ManifestError("record is not a JSON object")
                unknown = set(rec) - _ENTRY_FIELDS
                if unknown:
                    raise ManifestError(f"unknown fields {sorted(unknown)}")
                transcript = rec.get("transcript")
                if transcript is not None:
                    if not all(isinstance(t, int) for t in transcript):
                        raise ManifestError("transcript must be a list of integers")
                entry = ManifestEntry(
                    id=str(rec["id"]),
                    num_frames=int(rec["num_frames"]),
                    sample_rate_tag=rec.get("sample_rate_tag", "16k"),
                    feature_path=rec.get("feature_path"),
                    audio_path=rec.get("audio_path"),
                    transcript=list(transcript) if transcript is not None else None,
                )
                entry.validate(vocab_size)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from e
            entries.append(entry)
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(e.to_json()) + "\n")


# ---------------------------------------------------------------------------
# Feature and audio files
# ---------------------------------------------------------------------------


def write_features(path, features: np.ndarray) -> None:
    feats = np.ascontiguousarray(features, dtype="<f4")
    if feats.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, feats.shape[0], feats.shape[1], 0))
        f.write(feats.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(_FEATURE_HEADER.size)
        if len(header) != _FEATURE_HEADER.size:
            raise ValueError(f"{path}: truncated feature header")
        magic, T, dim, _ = _FEATURE_HEADER.unpack(header)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: bad feature file magic {magic!r}")
        data = f.read()
    if len(data) != 4 * T * dim:
        raise ValueError(f"{path}: expected {T}x{dim} floats, found {len(data) // 4}")
    return np.frombuffer(data, dtype="<f4").reshape(T, dim).astype(np.float32)


def write_wav(path, waveform: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(waveform) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: only mono 16-bit PCM is supported")
        sr = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32768.0, sr


# ---------------------------------------------------------------------------
# Log-Mel filterbank
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(num_bins: int = NUM_MEL_BINS, fmax: float = MEL_FMAX) -> np.ndarray:
    """Mel-scale edge points (num_bins + 2); bank i spans edges[i]..edges[i+2]."""
    return np.linspace(0.0, hz_to_mel(fmax), num_bins + 2)


def mel_filterbank(sample_rate: int, n_fft: int, num_bins: int = NUM_MEL_BINS) -> np.ndarray:
    """Triangular filters [num_bins, n_fft // 2 + 1] on the shared 0..8 kHz layout."""
    edges_hz = mel_to_hz(mel_band_edges(num_bins))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, center, hi = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    up = (freqs[None, :] - lo) / (center - lo)
    down = (hi - freqs[None, :]) / (hi - center)
    return np.maximum(0.0, np.minimum(up, down))


def cutoff_bank_index(nyquist: float = 4000.0, num_bins: int = NUM_MEL_BINS) -> int:
    """First bank whose lower edge lies above ``nyquist`` (62 for 4 kHz)."""
    lower = mel_band_edges(num_bins)[:num_bins]
    above = np.nonzero(lower > hz_to_mel(nyquist))[0]
    return int(above[0]) if above.size else num_bins


def num_frames(num_samples: int, sample_rate: int) -> int:
    win = sample_rate * WINDOW_MS // 1000
    hop = sample_rate * HOP_MS // 1000
    if num_samples < win:
        raise ValueError(f"waveform of {num_samples} samples is shorter than one {win}-sample window")
    return (num_samples - win) // hop + 1


def log_mel(waveform: np.ndarray, sample_rate: int) -> np.ndarray:
    """80-bank log-Mel energies, 25 ms Hann window every 10 ms.

    At 8 kHz the filterbank keeps the 16 kHz layout, so banks above the
    4 kHz Nyquist receive no energy and come out at ``LOG_ENERGY_FLOOR``.
    """
    if sample_rate not in N_FFT:
        raise ValueError(f"unsupported sample rate {sample_rate}")
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("waveform must be 1-D")
    T = num_frames(len(x), sample_rate)
    win = sample_rate * WINDOW_MS // 1000
    hop = sample_rate * HOP_MS // 1000
    n_fft = N_FFT[sample_rate]
    idx = np.arange(win)[None, :] + hop * np.arange(T)[:, None]
    frames = x[idx] * np.hanning(win + 2)[1:-1]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(sample_rate, n_fft).T
    return np.log(np.maximum(energies, ENERGY_FLOOR)).astype(np.float32)


def upconvert_8k(features_8k: np.ndarray) -> np.ndarray:
    """Map 8 kHz features onto the 16 kHz layout by zeroing the high banks."""
    feats = np.array(features_8k, dtype=np.float32, copy=True)
    if feats.ndim != 2 or feats.shape[1] != NUM_MEL_BINS:
        raise ValueError(f"expected [T x {NUM_MEL_BINS}] features, got {feats.shape}")
    feats[:, cutoff_bank_index():] = LOG_ENERGY_FLOOR
    return feats


# ---------------------------------------------------------------------------
# Utterances and batching
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    transcript: Optional[list[int]] = None
    sample_rate_tag: str = "16k"

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[1] != NUM_MEL_BINS:
            raise ValueError(f"{self.id}: features must be [T x {NUM_MEL_BINS}]")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"{self.id}: non-finite feature values")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def labeled(self) -> bool:
        return self.transcript is not None

    def cost(self) -> int:
        """T * (U + 1), the lattice size used for batching."""
        return self.num_frames * (len(self.transcript or ()) + 1)


def load_utterance(entry: ManifestEntry, base_dir=None) -> Utterance:
    base = Path(base_dir) if base_dir is not None else Path(".")
    if entry.feature_path is not None:
        feats = read_features(base / entry.feature_path)
        if entry.sample_rate_tag == "8k":
            feats = upconvert_8k(feats)
    else:
        wav, sr = read_wav(base / entry.audio_path)
        if sr != SAMPLE_RATES[entry.sample_rate_tag]:
            raise ManifestError(f"{entry.id}: wav rate {sr} does not match tag {entry.sample_rate_tag}")
        feats = log_mel(wav, sr)
        if sr == 8000:
            feats = upconvert_8k(feats)
    return Utterance(entry.id, feats, entry.transcript, entry.sample_rate_tag)


def load_corpus(manifest_path, vocab_size: Optional[int] = None, max_frames: int = MAX_FRAMES) -> list[Utterance]:
    """Load every utterance of a manifest, dropping those longer than ``max_frames``."""
    entries = load_manifest(manifest_path, vocab_size)
    base = Path(manifest_path).parent
    return filter_by_length([load_utterance(e, base) for e in entries], max_frames)


def filter_by_length(utterances: Iterable[Utterance], max_frames: int = MAX_FRAMES) -> list[Utterance]:
    return [u for u in utterances if u.num_frames <= max_frames]


@dataclass(frozen=True)
class Batch:
    features: torch.Tensor  # [B, T_max, 80]
    lengths: torch.Tensor  # [B]
    ids: tuple[str, ...]
    origin: str  # "labeled" | "unlabeled"
    targets: Optional[torch.Tensor] = None  # [B, U_max], zero padded
    target_lengths: Optional[torch.Tensor] = None
    index: int = field(default=0, compare=False)

    @property
    def labeled(self) -> bool:
        return self.origin == "labeled"

    def __len__(self) -> int:
        return len(self.ids)


def collate(utterances: Sequence[Utterance], origin: Optional[str] = None, index: int = 0) -> Batch:
    if not utterances:
        raise ValueError("cannot collate an empty batch")
    all_labeled = all(u.labeled for u in utterances)
    if origin is None:
        origin = "labeled" if all_labeled else "unlabeled"
    if origin == "labeled" and not all_labeled:
        raise ValueError("labeled batch contains an utterance without transcript")
    T_max = max(u.num_frames for u in utterances)
    feats = np.zeros((len(utterances), T_max, NUM_MEL_BINS), dtype=np.float32)
    for i, u in enumerate(utterances):
        feats[i, : u.num_frames] = u.features
    targets = target_lengths = None
    if origin == "labeled":
        U_max = max(len(u.transcript) for u in utterances)
        tgt = np.zeros((len(utterances), U_max), dtype=np.int64)
        for i, u in enumerate(utterances):
            tgt[i, : len(u.transcript)] = u.transcript
        targets = torch.from_numpy(tgt)
        target_lengths = torch.tensor([len(u.transcript) for u in utterances], dtype=torch.long)
    return Batch(
        features=torch.from_numpy(feats),
        lengths=torch.tensor([u.num_frames for u in utterances], dtype=torch.long),
        ids=tuple(u.id for u in utterances),
        origin=origin,
        targets=targets,
        target_lengths=target_lengths,
        index=index,
    )


def group_by_cost(utterances: Sequence[Utterance], cap: int, cost=Utterance.cost) -> list[list[Utterance]]:
    """Sort by length descending and pack greedily (first fit) under ``cap``."""
    for u in utterances:
        if cost(u) > cap:
            raise ValueError(f"utterance {u.id} has cost {cost(u)} exceeding batch cap {cap}")
    order = sorted(utterances, key=lambda u: -u.num_frames)
    bins: list[list[Utterance]] = []
    loads: list[int] = []
    for u in order:
        c = cost(u)
        for i, load in enumerate(loads):
            if load + c <= cap:
                bins[i].append(u)
                loads[i] += c
                break
        else:
            bins.append([u])
            loads.append(c)
    return bins


def make_batches(
    utterances: Sequence[Utterance],
    cap: int,
    rng_seed: int,
    origin: Optional[str] = None,
    cost=Utterance.cost,
) -> list[Batch]:
    """Group utterances into batches whose summed ``cost`` stays within ``cap``.

    Batch order is shuffled with ``rng_seed``; composition depends only on
    the utterances and the cap.
    """
    groups = group_by_cost(utterances, cap, cost)
    perm = np.random.default_rng(rng_seed).permutation(len(groups))
    return [collate(groups[j], origin, index=i) for i, j in enumerate(perm)]


def frame_cost(u: Utterance) -> int:
    return u.num_frames
