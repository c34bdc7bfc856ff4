"""Transducer components: prediction/joint networks, lattice loss and decoding."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

BLANK = 0
BRUTEFORCE_MAX_NODES = 12


@dataclass
class PredictionConfig:
    num_blocks: int = 2
    lstm_cell: int = 64
    proj_dim: int = 64
    embed_dim: int = 64

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")

    @classmethod
    def full_scale(cls) -> "PredictionConfig":
        return cls(num_blocks=2, lstm_cell=1024, proj_dim=640, embed_dim=64)


@dataclass
class JointConfig:
    joint_dim: int = 640


class PredictionNetwork(nn.Module):
    """Stacked (LSTM -> linear projection -> LayerNorm) blocks over label history.

    Row 0 of the output is the start state, fed a zero embedding; row u
    conditions on y_1..y_u.
    """

    def __init__(self, vocab_size: int, cfg: PredictionConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(vocab_size, cfg.embed_dim)
        self.lstms = nn.ModuleList()
        self.projs = nn.ModuleList()
        self.norms = nn.ModuleList()
        in_dim = cfg.embed_dim
        for _ in range(cfg.num_blocks):
            self.lstms.append(nn.LSTM(in_dim, cfg.lstm_cell, batch_first=True))
            self.projs.append(nn.Linear(cfg.lstm_cell, cfg.proj_dim))
            self.norms.append(nn.LayerNorm(cfg.proj_dim))
            in_dim = cfg.proj_dim

    def _blocks(self, x, state=None):
        new_state = []
        for i, (lstm, proj, norm) in enumerate(zip(self.lstms, self.projs, self.norms)):
            x, s = lstm(x, None if state is None else state[i])
            x = norm(proj(x))
            new_state.append(s)
        return x, new_state

    def forward(self, targets: torch.Tensor) -> torch.Tensor:
        """[B, U] token ids -> [B, U+1, proj_dim]. Padding after a sequence's end is harmless."""
        emb = self.embed(targets)
        start = emb.new_zeros(emb.shape[0], 1, emb.shape[2])
        out, _ = self._blocks(torch.cat([start, emb], dim=1))
        return out

    def start(self, dtype=torch.float32):
        """Output and recurrent state after consuming the start symbol."""
        x = torch.zeros(1, 1, self.cfg.embed_dim, dtype=dtype)
        out, state = self._blocks(x)
        return out[0, 0], state

    def step(self, token: int, state):
        x = self.embed(torch.tensor([[token]]))
        out, state = self._blocks(x, state)
        return out[0, 0], state


def prediction_forward(net: PredictionNetwork, prefix: Sequence[int]) -> torch.Tensor:
    """Prediction output [(U+1), proj_dim] for an unpadded label prefix."""
    if any(t == BLANK for t in prefix):
        raise ValueError("blank symbol in prediction-network prefix")
    return net(torch.as_tensor(list(prefix), dtype=torch.long).view(1, -1))[0]


class JointNetwork(nn.Module):
    """z_{t,u} = W_out tanh(W_enc c_t + W_pred h_u), then log-softmax over tokens."""

    def __init__(self, enc_dim: int, pred_dim: int, joint_dim: int, vocab_size: int):
        super().__init__()
        self.enc_proj = nn.Linear(enc_dim, joint_dim)
        self.pred_proj = nn.Linear(pred_dim, joint_dim)
        self.out = nn.Linear(joint_dim, vocab_size)

    def forward(self, c: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        """c: [..., T, D], h: [..., U+1, P] -> log-probs [..., T, U+1, V]."""
        z = torch.tanh(self.enc_proj(c).unsqueeze(-2) + self.pred_proj(h).unsqueeze(-3))
        return torch.log_softmax(self.out(z), dim=-1)


# ---------------------------------------------------------------------------
# Lattice recursions
# ---------------------------------------------------------------------------


def _lattice_terms(log_probs: np.ndarray, targets: np.ndarray, T_lens, U_lens):
    """Per-node blank and emit log-probs, -inf outside each utterance's lattice."""
    B, T, U1, _ = log_probs.shape
    U = U1 - 1
    t_idx = np.arange(T)[None, :, None]
    u_idx = np.arange(U1)[None, None, :]
    T_lens = np.asarray(T_lens)[:, None, None]
    U_lens = np.asarray(U_lens)[:, None, None]
    blank = log_probs[..., BLANK].copy()
    blank[(t_idx >= T_lens) | (u_idx > U_lens)] = -np.inf
    emit = np.full((B, T, U), -np.inf)
    if U:
        tgt = np.broadcast_to(targets[:, None, :U], (B, T, U))
        emit = np.take_along_axis(log_probs[:, :, :U, :], tgt[..., None], axis=-1)[..., 0].copy()
        emit[(t_idx >= T_lens) | (u_idx[..., :U] >= U_lens)] = -np.inf
    return blank, emit


def _forward_backward(blank: np.ndarray, emit: np.ndarray, T_lens, U_lens):
    """Log-space alpha/beta over the padded lattice, one anti-diagonal at a time.

    alpha has shape [B, T, U+1]; beta has shape [B, T+1, U+1] where row T_b
    holds the virtual terminal beta(T_b, U_b) = 0 reached by the final blank.
    """
    B, T, U1 = blank.shape
    U = U1 - 1
    T_lens = np.asarray(T_lens)
    U_lens = np.asarray(U_lens)
    alpha = np.full((B, T, U1), -np.inf)
    alpha[:, 0, 0] = 0.0
    for d in range(1, T + U):
        t = np.arange(max(0, d - U), min(T - 1, d) + 1)
        u = d - t
        from_blank = np.full((B, t.size), -np.inf)
        from_emit = np.full((B, t.size), -np.inf)
        ok = t >= 1
        from_blank[:, ok] = alpha[:, t[ok] - 1, u[ok]] + blank[:, t[ok] - 1, u[ok]]
        ok = u >= 1
        from_emit[:, ok] = alpha[:, t[ok], u[ok] - 1] + emit[:, t[ok], u[ok] - 1]
        alpha[:, t, u] = np.logaddexp(from_blank, from_emit)

    beta = np.full((B, T + 1, U1), -np.inf)
    rows = np.arange(B)
    beta[rows, T_lens, U_lens] = 0.0
    terminal = np.zeros((B, T + 1, U1), dtype=bool)
    terminal[rows, T_lens, U_lens] = True
    for d in range(T - 1 + U, -1, -1):
        t = np.arange(max(0, d - U), min(T - 1, d) + 1)
        u = d - t
        via_blank = beta[:, t + 1, u] + blank[:, t, u]
        via_emit = np.full((B, t.size), -np.inf)
        ok = u < U
        via_emit[:, ok] = beta[:, t[ok], u[ok] + 1] + emit[:, t[ok], u[ok]]
        beta[:, t, u] = np.where(terminal[:, t, u], 0.0, np.logaddexp(via_blank, via_emit))

    log_like = alpha[rows, T_lens - 1, U_lens] + blank[rows, T_lens - 1, U_lens]
    return alpha, beta, log_like


def _check_lengths(T_lens, U_lens, T, U):
    T_lens = np.asarray(T_lens, dtype=np.int64)
    U_lens = np.asarray(U_lens, dtype=np.int64)
    if np.any(T_lens < 1):
        raise ValueError("transducer loss needs at least one encoder frame (no valid path otherwise)")
    if np.any(T_lens > T) or np.any(U_lens > U) or np.any(U_lens < 0):
        raise ValueError("lengths exceed the lattice dimensions")
    return T_lens, U_lens


class _TransducerLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs, targets, T_lens, U_lens):
        lp = log_probs.detach().cpu().double().numpy()
        tgt = targets.detach().cpu().numpy().astype(np.int64)
        B, T, U1, V = lp.shape
        T_np, U_np = _check_lengths(T_lens.cpu().numpy(), U_lens.cpu().numpy(), T, U1 - 1)
        blank, emit = _lattice_terms(lp, tgt, T_np, U_np)
        with np.errstate(invalid="ignore"):
            alpha, beta, log_like = _forward_backward(blank, emit, T_np, U_np)
        if np.isnan(lp).any():
            # let the caller report the offending batch
            ctx.save_for_backward(torch.full_like(log_probs, float("nan")))
            return torch.full((B,), float("nan"), dtype=log_probs.dtype)
        if not np.all(np.isfinite(log_like)):
            raise FloatingPointError("transducer lattice has no finite path")

        # occupancy form: d(-ln P)/d logp(k|t,u) = -P(path uses that arc) / P
        norm = log_like[:, None, None]
        grad = np.zeros_like(lp)
        grad[..., BLANK] = -np.exp(alpha + blank + beta[:, 1:, :] - norm)
        U = U1 - 1
        if U:
            g_emit = -np.exp(alpha[:, :, :U] + emit + beta[:, :-1, 1:] - norm)
            tgt_b = np.broadcast_to(tgt[:, None, :U, None], (B, T, U, 1))
            sub = grad[:, :, :U, :]
            np.put_along_axis(sub, tgt_b, np.take_along_axis(sub, tgt_b, -1) + g_emit[..., None], axis=-1)
            grad[:, :, :U, :] = sub
        ctx.save_for_backward(torch.from_numpy(grad).to(log_probs.dtype))
        return torch.from_numpy(-log_like).to(log_probs.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        (grad,) = ctx.saved_tensors
        return grad * grad_output.view(-1, 1, 1, 1), None, None, None


def batch_transducer_loss(log_probs, targets, T_lens, U_lens) -> torch.Tensor:
    """Per-utterance transducer losses [B] for a padded lattice [B, T, U+1, V].

    Gradients flow to ``log_probs`` through analytic alpha/beta occupancies.
    """
    return _TransducerLoss.apply(
        log_probs, torch.as_tensor(targets), torch.as_tensor(T_lens), torch.as_tensor(U_lens)
    )


def transducer_loss(log_probs: torch.Tensor, y: Sequence[int]) -> torch.Tensor:
    """-ln P(y|x) for one utterance with lattice log-probs [T, U+1, V]."""
    T, U1, _ = log_probs.shape
    if len(y) != U1 - 1:
        raise ValueError(f"lattice has U={U1 - 1} but transcript has {len(y)} tokens")
    if T == 0:
        raise ValueError("transducer loss needs at least one encoder frame (no valid path otherwise)")
    tgt = torch.as_tensor(list(y), dtype=torch.long).view(1, -1)
    return batch_transducer_loss(log_probs.unsqueeze(0), tgt, [T], [U1 - 1])[0]


def forward_backward(log_probs, y):
    """(alpha [T, U+1], beta [T+1, U+1], ln P) for one utterance, float64 numpy."""
    lp = np.asarray(torch.as_tensor(log_probs).detach().double().numpy())[None]
    T, U1 = lp.shape[1:3]
    tgt = np.asarray(list(y), dtype=np.int64).reshape(1, -1)
    blank, emit = _lattice_terms(lp, tgt, [T], [U1 - 1])
    alpha, beta, ll = _forward_backward(blank, emit, [T], [U1 - 1])
    return alpha[0], beta[0], float(ll[0])


def count_alignments(T: int, U: int) -> int:
    """Monotonic lattice paths from (0, 0) to (T-1, U): the final blank is forced."""
    return math.comb(T - 1 + U, U)


def transducer_loss_bruteforce(log_probs, y: Sequence[int]) -> float:
    """Enumerate every alignment explicitly and return -ln of the summed probability."""
    lp = np.asarray(torch.as_tensor(log_probs).detach().double().numpy())
    T, U1, _ = lp.shape
    U = U1 - 1
    if len(y) != U:
        raise ValueError("transcript length does not match the lattice")
    if T + U > BRUTEFORCE_MAX_NODES:
        raise ValueError(f"T'+U = {T + U} exceeds the enumeration bound {BRUTEFORCE_MAX_NODES}")
    if T < 1:
        raise ValueError("no alignment without encoder frames")
    total = 0.0
    moves = T - 1 + U
    for emit_at in itertools.combinations(range(moves), U):
        emit_at = set(emit_at)
        t = u = 0
        logp = 0.0
        for i in range(moves):
            if i in emit_at:
                logp += lp[t, u, y[u]]
                u += 1
            else:
                logp += lp[t, u, BLANK]
                t += 1
        logp += lp[T - 1, U, BLANK]
        total += math.exp(logp)
    return -math.log(total)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


@torch.no_grad()
def greedy_decode(
    prediction: PredictionNetwork,
    joint: JointNetwork,
    c: torch.Tensor,
    max_symbols_per_frame: int = 10,
) -> list[int]:
    """Frame-synchronous greedy search over encoder output c [T, D]."""
    dtype = c.dtype
    h, state = prediction.start(dtype)
    enc = joint.enc_proj(c)
    pred = joint.pred_proj(h)
    hyp: list[int] = []
    for t in range(c.shape[0]):
        for _ in range(max_symbols_per_frame):
            logits = joint.out(torch.tanh(enc[t] + pred))
            k = int(logits.argmax())
            if k == BLANK:
                break
            hyp.append(k)
            h, state = prediction.step(k, state)
            pred = joint.pred_proj(h)
    return hyp
