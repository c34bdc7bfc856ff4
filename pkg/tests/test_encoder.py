import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import central_difference, randomize_, relative_error, softmax_list
from transducer_ssl.encoder import (
    ConvFeatureEncoder,
    Encoder,
    EncoderConfig,
    TransformerBlock,
    downsample_length,
    relative_attention,
    relative_positions,
)
from transducer_ssl.masking import SpanMask, chunk_attention_mask

TOY = dict(conv_channels=(4, 8), num_layers=2, d_model=16, ffn_dim=32, num_heads=4, max_relative_distance=8)


def toy_encoder(seed=0, **kw):
    torch.manual_seed(seed)
    return Encoder(EncoderConfig(**(TOY | kw)))


# --------------------------------------------------------------------------- conv encoder


@pytest.mark.parametrize("T,expected", [(80, 10), (8, 1), (83, 10), (15, 1), (16, 2)])
def test_conv_output_length(T, expected):
    assert downsample_length(T) == math.floor(math.floor(T / 2) / 4) == expected
    conv = ConvFeatureEncoder(EncoderConfig(**TOY))
    assert conv(torch.randn(1, T, 80)).shape == (1, expected, 16)


def test_conv_rejects_short_input():
    conv = ConvFeatureEncoder(EncoderConfig(**TOY))
    with pytest.raises(ValueError, match="at least 8"):
        conv(torch.randn(1, 7, 80))


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(d_model=10, num_heads=4)
    assert EncoderConfig.full_scale().downsampling == 8


# --------------------------------------------------------------------------- attention


def test_uniform_weights_with_identical_keys():
    T, d = 5, 3
    q = torch.randn(T, d)
    k = torch.ones(T, d).mul(0.7)
    v = torch.randn(T, d)
    _, w = relative_attention(q, k, v, torch.zeros(T, T, d), torch.ones(T, T, dtype=torch.bool))
    torch.testing.assert_close(w, torch.full((T, T), 1 / T))


def test_identity_mask_returns_values():
    T, d = 4, 3
    q, k, v = torch.randn(3, T, d)
    out, w = relative_attention(q, k, v, torch.randn(T, T, d), torch.eye(T, dtype=torch.bool))
    assert torch.equal(out, v)
    assert torch.equal(w, torch.eye(T))


def test_three_frame_hand_oracle():
    q = [[1.0, 0.0], [0.5, -1.0], [0.0, 2.0]]
    k = [[0.2, 0.1], [-0.3, 0.4], [1.0, 1.0]]
    v = [[1.0, 2.0], [3.0, -1.0], [0.0, 0.5]]
    table = {-2: [0.1, 0.0], -1: [0.0, 0.3], 0: [0.2, 0.2], 1: [-0.1, 0.0], 2: [0.4, -0.2]}
    mask = [[1, 1, 0], [1, 1, 1], [0, 1, 1]]
    # direct evaluation, one row at a time
    expected_w = []
    for t in range(3):
        vis = [tau for tau in range(3) if mask[t][tau]]
        scores = [sum(q[t][i] * (k[tau][i] + table[tau - t][i]) for i in range(2)) for tau in vis]
        row = [0.0] * 3
        for tau, p in zip(vis, softmax_list(scores)):
            row[tau] = p
        expected_w.append(row)
    expected_out = [[sum(expected_w[t][s] * v[s][i] for s in range(3)) for i in range(2)] for t in range(3)]

    pos = torch.tensor([[table[tau - t] for tau in range(3)] for t in range(3)], dtype=torch.float64)
    out, w = relative_attention(
        torch.tensor(q, dtype=torch.float64),
        torch.tensor(k, dtype=torch.float64),
        torch.tensor(v, dtype=torch.float64),
        pos,
        torch.tensor(mask, dtype=torch.bool),
    )
    np.testing.assert_allclose(w.numpy(), expected_w, rtol=1e-12)
    np.testing.assert_allclose(out.numpy(), expected_out, rtol=1e-12)


def test_empty_row_rejected():
    T, d = 3, 2
    mask = torch.ones(T, T, dtype=torch.bool)
    mask[1] = False
    with pytest.raises(ValueError, match="no visible"):
        relative_attention(*torch.randn(3, T, d), torch.zeros(T, T, d), mask)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 5), st.integers(0, 3), st.integers(0, 2**16))
def test_weight_rows_are_distributions(T, chunk, left, seed):
    g = torch.Generator().manual_seed(seed)
    q, k, v = (3 * torch.randn(3, 2, T, 4, generator=g)).unbind(0)
    pos = torch.randn(T, T, 4, generator=g)
    mask = chunk_attention_mask(T, chunk, left)
    _, w = relative_attention(q, k, v, pos, mask)
    assert bool((w >= 0).all())
    torch.testing.assert_close(w.sum(-1), torch.ones(2, T), atol=1e-6, rtol=0)
    assert bool((w[:, ~mask] == 0).all())


def test_relative_embedding_shared_by_offset():
    idx = relative_positions(20, 5)
    for t in range(20):
        for tau in range(20):
            assert idx[t, tau] == max(-5, min(5, tau - t)) + 5
    attn = toy_encoder().layers[0].attn
    table = attn.rel_emb(relative_positions(20, attn.max_relative_distance))
    assert torch.equal(table[3, 7], table[10, 14])
    assert torch.equal(table[5, 2], table[17, 14])


def test_clamped_offsets_share_entries():
    enc = toy_encoder()
    attn = enc.layers[0].attn
    table = attn.rel_emb(relative_positions(30, attn.max_relative_distance))
    assert torch.equal(table[0, 20], table[0, 29])  # offsets 20 and 29 both clamp to +8
    assert torch.equal(table[25, 0], table[29, 1])  # offsets -25 and -28 clamp to -8
    assert not torch.equal(table[0, 7], table[0, 8])


# --------------------------------------------------------------------------- transformer block


def test_zero_init_block_is_identity():
    torch.manual_seed(0)
    block = TransformerBlock(16, 4, 32, 8)
    x = torch.randn(2, 7, 16)
    assert torch.equal(block(x, torch.ones(7, 7, dtype=torch.bool)), x)


@pytest.mark.parametrize("T", [1, 5, 13])
def test_block_shape_and_determinism(T):
    block = randomize_(TransformerBlock(16, 4, 32, 8), seed=T)
    x = torch.randn(3, T, 16)
    mask = chunk_attention_mask(T, 2, 1)
    a, b = block(x, mask), block(x, mask)
    assert a.shape == x.shape
    assert torch.equal(a, b)


# --------------------------------------------------------------------------- full encoder


def test_encode_80_frames_gives_10_rows():
    out = toy_encoder()(torch.randn(1, 80, 80))
    assert out.context.shape == (1, 10, 16)
    assert out.latent.shape == (1, 10, 16)
    assert out.lengths.tolist() == [10]
    assert bool(torch.isfinite(out.context).all())


def test_span_mask_changes_only_through_mask_vector():
    enc = randomize_(toy_encoder(), seed=3)
    feats = torch.randn(1, 80, 80)
    plain = enc(feats)
    masked = enc(feats, span_masks=[SpanMask(np.array([2, 3]), 10)])
    assert torch.equal(plain.latent, masked.latent)
    assert not torch.equal(plain.context, masked.context)
    with pytest.raises(ValueError):
        enc(feats, span_masks=[SpanMask(np.array([2]), 9)])


def test_padding_does_not_leak_into_shorter_utterance():
    enc = randomize_(toy_encoder(), seed=4)
    short = torch.randn(1, 40, 80)
    alone = enc(short).context
    padded = torch.cat([short, 5 * torch.randn(1, 24, 80)], dim=1)
    batch = torch.cat([padded, torch.randn(1, 64, 80)])
    out = enc(batch, torch.tensor([40, 64])).context
    torch.testing.assert_close(out[0, :5], alone[0], atol=1e-5, rtol=1e-5)


def streaming_causality_trial(enc, rng, chunk=4, left=1):
    """Perturb every input frame past frame t's chunk.

    Returns the largest change of c_t under the streaming mask and under the full mask.
    """
    T_out = int(rng.integers(chunk + 1, 16))
    feats = torch.from_numpy(rng.standard_normal((1, 8 * T_out, 80))).float()
    t = int(rng.integers(0, (T_out - 1) // chunk * chunk))
    boundary = 8 * (t // chunk + 1) * chunk  # first input frame feeding an invisible latent frame
    pert = feats.clone()
    pert[:, boundary:] += torch.from_numpy(rng.standard_normal((1, 8 * T_out - boundary, 80))).float()
    with torch.no_grad():
        stream = (enc(pert, chunk_size=chunk, left_chunks=left).context - enc(feats, chunk_size=chunk, left_chunks=left).context)
        full = enc(pert).context - enc(feats).context
    return float(stream[0, t].abs().max()), float(full[0, t].abs().max())


def test_streaming_causality():
    enc = randomize_(toy_encoder(), seed=5)
    rng = np.random.default_rng(0)
    for _ in range(20):
        stream_delta, full_delta = streaming_causality_trial(enc, rng)
        assert stream_delta == 0.0
        assert full_delta > 0.0


def test_encoder_gradients_match_finite_differences():
    torch.manual_seed(0)
    cfg = EncoderConfig(conv_channels=(3, 3), num_layers=1, d_model=8, ffn_dim=8, num_heads=2, max_relative_distance=4)
    enc = randomize_(Encoder(cfg), seed=1).double()
    feats = torch.randn(1, 24, 80, dtype=torch.float64)
    w = torch.randn(1, 3, 8, dtype=torch.float64)

    def loss():
        return (enc(feats, chunk_size=2, left_chunks=1).context * w).sum()

    enc.zero_grad()
    loss().backward()
    for name, p in enc.named_parameters():
        fd = central_difference(loss, p)
        assert relative_error(fd, p.grad) <= 1e-4, name
