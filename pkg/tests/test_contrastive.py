import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import central_difference, relative_error
from transducer_ssl.contrastive import (
    ContrastiveConfig,
    TargetProjection,
    contrastive_loss,
    cosine_similarity,
    sample_all_distractors,
    sample_distractors,
)
from transducer_ssl.masking import SpanMask


def full_mask(T):
    return SpanMask(np.arange(T), T)


# --------------------------------------------------------------------------- targets


def test_zero_projection_gives_zero_targets():
    proj = TargetProjection(6, 4)
    torch.nn.init.zeros_(proj.linear.weight)
    torch.nn.init.zeros_(proj.linear.bias)
    assert torch.equal(proj(torch.randn(9, 6)), torch.zeros(9, 4))


def test_identity_projection():
    proj = TargetProjection(5, 5)
    with torch.no_grad():
        proj.linear.weight.copy_(torch.eye(5))
        proj.linear.bias.zero_()
    x = torch.randn(7, 5)
    assert torch.equal(proj(x), x)


@pytest.mark.parametrize("T", [1, 2, 17])
def test_projection_shape(T):
    assert TargetProjection(8, 3)(torch.randn(2, T, 8)).shape == (2, T, 3)


def test_config_validation():
    with pytest.raises(ValueError):
        ContrastiveConfig(num_negatives=0)
    with pytest.raises(ValueError):
        ContrastiveConfig(temperature=0.0)
    assert ContrastiveConfig().num_negatives == 100


# --------------------------------------------------------------------------- distractors


@pytest.mark.parametrize("t", [0, 1])
def test_two_frames_force_the_other(t):
    d = sample_distractors(t, 2, 50, np.random.default_rng(0))
    assert d.tolist() == [1 - t] * 50


def test_single_frame_has_no_distractors():
    with pytest.raises(ValueError):
        sample_distractors(0, 1, 5, np.random.default_rng(0))


def test_distractors_uniform_chi_square():
    n, T, t = 100_000, 50, 17
    draws = sample_distractors(t, T, n, np.random.default_rng(1))
    counts = np.bincount(draws, minlength=T)
    assert counts[t] == 0
    others = np.delete(counts, t)
    expected = n / 49
    chi2 = float(((others - expected) ** 2 / expected).sum())
    # 48 degrees of freedom: the 0.999 quantile is about 84.0
    assert chi2 < 84.0


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 40), st.integers(1, 30), st.integers(0, 2**32 - 1), st.data())
def test_own_index_never_drawn(T, k, seed, data):
    t = data.draw(st.integers(0, T - 1))
    d = sample_distractors(t, T, k, np.random.default_rng(seed))
    assert d.shape == (k,)
    assert np.all((d >= 0) & (d < T) & (d != t))


def test_masked_only_pool():
    mask = SpanMask(np.array([3, 4, 5]), 10)
    d = sample_all_distractors(mask, 20, np.random.default_rng(0), masked_only=True)
    assert d.shape == (3, 20)
    for row, t in zip(d, mask.indices):
        assert set(row.tolist()) <= {3, 4, 5} - {t}


# --------------------------------------------------------------------------- loss


def test_ties_give_log_k_plus_one():
    T, K = 12, 100
    c = torch.randn(T, 8)
    q = torch.ones(T, 8)
    mask = SpanMask(np.array([1, 2, 3, 7]), T)
    d = sample_all_distractors(mask, K, np.random.default_rng(0))
    loss = contrastive_loss(c, q, mask, d)
    assert abs(math.log(101) - 4.6151) < 1e-4
    assert abs(float(loss) - 4 * math.log(K + 1)) < 1e-5


def test_saturation_drives_loss_to_zero():
    T, K = 6, 5
    q = torch.zeros(T, 2, dtype=torch.float64)
    q[:, 0] = 1.0
    q[0] = torch.tensor([-1.0, 0.0])
    c = torch.zeros(T, 2, dtype=torch.float64)
    c[0] = torch.tensor([-1.0, 0.0])
    mask = SpanMask(np.array([0]), T)
    d = sample_all_distractors(mask, K, np.random.default_rng(0))
    # cosine is bounded, so saturation needs a small temperature
    losses = [float(contrastive_loss(c, q, mask, d, temperature=tau)) for tau in (1.0, 0.1, 0.01)]
    assert losses[0] > losses[1] > losses[2] >= 0.0
    assert losses[2] < 1e-80


def _oracle(c, q, masked, distractors, tau=1.0):
    """Direct evaluation of the InfoNCE sum with plain Python floats."""

    def cos(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))

    total = 0.0
    for t, row in zip(masked, distractors):
        num = math.exp(cos(c[t], q[t]) / tau)
        den = num + sum(math.exp(cos(c[t], q[j]) / tau) for j in row)
        total -= math.log(num / den)
    return total


def test_four_frame_hand_oracle():
    c = [[1.0, 0.5, -0.2], [0.3, -1.0, 0.8], [-0.6, 0.1, 0.9], [0.2, 0.2, 0.2]]
    q = [[0.9, 0.4, 0.0], [-0.5, 1.0, 0.3], [0.1, -0.7, 1.1], [1.0, -1.0, 0.5]]
    masked = [1, 2]
    distractors = [[0, 3], [3, 3]]
    for tau in (1.0, 0.3):
        got = contrastive_loss(
            torch.tensor(c, dtype=torch.float64),
            torch.tensor(q, dtype=torch.float64),
            SpanMask(np.array(masked), 4),
            np.array(distractors),
            tau,
        )
        assert abs(float(got) - _oracle(c, q, masked, distractors, tau)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_loss_nonnegative_and_scale_invariant(T, K, seed):
    rng = np.random.default_rng(seed)
    c = torch.from_numpy(rng.standard_normal((T, 4)))
    q = torch.from_numpy(rng.standard_normal((T, 4)))
    mask = SpanMask(np.sort(rng.choice(T, size=int(rng.integers(1, T + 1)), replace=False)), T)
    d = sample_all_distractors(mask, K, rng)
    base = contrastive_loss(c, q, mask, d)
    assert float(base) >= 0
    for lam in (2.0, 0.25):
        assert float(contrastive_loss(lam * c, q, mask, d)) == float(base)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    T, K = 7, 4
    c = torch.from_numpy(rng.standard_normal((T, 5))).requires_grad_()
    q = torch.from_numpy(rng.standard_normal((T, 5))).requires_grad_()
    mask = SpanMask(np.array([1, 2, 5]), T)
    d = sample_all_distractors(mask, K, rng)

    def loss():
        return contrastive_loss(c, q, mask, d, temperature=0.5)

    loss().backward()
    assert relative_error(central_difference(loss, c), c.grad) <= 1e-4
    assert relative_error(central_difference(loss, q), q.grad) <= 1e-4


def test_zero_norm_rejected():
    c = torch.randn(4, 3)
    q = torch.randn(4, 3)
    q[2] = 0
    mask = SpanMask(np.array([0]), 4)
    with pytest.raises(ValueError, match="zero-norm"):
        contrastive_loss(c, q, mask, np.array([[2, 1]]))
    with pytest.raises(ValueError):
        contrastive_loss(c, q, SpanMask(np.array([], dtype=np.int64), 4), np.zeros((0, 2), dtype=np.int64))


def test_cosine_eps_guard():
    assert float(cosine_similarity(torch.zeros(3), torch.ones(3))) == 0.0
