import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vilocal.errors import ConfigError, ValidationError
from vilocal.objectives import (
    ContrastiveConfig,
    FocalConfig,
    contrastive_from_similarities,
    contrastive_loss,
    downsample_mask,
    focal_loss,
    sample_pixel_embeddings,
)


# ---------------------------------------------------------------- oracles

def scalar_contrastive(vectors, labels, tau, normalize=True, infonce=False):
    """Mean over anchors of -log(mean_pos exp(q.k/tau) / sum_neg exp(q.k/tau)), pure Python."""
    vecs = [list(map(float, v)) for v in vectors]
    if normalize:
        vecs = [[x / math.sqrt(sum(y * y for y in v)) for x in v] for v in vecs]
    dot = lambda a, b: sum(x * y for x, y in zip(a, b))  # noqa: E731
    total, n = 0.0, 0
    for i, q in enumerate(vecs):
        pos = [math.exp(dot(q, vecs[j]) / tau) for j in range(len(vecs)) if j != i and labels[j] == labels[i]]
        neg = [math.exp(dot(q, vecs[j]) / tau) for j in range(len(vecs)) if labels[j] != labels[i]]
        if not pos or not neg:
            continue
        num = sum(pos) / len(pos)
        den = sum(neg) + (num if infonce else 0.0)
        total += -math.log(num / den)
        n += 1
    return total / n


def scalar_focal(G, M, alpha, gamma, eps=1e-7):
    total = 0.0
    for g, m in zip(np.ravel(G), np.ravel(M)):
        m = min(max(float(m), eps), 1 - eps)
        total -= alpha * (1 - m) ** gamma * g * math.log(m) + (1 - alpha) * m**gamma * (1 - g) * math.log(1 - m)
    return total / np.size(G)


def block_count_oracle(mask, f):
    h, w = mask.shape[0] // f, mask.shape[1] // f
    out = np.zeros((h, w), np.uint8)
    for i in range(h):
        for j in range(w):
            ones = sum(int(mask[i * f + a, j * f + b] > 0) for a in range(f) for b in range(f))
            out[i, j] = 1 if 2 * ones >= f * f else 0
    return out


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30))


def central_diff(f, x, h=1e-4):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


# ---------------------------------------------------------------- downsampling

def test_downsample_all_ones():
    assert np.all(downsample_mask(np.ones((8, 12)), 4) == 1)


def test_downsample_tie_goes_to_one():
    m = np.zeros((4, 4), np.uint8)
    m[:2] = 1
    assert downsample_mask(m, 4).tolist() == [[1]]
    m[1, 3] = 0
    assert downsample_mask(m, 4).tolist() == [[0]]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), density=st.floats(0, 1))
def test_downsample_matches_block_count(seed, density):
    m = (np.random.default_rng(seed).random((8, 8)) < density).astype(np.uint8)
    assert np.array_equal(downsample_mask(m, 4), block_count_oracle(m, 4))


def test_downsample_rejects_indivisible():
    with pytest.raises(ValidationError):
        downsample_mask(np.zeros((6, 8)), 4)


# ---------------------------------------------------------------- sampling

def test_sampling_skips_single_class():
    emb = torch.randn(4, 4, 8)
    batch = sample_pixel_embeddings(emb, np.zeros((4, 4)), ContrastiveConfig(), 0)
    assert batch.skip and batch.num_anchors == 0
    assert float(contrastive_loss(batch, 0.1)) == 0.0


def test_two_pixels_per_class_pair_enumeration():
    ds = np.array([[1, 0], [0, 1]])
    batch = sample_pixel_embeddings(torch.randn(2, 2, 8), ds, ContrastiveConfig(samples_per_class=2), 3)
    assert batch.num_anchors == 4
    for i in range(4):
        assert len(batch.positives[i]) == 1 and len(batch.negatives[i]) == 2
        assert batch.labels[batch.positives[i][0]] == batch.labels[i]
        assert batch.positives[i][0] != i
        assert all(batch.labels[j] != batch.labels[i] for j in batch.negatives[i])


def test_sampling_is_deterministic_and_bounded(rng):
    ds = (rng.random((16, 16)) < 0.3).astype(np.uint8)
    emb = torch.randn(16, 16, 8)
    cfg = ContrastiveConfig(samples_per_class=10)
    a = sample_pixel_embeddings(emb, ds, cfg, [1, 2])
    b = sample_pixel_embeddings(emb, ds, cfg, [1, 2])
    c = sample_pixel_embeddings(emb, ds, cfg, [1, 3])
    assert np.array_equal(a.pixel_index, b.pixel_index)
    assert not np.array_equal(a.pixel_index, c.pixel_index)
    assert (a.labels == 0).sum() == 10 and (a.labels == 1).sum() == 10
    assert len(set(a.pixel_index.tolist())) == 20


def test_sampling_normalizes():
    ds = np.array([[1, 0], [0, 1]])
    batch = sample_pixel_embeddings(5 * torch.randn(2, 2, 8), ds, ContrastiveConfig(), 0)
    np.testing.assert_allclose(batch.embeddings.norm(dim=1).numpy(), 1.0, atol=1e-6)


def test_single_anchor_class_still_has_negatives():
    ds = np.array([[1, 0], [0, 1]])
    cfg = ContrastiveConfig(anchor_classes=[0])
    batch = sample_pixel_embeddings(torch.randn(2, 2, 8), ds, cfg, 0)
    anchors = [i for i in range(len(batch.labels)) if len(batch.positives[i])]
    assert all(batch.labels[i] == 0 for i in anchors) and len(anchors) == 2


def test_misaligned_mask_rejected():
    with pytest.raises(ValidationError):
        sample_pixel_embeddings(torch.randn(4, 4, 8), np.zeros((2, 2)), ContrastiveConfig(), 0)


# ---------------------------------------------------------------- contrastive values

def test_equal_similarities_give_zero():
    assert abs(float(contrastive_from_similarities([0.3], [0.3], 0.1))) < 1e-12


def test_worked_value_minus_one():
    assert float(contrastive_from_similarities([1.0], [0.0], 1.0)) == pytest.approx(-1.0, abs=1e-12)


@pytest.mark.parametrize("n", [1, 2, 5, 17])
def test_equal_similarities_n_negatives_is_log_n(n):
    assert float(contrastive_from_similarities([0.2], [0.2] * n, 0.5)) == pytest.approx(math.log(n), abs=1e-12)


def test_infonce_variant_is_positive():
    v = float(contrastive_from_similarities([1.0], [0.0], 1.0, "infonce"))
    assert v == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)


@pytest.mark.parametrize("case", range(20))
@pytest.mark.parametrize("denominator", ["printed", "infonce"])
def test_contrastive_matches_scalar_oracle(case, denominator):
    r = np.random.default_rng(case)
    h, w, dim = 4, 4, int(r.integers(2, 9))
    emb = r.normal(size=(h, w, dim))
    ds = (r.random((h, w)) < r.uniform(0.2, 0.8)).astype(np.uint8)
    ds[0, 0], ds[-1, -1] = 0, 1
    tau = float(r.uniform(0.05, 2.0))
    cfg = ContrastiveConfig(temperature=tau, samples_per_class=int(r.integers(2, 9)), denominator=denominator)
    batch = sample_pixel_embeddings(torch.from_numpy(emb), ds, cfg, case)
    got = float(contrastive_loss(batch, tau, denominator))
    flat = emb.reshape(-1, dim)
    labels = ds.reshape(-1)[batch.pixel_index]
    want = scalar_contrastive(flat[batch.pixel_index], labels, tau, infonce=denominator == "infonce")
    assert abs(got - want) < 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(-5, 5), tau=st.floats(0.05, 3))
def test_shift_and_scale_invariance(seed, c, tau):
    r = np.random.default_rng(seed)
    pos, neg = r.uniform(-1, 1, 3), r.uniform(-1, 1, 4)
    base = float(contrastive_from_similarities(pos, neg, tau))
    assert float(contrastive_from_similarities(pos + c, neg + c, tau)) == pytest.approx(base, abs=1e-6)
    assert float(contrastive_from_similarities(pos / tau, neg / tau, 1.0)) == pytest.approx(base, abs=1e-6)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_nonpositive_temperature_rejected(tau):
    with pytest.raises(ConfigError):
        contrastive_from_similarities([1.0], [0.0], tau)
    with pytest.raises(ConfigError):
        ContrastiveConfig(temperature=tau).validate()


def test_contrastive_gradient_matches_finite_differences():
    r = np.random.default_rng(7)
    emb0 = r.normal(size=(2, 3, 8))
    ds = np.array([[1, 0, 0], [0, 1, 0]])
    cfg = ContrastiveConfig(temperature=0.5, samples_per_class=4)

    def loss_of(x):
        t = torch.from_numpy(x)
        return contrastive_loss(sample_pixel_embeddings(t, ds, cfg, 11), cfg.temperature)

    x = torch.from_numpy(emb0.copy()).requires_grad_(True)
    loss = contrastive_loss(sample_pixel_embeddings(x, ds, cfg, 11), cfg.temperature)
    loss.backward()
    numeric = central_diff(lambda v: float(loss_of(v)), emb0, 1e-4)
    assert rel_err(x.grad.numpy(), numeric) <= 1e-4


# ---------------------------------------------------------------- focal

def test_focal_worked_values():
    assert float(focal_loss([[1]], [[0.5]])) == pytest.approx(0.043322, abs=1e-6)
    assert float(focal_loss([[0]], [[0.5]])) == pytest.approx(0.129965, abs=1e-6)
    assert float(focal_loss([[1]], [[1 - 1e-7]])) < 1e-6


@pytest.mark.parametrize("case", range(20))
def test_focal_matches_scalar_oracle(case):
    r = np.random.default_rng(100 + case)
    shape = tuple(r.integers(1, 6, 2))
    G = (r.random(shape) < 0.4).astype(np.float64)
    M = r.random(shape)
    alpha, gamma = float(r.uniform(0.05, 0.95)), float(r.uniform(0, 4))
    got = float(focal_loss(G, M, FocalConfig(alpha, gamma)))
    assert abs(got - scalar_focal(G, M, alpha, gamma)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_focal_reduces_to_half_bce(seed):
    r = np.random.default_rng(seed)
    G = (r.random((4, 4)) < 0.5).astype(np.float64)
    M = r.uniform(0.01, 0.99, (4, 4))
    bce = -np.mean(G * np.log(M) + (1 - G) * np.log(1 - M))
    assert float(focal_loss(G, M, FocalConfig(0.5, 0.0))) == pytest.approx(0.5 * bce, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_focal_nonnegative(seed):
    r = np.random.default_rng(seed)
    G = (r.random((3, 5)) < 0.5).astype(np.float64)
    assert float(focal_loss(G, r.random((3, 5)))) >= 0


def test_focal_zero_at_clamp_boundaries():
    G = np.array([[1, 0], [0, 1]], np.float64)
    assert float(focal_loss(G, G)) < 1e-12


def test_focal_gradient_matches_finite_differences():
    r = np.random.default_rng(3)
    G = (r.random((4, 4)) < 0.5).astype(np.float64)
    M0 = r.uniform(0.05, 0.95, (4, 4))
    M = torch.from_numpy(M0.copy()).requires_grad_(True)
    focal_loss(G, M).backward()
    numeric = central_diff(lambda m: float(focal_loss(G, m)), M0, 1e-4)
    assert rel_err(M.grad.numpy(), numeric) <= 1e-4


def test_focal_shape_mismatch():
    with pytest.raises(ValidationError):
        focal_loss(np.zeros((2, 2)), np.full((2, 3), 0.5))


@pytest.mark.parametrize("alpha,gamma", [(0.0, 2.0), (1.0, 2.0), (0.5, -1.0)])
def test_focal_config_validation(alpha, gamma):
    with pytest.raises(ConfigError):
        FocalConfig(alpha, gamma).validate()
