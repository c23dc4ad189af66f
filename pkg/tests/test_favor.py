import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viewgen import favor as F
from viewgen.tensor import Tensor, grad_check


def _qkv(rng, s, d, lead=()):
    return [rng.normal(size=lead + (s, d)) for _ in range(3)]


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def dense_mask_oracle(q, k, v):
    """Per-row loop over the explicit lower-triangular weight matrix."""
    s, d = q.shape
    out = np.zeros_like(v)
    for i in range(s):
        scores = np.array([q[i] @ k[j] / math.sqrt(d) if j <= i else -np.inf for j in range(s)])
        w = np.exp(scores - scores.max())
        out[i] = (w / w.sum()) @ v
    return out


# -- exact attention ---------------------------------------------------------------

def test_exact_single_token_returns_value():
    v = np.array([[0.3, -1.2, 4.0]])
    out = F.exact_causal_attention(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), Tensor(v))
    np.testing.assert_array_equal(out.data, v)


def test_exact_identical_keys_give_running_mean():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(6, 4))
    k = np.tile(rng.normal(size=(1, 4)), (6, 1))
    v = rng.normal(size=(6, 4))
    out = F.exact_causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    ref = np.cumsum(v, axis=0) / np.arange(1, 7)[:, None]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_exact_matches_dense_oracle():
    rng = np.random.default_rng(1)
    q, k, v = _qkv(rng, 8, 4)
    out = F.exact_causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, dense_mask_oracle(q, k, v), rtol=0, atol=1e-12)


def test_causal_mask_allows_diagonal_and_past():
    m = F.causal_mask(3)
    assert np.all(m[np.tril_indices(3)] == 0)
    assert np.all(np.isneginf(m[np.triu_indices(3, k=1)]))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_exact_rows_are_convex_combinations(s, d, seed):
    rng = np.random.default_rng(seed)
    q, k, v = _qkv(rng, s, d)
    scores = q @ k.T / math.sqrt(d) + F.causal_mask(s)
    w = np.exp(scores - scores.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    out = F.exact_causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    for i in range(s):
        lo, hi = v[:i + 1].min(axis=0), v[:i + 1].max(axis=0)
        assert np.all(out[i] >= lo - 1e-12) and np.all(out[i] <= hi + 1e-12)


# -- random features -------------------------------------------------------------------

def test_full_block_is_orthogonal():
    om = F.draw_orthogonal_features(4, 4, seed=3).omega
    gram = om @ om.T
    off = gram - np.diag(np.diag(gram))
    assert np.abs(off).max() < 1e-10


def test_block_structure_d2_r5():
    om = F.draw_orthogonal_features(2, 5, seed=4).omega
    assert om.shape == (5, 2)
    for a, b in ((0, 1), (2, 3)):
        assert abs(om[a] @ om[b]) < 1e-10
    # rows from different blocks are generically not orthogonal
    assert abs(om[0] @ om[2]) > 1e-6


def test_feature_draw_is_deterministic():
    a = F.draw_orthogonal_features(8, 40, seed=11)
    b = F.draw_orthogonal_features(8, 40, seed=11)
    assert a.omega.tobytes() == b.omega.tobytes()
    c = F.draw_orthogonal_features(8, 40, seed=12)
    assert not np.array_equal(a.omega, c.omega)


def test_row_norms_follow_chi_distribution():
    d = 16
    om = F.draw_orthogonal_features(d, 4096, seed=5).omega
    sq = (om ** 2).sum(axis=1)
    # squared chi_d has mean d and variance 2d
    assert abs(sq.mean() - d) < 4 * math.sqrt(2 * d / len(sq))


def test_rank_deficient_block_is_redrawn():
    assert F._gram_schmidt(np.array([[1.0, 2.0], [2.0, 4.0]])) is None


def test_default_feature_count():
    assert F.default_feature_count(16) == 2 * 16 * math.ceil(math.log(16))
    assert all(F.default_feature_count(d) >= d for d in range(1, 40))


def test_feature_map_zero_vector_gives_equal_positive_features():
    rf = F.draw_orthogonal_features(4, 12, seed=0)
    phi, c = F.feature_map(Tensor(np.zeros((1, 4))), rf)
    np.testing.assert_allclose(phi.data, np.exp(-c[0]) / math.sqrt(12))
    assert np.all(phi.data > 0)


def test_feature_map_rejects_bad_input():
    rf = F.draw_orthogonal_features(4, 8, seed=0)
    with pytest.raises(ValueError):
        F.feature_map(Tensor(np.zeros((2, 3))), rf)
    with pytest.raises(FloatingPointError):
        F.feature_map(Tensor(np.array([[np.nan, 0, 0, 0]])), rf)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 30.0))
def test_feature_map_positive_even_for_large_inputs(seed, scale):
    rng = np.random.default_rng(seed)
    rf = F.draw_orthogonal_features(6, 20, seed=seed % 1000)
    phi, _ = F.feature_map(Tensor(scale * rng.normal(size=(5, 6))), rf)
    assert np.all(phi.data > 0) and np.all(np.isfinite(phi.data))


def test_kernel_estimate_unbiased():
    """Mean over 64 feature draws of phi(q).phi(k) (stabilisers restored) ~ exp(q.k)."""
    rng = np.random.default_rng(7)
    d, r = 8, 256
    for _ in range(3):
        q = _unit_rows(rng.normal(size=(1, d))) * rng.uniform(0.2, 1.0)
        k = _unit_rows(rng.normal(size=(1, d))) * rng.uniform(0.2, 1.0)
        est = []
        for seed in range(64):
            rf = F.draw_orthogonal_features(d, r, seed=seed)
            pq, cq = F.feature_map(Tensor(q), rf)
            pk, ck = F.feature_map(Tensor(k), rf)
            est.append(float(pq.data[0] @ pk.data[0]) * math.exp(cq[0] + ck[0]))
        target = math.exp(float(q[0] @ k[0]))
        assert abs(np.mean(est) - target) / target < 0.05


# -- FAVOR+ ------------------------------------------------------------------------------------

def test_prefix_numerator_matches_brute_force():
    rng = np.random.default_rng(2)
    s, r, dv = 10, 7, 3
    pq, pk, v = rng.random((s, r)), rng.random((s, r)), rng.normal(size=(s, dv))
    ref = np.stack([pq[i] @ sum(np.outer(pk[j], v[j]) for j in range(i + 1)) for i in range(s)])
    np.testing.assert_allclose(F.prefix_sum_numerator(pq, pk, v), ref, rtol=0, atol=1e-10)


def test_scan_matches_normalised_prefix_sums():
    rng = np.random.default_rng(3)
    s, d = 9, 4
    q, k, v = _qkv(rng, s, d)
    rf = F.draw_orthogonal_features(d, 16, seed=1)
    pq, _ = F.feature_map(Tensor(q / math.sqrt(d)), rf)
    pk, ck = F.feature_map(Tensor(k), rf)
    true_k = pk.data * np.exp(ck)[:, None]
    num = F.prefix_sum_numerator(pq.data, true_k, v)
    den = np.einsum("ir,ir->i", pq.data, np.cumsum(true_k, axis=0))
    out = F.favor_causal_attention(Tensor(q), Tensor(k), Tensor(v), rf).data
    np.testing.assert_allclose(out, num / den[:, None], rtol=1e-10, atol=1e-12)


def test_favor_single_token_returns_value():
    rng = np.random.default_rng(4)
    q, k, v = _qkv(rng, 1, 4)
    rf = F.draw_orthogonal_features(4, 16, seed=0)
    out = F.favor_causal_attention(Tensor(q), Tensor(k), Tensor(v), rf).data
    np.testing.assert_allclose(out, v, rtol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_favor_exact_causality(s, seed):
    rng = np.random.default_rng(seed)
    d = 4
    q, k, v = _qkv(rng, s, d)
    rf = F.draw_orthogonal_features(d, 12, seed=seed % 97)
    base = F.favor_causal_attention(Tensor(q), Tensor(k), Tensor(v), rf).data
    j = int(rng.integers(s))
    q2, k2, v2 = q.copy(), k.copy(), v.copy()
    # large key perturbation also moves the running stabiliser maximum
    q2[j:] += 3.0 * rng.normal(size=(s - j, d))
    k2[j:] += 3.0 * rng.normal(size=(s - j, d))
    v2[j:] += rng.normal(size=(s - j, d))
    out = F.favor_causal_attention(Tensor(q2), Tensor(k2), Tensor(v2), rf).data
    assert out[:j].tobytes() == base[:j].tobytes()


def test_favor_batched_matches_per_item():
    rng = np.random.default_rng(5)
    q, k, v = _qkv(rng, 6, 4, lead=(2, 3))
    rf = F.draw_orthogonal_features(4, 16, seed=2)
    out = F.favor_causal_attention(Tensor(q), Tensor(k), Tensor(v), rf).data
    for a in range(2):
        for b in range(3):
            one = F.favor_causal_attention(Tensor(q[a, b]), Tensor(k[a, b]), Tensor(v[a, b]), rf).data
            np.testing.assert_allclose(out[a, b], one, rtol=1e-13)


def test_denominator_clamp_is_counted():
    rng = np.random.default_rng(6)
    q, k, v = _qkv(rng, 4, 4)
    rf = F.draw_orthogonal_features(4, 8, seed=0)
    stats = {}
    F.favor_causal_attention(Tensor(q), Tensor(k), Tensor(v), rf, eps=1e6, stats=stats)
    assert stats["clamped"] == 4
    stats = {}
    F.favor_causal_attention(Tensor(q), Tensor(k), Tensor(v), rf, stats=stats)
    assert stats["clamped"] == 0


def mean_relative_error(r, seeds=32, s=32, d=16):
    errs = []
    for seed in range(seeds):
        rng = np.random.default_rng([99, seed])
        q, k = _unit_rows(rng.normal(size=(s, d))), _unit_rows(rng.normal(size=(s, d)))
        v = rng.normal(size=(s, d))
        exact = F.exact_causal_attention(Tensor(q), Tensor(k), Tensor(v)).data
        rf = F.draw_orthogonal_features(d, r, seed=seed)
        approx = F.favor_causal_attention(Tensor(q), Tensor(k), Tensor(v), rf).data
        errs.append(np.linalg.norm(approx - exact) / np.linalg.norm(exact))
    return float(np.mean(errs))


def test_error_shrinks_with_feature_count():
    errs = [mean_relative_error(r, seeds=8) for r in (64, 256)]
    assert errs[1] < errs[0]


@pytest.mark.parametrize("eps_case", ["default", "clamped"])
def test_favor_gradients(eps_case):
    rng = np.random.default_rng(8)
    s, d = 5, 3
    q, k, v = _qkv(rng, s, d)
    rf = F.draw_orthogonal_features(d, 9, seed=4)
    eps = F.DEFAULT_EPS if eps_case == "default" else 0.05
    w = rng.normal(size=(s, d))

    def loss_of(which):
        arrs = {"q": q, "k": k, "v": v}

        def f(x):
            args = {n: (x if n == which else Tensor(a)) for n, a in arrs.items()}
            out = F.favor_causal_attention(args["q"], args["k"], args["v"], rf, eps=eps)
            return (out * w).sum()
        return f

    for name, arr in (("q", q), ("k", k), ("v", v)):
        x = Tensor(arr.copy(), requires_grad=True)
        assert grad_check(loss_of(name), x) < 1e-6
