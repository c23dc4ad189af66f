import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viewgen import model as Mo
from viewgen.bpe import train_bpe
from viewgen.sampling import (SamplerConfig, generate_report, generate_reports, generate_view,
                              generate_views, nucleus_distribution, top_p_sample)
from viewgen.sequence import Study
from viewgen.views import View


def test_hand_example():
    dist = nucleus_distribution(np.log([0.5, 0.3, 0.2]), p=0.6)
    np.testing.assert_allclose(dist, [0.625, 0.375, 0.0], rtol=0, atol=1e-15)


def test_tiny_p_is_argmax():
    rng = np.random.default_rng(0)
    for _ in range(50):
        logits = rng.normal(size=10)
        assert top_p_sample(logits, SamplerConfig(p=1e-9, temperature=1.0), rng) == int(np.argmax(logits))


def test_low_temperature_is_greedy():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(20, 7))
    ids = top_p_sample(logits, SamplerConfig(p=0.9, temperature=1e-6), rng)
    np.testing.assert_array_equal(ids, logits.argmax(axis=1))


def test_full_nucleus_matches_multinomial():
    rng = np.random.default_rng(2)
    logits = np.array([1.0, 0.2, -0.5, 2.0, 0.0])
    probs = np.exp(logits) / np.exp(logits).sum()
    n = 100_000
    draws = top_p_sample(np.tile(logits, (n, 1)), SamplerConfig(p=1.0, temperature=1.0), rng)
    freq = np.bincount(draws, minlength=5) / n
    sigma = np.sqrt(probs * (1 - probs) / n)
    assert np.all(np.abs(freq - probs) < 3 * sigma)


def test_ties_at_boundary_all_included():
    dist = nucleus_distribution(np.log([0.4, 0.2, 0.2, 0.2]), p=0.5)
    np.testing.assert_allclose(dist, [0.4, 0.2, 0.2, 0.2], atol=1e-15)


def test_masked_entries_never_sampled():
    logits = np.array([0.0, -np.inf, 0.0, -np.inf])
    dist = nucleus_distribution(logits, p=1.0)
    assert dist[1] == 0 and dist[3] == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=12), st.floats(0.01, 1.0), st.floats(0.1, 3.0))
def test_nucleus_is_minimal_descending_prefix(logits, p, temp):
    logits = np.array(logits)
    z = logits / temp
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    dist = nucleus_distribution(logits, p, temp)
    kept = dist > 0
    assert abs(dist.sum() - 1.0) < 1e-12
    # every excluded token is no more likely than every included one
    if (~kept).any():
        assert probs[~kept].max() <= probs[kept].min()
    # kept mass reaches p, and dropping the weakest kept level would fall short
    assert probs[kept].sum() >= p * (1 - 1e-9)
    weakest = probs[kept].min()
    assert probs[kept & (probs > weakest)].sum() < p
    np.testing.assert_allclose(dist[kept], probs[kept] / probs[kept].sum(), rtol=1e-9)


def test_config_validation():
    for bad in ({"p": 0.0}, {"p": 1.5}, {"temperature": 0.0}, {"max_len": -1}):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)


# -- generation on an untrained model ---------------------------------------------------------

@pytest.fixture(scope="module")
def tiny():
    vocab = train_bpe(["small disc upper left.", "large bar lower right."] * 3, 300)
    cfg = Mo.ModelConfig(text_vocab=vocab.size, codebook_size=8, grid=2, text_len=6, d_model=16,
                         n_layers=1, n_heads=2, init_std=0.5)
    return Mo.init_model(cfg), vocab


def _study(rng, views=(View.LATERAL,)):
    return Study([5, 6, 7], [(v, rng.integers(0, 8, (2, 2))) for v in views])


def test_generated_grid_structure(tiny):
    params, _ = tiny
    rng = np.random.default_rng(0)
    for i in range(5):
        grid = generate_view(params, _study(rng), View.AP, SamplerConfig(seed=i), index=i)
        assert grid.shape == (2, 2) and grid.min() >= 0 and grid.max() < 8


def test_generation_deterministic(tiny):
    params, _ = tiny
    study = _study(np.random.default_rng(1))
    a = generate_view(params, study, View.PA, SamplerConfig(seed=4), index=3)
    b = generate_view(params, study, View.PA, SamplerConfig(seed=4), index=3)
    np.testing.assert_array_equal(a, b)


def test_batching_does_not_change_samples(tiny):
    params, vocab = tiny
    rng = np.random.default_rng(2)
    studies = [_study(rng), _study(rng, (View.AP, View.LATERAL)), _study(rng)]
    together = generate_views(params, studies, View.PA, SamplerConfig(seed=1))
    alone = [generate_view(params, s, View.PA, SamplerConfig(seed=1), index=i) for i, s in enumerate(studies)]
    for a, b in zip(together, alone):
        np.testing.assert_array_equal(a, b)
    reps = generate_reports(params, studies, SamplerConfig(seed=1), vocab)
    single = [generate_report(params, s, SamplerConfig(seed=1), vocab, index=i) for i, s in enumerate(studies)]
    assert [r.ids for r in reps] == [r.ids for r in single]


def test_report_ids_are_words(tiny):
    params, vocab = tiny
    lay = params.config.layout
    rng = np.random.default_rng(3)
    for i in range(5):
        rep = generate_report(params, _study(rng), SamplerConfig(seed=i), vocab, index=i)
        assert len(rep.ids) <= lay.text_len
        assert all(0 <= t < lay.sos_r for t in rep.ids)
        assert rep.truncated == (len(rep.ids) == lay.text_len)


def test_immediate_eos_gives_empty_report(tiny):
    params, vocab = tiny
    lay = params.config.layout
    biased = Mo.ModelParams(params.config, {k: v for k, v in params.weights.items()}, params.features)
    bias = biased.weights["head_text.b"]
    saved = bias.data.copy()
    try:
        bias.data = np.zeros_like(saved)
        bias.data[lay.eos_r] = 1e3
        rep = generate_report(biased, _study(np.random.default_rng(4)), SamplerConfig(), vocab)
    finally:
        bias.data = saved
    assert rep.text == "" and rep.ids == [] and not rep.truncated
