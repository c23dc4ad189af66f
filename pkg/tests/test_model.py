import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viewgen import model as Mo
from viewgen import tensor as T
from viewgen.bpe import train_bpe
from viewgen.evaluation import encode_studies
from viewgen.sequence import Study, pack_study
from viewgen.synth import generate_dataset
from viewgen.tensor import grad_check
from viewgen.views import View


def small_config(**kw):
    base = dict(text_vocab=40, codebook_size=8, grid=2, text_len=5, d_model=16, n_layers=2, n_heads=2)
    base.update(kw)
    return Mo.ModelConfig(**base)


def random_study(rng, lay):
    n = int(rng.integers(1, 4))
    views = [View.PA, View.LATERAL, View.AP][:n]
    words = rng.integers(0, lay.sos_r, size=int(rng.integers(1, lay.text_len + 1))).tolist()
    return Study(words, [(v, rng.integers(0, lay.codebook_size, (lay.grid, lay.grid))) for v in views])


# -- embeddings -------------------------------------------------------------------------------

def test_sinusoid_position_zero():
    row = Mo.sinusoid_table(3, 8)[0]
    np.testing.assert_array_equal(row, [0, 1, 0, 1, 0, 1, 0, 1])


def test_sinusoid_closed_form_t4_d8():
    table = Mo.sinusoid_table(4, 8)
    for pos in range(4):
        for i in range(4):
            angle = pos / 10000 ** (2 * i / 8)
            assert abs(table[pos, 2 * i] - np.sin(angle)) < 1e-15
            assert abs(table[pos, 2 * i + 1] - np.cos(angle)) < 1e-15


def test_image_segment_matches_sum_oracle():
    params = Mo.init_model(small_config(init_std=1.0))
    lay, w = params.config.layout, {k: v.data for k, v in params.weights.items()}
    grid = np.array([[3, 0], [7, 3]])
    seg = np.concatenate([[lay.sos_view(View.AP)], lay.image_id(grid.ravel()), [lay.eos_view(View.AP)]])
    out = Mo.embed(params, seg[None]).data[0]
    local = seg - lay.text_vocab
    np.testing.assert_array_equal(out[0], w["f_VE"][local[0]])
    np.testing.assert_array_equal(out[-1], w["f_VE"][local[-1]])
    for cell in range(4):
        r, c = divmod(cell, 2)
        expect = w["f_VE"][grid.ravel()[cell]] + w["pos_row"][r] + w["pos_col"][c]
        np.testing.assert_allclose(out[1 + cell], expect, rtol=0, atol=1e-15)


def test_same_row_cells_differ_by_column_component():
    params = Mo.init_model(small_config(init_std=1.0))
    lay, w = params.config.layout, params.weights
    seg = np.concatenate([[lay.sos_view(View.PA)], lay.image_id([5, 5, 1, 1]), [lay.eos_view(View.PA)]])
    out = Mo.embed(params, seg[None]).data[0]
    np.testing.assert_allclose(out[2] - out[1], w["pos_col"].data[1] - w["pos_col"].data[0], atol=1e-15)


def test_text_positions_additive():
    params = Mo.init_model(small_config(init_std=1.0))
    lay = params.config.layout
    toks = np.array([lay.sos_r, 9, 9, 9, lay.eos_r])
    out = Mo.embed(params, toks[None]).data[0]
    table = Mo.sinusoid_table(lay.text_segment, 16)
    np.testing.assert_allclose(out[3] - out[1], table[3] - table[1], atol=1e-14)


def test_zero_tables_give_pure_position():
    params = Mo.init_model(small_config())
    for name in ("f_VE", "f_WE"):
        params.weights[name].data[:] = 0.0
    lay = params.config.layout
    toks = np.concatenate([[lay.sos_r, 1, lay.eos_r], [lay.sos_view(View.AP)], lay.image_id([0, 1, 2, 3])])
    out = Mo.embed(params, toks[None]).data[0]
    np.testing.assert_array_equal(out[:3], Mo.sinusoid_table(3, 16))
    np.testing.assert_array_equal(out[3], 0.0)
    np.testing.assert_array_equal(out[4], params.weights["pos_row"].data[0] + params.weights["pos_col"].data[0])


def test_embed_rejects_out_of_range_ids():
    params = Mo.init_model(small_config())
    with pytest.raises(IndexError):
        Mo.embed(params, np.array([[params.config.layout.joint_vocab]]))


# -- forward ------------------------------------------------------------------------------------

def test_full_model_causality_bitwise():
    params = Mo.init_model(small_config(init_std=0.3))
    lay = params.config.layout
    rng = np.random.default_rng(0)
    for _ in range(20):
        seq = pack_study(random_study(rng, lay), lay, rng)
        base = Mo.forward(params, seq.tokens[None])
        j = int(rng.integers(1, len(seq)))
        bumped = seq.tokens.copy()
        if lay.is_code(bumped[j:j + 1])[0]:
            bumped[j] = lay.image_id((bumped[j] - lay.text_vocab + 1) % lay.codebook_size)
        elif bumped[j] < lay.sos_r:
            bumped[j] = (bumped[j] + 1) % lay.sos_r
        else:
            continue
        other = Mo.forward(params, bumped[None])
        assert np.array_equal(base.text.data[0, :j], other.text.data[0, :j])
        assert np.array_equal(base.image.data[0, :j], other.image.data[0, :j])


def test_forward_deterministic():
    params = Mo.init_model(small_config())
    toks = pack_study(random_study(np.random.default_rng(1), params.config.layout), params.config.layout,
                      np.random.default_rng(1)).tokens[None]
    a, b = Mo.forward(params, toks), Mo.forward(params, toks)
    assert np.array_equal(a.text.data, b.text.data) and np.array_equal(a.image.data, b.image.data)
    again = Mo.init_model(small_config())
    assert Mo.weights_digest(again) == Mo.weights_digest(params)


def test_exact_twin_model():
    cfg = dict(d_model=8, n_layers=1, n_heads=1, init_std=0.1)
    favor = Mo.init_model(small_config(attention="favor", n_features=2048, **cfg))
    exact = Mo.init_model(small_config(attention="exact", **cfg))
    assert Mo.weights_digest(favor) == Mo.weights_digest(exact)
    lay = favor.config.layout
    rng = np.random.default_rng(2)
    errs = []
    for _ in range(5):
        toks = pack_study(random_study(rng, lay), lay, rng).tokens[None]
        hf = Mo.hidden_states(favor, toks).data
        he = Mo.hidden_states(exact, toks).data
        errs.append(np.linalg.norm(hf - he) / np.linalg.norm(he))
    assert max(errs) < 1e-2


# -- loss --------------------------------------------------------------------------------------

def _logits(cfg, b, s, text=None, image=None):
    lay = cfg.layout
    t = T.Tensor(np.zeros((b, s, lay.text_vocab)) if text is None else text, requires_grad=True)
    i = T.Tensor(np.zeros((b, s, lay.image_vocab)) if image is None else image, requires_grad=True)
    return Mo.Logits(t, i)


def test_all_padding_loss_and_gradient_zero():
    params = Mo.init_model(small_config())
    lay = params.config.layout
    toks = np.full((1, lay.length), lay.img_pad)
    toks[0, : lay.text_segment] = lay.txt_pad
    mask = np.zeros_like(toks, dtype=bool)
    logits = Mo.forward(params, toks)
    loss = Mo.nll_loss(logits, toks, mask, lay)
    assert loss.item() == 0.0
    loss.backward()
    assert all(not np.any(p.grad) for p in params.parameters())


def test_uniform_logits_loss():
    cfg = small_config()
    lay = cfg.layout
    toks = np.array([[lay.sos_r, 3, 4, 5, lay.eos_r]])
    mask = np.array([[False, True, True, True, True]])
    loss = Mo.nll_loss(_logits(cfg, 1, 5), toks, mask, lay, reduction="sum")
    assert abs(loss.item() - 4 * np.log(lay.text_vocab)) < 1e-12
    mean = Mo.nll_loss(_logits(cfg, 1, 5), toks, mask, lay)
    assert abs(mean.item() - np.log(lay.text_vocab)) < 1e-12


def test_five_token_hand_oracle():
    cfg = small_config()
    lay = cfg.layout
    rng = np.random.default_rng(3)
    text, image = rng.normal(size=(1, 5, lay.text_vocab)), rng.normal(size=(1, 5, lay.image_vocab))
    toks = np.array([[lay.sos_view(View.AP), lay.image_id(2), lay.image_id(6), lay.eos_view(View.AP), lay.sos_r]])
    mask = np.array([[False, True, True, True, False]])
    loss = Mo.nll_loss(_logits(cfg, 1, 5, text, image), toks, mask, lay, reduction="sum").item()

    def nll(row, target):
        return np.log(np.sum(np.exp(row))) - row[target]

    expect = sum(nll(image[0, t], toks[0, t + 1] - lay.text_vocab) for t in range(3))
    assert abs(loss - expect) < 1e-12


def test_padding_embeddings_get_no_gradient():
    params = Mo.init_model(small_config())
    lay = params.config.layout
    seq = pack_study(Study([1, 2], [(View.AP, np.zeros((2, 2), int))]), lay, np.random.default_rng(0))
    loss = Mo.sequence_loss(params, [seq])
    loss.backward()
    assert not np.any(params.weights["f_VE"].grad[lay.img_pad - lay.text_vocab])
    assert not np.any(params.weights["f_WE"].grad[lay.txt_pad])


def test_full_model_grad_check():
    params = Mo.init_model(small_config(init_std=0.3))
    lay = params.config.layout
    rng = np.random.default_rng(4)
    seqs = [pack_study(random_study(rng, lay), lay, rng) for _ in range(2)]
    worst = 0.0
    for name, w in params.weights.items():
        idx = rng.choice(w.size, size=min(4, w.size), replace=False)
        worst = max(worst, grad_check(lambda _: Mo.sequence_loss(params, seqs), w, indices=idx))
    assert worst < 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_never_changes_supervised_count(seed):
    lay = small_config().layout
    rng = np.random.default_rng(seed)
    study = random_study(rng, lay)
    a, b = pack_study(study, lay, rng), pack_study(study, lay, rng)
    assert len(a) == len(b) == lay.length
    assert a.loss_mask.sum() == b.loss_mask.sum()


# -- training -----------------------------------------------------------------------------------

def test_zero_learning_rate_leaves_parameters_unchanged():
    params = Mo.init_model(small_config())
    before = Mo.weights_digest(params)
    rng = np.random.default_rng(5)
    studies = [random_study(rng, params.config.layout) for _ in range(4)]
    Mo.train(params, studies, Mo.TrainConfig(lr=0.0, min_lr=0.0, epochs=1, batch_size=4))
    assert Mo.weights_digest(params) == before


def test_divergence_raises():
    params = Mo.init_model(small_config())
    params.weights["f_WE"].data[:] = np.nan
    with pytest.raises(Mo.DivergenceError):
        Mo.train(params, [random_study(np.random.default_rng(0), params.config.layout)],
                 Mo.TrainConfig(epochs=1))


def test_checkpoint_round_trip(tmp_path):
    params = Mo.init_model(small_config(attention="exact", seed=3))
    path = tmp_path / "model.bin"
    Mo.save_model(params, path)
    back = Mo.load_model(path)
    assert back.config == params.config
    assert Mo.weights_digest(back) == Mo.weights_digest(params)
    for a, b in zip(back.features, params.features):
        np.testing.assert_array_equal(a.omega, b.omega)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError):
        Mo.load_model(path)


def test_desk_training_nll_decreases(overfit_codec):
    data = generate_dataset(200, seed=5, omission_prob=0.3)
    vocab = train_bpe([s.report for s in data], 512)
    studies = encode_studies(data, overfit_codec, vocab)
    params = Mo.init_model(Mo.ModelConfig(text_vocab=vocab.size, codebook_size=32, grid=4, text_len=30))
    Mo.train(params, studies, Mo.TrainConfig(epochs=20))
    nll = [r["nll"] for r in params.history]
    assert len(nll) == 20
    assert all(b <= a + 1e-4 for a, b in zip(nll, nll[1:])), nll
