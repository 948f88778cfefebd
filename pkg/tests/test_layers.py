import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import TINY_LM, random_batch, tiny_lm
from s2sp import tensor as tc
from s2sp.layers import (EVAL, FORGET_BIAS, Batch, DropoutSpec, EmbeddingLayer, LstmLayer,
                         OutOfVocabularyError, embed, lstm_step, unroll)
from s2sp.lm import lm_forward, lm_loss, normalize_output, output_rms, perplexity, rescale_output, train_lm
from s2sp.tensor import DimensionError, Rng, Tape, Tensor
from s2sp.training import TrainConfig, eval_batches


def test_lstm_init_ranges_and_forget_bias():
    layer = LstmLayer.init(4, 5, 3, Rng(0))
    assert layer.W_x.shape == (4, 20) and layer.W_h.shape == (3, 20) and layer.W_proj.shape == (5, 3)
    assert np.abs(layer.W_x.data).max() <= 0.05
    assert np.all(layer.b.data[5:10] == FORGET_BIAS)
    assert np.all(layer.b.data[:5] == 0) and np.all(layer.b.data[10:] == 0)


def test_embedding_lookup_and_oov():
    layer = EmbeddingLayer(Tensor(np.arange(12.0).reshape(6, 2)))
    assert embed(layer, [[5, 0]]).data.tolist() == [[[10, 11], [0, 1]]]
    with pytest.raises(OutOfVocabularyError):
        embed(layer, [[6]])


def test_lstm_step_rejects_bad_shapes():
    layer = LstmLayer.init(4, 5, 3, Rng(0))
    with pytest.raises(DimensionError):
        lstm_step(layer, Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 5))))


def test_lstm_step_by_hand():
    # One hidden unit, zero weights except the bias: every gate is a known constant.
    layer = LstmLayer(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), Tensor([0.0, 0.0, 0.5, 0.0]))
    h, c = lstm_step(layer, Tensor([[1.0]]), Tensor([[0.0]]), Tensor([[2.0]]))
    sig0 = 0.5
    c_ref = sig0 * 2.0 + sig0 * math.tanh(0.5)
    assert c.data[0, 0] == pytest.approx(c_ref, rel=1e-6)
    assert h.data[0, 0] == pytest.approx(sig0 * math.tanh(c_ref), rel=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_fused_sequence_matches_stepwise_cell(seed):
    gen = np.random.default_rng(seed)
    with tc.precision(np.float64):
        layer = LstmLayer.init(4, 5, 3, Rng(seed))
        for t in layer.params("l").values():
            t.data[...] = gen.normal(scale=0.5, size=t.shape)
        x = gen.normal(size=(3, 6, 4))
        mask = np.ones((3, 6), bool)
        mask[1, 4:] = False
        mask[2, 2:] = False
        (out,) = unroll([layer], Tensor(x), mask)
        h = Tensor(np.zeros((3, 3)))
        c = Tensor(np.zeros((3, 5)))
        for t in range(6):
            h_new, c_new = lstm_step(layer, Tensor(x[:, t]), h, c)
            m = mask[:, t:t + 1]
            h = Tensor(np.where(m, h_new.data, h.data))
            c = Tensor(np.where(m, c_new.data, c.data))
            assert np.allclose(out.data[:, t], h.data, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_fused_sequence_grads_vs_finite_differences(seed):
    gen = np.random.default_rng(seed)
    with tc.precision(np.float64):
        layer = LstmLayer.init(3, 4, 2, Rng(seed))
        for t in layer.params("l").values():
            t.data[...] = gen.normal(scale=0.5, size=t.shape)
        x = Tensor(gen.normal(size=(2, 4, 3)), requires_grad=True)
        mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], bool)
        w = gen.normal(size=(2, 4, 2))

        def f():
            (out,) = unroll([layer], x, mask)
            return tc.total(tc.mul(out, Tensor(w)))

        for t in [x, layer.W_x, layer.W_h, layer.b, layer.W_proj]:
            assert tc.finite_diff_check(f, t, 1e-6) < 1e-4


def test_dropout_eval_is_identity_and_train_is_unbiased():
    x = Tensor(np.ones((200, 50)))
    assert np.array_equal(DropoutSpec(0.5, train=False).apply(x, Rng(0)).data, x.data)
    y = DropoutSpec(0.5).apply(x, Rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    with pytest.raises(ValueError):
        DropoutSpec(1.0)


def test_dropout_is_deterministic_given_rng():
    x = Tensor(np.ones((4, 8)))
    a = DropoutSpec(0.3).apply(x, Rng(5)).data
    b = DropoutSpec(0.3).apply(x, Rng(5)).data
    assert np.array_equal(a, b)


def test_uniform_lm_perplexity_equals_vocab_size():
    lm = tiny_lm(V=8)
    lm.softmax.W.data[...] = 0
    lm.softmax.b.data[...] = 0
    batch = random_batch(np.random.default_rng(0), 5, 6, 8)
    assert perplexity(lm, [batch]) == pytest.approx(8.0, rel=1e-5)
    assert lm_loss(lm, batch).item() == pytest.approx(math.log(8), rel=1e-6)


def test_lm_is_causal():
    lm = tiny_lm(V=8)
    ids = np.array([[1, 4, 5, 6, 2]])
    a = lm_forward(lm, Batch(ids)).data
    ids2 = ids.copy()
    ids2[0, 3:] = [7, 7]
    b = lm_forward(lm, Batch(ids2)).data
    assert np.array_equal(a[0, :3], b[0, :3])
    assert not np.array_equal(a[0, 3], b[0, 3])


def test_lm_rejects_ids_beyond_vocab():
    with pytest.raises(DimensionError):
        lm_forward(tiny_lm(V=8), Batch(np.array([[1, 9]])))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_padding_does_not_change_lm_loss(seed):
    gen = np.random.default_rng(seed)
    lm = tiny_lm(seed % 7)
    batch = random_batch(gen, 3, 6, 8)
    padded = Batch(np.pad(batch.ids, ((0, 0), (0, 3))))
    assert lm_loss(lm, batch).item() == pytest.approx(lm_loss(lm, padded).item(), rel=1e-6)


def test_train_lm_learns_deterministic_sequence():
    # A corpus holding a single sentence is perfectly predictable after training.
    corpus = [[1, 4, 5, 6, 7, 2]] * 64
    cfg = TINY_LM.__class__(d_emb=8, hidden=16, proj=8, dropout=0.0,
                            train=TrainConfig(batch_size=16, max_steps=300, lr=2e-2, warm_steps=300,
                                              eval_every=50, patience=10))
    lm, log = train_lm(cfg, corpus, Rng(0), vocab_size=8)
    assert log[0]["valid_ppl"] > 5
    assert perplexity(lm, eval_batches(corpus[:4], 4)) < 1.1
    assert [r["step"] for r in log][:2] == [0, 50]
    assert set(log[0]) == {"step", "train_loss", "valid_ppl", "lr"}


def test_lm_gradients_flow_to_every_parameter():
    lm = tiny_lm()
    batch = random_batch(np.random.default_rng(1), 4, 6, 8)
    with Tape() as tape:
        loss = lm_loss(lm, batch, DropoutSpec(0.2), Rng(0))
    tape.backward(loss)
    for name, p in lm.params().items():
        assert p.grad is not None and np.any(p.grad != 0), name


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(-5, 5))
def test_power_of_two_rescaling_leaves_logits_bit_identical(seed, k):
    lm = tiny_lm(seed % 11)
    batch = random_batch(np.random.default_rng(seed), 3, 7, 8)
    before = lm_forward(lm, batch).data.copy()
    rms = output_rms(lm, [batch])
    rescale_output(lm, k)
    assert np.array_equal(lm_forward(lm, batch).data, before)
    assert output_rms(lm, [batch]) == pytest.approx(rms * 2.0 ** k, rel=1e-6)


def test_normalize_output_moves_rms_toward_target():
    lm = tiny_lm(2)
    batch = random_batch(np.random.default_rng(0), 4, 7, 8)
    k = normalize_output(lm, [batch], 0.25)
    assert k != 0
    assert 0.25 / math.sqrt(2) <= output_rms(lm, [batch]) <= 0.25 * math.sqrt(2)
