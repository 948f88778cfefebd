import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2sp import tensor as tc
from s2sp.optim import (AdamState, EarlyStopper, LrSchedule, adam_step, clip_global_norm, global_norm,
                        lr_at)
from s2sp.params import store_hash
from s2sp.tensor import NumericError, Rng, Tensor
from s2sp.training import TrainConfig, fit, minibatches


def test_clip_examples():
    g = {"a": np.array([1.2, 1.6])}
    assert clip_global_norm(g, 5.0) == 1.0 and g["a"].tolist() == pytest.approx([1.2, 1.6])
    g = {"a": np.array([3.0, 4.0])}
    assert clip_global_norm(g, 2.5) == 0.5
    assert g["a"].tolist() == [1.5, 2.0]
    with pytest.raises(NumericError):
        clip_global_norm({"a": np.array([np.inf])}, 1.0)
    with pytest.raises(ValueError):
        clip_global_norm(g, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10))
def test_clipped_norm_is_min_of_norm_and_threshold(seed, max_norm):
    gen = np.random.default_rng(seed)
    g = {"a": gen.normal(size=(3, 4)) * 3, "b": gen.normal(size=5)}
    raw = {k: v.copy() for k, v in g.items()}
    before = global_norm(g)
    clip_global_norm(g, max_norm)
    assert abs(global_norm(g) - min(before, max_norm)) < 1e-6
    if before <= max_norm:
        assert all(np.array_equal(g[k], raw[k]) for k in g)


def test_clipping_is_joint_not_per_tensor():
    joint = {"a": np.array([3.0, 0.0]), "b": np.array([0.0, 4.0])}
    clip_global_norm(joint, 1.0)
    separate = {"a": np.array([3.0, 0.0])}
    clip_global_norm(separate, 1.0)
    assert not np.allclose(joint["a"], separate["a"])


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.zeros(4), requires_grad=True)}
    g = {"w": np.array([0.3, -2.0, 1e-3, 5.0])}
    adam_step(p, g, AdamState(), lr=0.01)
    assert np.allclose(p["w"].data, -0.01 * np.sign(g["w"]), rtol=0.01)


def test_adam_zero_grad_leaves_params():
    p = {"w": Tensor([1.0, 2.0], requires_grad=True)}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2, np.float32)}, state, lr=0.1)
    assert p["w"].data.tolist() == [1.0, 2.0] and state.step == 1
    assert np.all(state.m["w"] == 0) and np.all(state.v["w"] == 0)


def test_adam_against_float64_reference():
    gen = np.random.default_rng(0)
    w = gen.normal(size=5)
    p = {"w": Tensor(w, requires_grad=True)}
    state = AdamState()
    m = v = np.zeros(5)
    for t in range(1, 6):
        g = gen.normal(size=5)
        adam_step(p, {"w": g.astype(np.float32)}, state, lr=0.05)
        g = g.astype(np.float32).astype(np.float64)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p["w"].data, w, rtol=1e-5, atol=1e-6)


def test_adam_is_invariant_to_partitioning():
    gen = np.random.default_rng(1)
    a, b = gen.normal(size=3), gen.normal(size=4)
    ga, gb = gen.normal(size=3), gen.normal(size=4)
    joint = {"a": Tensor(a, requires_grad=True), "b": Tensor(b, requires_grad=True)}
    adam_step(joint, {"a": ga, "b": gb}, AdamState(), 0.1)
    pa, pb = {"a": Tensor(a, requires_grad=True)}, {"b": Tensor(b, requires_grad=True)}
    adam_step(pa, {"a": ga}, AdamState(), 0.1)
    adam_step(pb, {"b": gb}, AdamState(), 0.1)
    assert np.array_equal(joint["a"].data, pa["a"].data) and np.array_equal(joint["b"].data, pb["b"].data)


def test_adam_is_stateful():
    # The same gradient moves a parameter differently depending on accumulated moments.
    fresh = {"w": Tensor([0.0], requires_grad=True)}
    adam_step(fresh, {"w": np.array([-1.0])}, AdamState(), 0.1)
    warm = {"w": Tensor([0.0], requires_grad=True)}
    s = AdamState()
    adam_step(warm, {"w": np.array([3.0])}, s, 0.1)
    before = warm["w"].data.copy()
    adam_step(warm, {"w": np.array([-1.0])}, s, 0.1)
    assert s.step == 2
    assert (warm["w"].data - before)[0] != pytest.approx(fresh["w"].data[0])


def test_schedule_reference_values():
    s = LrSchedule(5e-5, 0.8, 50_000, 400_000)
    assert lr_at(s, 0) == 5e-5 and lr_at(s, 399_999) == 5e-5
    assert lr_at(s, 400_000) == pytest.approx(4e-5, rel=1e-12)
    assert lr_at(s, 500_000) == pytest.approx(5e-5 * 0.8 ** 3, rel=1e-12)
    assert lr_at(s, 500_000) == pytest.approx(2.56e-5, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_schedule_is_non_increasing(a, b):
    s = LrSchedule(1e-3, 0.7, 1000, 5000)
    lo, hi = sorted((a, b))
    assert lr_at(s, lo) >= lr_at(s, hi)


def test_early_stopping_examples():
    st_ = EarlyStopper(patience=3)
    assert [st_.update(x, i) for i, x in enumerate([10, 11, 11, 11])] == ["continue"] * 3 + ["stop"]
    assert st_.best == 10 and st_.best_checkpoint == 0
    st_ = EarlyStopper(patience=1)
    assert all(st_.update(x) == "continue" for x in [5, 4, 3, 2, 1])
    with pytest.raises(NumericError):
        st_.update(math.nan)


def _quadratic_fit(seed):
    gen = np.random.default_rng(seed)
    target = gen.normal(size=4)
    w = Tensor(np.zeros(4), requires_grad=True)
    t = Tensor(target)

    def step_loss(step):
        d = tc.sub(w, t)
        return tc.total(tc.mul(d, d))

    def evaluate():
        return 1.0 + float(np.sum((w.data - target) ** 2))

    cfg = TrainConfig(max_steps=200, lr=0.05, warm_steps=100, decay_every=50, eval_every=20, patience=3)
    log = fit({"w": w}, step_loss, evaluate, cfg)
    return w, target, log


def test_fit_minimises_and_logs():
    w, target, log = _quadratic_fit(0)
    assert np.allclose(w.data, target, atol=0.05)
    assert log[0]["step"] == 0 and log[-1]["step"] == 200
    assert min(r["valid_ppl"] for r in log) == pytest.approx(1 + np.sum((w.data - target) ** 2), rel=1e-6)


def test_fit_is_deterministic():
    a, _, la = _quadratic_fit(3)
    b, _, lb = _quadratic_fit(3)
    assert store_hash({"w": a}) == store_hash({"w": b}) and la == lb


def test_minibatches_cover_each_epoch_once():
    items = list(range(10))
    stream = minibatches(items, 5, Rng(0))
    epoch = next(stream) + next(stream)
    assert sorted(epoch) == items
