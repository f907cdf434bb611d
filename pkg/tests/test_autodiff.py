import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sodade import autodiff as ad
from sodade.autodiff import Adam, GraphError, Linear, Tensor, TrainingError, adam_step, grad_check, parameter


def test_square_and_product():
    x = parameter(np.array(3.0))
    ad.mul(x, x).backward()
    assert x.grad == 6.0
    a, b = parameter(np.array(2.0)), parameter(np.array(5.0))
    ad.mul(a, b).backward()
    assert (a.grad, b.grad) == (5.0, 2.0)


def test_backward_errors():
    x = parameter(np.ones(3))
    with pytest.raises(GraphError):
        (x * x).backward()
    loss = ad.sum_all(x * x)
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_grads_accumulate_across_uses():
    x = parameter(np.array([1.0, 2.0]))
    ad.sum_all(x + x * x).backward()
    np.testing.assert_array_equal(x.grad, [3.0, 5.0])


def test_no_grad_builds_no_graph():
    x = parameter(np.ones(2))
    with ad.no_grad():
        y = x * x
    assert not y.requires_grad


def _mlp_loss(params, data):
    x, idx, tgt, mask, drop_seed = data
    emb = ad.embedding(params["emb"], idx)  # [4, 3]
    h = ad.concat([Tensor(x), emb], axis=-1)  # [4, 8]
    h = ad.gelu(ad.linear(h, params["w1"], params["b1"]))
    h = ad.layer_norm(h, params["g"], params["beta"])
    h = ad.relu(ad.linear(h, params["w2"], params["b2"]) - Tensor(np.full(6, 0.1)))
    h = ad.dropout(h, 0.2, np.random.default_rng(drop_seed), True)
    logits = ad.masked_fill_additive(ad.linear(h, params["w3"]), ~mask)
    p = ad.softmax(logits, axis=-1)
    return ad.masked_mse(p * p, tgt, mask)


def test_mlp_all_primitives_match_finite_differences():
    rng = np.random.default_rng(0)
    params = {
        "emb": parameter(rng.normal(size=(5, 3))), "w1": parameter(rng.normal(size=(8, 6))),
        "b1": parameter(rng.normal(size=6)), "g": parameter(1 + 0.1 * rng.normal(size=6)),
        "beta": parameter(rng.normal(size=6)), "w2": parameter(rng.normal(size=(6, 6))),
        "b2": parameter(rng.normal(size=6)), "w3": parameter(rng.normal(size=(6, 4))),
    }
    mask = rng.random((4, 4)) < 0.7
    mask[:, 0] = True
    data = (rng.normal(size=(4, 5)), rng.integers(0, 5, 4), rng.random((4, 4)), mask, 7)
    rep = grad_check(lambda: _mlp_loss(params, data), params, tolerance=1e-4)
    assert rep.passed, rep.failures[:5]
    assert rep.max_rel_error < 1e-4
    assert rep.n_checked == sum(p.data.size for p in params.values())


def test_single_attention_head_matches_finite_differences():
    rng = np.random.default_rng(1)
    d = 6
    params = {k: parameter(rng.normal(size=(d, d)) / math.sqrt(d)) for k in ("q", "k", "v")}
    x = Tensor(rng.normal(size=(2, 5, d)))
    blocked = np.triu(np.ones((5, 5), dtype=bool), 1)[None]
    w = rng.normal(size=(2, 5, d))

    def loss():
        q, k, v = (x @ params[n] for n in ("q", "k", "v"))
        s = ad.masked_fill_additive(ad.mul(q @ k.transpose(0, 2, 1), 1 / math.sqrt(d)), blocked)
        return ad.sum_all((ad.softmax(s) @ v) * Tensor(w))

    rep = grad_check(loss, params, tolerance=1e-4)
    assert rep.passed and rep.max_rel_error < 1e-4


def test_layer_norm_near_constant_input_is_a_warning():
    rng = np.random.default_rng(0)
    x = parameter(3.0 + 1e-6 * rng.normal(size=(2, 8)))
    g, b = parameter(np.ones(8)), parameter(np.zeros(8))
    w = Tensor(rng.normal(size=(2, 8)))
    rep = grad_check(lambda: ad.sum_all(ad.layer_norm(x, g, b, eps=0.0) * w), {"x": x})
    assert rep.passed
    assert rep.warnings


def test_grad_check_reports_wrong_gradient():
    x = parameter(np.array([1.0, 2.0]))

    def bad():
        # forward x^2, backward claims 3x
        return ad._make(np.sum(x.data ** 2), (x,), lambda g: (3 * x.data * g,))

    rep = grad_check(bad, {"x": x})
    assert not rep.passed and len(rep.failures) == 2


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_and_shift(x, c):
    p = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(ad.softmax(Tensor(x + c)).data, p, atol=1e-9)


@given(arrays(np.float64, (4, 16), elements=st.floats(-1e3, 1e3)))
def test_layer_norm_moments(x):
    x = x + np.linspace(0, 1, 16)  # avoid exactly constant rows
    y = ad.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.all(np.abs(y.mean(-1)) < 1e-6)
    var = x.var(-1)
    np.testing.assert_allclose(y.var(-1), var / (var + 1e-5), atol=1e-4)


def test_additive_mask_kills_weights():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 6)).astype(np.float32))
    blocked = rng.random((3, 6)) < 0.5
    blocked[:, 0] = False
    p = ad.softmax(ad.masked_fill_additive(x, blocked)).data
    assert np.all(p[blocked] < 1e-30)


def test_adam_zero_gradient_is_fixed_point():
    p = parameter(np.array([1.5, -2.0]))
    opt = Adam({"p": p})
    for _ in range(3):
        p.grad = np.zeros(2)
        opt.step()
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adam_first_step_magnitude():
    # hand evaluation: m = 0.1, v = 0.001, mhat = 1, vhat = 1 -> step = lr / (1 + eps)
    new, m, v = adam_step(np.array(0.0), np.array(1.0), np.array(0.0), np.array(0.0), 1, 1e-3)
    assert new == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_nan_gradient_names_parameter():
    p = parameter(np.ones(2))
    opt = Adam({"layer.weight": p})
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(TrainingError, match="layer.weight"):
        opt.step()


def test_adam_late_parameters_get_fresh_bias_correction():
    a, b = parameter(np.array(0.0)), parameter(np.array(0.0))
    opt = Adam({"a": a}, lr=1e-3)
    for _ in range(5):
        a.grad = np.array(1.0)
        opt.step()
    opt.add_params({"b": b}, lr_scale=1.0)
    a.grad, b.grad = np.array(1.0), np.array(1.0)
    opt.step()
    assert b.data == pytest.approx(-1e-3, rel=1e-6)


def test_training_trajectories_bit_identical():
    def run():
        rng = np.random.default_rng(3)
        lin = Linear(4, 2, rng, std=0.5, dtype=np.float32)
        opt = Adam(lin.named_parameters(), lr=1e-2)
        x, y = rng.normal(size=(8, 4)).astype(np.float32), rng.normal(size=(8, 2))
        for _ in range(20):
            opt.zero_grad()
            ad.mse(lin(Tensor(x)), y).backward()
            opt.step()
        return {k: v.data.copy() for k, v in lin.named_parameters().items()}

    a, b = run(), run()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_state_dict_strict():
    lin = Linear(3, 2, np.random.default_rng(0))
    state = lin.state_dict()
    with pytest.raises(KeyError):
        lin.load_state_dict({"weight": state["weight"]})
    bad = dict(state, weight=np.zeros((2, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        lin.load_state_dict(bad)
