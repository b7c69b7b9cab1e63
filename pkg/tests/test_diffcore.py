import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, rel_err
from uncgate import diffcore as dc
from uncgate.errors import GraphCycle, InvalidTemperature, MissingCheckpoint, NonFiniteLoss, ShapeMismatch


def _check_grads(build, params, tol=1e-4):
    """``build(leaves) -> scalar Tensor``; compare backward() against central differences."""
    lv = dc.leaves(params)
    got = dc.backward(build(lv), lv)
    for name in params:
        def f(x, name=name):
            p = dict(params)
            p[name] = x
            return float(build(dc.leaves(p)).data[0, 0])
        assert rel_err(got[name], central_difference(f, params[name])) < tol, name


def test_mlp_gradients_relu_and_tanh():
    rng = np.random.default_rng(0)
    for act in ("relu", "tanh"):
        spec = dc.MlpSpec((4, 6, 5, 3), activation=act, seed=1)
        for _ in range(100 if act == "tanh" else 30):
            params = dc.init_mlp(spec)
            x = dc.Tensor(rng.normal(size=(5, 4)))
            y = rng.normal(size=(5, 3))
            _check_grads(lambda lv: dc.mse_loss(dc.mlp_forward(spec, lv, x), y), params)


def test_softmax_temperature_gradients():
    rng = np.random.default_rng(1)
    for _ in range(100):
        tau = rng.uniform(0.2, 2.0)
        params = {"z": rng.normal(size=(4, 2))}
        y = rng.dirichlet([1, 1], size=4)
        _check_grads(lambda lv: dc.mse_loss(dc.softmax_temperature(lv["z"], tau), y), params)


def test_elementwise_and_structural_op_gradients():
    rng = np.random.default_rng(2)
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(1, 4)), "c": rng.normal(size=(3, 2))}

    def build(lv):
        h = dc.tanh(lv["a"] * lv["b"] - lv["a"] * 0.5)
        h = dc.concat_cols([h, lv["c"]])
        h = dc.pad_cols(dc.slice_cols(h, 1, 5), 7)
        return dc.total(h * h) + dc.mean(dc.relu(h))

    _check_grads(build, params)


def test_custom_node_and_unreachable_gradients():
    x = dc.Tensor(np.ones((2, 2)), requires_grad=True)
    unused = dc.Tensor(np.ones((1, 3)), requires_grad=True)
    loss = dc.custom([x], 1.5, [np.full((2, 2), 0.25)])
    g = dc.backward(dc.scale(loss, 2.0), {"x": x, "unused": unused})
    assert np.array_equal(g["x"], np.full((2, 2), 0.5))
    assert np.array_equal(g["unused"], np.zeros((1, 3)))


def test_shared_subexpression_accumulates():
    x = dc.Tensor([[3.0]], requires_grad=True)
    y = x * x
    g = dc.backward(y + y, {"x": x})
    assert g["x"][0, 0] == 12.0


def test_cycle_detection():
    a = dc.Tensor([[1.0]], requires_grad=True)
    b = dc.scale(a, 2.0)
    c = dc.scale(b, 2.0)
    b.parents = (c,)
    with pytest.raises(GraphCycle):
        dc.backward(c, {"a": a})


def test_non_finite_loss():
    x = dc.Tensor([[np.inf]], requires_grad=True)
    with pytest.raises(NonFiniteLoss):
        dc.backward(dc.total(x), {"x": x})


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        dc.Tensor(np.zeros(3))
    with pytest.raises(ShapeMismatch):
        dc.mse_loss(dc.Tensor(np.zeros((2, 2))), np.zeros((2, 3)))
    with pytest.raises(ShapeMismatch):
        dc.mlp_forward(dc.MlpSpec((3, 2)), dc.leaves(dc.init_mlp(dc.MlpSpec((3, 2)))), dc.Tensor(np.zeros((1, 4))))


def test_softmax_known_value():
    w = dc.softmax_temperature(dc.Tensor([[1.0, 0.0]]), 0.6).data
    assert w[0, 0] == pytest.approx(1 / (1 + math.exp(-1 / 0.6)), abs=1e-12)
    assert w[0, 0] == pytest.approx(0.8411, abs=1e-4)


@pytest.mark.parametrize("tau", [0.0, -1.0, float("nan"), float("inf")])
def test_invalid_temperature(tau):
    with pytest.raises(InvalidTemperature):
        dc.softmax_temperature(dc.Tensor([[1.0, 0.0]]), tau)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.floats(0.05, 10.0))
def test_softmax_rows_sum_to_one(logits, tau):
    w = dc.softmax_temperature(dc.Tensor([logits]), tau).data
    assert abs(w.sum() - 1.0) < 1e-9 and np.all(w >= 0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 20), st.floats(0.01, 20), st.floats(0.05, 5.0), st.floats(0.05, 5.0))
def test_larger_temperature_flattens_weights(hi, gap, t1, t2):
    lo_t, hi_t = sorted((t1, t2))
    z = dc.Tensor([[hi, hi - gap]])
    assert dc.softmax_temperature(z, hi_t).data[0, 0] <= dc.softmax_temperature(z, lo_t).data[0, 0] + 1e-15


def test_zero_last_layer_gives_zero_output():
    spec = dc.MlpSpec((5, 8, 3), zero_last=True, seed=4)
    out = dc.mlp_forward(spec, dc.leaves(dc.init_mlp(spec)), dc.Tensor(np.random.default_rng(0).normal(size=(6, 5))))
    assert np.array_equal(out.data, np.zeros((6, 3)))


def test_dropout_is_identity_at_inference_and_scaled_in_training():
    x = dc.Tensor(np.ones((200, 50)))
    assert dc.dropout(x, 0.1, False, None) is x
    y = dc.dropout(x, 0.1, True, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.9}
    assert abs(y.mean() - 1.0) < 0.02


def test_adam_first_step_moves_by_lr_and_clip_caps_norm():
    params = {"w": np.array([[1.0, -2.0]])}
    grads = {"w": np.array([[30.0, -40.0]])}
    clipped = dc.clip_by_global_norm(grads, 3.0)
    assert dc.global_norm(clipped) == pytest.approx(3.0)
    new, state = dc.adam_step(params, grads, dc.AdamState(), lr=0.1, clip_norm=3.0)
    np.testing.assert_allclose(new["w"], [[0.9, -1.9]], atol=1e-8)
    assert state.t == 1
    assert params["w"][0, 0] == 1.0


def test_adam_fits_linear_regression():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]]) + 0.3
    spec = dc.MlpSpec((3, 1), seed=0)
    params, state = dc.init_mlp(spec), dc.AdamState()
    for _ in range(1500):
        lv = dc.leaves(params)
        loss = dc.mse_loss(dc.mlp_forward(spec, lv, dc.Tensor(x)), y)
        params, state = dc.adam_step(params, dc.backward(loss, lv), state, 0.02)
    assert float(loss.data[0, 0]) < 1e-6


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    params = dc.init_mlp(dc.MlpSpec((4, 3, 2), seed=9))
    a, b = tmp_path / "a.npz", tmp_path / "b.npz"
    dc.save_checkpoint(a, params, {"stage": "x", "epoch": 3})
    dc.save_checkpoint(b, dict(reversed(list(params.items()))), {"epoch": 3, "stage": "x"})
    assert a.read_bytes() == b.read_bytes()
    back, meta = dc.load_checkpoint(a)
    assert meta == {"stage": "x", "epoch": 3}
    assert all(np.array_equal(back[k], params[k]) for k in params)
    assert np.load(a)["W0"].shape == (4, 3)
    with pytest.raises(MissingCheckpoint):
        dc.load_checkpoint(tmp_path / "missing.npz")


def test_minibatches_cover_every_index_once():
    idx = np.concatenate(list(dc.iterate_minibatches(103, 32, np.random.default_rng(0))))
    assert sorted(idx.tolist()) == list(range(103))
