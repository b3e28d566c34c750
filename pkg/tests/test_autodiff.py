"""Unit and gradient-oracle tests for the autodiff engine."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multicam3d import autodiff as ad
from multicam3d.errors import ContractError, DomainError, ShapeError


def leaf(arr):
    return ad.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# forward semantics


def test_matmul_identity():
    a = ad.Tensor(np.eye(2))
    b = ad.Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_dot_product():
    a = ad.Tensor([[1.0, 2.0]])
    b = ad.Tensor([[3.0], [4.0]])
    np.testing.assert_array_equal(ad.matmul(a, b).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_softmax_symmetry_and_overflow():
    out = ad.softmax(ad.Tensor([0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)
    out = ad.softmax(ad.Tensor([1000.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)
    assert np.all(np.isfinite(out.data))


def test_softmax_rows_sum_to_one_and_shift_invariance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 7))
    out = ad.softmax(ad.Tensor(x), axis=1)
    np.testing.assert_allclose(out.data.sum(axis=1), np.ones(5), atol=1e-12)
    shifted = ad.softmax(ad.Tensor(x + 3.25), axis=1)
    np.testing.assert_allclose(out.data, shifted.data, atol=1e-12)


def test_softmax_empty_axis_raises():
    with pytest.raises(ShapeError):
        ad.softmax(ad.Tensor(np.zeros((0,))), axis=0)


def test_hadamard_and_reduce_max_values():
    np.testing.assert_array_equal(
        ad.hadamard(ad.Tensor([2.0, 3.0]), ad.Tensor([4.0, 5.0])).data, [8.0, 15.0])
    np.testing.assert_array_equal(
        ad.reduce_max(ad.Tensor([[0.2], [0.6]]), axis=0).data, [0.6])


def test_bilinear_exact_at_integer_coords():
    rng = np.random.default_rng(1)
    m = ad.Tensor(rng.normal(size=(3, 4, 5)))
    out = ad.bilinear_sample(m, 1.0, 0.0)
    np.testing.assert_allclose(out.data, m.data[:, 0, 1], atol=0)


def test_bilinear_center_of_2x2():
    m = ad.Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
    out = ad.bilinear_sample(m, 0.5, 0.5)
    np.testing.assert_allclose(out.data, [1.5])


def test_bilinear_linear_along_axis():
    m = ad.Tensor(np.array([[[0.0, 2.0, 4.0], [0.0, 2.0, 4.0]]]))
    for u in (0.0, 0.25, 1.0, 1.75, 2.0):
        out = ad.bilinear_sample(m, u, 0.5)
        np.testing.assert_allclose(out.data, [2.0 * u], atol=1e-12)


def test_bilinear_out_of_bounds_raises():
    m = ad.Tensor(np.zeros((1, 3, 3)))
    with pytest.raises(DomainError):
        ad.bilinear_sample(m, -0.01, 1.0)
    with pytest.raises(DomainError):
        ad.bilinear_sample(m, 1.0, 2.01)


def test_bilinear_batch_matches_single():
    rng = np.random.default_rng(2)
    m = ad.Tensor(rng.normal(size=(4, 6, 5)))
    us = np.array([0.3, 2.9, 4.0, 1.0])
    vs = np.array([1.7, 0.0, 5.0, 2.5])
    batch = ad.bilinear_sample_batch(m, us, vs)
    for i in range(4):
        single = ad.bilinear_sample(m, float(us[i]), float(vs[i]))
        np.testing.assert_allclose(batch.data[:, i], single.data, atol=1e-14)


# ---------------------------------------------------------------------------
# backward basics


def test_backward_sum_gives_ones():
    p = leaf(np.arange(6.0).reshape(2, 3))
    with ad.Graph():
        loss = ad.reduce_sum(p)
        ad.backward(loss)
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_quadratic_gives_2p():
    p = leaf([1.0, -2.0, 0.5])
    with ad.Graph():
        loss = ad.reduce_sum(ad.hadamard(p, p))
        ad.backward(loss)
    np.testing.assert_allclose(p.grad, 2.0 * p.data)


def test_backward_accumulates_without_reset():
    p = leaf([1.0, 2.0])
    with ad.Graph():
        loss = ad.reduce_sum(p)
        ad.backward(loss)
        ad.backward(loss)
    np.testing.assert_array_equal(p.grad, [2.0, 2.0])


def test_backward_non_scalar_raises():
    p = leaf([1.0, 2.0])
    with ad.Graph():
        out = ad.scale(p, 2.0)
        with pytest.raises(ContractError):
            ad.backward(out)


def test_fanout_gradient_is_k_fold():
    p = leaf([1.0, 2.0, 3.0])
    with ad.Graph():
        loss = ad.reduce_sum(ad.add(ad.add(p, p), p))
        ad.backward(loss)
    np.testing.assert_array_equal(p.grad, [3.0, 3.0, 3.0])

    q = leaf([1.0, 2.0, 3.0])
    with ad.Graph():
        loss = ad.reduce_sum(ad.scale(q, 3.0))
        ad.backward(loss)
    np.testing.assert_array_equal(p.grad, q.grad)


def test_untracked_ops_do_not_build_tape():
    a = ad.Tensor([1.0, 2.0])
    with ad.Graph() as g:
        out = ad.add(a, a)
    assert out.node is None and g.nodes == []


def test_reduce_max_tie_routes_to_first_argmax():
    p = leaf([[2.0, 2.0, 1.0]])
    with ad.Graph():
        loss = ad.reduce_sum(ad.reduce_max(p, axis=1))
        ad.backward(loss)
    np.testing.assert_array_equal(p.grad, [[1.0, 0.0, 0.0]])


# ---------------------------------------------------------------------------
# finite-difference oracle per op


def test_grad_matmul_random():
    rng = np.random.default_rng(10)
    a = leaf(rng.normal(size=(4, 5)))
    b = leaf(rng.normal(size=(5, 3)))
    w = ad.Tensor(rng.normal(size=(4, 3)))
    err = ad.gradient_check(
        lambda: ad.reduce_sum(ad.hadamard(ad.matmul(a, b), w)), [a, b])
    assert err < 1e-6


def test_grad_softmax_random():
    rng = np.random.default_rng(11)
    x = leaf(rng.normal(size=6))
    w = ad.Tensor(rng.normal(size=6))
    err = ad.gradient_check(
        lambda: ad.reduce_sum(ad.hadamard(ad.softmax(x, axis=0), w)), [x])
    assert err < 1e-6


def test_grad_bilinear_map_and_coords():
    rng = np.random.default_rng(12)
    m = leaf(rng.normal(size=(3, 4, 4)))
    u = leaf(1.3)
    v = leaf(2.7)
    w = ad.Tensor(rng.normal(size=3))

    def f():
        return ad.reduce_sum(ad.hadamard(ad.bilinear_sample(m, u, v), w))

    err = ad.gradient_check(f, [m, u, v], h=1e-6)
    assert err < 1e-5


def test_grad_bilinear_batch_map():
    rng = np.random.default_rng(13)
    m = leaf(rng.normal(size=(2, 5, 6)))
    us = np.array([0.4, 3.3, 2.0])
    vs = np.array([1.1, 0.6, 3.9])
    w = ad.Tensor(rng.normal(size=(2, 3)))
    err = ad.gradient_check(
        lambda: ad.reduce_sum(ad.hadamard(ad.bilinear_sample_batch(m, us, vs), w)), [m])
    assert err < 1e-6


@pytest.mark.parametrize("name", [
    "add", "sub", "hadamard", "scale", "sigmoid", "relu", "exp", "log",
    "abs", "smooth_l1", "concat", "narrow", "index_select", "reduce_max",
    "reduce_mean", "reduce_sum", "reshape", "transpose", "avg_pool2d",
    "softmax_ax0", "col_scatter_add", "log_softmax",
])
def test_grad_elementwise_suite(name):
    rng = np.random.default_rng(abs(hash(name)) % (2 ** 31))
    a = leaf(rng.uniform(0.3, 2.0, size=(3, 4)))
    b = leaf(rng.uniform(0.3, 2.0, size=(3, 4)))
    w = rng.normal(size=(3, 4))

    def wt(arr):
        return ad.Tensor(arr)

    builders = {
        "add": lambda: ad.hadamard(ad.add(a, b), wt(w)),
        "sub": lambda: ad.hadamard(ad.sub(a, b), wt(w)),
        "hadamard": lambda: ad.hadamard(ad.hadamard(a, b), wt(w)),
        "scale": lambda: ad.hadamard(ad.scale(a, -1.7), wt(w)),
        "sigmoid": lambda: ad.hadamard(ad.sigmoid(a), wt(w)),
        "relu": lambda: ad.hadamard(ad.relu(ad.sub(a, b)), wt(w)),
        "exp": lambda: ad.hadamard(ad.exp(a), wt(w)),
        "log": lambda: ad.hadamard(ad.log(a), wt(w)),
        "abs": lambda: ad.hadamard(ad.absolute(ad.sub(a, b)), wt(w)),
        "smooth_l1": lambda: ad.hadamard(ad.smooth_l1(ad.sub(a, b)), wt(w)),
        "concat": lambda: ad.hadamard(
            ad.narrow(ad.concat([a, b], axis=0), 0, 2, 3), wt(w[:3])),
        "narrow": lambda: ad.hadamard(ad.narrow(a, 1, 1, 2), wt(w[:, :2])),
        "index_select": lambda: ad.hadamard(
            ad.index_select(a, 1, [3, 0, 0]), wt(w[:, :3])),
        "reduce_max": lambda: ad.hadamard(ad.reduce_max(a, axis=0), wt(w[0])),
        "reduce_mean": lambda: ad.hadamard(ad.reduce_mean(a, axis=1), wt(w[:, 0])),
        "reduce_sum": lambda: ad.hadamard(ad.reduce_sum(a, axis=1), wt(w[:, 0])),
        "reshape": lambda: ad.hadamard(ad.reshape(a, (4, 3)), wt(w.reshape(4, 3))),
        "transpose": lambda: ad.hadamard(ad.transpose(a), wt(w.T)),
        "avg_pool2d": lambda: ad.hadamard(
            ad.avg_pool2d(ad.reshape(a, (3, 2, 2)), 2), wt(w[:, :1].reshape(3, 1, 1))),
        "softmax_ax0": lambda: ad.hadamard(ad.softmax(a, axis=0), wt(w)),
        "col_scatter_add": lambda: ad.hadamard(
            ad.col_scatter_add(a, ad.narrow(b, 1, 0, 3), [0, 2, 2]), wt(w)),
        "log_softmax": lambda: ad.hadamard(ad.log_softmax(a, axis=1), wt(w)),
    }
    f = builders[name]
    err = ad.gradient_check(lambda: ad.reduce_sum(f()), [a, b])
    assert err < 1e-6, f"{name}: rel err {err}"


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_softmax_distribution_property(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=5.0, size=(3, 6))
    out = ad.softmax(ad.Tensor(x), axis=1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_zero_grad_zero_decay_no_change():
    p = leaf([1.0, -2.0])
    opt = ad.AdamW({"p": p}, lr=2e-4, weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_zero_grad_pure_decay():
    p = leaf([1.0, -2.0, 0.5])
    opt = ad.AdamW({"p": p}, lr=2e-4, weight_decay=0.01)
    p.grad = np.zeros(3)
    opt.step()
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0, 0.5]) * (1.0 - 2e-6), rtol=1e-15)


def test_adamw_converges_on_quadratic():
    p = leaf([1.0])
    opt = ad.AdamW({"p": p}, lr=0.05, weight_decay=0.0)
    values = [abs(p.data[0])]
    for _ in range(10):
        p.grad = 2.0 * p.data
        opt.step()
        values.append(abs(p.data[0]))
        p.zero_grad()
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adamw_missing_grad_raises():
    p = leaf([1.0])
    opt = ad.AdamW({"p": p})
    with pytest.raises(ContractError):
        opt.step()


# ---------------------------------------------------------------------------
# checkpoint round trip


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    params = {"w": leaf(rng.normal(size=(3, 2))), "b": leaf(rng.normal(size=3))}
    opt = ad.AdamW(params, lr=1e-3)
    params["w"].grad = rng.normal(size=(3, 2))
    params["b"].grad = rng.normal(size=3)
    opt.step()
    path = tmp_path / "ckpt.json"
    ad.save_checkpoint(path, params, opt)

    with open(path) as fh:
        doc = json.load(fh)
    assert set(doc) == {"w", "b", "optim"}
    assert doc["w"]["shape"] == [3, 2]

    arrays, optim_state = ad.load_checkpoint(path)
    fresh = {"w": leaf(np.zeros((3, 2))), "b": leaf(np.zeros(3))}
    ad.assign_parameters(fresh, arrays)
    np.testing.assert_array_equal(fresh["w"].data, params["w"].data)
    opt2 = ad.AdamW(fresh, lr=1.0)
    opt2.load_state_dict(optim_state)
    assert opt2.step_count == 1 and opt2.lr == 1e-3
    np.testing.assert_array_equal(opt2.m["w"], opt.m["w"])


def test_checkpoint_shape_mismatch_reports_keys(tmp_path):
    params = {"w": leaf(np.zeros((2, 2)))}
    path = tmp_path / "c.json"
    ad.save_checkpoint(path, params)
    arrays, _ = ad.load_checkpoint(path)
    wrong = {"w": leaf(np.zeros((3, 3)))}
    with pytest.raises(ContractError, match="w"):
        ad.assign_parameters(wrong, arrays)
