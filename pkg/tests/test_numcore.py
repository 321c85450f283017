import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stmlp import numcore as nc
from stmlp.numcore import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# affine ------------------------------------------------------------------

def test_affine_identity():
    y = nc.affine(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(y.data, [1.0, 2.0])


def test_affine_bias_only():
    y = nc.affine(Tensor([1.0, 2.0]), Tensor(np.zeros((2, 3))), Tensor([5.0, 5.0, 5.0]))
    np.testing.assert_array_equal(y.data, [5.0, 5.0, 5.0])


def test_affine_hand_multiply():
    # [1, 2] @ [[1, 0], [1, 1]] = [3, 2]; + [0, 1] -> [3, 3]
    y = nc.affine(Tensor([1.0, 2.0]), Tensor([[1.0, 0.0], [1.0, 1.0]]), Tensor([0.0, 1.0]))
    np.testing.assert_array_equal(y.data, [3.0, 3.0])


def test_affine_shape_mismatch():
    with pytest.raises(nc.ShapeError):
        nc.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))


def test_affine_batched_leading_axes(rng):
    x = rng.standard_normal((2, 3, 4))
    W = rng.standard_normal((4, 5))
    b = rng.standard_normal(5)
    y = nc.affine(Tensor(x), Tensor(W), Tensor(b))
    np.testing.assert_allclose(y.data, np.einsum("bnk,kj->bnj", x, W) + b, rtol=1e-12)


# relu / dropout -----------------------------------------------------------

def test_relu():
    np.testing.assert_array_equal(nc.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_dropout_no_drop_and_eval_identity(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert nc.dropout(x, 0.0, "train", rng).data is x.data
    np.testing.assert_array_equal(nc.dropout(x, 0.5, "eval").data, x.data)


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_probability(p):
    with pytest.raises(ValueError):
        nc.dropout(Tensor([1.0]), p, "train", np.random.default_rng(0))


def test_dropout_train_is_unbiased():
    rng = np.random.default_rng(7)
    x = Tensor(np.full(200_000, 3.0))
    out = nc.dropout(x, 0.5, "train", rng).data
    assert set(np.unique(out)) <= {0.0, 6.0}
    assert abs(out.mean() / 3.0 - 1.0) < 0.01


# normalization ------------------------------------------------------------

def test_layer_norm_constant_maps_to_beta():
    y = nc.layer_norm(Tensor([4.0, 4.0, 4.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 0.0])


def test_layer_norm_two_values():
    y = nc.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(y.data, [-1.0, 1.0], atol=1e-10)


def test_layer_norm_zero_gamma():
    y = nc.layer_norm(Tensor([1.0, 3.0]), Tensor(np.zeros(2)), Tensor([7.0, 7.0]))
    np.testing.assert_array_equal(y.data, [7.0, 7.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 8), elements=st.floats(-100, 100)))
def test_layer_norm_standardizes_each_vector(x):
    var = x.var(axis=-1)
    y = nc.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-9)
    # eps shrinks the output variance to var / (var + eps)
    np.testing.assert_allclose(y.var(axis=-1), var / (var + 1e-5), atol=1e-9)


def test_batch_norm_train_column():
    x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1))
    stats = nc.BatchNormStats(1)
    y = nc.batch_norm(x, Tensor([1.0]), Tensor([0.0]), stats, "train", eps=1e-12)
    np.testing.assert_allclose(y.data.ravel(), [-1.0, 1.0], atol=1e-10)


def test_batch_norm_eval_identity_with_unit_stats(rng):
    stats = nc.BatchNormStats(4)
    stats.initialized = True  # running mean 0, var 1
    x = Tensor(rng.standard_normal((2, 3, 4)))
    y = nc.batch_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), stats, "eval", eps=0.0)
    np.testing.assert_array_equal(y.data, x.data)


def test_batch_norm_momentum_one_tracks_last_batch(rng):
    stats = nc.BatchNormStats(3, momentum=1.0)
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    for _ in range(3):
        x = rng.standard_normal((4, 5, 3)) * 2 + 1
        nc.batch_norm(Tensor(x), g, b, stats, "train")
    flat = x.reshape(-1, 3)
    np.testing.assert_allclose(stats.mean, flat.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(stats.var, flat.var(axis=0), rtol=1e-12)


def test_batch_norm_eval_before_stats_rejected():
    with pytest.raises(nc.UninitializedStatsError):
        nc.batch_norm(Tensor(np.ones((1, 1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                      nc.BatchNormStats(2), "eval")


# concat ---------------------------------------------------------------------

def test_concat_examples():
    np.testing.assert_array_equal(nc.concat_last([Tensor([1.0]), Tensor([2.0, 3.0])]).data, [1, 2, 3])
    a = Tensor([1.0, 2.0])
    assert nc.concat_last([a]) is a
    assert nc.concat_last([Tensor(np.zeros((5, 32))), Tensor(np.zeros((5, 32)))]).shape == (5, 64)


def test_concat_leading_mismatch():
    with pytest.raises(nc.ShapeError):
        nc.concat_last([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))])
    with pytest.raises(nc.ShapeError):
        nc.concat_last([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
def test_concat_then_slice_roundtrip_bitwise(widths, seed):
    r = np.random.default_rng(seed)
    parts = [r.standard_normal((2, 3, w)) for w in widths]
    joined = nc.concat_last([Tensor(p) for p in parts]).data
    lo = 0
    for p in parts:
        assert np.array_equal(joined[..., lo:lo + p.shape[-1]], p)
        lo += p.shape[-1]


# gradients --------------------------------------------------------------------

def test_gradient_accumulates_on_fan_out():
    a = leaf([1.0, 2.0])
    loss = nc.total(a * 2.0 + a * 3.0)
    loss.backward()
    np.testing.assert_array_equal(a.grad, [5.0, 5.0])


def test_grad_check_affine_sum(rng):
    x, W, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2))), leaf(rng.standard_normal(2))
    err = nc.grad_check(lambda: nc.total(nc.affine(x, W, b)), [x, W, b])
    assert err < 1e-6


def test_grad_check_constant_objective():
    p = leaf([1.0, 2.0])
    assert nc.grad_check(lambda: Tensor(3.0), [p]) == 0.0


def test_grad_check_detects_wrong_gradient(rng):
    x = leaf(rng.standard_normal(5))

    def broken():
        out = nc.relu(x)
        real = out._backward
        # doubles the incoming gradient
        out._backward = lambda: (setattr(out, "grad", out.grad * 2), real())
        return nc.total(out * out)

    assert nc.grad_check(broken, [x]) > 0.1


def test_grad_check_rejects_non_finite():
    p = leaf([1.0])
    with pytest.raises(nc.NonFiniteError):
        nc.grad_check(lambda: Tensor(np.inf) + p, [p])


def _weighted(out, seed=99):
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return nc.total(out * w)


def _cases(r):
    x3 = leaf(r.standard_normal((2, 3, 4)))
    g, b = leaf(r.standard_normal(4)), leaf(r.standard_normal(4))
    W, bias = leaf(r.standard_normal((4, 5))), leaf(r.standard_normal(5))
    M, c = leaf(r.standard_normal((3, 3))), leaf(r.standard_normal(3))
    tab = leaf(r.standard_normal((6, 4)))
    A, B = leaf(r.standard_normal((3, 4))), leaf(r.standard_normal((4, 2)))
    y = r.standard_normal((2, 3, 4))
    mask = r.random((2, 3, 4)) > 0.3
    stats = nc.BatchNormStats(4)
    stats.initialized = True
    stats.mean, stats.var = r.standard_normal(4), r.random(4) + 0.5
    other = leaf(r.standard_normal((2, 3, 2)))

    def drop():
        return _weighted(nc.dropout(x3, 0.3, "train", np.random.default_rng(5)))

    return {
        "affine": ([x3, W, bias], lambda: _weighted(nc.affine(x3, W, bias))),
        "matmul": ([A, B], lambda: _weighted(nc.matmul(A, B))),
        "relu": ([x3], lambda: _weighted(nc.relu(x3))),
        "dropout": ([x3], drop),
        "layer_norm": ([x3, g, b], lambda: _weighted(nc.layer_norm(x3, g, b))),
        "batch_norm_train": ([x3, g, b], lambda: _weighted(nc.batch_norm(x3, g, b, nc.BatchNormStats(4), "train"))),
        "batch_norm_eval": ([x3, g, b], lambda: _weighted(nc.batch_norm(x3, g, b, stats, "eval"))),
        "concat": ([x3, other], lambda: _weighted(nc.concat_last([x3, other]))),
        "take_rows": ([tab], lambda: _weighted(nc.take_rows(tab, [0, 3, 3, 5]))),
        "broadcast": ([tab], lambda: _weighted(nc.broadcast_to(nc.reshape(tab, (1, 6, 4)), (3, 6, 4)))),
        "mix_nodes": ([x3, M, c], lambda: _weighted(nc.mix_nodes(x3, M, c))),
        "abs_masked_mean": ([x3], lambda: nc.masked_mean(nc.absolute(x3 - y), mask)),
        "mean_sub_mul": ([x3, g], lambda: nc.mean((x3 - y) * g)),
    }


@pytest.mark.parametrize("name", list(_cases(np.random.default_rng(0))))
def test_every_op_matches_finite_differences(name):
    params, f = _cases(np.random.default_rng(2024))[name]
    tol = 1e-6 if name in ("affine", "concat") else 1e-4
    assert nc.grad_check(f, params, n_samples=12) < tol


def test_take_rows_gradient_only_in_selected_rows(rng):
    tab = leaf(rng.standard_normal((5, 3)))
    nc.total(nc.take_rows(tab, [2, 2])).backward()
    assert np.array_equal(np.nonzero(tab.grad.any(axis=1))[0], [2])
    np.testing.assert_array_equal(tab.grad[2], [2.0, 2.0, 2.0])


def test_take_rows_out_of_range():
    with pytest.raises(IndexError):
        nc.take_rows(leaf(np.zeros((3, 2))), [3])


def test_float32_is_preserved():
    x = Tensor(np.ones((2, 3), dtype=np.float32))
    W = Tensor(np.ones((3, 2), dtype=np.float32))
    y = nc.relu(nc.affine(x, W, Tensor(np.zeros(2, dtype=np.float32))) * 2.0)
    assert y.dtype == np.float32
