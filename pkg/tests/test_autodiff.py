import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from spoofsplice import autodiff as ad
from spoofsplice.autodiff import Tensor

from gradcases import OPS, op_case, param, weighted


# -- forward values against naive oracles --------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_conv2d_matches_naive(seed):
    rng = np.random.default_rng(seed)
    b, h, w = rng.integers(1, 3), rng.integers(1, 8), rng.integers(1, 8)
    cin, cout = rng.integers(1, 4), rng.integers(1, 4)
    kh, kw = rng.integers(1, 4), rng.integers(1, 4)
    stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    x = rng.normal(size=(b, h, w, cin))
    k = rng.normal(size=(kh, kw, cin, cout))
    got = ad.conv2d(Tensor(x), Tensor(k), stride=stride).data
    np.testing.assert_allclose(got, oracles.naive_conv2d_same(x, k, stride), atol=1e-10, rtol=0)


def test_conv2d_valid():
    rng = np.random.default_rng(0)
    x, k = rng.normal(size=(1, 5, 6, 2)), rng.normal(size=(3, 2, 2, 3))
    got = ad.conv2d(Tensor(x), Tensor(k), padding="valid").data
    want = oracles.naive_conv2d_same(x, k)[:, 1:4, 0:5]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_same_padding_puts_extra_on_high_side():
    assert ad.same_padding(5, 3, 1) == (1, 1, 5)
    assert ad.same_padding(4, 3, 2) == (0, 1, 2)
    assert ad.same_padding(6, 2, 1) == (0, 1, 6)


def test_depthwise_padding_for_even_kernels():
    assert ad.depthwise_padding(32) == (15, 16)
    assert ad.depthwise_padding(3) == (1, 1)


@pytest.mark.parametrize("seed", range(10))
def test_depthwise_conv1d_matches_naive(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rng.integers(1, 3), rng.integers(1, 10), rng.integers(1, 5)))
    k = rng.normal(size=(rng.integers(1, 9), x.shape[2]))
    got = ad.depthwise_conv1d(Tensor(x), Tensor(k)).data
    np.testing.assert_allclose(got, oracles.naive_depthwise_conv1d(x, k), atol=1e-10, rtol=0)


@pytest.mark.parametrize("seed", range(5))
def test_mhsa_matches_naive(seed):
    rng = np.random.default_rng(seed)
    heads, size, d = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(2, 9))
    x = rng.normal(size=(2, int(rng.integers(1, 7)), d))
    ws = [rng.normal(size=s) for s in [(d, heads * size), (heads * size,)] * 3 + [(heads * size, d), (d,)]]
    got = ad.mhsa(Tensor(x), heads, size, *map(Tensor, ws)).data
    np.testing.assert_allclose(got, oracles.naive_mhsa(x, heads, size, *ws), atol=1e-10, rtol=0)


def test_pools_match_naive(rng):
    x = rng.normal(size=(2, 3, 5, 4))
    np.testing.assert_allclose(ad.global_avg_pool_2d(Tensor(x)).data, oracles.naive_global_pool_2d(x), atol=1e-12)
    np.testing.assert_allclose(ad.avg_pool_axis(Tensor(x), 2).data, oracles.naive_pool_axis2(x), atol=1e-12)
    s = rng.normal(size=(2, 6, 3))
    np.testing.assert_allclose(ad.global_avg_pool_1d(Tensor(s)).data, oracles.naive_global_pool_1d(s), atol=1e-12)


# -- gradients -----------------------------------------------------------

@pytest.mark.parametrize("name", OPS)
def test_op_gradients(name):
    loss, params, eps = op_case(name)
    assert ad.grad_check(loss, params, eps=eps) < 1e-4


@given(st.integers(1, 2), st.integers(1, 6), st.integers(1, 6), st.integers(1, 3), st.integers(1, 3),
       st.integers(1, 2), st.integers(0, 1000))
def test_conv2d_gradients_random_shapes(b, h, w, cin, cout, stride, seed):
    rng = np.random.default_rng(seed)
    x, k = param(rng, b, h, w, cin), param(rng, 3, 2, cin, cout)
    assert ad.grad_check(weighted(lambda: ad.conv2d(x, k, stride=stride), rng), [x, k], eps=1e-5) < 1e-4


def test_grad_check_floor_handles_exact_zero_gradients(rng):
    # a key bias shifts every score row by a constant, so softmax ignores it
    s = param(rng, 1, 4, 4)
    att = [param(rng, *sh) for sh in [(4, 4), (4,), (4, 4), (4,), (4, 4), (4,), (4, 4), (4,)]]
    loss = weighted(lambda: ad.mhsa(s, 2, 2, *att), rng)
    assert ad.grad_check(loss, [att[3]], eps=1e-5) < 1e-4
    assert np.max(np.abs(att[3].grad)) < 1e-10


def test_grad_check_catches_a_wrong_backward(rng):
    x = param(rng, 5)

    def bad_square(t):
        return ad.record(t.data ** 2, (t,), lambda g: (g * t.data,), "bad")  # missing factor 2

    with pytest.raises(AssertionError):
        assert ad.grad_check(lambda: ad.reduce_sum(bad_square(x)), [x]) < 1e-4


# -- engine behaviour ----------------------------------------------------

def test_shared_input_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), x)
    ad.reduce_sum(y).backward()
    assert x.grad.tolist() == [7.0]


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    assert ad.grad_enabled()


def test_backward_needs_scalar():
    with pytest.raises(ad.ShapeError):
        ad.mul(Tensor(np.ones(3), requires_grad=True), 2.0).backward()


@pytest.mark.filterwarnings("ignore:invalid value")
def test_non_finite_raises():
    with pytest.raises(ad.NumericError):
        ad.log(Tensor(np.array([-1.0])))


def test_shape_errors(rng):
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(rng.normal(size=(1, 3, 3, 2))), Tensor(rng.normal(size=(3, 3, 3, 1))))
    with pytest.raises(ad.ShapeError):
        ad.dense(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(4, 2))))
    with pytest.raises(ad.ShapeError):
        ad.glu(Tensor(rng.normal(size=(2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.split(Tensor(rng.normal(size=(2, 5))), 2)


def test_batch_norm_running_stats(rng):
    x = rng.normal(loc=2.0, scale=3.0, size=(4, 3, 2, 5))
    mean, var = np.zeros(5), np.ones(5)
    g, b = Tensor(np.ones(5)), Tensor(np.zeros(5))
    out = ad.batch_norm(Tensor(x), g, b, mean, var, "train")
    np.testing.assert_allclose(mean, 0.1 * x.mean(axis=(0, 1, 2)))
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=(0, 1, 2)))
    np.testing.assert_allclose(out.data.mean(axis=(0, 1, 2)), 0, atol=1e-12)
    # infer mode uses the running statistics and leaves them alone
    before = mean.copy()
    inf = ad.batch_norm(Tensor(x), g, b, mean, var, "infer")
    np.testing.assert_allclose(inf.data, (x - mean) / np.sqrt(var + 1e-5))
    assert np.array_equal(mean, before)


def test_dropout_modes(rng):
    x = Tensor(np.ones((200, 50)))
    assert ad.dropout(x, 0.2, "infer", seed=1) is x
    assert ad.dropout(x, 0.0, "train", seed=1) is x
    y = ad.dropout(x, 0.2, "train", seed=1).data
    assert set(np.unique(y)) <= {0.0, 1.25}
    assert abs(y.mean() - 1.0) < 0.02
    assert np.array_equal(y, ad.dropout(x, 0.2, "train", seed=1).data)


def test_softmax_rows_sum_to_one(rng):
    p = ad.softmax(Tensor(rng.normal(size=(7, 5)) * 50)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_second_backward_through_released_graph_raises():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.reduce_sum(ad.mul(x, x))
    y.backward()
    assert x.grad.tolist() == [4.0]
    with pytest.raises(RuntimeError):
        y.backward()
