import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from u2airway import kernels
from u2airway.errors import ValidationError
from u2airway.gradcheck import grad_check
from u2airway.tensor import (Tensor, add, batchnorm2d, concat_channels, conv2d, conv_out_extent,
                             maxpool2d, mul, no_grad, reduce_mean, reduce_sum, relu, scale,
                             sigmoid, upsample2d)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def rand(rng, *shape):
    return leaf(rng.standard_normal(shape))


# conv2d

def test_conv_identity_kernel(rng):
    a = rng.standard_normal((1, 1, 3, 3))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = conv2d(Tensor(a), Tensor(k), Tensor(np.zeros(1)), padding=1)
    assert np.array_equal(out.data, a)


def test_conv_zero_kernel(rng):
    out = conv2d(Tensor(rng.standard_normal((2, 3, 5, 5))), Tensor(np.zeros((4, 3, 3, 3))),
                 Tensor(np.zeros(4)), padding=1)
    assert not out.data.any()


def test_conv_matches_direct_loop(rng):
    # cross-correlation written out with explicit loops
    x = rng.standard_normal((2, 2, 7, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    for stride, pad, dil in [(1, 1, 1), (2, 0, 1), (1, 2, 2), (2, 3, 2)]:
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad, dilation=dil).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        oh = conv_out_extent(7, 3, stride, pad, dil)
        ow = conv_out_extent(6, 3, stride, pad, dil)
        ref = np.zeros((2, 3, oh, ow))
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, :, i * stride: i * stride + 2 * dil + 1: dil, j * stride: j * stride + 2 * dil + 1: dil]
                ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_conv_weight_gradient(rng):
    x = rand(rng, 1, 2, 8, 8)
    w = rand(rng, 3, 2, 3, 3)
    b = rand(rng, 3)
    err = grad_check(lambda: reduce_sum(conv2d(x, w, b, padding=1)), [w], n_samples=1000, h=1e-3)
    assert err < 1e-4


def test_conv_input_gradient_strided_dilated(rng):
    x = rand(rng, 2, 2, 9, 8)
    w = rand(rng, 2, 2, 3, 3)
    t = rng.standard_normal((2, 2, 5, 4))
    f = lambda: reduce_sum(mul(conv2d(x, w, None, stride=2, padding=2, dilation=2), Tensor(t)))
    assert grad_check(f, [x, w], n_samples=200) < 1e-4


def test_conv_rejects_bad_shapes(rng):
    with pytest.raises(ValidationError):
        conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValidationError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# batch norm

def test_batchnorm_two_values():
    x = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
    rm, rv = np.zeros(1), np.ones(1)
    out = batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=True)
    expect = 1 / np.sqrt(1 + 1e-5)
    np.testing.assert_allclose(out.data.ravel(), [-expect, expect], rtol=1e-12)
    assert abs(expect - 0.999995) < 1e-6
    np.testing.assert_allclose(rm, [0.2])
    np.testing.assert_allclose(rv, [0.9 + 0.1 * 1.0])


def test_batchnorm_constant_channel():
    x = Tensor(np.full((2, 1, 3, 3), 7.0))
    out = batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.full(1, 5.0)), np.zeros(1), np.ones(1), True)
    np.testing.assert_allclose(out.data, 5.0)


def test_batchnorm_eval_uses_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    rm, rv = np.array([0.5, -1.0]), np.array([4.0, 0.25])
    out = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False)
    ref = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out.data, ref, rtol=1e-12)
    assert np.array_equal(rm, [0.5, -1.0])


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradient(rng, training):
    x = rand(rng, 2, 3, 4, 4)
    g = leaf(rng.uniform(0.5, 1.5, 3))
    b = rand(rng, 3)
    t = rng.standard_normal((2, 3, 4, 4))

    def f():
        out = batchnorm2d(x, g, b, np.zeros(3), np.ones(3), training)
        return reduce_sum(mul(out, Tensor(t)))

    assert grad_check(f, [x, g, b], n_samples=200) < 1e-4


def test_batchnorm_sum_gradient(rng):
    x = rand(rng, 2, 2, 3, 3)
    g, b = leaf(np.ones(2)), leaf(np.zeros(2))
    f = lambda: reduce_sum(batchnorm2d(x, g, b, np.zeros(2), np.ones(2), True))
    assert grad_check(f, [x, g, b], n_samples=200) < 1e-4


def test_batchnorm_train_needs_two_values():
    with pytest.raises(ValidationError):
        batchnorm2d(Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                    np.zeros(1), np.ones(1), training=True)


# activations

def test_relu_values():
    assert relu(Tensor(np.array([-2.0, 3.0]))).data.tolist() == [0.0, 3.0]


def test_relu_subgradient_at_zero():
    x = leaf([0.0, 1.0])
    reduce_sum(relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0]


def test_sigmoid_values():
    assert sigmoid(Tensor(np.array([0.0]))).data[0] == 0.5
    with np.errstate(over="raise", invalid="raise"):
        lo = sigmoid(Tensor(np.array([-50.0, -1000.0, 1000.0]))).data
    assert 0 <= lo[0] <= 1e-20
    assert 0 < lo[1] < 1e-300
    assert lo[2] < 1.0


def test_sigmoid_gradient(rng):
    x = leaf(rng.uniform(-6, 6, 50))
    reduce_sum(sigmoid(x)).backward()
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, s * (1 - s), rtol=1e-12)
    assert grad_check(lambda: reduce_sum(sigmoid(x)), [x]) < 1e-4


def test_dead_relu_gives_zero_error():
    x = leaf(-np.arange(1.0, 11.0))
    assert grad_check(lambda: reduce_sum(relu(x)), [x]) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
def test_activation_ranges(vals):
    x = Tensor(np.array(vals))
    s = sigmoid(x).data
    assert np.all((s > 0) & (s < 1))
    assert np.all(relu(x).data >= 0)


# max pool

def test_maxpool_basic():
    out = maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    assert out.data.tolist() == [[[[4.0]]]]


def test_maxpool_constant():
    out = maxpool2d(Tensor(np.full((1, 2, 5, 4), 3.0)))
    assert out.shape == (1, 2, 3, 2)
    assert np.all(out.data == 3.0)


def test_maxpool_tie_routes_to_first():
    x = leaf(np.full((1, 1, 2, 2), 5.0))
    reduce_sum(maxpool2d(x)).backward()
    assert x.grad[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_ceil_mode_values(rng):
    x = rng.standard_normal((1, 1, 5, 3))
    out = maxpool2d(Tensor(x)).data[0, 0]
    assert out[2, 1] == x[0, 0, 4, 2]
    assert out[2, 0] == x[0, 0, 4, :2].max()


def test_maxpool_gradient(rng):
    # distinct values spaced well beyond h, so no window sits on a kink
    x = leaf(rng.permutation(120).reshape(2, 2, 5, 6) * 0.1)
    t = rng.standard_normal((2, 2, 3, 3))
    assert grad_check(lambda: reduce_sum(mul(maxpool2d(x), Tensor(t))), [x], n_samples=120) < 1e-4


# upsample

def test_upsample_corner_aligned_row():
    x = Tensor(np.array([[[[0.0, 1.0], [2.0, 3.0]]]]))
    out = upsample2d(x, 2).data[0, 0]
    np.testing.assert_allclose(out[0], [0, 1 / 3, 2 / 3, 1], atol=1e-15)
    np.testing.assert_allclose(out[-1], [2, 7 / 3, 8 / 3, 3], atol=1e-15)


def test_upsample_constant_and_single_pixel():
    assert np.allclose(upsample2d(Tensor(np.full((1, 1, 3, 2), 4.0)), 3).data, 4.0)
    out = upsample2d(Tensor(np.array([[[[7.0]]]])), 4)
    assert out.shape == (1, 1, 4, 4) and np.all(out.data == 7.0)


def test_upsample_nearest_flag():
    x = Tensor(np.array([[[[0.0, 1.0], [2.0, 3.0]]]]))
    out = upsample2d(x, 2, mode="nearest").data[0, 0]
    assert out.tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]


def test_upsample_gradient(rng):
    x = rand(rng, 1, 2, 3, 4)
    t = rng.standard_normal((1, 2, 6, 8))
    assert grad_check(lambda: reduce_sum(mul(upsample2d(x, 2), Tensor(t))), [x]) < 1e-4
    t = rng.standard_normal((1, 2, 5, 7))
    assert grad_check(lambda: reduce_sum(mul(upsample2d(x, size=(5, 7)), Tensor(t))), [x]) < 1e-4


# concat and elementwise

def test_concat_single_and_pair(rng):
    a = Tensor(rng.standard_normal((2, 1, 3, 3)))
    assert concat_channels([a]) is a
    b = Tensor(rng.standard_normal((2, 1, 3, 3)))
    out = concat_channels([a, b])
    assert out.shape == (2, 2, 3, 3)
    assert np.array_equal(out.data[:, 0], a.data[:, 0])


def test_concat_gradient_routes(rng):
    a, b = rand(rng, 1, 2, 3, 3), rand(rng, 1, 3, 3, 3)
    m = rng.standard_normal((1, 5, 3, 3))
    f = lambda: reduce_sum(mul(concat_channels([a, b]), Tensor(m)))
    f().backward()
    assert np.array_equal(a.grad, m[:, :2]) and np.array_equal(b.grad, m[:, 2:])
    assert grad_check(f, [a, b]) < 1e-4


def test_concat_rejects_extent_mismatch():
    with pytest.raises(ValidationError):
        concat_channels([Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 3, 4)))])


def test_add_scale_reduce(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert np.array_equal(add(x, Tensor(np.zeros((3, 4)))).data, x.data)
    assert reduce_sum(Tensor(np.ones((2, 3)))).item() == 6.0
    assert np.array_equal(scale(x, 2.5).data, x.data * 2.5)
    with pytest.raises(ValidationError):
        add(x, Tensor(np.zeros((4, 3))))


def test_mean_square_gradient(rng):
    x = rand(rng, 12)
    reduce_mean(mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data / 12, rtol=1e-14)
    assert grad_check(lambda: reduce_mean(mul(x, x)), [x]) < 1e-4


# backward

def test_backward_examples():
    x = leaf([1.0, -2.0])
    reduce_sum(x).backward()
    assert x.grad.tolist() == [1.0, 1.0]
    x.zero_grad()
    reduce_sum(mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, -4.0]
    x.zero_grad()
    (reduce_sum(x) + reduce_sum(x)).backward()
    assert x.grad.tolist() == [2.0, 2.0]


def test_backward_rejects_non_scalar():
    with pytest.raises(ValidationError):
        leaf([1.0, 2.0]).backward()


def test_backward_accumulates_without_zero_grad():
    x = leaf([1.0, 2.0])
    reduce_sum(x).backward()
    reduce_sum(x).backward()
    assert x.grad.tolist() == [2.0, 2.0]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_k_consumers_accumulate(k, seed):
    r = np.random.default_rng(seed)
    x = leaf(r.standard_normal(5))
    reduce_sum(mul(x, x)).backward()
    single = x.grad.copy()
    x.zero_grad()
    total = reduce_sum(mul(x, x))
    for _ in range(k - 1):
        total = total + reduce_sum(mul(x, x))
    total.backward()
    np.testing.assert_allclose(x.grad, k * single, rtol=1e-14)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = mul(x, x)
    assert not y.requires_grad


def test_grad_check_sum_is_exact(rng):
    x = rand(rng, 40)
    assert grad_check(lambda: reduce_sum(x), [x]) < 1e-12


def test_grad_check_preconditions(rng):
    x = leaf(rng.standard_normal(3))
    with pytest.raises(ValidationError):
        grad_check(lambda: reduce_sum(x), [x], h=1e-6)
    y = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValidationError):
        grad_check(lambda: reduce_sum(y), [y])


# shape algebra

@settings(max_examples=80, deadline=None)
@given(h=st.integers(1, 32), w=st.integers(1, 32), k=st.sampled_from([1, 3, 5]),
       stride=st.integers(1, 3), pad=st.integers(0, 3), dil=st.integers(1, 3))
def test_conv_shape_formula(h, w, k, stride, pad, dil):
    oh = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
    ow = (w + 2 * pad - dil * (k - 1) - 1) // stride + 1
    x = Tensor(np.zeros((1, 1, h, w)))
    wt = Tensor(np.zeros((2, 1, k, k)))
    if oh < 1 or ow < 1:
        with pytest.raises(ValidationError):
            conv2d(x, wt, stride=stride, padding=pad, dilation=dil)
    else:
        assert conv2d(x, wt, stride=stride, padding=pad, dilation=dil).shape == (1, 2, oh, ow)


@settings(max_examples=80, deadline=None)
@given(h=st.integers(2, 32), w=st.integers(2, 32), f=st.integers(2, 4))
def test_pool_and_upsample_shapes(h, w, f):
    x = Tensor(np.zeros((1, 1, h, w)))
    assert maxpool2d(x).shape == (1, 1, -(-h // 2), -(-w // 2))
    assert upsample2d(x, f).shape == (1, 1, f * h, f * w)


# backend parity

needs_compiled = pytest.mark.skipif("compiled" not in kernels.available_backends(),
                                    reason="compiled extension not built")


@needs_compiled
@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), stride=st.integers(1, 2), pad=st.integers(0, 2),
       dil=st.integers(1, 2), seed=st.integers(0, 1000))
def test_backends_agree_on_im2col(h, w, stride, pad, dil, seed):
    k = 3
    oh, ow = conv_out_extent(h, k, stride, pad, dil), conv_out_extent(w, k, stride, pad, dil)
    if oh < 1 or ow < 1:
        return
    x = np.random.default_rng(seed).standard_normal((2, 3, h, w))
    out = {}
    for name in ("python", "compiled"):
        with kernels.use_backend(name):
            cols = kernels.im2col(x, k, stride, pad, dil, oh, ow)
            out[name] = (cols, kernels.col2im(cols, x.shape, k, stride, pad, dil, oh, ow))
    assert np.array_equal(out["python"][0], out["compiled"][0])
    np.testing.assert_allclose(out["python"][1], out["compiled"][1], rtol=1e-13, atol=1e-13)


@needs_compiled
@settings(max_examples=40, deadline=None)
@given(h=st.integers(2, 11), w=st.integers(2, 11), seed=st.integers(0, 1000))
def test_backends_agree_on_maxpool(h, w, seed):
    # small integers so ties are common
    x = np.random.default_rng(seed).integers(0, 3, (2, 2, h, w)).astype(np.float64)
    res = {}
    for name in ("python", "compiled"):
        with kernels.use_backend(name):
            out, arg = kernels.maxpool2x2(x)
            res[name] = (out, arg, kernels.maxpool2x2_backward(np.ones_like(out), arg, x.shape))
    for a, b in zip(res["python"], res["compiled"]):
        assert np.array_equal(a, b)
