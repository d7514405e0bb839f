import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgglc import ops
from sgglc.tensor import Tensor, deterministic, precision

from oracles import conv2d_direct, matmul_loops, numeric_grad, pool_direct, rel_err, resize_2d_scalar


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def conv(x, w, b=None, **kw):
    return ops.conv2d(t64(x), ops.ConvParams(t64(w), None if b is None else t64(b), **kw))


# -- conv2d -----------------------------------------------------------------

def test_pointwise_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(conv(x, w, np.zeros(3)).data, x)


def test_zero_weights_give_zero_output(rng):
    out = conv(rng.standard_normal((1, 2, 4, 4)), np.zeros((5, 2, 3, 3)), np.zeros(5))
    assert out.shape == (1, 5, 4, 4) and not out.data.any()


def test_ones_kernel_counts_taps():
    out = conv(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), padding=1).data[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 1] == out[1, 0] == out[2, 1] == out[1, 2] == 6.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0


@pytest.mark.parametrize("k,stride,pad,groups", [(1, 1, 0, 1), (3, 1, 1, 1), (3, 2, 1, 1), (5, 1, 2, 2),
                                                 (3, 1, 1, 4), (3, 2, 0, 2)])
def test_conv_matches_direct_summation(rng, k, stride, pad, groups):
    x = rng.standard_normal((2, 4, 7, 6))
    w = rng.standard_normal((4, 4 // groups, k, k))
    b = rng.standard_normal(4)
    got = conv(x, w, b, stride=stride, padding=pad, groups=groups).data
    assert np.allclose(got, conv2d_direct(x, w, b, stride, pad, groups), atol=1e-12)


def test_deterministic_path_matches_direct(rng):
    x = rng.standard_normal((1, 3, 5, 5))
    w = rng.standard_normal((2, 3, 3, 3))
    with deterministic():
        got = conv(x, w, stride=2).data
    assert np.allclose(got, conv2d_direct(x, w, None, 2, 1), atol=1e-12)


def test_conv_output_dims_formula(rng):
    out = conv(rng.standard_normal((1, 2, 9, 8)), rng.standard_normal((3, 2, 3, 3)), stride=2, padding=0)
    assert out.shape == (1, 3, (9 - 3) // 2 + 1, (8 - 3) // 2 + 1)


def test_conv_errors(rng):
    with pytest.raises(ValueError, match="channel mismatch"):
        conv(rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((2, 2, 1, 1)))
    with pytest.raises(ValueError, match="empty output"):
        conv(rng.standard_normal((1, 1, 2, 2)), rng.standard_normal((1, 1, 5, 5)), padding=0)
    with pytest.raises(ValueError, match="divisible"):
        conv(rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((2, 1, 1, 1)), groups=3)


@pytest.mark.parametrize("k,stride,groups", [(1, 1, 1), (3, 1, 1), (3, 2, 1), (3, 1, 2), (5, 1, 4)])
def test_conv_gradients_match_finite_differences(rng, k, stride, groups):
    x = t64(rng.standard_normal((2, 4, 5, 5)), True)
    w = t64(rng.standard_normal((4, 4 // groups, k, k)), True)
    b = t64(rng.standard_normal(4), True)
    r = rng.standard_normal(ops.conv2d(x, ops.ConvParams(w, b, stride=stride, groups=groups)).shape)

    def f():
        return float((ops.conv2d(x, ops.ConvParams(w, b, stride=stride, groups=groups)).data * r).sum())

    out = ops.conv2d(x, ops.ConvParams(w, b, stride=stride, groups=groups))
    ops.sum(out * t64(r)).backward()
    for t in (x, w, b):
        assert rel_err(t.grad, numeric_grad(f, t.data)) < 1e-6


def test_weight_grad_of_output_sum_counts_taps():
    x = t64(np.ones((1, 1, 3, 3)))
    w = t64(np.zeros((1, 1, 3, 3)), True)
    ops.sum(ops.conv2d(x, ops.ConvParams(w))).backward()
    # each tap sees the input over a shifted 3x3 window with zero padding
    assert np.array_equal(w.grad[0, 0], np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=float))


# -- depthwise -------------------------------------------------------------

def test_depthwise_identity_and_constant():
    x = np.full((1, 2, 5, 5), 3.0)
    ident = ops.depthwise_conv2d(t64(x), ops.ConvParams(t64(np.ones((2, 1, 1, 1))), groups=2))
    assert np.array_equal(ident.data, x)
    box = ops.depthwise_conv2d(t64(x), ops.ConvParams(t64(np.ones((2, 1, 3, 3))), groups=2))
    assert np.all(box.data[:, :, 1:-1, 1:-1] == 27.0)


def test_depthwise_matches_per_channel_oracle(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 1, 3, 3))
    got = ops.depthwise_conv2d(t64(x), ops.ConvParams(t64(w), groups=2)).data
    want = np.stack([conv2d_direct(x[:, c:c + 1], w[c:c + 1], pad=1)[:, 0] for c in range(2)], axis=1)
    assert np.allclose(got, want, atol=1e-12)


def test_depthwise_requires_groups_equal_channels(rng):
    with pytest.raises(ValueError, match="groups == channels"):
        ops.depthwise_conv2d(t64(rng.standard_normal((1, 4, 3, 3))), ops.ConvParams(t64(np.ones((4, 2, 1, 1))), groups=2))


# -- pooling ---------------------------------------------------------------

def test_avg_pool_examples(rng):
    assert np.all(ops.avg_pool(t64(np.full((1, 1, 4, 4), 7.0)), 2, 2).data == 7.0)
    assert ops.avg_pool(t64([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2).item() == 2.5
    x = rng.standard_normal((2, 3, 7, 6))
    assert np.allclose(ops.avg_pool(t64(x), 3, 2).data, pool_direct(x, 3, 2, np.mean), atol=1e-12)


def test_max_pool_examples(rng):
    assert np.all(ops.max_pool_strided(t64(np.full((1, 1, 5, 5), -2.0)), 3, 2).data == -2.0)
    ramp = np.arange(36, dtype=float).reshape(1, 1, 6, 6)
    got = ops.max_pool_strided(t64(ramp), 2, 2).data[0, 0]
    assert np.array_equal(got, ramp[0, 0, 1::2, 1::2])  # bottom-right tap of each window
    x = rng.standard_normal((1, 2, 9, 8))
    assert np.array_equal(ops.max_pool_strided(t64(x), 7, 3).data, pool_direct(x, 7, 3, np.max))


def test_pool_window_larger_than_input(rng):
    for fn in (ops.avg_pool, ops.max_pool_strided):
        with pytest.raises(ValueError, match="larger than input"):
            fn(t64(rng.standard_normal((1, 1, 2, 3))), 3, 1)


@pytest.mark.parametrize("fn,k,s", [(ops.avg_pool, 2, 2), (ops.avg_pool, 3, 1), (ops.max_pool_strided, 3, 2)])
def test_pool_gradients(rng, fn, k, s):
    x = t64(rng.standard_normal((1, 2, 6, 7)), True)
    r = rng.standard_normal(fn(x, k, s).shape)
    ops.sum(fn(x, k, s) * t64(r)).backward()
    assert rel_err(x.grad, numeric_grad(lambda: float((fn(t64(x.data), k, s).data * r).sum()), x.data)) < 1e-6


# -- resize ----------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), oh=st.integers(1, 20), ow=st.integers(1, 20),
       v=st.floats(-1e3, 1e3), kind=st.sampled_from(["bicubic", "bilinear"]))
def test_resize_preserves_constants(h, w, oh, ow, v, kind):
    out = ops.resize(t64(np.full((1, 2, h, w), v)), oh, ow, kind=kind)
    assert out.shape == (1, 2, oh, ow)
    assert np.allclose(out.data, v, atol=1e-6 * max(1.0, abs(v)))


def test_identity_resize_is_exact(rng):
    x = rng.standard_normal((1, 3, 5, 7))
    assert np.array_equal(ops.bicubic_resize(t64(x), 5, 7).data, x)


@pytest.mark.parametrize("shape,out", [((4, 4), (2, 2)), ((4, 4), (8, 8)), ((5, 3), (7, 2)), ((6, 6), (2, 3))])
def test_bicubic_matches_scalar_kernel_sum(rng, shape, out):
    img = rng.standard_normal(shape)
    got = ops.bicubic_resize(t64(img[None, None]), *out).data[0, 0]
    assert np.allclose(got, resize_2d_scalar(img, *out), atol=1e-12)


def test_bicubic_downscale_of_linear_ramp():
    ramp = np.tile(np.arange(4, dtype=float), (4, 1))
    got = ops.bicubic_resize(t64(ramp[None, None]), 2, 2).data[0, 0]
    assert np.allclose(got, resize_2d_scalar(ramp, 2, 2), atol=1e-12)
    assert np.allclose(got[0], got[1])  # rows are identical for a horizontal ramp


def test_resize_rejects_zero_dims(rng):
    with pytest.raises(ValueError):
        ops.bicubic_resize(t64(rng.standard_normal((1, 1, 3, 3))), 0, 2)


def test_resize_gradient(rng):
    x = t64(rng.standard_normal((1, 2, 4, 5)), True)
    r = rng.standard_normal((1, 2, 7, 3))
    ops.sum(ops.bicubic_resize(x, 7, 3) * t64(r)).backward()
    f = lambda: float((ops.bicubic_resize(t64(x.data), 7, 3).data * r).sum())
    assert rel_err(x.grad, numeric_grad(f, x.data)) < 1e-6


# -- pixel shuffle ---------------------------------------------------------

def test_pixel_shuffle_definition_case():
    x = t64(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
    assert np.array_equal(ops.pixel_shuffle(x, 2).data[0, 0], [[1, 2], [3, 4]])


def test_pixel_shuffle_r1_identity(rng):
    x = rng.standard_normal((1, 3, 2, 2))
    assert np.array_equal(ops.pixel_shuffle(t64(x), 1).data, x)


def test_pixel_shuffle_index_law(rng):
    r, x = 3, rng.standard_normal((1, 18, 2, 3))
    y = ops.pixel_shuffle(t64(x), r).data
    for c in range(2):
        for i in range(2):
            for j in range(3):
                for di in range(r):
                    for dj in range(r):
                        assert y[0, c, r * i + di, r * j + dj] == x[0, c * r * r + di * r + dj, i, j]


@settings(max_examples=25, deadline=None)
@given(r=st.integers(1, 4), c=st.integers(1, 3), h=st.integers(1, 5), w=st.integers(1, 5), seed=st.integers(0, 99))
def test_shuffle_unshuffle_inverse(r, c, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((2, c * r * r, h, w))
    assert np.array_equal(ops.pixel_unshuffle(ops.pixel_shuffle(t64(x), r), r).data, x)


def test_pixel_shuffle_rejects_bad_channels(rng):
    with pytest.raises(ValueError):
        ops.pixel_shuffle(t64(rng.standard_normal((1, 5, 2, 2))), 2)


# -- layer norm ------------------------------------------------------------

def test_layer_norm_statistics(rng):
    x = rng.standard_normal((2, 6, 3, 4)) * 5 + 2
    y = ops.layer_norm(t64(x), t64(np.ones(6)), t64(np.zeros(6)), 1e-12).data
    assert np.allclose(y.mean(axis=1), 0, atol=1e-5)
    assert np.allclose(y.var(axis=1), 1, atol=1e-5)


def test_layer_norm_constant_channels_give_beta(rng):
    x = np.broadcast_to(rng.standard_normal((1, 1, 3, 3)), (1, 4, 3, 3)).copy()
    beta = rng.standard_normal(4)
    y = ops.layer_norm(t64(x), t64(rng.standard_normal(4)), t64(beta)).data
    assert np.allclose(y, beta[None, :, None, None])


def test_layer_norm_two_pass_oracle_and_grad(rng):
    x = t64(rng.standard_normal((1, 5, 3, 3)), True)
    g = t64(rng.standard_normal(5), True)
    b = t64(rng.standard_normal(5), True)
    a = x.data
    mu = a.sum(axis=1, keepdims=True) / 5
    var = ((a - mu) ** 2).sum(axis=1, keepdims=True) / 5
    want = (a - mu) / np.sqrt(var + 1e-6) * g.data[None, :, None, None] + b.data[None, :, None, None]
    y = ops.layer_norm(x, g, b)
    assert np.allclose(y.data, want, atol=1e-12)
    r = rng.standard_normal(y.shape)
    ops.sum(y * t64(r)).backward()
    f = lambda: float((ops.layer_norm(t64(x.data), t64(g.data), t64(b.data)).data * r).sum())
    for t in (x, g, b):
        assert rel_err(t.grad, numeric_grad(f, t.data)) < 1e-6


# -- small primitives ------------------------------------------------------

def test_sigmoid_at_zero_and_gradient():
    x = t64(np.zeros((1, 1, 2, 3)), True)
    y = ops.sigmoid(x)
    assert np.all(y.data == 0.5)
    ops.sum(y).backward()
    assert np.all(x.grad == 0.25)


def test_softmax_rows_and_mask(rng):
    x = t64(rng.standard_normal((3, 4, 6)) * 10)
    assert np.allclose(ops.softmax_lastdim(x).data.sum(-1), 1, atol=1e-6)
    mask = np.ones((3, 1, 6), dtype=bool)
    mask[:, :, 4:] = False
    p = ops.softmax_lastdim(x, mask).data
    assert np.all(p[..., 4:] == 0) and np.allclose(p.sum(-1), 1, atol=1e-12)


def test_concat_split_round_trip(rng):
    xs = [t64(rng.standard_normal((1, c, 2, 2))) for c in (1, 3, 2)]
    parts = ops.split_channels(ops.concat_channels(xs), [1, 3, 2])
    assert all(np.array_equal(a.data, b.data) for a, b in zip(xs, parts))
    halves = ops.split_channels(t64(rng.standard_normal((1, 4, 1, 1))), 2)
    assert [h.shape[1] for h in halves] == [2, 2]


def test_matmul_matches_loops_and_transpose(rng):
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
    assert np.allclose(ops.matmul(t64(a), t64(b)).data, matmul_loops(a, b), atol=1e-12)
    assert np.array_equal(ops.transpose2d(t64(a)).data, a.T)


@pytest.mark.parametrize("name", ["sigmoid", "relu", "abs", "sqrt", "softmax", "matmul", "mul", "split", "shift",
                                  "pad", "crop", "permute", "mean"])
def test_primitive_gradients(rng, name):
    a = t64(rng.uniform(0.2, 2.0, (2, 8, 3, 3)) * rng.choice([-1, 1], (2, 8, 3, 3)), True)
    b = t64(rng.standard_normal((2, 8, 3, 3)), True)
    fns = {
        "sigmoid": lambda: ops.sigmoid(a),
        "relu": lambda: ops.relu(a),
        "abs": lambda: ops.abs(a),
        "sqrt": lambda: ops.sqrt(ops.abs(a)),
        "softmax": lambda: ops.softmax_lastdim(a),
        "matmul": lambda: ops.matmul(a, b),
        "mul": lambda: a * b - b,
        "split": lambda: ops.concat_channels(ops.split_channels(a, [3, 5])[::-1]),
        "shift": lambda: ops.shift_groups(a, 0),
        "pad": lambda: ops.pad2d(a, 1, 0, 2, 1),
        "crop": lambda: ops.crop2d(a, 2, 1),
        "permute": lambda: ops.permute(a, (0, 2, 3, 1)),
        "mean": lambda: ops.mean(a, axis=(2, 3), keepdims=True) + ops.sum(b, axis=1, keepdims=True),
    }
    out = fns[name]()
    r = rng.standard_normal(out.shape)
    ops.sum(out * t64(r)).backward()
    f = lambda: float((fns[name]().data * r).sum())
    for t in (a, b):
        if t.grad is not None:
            assert rel_err(t.grad, numeric_grad(f, t.data)) < 1e-6


# -- shift -----------------------------------------------------------------

def test_shift_groups_moves_each_group(rng):
    x = rng.standard_normal((1, 10, 4, 5))
    y = ops.shift_groups(t64(x), 2).data
    assert np.array_equal(y[:, :2], x[:, :2])
    for gi, (dy, dx) in enumerate(ops.SHIFT_DIRECTIONS):
        want = np.zeros((4, 5))
        for i in range(4):
            for j in range(5):
                if 0 <= i + dy < 4 and 0 <= j + dx < 5:
                    want[i, j] = x[0, 2 + gi, i + dy, j + dx]
        assert np.array_equal(y[0, 2 + gi], want)


def test_shift_groups_needs_multiple_of_eight(rng):
    with pytest.raises(ValueError):
        ops.shift_groups(t64(rng.standard_normal((1, 9, 3, 3))), 0)


def test_float32_default_precision(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32))
    w = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32))
    assert ops.conv2d(x, ops.ConvParams(w)).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
