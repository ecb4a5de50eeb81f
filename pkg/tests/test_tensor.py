import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import correlate

from rebif.tensor import (
    ConvParams,
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    depth_to_space2,
    dumps_tensor,
    grad_check,
    he_bound,
    he_init,
    init_conv,
    leaky_relu,
    loads_tensor,
    make_rng,
    maxpool2,
    space_to_depth2,
    space_to_depth_w2,
    upsample_nearest2,
    weighted_sum,
)


def conv_reference(x, w, b, stride, padding):
    """Per-channel scipy cross-correlation, summed over input channels."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = []
    for n in range(x.shape[0]):
        maps = []
        for o in range(w.shape[0]):
            acc = sum(correlate(xp[n, c], w[o, c], mode="valid") for c in range(x.shape[1]))
            maps.append(acc[::stride, ::stride] + b[o])
        out.append(maps)
    return np.array(out)


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------- conv2d


def test_conv_identity_1x1():
    p = ConvParams.zeros(1, 1, 1)
    p.weight.data[...] = 1.0
    x = Tensor(make_rng(0, "x").normal(size=(2, 1, 5, 3)))
    assert np.array_equal(conv2d(x, p).data, x.data)


def test_conv_all_ones_3x3():
    p = ConvParams.zeros(1, 1, 3, padding=0)
    p.weight.data[...] = 1.0
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), p)
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


@pytest.mark.parametrize("k,stride,padding,size", [(3, 1, 1, 6), (3, 1, 0, 5), (1, 1, 0, 4), (3, 2, 1, 7), (1, 2, 0, 7)])
def test_conv_matches_scipy(k, stride, padding, size):
    rng = make_rng(1, "conv", k, stride, padding)
    x = rng.normal(size=(2, 3, size, size))
    p = init_conv(4, 3, k, rng, stride=stride, padding=padding)
    p.bias.data[...] = rng.normal(size=4)
    ref = conv_reference(x, p.weight.data, p.bias.data, stride, padding)
    np.testing.assert_allclose(conv2d(Tensor(x), p).data, ref, rtol=0, atol=1e-12)


def test_conv_gradients_1x2x5x5():
    rng = make_rng(2, "conv-grad")
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    p = init_conv(3, 2, 3, rng)
    p.bias.data[...] = rng.normal(size=3)
    leaves = [x, p.weight, p.bias]
    for t in leaves:
        assert grad_check(lambda: conv2d(x, p), t, zero=leaves) < 1e-6


def test_conv_errors():
    p = ConvParams.zeros(2, 3, 3)
    with pytest.raises(ShapeError, match="channel"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), p)
    with pytest.raises(ShapeError, match="non-integral"):
        conv2d(Tensor(np.zeros((1, 3, 8, 8))), ConvParams.zeros(2, 3, 3, stride=2, padding=1))
    with pytest.raises(ShapeError):
        ConvParams.zeros(2, 3, 5)


@settings(max_examples=30, deadline=None)
@given(a=finite, b=finite, seed=st.integers(0, 2**32 - 1))
def test_conv_linear_without_bias(a, b, seed):
    rng = make_rng(seed, "linearity")
    p = init_conv(3, 2, 3, rng)
    x, y = rng.normal(size=(2, 1, 2, 6, 6))
    lhs = conv2d(Tensor(a * x + b * y), p).data
    rhs = a * conv2d(Tensor(x), p).data + b * conv2d(Tensor(y), p).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * max(1.0, abs(a), abs(b)) * 100)


# ---------------------------------------------------------------- maxpool2


def test_maxpool_pattern_and_shift():
    rows = np.array([[0, 0, 1, 1, 0, 0, 1, 1]] * 2, dtype=float)
    out, _ = maxpool2(Tensor(rows[None, None]))
    assert out.data.ravel().tolist() == [0, 1, 0, 1]
    out, _ = maxpool2(Tensor(np.roll(rows, -1, axis=1)[None, None]))
    assert out.data.ravel().tolist() == [1, 1, 1, 1]


def test_maxpool_constant_routes_to_top_left():
    x = Tensor(np.full((1, 1, 4, 4), 3.0), requires_grad=True)
    out, rec = maxpool2(x)
    assert np.all(out.data == 3.0)
    out.backward(np.ones(out.shape))
    expect = np.zeros((4, 4))
    expect[::2, ::2] = 1.0
    assert np.array_equal(x.grad[0, 0], expect)
    assert rec.argmax_indices.ravel().tolist() == [0, 2, 8, 10]


def test_maxpool_odd_dims_rejected():
    with pytest.raises(ShapeError):
        maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


def _shuffle_windows(x, perm):
    out = x.copy()
    for r in range(0, x.shape[2], 2):
        for c in range(0, x.shape[3], 2):
            win = x[:, :, r : r + 2, c : c + 2].reshape(x.shape[0], x.shape[1], 4)
            out[:, :, r : r + 2, c : c + 2] = win[..., list(perm)].reshape(x.shape[0], x.shape[1], 2, 2)
    return out


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (1, 2, 4, 6), elements=finite), st.permutations(range(4)))
def test_maxpool_permutation_stable(x, perm):
    a, rec = maxpool2(Tensor(x))
    b, _ = maxpool2(Tensor(_shuffle_windows(x, perm)))
    assert np.array_equal(a.data, b.data)
    # every recorded index sits inside its own 2x2 window
    rows, cols = np.divmod(rec.argmax_indices % 24, 6)
    r0 = 2 * np.arange(2)[:, None]
    c0 = 2 * np.arange(3)[None, :]
    assert np.all((rows - r0 >= 0) & (rows - r0 < 2) & (cols - c0 >= 0) & (cols - c0 < 2))


def test_maxpool_gradient():
    x = Tensor(make_rng(3, "pool").normal(size=(2, 3, 4, 4)))
    assert grad_check(lambda: maxpool2(x)[0], x) < 1e-8


# ---------------------------------------------------------------- upsample


def test_upsample_replicates():
    out = upsample_nearest2(Tensor(np.array([[[[5.0]]]])))
    assert out.shape == (1, 1, 2, 2) and np.all(out.data == 5.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 3, 5), elements=finite))
def test_maxpool_undoes_upsample(x):
    assert np.array_equal(maxpool2(upsample_nearest2(Tensor(x)))[0].data, x)


def test_upsample_gradient():
    x = Tensor(make_rng(4, "up").normal(size=(1, 2, 3, 3)))
    assert grad_check(lambda: weighted_sum(upsample_nearest2(x), np.arange(72.0).reshape(1, 2, 6, 6)), x) < 1e-8


# ---------------------------------------------------------------- reorganization


def test_space_to_depth_phase_layout():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    y = space_to_depth2(x)
    assert y.shape == (1, 4, 1, 1)
    assert y.data.ravel().tolist() == [1, 2, 3, 4]
    assert depth_to_space2(y).data.tolist() == x.data.tolist()


def test_space_to_depth_channel_blocks():
    x = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
    y = space_to_depth2(Tensor(x)).data
    for ch in range(2):
        for ph, (dy, dx) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
            assert np.array_equal(y[0, ch * 4 + ph], x[0, ch, dy::2, dx::2])


def test_width_reorg_splits_row():
    row = Tensor(np.array([0, 0, 1, 1, 0, 0, 1, 1], dtype=float).reshape(1, 1, 1, 8))
    y = space_to_depth_w2(row).data
    assert y[0, 0, 0].tolist() == [0, 1, 0, 1]
    assert y[0, 1, 0].tolist() == [0, 1, 0, 1]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)),
              elements=finite))
def test_reorg_round_trips(x):
    up = np.repeat(np.repeat(x, 2, axis=2), 2, axis=3) + np.arange(4.0).reshape(1, 1, 2, 2).repeat(x.shape[2], 2).repeat(x.shape[3], 3)
    assert np.array_equal(depth_to_space2(space_to_depth2(Tensor(up))).data, up)
    y = np.tile(x, (1, 4, 1, 1))
    assert np.array_equal(space_to_depth2(depth_to_space2(Tensor(y))).data, y)


def test_reorg_errors():
    with pytest.raises(ShapeError):
        space_to_depth2(Tensor(np.zeros((1, 1, 3, 2))))
    with pytest.raises(ShapeError):
        depth_to_space2(Tensor(np.zeros((1, 3, 2, 2))))


def test_round_trip_gradient_is_identity():
    x = Tensor(make_rng(5, "rt").normal(size=(1, 2, 4, 4)), requires_grad=True)
    up = make_rng(5, "rt-up").normal(size=x.shape)
    depth_to_space2(space_to_depth2(x)).backward(up)
    assert np.array_equal(x.grad, up)


# ---------------------------------------------------------------- concat / leaky / add


def test_concat_layout_and_single():
    rng = make_rng(6, "cat")
    a, b = Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(1, 3, 4, 4)))
    out = concat_channels([a, b])
    assert out.shape == (1, 5, 4, 4)
    assert np.array_equal(out.data[:, :2], a.data)
    assert np.array_equal(concat_channels([a]).data, a.data)
    with pytest.raises(ShapeError):
        concat_channels([a, Tensor(np.zeros((1, 1, 2, 4)))])


def test_concat_gradient():
    rng = make_rng(7, "cat-grad")
    # small values keep the roundoff of the central difference below 1e-10
    a = Tensor(rng.uniform(-0.01, 0.01, size=(1, 2, 3, 3)))
    b = Tensor(rng.uniform(-0.01, 0.01, size=(1, 1, 3, 3)))
    for t in (a, b):
        assert grad_check(lambda: concat_channels([a, b]), t, zero=[a, b]) < 1e-10


def test_leaky_relu_values():
    x = Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3))
    assert leaky_relu(x, 0.1).data.ravel().tolist() == [-0.1, 0.0, 2.0]
    assert leaky_relu(Tensor(np.array([-3.0, 4.0]).reshape(1, 1, 1, 2)), 0.0).data.ravel().tolist() == [0.0, 4.0]


def test_leaky_relu_zero_takes_positive_branch():
    x = Tensor(np.zeros((1, 1, 1, 2)), requires_grad=True)
    leaky_relu(x, 0.1).backward(np.ones(x.shape))
    assert x.grad.ravel().tolist() == [1.0, 1.0]


def test_leaky_relu_gradient():
    rng = make_rng(8, "leaky")
    x = Tensor(rng.choice([-1.0, 1.0], size=(2, 3, 4, 4)) * rng.uniform(0.01, 0.1, size=(2, 3, 4, 4)))
    assert grad_check(lambda: leaky_relu(x, 0.1), x) < 1e-8


def test_add_identities_and_gradient():
    rng = make_rng(9, "add")
    x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    y = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    assert np.array_equal(add(x, Tensor(np.zeros(x.shape))).data, x.data)
    assert np.all(add(x, Tensor(-x.data)).data == 0)
    up = rng.normal(size=x.shape)
    add(x, y).backward(up)
    assert np.array_equal(x.grad, up) and np.array_equal(y.grad, up)
    with pytest.raises(ShapeError):
        add(x, Tensor(np.zeros((1, 2, 3, 4))))


# ---------------------------------------------------------------- init / rng / grad_check


def test_he_init():
    assert he_bound(6) == 1.0
    a = he_init((4, 2, 3, 3), make_rng(3, "w"))
    b = he_init((4, 2, 3, 3), make_rng(3, "w"))
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= he_bound(18)
    big = he_init((100_000, 6), make_rng(11, "mean"))
    assert abs(big.mean()) < 0.01
    assert np.all(init_conv(2, 3, 1, make_rng(0)).bias.data == 0)


def test_make_rng_streams_are_keyed():
    assert make_rng(1, "a").integers(1 << 62) == make_rng(1, "a").integers(1 << 62)
    assert make_rng(1, "a").integers(1 << 62) != make_rng(1, "b").integers(1 << 62)
    assert make_rng(1, "ab").integers(1 << 62) != make_rng(1, "a", "b").integers(1 << 62)


def test_grad_check_linear_map():
    x = Tensor(make_rng(12, "lin").normal(size=(1, 2, 3, 3)))
    assert grad_check(lambda: weighted_sum(x, np.full(x.shape, 3.0)), x) < 1e-10


def test_grad_check_rejects_non_finite():
    x = Tensor(np.full((1, 1, 1, 1), 1e308))
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(FloatingPointError):
        grad_check(lambda: weighted_sum(x, np.full(x.shape, 1e10)), x, step=1e300)


# ---------------------------------------------------------------- text fixtures


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(*[st.integers(1, 3)] * 4),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_tensor_text_round_trip(x):
    text = dumps_tensor(Tensor(x))
    assert text.splitlines()[0] == " ".join(map(str, x.shape))
    assert np.array_equal(loads_tensor(text).data, x)


def test_tensor_text_rejects_bad_counts():
    with pytest.raises(ShapeError):
        loads_tensor("1 1 2 2\n1 2 3\n")
    with pytest.raises(ShapeError):
        loads_tensor("1 0 2 2\n")
