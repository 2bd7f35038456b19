import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swinseg import tensor as T
from swinseg.gradcheck import check_gradients


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- conv3d


def conv3d_loop_oracle(x, w, stride, padding="same"):
    """Direct nested-loop 3D cross-correlation, independent of the im2col path."""
    B, C, H, W, L = x.shape
    Co, _, kh, kw, kl = w.shape
    sh, sw, sl = stride

    def pad_for(ext, k, s):
        if padding == "same":
            out = math.ceil(ext / s)
            total = max((out - 1) * s + k - ext, 0)
            return out, total // 2
        return (ext - k) // s + 1, 0

    Ho, ph = pad_for(H, kh, sh)
    Wo, pw = pad_for(W, kw, sw)
    Lo, pl = pad_for(L, kl, sl)
    out = np.zeros((B, Co, Ho, Wo, Lo))
    for b in range(B):
        for co in range(Co):
            for ho in range(Ho):
                for wo in range(Wo):
                    for lo in range(Lo):
                        acc = 0.0
                        for c in range(C):
                            for i in range(kh):
                                for j in range(kw):
                                    for k in range(kl):
                                        hi = ho * sh + i - ph
                                        wi = wo * sw + j - pw
                                        li = lo * sl + k - pl
                                        if 0 <= hi < H and 0 <= wi < W and 0 <= li < L:
                                            acc += x[b, c, hi, wi, li] * w[co, c, i, j, k]
                        out[b, co, ho, wo, lo] = acc
    return out


def test_conv3d_identity_kernel():
    x = T.Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4, 1))
    w = T.Tensor(np.ones((1, 1, 1, 1, 1), dtype=np.float32))
    y = T.conv3d(x, w, (1, 1, 1), "same")
    assert np.array_equal(y.data, x.data)


def test_conv3d_patch_embedding_shape():
    # 32 filters, kernel 3x3x1, stride 2x2x1: 64x64x32 -> 32x32x32 with 32 channels
    x = T.Tensor(rng(1).standard_normal((1, 1, 64, 64, 32)), dtype=np.float32)
    w = T.Tensor(rng(2).standard_normal((32, 1, 3, 3, 1)), dtype=np.float32)
    y = T.conv3d(x, w, (2, 2, 1), "same")
    assert y.shape == (1, 32, 32, 32, 32)


def test_conv3d_matches_loop_oracle():
    g = rng(3)
    x = g.standard_normal((1, 2, 5, 5, 3))
    w = g.standard_normal((4, 2, 3, 3, 3))
    got = T.conv3d(T.Tensor(x), T.Tensor(w), (1, 1, 1), "same").data
    want = conv3d_loop_oracle(x, w, (1, 1, 1))
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)


def test_conv3d_strided_matches_loop_oracle():
    g = rng(4)
    x = g.standard_normal((2, 2, 6, 5, 4))
    w = g.standard_normal((3, 2, 3, 3, 1))
    got = T.conv3d(T.Tensor(x), T.Tensor(w), (2, 2, 1), "same").data
    want = conv3d_loop_oracle(x, w, (2, 2, 1))
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)


def test_conv3d_channel_mismatch_reports_both_shapes():
    x = T.Tensor(np.zeros((1, 3, 4, 4, 2), dtype=np.float32))
    w = T.Tensor(np.zeros((2, 2, 3, 3, 1), dtype=np.float32))
    with pytest.raises(T.ShapeError) as exc:
        T.conv3d(x, w)
    msg = str(exc.value)
    assert "(1, 3, 4, 4, 2)" in msg and "(2, 2, 3, 3, 1)" in msg


@settings(max_examples=20, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), l=st.integers(1, 4),
       k=st.sampled_from([1, 3]))
def test_conv3d_same_padding_preserves_extents_at_stride_1(h, w, l, k):
    x = T.Tensor(rng(h * 100 + w * 10 + l).standard_normal((1, 1, h, w, l)))
    wt = T.Tensor(rng(k).standard_normal((2, 1, k, k, 1)))
    assert T.conv3d(x, wt, (1, 1, 1), "same").shape == (1, 2, h, w, l)


def test_conv3d_rejects_even_kernel():
    x = T.Tensor(np.zeros((1, 1, 4, 4, 1), dtype=np.float32))
    w = T.Tensor(np.zeros((1, 1, 2, 2, 1), dtype=np.float32))
    with pytest.raises(T.ShapeError):
        T.conv3d(x, w)


# ---------------------------------------------------------------- linear


def test_linear_identity():
    x = T.Tensor(rng(5).standard_normal((3, 4)))
    w = T.Tensor(np.eye(4))
    b = T.Tensor(np.zeros(4))
    np.testing.assert_allclose(T.linear(x, w, b).data, x.data)


def test_linear_direct_arithmetic():
    x = T.Tensor(np.array([[1.0, 2.0]]))
    w = T.Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
    b = T.Tensor(np.array([1.0, 1.0]))
    np.testing.assert_allclose(T.linear(x, w, b).data, [[2.0, 5.0]])


def test_linear_matches_matmul_oracle():
    g = rng(6)
    x, w, b = g.standard_normal((3, 7)), g.standard_normal((7, 5)), g.standard_normal(5)
    got = T.linear(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
    want = np.array([[sum(x[i, k] * w[k, j] for k in range(7)) + b[j]
                      for j in range(5)] for i in range(3)])
    np.testing.assert_allclose(got, want, rtol=1e-6)


def test_linear_trailing_axis_mismatch():
    with pytest.raises(T.ShapeError):
        T.linear(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 5))))


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    y = T.softmax(T.Tensor(np.zeros(4)), axis=-1)
    np.testing.assert_allclose(y.data, [0.25] * 4)


def test_softmax_closed_form():
    y = T.softmax(T.Tensor(np.array([0.0, math.log(2.0)])), axis=-1)
    np.testing.assert_allclose(y.data, [1 / 3, 2 / 3], rtol=1e-6)


def test_softmax_large_logits_stable():
    y = T.softmax(T.Tensor(np.array([1000.0, 1000.0])), axis=-1)
    np.testing.assert_allclose(y.data, [0.5, 0.5])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    y = T.softmax(T.Tensor(np.array(vals, dtype=np.float64)), axis=-1)
    assert np.all(y.data >= 0)
    assert abs(y.data.sum() - 1.0) <= 1e-6


# ---------------------------------------------------------------- norms


def test_instance_norm_constant_slice_is_zero():
    x = T.Tensor(np.full((1, 1, 3, 3, 2), 7.0))
    np.testing.assert_allclose(T.instance_norm(x).data, 0.0, atol=1e-5)


def test_instance_norm_two_point_slice():
    x = T.Tensor(np.array([1.0, 3.0]).reshape(1, 1, 2))
    np.testing.assert_allclose(T.instance_norm(x).data.ravel(), [-1.0, 1.0], atol=1e-4)


def test_instance_norm_statistics_oracle():
    x = rng(7).standard_normal((2, 3, 4, 4, 2))
    y = T.instance_norm(T.Tensor(x)).data
    for b in range(2):
        for c in range(3):
            sl = y[b, c]
            assert abs(sl.mean()) < 1e-6
            assert abs(sl.var() - 1.0) < 1e-3


def test_layer_norm_constant_and_two_point():
    np.testing.assert_allclose(T.layer_norm(T.Tensor(np.full((2, 5), 3.0))).data, 0.0,
                               atol=1e-5)
    y = T.layer_norm(T.Tensor(np.array([[1.0, 3.0]])))
    np.testing.assert_allclose(y.data.ravel(), [-1.0, 1.0], atol=1e-4)


def test_layer_norm_statistics_oracle():
    x = rng(8).standard_normal((4, 16))
    y = T.layer_norm(T.Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-3)


def test_instance_norm_needs_spatial_axis():
    with pytest.raises(T.ShapeError):
        T.instance_norm(T.Tensor(np.zeros((2, 8))))


# ---------------------------------------------------------------- leaky relu


def test_leaky_relu_values():
    y = T.leaky_relu(T.Tensor(np.array([-1.0, 0.0, 2.0])), 0.01)
    np.testing.assert_allclose(y.data, [-0.01, 0.0, 2.0])


def test_leaky_relu_positive_identity():
    x = np.abs(rng(9).standard_normal(10)) + 0.1
    np.testing.assert_allclose(T.leaky_relu(T.Tensor(x), 0.01).data, x)


def test_leaky_relu_negative_gradient_is_slope():
    x = T.Tensor(np.array([-2.0]), requires_grad=True, dtype=np.float64)
    T.backward(T.tsum(T.leaky_relu(x, 0.01)))
    np.testing.assert_allclose(x.grad, [0.01])


# ---------------------------------------------------------------- upsample / resample


def test_upsample_one_axis():
    x = T.Tensor(np.array([1.0, 2.0]).reshape(1, 1, 2))
    y = T.upsample_x2(x, axes=(2,))
    np.testing.assert_allclose(y.data.ravel(), [1, 1, 2, 2])


def test_upsample_roundtrip_topleft_pick():
    x = rng(10).standard_normal((1, 2, 4, 4, 2))
    y = T.upsample_x2(T.Tensor(x), axes=(2, 3, 4)).data
    np.testing.assert_allclose(y[:, :, ::2, ::2, ::2], x)


def test_upsample_3d_shape():
    x = T.Tensor(np.zeros((1, 1, 4, 4, 2)))
    assert T.upsample_x2(x, axes=(2, 3, 4)).shape == (1, 1, 8, 8, 4)


def trilinear_point_oracle(vol, target_shape):
    """Corner-aligned interpolation computed point by point."""
    src = vol.shape
    out = np.zeros(target_shape)
    for idx in np.ndindex(*target_shape):
        pos = []
        for ax in range(3):
            tgt = target_shape[ax]
            if tgt == 1:
                pos.append((src[ax] - 1) / 2.0)
            else:
                pos.append(idx[ax] * (src[ax] - 1) / (tgt - 1))
        acc = 0.0
        for dh in (0, 1):
            for dw in (0, 1):
                for dl in (0, 1):
                    corner = []
                    weight = 1.0
                    for ax, d in zip(range(3), (dh, dw, dl)):
                        lo = min(int(math.floor(pos[ax])), src[ax] - 1)
                        hi = min(lo + 1, src[ax] - 1)
                        frac = pos[ax] - lo
                        corner.append(hi if d else lo)
                        weight *= frac if d else (1.0 - frac)
                    acc += weight * vol[tuple(corner)]
        out[idx] = acc
    return out


def test_trilinear_constant():
    v = np.full((4, 4, 4), 3.5)
    out = T.trilinear_resample(v, (7, 3, 5))
    np.testing.assert_allclose(out, 3.5, rtol=1e-6)


def test_trilinear_linear_ramp():
    ramp = np.arange(5, dtype=np.float64)[:, None, None] * np.ones((5, 4, 3))
    out = T.trilinear_resample(ramp, (9, 7, 5))
    want = np.linspace(0, 4, 9)[:, None, None] * np.ones((9, 7, 5))
    np.testing.assert_allclose(out, want, atol=1e-6)


def test_trilinear_matches_point_oracle():
    v = rng(11).standard_normal((4, 4, 4))
    got = T.trilinear_resample(v, (7, 7, 7))
    np.testing.assert_allclose(got, trilinear_point_oracle(v, (7, 7, 7)), atol=1e-9)


def test_trilinear_rejects_zero_extent():
    with pytest.raises(T.ShapeError):
        T.trilinear_resample(np.zeros((4, 4, 4)), (0, 4, 4))


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = T.Tensor(rng(12).standard_normal((3, 4)), requires_grad=True)
    T.backward(T.tsum(x))
    np.testing.assert_allclose(x.grad, 1.0)


def test_backward_sum_of_squares():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    x = T.Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(T.mul(x, x))


def test_backward_accumulates_over_shared_leaf():
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    y = T.add(T.mul(x, x), T.mul(x, T.Tensor(np.array([3.0]))))
    T.backward(T.tsum(y))
    np.testing.assert_allclose(x.grad, [7.0])


# ---------------------------------------------------------------- adam


def test_adam_zero_grad_leaves_params_unchanged():
    p = T.Tensor(np.array([1.0, -2.0]))
    before = p.data.copy()
    T.adam_step([p], [np.zeros(2)], {}, lr=0.1)
    np.testing.assert_allclose(p.data, before)


def test_adam_first_step_magnitude():
    p = T.Tensor(np.array([0.5]))
    T.adam_step([p], [np.array([3.0])], {}, lr=0.01)
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(p.data, [0.5 - 0.01], rtol=1e-6)


def test_adam_three_step_trace_matches_hand_run():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = T.Tensor(np.array([1.0]))
    state = {}
    # hand-run oracle on f(x) = x^2, gradient 2x
    x, m, v = 1.0, 0.0, 0.0
    trace = []
    for t in range(1, 4):
        g = 2.0 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
        trace.append(x)
    got = []
    for _ in range(3):
        g = 2.0 * p.data
        T.adam_step([p], [g], state, lr=lr, beta1=b1, beta2=b2, eps=eps)
        got.append(float(p.data[0]))
    np.testing.assert_allclose(got, trace, rtol=1e-6)


def test_adam_rejects_shape_mismatch():
    p = T.Tensor(np.zeros(3))
    with pytest.raises(T.ShapeError):
        T.adam_step([p], [np.zeros(2)], {})


# ---------------------------------------------------------------- misc graph ops


def test_concat_and_slice_gradients():
    a = T.Tensor(rng(13).standard_normal((2, 3)), requires_grad=True, dtype=np.float64)
    b = T.Tensor(rng(14).standard_normal((2, 2)), requires_grad=True, dtype=np.float64)
    check_gradients(lambda a, b: T.tsum(T.mul(T.concat([a, b], axis=1),
                                              T.concat([a, b], axis=1))), [a, b])


def test_roll_roundtrip_and_gradient():
    x = rng(15).standard_normal((3, 4, 5))
    t = T.Tensor(x)
    y = T.roll(T.roll(t, (1, 2), (0, 2)), (-1, -2), (0, 2))
    np.testing.assert_array_equal(y.data, x)
    xs = T.Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    np.testing.assert_allclose(T.roll(xs, (1,), (0,)).data, [4, 1, 2, 3])


def test_forward_ops_are_pure():
    x = np.asarray(rng(16).standard_normal((2, 3, 4, 4, 2)), dtype=np.float32)
    w = np.asarray(rng(17).standard_normal((4, 3, 3, 3, 1)), dtype=np.float32)
    a = T.conv3d(T.Tensor(x), T.Tensor(w), (2, 2, 1), "same").data
    b = T.conv3d(T.Tensor(x), T.Tensor(w), (2, 2, 1), "same").data
    assert np.array_equal(a, b)


def test_debug_checks_flag_catches_nonfinite():
    T.set_debug_checks(True)
    try:
        with pytest.raises(FloatingPointError):
            T.tlog(T.Tensor(np.array([0.0])))
    finally:
        T.set_debug_checks(False)


def test_no_grad_blocks_graph():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y._parents


# ---------------------------------------------------------------- finite differences


@pytest.mark.parametrize("stride", [(1, 1, 1), (2, 2, 1)])
def test_conv3d_gradients(stride):
    g = rng(18)
    x = T.Tensor(g.standard_normal((1, 2, 5, 4, 3)), requires_grad=True, dtype=np.float64)
    w = T.Tensor(g.standard_normal((3, 2, 3, 3, 1)) * 0.5, requires_grad=True,
                 dtype=np.float64)
    check_gradients(lambda x, w: T.tsum(T.mul(T.conv3d(x, w, stride, "same"),
                                              T.conv3d(x, w, stride, "same"))), [x, w])


def test_linear_gradients():
    g = rng(19)
    x = T.Tensor(g.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
    w = T.Tensor(g.standard_normal((4, 2)), requires_grad=True, dtype=np.float64)
    b = T.Tensor(g.standard_normal(2), requires_grad=True, dtype=np.float64)
    check_gradients(lambda x, w, b: T.tsum(T.pow_scalar(T.linear(x, w, b), 2)), [x, w, b])


@pytest.mark.parametrize("op", [
    lambda x: T.tsum(T.mul(T.softmax(x, axis=-1), T.softmax(x, axis=-1))),
    lambda x: T.tsum(T.texp(T.log_softmax(x, axis=-1))),
    lambda x: T.tsum(T.pow_scalar(T.layer_norm(x), 2)),
    lambda x: T.tsum(T.tabs(x)),
    lambda x: T.tsum(T.leaky_relu(x, 0.01)),
])
def test_elementwise_op_gradients(op):
    x = rng(20).standard_normal((3, 5))
    x = np.where(np.abs(x) < 0.05, x + 0.2, x)  # keep |x| clear of the fd step
    x = T.Tensor(x, requires_grad=True, dtype=np.float64)
    check_gradients(op, [x])


def test_instance_norm_gradients():
    x = T.Tensor(rng(21).standard_normal((2, 2, 3, 3, 2)), requires_grad=True,
                 dtype=np.float64)
    check_gradients(lambda x: T.tsum(T.pow_scalar(T.instance_norm(x), 2)), [x])


def test_upsample_gradients():
    x = T.Tensor(rng(22).standard_normal((1, 2, 3, 3, 2)), requires_grad=True,
                 dtype=np.float64)
    check_gradients(lambda x: T.tsum(T.pow_scalar(T.upsample_x2(x, (2, 3, 4)), 2)), [x])
