import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import posegauss.tensorcore as tc
from posegauss.tensorcore import (
    GRUParams,
    LayerParams,
    ResidualParams,
    SEParams,
    conv_gru_step,
    grad_check,
    residual_block,
    se_block,
)

TOL = 1e-5


def leaf(rng, *shape, lo=-1.0, hi=1.0):
    return tc.param(rng.uniform(lo, hi, size=shape))


def weighted_sum(t, w):
    return tc.tsum(t * w)


@pytest.mark.parametrize(
    "op",
    ["add", "sub", "mul", "div", "exp", "log", "sqrt", "sigmoid", "tanh", "softplus", "sin", "cos", "power"],
)
def test_elementwise_grads(op, rng):
    a = leaf(rng, 3, 4, lo=0.3, hi=1.5)
    b = leaf(rng, 4, lo=0.3, hi=1.5)
    w = rng.normal(size=(3, 4))
    fns = {
        "add": lambda: tc.add(a, b),
        "sub": lambda: tc.sub(a, b),
        "mul": lambda: tc.mul(a, b),
        "div": lambda: tc.div(a, b),
        "exp": lambda: tc.exp(a),
        "log": lambda: tc.log(a),
        "sqrt": lambda: tc.sqrt(a),
        "sigmoid": lambda: tc.sigmoid(a),
        "tanh": lambda: tc.tanh(a),
        "softplus": lambda: tc.softplus(a),
        "sin": lambda: tc.sin(a),
        "cos": lambda: tc.cos(a),
        "power": lambda: tc.power(a, 2.5),
    }
    assert grad_check(lambda: weighted_sum(fns[op](), w), [a, b] if op in ("add", "sub", "mul", "div") else [a]) < TOL


def test_reduction_and_shape_grads(rng):
    a = leaf(rng, 2, 3, 4)
    w = rng.normal(size=(4, 3))
    assert grad_check(lambda: weighted_sum(tc.transpose(tc.tmean(a, axis=0), (1, 0)), w), [a]) < TOL
    assert grad_check(lambda: tc.tsum(tc.index(a, (slice(None), 1)) ** 2), [a]) < TOL
    b = leaf(rng, 2, 3, 2)
    w2 = rng.normal(size=(2, 3, 6))
    assert grad_check(lambda: weighted_sum(tc.concat([a, b], axis=-1), w2), [a, b]) < TOL


def test_matmul_grad(rng):
    a = leaf(rng, 2, 3, 4)
    b = leaf(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    assert grad_check(lambda: weighted_sum(tc.matmul(a, b), w), [a, b]) < TOL


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_conv_grad(stride, padding, rng):
    x = leaf(rng, 7, 6, 3)
    w = leaf(rng, 3, 3, 3, 4)
    b = leaf(rng, 4)
    out_shape = tc.conv2d_raw(x, w, b, stride, padding).shape
    g = rng.normal(size=out_shape)
    assert grad_check(lambda: weighted_sum(tc.conv2d_raw(x, w, b, stride, padding), g), [x, w, b]) < TOL


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(5, 6, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    out = tc.conv2d_raw(tc.Tensor(x), tc.Tensor(w), None, 1, 1).data
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros((5, 6, 3))
    for i in range(5):
        for j in range(6):
            ref[i, j] = np.einsum("abc,abcd->d", xp[i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_se_residual_gru_grads(rng):
    x = leaf(rng, 6, 6, 4)
    se = SEParams.init(4, 2, rng, dtype=np.float64)
    g = rng.normal(size=(6, 6, 4))
    se_leaves = [se.squeeze.weight, se.excite.weight, se.excite.bias]
    assert grad_check(lambda: weighted_sum(se_block(x, se), g), [x] + se_leaves) < TOL

    res = ResidualParams.init(4, 4, rng, stride=2, reduction=2, dtype=np.float64)
    g2 = rng.normal(size=residual_block(x, res).shape)
    assert grad_check(lambda: weighted_sum(residual_block(x, res), g2), [x, res.conv1.weight, res.proj.weight]) < TOL

    gru = GRUParams.init(3, 4, rng, dtype=np.float64)
    h = leaf(rng, 6, 6, 3)
    g3 = rng.normal(size=(6, 6, 3))
    leaves = [h, x, gru.update.weight, gru.reset.weight, gru.candidate.weight]
    assert grad_check(lambda: weighted_sum(conv_gru_step(h, x, gru), g3), leaves) < TOL


def test_resampling_grads(rng):
    feat = leaf(rng, 5, 6, 2)
    # keep away from integer coordinates where bilinear weights kink
    x = tc.param(rng.uniform(0.1, 0.9, size=(3, 4)) + rng.integers(-1, 5, size=(3, 4)))
    y = tc.param(rng.uniform(0.1, 0.9, size=(3, 4)) + rng.integers(-1, 4, size=(3, 4)))
    g = rng.normal(size=(3, 4, 2))
    assert grad_check(lambda: weighted_sum(tc.sample_bilinear(feat, x, y), g), [feat, x, y]) < TOL

    g2 = rng.normal(size=(9, 11, 2))
    assert grad_check(lambda: weighted_sum(tc.resize_bilinear(feat, 9, 11), g2), [feat]) < TOL

    vol = leaf(rng, 4, 5, 7)
    pos = tc.param(rng.uniform(0.1, 0.9, size=(4, 5, 3)) + rng.integers(-1, 7, size=(4, 5, 3)))
    g3 = rng.normal(size=(4, 5, 3))
    assert grad_check(lambda: weighted_sum(tc.sample_linear_last(vol, pos), g3), [vol, pos]) < TOL


def test_gradient_accumulates_over_reuse(rng):
    a = leaf(rng, 3)
    with tc.Tape() as tape:
        out = tc.tsum(a * a + a)
    tc.backprop(tape, output=out)
    np.testing.assert_allclose(a.grad, 2 * a.data + 1)


def test_bilinear_sampling_at_integer_pixels_reads_values(rng):
    f = rng.normal(size=(4, 5, 3))
    ys, xs = np.mgrid[0:4, 0:5].astype(float)
    out = tc.sample_bilinear(tc.Tensor(f), tc.Tensor(xs), tc.Tensor(ys)).data
    np.testing.assert_allclose(out, f, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-3, 3)),
    arrays(np.float64, st.integers(1, 4), elements=st.floats(-3, 3)),
)
def test_broadcast_add_grad_sums_over_broadcast_axes(a, b):
    if a.shape[-1] != b.shape[0]:
        b = np.resize(b, a.shape[-1])
    ta, tb = tc.param(a.copy()), tc.param(b.copy())
    with tc.Tape() as tape:
        out = tc.tsum(ta + tb)
    tc.backprop(tape, output=out)
    np.testing.assert_array_equal(ta.grad, np.ones_like(a))
    np.testing.assert_array_equal(tb.grad, np.full_like(b, a.shape[0]))


def test_layer_params_iteration_is_canonical(rng):
    p = ResidualParams.init(4, 8, rng, dtype=np.float64)
    names = [n for n, _ in tc.iter_params(p)]
    assert names == [n for n, _ in tc.iter_params(p)]
    assert names[0] == "conv1.weight" and "se.squeeze.weight" in names and names[-1] == "proj.bias"
    assert isinstance(p.conv1, LayerParams)
