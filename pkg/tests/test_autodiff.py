import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dualkd import autodiff as ad
from dualkd.autodiff import Tensor, finite_diff_gradcheck, nudge_from_kinks
from dualkd.errors import ConfigurationError, DimensionError, UsageError


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, w, b, pad, stride):
    B, C, T, F = x.shape
    O, _, kT, kF = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))
    To = (T + 2 * pad[0] - kT) // stride[0] + 1
    Fo = (F + 2 * pad[1] - kF) // stride[1] + 1
    out = np.zeros((B, O, To, Fo))
    for bi in range(B):
        for o in range(O):
            for t in range(To):
                for f in range(Fo):
                    acc = b[o]
                    for c in range(C):
                        for i in range(kT):
                            for j in range(kF):
                                acc += xp[bi, c, t * stride[0] + i, f * stride[1] + j] * w[o, c, i, j]
                    out[bi, o, t, f] = acc
    return out


# -- elementwise -------------------------------------------------------------

def test_sigmoid_of_zero_is_half():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_softmax_uniform_over_equal_logits():
    out = ad.softmax(Tensor([2.5, 2.5, 2.5])).data
    np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)


def test_mean_hand_value():
    assert ad.mean(Tensor([1.0, 2.0, 3.0, 6.0])).item() == 3.0


def test_detach_shares_values_and_drops_grad():
    x = leaf([1.0, 2.0])
    d = x.detach()
    assert not d.requires_grad and d.node is None
    assert np.shares_memory(d.data, x.data)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_broadcast_trailing_vector_and_scalar_grads():
    a = leaf(np.ones((2, 3)))
    b = leaf([1.0, 2.0, 3.0])
    s = leaf(2.0)
    ((a * b) * s).sum().backward()
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])
    np.testing.assert_allclose(s.grad, 12.0)


ELEMENTWISE_CASES = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "div": lambda a, b: ad.div(a, ad.add(ad.mul(b, b), 1.0)),
    "sigmoid": lambda a, b: ad.sigmoid(a),
    "tanh": lambda a, b: ad.tanh(a),
    "relu": lambda a, b: ad.relu(a),
    "leaky_relu": lambda a, b: ad.leaky_relu(a, 0.1),
    "exp": lambda a, b: ad.exp(a),
    "log": lambda a, b: ad.log(ad.add(ad.mul(a, a), 0.5)),
    "softmax": lambda a, b: ad.softmax(a, axis=-1),
    "concat": lambda a, b: ad.concat([a, b], axis=1),
    "mean": lambda a, b: ad.mean(a, axis=0, keepdims=True),
    "pow": lambda a, b: ad.power(ad.add(ad.mul(a, a), 1.0), 1.5),
    "transpose_reshape": lambda a, b: ad.reshape(ad.transpose(a), (-1,)),
    "getitem": lambda a, b: a[1:, ::2],
    "flip": lambda a, b: ad.flip(a, 1),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE_CASES))
def test_elementwise_gradcheck(name, rng):
    op = ELEMENTWISE_CASES[name]
    a = leaf(nudge_from_kinks(rng.normal(size=(3, 4)), 1e-6))
    b = leaf(rng.normal(size=(3, 4)))
    weights = rng.normal(size=op(a, b).shape)

    def f():
        return ad.sum_(ad.mul(op(a, b), Tensor(weights)))

    inputs = [a, b] if name in ("add", "sub", "mul", "div", "concat") else [a]
    assert finite_diff_gradcheck(f, inputs) < 1e-3


# -- matmul ------------------------------------------------------------------

def test_matmul_identity_and_hand_value():
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor(X)).data, X)
    np.testing.assert_array_equal((Tensor(X) @ Tensor([[1.0], [1.0]])).data, [[3.0], [7.0]])


def test_matmul_inner_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_gradcheck(rng):
    A = leaf(rng.normal(size=(3, 4)))
    B = leaf(rng.normal(size=(4, 5)))
    assert finite_diff_gradcheck(lambda: ad.sum_(A @ B), [A, B]) < 1e-4


def test_batched_matmul_gradcheck(rng):
    A = leaf(rng.normal(size=(2, 3, 4)))
    B = leaf(rng.normal(size=(4, 2)))
    W = Tensor(rng.normal(size=(2, 3, 2)))
    assert finite_diff_gradcheck(lambda: ad.sum_(ad.mul(A @ B, W)), [A, B]) < 1e-4


# -- conv2d ------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 1, 5, 6))
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_center_is_nine():
    out = ad.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 0, 2, 2] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0


@pytest.mark.parametrize("pad,stride", [((1, 1), (1, 1)), ((0, 1), (2, 1)), ((2, 0), (1, 2))])
def test_conv_matches_naive_loop(rng, pad, stride):
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=pad, stride=stride).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, pad, stride), atol=1e-10, rtol=0)


def test_conv_matches_naive_loop_largest_case(rng):
    x = rng.normal(size=(2, 4, 16, 16))
    w = rng.normal(size=(3, 4, 3, 3))
    b = rng.normal(size=3)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, (1, 1), (1, 1)), atol=1e-10, rtol=0)


def test_conv_gradcheck(rng):
    x = leaf(rng.normal(size=(2, 2, 5, 4)))
    w = leaf(rng.normal(size=(3, 2, 3, 3)))
    b = leaf(rng.normal(size=3))
    W = Tensor(rng.normal(size=(2, 3, 3, 2)))
    f = lambda: ad.sum_(ad.mul(ad.conv2d(x, w, b, padding=1, stride=(2, 2)), W))
    assert finite_diff_gradcheck(f, [x, w, b]) < 1e-3


def test_conv_sigmoid_mean_gradcheck(rng):
    x = leaf(rng.normal(size=(1, 2, 6, 6)))
    w = leaf(rng.normal(size=(2, 2, 3, 3)))
    b = leaf(rng.normal(size=2))
    f = lambda: ad.mean(ad.sigmoid(ad.conv2d(x, w, b, padding=1)))
    assert finite_diff_gradcheck(f, [x, w, b]) < 1e-3


def test_conv_output_nonpositive_is_configuration_error():
    with pytest.raises(ConfigurationError):
        ad.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# -- batch norm --------------------------------------------------------------

def test_batch_norm_train_normalises(rng):
    x = Tensor(rng.normal(3.0, 2.0, size=(4, 3, 5, 6)))
    out = ad.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), ad.RunningStats(3)).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    var = x.data.var(axis=(0, 2, 3))
    # the fixed epsilon shrinks the variance by var / (var + eps)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)) * (var + ad.BN_EPS) / var, 1.0, atol=1e-6)


def test_batch_norm_eval_identity_stats(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    out = ad.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), ad.RunningStats(3), mode="eval")
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + ad.BN_EPS), rtol=1e-12)
    np.testing.assert_allclose(out.data, x, atol=1e-5 * np.abs(x).max())


def test_batch_norm_running_stats_update(rng):
    x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
    rs = ad.RunningStats(2)
    ad.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rs)
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(rs.mean, 0.1 * mu)
    np.testing.assert_allclose(rs.var, 0.9 + 0.1 * var)


def test_batch_norm_zero_variance_is_finite():
    out = ad.batch_norm(Tensor(np.ones((2, 1, 3, 3))), Tensor(np.ones(1)), Tensor(np.zeros(1)))
    assert np.all(np.isfinite(out.data)) and np.all(out.data == 0)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_gradcheck(rng, mode):
    x = leaf(rng.normal(size=(3, 2, 4, 3)))
    g = leaf(rng.normal(size=2))
    b = leaf(rng.normal(size=2))
    rs = ad.RunningStats(2)
    rs.mean[:] = [0.3, -0.2]
    rs.var[:] = [1.5, 0.7]
    W = Tensor(rng.normal(size=(3, 2, 4, 3)))
    f = lambda: ad.sum_(ad.mul(ad.batch_norm(x, g, b, rs, mode=mode, update_running=False), W))
    assert finite_diff_gradcheck(f, [x, g, b]) < 1e-3


# -- pooling -----------------------------------------------------------------

def test_adaptive_identity_and_hand_value():
    x = np.arange(8.0).reshape(1, 8, 1)
    np.testing.assert_array_equal(ad.adaptive_avg_time(Tensor(x), 8).data, x)
    out = ad.adaptive_avg_time(Tensor(np.array([[[1.0], [2.0], [3.0], [4.0]]])), 2).data
    np.testing.assert_array_equal(out.ravel(), [1.5, 3.5])


def test_adaptive_mean_preserved_divisible(rng):
    x = rng.normal(size=(2, 12, 3))
    out = ad.adaptive_avg_time(Tensor(x), 4).data
    np.testing.assert_allclose(out.mean(axis=1), x.mean(axis=1), atol=1e-12)


def test_adaptive_rejects_upsampling():
    with pytest.raises(ConfigurationError):
        ad.adaptive_avg_time(Tensor(np.ones((1, 3, 2))), 4)


def test_adaptive_bins_partition():
    edges = ad.nn.adaptive_bins(126, 63)
    assert edges[0] == 0 and edges[-1] == 126
    sizes = np.diff(edges)
    assert sizes.min() >= 1 and sizes.max() - sizes.min() <= 1


@pytest.mark.parametrize("target", [1, 3, 5])
def test_adaptive_gradcheck(rng, target):
    x = leaf(rng.normal(size=(2, 7, 3)))
    W = Tensor(rng.normal(size=(2, target, 3)))
    f = lambda: ad.sum_(ad.mul(ad.pool(x, "adaptive_avg_time", target=target), W))
    assert finite_diff_gradcheck(f, [x]) < 1e-6


def test_avg_pool_values_and_gradcheck(rng):
    x = np.arange(16.0).reshape(1, 1, 2, 8)
    out = ad.avg_pool2d(Tensor(x), (1, 2)).data
    np.testing.assert_array_equal(out[0, 0, 0], [0.5, 2.5, 4.5, 6.5])
    xt = leaf(rng.normal(size=(2, 2, 3, 5)))
    W = Tensor(rng.normal(size=(2, 2, 3, 2)))
    assert finite_diff_gradcheck(lambda: ad.sum_(ad.mul(ad.avg_pool2d(xt, (1, 2)), W)), [xt]) < 1e-6


# -- GRU ---------------------------------------------------------------------

def gru_params(rng, D, H, scale=0.5):
    return [
        leaf(rng.normal(scale=scale, size=(D, 3 * H))),
        leaf(rng.normal(scale=scale, size=(H, 3 * H))),
        leaf(rng.normal(scale=scale, size=3 * H)),
        leaf(rng.normal(scale=scale, size=3 * H)),
    ]


def gru_cell_composite(x_t, h, w_ih, w_hh, b_ih, b_hh):
    """One GRU step assembled from primitive ops, independent of the fused kernel."""
    H = h.shape[-1]
    gi = ad.linear(x_t, w_ih, b_ih)
    gh = ad.linear(h, w_hh, b_hh)
    z = ad.sigmoid(gi[:, :H] + gh[:, :H])
    r = ad.sigmoid(gi[:, H : 2 * H] + gh[:, H : 2 * H])
    n = ad.tanh(gi[:, 2 * H :] + r * gh[:, 2 * H :])
    return (1.0 - z) * n + z * h


def test_gru_zero_params_zero_output():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 3)))
    zeros = [Tensor(np.zeros(s)) for s in [(3, 12), (4, 12), (12,), (12,)]]
    assert np.all(ad.gru(x, *zeros).data == 0)


def test_gru_single_step_equals_cell(rng):
    p = gru_params(rng, 3, 4)
    x = Tensor(rng.normal(size=(2, 1, 3)))
    fused = ad.gru(x, *p).data[:, 0]
    cell = gru_cell_composite(Tensor(x.data[:, 0]), Tensor(np.zeros((2, 4))), *p).data
    np.testing.assert_allclose(fused, cell, atol=1e-14)


@pytest.mark.parametrize("reverse", [False, True])
def test_gru_matches_unrolled_composite(rng, reverse):
    p = gru_params(rng, 3, 2)
    x = leaf(rng.normal(size=(2, 5, 3)))
    W = Tensor(rng.normal(size=(2, 5, 2)))

    def unrolled():
        h = Tensor(np.zeros((2, 2)))
        outs = [None] * 5
        steps = range(4, -1, -1) if reverse else range(5)
        for t in steps:
            h = gru_cell_composite(x[:, t], h, *p)
            outs[t] = h
        return ad.concat([ad.reshape(o, (2, 1, 2)) for o in outs], axis=1)

    fused = ad.gru(x, *p, reverse=reverse)
    comp = unrolled()
    np.testing.assert_allclose(fused.data, comp.data, atol=1e-13)
    ad.sum_(ad.mul(fused, W)).backward()
    g_fused = [x.grad.copy()] + [q.grad.copy() for q in p]
    for t in [x, *p]:
        t.grad = None
    ad.sum_(ad.mul(comp, W)).backward()
    for a, b in zip(g_fused, [x.grad] + [q.grad for q in p]):
        np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("bidirectional", [False, True])
def test_gru_gradcheck(rng, bidirectional):
    fwd = gru_params(rng, 3, 2)
    bwd = gru_params(rng, 3, 2)
    x = leaf(rng.normal(size=(2, 3, 3)))
    params = [fwd, bwd] if bidirectional else [fwd]
    out_w = 4 if bidirectional else 2
    W = Tensor(rng.normal(size=(2, 3, out_w)))
    f = lambda: ad.sum_(ad.mul(ad.gru_layer(x, params, bidirectional), W))
    inputs = [x] + [t for grp in params for t in grp]
    assert finite_diff_gradcheck(f, inputs) < 1e-3


# -- backward contract -------------------------------------------------------

def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    ad.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_through_detach_leaves_grad_absent():
    x = leaf([1.0, 2.0])
    ad.sum_(ad.mul(x.detach(), 3.0)).backward()
    assert x.grad is None


def test_backward_hand_calculus():
    x = leaf(3.0)
    (2.0 * x * x).backward()
    assert x.grad == 12.0


def test_backward_non_scalar_is_usage_error():
    with pytest.raises(UsageError):
        (leaf([1.0, 2.0]) * 2.0).backward()


def test_backward_accumulates_across_calls():
    x = leaf([1.0, -2.0])
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [4.0, -8.0])


def test_shared_subexpression_accumulates(rng):
    """A DAG reusing one node equals the same graph with the subexpression duplicated."""
    xv = rng.normal(size=4)
    x = leaf(xv)
    s = ad.tanh(x * 2.0)
    (s * s + s).sum().backward()
    shared = x.grad.copy()
    x2 = leaf(xv)
    s1, s2, s3 = (ad.tanh(x2 * 2.0) for _ in range(3))
    (s1 * s2 + s3).sum().backward()
    np.testing.assert_allclose(shared, x2.grad, atol=1e-15)


def test_detach_severs_upstream_exactly(rng):
    x = leaf(rng.normal(size=3))
    y = leaf(rng.normal(size=3))
    h = ad.tanh(x * y)
    loss = ad.sum_(h.detach() * y) + ad.sum_(y * y)
    loss.backward()
    assert x.grad is None
    np.testing.assert_array_equal(y.grad, h.data + 2 * y.data)


# -- gradcheck harness -------------------------------------------------------

def test_gradcheck_sum_of_squares(rng):
    x = leaf(rng.normal(size=10))
    assert finite_diff_gradcheck(lambda: ad.sum_(x * x), [x], eps=1e-5) < 1e-8


def test_gradcheck_detects_wrong_backward():
    x = leaf([0.3, -0.7])
    bad = ad.tensor.make_result(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")
    assert finite_diff_gradcheck(lambda: ad.sum_(ad.tensor.make_result(
        x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")), [x]) > 0.4
    assert bad.node.op == "bad_square"


# -- properties --------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_is_distribution(x):
    out = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 8), st.integers(3, 8), st.integers(0, 10_000))
def test_conv_matches_naive_property(C, O, T, F, seed):
    r = np.random.default_rng(seed)
    x, w, b = r.normal(size=(1, C, T, F)), r.normal(size=(O, C, 3, 3)), r.normal(size=O)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, (1, 1), (1, 1)), atol=1e-10, rtol=0)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


def test_float32_mode_keeps_dtype():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = ad.sigmoid(x * 2.0 + 1.0)
    assert y.dtype == np.float32
    y.sum().backward()
    assert x.grad.dtype == np.float32
