import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bayesattack import numcore as nc
from bayesattack.numcore import ContractViolation, GradTape, RngStream, Tensor

from conftest import rel_err


def test_square_gradient():
    value, (g,) = nc.grad(lambda x: x * x, np.array(3.0))
    assert value == 9.0 and g == 6.0


def test_product_rule():
    _, (gx, gy) = nc.grad(lambda x, y: x * y, np.array(2.0), np.array(5.0))
    assert (gx, gy) == (5.0, 2.0)


def test_cross_entropy_gradient_matches_central_difference():
    logits = np.array([[1.0, 0.0]])
    labels = np.array([0])
    _, (g,) = nc.grad(lambda z: nc.softmax_cross_entropy(z, labels), logits)
    fd = nc.finite_diff_gradient(lambda z: nc.softmax_cross_entropy(z, labels).data, logits, h=1e-6)
    assert rel_err(g, fd) < 1e-6
    p = np.exp(1.0) / (np.exp(1.0) + 1.0)
    np.testing.assert_allclose(g, [[p - 1.0, 1.0 - p]], rtol=1e-12)


def test_unreachable_leaf_gets_zero_gradient():
    tape = GradTape()
    a = tape.watch(np.array([1.0, 2.0]))
    b = tape.watch(np.array([[3.0]]))
    grads = tape.backward((a * a).sum())
    np.testing.assert_array_equal(grads[b.node], np.zeros((1, 1)))
    np.testing.assert_array_equal(grads[a.node], [2.0, 4.0])


def test_non_scalar_loss_is_rejected():
    tape = GradTape()
    a = tape.watch(np.ones(3))
    with pytest.raises(ContractViolation):
        tape.backward(a * 2.0)


def test_cycle_is_detected():
    tape = GradTape()
    a = tape.watch(np.array(1.0))
    out = a * 2.0
    # corrupt the tape so a node consumes a later one
    out_id, _, vjp = tape.nodes[-1]
    tape.nodes[-1] = (out_id, (out_id + 5,), vjp)
    with pytest.raises(nc.TapeError):
        tape.backward(out)


def test_non_finite_values_rejected_at_creation():
    with pytest.raises(ContractViolation):
        nc.tensor([1.0, np.nan])
    with pytest.raises(ContractViolation):
        nc.tensor([1.0, 2.0, 3.0], shape=(2, 2))


def test_finite_difference_examples():
    assert abs(nc.finite_diff_gradient(lambda x: float(x[0] ** 2), np.array([3.0]))[0] - 6.0) < 1e-8
    assert abs(nc.finite_diff_gradient(lambda x: float(np.sin(x[0])), np.array([0.0]))[0] - 1.0) < 1e-9
    with pytest.raises(ContractViolation):
        nc.finite_diff_gradient(lambda x: 0.0, np.zeros(1), h=0.0)
    with pytest.raises(FloatingPointError):
        nc.finite_diff_gradient(lambda x: float("inf"), np.zeros(1))


def test_normal_sample_degenerate_and_negative_std():
    s = RngStream(0, "n")
    np.testing.assert_array_equal(nc.normal_sample(s, [4], 0.0, 0.0).data, np.zeros(4))
    with pytest.raises(ContractViolation):
        nc.normal_sample(s, [4], 0.0, -1.0)


def test_degenerate_sample_keeps_stream_aligned():
    a, b = RngStream(3, "x"), RngStream(3, "x")
    nc.normal_sample(a, [7], 0.0, 0.0)
    nc.normal_sample(b, [7], 0.0, 1.0)
    assert a.counter == b.counter
    np.testing.assert_array_equal(a.normal(5), b.normal(5))


def test_stream_reproducible_and_labels_independent():
    x = RngStream(42, "w").normal((1000,))
    y = RngStream(42, "w").normal((1000,))
    z = RngStream(42, "e").normal((1000,))
    np.testing.assert_array_equal(x, y)
    assert abs(np.corrcoef(x, z)[0, 1]) < 0.1


def test_stream_counter_resumes():
    s = RngStream(1, "c")
    s.uniform(8)
    tail = s.uniform(8)
    resumed = RngStream(1, "c", counter=2)
    np.testing.assert_array_equal(resumed.uniform(8), tail)


def test_normal_law_of_large_numbers():
    z = RngStream(9, "lln").normal((200_000,))
    assert abs(z.mean()) < 5 / np.sqrt(len(z))
    assert abs(z.var() - 1.0) < 0.02
    assert stats.kstest(z[:20000], "norm").pvalue > 1e-3


def test_uniform_open_interval():
    u = RngStream(5, "u").uniform((100_000,))
    assert u.min() > 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01


def test_sign_of_zero_is_zero():
    np.testing.assert_array_equal(nc.sign(np.array([-2.0, 0.0, 3.0])), [-1.0, 0.0, 1.0])


def _fd_check(f, *arrays):
    _, grads = nc.grad(f, *arrays)
    for k, (a, g) in enumerate(zip(arrays, grads)):
        def fk(v, k=k):
            args = [Tensor(np.asarray(x, dtype=float)) for x in arrays]
            args[k] = Tensor(v)
            return f(*args).data
        assert rel_err(g, nc.finite_diff_gradient(fk, a)) < 1e-6


def test_primitive_gradients(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    c = rng.uniform(0.5, 2.0, size=(3, 4))
    _fd_check(lambda x, y: nc.tsum(nc.tanh(nc.matmul(x, y))), a, b)
    _fd_check(lambda x, y: nc.tsum(nc.div(nc.exp(x), y)), a, c)
    _fd_check(lambda x: nc.tsum(nc.log(x) * nc.sin(x)), c)
    _fd_check(lambda x: nc.mean(nc.gelu(x) - nc.relu(x)), a + 0.05)
    _fd_check(lambda x: nc.tsum(nc.transpose(x, (1, 0))[1:3] * 2.0), a)
    _fd_check(lambda x: nc.tsum(nc.log_softmax(x) * nc.log_softmax(x)), a)
    _fd_check(lambda x, y: nc.tsum(nc.add(x, y[0]) - nc.sub(y[:, :1], x)), a, rng.normal(size=(3, 4)))


def test_fancy_index_accumulates(rng):
    a = rng.normal(size=5)
    idx = np.array([0, 0, 3])
    _, (g,) = nc.grad(lambda x: nc.tsum(nc.getitem(x, idx)), a)
    np.testing.assert_array_equal(g, [2.0, 0.0, 0.0, 1.0, 0.0])


def test_im2col_gradient(rng):
    x = rng.normal(size=(2, 5, 5, 2))
    w = rng.normal(size=(18,))
    _fd_check(lambda t: nc.tsum(nc.tanh(nc.matmul(nc.im2col(t, 3, 2, 1), nc.reshape(Tensor(w), (18, 1))))), x)


def test_im2col_matches_direct_convolution(rng):
    x = rng.normal(size=(1, 4, 4, 1))
    cols = nc.im2col(x, 3, 1, 0).data
    direct = np.array([[x[0, i:i + 3, j:j + 3, 0].reshape(-1) for j in range(2)] for i in range(2)])
    np.testing.assert_array_equal(cols[0], direct)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.floats(-2, 2), st.floats(-2, 2))
def test_gradient_is_linear_in_the_loss(xs, alpha, beta):
    x = np.array(xs)
    f = lambda t: nc.tsum(t * t)
    g = lambda t: nc.tsum(nc.sin(t))
    _, (gf,) = nc.grad(f, x)
    _, (gg,) = nc.grad(g, x)
    _, (gc,) = nc.grad(lambda t: f(t) * alpha + g(t) * beta, x)
    np.testing.assert_allclose(gc, alpha * gf + beta * gg, rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**63 - 1), st.text(max_size=8), st.integers(1, 50))
def test_stream_determinism_property(seed, label, n):
    assert np.array_equal(RngStream(seed, label).normal(n), RngStream(seed, label).normal(n))
