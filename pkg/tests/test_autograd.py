import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drau import autograd as ag
from drau.autograd import Tensor
from drau.errors import ConfigError, ContractError, DegenerateInputError, DimensionError


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_matmul_values_and_grads():
    a = leaf([[1, 2], [3, 4]])
    b = leaf([[5, 6], [7, 8]])
    out = ag.matmul(a, b)
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])
    out.sum().backward()
    np.testing.assert_array_equal(a.grad, [[11, 15], [11, 15]])
    np.testing.assert_array_equal(b.grad, [[4, 4], [6, 6]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ag.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


def test_fan_out_accumulates():
    x = leaf(3.0)
    y = x * x + x
    grads = ag.backward(y)
    assert grads[x] == pytest.approx(7.0)


def test_grad_accumulates_across_backward_calls():
    x = leaf([1.0, 2.0])
    (x * 2).sum().backward()
    (x * 3).sum().backward()
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])


def test_broadcast_grad_is_reduced():
    x = leaf(np.ones((3, 4)))
    b = leaf(np.ones(4))
    (x + b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        ag.backward(leaf([1.0, 2.0]) * 2)


def test_prelu_values():
    a = Tensor(0.25)
    assert ag.prelu(Tensor(3.0), a).item() == 3.0
    assert ag.prelu(Tensor(-2.0), a).item() == -0.5


def test_prelu_slope_grad_matches_fd():
    x = Tensor(np.array([-2.0]))
    a = leaf([0.25])
    err = ag.grad_check(lambda: ag.prelu(x, a).sum(), a)
    assert err < 1e-6
    ag.prelu(x, a).sum().backward()
    assert a.grad[0] == pytest.approx(-2.0)


def test_prelu_bad_slope_shape():
    with pytest.raises(DimensionError):
        ag.prelu(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_prelu_kink_takes_positive_branch():
    x = leaf([0.0])
    ag.prelu(x, Tensor([0.25])).sum().backward()
    assert x.grad[0] == 1.0


def test_softmax_examples():
    np.testing.assert_allclose(ag.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    y = ag.softmax(Tensor([1000.0, 0.0])).data
    assert y[0] == pytest.approx(1.0) and np.isfinite(y).all()
    masked = ag.softmax(Tensor([1.0, 2.0, 3.0]), mask=[True, True, False]).data
    assert masked[2] == 0.0
    assert masked.sum() == pytest.approx(1.0, abs=1e-12)


def test_softmax_degenerate():
    with pytest.raises(DegenerateInputError):
        ag.softmax(Tensor([1.0, 2.0]), mask=[False, False])
    with pytest.raises(DimensionError):
        ag.softmax(Tensor(np.zeros(0)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    y = ag.softmax(Tensor(x)).data
    assert (y >= 0).all()
    assert y.sum() == pytest.approx(1.0, abs=1e-9)


def test_l2_normalize():
    np.testing.assert_allclose(ag.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])
    assert (ag.l2_normalize(Tensor([0.0, 0.0])).data == 0).all()


def test_concat_shapes():
    out = ag.concat([Tensor(np.ones((4, 3))), Tensor(np.ones((4, 5)))], axis=-1)
    assert out.shape == (4, 8)
    with pytest.raises(DimensionError):
        ag.concat([Tensor(np.ones((4, 3))), Tensor(np.ones((5, 3)))], axis=-1)


def test_signed_sqrt():
    np.testing.assert_allclose(ag.signed_sqrt(Tensor([-4.0, 0.0, 9.0])).data, [-2, 0, 3])


def test_dropout_eval_is_identity_and_p1_rejected():
    x = Tensor(np.arange(5.0))
    assert ag.dropout(x, 0.3, False, None) is not None
    np.testing.assert_array_equal(ag.dropout(x, 0.3, False, None).data, x.data)
    with pytest.raises(ConfigError):
        ag.dropout(x, 1.0, True, np.random.default_rng(0))


def test_dropout_expectation():
    rng = np.random.default_rng(0)
    x = Tensor(np.full(20000, 2.0))
    y = ag.dropout(x, 0.3, True, rng).data
    # each entry is 0 or 2/0.7; the mean estimate has std 2*sqrt(0.3/0.7)/sqrt(n)
    sigma = 2.0 * np.sqrt(0.3 / 0.7) / np.sqrt(y.size)
    assert abs(y.mean() - 2.0) < 3 * sigma


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with ag.no_grad():
        y = x * 2
    assert y.op == "leaf" or not y.requires_grad


def test_graph_is_topological():
    x = leaf([1.0, 2.0])
    y = (x * 2).tanh().sum()
    records = ag.graph(y)
    ids = [r.output for r in records]
    assert ids == sorted(ids)
    for r in records:
        assert all(i < r.output for i in r.inputs)


def test_grad_check_linear_is_exact():
    x = leaf(np.random.default_rng(0).normal(size=5))
    assert ag.grad_check(lambda: x.sum(), x) < 1e-10


def test_grad_check_prelu_without_crossings():
    x = leaf([-1.5, -0.4, 0.7, 2.0])
    assert ag.grad_check(lambda: ag.prelu(x, Tensor([0.25])).sum(), x) < 1e-6


def test_grad_check_rejects_vector_output():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        ag.grad_check(lambda: x * 2, x)


def test_grad_check_skips_kink_crossings():
    x = leaf([1e-7, -1e-7])
    stats = {}
    err = ag.grad_check(lambda: ag.prelu(x, Tensor([0.25])).sum(), x, stats=stats)
    assert err == 0.0
    assert stats["skipped_branch"] == 2


@pytest.mark.parametrize("op", [ag.tanh, ag.sigmoid, ag.exp])
def test_unary_grads(op):
    x = leaf(np.random.default_rng(1).normal(size=(3, 2)))
    assert ag.grad_check(lambda: (op(x) * Tensor([[1.0, -2.0]])).sum(), x) < 1e-6


def test_sigmoid_extremes_stay_finite():
    y = ag.sigmoid(Tensor([-800.0, 800.0])).data
    np.testing.assert_array_equal(y, [0.0, 1.0])


def test_getitem_fancy_index_accumulates():
    x = leaf([1.0, 2.0, 3.0])
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])
