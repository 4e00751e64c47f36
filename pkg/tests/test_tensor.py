from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vtar import tensor as T
from vtar.errors import DomainError, ShapeError
from vtar.tensor import Tensor


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- matmul ---------------------------------------------------------------------------

def test_matmul_identity():
    a = t64([[1, 2], [3, 4]])
    assert np.array_equal((t64(np.eye(2)) @ a).data, a.data)


def test_matmul_zero():
    a = t64(np.random.default_rng(0).normal(size=(3, 2)))
    assert np.array_equal((a @ t64(np.zeros((2, 4)))).data, np.zeros((3, 4)))


def test_matmul_hand_product():
    out = t64([[1, 2], [3, 4]]) @ t64([[5, 6], [7, 8]])
    assert np.array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        t64(np.ones((2, 3))) @ t64(np.ones((2, 3)))


def test_matmul_backward():
    a, b = t64([[1.0, 2.0]], grad=True), t64([[3.0], [4.0]], grad=True)
    (a @ b).sum().backward()
    assert np.array_equal(a.grad, [[3.0, 4.0]])
    assert np.array_equal(b.grad, [[1.0], [2.0]])


# -- softmax --------------------------------------------------------------------------

@pytest.mark.parametrize("tau", [0.07, 1.0, 5.0])
def test_softmax_constant_row_is_uniform(tau):
    out = T.softmax(t64([3.0, 3.0, 3.0, 3.0]), tau)
    assert np.allclose(out.data, 0.25, atol=1e-12)


def test_softmax_limit():
    assert np.allclose(T.softmax(t64([100.0, 0.0, 0.0])).data, [1, 0, 0], atol=1e-6)


def test_softmax_two_values():
    expected = np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum()
    out = T.softmax(t64([1.0, 2.0])).data
    assert np.allclose(out, expected, atol=1e-12)
    assert out[0] == pytest.approx(0.2689414213699951)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(tau):
    with pytest.raises(DomainError):
        T.softmax(t64([1.0, 2.0]), tau)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
              elements=st.integers(-400, 400).map(lambda v: v / 8)),
       st.floats(0.01, 100))
def test_softmax_rows_sum_to_one_and_keep_argmax(z, tau):
    # logits on a 1/8 grid so the top gap stays resolvable after dividing by tau
    out = T.softmax(Tensor(z), tau).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    assert np.array_equal(np.argmax(out, axis=-1), np.argmax(z, axis=-1))


# -- layer norm -----------------------------------------------------------------------

def _ln(x, eps=1e-5):
    d = np.asarray(x, dtype=np.float64).shape[-1]
    return T.layer_norm(t64(x), t64(np.ones(d)), t64(np.zeros(d)), eps).data


def test_layer_norm_constant_slice():
    assert np.array_equal(_ln([[2.0, 2.0, 2.0]]), np.zeros((1, 3)))


def test_layer_norm_symmetric_pair():
    assert np.allclose(_ln([-1.0, 1.0]), np.array([-1.0, 1.0]) / math.sqrt(1 + 1e-5), atol=1e-12)


def test_layer_norm_hand_value():
    assert np.allclose(_ln([1.0, 2.0, 3.0]), [-1.2247, 0.0, 1.2247], atol=1e-4)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 16)), elements=st.floats(-10, 10)))
def test_layer_norm_standardises(x):
    if np.any(x.std(axis=-1) < 1e-2):
        return
    out = _ln(x)
    assert np.allclose(out.mean(axis=-1), 0, atol=1e-5)
    var = x.var(axis=-1)
    assert np.allclose(out.var(axis=-1), var / (var + 1e-5), atol=1e-5)


def test_layer_norm_gain_bias():
    out = T.layer_norm(t64([1.0, 3.0]), t64([2.0, 2.0]), t64([1.0, -1.0])).data
    assert np.allclose(out, [1 - 2 / math.sqrt(1 + 1e-5), -1 + 2 / math.sqrt(1 + 1e-5)])


# -- l2 normalise and cosine ------------------------------------------------------------

def test_l2_normalize_values():
    assert np.allclose(T.l2_normalize(t64([3.0, 4.0])).data, [0.6, 0.8])
    assert np.array_equal(T.l2_normalize(t64([0.0, 1.0])).data, [0.0, 1.0])
    assert np.array_equal(T.l2_normalize(t64([0.0, 0.0])).data, [0.0, 0.0])


def test_cosine_cases():
    u = t64([1.0, 2.0, -0.5])
    assert T.cosine_similarity(u, u).item() == pytest.approx(1.0)
    assert T.cosine_similarity(u, -u).item() == pytest.approx(-1.0)
    assert T.cosine_similarity(t64([1.0, 0.0]), t64([0.0, 3.0])).item() == 0.0


def test_cosine_zero_vector():
    with pytest.raises(DomainError):
        T.cosine_similarity(t64([0.0, 0.0]), t64([1.0, 0.0]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-5, 5)), arrays(np.float64, 6, elements=st.floats(-5, 5)))
def test_cosine_matches_normalised_dot(u, v):
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    cos = T.cosine_similarity(t64(u), t64(v)).item()
    dot = float(T.l2_normalize(t64(u)).data @ T.l2_normalize(t64(v)).data)
    assert -1 - 1e-6 <= cos <= 1 + 1e-6
    assert cos == pytest.approx(dot, abs=1e-6)


# -- cross entropy ----------------------------------------------------------------------

def test_cross_entropy_uniform():
    assert T.cross_entropy_from_logits(t64(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4))


def test_cross_entropy_confident():
    assert T.cross_entropy_from_logits(t64([[50.0, 0.0, 0.0]]), [0]).item() < 1e-12


def test_cross_entropy_hand_value():
    expected = -math.log(math.exp(2) / (math.exp(1) + math.exp(2)))
    assert T.cross_entropy_from_logits(t64([[1.0, 2.0]]), [1]).item() == pytest.approx(expected)
    assert expected == pytest.approx(0.3133, abs=1e-4)


def test_cross_entropy_bad_target():
    with pytest.raises(IndexError):
        T.cross_entropy_from_logits(t64([[1.0, 2.0]]), [2])
    with pytest.raises(IndexError):
        T.cross_entropy_from_logits(t64([[1.0, 2.0]]), [-1])


# -- backward ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = t64(np.arange(6.0).reshape(2, 3), grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = t64([1.5, -2.0, 3.0], grad=True)
    (x * x).sum().backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_two_branches_accumulate():
    x = t64([0.5, -1.0, 2.0], grad=True)
    a = (x * x).sum()
    b = T.exp(x).sum()
    (a + b).backward()
    assert np.allclose(x.grad, 2 * x.data + np.exp(x.data))


def test_repeated_use_accumulates():
    x = t64([2.0], grad=True)
    (x * x * x).sum().backward()
    assert x.grad[0] == pytest.approx(12.0)


def test_grad_accumulates_across_backward_calls():
    x = t64([1.0, 2.0], grad=True)
    x.sum().backward()
    (x * 3.0).sum().backward()
    assert np.array_equal(x.grad, [4.0, 4.0])


def test_every_reachable_leaf_gets_grad():
    a, b = t64([1.0], grad=True), t64([2.0], grad=True)
    unused = t64([3.0], grad=True)
    (a * 0.0 + b).sum().backward()
    assert a.grad is not None and b.grad is not None
    assert unused.grad is None


def test_broadcast_unbroadcasts_grad():
    x = t64(np.ones((3, 4)), grad=True)
    bias = t64(np.zeros(4), grad=True)
    (x + bias).sum().backward()
    assert np.array_equal(bias.grad, np.full(4, 3.0))


def test_default_dtype_is_float32_and_float64_is_kept():
    assert Tensor([1, 2]).dtype == np.float32
    assert t64([1.0]).dtype == np.float64
    assert (t64([1.0]) + t64([2.0])).dtype == np.float64


def test_operations_are_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))
    outs = [T.softmax(T.layer_norm(t64(x), t64(np.ones(5)), t64(np.zeros(5)))).data for _ in range(2)]
    assert np.array_equal(outs[0], outs[1])
