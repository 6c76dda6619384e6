import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oocmatch import tensor as T
from oocmatch.errors import DegenerateVectorError, ShapeError
from oocmatch.gradcheck import check_gradients
from oocmatch.tensor import Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            out[i][j] = sum(a[i][k] * b[k][j] for k in range(len(b)))
    return out


# --- construction -----------------------------------------------------------

def test_tensor_stores_float64_copy():
    src = np.array([[1, 2], [3, 4]], dtype=np.int32)
    t = Tensor(src)
    src[0, 0] = 99
    assert t.data.dtype == np.float64 and t.data[0, 0] == 1.0
    assert t.data.size == np.prod(t.shape)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_tensor_rejects_non_finite(bad):
    with pytest.raises(FloatingPointError):
        Tensor([1.0, bad])


def test_tensor_rejects_zero_extent():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


# --- matmul -----------------------------------------------------------------

def test_matmul_known_product():
    out = Tensor([[1, 2], [3, 4]]) @ Tensor([[5], [6]])
    np.testing.assert_array_equal(out.data, [[17], [39]])


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_matches_triple_loop(a, b):
    got = (Tensor(a) @ Tensor(b)).data
    np.testing.assert_allclose(got, naive_matmul(a.tolist(), b.tolist()), rtol=1e-12, atol=1e-9)


def test_matmul_identity_and_zero(rng):
    a = rng.normal(size=(4, 4))
    np.testing.assert_array_equal((Tensor(a) @ Tensor(np.eye(4))).data, a)
    assert not np.any((Tensor(np.zeros((3, 4))) @ Tensor(a)).data)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# --- relu -------------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert not np.any(T.relu(Tensor([-3.0, -0.5])).data)


def test_relu_subgradient_zero_at_zero():
    x = Tensor([0.0, 1.0], requires_grad=True)
    T.backward(T.sum_(T.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


@given(arrays(np.float64, 6, elements=finite))
def test_relu_idempotent(x):
    once = T.relu(Tensor(x))
    np.testing.assert_array_equal(T.relu(once).data, once.data)


# --- l2_normalize -----------------------------------------------------------

@pytest.mark.parametrize("v,expected", [((3, 4), (0.6, 0.8)), ((2, 0, 0), (1, 0, 0)), ((0.6, 0.8), (0.6, 0.8))])
def test_l2_normalize_examples(v, expected):
    np.testing.assert_allclose(T.l2_normalize(Tensor(v)).data, expected, rtol=0, atol=1e-15)


@given(arrays(np.float64, 5, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-6))
def test_l2_normalize_unit_norm(v):
    out = T.l2_normalize(Tensor(v)).data
    assert abs(np.linalg.norm(out) - 1.0) <= 1e-9
    assert np.dot(out, v) > 0  # direction kept


def test_l2_normalize_degenerate():
    with pytest.raises(DegenerateVectorError):
        T.l2_normalize(Tensor([1e-13, 0.0]))


# --- dot --------------------------------------------------------------------

def test_dot_examples():
    assert T.dot(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert T.dot(Tensor([1.0, 2.0, 3.0]), Tensor([4.0, 5.0, 6.0])).item() == 32.0
    u = np.array([1.5, -2.0, 0.25])
    assert math.isclose(T.dot(Tensor(u), Tensor(u)).item(), float(np.sum(u * u)))


def test_dot_length_mismatch():
    with pytest.raises(ShapeError):
        T.dot(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


# --- logsumexp --------------------------------------------------------------

def test_logsumexp_examples():
    assert T.logsumexp([Tensor(2.5)]).item() == 2.5
    assert math.isclose(T.logsumexp([Tensor(0.0), Tensor(0.0)]).item(), math.log(2), rel_tol=1e-15)
    assert math.isclose(T.logsumexp([Tensor(1000.0), Tensor(1000.0)]).item(), 1000 + math.log(2), rel_tol=1e-15)


def test_logsumexp_empty():
    with pytest.raises(ValueError):
        T.logsumexp([])


@given(st.lists(finite, min_size=1, max_size=8), st.randoms(use_true_random=False))
def test_logsumexp_permutation_invariant(xs, r):
    perm = list(xs)
    r.shuffle(perm)
    a = T.logsumexp([Tensor(x) for x in xs]).item()
    b = T.logsumexp([Tensor(x) for x in perm]).item()
    assert math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-12)


@given(finite)
def test_logsumexp_singleton_exact(x):
    assert T.logsumexp([Tensor(x)]).item() == x


# --- backward ---------------------------------------------------------------

def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    T.backward(x * x)
    assert x.grad == 6.0


def test_backward_linear_dot(rng):
    w = Tensor(rng.normal(size=4), requires_grad=True)
    x = rng.normal(size=4)
    T.backward(T.dot(w, Tensor(x)))
    np.testing.assert_array_equal(w.grad, x)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(x * 2.0)


def test_fan_out_accumulates_against_finite_differences(rng):
    # w feeds two paths; its gradient must be the sum of both
    w0 = rng.normal(size=(3, 3))
    x = rng.normal(size=3)

    def f(w):
        h = w @ Tensor(x)
        return T.dot(h, h) + T.sum_(T.relu(w @ h))

    assert check_gradients(f, [w0], rng, coords_per_input=None) < 1e-4


def test_grad_shape_matches_data(rng):
    w = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    T.backward(T.sum_(T.l2_normalize(w)))
    assert w.grad.shape == w.data.shape


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and T.is_grad_enabled()


def test_tape_is_topological(rng):
    a = Tensor(rng.normal(size=3), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    loss = T.dot(T.relu(a + b), a)
    tape = T.Tape.from_root(loss)
    position = {id(n): i for i, n in enumerate(tape)}
    for node in tape:
        for parent in node._parents:
            if id(parent) in position:
                assert position[id(parent)] < position[id(node)]


def test_max_gradient_goes_to_first_maximum():
    x = Tensor([1.0, 3.0, 3.0], requires_grad=True)
    T.backward(T.max_(x))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_take_repeated_indices_accumulate():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.sum_(T.take(x, np.array([0, 0, 2]))))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_composite_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=4)

    def f(a, b):
        h = T.l2_normalize(a @ b + 0.5)
        return T.logsumexp(T.stack([T.dot(h, h), T.sum_(h), T.mean(a)]), axis=0)

    assert check_gradients(f, [a0, b0], rng, coords_per_input=None) < 1e-4
