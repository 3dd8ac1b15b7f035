import math
import re
import subprocess
import sys

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from edrl import tensor as T
from edrl.gradcheck import gradient_error
from edrl.tensor import DimensionError, NonFiniteError, NumericDomainError, RngState, Tensor, no_grad

import gradcases

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# ---- matmul -----------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(Tensor([[1.0, 0], [0, 1]]), Tensor([[3.0, 4], [5, 6]]))
    assert np.array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_dot():
    assert T.matmul(Tensor([[1.0, 2]]), Tensor([[3.0], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
        T.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))


def test_matmul_gradient_random_3x4_4x2():
    rng = np.random.default_rng(7)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    assert gradient_error(lambda x, y: T.matmul(x, y).sum(), [a, b]) <= 1e-4


# ---- elementwise ------------------------------------------------------------

def test_exp_zero():
    assert T.exp(Tensor([0.0])).data.tolist() == [1.0]


@pytest.mark.parametrize("x", [-2.0, 0.0, 3.5])
def test_log_exp_inverse(x):
    assert T.log(T.exp(Tensor([x]))).data[0] == pytest.approx(x, abs=1e-15)


def test_div_gradient_wrt_denominator():
    a = Tensor(6.0, requires_grad=True)
    b = Tensor(3.0, requires_grad=True)
    (a / b).backward()
    assert b.grad == pytest.approx(-2.0 / 3.0, abs=1e-15)
    assert a.grad == pytest.approx(1.0 / 3.0, abs=1e-15)


@pytest.mark.parametrize(
    "fn, bad, idx",
    [
        (T.log, [[1.0, 2.0], [0.0, 3.0]], (1, 0)),
        (T.log, [1.0, -1.0], (1,)),
        (T.sqrt, [4.0, -1e-3, 2.0], (1,)),
    ],
)
def test_domain_errors_report_index(fn, bad, idx):
    with pytest.raises(NumericDomainError, match=re.escape(str(idx))):
        fn(Tensor(bad))


def test_div_by_zero_is_domain_error():
    with pytest.raises(NumericDomainError, match=r"\(2,\)"):
        Tensor([1.0, 2.0, 3.0]) / Tensor([1.0, 1.0, 0.0])


def test_non_finite_never_propagates():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1000.0]))


# ---- reductions -------------------------------------------------------------

def test_mean_and_sum():
    assert T.as_tensor([2.0, 4.0, 6.0]).mean().item() == 4.0
    assert Tensor([[1.0, 2], [3, 4]]).sum(axis=0).data.tolist() == [4.0, 6.0]


def test_mean_gradient_is_uniform():
    x = Tensor([2.0, 4.0, 6.0], requires_grad=True)
    x.mean().backward()
    np.testing.assert_allclose(x.grad, [1 / 3] * 3, rtol=0, atol=1e-16)


def test_axis_out_of_range():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 2))).sum(axis=2)


# ---- softmax ----------------------------------------------------------------

def test_softmax_symmetry_and_stability():
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_array_equal(T.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])


def test_softmax_matches_extended_precision():
    mpmath.mp.dps = 50
    exps = [mpmath.e ** k for k in (1, 2, 3)]
    total = sum(exps)
    oracle = [float(e / total) for e in exps]
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, oracle, rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = T.softmax(Tensor(x), axis=-1).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


# ---- cosine -----------------------------------------------------------------

def test_cosine_examples():
    assert T.cosine_similarity(Tensor([1.0, 0]), Tensor([1.0, 0])).item() == 1.0
    assert T.cosine_similarity(Tensor([1.0, 0]), Tensor([0.0, 1])).item() == 0.0
    assert T.cosine_similarity(Tensor([1.0, 1]), Tensor([1.0, 0])).item() == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_cosine_zero_vector_is_finite():
    assert T.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0])).item() == 0.0


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3)).filter(lambda a: np.linalg.norm(a) > 1e-3))
def test_cosine_self_is_one(a):
    assert abs(T.cosine_similarity(Tensor(a), Tensor(a)).item() - 1.0) <= 1e-9


# ---- backward ---------------------------------------------------------------

def test_backward_sum_and_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.sum().backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    y = Tensor(3.0, requires_grad=True)
    (y * y).backward()
    assert y.grad == 6.0


def test_backward_accumulates_until_zeroed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    x.sum().backward()
    x.sum().backward()
    assert x.grad.tolist() == [2.0, 2.0]
    x.zero_grad()
    x.sum().backward()
    assert x.grad.tolist() == [1.0, 1.0]


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(DimensionError):
        (x * 2.0).backward()


def test_grad_shapes_match_after_broadcast():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    c = Tensor(np.ones((1, 4)), requires_grad=True)
    ((a + b) * c).sum().backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape and c.grad.shape == c.shape


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_detach_blocks_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x.detach() * x).sum().backward()
    assert x.grad.tolist() == [1.0, 2.0]


@pytest.mark.parametrize("name", sorted(gradcases.CASES))
def test_gradient_matches_finite_differences(name):
    assert gradcases.worst_error(name, seed=1, instances=3) <= 1e-4


# ---- rng --------------------------------------------------------------------

def test_rng_same_seed_same_draws():
    a, b = RngState(5), RngState(5)
    assert np.array_equal(a.normal((10,)), b.normal((10,)))
    assert np.array_equal(a.child(1, 2).normal((4,)), b.child(1, 2).normal((4,)))
    assert not np.array_equal(RngState(5).child(1).normal((4,)), RngState(5).child(2).normal((4,)))


def test_rng_state_round_trip():
    r = RngState(3)
    r.normal((5,))
    s = RngState.from_state(r.get_state())
    assert np.array_equal(r.normal((7,)), s.normal((7,)))


def test_rng_bitwise_identical_across_processes():
    code = "from edrl.tensor import RngState; import sys; sys.stdout.write(RngState(1234).child(3).normal((64,)).tobytes().hex())"
    outs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout for _ in range(2)]
    assert outs[0] == outs[1]
    assert bytes.fromhex(outs[0]) == RngState(1234).child(3).normal((64,)).tobytes()
