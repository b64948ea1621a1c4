import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from omnilv.io import FormatError, decode_olvt, encode_olvt
from omnilv.tensor import (
    NumericDomainError,
    ShapeError,
    Tensor,
    concat,
    elementwise,
    grad_check,
    matmul,
    no_grad,
    rms_norm,
    softmax,
    take_rows,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def central_diff(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


# -- matmul ---------------------------------------------------------------------
def test_matmul_identity():
    b = np.arange(12.0).reshape(3, 4)
    out = matmul(Tensor(np.eye(3)), Tensor(b))
    np.testing.assert_array_equal(out.data, b)


def test_matmul_hand_example():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
    matmul(a, b).sum().backward()
    ga = central_diff(lambda x: (x @ b0).sum(), a0)
    gb = central_diff(lambda x: (a0 @ x).sum(), b0)
    np.testing.assert_allclose(a.grad, ga, rtol=1e-6)
    np.testing.assert_allclose(b.grad, gb, rtol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_batched_matmul_with_shared_weight_grad_shape():
    w = Tensor(np.random.default_rng(1).normal(size=(4, 3)), requires_grad=True)
    x = Tensor(np.random.default_rng(2).normal(size=(2, 5, 4)))
    (x @ w).sum().backward()
    assert w.grad.shape == w.shape
    np.testing.assert_allclose(w.grad, x.data.reshape(-1, 4).sum(0)[:, None].repeat(3, 1))


# -- elementwise ------------------------------------------------------------------
def test_add_zero_is_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(elementwise("add", Tensor(x), Tensor(np.zeros((3, 4)))).data, x)


def test_silu_at_zero():
    assert elementwise("silu", Tensor([0.0])).data[0] == 0.0


def test_exp_grad_at_one():
    x = Tensor([1.0], requires_grad=True)
    elementwise("exp", x).sum().backward()
    assert abs(x.grad[0] - math.e) / math.e < 1e-6


def test_domain_errors():
    with pytest.raises(NumericDomainError):
        elementwise("div", Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(NumericDomainError):
        elementwise("ln", Tensor([0.0]))
    with pytest.raises(NumericDomainError):
        elementwise("ln", Tensor([-1.0]))


def test_non_finite_result_is_an_error():
    with pytest.raises(NumericDomainError):
        elementwise("exp", Tensor([1000.0]))


def test_trailing_broadcast_grad_is_reduced():
    x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    s = Tensor(np.ones((2, 1, 4)), requires_grad=True)
    ((x + b) * s).sum().backward()
    assert b.grad.shape == (4,)
    assert s.grad.shape == (2, 1, 4)
    np.testing.assert_array_equal(b.grad, np.full(4, 6.0))


def test_incompatible_broadcast_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(4))


# -- softmax -------------------------------------------------------------------------
def test_softmax_uniform():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3), atol=1e-15)


@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariance_and_normalisation(x, c):
    a = softmax(Tensor(x), axis=-1).data
    b = softmax(Tensor(x + c), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert np.all(a > 0)
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)


def test_softmax_jvp_matches_finite_differences():
    rng = np.random.default_rng(3)
    x0, v, w = rng.normal(size=6), rng.normal(size=6), rng.normal(size=6)

    def f(x):
        e = np.exp(x - x.max())
        return e / e.sum()

    eps = 1e-5
    jvp_fd = (f(x0 + eps * v) - f(x0 - eps * v)) / (2 * eps)
    # J^T w from the tape, then <J^T w, v> must equal <w, J v>
    x = Tensor(x0, requires_grad=True)
    (softmax(x) * w).sum().backward()
    assert abs(x.grad @ v - w @ jvp_fd) < 1e-6 * max(1.0, abs(w @ jvp_fd))


# -- rms norm ---------------------------------------------------------------------------
def test_rms_norm_of_ones():
    np.testing.assert_allclose(rms_norm(Tensor(np.ones(8)), np.ones(8), eps=1e-12).data, 1.0, atol=1e-12)


def test_rms_norm_unit_rms_and_scale_invariance():
    x = np.random.default_rng(4).normal(size=(5, 16))
    y = rms_norm(Tensor(x), np.ones(16), eps=1e-12).data
    np.testing.assert_allclose(np.sqrt((y ** 2).mean(-1)), 1.0, atol=1e-10)
    y10 = rms_norm(Tensor(10 * x), np.ones(16), eps=1e-12).data
    np.testing.assert_allclose(y, y10, atol=1e-10)


# -- backward contract -------------------------------------------------------------------
def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_backward_accumulates_until_zeroed():
    x = Tensor([2.0], requires_grad=True)
    (x * x).sum().backward()
    (x * x).sum().backward()
    assert x.grad[0] == 8.0
    x.zero_grad()
    (x * x).sum().backward()
    assert x.grad[0] == 4.0


def test_shared_subexpression_counts_once_per_path():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(6 + 27)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


# -- grad_check ---------------------------------------------------------------------------
def test_grad_check_square():
    x = Tensor([1.0, 2.0, 3.0])
    err = grad_check(lambda t: (t * t).sum(), x)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
    assert err < 1e-7


def test_grad_check_linear():
    assert grad_check(lambda t: t.sum(), Tensor(np.random.default_rng(0).normal(size=7))) < 1e-9


def _op_cases():
    w = np.random.default_rng(99).normal(size=(4, 3))
    gain = np.random.default_rng(98).normal(size=4)
    table = np.random.default_rng(97).normal(size=(5, 4))
    return {
        "add": lambda x: (x + Tensor(w.T[0])).sum(),
        "sub": lambda x: (Tensor(w.T[0]) - x * x).sum(),
        "mul": lambda x: (x * x * Tensor(w.T[1])).sum(),
        "div": lambda x: (Tensor(w.T[2]) / (x * x + 1.0)).sum(),
        "neg": lambda x: (-(x * x)).sum(),
        "exp": lambda x: x.exp().sum(),
        "ln": lambda x: (x * x + 0.5).log().sum(),
        "pow": lambda x: ((x * x + 1.0) ** 1.5).sum(),
        "silu": lambda x: (x.silu() * Tensor(w.T[0])).sum(),
        "matmul": lambda x: (x.reshape(1, 4) @ Tensor(w)).sum() ** 2,
        "softmax": lambda x: (softmax(x) * Tensor(gain)).sum(),
        "rms_norm": lambda x: (rms_norm(x, Tensor(gain)) * Tensor(w.T[0])).sum(),
        "mean": lambda x: ((x * x).mean() + x.mean()),
        "reshape_transpose": lambda x: (x.reshape(2, 2).transpose() @ Tensor(w[:2, :2])).sum() ** 2,
        "getitem": lambda x: (x[1:3] * x[0:2]).sum(),
        "concat": lambda x: (concat([x, x * x], axis=0) * Tensor(np.arange(8.0))).sum(),
        "take_rows": lambda x: (take_rows(Tensor(table) * x.sum(), np.array([0, 3, 3])) * 1.0).sum() ** 2,
    }


@pytest.mark.parametrize("name", list(_op_cases()))
def test_every_op_passes_grad_check_over_ten_seeds(name):
    f = _op_cases()[name]
    for seed in range(10):
        x = Tensor(np.random.default_rng(seed).normal(size=4))
        assert grad_check(f, x) < 1e-4, (name, seed)


def test_forward_is_bitwise_deterministic():
    x = np.random.default_rng(5).normal(size=(3, 8))
    g = np.random.default_rng(6).normal(size=8)
    a = softmax(rms_norm(Tensor(x), g) @ Tensor(np.eye(8)), -1).data
    b = softmax(rms_norm(Tensor(x), g) @ Tensor(np.eye(8)), -1).data
    assert a.tobytes() == b.tobytes()


# -- serialisation ----------------------------------------------------------------------------
@settings(max_examples=25)
@given(arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 3)), elements=finite))
def test_olvt_round_trip(x):
    blob = encode_olvt(x)
    assert blob[:4] == b"OLVT"
    y = decode_olvt(blob)
    assert y.shape == x.shape and y.tobytes() == x.tobytes()


def test_olvt_header_layout():
    blob = encode_olvt(np.zeros((2, 3)))
    assert blob[4:8] == (2).to_bytes(4, "little")
    assert blob[8:12] == (2).to_bytes(4, "little") and blob[12:16] == (3).to_bytes(4, "little")
    assert len(blob) == 16 + 6 * 8
    with pytest.raises(FormatError):
        decode_olvt(b"NOPE" + blob[4:])
