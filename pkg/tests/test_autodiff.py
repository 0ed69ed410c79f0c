"""Tape mechanics and per-op gradients against central differences."""

import numpy as np
import pytest

from contralign import autodiff as ad
from contralign.autodiff import (
    Tape,
    Tensor,
    backward,
    cosine_similarity_matrix,
    grad_check,
    log_softmax,
    matmul,
    mean_all,
    relu,
    row_sum,
    stop_gradient,
    sum_all,
    take_per_row,
    take_rows,
)
from contralign.errors import (
    ContractError,
    DegenerateVectorError,
    DimensionError,
    EvaluationError,
)


def numeric_grad(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Plain central differences of a float-valued fn over one array."""
    g = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        orig = x[index]
        x[index] = orig + eps
        fp = fn()
        x[index] = orig - eps
        fm = fn()
        x[index] = orig
        g[index] = (fp - fm) / (2 * eps)
    return g


def tape_grad(build, *leaves):
    with Tape() as tape:
        loss = build()
        grads = backward(loss, tape)
    return [grads[leaf] for leaf in leaves]


# ---------------------------------------------------------------------------
# Tape mechanics


def test_backward_requires_scalar_loss():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = relu(w)
        with pytest.raises(ContractError):
            backward(out, tape)


def test_backward_requires_loss_on_tape():
    w = Tensor(3.0, requires_grad=True)
    with Tape():
        loss = sum_all(w)
    with Tape() as other:
        sum_all(w)
        with pytest.raises(ContractError):
            backward(loss, other)


def test_constants_are_not_tracked():
    c = Tensor(np.ones((3, 3)))
    with Tape() as tape:
        out = matmul(c, c)
    assert len(tape) == 0
    assert out.tape_id is None


def test_no_active_tape_is_pure_forward():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    out = matmul(w, w)
    assert out.tape is None
    np.testing.assert_array_equal(out.values, np.ones((2, 2)) @ np.ones((2, 2)))


def test_leaf_reusable_across_tapes():
    w = Tensor(2.0, requires_grad=True)
    for expected in (4.0, 4.0):
        with Tape() as tape:
            loss = sum_all(ad.mul(w, w))
            grads = backward(loss, tape)
        assert grads[w] == pytest.approx(expected)


def test_untracked_leaf_gets_no_gradient_entry():
    w = Tensor(1.0, requires_grad=True)
    c = Tensor(5.0)
    with Tape() as tape:
        loss = sum_all(ad.mul(w, c))
        grads = backward(loss, tape)
    assert c not in grads
    assert grads[w] == pytest.approx(5.0)


def test_unreached_leaf_gets_zero_gradient():
    w = Tensor(np.ones(3), requires_grad=True)
    u = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        sum_all(u)  # registers u but the loss below never touches it
        loss = sum_all(w)
        grads = backward(loss, tape)
    np.testing.assert_array_equal(grads[u], np.zeros(3))


def test_stop_gradient_cuts_flow():
    # loss = sum(stop_gradient(w) * w) at w = 3: only the live factor
    # contributes, so the gradient is 3, not 6.
    w = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = sum_all(ad.mul(stop_gradient(w), w))
        grads = backward(loss, tape)
    assert grads[w] == pytest.approx(3.0)


def test_stop_gradient_shares_forward_values():
    w = Tensor(np.arange(4.0), requires_grad=True)
    np.testing.assert_array_equal(stop_gradient(w).values, w.values)


def test_repeated_operand_accumulates():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def build():
        s = cosine_similarity_matrix(x, x)
        return sum_all(s)

    (got,) = tape_grad(build, x)
    want = numeric_grad(lambda: float(build().values), x.values)
    np.testing.assert_allclose(got, want, atol=1e-8)


# ---------------------------------------------------------------------------
# Per-op gradients vs central differences


@pytest.mark.parametrize("seed", range(3))
def test_matmul_grads(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

    def build():
        return sum_all(ad.mul(matmul(a, b), matmul(a, b)))

    ga, gb = tape_grad(build, a, b)
    f = lambda: float(build().values)
    np.testing.assert_allclose(ga, numeric_grad(f, a.values), atol=1e-7)
    np.testing.assert_allclose(gb, numeric_grad(f, b.values), atol=1e-7)


def test_bias_broadcast_grad():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)

    def build():
        return sum_all(relu(ad.add(x, b)))

    gx, gb = tape_grad(build, x, b)
    f = lambda: float(build().values)
    np.testing.assert_allclose(gb, numeric_grad(f, b.values), atol=1e-7)
    np.testing.assert_allclose(gx, numeric_grad(f, x.values), atol=1e-7)


@pytest.mark.parametrize(
    "op",
    [ad.exp, ad.abs_, relu, lambda t: ad.log(ad.add(ad.abs_(t), Tensor(1.0)))],
)
def test_unary_op_grads(op):
    rng = np.random.default_rng(7)
    # keep values away from the kinks so finite differences are clean
    vals = rng.normal(size=(4, 3))
    vals[np.abs(vals) < 0.05] = 0.5
    x = Tensor(vals, requires_grad=True)

    def build():
        return sum_all(ad.mul(op(x), op(x)))

    (gx,) = tape_grad(build, x)
    f = lambda: float(build().values)
    np.testing.assert_allclose(gx, numeric_grad(f, x.values), atol=1e-6)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([[-1.0, 0.0, 2.0]]), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(relu(x))
        grads = backward(loss, tape)
    np.testing.assert_array_equal(grads[x], np.array([[0.0, 0.0, 1.0]]))


def test_abs_subgradient_at_zero_is_zero():
    x = Tensor(np.array([0.0, -2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(ad.abs_(x))
        grads = backward(loss, tape)
    np.testing.assert_array_equal(grads[x], np.array([0.0, -1.0, 1.0]))


def test_log_softmax_grad_and_stability():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    labels = np.array([0, 3, 2, 4])

    def build():
        return ad.scale(mean_all(take_per_row(log_softmax(x), labels)), -1.0)

    (gx,) = tape_grad(build, x)
    f = lambda: float(build().values)
    np.testing.assert_allclose(gx, numeric_grad(f, x.values), atol=1e-7)

    # logits around 1e3 must not overflow thanks to the max shift
    big = Tensor(np.array([[1e3, -1e3, 0.0]]))
    out = log_softmax(big)
    assert np.isfinite(out.values).all()


def test_row_sum_and_reductions():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def build():
        r = row_sum(x)
        return mean_all(ad.mul(r, r))

    (gx,) = tape_grad(build, x)
    f = lambda: float(build().values)
    np.testing.assert_allclose(gx, numeric_grad(f, x.values), atol=1e-7)


def test_take_per_row_gradient_is_scatter():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(take_per_row(x, np.array([2, 0])))
        grads = backward(loss, tape)
    want = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    np.testing.assert_array_equal(grads[x], want)


def test_take_rows_accumulates_repeats():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(take_rows(x, np.array([1, 1, 0])))
        grads = backward(loss, tape)
    want = np.array([[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]])
    np.testing.assert_array_equal(grads[x], want)


@pytest.mark.parametrize("seed", range(3))
def test_cosine_similarity_grads(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 5)) + 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)) - 0.2, requires_grad=True)
    w = np.asarray(rng.normal(size=(3, 4)))  # random weighting of the entries

    def build():
        return sum_all(ad.mul(cosine_similarity_matrix(a, b), Tensor(w)))

    ga, gb = tape_grad(build, a, b)
    f = lambda: float(build().values)
    np.testing.assert_allclose(ga, numeric_grad(f, a.values), atol=1e-7)
    np.testing.assert_allclose(gb, numeric_grad(f, b.values), atol=1e-7)


def test_cosine_similarity_range_and_self_similarity():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(6, 4))
    s = cosine_similarity_matrix(Tensor(a), Tensor(a)).values
    assert (s <= 1.0 + 1e-12).all() and (s >= -1.0 - 1e-12).all()
    np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-12)


def test_cosine_similarity_rejects_zero_rows():
    a = np.array([[1.0, 0.0], [0.0, 0.0]])
    b = np.ones((2, 2))
    with pytest.raises(DegenerateVectorError, match="row 1"):
        cosine_similarity_matrix(Tensor(a), Tensor(b))
    with pytest.raises(DegenerateVectorError, match="right row 1"):
        cosine_similarity_matrix(Tensor(b), Tensor(a))


def test_shape_errors():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(DimensionError):
        cosine_similarity_matrix(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


# ---------------------------------------------------------------------------
# grad_check itself


def test_grad_check_quadratic_is_tiny():
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(4, 3)) + 1.0, requires_grad=True)

    def loss():
        return ad.scale(sum_all(ad.mul(w, w)), 0.5)

    assert grad_check(loss, [w], eps=1e-5) < 1e-8


def test_grad_check_skips_kink_coordinates():
    # 5e-5 sits inside the |x| < 10*eps exclusion band; a naive check there
    # would report relative error ~1 because the perturbation crosses zero.
    w = Tensor(np.array([-1.0, 5e-5, 2.0]), requires_grad=True)

    def loss():
        return sum_all(relu(w))

    assert grad_check(loss, [w], eps=1e-5) < 1e-8


def test_grad_check_catches_broken_gradient():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def broken(a):
        # deliberately wrong backward: claims d/da sum(a^2) = a, not 2a
        out = Tensor(a.values**2)

        def bwd(g):
            return (g * a.values * 0.5 * 2.0,)

        return ad._record(out, (a,), bwd)

    def loss():
        return sum_all(broken(w))

    assert grad_check(loss, [w], eps=1e-5) > 1e-2


def test_grad_check_validates_eps():
    w = Tensor(1.0, requires_grad=True)
    with pytest.raises(ContractError):
        grad_check(lambda: sum_all(w), [w], eps=0.5)
    with pytest.raises(ContractError):
        grad_check(lambda: sum_all(w), [w], eps=0.0)


def test_grad_check_raises_on_non_finite():
    w = Tensor(np.array([1e308]), requires_grad=True)

    def loss():
        return sum_all(ad.exp(w))

    with np.errstate(over="ignore"):
        with pytest.raises(EvaluationError):
            grad_check(loss, [w], eps=1e-5)
