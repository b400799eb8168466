import numpy as np
import pytest

from unionrobust.autodiff import (
    DimensionError,
    Tape,
    add,
    affine,
    conv2d,
    flatten,
    maxpool2x2,
    mul,
    relu,
    softmax_cross_entropy,
    tensor_sum,
)

H = 1e-5
CASES = range(20)


def numeric_grad(f, arrays, index):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [a.copy() for a in arrays]
    target = base[index]
    out = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = target[i]
        target[i] = old + H
        up = f(*base)
        target[i] = old - H
        down = f(*base)
        target[i] = old
        out[i] = (up - down) / (2 * H)
    return out


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def check(op, arrays, weights_seed):
    """Reduce ``op`` to a scalar by a fixed random projection and compare gradients."""
    proj_rng = np.random.default_rng(weights_seed)
    out_shape = op(*arrays).shape
    w = proj_rng.standard_normal(out_shape)

    def scalar(*vals):
        return float((op(*vals).data * w).sum())

    tape = Tape()
    leaves = [tape.watch(a) for a in arrays]
    out = op(*leaves)
    loss = tensor_sum(mul(out, w))
    grads = tape.gradient(loss, leaves)
    for k, a in enumerate(arrays):
        assert rel_err(grads[k], numeric_grad(scalar, arrays, k)) < 1e-4


@pytest.mark.parametrize("seed", CASES)
def test_affine(seed):
    r = np.random.default_rng(seed)
    check(affine, [r.standard_normal((3, 4)), r.standard_normal((4, 5)), r.standard_normal(5)], seed)


@pytest.mark.parametrize("seed", CASES)
def test_conv2d(seed):
    r = np.random.default_rng(seed)
    pad = seed % 3
    x = r.standard_normal((2, 2, 5, 5))
    k = r.standard_normal((3, 2, 3, 3))
    b = r.standard_normal(3)
    check(lambda a, kk, bb: conv2d(a, kk, bb, pad), [x, k, b], seed)


@pytest.mark.parametrize("seed", CASES)
def test_relu(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((4, 6))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    check(relu, [x], seed)


@pytest.mark.parametrize("seed", CASES)
def test_maxpool(seed):
    r = np.random.default_rng(seed)
    x = r.permutation(2 * 3 * 4 * 6).reshape(2, 3, 4, 6) * 0.01  # distinct values: no ties within H
    check(maxpool2x2, [x], seed)


@pytest.mark.parametrize("seed", CASES)
def test_softmax_cross_entropy(seed):
    r = np.random.default_rng(seed)
    z = r.standard_normal((5, 4)) * 3
    y = r.integers(0, 4, size=5)
    for reduction in ("mean", "sum"):
        tape = Tape()
        zt = tape.watch(z)
        g = tape.gradient(softmax_cross_entropy(zt, y, reduction), zt)
        f = lambda v: float(softmax_cross_entropy(v, y, reduction).data)
        assert rel_err(g, numeric_grad(f, [z], 0)) < 1e-4


@pytest.mark.parametrize("seed", CASES)
def test_add_mul_flatten(seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((2, 3, 2, 2)), r.standard_normal((2, 3, 2, 2))
    check(lambda u, v: flatten(add(mul(u, v), u)), [a, b], seed)


def test_maxpool_tie_routes_to_first():
    x = np.ones((1, 1, 2, 2))
    tape = Tape()
    xt = tape.watch(x)
    g = tape.gradient(tensor_sum(maxpool2x2(xt)), xt)
    assert g.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]


def test_gradient_accumulates_over_consumers():
    tape = Tape()
    x = tape.watch(np.array([[2.0, -3.0]]))
    y = add(mul(x, x), x)  # x^2 + x
    g = tape.gradient(tensor_sum(y), x)
    assert np.array_equal(g, np.array([[5.0, -5.0]]))


def test_untaped_ops_return_constants():
    out = affine(np.ones((1, 2)), np.ones((2, 3)), np.zeros(3))
    assert out.tape is None and not out.requires_grad


def test_disconnected_gradient_is_zero():
    tape = Tape()
    a = tape.watch(np.ones(3))
    b = tape.watch(np.ones(3))
    assert np.array_equal(tape.gradient(tensor_sum(a), b), np.zeros(3))


@pytest.mark.parametrize("call", [
    lambda: affine(np.ones((2, 3)), np.ones((4, 5)), np.zeros(5)),
    lambda: conv2d(np.ones((1, 2, 5, 5)), np.ones((3, 1, 3, 3)), np.zeros(3)),
    lambda: conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 5, 5)), np.zeros(1)),
    lambda: maxpool2x2(np.ones((1, 1, 3, 4))),
    lambda: add(np.ones(2), np.ones(3)),
])
def test_shape_errors(call):
    with pytest.raises(DimensionError):
        call()


def test_bad_label_and_non_scalar_loss():
    with pytest.raises(IndexError):
        softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
    tape = Tape()
    x = tape.watch(np.ones(3))
    with pytest.raises(DimensionError):
        tape.gradient(relu(x), x)


def test_mixing_tapes_is_an_error():
    a, b = Tape().watch(np.ones(2)), Tape().watch(np.ones(2))
    with pytest.raises(ValueError):
        add(a, b)
