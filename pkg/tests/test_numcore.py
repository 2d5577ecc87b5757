import numpy as np
import pytest

from conftest import random_covariance
from deepcsp.numcore import (
    NonFiniteError,
    ShapeError,
    SingularMatrixError,
    Tape,
    TapeError,
    generalized_eig_spd,
    has_degenerate_gap,
    sym_eig,
    whitening_matrix,
)

EIG_TOL = 1e-8
FD_TOL = 1e-5


def numeric_grad(f, x, eps=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        plus = f(x)
        x[idx] = orig - eps
        minus = f(x)
        x[idx] = orig
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


# -----------------------------
# Eigensolvers
# -----------------------------

def test_sym_eig_reconstructs_descending(rng):
    a = rng.standard_normal((7, 7))
    a = a + a.T
    values, vectors = sym_eig(a)
    assert np.all(np.diff(values) <= 0)
    np.testing.assert_allclose(vectors @ np.diag(values) @ vectors.T, a, atol=1e-10)
    np.testing.assert_allclose(vectors.T @ vectors, np.eye(7), atol=1e-10)


def test_sym_eig_diagonal_and_ties():
    values, vectors = sym_eig(np.diag([1.0, 3.0, 2.0]))
    np.testing.assert_allclose(values, [3.0, 2.0, 1.0])
    np.testing.assert_allclose(np.abs(vectors), np.eye(3)[:, [1, 2, 0]], atol=1e-12)

    values, _ = sym_eig(np.diag([2.0, 2.0, 1.0]))
    np.testing.assert_allclose(values, [2.0, 2.0, 1.0])
    assert has_degenerate_gap(values)


def test_sym_eig_rejects_bad_input():
    with pytest.raises(ShapeError):
        sym_eig(np.ones((2, 3)))
    with pytest.raises(NonFiniteError):
        sym_eig(np.array([[1.0, np.nan], [np.nan, 1.0]]))


@pytest.mark.parametrize("dim", range(2, 17))
def test_whitening_makes_composite_identity(dim):
    rng = np.random.default_rng(dim)
    for _ in range(13):
        c1 = random_covariance(rng, dim)
        c2 = random_covariance(rng, dim)
        p = whitening_matrix(c1 + c2)
        assert np.linalg.norm(p @ c1 @ p.T + p @ c2 @ p.T - np.eye(dim)) < EIG_TOL


def test_whitening_rejects_singular():
    with pytest.raises(SingularMatrixError):
        whitening_matrix(np.diag([1.0, 0.0]))


def test_generalized_eig_spd(spd_pair):
    c1, c2 = spd_pair
    b = c1 + c2
    values, vectors = generalized_eig_spd(c1, b)
    np.testing.assert_allclose(c1 @ vectors, b @ vectors * values, atol=EIG_TOL)
    np.testing.assert_allclose(vectors.T @ b @ vectors, np.eye(6), atol=EIG_TOL)
    assert np.all(values >= -1e-12) and np.all(values <= 1 + 1e-12)


def test_generalized_eig_identity_b():
    a = np.diag([0.2, 0.9, 0.5])
    values, _ = generalized_eig_spd(a, np.eye(3))
    np.testing.assert_allclose(values, [0.9, 0.5, 0.2])


def test_generalized_eig_shape_mismatch():
    with pytest.raises(ShapeError):
        generalized_eig_spd(np.eye(2), np.eye(3))



@pytest.mark.parametrize("seed", range(5))
def test_generalized_eig_is_congruence_invariant(seed):
    rng = np.random.default_rng(seed)
    c1, c2 = random_covariance(rng, 5), random_covariance(rng, 5)
    m = rng.standard_normal((5, 5)) + 3.0 * np.eye(5)
    values, _ = generalized_eig_spd(c1, c1 + c2)
    moved, vectors = generalized_eig_spd(m.T @ c1 @ m, m.T @ (c1 + c2) @ m)
    np.testing.assert_allclose(moved, values, atol=EIG_TOL)
    b = m.T @ (c1 + c2) @ m
    np.testing.assert_allclose(vectors.T @ b @ vectors, np.eye(5), atol=1e-7)


# -----------------------------
# Convolution
# -----------------------------

def direct_correlation(x, w):
    n_channels, n_samples = x.shape
    n_out, _, k = w.shape
    left = (k - 1) // 2
    padded = np.pad(x, [(0, 0), (left, k - 1 - left)])
    out = np.zeros((n_out, n_samples))
    for o in range(n_out):
        for t in range(n_samples):
            out[o, t] = np.sum(w[o] * padded[:, t:t + k])
    return out


@pytest.mark.parametrize("k", [1, 4, 5, 16])
def test_conv1d_matches_direct(rng, k):
    x = rng.standard_normal((3, 40))
    w = rng.standard_normal((2, 3, k))
    out = Tape().conv1d(x[None], w).value[0]
    np.testing.assert_allclose(out, direct_correlation(x, w), atol=1e-10)


@pytest.mark.parametrize("k", [2, 17, 33, 40])
def test_conv1d_weight_gradient_matches_direct(rng, k):
    x = rng.standard_normal((3, 2, 40))
    w = rng.standard_normal((4, 2, k))
    upstream = rng.standard_normal((3, 4, 40))
    tape = Tape()
    out = tape.conv1d(tape.constant(x), tape.parameter("w", w))
    grad = tape.backward(tape.sum(tape.mul(out, upstream)))["w"]

    left = (k - 1) // 2
    padded = np.pad(x, [(0, 0), (0, 0), (left, k - 1 - left)])
    expected = np.zeros_like(w)
    for m in range(k):
        expected[:, :, m] = np.einsum("not,nct->oc", upstream, padded[:, :, m:m + 40])
    np.testing.assert_allclose(grad, expected, atol=1e-9)


# -----------------------------
# Tape
# -----------------------------

def test_tape_matches_finite_differences(rng):
    x0 = rng.standard_normal((2, 3, 16))
    w0 = rng.standard_normal((4, 3, 5)) * 0.3
    d0 = rng.standard_normal((3, 2, 4)) * 0.3
    m0 = rng.standard_normal((4, 5)) * 0.3
    labels = np.array([0, 1])

    def forward(tape, x, w, d, m):
        dense = tape.conv1d(x, w)
        depth = tape.reshape(tape.depthwise_conv1d(x, d), (2, 6, 16))
        joined = tape.concat([tape.exp(tape.scale(dense, 0.1)), tape.mul(depth, depth)], axis=1)
        pooled = tape.log(tape.add(tape.mean(joined, axis=2), 1.0))
        logits = tape.contract("nf,kf->nk", pooled, tape.reshape(m, (2, 10)))
        return tape.softmax_cross_entropy(logits, labels)

    def value(x=x0, w=w0, d=d0, m=m0):
        tape = Tape()
        return float(forward(tape, tape.constant(x), tape.constant(w), tape.constant(d), tape.constant(m)).value)

    tape = Tape()
    nodes = [tape.parameter(name, arr) for name, arr in (("x", x0), ("w", w0), ("d", d0), ("m", m0))]
    grads = tape.backward(forward(tape, *nodes))

    checks = {
        "x": numeric_grad(lambda v: value(x=v), x0.copy()),
        "w": numeric_grad(lambda v: value(w=v), w0.copy()),
        "d": numeric_grad(lambda v: value(d=v), d0.copy()),
        "m": numeric_grad(lambda v: value(m=v), m0.copy()),
    }
    for name, expected in checks.items():
        assert relative_error(grads[name], expected) < FD_TOL, name


def test_backward_is_linear_over_summed_losses(rng):
    w0 = rng.standard_normal((3, 4))
    tape = Tape()
    w = tape.parameter("w", w0)
    first = tape.sum(tape.exp(tape.scale(w, 0.5)))
    second = tape.trace(tape.matmul(w, tape.constant(w0.T)))
    both = tape.add(first, tape.scale(second, 2.0))
    expected = tape.backward(first)["w"] + 2.0 * tape.backward(second)["w"]
    np.testing.assert_allclose(tape.backward(both)["w"], expected, atol=1e-12)


def test_tape_fan_out_accumulates():
    tape = Tape()
    a = tape.parameter("a", np.array([2.0, -1.0]))
    loss = tape.sum(tape.add(tape.mul(a, a), tape.scale(a, 3.0)))
    np.testing.assert_allclose(tape.backward(loss)["a"], [7.0, 1.0])


def test_tape_matmul_trace_diag():
    tape = Tape()
    a = tape.parameter("a", np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = tape.parameter("b", np.eye(2) * 2.0)
    loss = tape.add(tape.trace(tape.matmul(a, b)), tape.sum(tape.diag(a)))
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads["a"], [[3.0, 0.0], [0.0, 3.0]])
    np.testing.assert_allclose(grads["b"], [[1.0, 3.0], [2.0, 4.0]])


def test_tape_unreachable_parameter_gets_zero_gradient():
    tape = Tape()
    a = tape.parameter("a", np.ones(3))
    tape.parameter("unused", np.ones((2, 2)))
    grads = tape.backward(tape.sum(a))
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_tape_errors():
    tape = Tape()
    a = tape.parameter("a", np.ones(3))
    with pytest.raises(TapeError):
        tape.backward(a)
    with pytest.raises(TapeError):
        tape.parameter("a", np.ones(1))
    with pytest.raises(ShapeError):
        tape.add(a, np.ones(4))
    with pytest.raises(ShapeError):
        tape.conv1d(np.ones((1, 2, 3)), np.ones((1, 2, 5)))
    other = Tape()
    with pytest.raises(TapeError):
        other.backward(tape.sum(a))
