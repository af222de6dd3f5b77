"""Dense operator arithmetic and matrix functions of the adjoint map.

All functions accept stacks of matrices with shape (..., d, d) and broadcast
over the leading axes, so a whole phase-space grid of operators can be
processed in one call.
"""
import math
import warnings

import numpy as np
import scipy.linalg

PAULI_I = np.eye(2, dtype=complex)
PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)

# below this |z| the removable singularity of phi is handled by its Taylor series
PHI_TAYLOR_SWITCH = 1e-3


class HermiticityError(ValueError):
    pass


def _check_pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != a.shape[-2] or b.shape[-1] != b.shape[-2]:
        raise ValueError("operators must be square, got %s and %s" % (a.shape, b.shape))
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("dimension mismatch: %d vs %d" % (a.shape[-1], b.shape[-1]))
    return a, b


def dagger(a):
    return np.conj(np.swapaxes(a, -1, -2))


def commutator(a, b):
    a, b = _check_pair(a, b)
    return a @ b - b @ a


def anticommutator(a, b):
    a, b = _check_pair(a, b)
    return a @ b + b @ a


def hermiticity_error(a):
    """Largest entry of A - A^dagger relative to the largest entry of A."""
    a = np.asarray(a)
    scale = np.abs(a).max() if a.size else 0.0
    if scale == 0:
        return 0.0
    return float(np.abs(a - dagger(a)).max() / scale)


def is_hermitian(a, tol=1e-12):
    return hermiticity_error(a) <= tol


def assert_hermitian(a, tol=1e-10, what="operator"):
    err = hermiticity_error(a)
    if err > tol:
        raise HermiticityError("%s is not Hermitian: relative error %.3e > %.1e" % (what, err, tol))
    return a


def symmetrize(a):
    """Hermitian part (A + A^dagger)/2. Callers opt in explicitly."""
    return 0.5 * (a + dagger(a))


def vec(y):
    """Row-major vectorization of a (..., d, d) stack."""
    y = np.asarray(y)
    return y.reshape(y.shape[:-2] + (y.shape[-1] ** 2,))


def unvec(v):
    v = np.asarray(v)
    d = math.isqrt(v.shape[-1])
    if d * d != v.shape[-1]:
        raise ValueError("vector length %d is not a square" % v.shape[-1])
    return v.reshape(v.shape[:-1] + (d, d))


class Superoperator:
    """Linear map on d x d operators stored as a d^2 x d^2 matrix acting on vec(Y)."""

    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=complex)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("superoperator matrix must be square")
        d = math.isqrt(matrix.shape[0])
        if d * d != matrix.shape[0]:
            raise ValueError("superoperator size must be d^2")
        self.matrix = matrix
        self.dim = d

    def apply(self, y):
        y = np.asarray(y)
        if y.shape[-1] != self.dim:
            raise ValueError("dimension mismatch: %d vs %d" % (y.shape[-1], self.dim))
        return unvec(vec(y) @ self.matrix.T)

    def __call__(self, y):
        return self.apply(y)

    def __matmul__(self, other):
        return Superoperator(self.matrix @ other.matrix)

    def __mul__(self, c):
        return Superoperator(c * self.matrix)

    __rmul__ = __mul__

    def power(self, n):
        return Superoperator(np.linalg.matrix_power(self.matrix, n))

    def eigvals(self):
        return np.linalg.eigvals(self.matrix)


def ad_superoperator(x):
    """ad_X Y = XY - YX as a superoperator (row-major: X kron I - I kron X^T)."""
    x = np.asarray(x, dtype=complex)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError("X must be a square matrix")
    eye = np.eye(x.shape[0])
    return Superoperator(np.kron(x, eye) - np.kron(eye, x.T))


def phi(z):
    """phi(z) = (e^z - 1)/z elementwise, with phi(0) = 1."""
    z = np.asarray(z, dtype=complex)
    out = np.empty_like(z)
    small = np.abs(z) < PHI_TAYLOR_SWITCH
    zs = z[small]
    out[small] = 1 + zs / 2 * (1 + zs / 3 * (1 + zs / 4 * (1 + zs / 5)))
    zl = z[~small]
    out[~small] = np.expm1(zl) / zl
    return out


def phi_taylor_apply(x, y, scale, nterms=40):
    """Term-by-term series sum_k (scale ad_X)^k Y / (k+1)!; used as an oracle."""
    term = np.asarray(y, dtype=complex)
    out = term.copy()
    for k in range(1, nterms):
        term = scale * commutator(x, term) / (k + 1)
        out = out + term
    return out


def _phi_block_expm(m):
    # phi(M) is the upper-right block of expm([[M, I], [0, 0]])
    n = m.shape[0]
    big = np.zeros((2 * n, 2 * n), dtype=complex)
    big[:n, :n] = m
    big[:n, n:] = np.eye(n)
    return scipy.linalg.expm(big)[:n, n:]


def _phi_of_ad_general(x, y, scale):
    sup = (scale * ad_superoperator(x)).matrix
    lam, vecs = np.linalg.eig(sup)
    if np.linalg.cond(vecs) < 1e8:
        coef = np.linalg.solve(vecs, vec(y))
        return unvec(vecs @ (phi(lam) * coef))
    return unvec(_phi_block_expm(sup) @ vec(y))


def _ldexp(a, e):
    return np.ldexp(a.real, e) + 1j * np.ldexp(a.imag, e)


def phi_of_ad(x, y, scale):
    """phi(scale * ad_X) applied to Y.

    For Hermitian X the eigenvectors of ad_X are the outer products of the
    eigenvectors of X, with eigenvalues lambda_i - lambda_j, so the map is
    diagonal in the eigenbasis of X. Non-Hermitian X falls back to an
    eigendecomposition of the d^2 x d^2 superoperator (or a block matrix
    exponential when that eigenbasis is ill conditioned).
    """
    x, y = _check_pair(x, y)
    scale = complex(scale)
    if not np.isfinite(scale.real) or not np.isfinite(scale.imag):
        raise ValueError("scale must be finite")
    x, y = np.broadcast_arrays(np.asarray(x, dtype=complex), np.asarray(y, dtype=complex))
    if scale == 0:
        return y.copy()
    if is_hermitian(x):
        # the map is linear; an exact power-of-two rescaling keeps subnormal inputs out of the arithmetic
        c = np.abs(y).max() if y.size else 0.0
        if c == 0:
            return np.zeros_like(y)
        e = int(np.frexp(c)[1])
        lam, u = np.linalg.eigh(x)
        yt = dagger(u) @ _ldexp(y, -e) @ u
        z = scale * (lam[..., :, None] - lam[..., None, :])
        out = u @ (phi(z) * yt) @ dagger(u)
        if scale.real == 0 and is_hermitian(y):
            assert_hermitian(out, 1e-10, "phi(ad) output")
        return _ldexp(out, e)
    flat_x = x.reshape((-1,) + x.shape[-2:])
    flat_y = y.reshape((-1,) + y.shape[-2:])
    out = np.stack([_phi_of_ad_general(a, b, scale) for a, b in zip(flat_x, flat_y)])
    return out.reshape(y.shape)


def ad_power_apply(x, y, n, scale=1.0):
    """(scale * ad_X)^n Y by repeated commutators."""
    if n < 0:
        raise ValueError("n must be non-negative")
    x, y = _check_pair(x, y)
    out = np.asarray(y, dtype=complex)
    for _ in range(n):
        out = scale * commutator(x, out)
    return out


def expectation(psi, a):
    """psi^dagger A psi, broadcasting over leading axes of psi and A."""
    psi = np.asarray(psi, dtype=complex)
    a = np.asarray(a)
    if psi.shape[-1] != a.shape[-1]:
        raise ValueError("dimension mismatch: %d vs %d" % (psi.shape[-1], a.shape[-1]))
    norm = np.sum(np.abs(psi) ** 2, axis=-1)
    if np.any(np.abs(norm - 1) > 1e-9):
        warnings.warn("expectation value taken in an unnormalized state", RuntimeWarning, stacklevel=2)
    return np.einsum("...i,...ij,...j->...", psi.conj(), a, psi)


def operator_norm(a):
    """Spectral norm over the last two axes."""
    return np.linalg.norm(a, ord=2, axis=(-2, -1))


def traceless_part(a):
    a = np.asarray(a)
    d = a.shape[-1]
    tr = np.trace(a, axis1=-2, axis2=-1)
    return a - tr[..., None, None] / d * np.eye(d)
