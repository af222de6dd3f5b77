"""Lindblad operators, effective Hamiltonian and diffusion matrices of the CQ generator.

The Lindblad operators are L_z = phi(ad_{-iH/E}) dH/dz with phi(x) = (e^x - 1)/x.
The effective Hamiltonian is

    H_eff = (hbar s^2/4) dL_q/dq + (hbar/4s^2) dL_p/dp
            + (hbar/4E) sum_{n,m} C_nm/(n+m+2)! {ad^n dH/dp, ad^m dH/dq}

with ad = ad_{-iH/E} and integer coefficients C_nm.
"""
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .hamiltonian import ModelParams, deriv, eval_h
from .operator_algebra import (anticommutator, assert_hermitian, commutator, dagger, phi,
                               phi_of_ad)


class SeriesConvergenceWarning(RuntimeWarning):
    pass


# ---- C_nm coefficients -----------------------------------------------------

def cnm(n, m):
    """C_nm = sum_{r<=n} binom(r+m, m) - sum_{r<=m} binom(r+n, n) (exact integer)."""
    n, m = int(n), int(m)
    if n < 0 or m < 0:
        raise ValueError("n and m must be non-negative")
    a = sum(math.comb(r + m, m) for r in range(n + 1))
    b = sum(math.comb(r + n, n) for r in range(m + 1))
    return a - b


def cnm_table(n_max):
    """Integer table C[n, m] for 0 <= n, m <= n_max (object dtype keeps exact ints)."""
    tab = np.empty((n_max + 1, n_max + 1), dtype=object)
    for n in range(n_max + 1):
        for m in range(n_max + 1):
            tab[n, m] = cnm(n, m)
    return tab


def cnm_triangle(n_rows):
    """Rows r = 0..n_rows of the triangle, each listed as C_{r,0}, C_{r-1,1}, ..., C_{0,r}."""
    return [[cnm(r - k, k) for k in range(r + 1)] for r in range(n_rows + 1)]


# ---- Lindblad operators and effective Hamiltonian --------------------------

def _check_E(E):
    if not np.isfinite(E) or E <= 0:
        raise ValueError("E must be > 0, got %r" % (E,))


def lindblad_ops(H, q, p, E):
    """(L_q, L_p) at the phase point(s) (q, p)."""
    _check_E(E)
    h = eval_h(H, q, p)
    lq = phi_of_ad(h, deriv(H, q, p, "q"), -1j / E)
    lp = phi_of_ad(h, deriv(H, q, p, "p"), -1j / E)
    return lq, lp


def _fro(a):
    return np.sqrt(np.sum(np.abs(a) ** 2, axis=(-2, -1)))


@dataclass
class SeriesInfo:
    shells: int
    converged: bool
    last_shell_norm: float


def heff_series(h, dqh, dph, E, N_max=30, tol=1e-10):
    """sum_{n+m <= N_max} C_nm/(n+m+2)! {ad^n dph, ad^m dqh}, summed shell by shell.

    Stops once a shell of constant n+m is below tol times the accumulated sum
    and no larger than the previous shell. Returns (sum, SeriesInfo).
    """
    scale = -1j / E
    A = [np.asarray(dph, dtype=complex)]
    B = [np.asarray(dqh, dtype=complex)]
    total = np.zeros(np.broadcast_shapes(h.shape, A[0].shape), dtype=complex)
    prev = np.inf
    converged = False
    shell_norm = 0.0
    S = 0
    for S in range(N_max + 1):
        while len(A) <= S:
            A.append(scale * commutator(h, A[-1]))
            B.append(scale * commutator(h, B[-1]))
        shell = np.zeros_like(total)
        for n in range(S + 1):
            c = cnm(n, S - n)
            if c:
                shell = shell + c * anticommutator(A[n], B[S - n])
        shell = shell / math.factorial(S + 2)
        total = total + shell
        shell_norm = float(_fro(shell).max())
        acc = float(_fro(total).max())
        if S >= 1 and shell_norm <= tol * acc and shell_norm <= prev:
            converged = True
            break
        if S >= 1 and acc == 0.0 and shell_norm == 0.0:
            # both adjoint orbits vanished: the series is identically zero
            if not np.any(A[-1]) and not np.any(B[-1]):
                converged = True
                break
        prev = shell_norm
    return total, SeriesInfo(S, converged, shell_norm)


def _cnm_kernel(x, y):
    """F(x, y) = sum_{n,m} C_nm x^n y^m/(n+m+2)! in closed form.

    F = [phi(x+y) - phi(x)]/y - [phi(x+y) - phi(y)]/x = (x - y) e[0, x, y, x+y],
    with e[...] the third divided difference of exp, read off the corner of the
    exponential of a bidiagonal 4x4 matrix (stable for coincident arguments).
    """
    x, y = np.broadcast_arrays(np.asarray(x, complex), np.asarray(y, complex))
    M = np.zeros(x.shape + (4, 4), dtype=complex)
    M[..., 0, 1] = M[..., 1, 2] = M[..., 2, 3] = 1
    M[..., 1, 1], M[..., 2, 2], M[..., 3, 3] = x, y, x + y
    return (x - y) * _expm_stack(M)[..., 0, 3]


def _expm_stack(M, terms=18):
    """exp of a stack of small matrices by scaling and squaring a Taylor series."""
    norm = float(np.abs(M).sum(axis=-1).max()) if M.size else 0.0
    k = max(0, int(np.ceil(np.log2(norm / 0.5)))) if norm > 0.5 else 0
    A = M / 2.0**k
    out = np.broadcast_to(np.eye(M.shape[-1], dtype=complex), M.shape).copy()
    term = out.copy()
    for j in range(1, terms + 1):
        term = term @ A / j
        out = out + term
    for _ in range(k):
        out = out @ out
    return out


_KERNEL_CHUNK = 1 << 16


def heff_spectral(h, dqh, dph, E):
    """Same double sum as heff_series, evaluated exactly in the eigenbasis of h.

    With z_ij = -i(lam_i - lam_j)/E the sum is
    sum_k F(z_ik, z_kj) (a_ik b_kj - b_ik a_kj), a = dH/dp and b = dH/dq in the
    eigenbasis, so no truncation in n + m is involved. Requires Hermitian h.
    """
    lam, u = np.linalg.eigh(h)
    ud = dagger(u)
    a = ud @ dph @ u
    b = ud @ dqh @ u
    shape = np.broadcast_shapes(a.shape, b.shape)
    d = shape[-1]
    lam = np.broadcast_to(lam, shape[:-1]).reshape(-1, d)
    a = np.broadcast_to(a, shape).reshape(-1, d, d)
    b = np.broadcast_to(b, shape).reshape(-1, d, d)
    total = np.empty_like(a)
    per = max(1, _KERNEL_CHUNK // d**3)
    for lo in range(0, lam.shape[0], per):
        sl = slice(lo, lo + per)
        z = (-1j / E) * (lam[sl, :, None] - lam[sl, None, :])
        F = _cnm_kernel(z[:, :, :, None], z[:, None, :, :])  # F[., i, k, j]
        pair = a[sl, :, :, None] * b[sl, None, :, :] - b[sl, :, :, None] * a[sl, None, :, :]
        total[sl] = np.einsum("nikj,nikj->nij", F, pair)
    total = total.reshape(shape)
    return u @ total @ ud


def h_eff(H, q, p, E, hbar, s, N_max=30, tol=1e-10, return_info=False, method="auto"):
    """Effective Hamiltonian at (q, p); Hermitian to 1e-10.

    method="series" sums the C_nm series shell by shell (warning if it has
    not converged by N_max); "spectral" uses heff_spectral; "auto" uses the
    series and switches to the spectral evaluation when the series has not
    converged.
    """
    if method not in ("auto", "series", "spectral"):
        raise ValueError("method must be 'auto', 'series' or 'spectral'")
    _check_E(E)
    if hbar <= 0 or s <= 0:
        raise ValueError("hbar and s must be > 0")
    if N_max < 0:
        raise ValueError("N_max must be >= 0")
    q, p = np.broadcast_arrays(np.asarray(q, float), np.asarray(p, float))
    step = H.fd_step
    dLq = (lindblad_ops(H, q + step, p, E)[0] - lindblad_ops(H, q - step, p, E)[0]) / (2 * step)
    dLp = (lindblad_ops(H, q, p + step, E)[1] - lindblad_ops(H, q, p - step, E)[1]) / (2 * step)
    h = eval_h(H, q, p)
    dqh, dph = deriv(H, q, p, "q"), deriv(H, q, p, "p")
    if method == "spectral":
        series, info = heff_spectral(h, dqh, dph, E), SeriesInfo(-1, True, 0.0)
    else:
        series, info = heff_series(h, dqh, dph, E, N_max, tol)
    if not info.converged and method == "auto":
        series, info = heff_spectral(h, dqh, dph, E), SeriesInfo(info.shells, False, info.last_shell_norm)
    elif not info.converged:
        warnings.warn("effective-Hamiltonian series not converged after %d shells "
                      "(last shell norm %.3e)" % (info.shells, info.last_shell_norm),
                      SeriesConvergenceWarning, stacklevel=2)
    out = hbar * s**2 / 4 * dLq + hbar / (4 * s**2) * dLp + hbar / (4 * E) * series
    assert_hermitian(out, 1e-10, "H_eff")
    if return_info:
        return out, info
    return out


def h1_correction(H, q, p, E):
    """phi(ad_{-iH/E}) H1: the operator whose commutator enters the unitary part."""
    _check_E(E)
    if H.h1 is None:
        raise ValueError("Hamiltonian has no first-order part h1")
    q, p = np.broadcast_arrays(np.asarray(q, float), np.asarray(p, float))
    h = eval_h(H, q, p)
    h1 = np.broadcast_to(np.asarray(H.h1(q, p), dtype=complex), h.shape)
    out = phi_of_ad(h, h1, -1j / E)
    assert_hermitian(out, 1e-10, "h1 correction")
    return out


# ---- diffusion matrices and positivity -------------------------------------

def d_matrices(E, s):
    """(D0, D1, D2) of the limiting dynamics for diffusion scale E and squeeze s."""
    _check_E(E)
    if s <= 0:
        raise ValueError("s must be > 0")
    s2 = s * s
    D0 = np.array([[s2 / (2 * E), -0.5j / E], [0.5j / E, 1 / (2 * E * s2)]])
    D1 = np.array([[0.5j * s2, 0.5], [-0.5, 0.5j / s2]])
    D2 = np.array([[E * s2, 0.0], [0.0, E / s2]])
    return D0, D1, D2


def qcle_d_matrices():
    """D-matrices that reproduce the quantum-classical Liouville bracket."""
    return np.zeros((2, 2), complex), 0.5 * np.eye(2, dtype=complex), np.zeros((2, 2))


@dataclass
class TradeoffReport:
    d0_psd: bool
    d2_psd: bool
    range_condition: bool
    tradeoff_holds: bool
    saturated: bool
    margin: float
    margin_2d0: float
    range_residual: float
    saturation_residual: float

    @property
    def passed(self):
        return self.d0_psd and self.d2_psd and self.range_condition and self.tradeoff_holds

    def as_dict(self):
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v))
                for k, v in self.__dict__.items()} | {"passed": bool(self.passed)}


def _min_eig_herm(a):
    return float(np.linalg.eigvalsh(0.5 * (a + dagger(a))).min())


def tradeoff_check(D0, D1, D2, tol=1e-12):
    """Evaluate the positivity conditions D0 >= 0, D2 >= 0, range and trade-off.

    The trade-off is D0 >= D1^dagger pinv(D2) D1; the margin of the weaker
    condition 2 D0 >= D1^dagger pinv(D2) D1 is reported as margin_2d0.
    Saturation is judged relative to max(|D0|, 1), since the absolute residual
    is limited by float64 spacing of the D0 entries.
    """
    D0 = np.asarray(D0, dtype=complex)
    D1 = np.asarray(D1, dtype=complex)
    D2 = np.asarray(D2, dtype=complex)
    scale0 = max(np.abs(D0).max(), 1.0)
    scale2 = max(np.abs(D2).max(), 1.0)
    pinv = np.linalg.pinv(D2, rcond=tol, hermitian=True)
    proj = D2 @ pinv
    range_res = float(np.abs((np.eye(D2.shape[0]) - proj) @ D1).max())
    M = dagger(D1) @ pinv @ D1
    margin = _min_eig_herm(D0 - M)
    margin2 = _min_eig_herm(2 * D0 - M)
    sat = float(np.linalg.norm(D0 - M, 2))
    return TradeoffReport(
        d0_psd=_min_eig_herm(D0) >= -tol * scale0 and np.abs(D0 - dagger(D0)).max() <= tol * scale0,
        d2_psd=_min_eig_herm(D2) >= -tol * scale2 and np.abs(D2 - D2.T).max() <= tol * scale2,
        range_condition=range_res <= tol * max(np.abs(D1).max(), 1.0),
        tradeoff_holds=margin >= -max(tol, 1e-10) * scale0,
        saturated=sat <= tol * scale0,
        margin=margin, margin_2d0=margin2, range_residual=range_res, saturation_residual=sat)


# ---- coupled harmonic oscillators ------------------------------------------

def _even_odd(f, omega, series, small=1e-2):
    """Return ((f(iw)+f(-iw))/2, (f(iw)-f(-iw))/(2iw)) for a real-coefficient series f.

    series gives the Taylor coefficients used when omega is small.
    """
    omega = float(omega)
    if omega < small:
        c = sum(a * (-omega**2) ** (k // 2) for k, a in enumerate(series) if k % 2 == 0)
        s = sum(a * (-omega**2) ** (k // 2) for k, a in enumerate(series) if k % 2 == 1)
        return c, s
    v = f(1j * omega)
    return v.real, v.imag / omega


def _phi_scalar(z):
    return np.expm1(z) / z


def _g_scalar(z):
    # g(z) = -sum_m m z^m/(m+2)!
    return -np.expm1(z) / z + 2 * (np.expm1(z) - z) / z**2


_PHI_SERIES = [1 / math.factorial(k + 1) for k in range(12)]
_G_SERIES = [-k / math.factorial(k + 2) for k in range(12)]


def ho_closed_forms(params, q, p, Q=None, P=None, variant="printed"):
    """Closed-form (L_q, L_p, H_eff) for H = p^2/2m_C + P^2/2m_Q + lam (q - Q)^2.

    variant="derived" resums the adjoint series on span{q - Q, P}, on which
    ad u = a P and ad P = -b u with a = hbar/(E m_Q), b = 2 lam hbar/E.
    variant="printed" evaluates the expressions as they are commonly quoted:
    angle sqrt(lam) hbar/(E sqrt(m_Q)), a logarithm/arctangent form for H_eff
    and no identity or p-dependent parts.
    """
    from .hamiltonian import fock_operators
    if Q is None or P is None:
        omega = np.sqrt(2 * params.lam / params.m_Q) if params.lam > 0 else 1.0
        Q, P = fock_operators(params.fock_dim, params.hbar, params.m_Q, omega)
    d = Q.shape[0]
    eye = np.eye(d, dtype=complex)
    lam, mQ, mC, E, hbar, s = params.lam, params.m_Q, params.m_C, params.E, params.hbar, params.s
    u = q * eye - Q
    Lp = (p / mC) * eye
    if variant == "printed":
        th = np.sqrt(lam) * hbar / (E * np.sqrt(mQ))
        Lq = E / hbar * (2 * np.sqrt(lam * mQ) * np.sin(th) * u + (1 - np.cos(th)) * P)
        if lam == 0:
            return Lq, Lp, np.zeros_like(u)
        cu = -2 * E**2 * lam * mQ * (np.log1p(th**2) / (lam * hbar**2) - 1 / (E**2 * mQ + lam * hbar**2))
        cp = -E * (np.sqrt(lam) * hbar * (2 * E**2 * mQ + lam * hbar**2) / (E**2 * mQ + lam * hbar**2)
                   - 2 * E * np.sqrt(mQ) * np.arctan(th)) / (np.sqrt(lam) * hbar**2)
        return Lq, Lp, cu * u + cp * P
    if variant != "derived":
        raise ValueError("variant must be 'derived' or 'printed'")
    a = hbar / (E * mQ)
    b = 2 * lam * hbar / E
    w = np.sqrt(a * b)
    c_phi, s_phi = _even_odd(_phi_scalar, w, _PHI_SERIES)
    c_g, s_g = _even_odd(_g_scalar, w, _G_SERIES)
    Lq = 2 * lam * (c_phi * u + s_phi * a * P)
    Heff = (hbar * s**2 / 4 * 2 * lam * c_phi + hbar / (4 * s**2 * mC)) * eye \
        + hbar * lam * p / (E * mC) * (c_g * u + s_g * a * P)
    return Lq, Lp, Heff


def ho_angle(params):
    """sqrt(lam) hbar/(E sqrt(m_Q)), the expansion parameter of the oscillator series."""
    return np.sqrt(params.lam) * params.hbar / (params.E * np.sqrt(params.m_Q))


def ho_compare(params, q, p, variant="printed", block=10, N_max=60, tol=1e-14):
    """Relative max-entry errors of the series L_q and H_eff against closed forms.

    Only the leading block x block corner of the Fock matrices is compared:
    truncation breaks [Q, P] = i hbar in the top number states, and repeated
    commutators carry that defect downwards by one level per order.
    """
    from .hamiltonian import coupled_oscillators
    H = coupled_oscillators(params)
    Lq, _ = lindblad_ops(H, q, p, params.E)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeriesConvergenceWarning)
        He, info = h_eff(H, q, p, params.E, params.hbar, params.s, N_max=N_max, tol=tol,
                         return_info=True, method="series")
    cq, _, ch = ho_closed_forms(params, q, p, variant=variant)
    k = block
    err_L = float(np.abs(Lq - cq)[:k, :k].max() / np.abs(cq[:k, :k]).max())
    err_H = float(np.abs(He - ch)[:k, :k].max() / max(np.abs(ch[:k, :k]).max(), 1e-300))
    return {"err_L": err_L, "err_H": err_H, "theta": float(ho_angle(params)),
            "shells": info.shells, "converged": bool(info.converged)}


# ---- bundled generator data ------------------------------------------------

@dataclass(frozen=True)
class GeneratorData:
    L_q: np.ndarray
    L_p: np.ndarray
    H_eff: np.ndarray
    D0: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    point: tuple
    H: np.ndarray = None
    hbar: float = None

    def check(self):
        """Raise if any of the structural invariants fails."""
        if np.abs(self.D0 - dagger(self.D0)).max() > 1e-10 or _min_eig_herm(self.D0) < -1e-10:
            raise ValueError("D0 is not Hermitian PSD")
        if np.abs(self.D2 - self.D2.T).max() > 1e-12 or _min_eig_herm(self.D2) < -1e-12:
            raise ValueError("D2 is not symmetric PSD")
        assert_hermitian(self.H_eff, 1e-10, "H_eff")
        rep = tradeoff_check(self.D0, self.D1, self.D2)
        if rep.margin < -1e-10 * max(1.0, np.abs(self.D0).max()):
            raise ValueError("trade-off violated: margin %.3e" % rep.margin)
        return True


def assemble(H, params, q, p, N_max=30, tol=1e-10, heff_method="auto"):
    """GeneratorData at (q, p); q and p may be arrays (a whole grid at once)."""
    if not isinstance(params, ModelParams):
        raise TypeError("params must be a ModelParams")
    E, s, hbar = params.E, params.s, params.hbar
    Lq, Lp = lindblad_ops(H, q, p, E)
    heff = h_eff(H, q, p, E, hbar, s, N_max, tol, method=heff_method)
    if H.h1 is not None:
        heff = heff + hbar * h1_correction(H, q, p, E)
    D0, D1, D2 = d_matrices(E, s)
    return GeneratorData(Lq, Lp, heff, D0, D1, D2, (q, p), eval_h(H, q, p), hbar)
