"""Operator-valued Hamiltonians H(q, p) on a classical phase space and built-in models."""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .operator_algebra import PAULI_X, PAULI_Z, commutator, operator_norm

MODEL_NAMES = ("single_system", "qubit_linear", "qubit_transverse", "coupled_oscillators")


@dataclass(frozen=True)
class ModelParams:
    m_C: float = 1.0
    m_Q: float = 1.0
    lam: float = 0.0
    s: float = 1.0
    E: float = 1.0
    hbar: float = 1.0
    fock_dim: int = 20
    g: float = 1.0
    delta: float = 0.0

    def __post_init__(self):
        for name in ("m_C", "m_Q", "s", "E", "hbar"):
            val = getattr(self, name)
            if not np.isfinite(val) or val <= 0:
                raise ValueError("%s must be > 0, got %r" % (name, val))
        if self.lam < 0:
            raise ValueError("lam must be >= 0, got %r" % self.lam)
        if int(self.fock_dim) != self.fock_dim or self.fock_dim < 2:
            raise ValueError("fock_dim must be an integer >= 2")

    def replace(self, **kw):
        vals = {k: getattr(self, k) for k in self.__dataclass_fields__}
        vals.update(kw)
        return ModelParams(**vals)


@dataclass(frozen=True)
class CQHamiltonian:
    """H(q, p) as a callable returning a (..., d, d) Hermitian stack.

    dq, dp, d2q, d2p are optional analytic derivatives with the same calling
    convention; when absent, central finite differences with step fd_step are
    used. h1 is an optional first-order-in-hbar part of the Hamiltonian.
    """

    func: Callable
    dim: int
    dq: Optional[Callable] = None
    dp: Optional[Callable] = None
    d2q: Optional[Callable] = None
    d2p: Optional[Callable] = None
    h1: Optional[Callable] = None
    fd_step: float = 1e-4
    name: str = "custom"
    scalar: bool = False
    info: dict = field(default_factory=dict, compare=False)

    def eval(self, q, p):
        return eval_h(self, q, p)

    def deriv(self, q, p, which, order=1):
        return deriv(self, q, p, which, order)


def _finite(q, p):
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
        raise ValueError("phase point must be finite")
    return np.broadcast_arrays(q, p)


def eval_h(H, q, p):
    q, p = _finite(q, p)
    out = np.asarray(H.func(q, p), dtype=complex)
    return np.broadcast_to(out, q.shape + (H.dim, H.dim))


def deriv(H, q, p, which, order=1):
    """dH/dq, dH/dp or second derivatives, analytic if supplied.

    The finite-difference fallback uses a central 3-point stencil with step
    fd_step for first derivatives and 10*fd_step for second derivatives
    (keeps roundoff of the h^-2 stencil below 1e-9 relative).
    """
    if which not in ("q", "p"):
        raise ValueError("which must be 'q' or 'p'")
    if order not in (1, 2):
        raise ValueError("derivative order %r unsupported (1 or 2)" % (order,))
    q, p = _finite(q, p)
    analytic = getattr(H, ("d" if order == 1 else "d2") + which)
    if analytic is not None:
        out = np.asarray(analytic(q, p), dtype=complex)
        return np.broadcast_to(out, q.shape + (H.dim, H.dim))
    h = H.fd_step if order == 1 else 10 * H.fd_step
    if which == "q":
        plus, minus = eval_h(H, q + h, p), eval_h(H, q - h, p)
    else:
        plus, minus = eval_h(H, q, p + h), eval_h(H, q, p - h)
    if order == 1:
        return (plus - minus) / (2 * h)
    return (plus - 2 * eval_h(H, q, p) + minus) / h**2


def is_self_commuting(H, sample_pts, tol=1e-10):
    """Check [H(z), H(z')] = 0 over all pairs of sample points.

    Returns (flag, max commutator norm).
    """
    pts = np.asarray(sample_pts, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ValueError("need at least two (q, p) sample points")
    ops = eval_h(H, pts[:, 0], pts[:, 1])
    comm = commutator(ops[:, None], ops[None, :])
    worst = float(operator_norm(comm).max())
    return worst <= tol, worst


def default_sample_points(q_range, p_range, n=5):
    qs = np.linspace(q_range[0], q_range[1], n)
    ps = np.linspace(p_range[0], p_range[1], n)
    qq, pp = np.meshgrid(qs, ps, indexing="ij")
    return np.column_stack([qq.ravel(), pp.ravel()])


def _eye_field(q, d, coef=1.0):
    return np.asarray(coef)[..., None, None] * np.eye(d, dtype=complex)


# ---- potentials for the single-system model ------------------------------

def potential(kind="free", m=1.0, omega=1.0, a=1.0, b=1.0):
    """Return (V, V', V'') callables for a named potential."""
    if kind == "free":
        return (lambda q: 0.0 * q, lambda q: 0.0 * q, lambda q: 0.0 * q)
    if kind == "harmonic":
        k = m * omega**2
        return (lambda q: 0.5 * k * q**2, lambda q: k * q, lambda q: k + 0.0 * q)
    if kind == "double_well":
        # V = a (q^2 - b^2)^2
        return (lambda q: a * (q**2 - b**2) ** 2,
                lambda q: 4 * a * q * (q**2 - b**2),
                lambda q: 4 * a * (3 * q**2 - b**2))
    raise ValueError("unknown potential %r (free, harmonic, double_well)" % kind)


def single_system(m=1.0, V=None, dim=1, name="single_system"):
    """H = p^2/2m + V(q) times the identity on a d-dimensional quantum space."""
    if V is None:
        V = potential("free")
    v, dv, d2v = V

    def func(q, p):
        return _eye_field(q, dim, p**2 / (2 * m) + v(q))

    return CQHamiltonian(
        func=func, dim=dim,
        dq=lambda q, p: _eye_field(q, dim, dv(q) + 0.0 * p),
        dp=lambda q, p: _eye_field(q, dim, p / m + 0.0 * q),
        d2q=lambda q, p: _eye_field(q, dim, d2v(q) + 0.0 * p),
        d2p=lambda q, p: _eye_field(q, dim, 1.0 / m + 0.0 * q + 0.0 * p),
        name=name, scalar=True, info={"m": m})


def qubit_linear(m=1.0, g=1.0):
    """H = p^2/2m + g q sigma_z."""
    return qubit_transverse(m, g, 0.0, name="qubit_linear")


def qubit_transverse(m=1.0, g=1.0, delta=1.0, name="qubit_transverse"):
    """H = p^2/2m + g q sigma_z + (delta/2) sigma_x."""

    def func(q, p):
        return (_eye_field(q, 2, p**2 / (2 * m)) + (g * q)[..., None, None] * PAULI_Z
                + 0.5 * delta * PAULI_X)

    return CQHamiltonian(
        func=func, dim=2,
        dq=lambda q, p: np.broadcast_to(g * PAULI_Z, np.shape(q) + (2, 2)),
        dp=lambda q, p: _eye_field(q, 2, p / m + 0.0 * q),
        d2q=lambda q, p: np.zeros(np.shape(q) + (2, 2), dtype=complex),
        d2p=lambda q, p: _eye_field(q, 2, 1.0 / m + 0.0 * q + 0.0 * p),
        name=name, info={"m": m, "g": g, "delta": delta})


def fock_operators(dim, hbar=1.0, mass=1.0, omega=1.0):
    """Truncated position and momentum operators in the number basis."""
    a = np.diag(np.sqrt(np.arange(1, dim)), 1).astype(complex)
    x = np.sqrt(hbar / (2 * mass * omega)) * (a + a.T)
    pm = 1j * np.sqrt(hbar * mass * omega / 2) * (a.T - a)
    return x, pm


def coupled_oscillators(params):
    """H = p^2/2m_C + P^2/2m_Q + lam (q - Q)^2 on a truncated Fock space.

    The Fock basis uses the frequency sqrt(2 lam/m_Q) of the quantum
    oscillator at q = 0 (1 if lam = 0), so H(0, p) is diagonal.
    """
    m_c, m_q, lam, d = params.m_C, params.m_Q, params.lam, int(params.fock_dim)
    omega = np.sqrt(2 * lam / m_q) if lam > 0 else 1.0
    Q, P = fock_operators(d, params.hbar, m_q, omega)
    eye = np.eye(d, dtype=complex)
    kin_q = P @ P / (2 * m_q)

    def func(q, p):
        u = q[..., None, None] * eye - Q
        return _eye_field(q, d, p**2 / (2 * m_c)) + kin_q + lam * (u @ u)

    return CQHamiltonian(
        func=func, dim=d,
        dq=lambda q, p: 2 * lam * (np.asarray(q)[..., None, None] * eye - Q) + 0.0 * np.asarray(p)[..., None, None],
        dp=lambda q, p: _eye_field(q, d, p / m_c + 0.0 * q),
        d2q=lambda q, p: _eye_field(q, d, 2 * lam + 0.0 * q + 0.0 * p),
        d2p=lambda q, p: _eye_field(q, d, 1.0 / m_c + 0.0 * q + 0.0 * p),
        name="coupled_oscillators",
        info={"Q": Q, "P": P, "omega": omega, "m_C": m_c, "m_Q": m_q, "lam": lam})


def fock_tail_weight(state, n_top=2):
    """Population in the top n_top number states of a vector or density matrix."""
    state = np.asarray(state)
    if state.ndim >= 2 and state.shape[-1] == state.shape[-2]:
        pops = np.real(np.diagonal(state, axis1=-2, axis2=-1))
        total = pops.sum(axis=-1)
    else:
        pops = np.abs(state) ** 2
        total = pops.sum(axis=-1)
    return pops[..., -n_top:].sum(axis=-1) / total


def fock_truncation_ok(state, threshold=1e-6):
    return bool(np.all(fock_tail_weight(state) <= threshold))


def build_model(name, params, potential_spec=None):
    """Construct one of the named built-in Hamiltonians."""
    if name == "single_system":
        spec = dict(potential_spec or {"kind": "free"})
        kind = spec.pop("kind", "free")
        return single_system(params.m_C, potential(kind, m=params.m_C, **spec))
    if name == "qubit_linear":
        return qubit_linear(params.m_C, params.g)
    if name == "qubit_transverse":
        return qubit_transverse(params.m_C, params.g, params.delta)
    if name == "coupled_oscillators":
        return coupled_oscillators(params)
    raise ValueError("unknown model %r; valid models: %s" % (name, ", ".join(MODEL_NAMES)))
