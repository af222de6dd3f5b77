"""Operator-valued fields on a (q, p) grid: construction, derivatives, smoothing, diagnostics."""
import math
import struct
from dataclasses import dataclass

import numpy as np

LABELS = ("W", "Q", "P")


class SupportLeakError(RuntimeError):
    pass


class DeconvolutionError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseGrid:
    q_min: float
    q_max: float
    n_q: int
    p_min: float
    p_max: float
    n_p: int
    boundary: str = "periodic"

    def __post_init__(self):
        if self.n_q < 8 or self.n_p < 8:
            raise ValueError("grid needs at least 8 points per axis")
        if not (self.q_max > self.q_min and self.p_max > self.p_min):
            raise ValueError("grid bounds must be increasing")
        if self.boundary not in ("periodic", "clamped"):
            raise ValueError("boundary must be 'periodic' or 'clamped'")

    @classmethod
    def centered(cls, q0, p0, half_q, half_p, n_q=128, n_p=128, boundary="periodic"):
        return cls(q0 - half_q, q0 + half_q, n_q, p0 - half_p, p0 + half_p, n_p, boundary)

    @property
    def dq(self):
        n = self.n_q if self.boundary == "periodic" else self.n_q - 1
        return (self.q_max - self.q_min) / n

    @property
    def dp(self):
        n = self.n_p if self.boundary == "periodic" else self.n_p - 1
        return (self.p_max - self.p_min) / n

    @property
    def q(self):
        return self.q_min + self.dq * np.arange(self.n_q)

    @property
    def p(self):
        return self.p_min + self.dp * np.arange(self.n_p)

    @property
    def cell(self):
        return self.dq * self.dp

    def mesh(self):
        return np.meshgrid(self.q, self.p, indexing="ij")

    @property
    def shape(self):
        return (self.n_q, self.n_p)


@dataclass
class OperatorField:
    """data[i, j] is the d x d operator at (q_i, p_j); label names the representation."""

    data: np.ndarray
    grid: PhaseGrid
    label: str = "W"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        if self.data.shape[:2] != self.grid.shape or self.data.ndim != 4:
            raise ValueError("data shape %s does not match grid %s" % (self.data.shape, self.grid.shape))
        if self.label not in LABELS:
            raise ValueError("label must be one of %s" % (LABELS,))

    @property
    def dim(self):
        return self.data.shape[-1]

    def with_data(self, data, label=None):
        return OperatorField(data, self.grid, self.label if label is None else label)

    def copy(self):
        return self.with_data(self.data.copy())

    def __add__(self, other):
        return self.with_data(self.data + other.data)

    def __sub__(self, other):
        return self.with_data(self.data - other.data)

    def __mul__(self, c):
        return self.with_data(self.data * c)

    __rmul__ = __mul__


def scalar_field(values, grid, label="W"):
    """Wrap an (n_q, n_p) array as a d = 1 field."""
    return OperatorField(np.asarray(values, dtype=complex)[..., None, None], grid, label)


# ---- construction ----------------------------------------------------------

def gaussian_product_state(grid, q0, p0, var_q, var_p, psi=None, rho=None, label="W"):
    """Normalized Gaussian in (q, p) times a fixed quantum state."""
    if rho is None:
        psi = np.asarray(psi if psi is not None else [1.0], dtype=complex)
        psi = psi / np.linalg.norm(psi)
        rho = np.outer(psi, psi.conj())
    rho = np.asarray(rho, dtype=complex)
    sq, sp = math.sqrt(var_q), math.sqrt(var_p)
    if sq < 2 * grid.dq or sp < 2 * grid.dp:
        raise ValueError("state width is under-resolved (needs >= 2 grid spacings)")
    if (q0 - 4 * sq < grid.q_min or q0 + 4 * sq > grid.q[-1]
            or p0 - 4 * sp < grid.p_min or p0 + 4 * sp > grid.p[-1]):
        raise ValueError("state centre must lie at least 4 widths inside the grid")
    qq, pp = grid.mesh()
    dens = np.exp(-(qq - q0) ** 2 / (2 * var_q) - (pp - p0) ** 2 / (2 * var_p)) / (2 * np.pi * sq * sp)
    return OperatorField(dens[..., None, None] * rho, grid, label)


def coherent_product_state(grid, q0, p0, hbar, s, psi, label="W"):
    """Minimum-uncertainty Gaussian (variances hbar s^2/2, hbar/2s^2) times |psi><psi|."""
    return gaussian_product_state(grid, q0, p0, hbar * s**2 / 2, hbar / (2 * s**2), psi=psi, label=label)


# ---- finite differences ----------------------------------------------------

def _shift(a, k, axis, periodic):
    if periodic:
        return np.roll(a, -k, axis=axis)
    out = np.zeros_like(a)
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    n = a.shape[axis]
    if k > 0:
        src[axis], dst[axis] = slice(k, n), slice(0, n - k)
    else:
        src[axis], dst[axis] = slice(0, n + k), slice(-k, n)
    out[tuple(dst)] = a[tuple(src)]
    return out


def d1(a, axis, h, periodic=True):
    return (_shift(a, 1, axis, periodic) - _shift(a, -1, axis, periodic)) / (2 * h)


def d2(a, axis, h, periodic=True):
    return (_shift(a, 1, axis, periodic) - 2 * a + _shift(a, -1, axis, periodic)) / h**2


def fd_deriv(field, which, order=1, grid=None):
    """Central-difference derivative of a field (or raw (n_q, n_p, ...) array)."""
    if which not in ("q", "p"):
        raise ValueError("which must be 'q' or 'p'")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if isinstance(field, OperatorField):
        grid, arr = field.grid, field.data
    else:
        arr = np.asarray(field)
    axis = 0 if which == "q" else 1
    h = grid.dq if which == "q" else grid.dp
    periodic = grid.boundary == "periodic"
    out = (d1 if order == 1 else d2)(arr, axis, h, periodic)
    return field.with_data(out) if isinstance(field, OperatorField) else out


# ---- Gaussian smoothing ----------------------------------------------------

def _symbol(n, h, kind):
    k = 2 * np.pi * np.fft.fftfreq(n, d=h)
    if kind == "spectral":
        return -(k**2)
    if kind == "discrete":
        # eigenvalues of the 3-point second-difference stencil
        return -4 * np.sin(k * h / 2) ** 2 / h**2
    raise ValueError("symbol must be 'spectral' or 'discrete'")


def weierstrass(field, alpha, hbar, s, symbol="spectral", cutoff=1e-8, energy_tol=1e-4):
    """Apply exp(alpha [(hbar s^2/2) d_q^2 + (hbar/2s^2) d_p^2]) by Fourier multiplication.

    symbol="discrete" uses the Fourier symbol of the finite-difference
    Laplacian, which makes the map the exact semigroup of the grid's
    diffusion operator. For alpha < 0 modes whose forward multiplier falls
    below cutoff are removed; if they carry more than energy_tol of the
    field's spectral energy the deconvolution is refused.
    """
    grid = field.grid
    if alpha == 0:
        return field.copy()
    lq = _symbol(grid.n_q, grid.dq, symbol)
    lp = _symbol(grid.n_p, grid.dp, symbol)
    expo = (hbar * s**2 / 2) * lq[:, None] + (hbar / (2 * s**2)) * lp[None, :]
    spec = np.fft.fft2(field.data, axes=(0, 1))
    if alpha > 0:
        mult = np.exp(alpha * expo)
    else:
        forward = np.exp(-alpha * expo)
        keep = forward >= cutoff
        energy = np.sum(np.abs(spec) ** 2, axis=(2, 3))
        lost = energy[~keep].sum() / max(energy.sum(), 1e-300)
        if lost > energy_tol:
            raise DeconvolutionError("inverse smoothing ill-posed: %.2e of spectral energy beyond cutoff" % lost)
        mult = np.where(keep, np.exp(alpha * expo), 0.0)
    out = np.fft.ifft2(spec * mult[:, :, None, None], axes=(0, 1))
    return field.with_data(out)


# ---- Moyal product ---------------------------------------------------------

def _as_array(f):
    if isinstance(f, OperatorField):
        return f.data
    f = np.asarray(f)
    if f.ndim == 2:
        return f[..., None, None]
    return f


def _mixed(a, nq, np_, grid):
    out = a
    periodic = grid.boundary == "periodic"
    for _ in range(nq):
        out = d1(out, 0, grid.dq, periodic)
    for _ in range(np_):
        out = d1(out, 1, grid.dp, periodic)
    return out


def moyal_star(f, g, hbar, K, grid=None):
    """Truncated Moyal product f * g = sum_k (i hbar/2)^k/k! f (<d_q d_p> - <d_p d_q>)^k g."""
    if K > 4:
        raise ValueError("Moyal truncation order K must be <= 4")
    if grid is None:
        grid = f.grid if isinstance(f, OperatorField) else g.grid
    a, b = _as_array(f), _as_array(g)
    total = a @ b
    for k in range(1, K + 1):
        pref = (1j * hbar / 2) ** k / math.factorial(k)
        for j in range(k + 1):
            coef = math.comb(k, j) * (-1) ** j
            total = total + pref * coef * (_mixed(a, k - j, j, grid) @ _mixed(b, j, k - j, grid))
    label = g.label if isinstance(g, OperatorField) else "W"
    return OperatorField(total, grid, label)


def poisson_bracket(f, g, grid):
    """{f, g} = df/dq dg/dp - df/dp dg/dq for (n_q, n_p, d, d) arrays (operator order kept)."""
    periodic = grid.boundary == "periodic"
    fq, fp = d1(f, 0, grid.dq, periodic), d1(f, 1, grid.dp, periodic)
    gq, gp = d1(g, 0, grid.dq, periodic), d1(g, 1, grid.dp, periodic)
    return fq @ gp - fp @ gq


# ---- diagnostics -----------------------------------------------------------

def trace_density(field):
    return np.real(np.trace(field.data, axis1=-2, axis2=-1))


def hermiticity_defect(field):
    return float(np.abs(field.data - np.conj(np.swapaxes(field.data, -1, -2))).max())


def min_eigenvalue(field):
    herm = 0.5 * (field.data + np.conj(np.swapaxes(field.data, -1, -2)))
    return float(np.linalg.eigvalsh(herm).min())


def diagnostics(field):
    grid = field.grid
    marg = trace_density(field)
    total = float(marg.sum() * grid.cell)
    qq, pp = grid.mesh()
    w = marg * grid.cell / total if total != 0 else marg * 0
    mq = float((w * qq).sum())
    mp = float((w * pp).sum())
    vq = float((w * (qq - mq) ** 2).sum())
    vp = float((w * (pp - mp) ** 2).sum())
    rho = field.data.sum(axis=(0, 1)) * grid.cell
    tr = np.real(np.trace(rho))
    purity = float(np.real(np.trace(rho @ rho)) / tr**2) if tr != 0 else float("nan")
    lam_min = min_eigenvalue(field)
    out = {
        "total_trace": total,
        "classical_marginal": marg,
        "mean_q": mq, "mean_p": mp, "var_q": vq, "var_p": vp,
        "quantum_partial_state": rho,
        "min_eigenvalue_over_grid": lam_min,
        "peak_density": float(marg.max()),
        "purity": purity,
        "hermiticity_defect": hermiticity_defect(field),
    }
    # a positive partial Glauber-Sudarshan field certifies an effective CQ state
    out["effective_cq_state"] = bool(field.label == "P" and lam_min >= 0)
    return out


def boundary_mass(field, cells=3):
    """Fraction of |trace density| within `cells` cells of the grid edge."""
    marg = np.abs(trace_density(field))
    total = marg.sum()
    if total == 0:
        return 0.0
    inner = marg[cells:-cells, cells:-cells].sum()
    return float((total - inner) / total)


def check_support(field, tol=1e-6, cells=3):
    mass = boundary_mass(field, cells)
    if mass >= tol:
        raise SupportLeakError("field support reaches the grid boundary: %.2e of mass within %d cells" % (mass, cells))
    return mass


def l1_distance(a, b):
    """Integrated trace norm of a - b over the grid."""
    diff = a.data - b.data
    herm = 0.5 * (diff + np.conj(np.swapaxes(diff, -1, -2)))
    return float(np.abs(np.linalg.eigvalsh(herm)).sum() * a.grid.cell)


# ---- snapshot I/O ----------------------------------------------------------

_HEADER = struct.Struct("<4sIII4d")
MAGIC = b"CQF1"


def write_snapshot(path, field):
    """Little-endian header {magic, n_q, n_p, d, q_min, q_max, p_min, p_max} then complex128 data."""
    g = field.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, g.n_q, g.n_p, field.dim, g.q_min, g.q_max, g.p_min, g.p_max))
        fh.write(np.ascontiguousarray(field.data, dtype="<c16").tobytes())


def read_snapshot(path, boundary="periodic", label="W"):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, nq, np_, d, q0, q1, p0, p1 = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError("not a field snapshot (bad magic %r)" % magic)
        data = np.frombuffer(fh.read(), dtype="<c16")
    if data.size != nq * np_ * d * d:
        raise ValueError("snapshot payload size mismatch")
    grid = PhaseGrid(q0, q1, nq, p0, p1, np_, boundary)
    return OperatorField(data.reshape(nq, np_, d, d).astype(complex), grid, label)


def write_marginal_csv(path, field):
    g = field.grid
    marg = trace_density(field)
    qq, pp = g.mesh()
    table = np.column_stack([qq.ravel(), pp.ravel(), marg.ravel()])
    np.savetxt(path, table, delimiter=",", header="q,p,density", comments="", fmt="%.12e")
