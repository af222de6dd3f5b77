"""Time derivatives and time evolution of operator fields under the CQ generators.

Generator tags
    main_cq          completely positive CQ generator built from (L_q, L_p, H_eff, D0, D1, D2)
    liouville        classical Liouville flow {H, rho} for H proportional to the identity
    qcle             -(i/hbar)[H, rho] + (1/2)({H, rho} - {rho, H})
    husimi_h0        qcle minus the smoothing corrections (partial Husimi generator)
    glauber_h0       qcle plus the smoothing corrections (partial Glauber-Sudarshan generator)
    self_commuting   glauber_h0 + Lindblad term in L = s dH/dq + (i/s) dH/dp + diffusion
    fokker_planck    {H, rho} + (E s^2/2) d_q^2 rho + (E/2s^2) d_p^2 rho
"""
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .generator import assemble
from .hamiltonian import default_sample_points, deriv, eval_h, is_self_commuting
from .operator_algebra import dagger, operator_norm, traceless_part
from .phase_space import (OperatorField, check_support, d1, d2, diagnostics, l1_distance,
                          weierstrass)

TAGS = ("main_cq", "liouville", "qcle", "husimi_h0", "glauber_h0", "self_commuting", "fokker_planck")
_DIFFUSIVE = ("main_cq", "self_commuting", "fokker_planck")
_SCALAR_ONLY = ("liouville", "fokker_planck")


class InstabilityError(RuntimeError):
    pass


def _comm(a, x):
    return a @ x - x @ a


def _acomm(a, x):
    return a @ x + x @ a


@dataclass
class Prepared:
    """Per-grid coefficient fields of a generator (built once, then read only)."""
    grid: object
    tag: str
    H: np.ndarray
    K: np.ndarray = None          # Hermitian generator of the -(i/hbar)[K, .] part
    coeffs: dict = dc_field(default_factory=dict)
    dt_max: float = np.inf
    unitary_rate: float = 0.0
    _ip_cache: dict = dc_field(default_factory=dict)


class GeneratorKind:
    """A generator tag bound to a Hamiltonian and model parameters."""

    def __init__(self, tag, params, H, N_max=30, tol=1e-10):
        if tag not in TAGS:
            raise ValueError("unknown generator tag %r; valid tags: %s" % (tag, ", ".join(TAGS)))
        self.tag = tag
        self.params = params
        self.H = H
        self.N_max = N_max
        self.tol = tol
        self._cache = {}

    def __repr__(self):
        return "GeneratorKind(%r, H=%s)" % (self.tag, self.H.name)

    def prepare(self, grid):
        if grid not in self._cache:
            self._cache[grid] = _prepare(self, grid)
        return self._cache[grid]


def _chunked_assemble(H, params, qq, pp, N_max, tol, rows=16):
    out = {"L_q": [], "L_p": [], "H_eff": []}
    for i in range(0, qq.shape[0], rows):
        gd = assemble(H, params, qq[i:i + rows], pp[i:i + rows], N_max, tol)
        out["L_q"].append(gd.L_q)
        out["L_p"].append(gd.L_p)
        out["H_eff"].append(gd.H_eff)
    D = gd.D0, gd.D1, gd.D2
    return {k: np.concatenate(v) for k, v in out.items()}, D


def _max_norm(a):
    return float(operator_norm(a).max()) if a.size else 0.0


def _spread(k):
    lam = np.linalg.eigvalsh(k)
    return float((lam[..., -1] - lam[..., 0]).max())


def _prepare(kind, grid):
    H, prm, tag = kind.H, kind.params, kind.tag
    qq, pp = grid.mesh()
    h = np.ascontiguousarray(eval_h(H, qq, pp))
    E, s, hbar = prm.E, prm.s, prm.hbar
    s2 = s * s
    prep = Prepared(grid, tag, h)
    bounds = []
    if tag in _DIFFUSIVE:
        bounds += [grid.dq**2 / (E * s2), grid.dp**2 * s2 / E]
    if tag in _SCALAR_ONLY:
        tl = np.abs(traceless_part(h)).max()
        if tl > 1e-12 * max(1.0, np.abs(h).max()):
            raise ValueError("generator %r requires a Hamiltonian proportional to the identity" % tag)
        cq = np.real(deriv(H, qq, pp, "q")[..., 0, 0])
        cp = np.real(deriv(H, qq, pp, "p")[..., 0, 0])
        prep.coeffs.update(cq=cq[..., None, None], cp=cp[..., None, None])
        v, f = np.abs(cp).max(), np.abs(cq).max()
    elif tag == "main_cq":
        data, (D0, D1, D2) = _chunked_assemble(H, prm, qq, pp, kind.N_max, kind.tol)
        L = (data["L_q"], data["L_p"])
        prep.K = h + data["H_eff"]
        # back-reaction fluxes: -d_i (rho M_i + N_i rho)
        M = [D1[i, 0] * L[0] + D1[i, 1] * L[1] for i in range(2)]
        N = [np.conj(D1[i, 0]) * L[0] + np.conj(D1[i, 1]) * L[1] for i in range(2)]
        Ld = [dagger(L[0]), dagger(L[1])]
        G = sum(D0[a, b] * (Ld[b] @ L[a]) for a in range(2) for b in range(2))
        prep.coeffs.update(L=L, Ld=Ld, M=M, N=N, G=G, D0=D0, D2=D2, H_eff=data["H_eff"])
        if H.dim <= _SUPEROP_MAX_DIM:
            _build_superops(prep, hbar)
        nq, npn = _max_norm(L[0]), _max_norm(L[1])
        v, f = npn, nq
        bounds += _commutator_bounds(grid, s2, nq, npn)
        rate = 2 * sum(abs(D0[a, b]) * (nq, npn)[a] * (nq, npn)[b] for a in range(2) for b in range(2))
        if rate > 0:
            bounds.append(1.0 / rate)
    else:
        dqh = np.ascontiguousarray(deriv(H, qq, pp, "q"))
        dph = np.ascontiguousarray(deriv(H, qq, pp, "p"))
        prep.K = h
        prep.coeffs.update(dqH=dqh, dpH=dph)
        v, f = _max_norm(dph), _max_norm(dqh)
        if tag in ("husimi_h0", "glauber_h0", "self_commuting"):
            C = s2 / 4 * deriv(H, qq, pp, "q", 2) + 1 / (4 * s2) * deriv(H, qq, pp, "p", 2)
            prep.coeffs["C"] = np.ascontiguousarray(C)
            bounds += _commutator_bounds(grid, s2, f, v)
            bounds.append(1.0 / max(2 * _max_norm(C), 1e-300))
        if tag == "self_commuting":
            lo, hi = (grid.q_min, grid.q[-1]), (grid.p_min, grid.p[-1])
            ok, worst = is_self_commuting(H, default_sample_points(lo, hi), tol=1e-9 * max(1.0, _max_norm(h)) ** 2)
            if not ok:
                raise ValueError("self_commuting generator needs [H(z), H(z')] = 0 (max commutator %.3e)" % worst)
            Lb = s * dqh + 1j / s * dph
            prep.coeffs.update(Lb=Lb, Lbd=dagger(Lb), LbdLb=dagger(Lb) @ Lb)
            bounds.append(E / max(2 * _max_norm(Lb) ** 2, 1e-300))
    if v > 0:
        bounds.append(grid.dq / v)
    if f > 0:
        bounds.append(grid.dp / f)
    prep.dt_max = 0.2 * min(bounds) if bounds else np.inf
    if prep.K is not None:
        prep.unitary_rate = _spread(prep.K) / hbar
    return prep


# up to this Hilbert-space dimension main_cq uses per-point d^2 x d^2 superoperators
_SUPEROP_MAX_DIM = 4


def _kron(a, b):
    """Per-point kron(A, B) over the last two axes."""
    d = a.shape[-1]
    out = a[..., :, None, :, None] * b[..., None, :, None, :]
    return out.reshape(a.shape[:-2] + (d * d, d * d))


def _left(a):
    return _kron(a, np.broadcast_to(np.eye(a.shape[-1]), a.shape))


def _right(b):
    # vec(X B) = kron(I, B^T) vec(X) for row-major vec
    return _kron(np.broadcast_to(np.eye(b.shape[-1]), b.shape), np.swapaxes(b, -1, -2))


def _smv(S, x):
    """Per-point matrix-vector product."""
    return (S @ x[..., None])[..., 0]


def _build_superops(prep, hbar):
    c = prep.coeffs
    L, Ld, M, N, G, D0 = c["L"], c["Ld"], c["M"], c["N"], c["G"], c["D0"]
    diss = -0.5 * (_left(G) + _right(G))
    for a in range(2):
        for b in range(2):
            if D0[a, b] != 0:
                diss = diss + D0[a, b] * _kron(L[a], np.swapaxes(Ld[b], -1, -2))
    unit = -1j / hbar * (_left(prep.K) - _right(prep.K))
    c["S_diss"] = np.ascontiguousarray(diss)
    c["S_full"] = np.ascontiguousarray(diss + unit)
    c["S_flux"] = [np.ascontiguousarray(_right(M[i]) + _left(N[i])) for i in range(2)]


def _commutator_bounds(grid, s2, nq, npn):
    out = []
    if nq > 0:
        out.append(grid.dq / (s2 * nq))
    if npn > 0:
        out.append(grid.dp * s2 / npn)
    return out


# ---- right-hand sides --------------------------------------------------------

def _derivs(grid):
    per = grid.boundary == "periodic"
    return (lambda x: d1(x, 0, grid.dq, per), lambda x: d1(x, 1, grid.dp, per),
            lambda x: d2(x, 0, grid.dq, per), lambda x: d2(x, 1, grid.dp, per))


def _rhs(kind, prep, X, include_unitary=True):
    grid, c, prm = prep.grid, prep.coeffs, kind.params
    Dq, Dp, Dqq, Dpp = _derivs(grid)
    E, s, hbar = prm.E, prm.s, prm.hbar
    s2 = s * s
    tag = prep.tag
    if tag in _SCALAR_ONLY:
        out = c["cq"] * Dp(X) - c["cp"] * Dq(X)
        if tag == "fokker_planck":
            out = out + (E * s2 / 2) * Dqq(X) + (E / (2 * s2)) * Dpp(X)
        return out
    if tag == "main_cq" and "S_full" in c:
        n = X.shape[-1]
        x = X.reshape(X.shape[:-2] + (n * n,))
        D2 = c["D2"]
        out = _smv(c["S_full"] if include_unitary else c["S_diss"], x)
        out = out - Dq(_smv(c["S_flux"][0], x)) - Dp(_smv(c["S_flux"][1], x))
        out = out + 0.5 * D2[0, 0].real * Dqq(x) + 0.5 * D2[1, 1].real * Dpp(x)
        if D2[0, 1] != 0:
            out = out + D2[0, 1].real * Dq(Dp(x))
        return out.reshape(X.shape)
    out = -1j / hbar * _comm(prep.K, X) if include_unitary else np.zeros_like(X)
    if tag == "main_cq":
        M, N, L, Ld, D0, D2 = c["M"], c["N"], c["L"], c["Ld"], c["D0"], c["D2"]
        out = out - Dq(X @ M[0] + N[0] @ X) - Dp(X @ M[1] + N[1] @ X)
        XLd = [X @ Ld[0], X @ Ld[1]]
        for a in range(2):
            inner = D0[a, 0] * XLd[0] + D0[a, 1] * XLd[1]
            out = out + L[a] @ inner
        out = out - 0.5 * _acomm(c["G"], X)
        out = out + 0.5 * D2[0, 0].real * Dqq(X) + 0.5 * D2[1, 1].real * Dpp(X)
        if D2[0, 1] != 0:
            out = out + D2[0, 1].real * Dq(Dp(X))
        return out
    Xq, Xp = Dq(X), Dp(X)
    dqh, dph = c["dqH"], c["dpH"]
    out = out + 0.5 * (_acomm(dqh, Xp) - _acomm(dph, Xq))
    if tag == "qcle":
        return out
    corr = 1j * s2 / 2 * _comm(dqh, Xq) + 1j / (2 * s2) * _comm(dph, Xp) + 1j * _comm(c["C"], X)
    if tag == "husimi_h0":
        return out - corr
    out = out + corr
    if tag == "glauber_h0":
        return out
    Lb, Lbd = c["Lb"], c["Lbd"]
    out = out + (1 / (2 * E)) * (Lb @ X @ Lbd - 0.5 * _acomm(c["LbdLb"], X))
    return out + (E * s2 / 2) * Dqq(X) + (E / (2 * s2)) * Dpp(X)


def apply_generator(kind, field, monitor_support=True):
    """Time derivative of the field under the generator."""
    if monitor_support:
        check_support(field)
    prep = kind.prepare(field.grid)
    return field.with_data(_rhs(kind, prep, field.data))


# ---- time stepping -----------------------------------------------------------

def _ip_factors(prep, hbar, h):
    key = (h, hbar)
    if key not in prep._ip_cache:
        lam, U = np.linalg.eigh(prep.K)
        Ud = dagger(U)

        def V(t):
            return (U * np.exp(-1j * lam * t / hbar)[..., None, :]) @ Ud

        Vh, Vf = V(h / 2), V(h)
        if prep.K.shape[-1] <= _SUPEROP_MAX_DIM:
            # Y -> V Y V^dagger and its inverse as per-point superoperators
            conj = [np.ascontiguousarray(_kron(W, W.conj())) for W in (Vh, Vf)]
            inv = [np.ascontiguousarray(_kron(dagger(W), np.swapaxes(W, -1, -2))) for W in (Vh, Vf)]
            prep._ip_cache = {key: (Vh, Vf, conj, inv)}
        else:
            prep._ip_cache = {key: (Vh, Vf, None, None)}
    return prep._ip_cache[key]


def _rk4(kind, prep, X, h):
    f = lambda Y: _rhs(kind, prep, Y)
    k1 = f(X)
    k2 = f(X + h / 2 * k1)
    k3 = f(X + h / 2 * k2)
    k4 = f(X + h * k3)
    return X + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _rk4_interaction(kind, prep, X, h):
    """RK4 in the frame rotating with exp(-i K t/hbar) at each grid point."""
    Vh, Vf, conj, inv = _ip_factors(prep, kind.params.hbar, h)
    R = lambda Y: _rhs(kind, prep, Y, include_unitary=False)
    if conj is not None:
        shp = X.shape
        n2 = shp[-1] ** 2
        fwd = [lambda Y, S=S: _smv(S, Y.reshape(shp[:-2] + (n2,))).reshape(shp) for S in conj]
        bwd = [lambda Y, S=S: _smv(S, Y.reshape(shp[:-2] + (n2,))).reshape(shp) for S in inv]
        k1 = R(X)
        k2 = bwd[0](R(fwd[0](X + h / 2 * k1)))
        k3 = bwd[0](R(fwd[0](X + h / 2 * k2)))
        k4 = bwd[1](R(fwd[1](X + h * k3)))
        return fwd[1](X + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4))
    Vhd, Vfd = dagger(Vh), dagger(Vf)
    k1 = R(X)
    Y = X + h / 2 * k1
    k2 = Vhd @ R(Vh @ Y @ Vhd) @ Vh
    Y = X + h / 2 * k2
    k3 = Vhd @ R(Vh @ Y @ Vhd) @ Vh
    Y = X + h * k3
    k4 = Vfd @ R(Vf @ Y @ Vfd) @ Vf
    Y = X + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return Vf @ Y @ Vfd


# phase per step allowed in the rotating-frame scheme
_MAX_PHASE = 0.5
_SPLIT_THRESHOLD = 0.1


def step_plan(kind, grid, t_final, dt=None):
    """Number of steps, step size and whether the interaction-picture split is used."""
    prep = kind.prepare(grid)
    bound = prep.dt_max
    split = False
    if prep.unitary_rate > 0:
        if prep.unitary_rate * min(bound, t_final) > _SPLIT_THRESHOLD:
            split = True
            bound = min(bound, _MAX_PHASE / prep.unitary_rate)
        else:
            # plain RK4 needs the phase per step well inside its stability region
            bound = min(bound, 1.0 / prep.unitary_rate)
    if dt is None:
        dt = bound
    elif dt > bound * (1 + 1e-12):
        raise ValueError("dt = %.3e exceeds the stability bound %.3e" % (dt, bound))
    n = max(1, int(math.ceil(t_final / dt - 1e-9)))
    return n, t_final / n, split


def _record(t, field, observers):
    dg = diagnostics(field)
    row = {"t": t, "trace": dg["total_trace"], "mean_q": dg["mean_q"], "mean_p": dg["mean_p"],
           "var_q": dg["var_q"], "var_p": dg["var_p"], "min_eig": dg["min_eigenvalue_over_grid"],
           "purity": dg["purity"], "peak": dg["peak_density"], "herm": dg["hermiticity_defect"]}
    for obs in observers or ():
        row.update(obs(t, field))
    return row


def evolve(kind, field, t_final, dt=None, n_obs=10, obs_times=None, observers=None,
           on_snapshot=None, snapshot_every=None, monitor_support=True):
    """RK4 integration of the field; returns (final field, list of diagnostic rows)."""
    if t_final < 0:
        raise ValueError("t_final must be >= 0")
    if monitor_support:
        check_support(field)
    prep = kind.prepare(field.grid)
    if t_final == 0:
        return field.copy(), [_record(0.0, field, observers)]
    n, h, split = step_plan(kind, field.grid, t_final, dt)
    if obs_times is not None:
        obs_steps = {int(round(t / h)) for t in obs_times}
    else:
        every = max(1, n // max(n_obs, 1))
        obs_steps = set(range(0, n + 1, every)) | {n}
    stepper = _rk4_interaction if split else _rk4
    X = field.data.copy()
    rows = [_record(0.0, field, observers)] if 0 in obs_steps else []
    size = np.abs(X).max()
    for k in range(1, n + 1):
        X = stepper(kind, prep, X, h)
        new = np.abs(X).max()
        if not np.isfinite(new) or new > 10 * size:
            raise InstabilityError("field norm grew from %.3e to %.3e at step %d (t=%.4f, dt=%.3e)"
                                   % (size, new, k, k * h, h))
        size = new
        if k in obs_steps or (snapshot_every and k % snapshot_every == 0):
            cur = field.with_data(X)
            if monitor_support:
                check_support(cur)
            if k in obs_steps:
                rows.append(_record(k * h, cur, observers))
            if on_snapshot and snapshot_every and k % snapshot_every == 0:
                on_snapshot(k * h, cur)
    return field.with_data(X), rows


def flow(kind, field, T):
    """exp(T * generator) applied to the field, without diagnostics."""
    if T == 0:
        return field.copy()
    prep = kind.prepare(field.grid)
    n, h, split = step_plan(kind, field.grid, T)
    stepper = _rk4_interaction if split else _rk4
    X = field.data
    for _ in range(n):
        X = stepper(kind, prep, X, h)
    return field.with_data(X)


# ---- discrete-time channel ---------------------------------------------------

ORDERINGS = ("pre", "sym", "post")


class TrotterChannel:
    """One step of duration tau of the coarse-grained channel with hbar = E tau.

    sym:  D^(1/2) exp(tau L_qcle) D^(1/2)
    pre:  exp(tau L_husimi) D        (D applied first)
    post: D exp(tau L_glauber)       (generator applied first)
    """

    def __init__(self, H, params, tau, ordering="sym", symbol="discrete"):
        if ordering not in ORDERINGS:
            raise ValueError("ordering must be one of %s" % (ORDERINGS,))
        if tau <= 0:
            raise ValueError("tau must be > 0")
        self.tau = tau
        self.ordering = ordering
        self.symbol = symbol
        self.params = params.replace(hbar=params.E * tau)
        tag = {"sym": "qcle", "pre": "husimi_h0", "post": "glauber_h0"}[ordering]
        self.kind = GeneratorKind(tag, self.params, H)

    def smooth(self, field, alpha):
        p = self.params
        return weierstrass(field, alpha, p.hbar, p.s, symbol=self.symbol)

    def __call__(self, field):
        if self.ordering == "sym":
            f = self.smooth(field, 0.5)
            f = flow(self.kind, f, self.tau)
            return self.smooth(f, 0.5)
        if self.ordering == "pre":
            return flow(self.kind, self.smooth(field, 1.0), self.tau)
        return self.smooth(flow(self.kind, field, self.tau), 1.0)


def trotter_step(field, tau, H, params, ordering="sym", symbol="discrete"):
    return TrotterChannel(H, params, tau, ordering, symbol)(field)


def trotter_evolve(field, t, tau, H, params, ordering="sym", symbol="discrete"):
    n = int(round(t / tau))
    if abs(n * tau - t) > 1e-9 * max(t, 1.0):
        raise ValueError("t must be an integer multiple of tau")
    chan = TrotterChannel(H, params, tau, ordering, symbol)
    f = field
    for _ in range(n):
        f = chan(f)
    return f


def empirical_order(taus, errors):
    """Least-squares slope of log(error) against log(tau)."""
    return float(np.polyfit(np.log(taus), np.log(errors), 1)[0])


def convergence_study(H, params, field, t, tau_list, ordering="sym", symbol="discrete"):
    """L1 distance between the trotterized channel and main_cq evolution for each tau.

    Both sides use hbar = E tau. Returns a list of dicts (tau, error).
    """
    taus = list(tau_list)
    if any(b >= a for a, b in zip(taus, taus[1:])):
        raise ValueError("tau values must be decreasing")
    rows = []
    for tau in taus:
        prm = params.replace(hbar=params.E * tau)
        ref, _ = evolve(GeneratorKind("main_cq", prm, H), field, t, n_obs=1)
        approx = trotter_evolve(field, t, tau, H, params, ordering, symbol)
        rows.append({"tau": tau, "error": l1_distance(approx, ref)})
    return rows


def is_decreasing(errors, slack=0.2):
    """Monotone decrease allowing each step to rise by at most `slack` relative."""
    return all(b <= a * (1 + slack) for a, b in zip(errors, errors[1:])) and errors[-1] < errors[0]


__all__ = ["TAGS", "GeneratorKind", "apply_generator", "evolve", "flow", "TrotterChannel",
           "trotter_step", "trotter_evolve", "convergence_study", "empirical_order",
           "InstabilityError", "OperatorField", "is_decreasing", "step_plan"]
