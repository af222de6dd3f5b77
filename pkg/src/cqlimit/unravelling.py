"""Stochastic unravelling of the main CQ generator into trajectories.

The classical phase point Z = (q, p) follows

    dZ = (D1 + D1*) <L> dt + sigma dW,        sigma sigma^T = D2,

and the conditional quantum state follows

    dpsi = -(i/hbar) K psi dt + A psi dt + sum_a c_a (L_a - <L_a>) psi,
    c = D1^dagger sigma^-T dW,
    A = -1/2 sum_ab D0[a,b] L_b L_a + sum_ab D0[a,b] <L_b> L_a - 1/2 sum_ab D0[a,b] <L_a><L_b>,

with K = H + H_eff and dW two independent Wiener increments. Averaging
psi psi^dagger over trajectories reproduces the master equation whenever
D0 = D1^dagger D2^-1 D1 (trade-off saturation); a surplus in D0 shows up as
mixing of the conditional density matrix.
"""
import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .generator import assemble, tradeoff_check
from .hamiltonian import eval_h
from .operator_algebra import dagger
from .rng import block_normals, step_normals


def sigma_from_d2(D2, tol=1e-12):
    """Principal square root of a symmetric PSD 2x2 diffusion matrix."""
    D2 = np.asarray(D2)
    if np.iscomplexobj(D2):
        if np.abs(D2.imag).max() > tol:
            raise ValueError("D2 must be real")
        D2 = D2.real
    D2 = D2.astype(float)
    if D2.shape != (2, 2):
        raise ValueError("D2 must be 2x2, got shape %s" % (D2.shape,))
    scale = max(1.0, np.abs(D2).max())
    if np.abs(D2 - D2.T).max() > tol * scale:
        raise ValueError("D2 must be symmetric")
    w, v = np.linalg.eigh(0.5 * (D2 + D2.T))
    if w.min() < -tol * scale:
        raise ValueError("D2 is not positive semi-definite (min eigenvalue %.3e)" % w.min())
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


@dataclass
class TrajectoryState:
    q: float
    p: float
    psi: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=complex)
        if self.psi.ndim != 1:
            raise ValueError("psi must be a state vector")
        if not (np.isfinite(self.q) and np.isfinite(self.p) and np.all(np.isfinite(self.psi))):
            raise ValueError("non-finite trajectory state")
        if abs(np.linalg.norm(self.psi) - 1) > 1e-9:
            raise ValueError("psi must be normalized (norm %.12f)" % np.linalg.norm(self.psi))


@dataclass
class NoiseModel:
    sigma: np.ndarray
    rng_seed: int = 0
    stream_id: int = 0
    d2: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.sigma.shape != (2, 2):
            raise ValueError("sigma must be 2x2")
        if self.d2 is not None:
            err = np.abs(self.sigma @ self.sigma.T - np.real(self.d2)).max()
            if err > 1e-12 * max(1.0, np.abs(self.d2).max()):
                raise ValueError("sigma sigma^T differs from D2 by %.3e" % err)

    @classmethod
    def from_d2(cls, D2, rng_seed=0, stream_id=0):
        return cls(sigma_from_d2(D2), rng_seed, stream_id, np.real(np.asarray(D2)))

    def dW(self, step, dt):
        return math.sqrt(dt) * step_normals(self.rng_seed, self.stream_id, step)


def noise_coupling(D1, sigma, D2=None, tol=1e-12):
    """B = D1^dagger sigma^-T, so that the quantum noise is c = B dW.

    A singular sigma is accepted only if D1 has no component outside the
    range of D2; the pseudoinverse is used in that case.
    """
    D1 = np.asarray(D1, dtype=complex)
    sigma = np.asarray(sigma, dtype=float)
    if np.linalg.matrix_rank(sigma, tol=tol * max(1.0, np.abs(sigma).max())) == 2:
        return dagger(D1) @ np.linalg.inv(sigma).T
    if not np.any(np.abs(D1) > tol):
        return np.zeros((2, 2), dtype=complex)
    D2 = sigma @ sigma.T if D2 is None else np.real(D2)
    resid = np.abs((np.eye(2) - D2 @ np.linalg.pinv(D2, rcond=tol)) @ D1).max()
    if resid > 1e-10:
        raise ValueError("sigma is singular while back-reaction D1 is present outside the range of D2 "
                         "(residual %.3e); cannot form sigma^-T" % resid)
    return dagger(D1) @ np.linalg.pinv(sigma, rcond=tol).T


# ---- one Euler-Maruyama step, batched over trajectories ----------------------

def _expect(psi, a):
    return np.einsum("...i,...ij,...j->...", psi.conj(), a, psi)


def _exact_unitary(K, dt, hbar):
    lam, V = np.linalg.eigh(K)
    return (V * np.exp(-1j * lam * dt / hbar)[..., None, :]) @ dagger(V)


def _drift_op(L, l, D0, d):
    eye = np.eye(d)
    A = np.zeros(L[0].shape, dtype=complex)
    for a in range(2):
        for b in range(2):
            if D0[a, b] == 0:
                continue
            A = A + D0[a, b] * (-0.5 * (L[b] @ L[a]) + l[b][..., None, None] * L[a]
                                - 0.5 * (l[a] * l[b])[..., None, None] * eye)
    return A


def _lindblad(rho, L, D):
    out = np.zeros_like(rho)
    for a in range(2):
        for b in range(2):
            if D[a, b] == 0:
                continue
            LbLa = dagger(L[b]) @ L[a]
            out = out + D[a, b] * (L[a] @ rho @ dagger(L[b]) - 0.5 * (LbLa @ rho + rho @ LbLa))
    return out


def _core(q, p, psi, Lq, Lp, Heff, Hm, D0, D1, B, sigma, hbar, dt, dW, unitary="exact",
          rho=None, D0_rho=None):
    """Advance a batch of trajectories by one step. Returns (q, p, psi, norm drift, rho)."""
    d = psi.shape[-1]
    L = (Lq, Lp)
    l_c = np.stack([_expect(psi, Lq), _expect(psi, Lp)], axis=-1)
    scale = np.maximum(1.0, np.abs(l_c))
    if np.any(np.abs(l_c.imag) > 1e-10 * scale):
        raise ValueError("<L> has an imaginary part %.3e; Lindblad operators must be Hermitian"
                         % np.abs(l_c.imag).max())
    l = l_c.real
    drift = l @ np.real(D1 + D1.conj()).T
    q_new = q + drift[..., 0] * dt + dW @ sigma[0]
    p_new = p + drift[..., 1] * dt + dW @ sigma[1]
    c = dW @ B.T
    eye = np.eye(d)
    Lc = [L[a] - l[..., a, None, None] * eye for a in range(2)]
    K = Hm + Heff
    A = _drift_op(L, (l[..., 0], l[..., 1]), D0, d)
    if unitary == "euler":
        A = A - 1j / hbar * K
    elif unitary != "exact":
        raise ValueError("unitary must be 'exact' or 'euler'")
    M = eye + A * dt + c[..., 0, None, None] * Lc[0] + c[..., 1, None, None] * Lc[1]
    phi = (M @ psi[..., None])[..., 0]
    norm2 = np.sum(np.abs(phi) ** 2, axis=-1)
    U = _exact_unitary(K, dt, hbar) if unitary == "exact" else None
    if U is not None:
        phi = (U @ phi[..., None])[..., 0]
    psi_new = phi / np.sqrt(norm2)[..., None]
    if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(p_new)) and np.all(np.isfinite(psi_new))):
        raise FloatingPointError("non-finite trajectory state")
    rho_new = None
    if rho is not None:
        # M rho M^dagger realizes the part of D0 matched by the noise, B B^dagger;
        # any surplus of D0 enters as an extra Lindblad term
        D0n = B @ dagger(B)
        lr = [np.real(np.trace(rho @ L[a], axis1=-2, axis2=-1)) for a in range(2)]
        Lr = [L[a] - lr[a][..., None, None] * eye for a in range(2)]
        An = _drift_op(L, lr, D0n, d)
        if unitary == "euler":
            An = An - 1j / hbar * K
        Mn = eye + An * dt + c[..., 0, None, None] * Lr[0] + c[..., 1, None, None] * Lr[1]
        surplus = (D0 if D0_rho is None else D0_rho) - D0n
        surplus = np.where(np.abs(surplus) > 1e-14 * max(1.0, np.abs(D0n).max()), surplus, 0)
        r = Mn @ rho @ dagger(Mn) + dt * _lindblad(rho, L, surplus)
        if U is not None:
            r = U @ r @ dagger(U)
        tr = np.real(np.trace(r, axis1=-2, axis2=-1))
        rho_new = r / tr[..., None, None]
    return q_new, p_new, psi_new, np.abs(norm2 - 1), rho_new


def em_step(state, dt, gen, noise, step=None, dW=None, unitary="exact"):
    """Euler-Maruyama step of a single trajectory.

    gen is the GeneratorData evaluated at (state.q, state.p); it must carry
    H and hbar. The increment dW is drawn from the noise stream at `step`
    unless given explicitly.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if gen.H is None or gen.hbar is None:
        raise ValueError("GeneratorData must carry H and hbar")
    if dW is None:
        if step is None:
            raise ValueError("give either step or dW")
        dW = noise.dW(step, dt)
    dW = np.asarray(dW, dtype=float)
    B = noise_coupling(gen.D1, noise.sigma, gen.D2)
    q, p, psi, _, _ = _core(np.float64(state.q), np.float64(state.p), state.psi,
                            np.asarray(gen.L_q), np.asarray(gen.L_p), np.asarray(gen.H_eff),
                            np.asarray(gen.H), gen.D0, gen.D1, B, noise.sigma, gen.hbar, dt, dW, unitary)
    return TrajectoryState(float(q), float(p), psi, state.t + dt)


# ---- generator data on a lattice ----------------------------------------------

class GeneratorLattice:
    """L_q, L_p and H_eff precomputed on a rectangular lattice, read by bilinear interpolation.

    Points outside the lattice box are evaluated directly.
    """

    def __init__(self, H, params, q_range=(-8.0, 8.0), p_range=(-8.0, 8.0), n_q=161, n_p=161,
                 N_max=30, tol=1e-10, direct=False):
        if n_q < 2 or n_p < 2:
            raise ValueError("lattice needs at least 2 points per axis")
        self.H, self.params, self.N_max, self.tol = H, params, N_max, tol
        self.direct = direct
        self.qs = np.linspace(q_range[0], q_range[1], n_q)
        self.ps = np.linspace(p_range[0], p_range[1], n_p)
        self.n_direct = 0
        gd = assemble(H, params, 0.0, 0.0, N_max, tol)
        self.D0, self.D1, self.D2 = gd.D0, gd.D1, gd.D2
        if not direct:
            qq, pp = np.meshgrid(self.qs, self.ps, indexing="ij")
            parts = [assemble(H, params, qq[i:i + 16], pp[i:i + 16], N_max, tol) for i in range(0, n_q, 16)]
            self.tables = [np.ascontiguousarray(np.concatenate([getattr(g, k) for g in parts]))
                           for k in ("L_q", "L_p", "H_eff")]

    def _direct(self, q, p):
        gd = assemble(self.H, self.params, q, p, self.N_max, self.tol)
        return [np.asarray(gd.L_q), np.asarray(gd.L_p), np.asarray(gd.H_eff)]

    def evaluate(self, q, p):
        """(L_q, L_p, H_eff) at arrays of points, each of shape (n, d, d)."""
        q = np.atleast_1d(np.asarray(q, dtype=float))
        p = np.atleast_1d(np.asarray(p, dtype=float))
        if self.direct:
            self.n_direct += q.size
            return self._direct(q, p)
        hq, hp = self.qs[1] - self.qs[0], self.ps[1] - self.ps[0]
        inside = (q >= self.qs[0]) & (q <= self.qs[-1]) & (p >= self.ps[0]) & (p <= self.ps[-1])
        i = np.clip(((q - self.qs[0]) / hq).astype(int), 0, len(self.qs) - 2)
        j = np.clip(((p - self.ps[0]) / hp).astype(int), 0, len(self.ps) - 2)
        a = np.clip((q - self.qs[i]) / hq, 0, 1)[:, None, None]
        b = np.clip((p - self.ps[j]) / hp, 0, 1)[:, None, None]
        out = []
        for T in self.tables:
            out.append((1 - a) * ((1 - b) * T[i, j] + b * T[i, j + 1])
                       + a * ((1 - b) * T[i + 1, j] + b * T[i + 1, j + 1]))
        if not inside.all():
            idx = np.nonzero(~inside)[0]
            self.n_direct += idx.size
            ext = self._direct(q[idx], p[idx])
            for o, e in zip(out, ext):
                o[idx] = e
        return out


# ---- ensembles -----------------------------------------------------------------

def _default_observables(d):
    if d == 2:
        return {"sx": np.array([[0, 1], [1, 0]], dtype=complex),
                "sy": np.array([[0, -1j], [1j, 0]], dtype=complex),
                "sz": np.array([[1, 0], [0, -1]], dtype=complex)}
    return {}


def _checkpoint_steps(t_final, dt, checkpoints, n_checkpoints):
    n = int(round(t_final / dt))
    if n < 1 or abs(n * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError("t_final must be a positive integer multiple of dt")
    if checkpoints is None:
        steps = sorted({int(round(k * n / n_checkpoints)) for k in range(n_checkpoints + 1)})
    else:
        steps = []
        for t in checkpoints:
            k = int(round(t / dt))
            if abs(k * dt - t) > 1e-9 * max(1.0, t) or not 0 <= k <= n:
                raise ValueError("checkpoint %r is not a multiple of dt within [0, t_final]" % t)
            steps.append(k)
        steps = sorted(set(steps))
    return n, steps


def _initial(seed, ids, init, q0, p0, hbar, s, var=None):
    if init == "point":
        return np.full(len(ids), float(q0)), np.full(len(ids), float(p0))
    if init == "coherent":
        var = (hbar * s * s / 2, hbar / (2 * s * s))
    elif init != "gaussian" or var is None:
        raise ValueError("init must be 'coherent', 'point' or 'gaussian' (with init_var)")
    z = block_normals(seed, ids, 0, 1)[0]
    return q0 + math.sqrt(var[0]) * z[:, 0], p0 + math.sqrt(var[1]) * z[:, 1]


def _run_chunk(cfg, ids):
    H, prm, lat = cfg["H"], cfg["params"], cfg["lattice"]
    dt, n, steps, seed = cfg["dt"], cfg["n"], cfg["steps"], cfg["seed"]
    sigma, B, D0, D1 = cfg["sigma"], cfg["B"], cfg["D0"], cfg["D1"]
    obs, track = cfg["observables"], cfg["track_purity"]
    m = len(ids)
    q, p = _initial(seed, ids, cfg["init"], cfg["q0"], cfg["p0"], prm.hbar, prm.s, cfg["init_var"])
    psi = np.broadcast_to(cfg["psi0"], (m, cfg["psi0"].size)).copy()
    rho = psi[:, :, None] * psi.conj()[:, None, :] if track else None
    rec = {k: np.zeros((len(steps), m)) for k in ["q", "p", "impurity", "norm_drift"] + list(obs)}
    traj = []
    n_write = cfg["n_write"]
    seg = cfg["segment"]

    def record(slot, drift):
        rec["q"][slot], rec["p"][slot] = q, p
        for name, O in obs.items():
            rec[name][slot] = np.real(_expect(psi, O))
        if track:
            rec["impurity"][slot] = 1 - np.real(np.einsum("nij,nji->n", rho, rho))
        rec["norm_drift"][slot] = drift
        for j in range(min(n_write, m)):
            traj.append((ids[j], steps[slot] * dt, q[j], p[j], psi[j].copy()))

    slot = 0
    drift_acc = np.zeros(m)
    if steps and steps[0] == 0:
        record(0, drift_acc)
        slot = 1
    k = 1
    while k <= n:
        cnt = min(seg, n - k + 1)
        dWs = math.sqrt(dt) * block_normals(seed, ids, k, cnt)
        for r in range(cnt):
            Lq, Lp, Heff = lat.evaluate(q, p)
            Hm = eval_h(H, q, p)
            q, p, psi, drift, rho = _core(q, p, psi, Lq, Lp, Heff, Hm, D0, D1, B, sigma, prm.hbar, dt,
                                          dWs[r], cfg["unitary"], rho, cfg["D0_rho"])
            drift_acc = np.maximum(drift_acc, drift)
            if slot < len(steps) and steps[slot] == k:
                record(slot, drift_acc)
                drift_acc = np.zeros(m)
                slot += 1
            k += 1
    return rec, traj


def _se(x):
    n = x.shape[-1]
    return x.std(axis=-1, ddof=1) / math.sqrt(n) if n > 1 else np.full(x.shape[:-1], np.nan)


def _var_se(x):
    # standard error of the sample variance from the fourth central moment
    n = x.shape[-1]
    c = x - x.mean(axis=-1, keepdims=True)
    m2, m4 = (c**2).mean(axis=-1), (c**4).mean(axis=-1)
    return np.sqrt(np.maximum(m4 - m2**2, 0) / n) if n > 1 else np.full(x.shape[:-1], np.nan)


def run_ensemble(H, params, n_traj, t_final, dt, seed=0, q0=0.0, p0=0.0, psi0=None, init="coherent",
                 checkpoints=None, n_checkpoints=5, observables=None, track_purity=True, D0=None,
                 lattice=None, chunk_size=1000, threads=1, n_write=0, unitary="exact", segment=256,
                 first_stream=0, init_var=None):
    """Simulate n_traj independent trajectories and reduce them to moments.

    Returns a dict with `settings`, `rows` (one per checkpoint: means, standard
    errors, variances, mean and max conditional impurity 1 - tr(rho^2), max
    norm drift before renormalization) and `trajectories` (the first n_write
    trajectories at the checkpoints). Passing D0 overrides the decoherence
    matrix used for the conditional density matrix, which is how a D0 above
    the trade-off bound is exercised. Initial phase points are drawn from the
    coherent-state Gaussian (init="coherent"), a Gaussian with variances
    init_var (init="gaussian"), or fixed at (q0, p0) (init="point").
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if dt <= 0:
        raise ValueError("dt must be > 0")
    n, steps = _checkpoint_steps(t_final, dt, checkpoints, n_checkpoints)
    d = H.dim
    psi0 = np.zeros(d, dtype=complex) if psi0 is None else np.asarray(psi0, dtype=complex)
    if psi0.shape != (d,):
        raise ValueError("psi0 must have length %d" % d)
    if not psi0.any():
        psi0[0] = 1
    psi0 = psi0 / np.linalg.norm(psi0)
    lat = lattice if lattice is not None else GeneratorLattice(H, params)
    sigma = sigma_from_d2(lat.D2)
    B = noise_coupling(lat.D1, sigma, lat.D2)
    obs = _default_observables(d) if observables is None else dict(observables)
    cfg = dict(H=H, params=params, lattice=lat, dt=dt, n=n, steps=steps, seed=int(seed), sigma=sigma,
               B=B, D0=lat.D0, D1=lat.D1, observables=obs, track_purity=track_purity, init=init,
               q0=q0, p0=p0, init_var=init_var, psi0=psi0, n_write=n_write, unitary=unitary, segment=segment,
               D0_rho=None if D0 is None else np.asarray(D0, dtype=complex))
    ids_all = np.arange(first_stream, first_stream + n_traj)
    chunks = [ids_all[i:i + chunk_size] for i in range(0, n_traj, chunk_size)]

    def job(ids):
        c = dict(cfg)
        # only the leading chunk writes per-trajectory rows
        c["n_write"] = n_write if ids[0] == ids_all[0] else 0
        return _run_chunk(c, ids)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(job, chunks))
    else:
        results = [job(ids) for ids in chunks]
    rec = {k: np.concatenate([r[0][k] for r in results], axis=1) for k in results[0][0]}
    traj = [t for r in results for t in r[1]]
    rows = []
    for i, k in enumerate(steps):
        row = {"t": k * dt}
        for name in ["q", "p"] + list(obs):
            x = rec[name][i]
            row["mean_" + name] = float(x.mean())
            row["se_" + name] = float(_se(x))
        for name in ("q", "p"):
            x = rec[name][i]
            row["var_" + name] = float(x.var(ddof=1)) if n_traj > 1 else 0.0
            row["se_var_" + name] = float(_var_se(x))
        if track_purity:
            row["mean_impurity"] = float(rec["impurity"][i].mean())
            row["max_impurity"] = float(rec["impurity"][i].max())
        row["max_norm_drift"] = float(rec["norm_drift"][i].max())
        row["mean_norm_drift"] = float(rec["norm_drift"][i].mean())
        rows.append(row)
    settings = {"n_traj": int(n_traj), "t_final": float(t_final), "dt": float(dt), "seed": int(seed),
                "q0": float(q0), "p0": float(p0), "init": init, "unitary": unitary,
                "psi0_re": psi0.real.tolist(), "psi0_im": psi0.imag.tolist(),
                "model": H.name, "params": {k: getattr(params, k) for k in params.__dataclass_fields__},
                "tradeoff_saturated": bool(tradeoff_check(lat.D0, lat.D1, lat.D2).saturated)}
    return {"settings": settings, "rows": rows, "trajectories": traj, "raw": rec}


def write_ensemble_csv(path, result):
    rows = result["rows"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = list(rows[0])
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(float(r[k])) for k in keys])


def write_ensemble_json(path, result):
    out = {"settings": result["settings"], "moments": result["rows"]}
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_trajectory_csv(path, result):
    traj = result["trajectories"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d = traj[0][4].size if traj else 0
        w.writerow(["traj", "t", "q", "p"] + ["re_psi%d" % i for i in range(d)] + ["im_psi%d" % i for i in range(d)])
        for sid, t, q, p, psi in sorted(traj, key=lambda r: (r[0], r[1])):
            w.writerow([int(sid), repr(float(t)), repr(float(q)), repr(float(p))]
                       + [repr(float(x)) for x in psi.real] + [repr(float(x)) for x in psi.imag])
