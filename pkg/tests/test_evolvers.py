import numpy as np
import pytest

import cqlimit.evolvers as ev
from cqlimit.evolvers import (TAGS, GeneratorKind, InstabilityError, TrotterChannel, apply_generator,
                              convergence_study, empirical_order, evolve, flow, is_decreasing, step_plan,
                              trotter_evolve, trotter_step)
from cqlimit.hamiltonian import CQHamiltonian, ModelParams, potential, qubit_linear, qubit_transverse, single_system
from cqlimit.phase_space import (PhaseGrid, SupportLeakError, coherent_product_state, diagnostics,
                                 gaussian_product_state, l1_distance, scalar_field, weierstrass)

PSI = np.array([1.0, 1.0j]) / np.sqrt(2)


def small_grid(n=32, half=7.0):
    return PhaseGrid.centered(0.0, 0.0, half, half, n, n)


def state(g, q0=0.0, p0=0.0, psi=PSI):
    return gaussian_product_state(g, q0, p0, 1.0, 1.0, psi=psi)


def zero_hamiltonian(dim=1):
    return CQHamiltonian(func=lambda q, p: np.zeros(np.shape(q) + (dim, dim), complex), dim=dim, scalar=True)


def test_unknown_tag():
    with pytest.raises(ValueError):
        GeneratorKind("nope", ModelParams(), qubit_linear())


def test_scalar_tags_reject_matrix_hamiltonian():
    f = state(small_grid(), 0, 0, PSI)
    with pytest.raises(ValueError):
        apply_generator(GeneratorKind("liouville", ModelParams(), qubit_linear()), f)


# ---- dual-path identities ----------------------------------------------------

@pytest.mark.parametrize("dim", [1, 2])
def test_main_cq_single_system_equals_fokker_planck(dim):
    g = small_grid()
    prm = ModelParams(m_C=1.3, E=0.7, s=1.2, hbar=0.4)
    V = potential("harmonic", m=1.3, omega=0.8)
    f = gaussian_product_state(g, 0.5, -0.3, 1.0, 0.9)
    fp = apply_generator(GeneratorKind("fokker_planck", prm, single_system(1.3, V)), f).data[..., 0, 0]
    F = f.with_data(f.data[..., 0, 0][..., None, None] * np.eye(dim))
    cq = apply_generator(GeneratorKind("main_cq", prm, single_system(1.3, V, dim=dim)), F).data
    assert np.abs(cq - fp[..., None, None] * np.eye(dim)).max() < 1e-8 * np.abs(fp).max()


def test_main_cq_self_commuting_equals_reduced_form():
    g = small_grid()
    prm = ModelParams(m_C=1.0, g=0.7, E=0.6, s=0.9, hbar=0.3)
    H = qubit_linear(1.0, 0.7)
    f = state(g, 0.2, 0.1, PSI)
    a = apply_generator(GeneratorKind("main_cq", prm, H), f).data
    b = apply_generator(GeneratorKind("self_commuting", prm, H), f).data
    assert np.abs(a - b).max() < 1e-8 * np.abs(b).max()


def test_husimi_glauber_average_is_qcle():
    g = small_grid()
    prm = ModelParams(E=0.8, s=1.1, hbar=0.5)
    H = qubit_transverse(1.0, 0.9, 0.7)
    f = state(g, 0.3, -0.2, PSI)
    hq = apply_generator(GeneratorKind("husimi_h0", prm, H), f).data
    gl = apply_generator(GeneratorKind("glauber_h0", prm, H), f).data
    qc = apply_generator(GeneratorKind("qcle", prm, H), f).data
    assert np.abs((hq + gl) / 2 - qc).max() < 1e-12


def test_self_commuting_rejects_noncommuting_h():
    f = state(small_grid(), 0, 0, PSI)
    with pytest.raises(ValueError):
        apply_generator(GeneratorKind("self_commuting", ModelParams(), qubit_transverse()), f)


def test_superoperator_path_matches_direct(monkeypatch):
    g = small_grid()
    prm = ModelParams(E=0.8, s=1.1, hbar=0.5, delta=0.7)
    H = qubit_transverse(1.0, 0.9, 0.7)
    f = state(g, 0.3, -0.2, PSI)
    fast = apply_generator(GeneratorKind("main_cq", prm, H), f).data
    monkeypatch.setattr(ev, "_SUPEROP_MAX_DIM", 0)
    kind = GeneratorKind("main_cq", prm, H)
    assert "S_full" not in kind.prepare(g).coeffs
    slow = apply_generator(kind, f).data
    assert np.abs(fast - slow).max() < 1e-12 * np.abs(slow).max()


@pytest.mark.parametrize("tag", TAGS)
def test_generators_trace_free(tag):
    g = small_grid()
    prm = ModelParams(E=0.8, s=1.1, hbar=0.5)
    if tag in ("liouville", "fokker_planck"):
        H = single_system(1.0, potential("harmonic"))
        f = gaussian_product_state(g, 0.3, 0.1, 1.0, 1.0)
    elif tag == "self_commuting":
        H = qubit_linear()
        f = state(g, 0.3, 0.1, PSI)
    else:
        H = qubit_transverse()
        f = state(g, 0.3, 0.1, PSI)
    out = apply_generator(GeneratorKind(tag, prm, H), f)
    assert abs(diagnostics(out)["total_trace"]) <= 1e-8


def test_apply_generator_support_monitor():
    f = weierstrass(state(small_grid(), 0, 0, PSI), 4.0, 1.0, 1.0)
    with pytest.raises(SupportLeakError):
        apply_generator(GeneratorKind("qcle", ModelParams(), qubit_transverse()), f)


# ---- evolution ---------------------------------------------------------------

def test_liouville_free_ballistic():
    g = PhaseGrid.centered(0.0, 0.0, 8.0, 8.0, 48, 48)
    m, p0 = 2.0, 0.8
    f = gaussian_product_state(g, -1.0, p0, 0.8, 0.8)
    out, rows = evolve(GeneratorKind("liouville", ModelParams(m_C=m), single_system(m)), f, 1.0, n_obs=4)
    for r in rows:
        assert abs(r["mean_q"] - (-1.0 + p0 / m * r["t"])) < 1e-6
        assert abs(r["mean_p"] - p0) < 1e-9


def test_fokker_planck_variance_law():
    g = PhaseGrid.centered(0.0, 0.0, 9.0, 9.0, 48, 48)
    E, s, m = 0.5, 1.2, 1.0
    vq0, vp0 = 0.6, 0.6
    f = gaussian_product_state(g, 0, 0, vq0, vp0)
    kind = GeneratorKind("fokker_planck", ModelParams(m_C=m, E=E, s=s), single_system(m))
    _, rows = evolve(kind, f, 1.0, n_obs=4)
    for r in rows:
        t = r["t"]
        vp = vp0 + E / s**2 * t
        vq = vq0 + vp0 * t**2 / m**2 + E * s**2 * t + E / s**2 * t**3 / (3 * m**2)
        assert abs(r["var_p"] - vp) < 1e-3 * vp
        assert abs(r["var_q"] - vq) < 2e-3 * vq


def test_liouville_harmonic_period_and_energy():
    omega = 1.0
    H = single_system(1.0, potential("harmonic", omega=omega))
    errs = []
    for n in (64, 128):
        g = PhaseGrid.centered(0.0, 0.0, 6.0, 6.0, n, n)
        f = gaussian_product_state(g, 1.0, 0.0, 0.5, 0.5)
        qq, pp = g.mesh()
        energy = lambda fld: float((np.real(fld.data[..., 0, 0]) * (pp**2 / 2 + qq**2 / 2)).sum() * g.cell)
        out, rows = evolve(GeneratorKind("liouville", ModelParams(), H), f, 2 * np.pi / omega, n_obs=8,
                           observers=[lambda t, fld: {"energy": energy(fld)}])
        e0 = rows[0]["energy"]
        assert max(abs(r["energy"] - e0) for r in rows) <= 1e-4 * e0
        assert abs(rows[-1]["mean_q"] - 1.0) < 1e-3 and abs(rows[-1]["mean_p"]) < 1e-3
        errs.append(l1_distance(out, f))
    # the return error is the second-order stencil's dispersion
    assert errs[1] < 0.05 and errs[0] / errs[1] > 3


def test_main_cq_invariants_small():
    g = PhaseGrid.centered(0.0, 0.0, 8.0, 8.0, 48, 48)
    prm = ModelParams(E=0.5, s=1.0, hbar=0.4, g=1.0, delta=1.0)
    f = state(g, 0.0, 0.0, [1, 0])
    _, rows = evolve(GeneratorKind("main_cq", prm, qubit_transverse(1.0, 1.0, 1.0)), f, 0.3, n_obs=3)
    for r in rows:
        assert abs(r["trace"] - 1) <= 1e-6
        assert r["herm"] <= 1e-9
        assert r["min_eig"] >= -1e-4 * r["peak"]


def test_interaction_picture_matches_plain_rk4():
    g = PhaseGrid.centered(0.0, 0.0, 6.0, 6.0, 32, 32)
    prm = ModelParams(E=0.5, hbar=0.05, g=0.5, delta=1.0)
    H = qubit_transverse(1.0, 0.5, 1.0)
    f = state(g, 0.0, 0.0, PSI)
    kind = GeneratorKind("main_cq", prm, H)
    n, h, split = step_plan(kind, g, 0.1)
    assert split
    a = flow(kind, f, 0.1)
    prep = kind.prepare(g)
    X = f.data.copy()
    m = 40 * n
    for _ in range(m):
        X = ev._rk4(kind, prep, X, 0.1 / m)
    assert np.abs(a.data - X).max() < 1e-6 * np.abs(X).max()


def test_step_plan_and_dt_guard():
    g = small_grid()
    kind = GeneratorKind("fokker_planck", ModelParams(E=1.0), single_system())
    n, h, split = step_plan(kind, g, 1.0)
    assert n * h == pytest.approx(1.0) and not split
    with pytest.raises(ValueError):
        step_plan(kind, g, 1.0, dt=10 * h)


def test_instability_detector():
    g = small_grid()
    kind = GeneratorKind("fokker_planck", ModelParams(E=1.0), single_system())
    f = gaussian_product_state(g, 0, 0, 1.0, 1.0)
    kind.prepare(g).dt_max = 1e9
    with pytest.raises(InstabilityError):
        evolve(kind, f, 5.0, dt=1.0, monitor_support=False)


def test_evolve_zero_time_and_snapshots():
    g = small_grid(n=40, half=9.0)
    kind = GeneratorKind("fokker_planck", ModelParams(E=1.0), single_system())
    f = gaussian_product_state(g, 0, 0, 1.0, 1.0)
    out, rows = evolve(kind, f, 0.0)
    assert np.array_equal(out.data, f.data) and len(rows) == 1
    snaps = []
    evolve(kind, f, 0.2, on_snapshot=lambda t, fld: snaps.append(t), snapshot_every=2)
    assert len(snaps) >= 1
    with pytest.raises(ValueError):
        evolve(kind, f, -1.0)


# ---- discrete-time channel ---------------------------------------------------

def test_trotter_zero_hamiltonian_is_gaussian_spreading():
    g = PhaseGrid.centered(0.0, 0.0, 8.0, 8.0, 48, 48)
    prm = ModelParams(E=0.5, s=1.3)
    f = gaussian_product_state(g, 0, 0, 0.8, 0.8)
    t = 0.4
    for tau in (0.1, 0.05):
        out = diagnostics(trotter_evolve(f, t, tau, zero_hamiltonian(), prm, symbol="spectral"))
        assert abs(out["var_q"] - (0.8 + prm.E * prm.s**2 * t)) < 1e-9
        assert abs(out["var_p"] - (0.8 + prm.E / prm.s**2 * t)) < 1e-9


def test_convergence_zero_hamiltonian_at_floor():
    g = PhaseGrid.centered(0.0, 0.0, 8.0, 8.0, 32, 32)
    f = gaussian_product_state(g, 0, 0, 1.0, 1.0)
    rows = convergence_study(zero_hamiltonian(), ModelParams(E=0.5), f, 0.2, [0.2 / 4, 0.2 / 8])
    assert all(r["error"] < 1e-6 for r in rows)


def test_orderings_differ_at_second_order():
    g = PhaseGrid.centered(0.0, 0.0, 8.0, 8.0, 48, 48)
    # s != 1 so the smoothing does not commute with the oscillator flow
    prm = ModelParams(E=0.5, s=1.4)
    H = single_system(1.0, potential("harmonic"))
    f = gaussian_product_state(g, 0.5, 0.2, 0.8, 0.8)
    diffs = []
    for tau in (0.02, 0.01):
        a = trotter_step(f, tau, H, prm, "sym")
        b = trotter_step(f, tau, H, prm, "pre")
        c = trotter_step(f, tau, H, prm, "post")
        diffs.append((l1_distance(a, b), l1_distance(a, c)))
    for k in range(2):
        assert 3.0 < diffs[0][k] / diffs[1][k] < 5.0


def test_single_system_convergence_first_order():
    g = PhaseGrid.centered(0.0, 0.0, 8.0, 8.0, 32, 32)
    f = gaussian_product_state(g, 0.5, 0.0, 1.0, 1.0)
    H = single_system(1.0, potential("harmonic"))
    rows = convergence_study(H, ModelParams(E=0.5), f, 0.25, [0.25 / 16, 0.25 / 32, 0.25 / 64], ordering="pre")
    errs = [r["error"] for r in rows]
    assert is_decreasing(errs)
    assert empirical_order([r["tau"] for r in rows], errs) >= 0.8


def test_trotter_argument_checks():
    f = gaussian_product_state(small_grid(), 0, 0, 1.0, 1.0)
    with pytest.raises(ValueError):
        TrotterChannel(single_system(), ModelParams(), 0.1, ordering="mid")
    with pytest.raises(ValueError):
        TrotterChannel(single_system(), ModelParams(), 0.0)
    with pytest.raises(ValueError):
        trotter_evolve(f, 0.25, 0.1, single_system(), ModelParams())
    with pytest.raises(ValueError):
        convergence_study(single_system(), ModelParams(), f, 0.2, [0.05, 0.1])


def test_order_helpers():
    taus = [0.1, 0.05, 0.025]
    assert empirical_order(taus, [2 * t**2 for t in taus]) == pytest.approx(2.0)
    assert is_decreasing([1.0, 1.1, 0.5])
    assert not is_decreasing([1.0, 1.3, 0.5])
    assert not is_decreasing([1.0, 0.9, 1.0])
