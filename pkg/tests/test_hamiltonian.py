import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cqlimit.hamiltonian import (MODEL_NAMES, CQHamiltonian, ModelParams, build_model, coupled_oscillators,
                                 default_sample_points, deriv, eval_h, fock_operators, fock_tail_weight,
                                 fock_truncation_ok, is_self_commuting, potential, qubit_linear,
                                 qubit_transverse, single_system)
from cqlimit.operator_algebra import PAULI_X, PAULI_Z, hermiticity_error

coords = st.floats(-4, 4)


def test_model_params_validation():
    with pytest.raises(ValueError):
        ModelParams(E=0)
    with pytest.raises(ValueError):
        ModelParams(hbar=-1)
    with pytest.raises(ValueError):
        ModelParams(lam=-0.1)
    with pytest.raises(ValueError):
        ModelParams(fock_dim=1)
    assert ModelParams().replace(E=3.0).E == 3.0


def test_coupled_oscillators_at_origin():
    pr = ModelParams(lam=0.7, m_Q=1.3, fock_dim=12)
    H = coupled_oscillators(pr)
    Q, P = H.info["Q"], H.info["P"]
    assert np.abs(H.eval(0.0, 0.0) - (P @ P / (2 * 1.3) + 0.7 * Q @ Q)).max() < 1e-14


def test_single_system_is_scalar():
    H = single_system(2.0, potential("harmonic", m=2.0, omega=1.5), dim=3)
    h = H.eval(0.4, -1.1)
    val = 1.1**2 / 4 + 0.5 * 2.0 * 1.5**2 * 0.4**2
    assert np.abs(h - val * np.eye(3)).max() < 1e-14


def test_qubit_linear_substitution():
    assert np.abs(qubit_linear(1.0, 0.8).eval(1.0, 0.0) - 0.8 * PAULI_Z).max() == 0


def test_qubit_transverse_substitution():
    h = qubit_transverse(2.0, 0.5, 0.6).eval(1.0, 2.0)
    assert np.abs(h - (np.eye(2) + 0.5 * PAULI_Z + 0.3 * PAULI_X)).max() < 1e-15


def test_analytic_derivatives():
    pr = ModelParams(lam=0.7, m_C=2.0, fock_dim=8)
    H = coupled_oscillators(pr)
    Q = H.info["Q"]
    assert np.abs(H.deriv(0.3, 1.2, "q") - 2 * 0.7 * (0.3 * np.eye(8) - Q)).max() < 1e-14
    assert np.abs(H.deriv(0.3, 1.2, "p") - 0.6 * np.eye(8)).max() < 1e-15


def _strip(H):
    return dataclasses.replace(H, dq=None, dp=None, d2q=None, d2p=None)


def test_finite_difference_matches_analytic_on_qubit():
    H = qubit_transverse(1.3, 0.7, 0.4)
    fd = _strip(H)
    for which in ("q", "p"):
        for order in (1, 2):
            a = H.deriv(0.4, -0.9, which, order)
            b = fd.deriv(0.4, -0.9, which, order)
            assert np.abs(a - b).max() < 1e-7


def test_finite_difference_step_halving():
    # nonlinear in q so the stencil error is visible: O(h^2) means ratio ~4
    H = CQHamiltonian(func=lambda q, p: np.sin(q)[..., None, None] * PAULI_X + (p**2)[..., None, None] * PAULI_Z,
                      dim=2, fd_step=1e-2)
    exact = np.cos(0.7) * PAULI_X
    e1 = np.abs(H.deriv(0.7, 0.2, "q") - exact).max()
    e2 = np.abs(dataclasses.replace(H, fd_step=5e-3).deriv(0.7, 0.2, "q") - exact).max()
    assert 3.5 < e1 / e2 < 4.5


def test_deriv_errors():
    H = qubit_linear()
    with pytest.raises(ValueError):
        deriv(H, 0, 0, "q", 3)
    with pytest.raises(ValueError):
        deriv(H, 0, 0, "x")
    with pytest.raises(ValueError):
        eval_h(H, np.nan, 0)


def test_self_commuting_models():
    pts = default_sample_points((-2, 2), (-2, 2))
    assert is_self_commuting(qubit_linear(), pts)[0]
    assert is_self_commuting(single_system(dim=2), pts)[0]
    flag, worst = is_self_commuting(coupled_oscillators(ModelParams(lam=1.0, fock_dim=6)), pts)
    assert not flag and worst > 1e-3
    assert not is_self_commuting(qubit_transverse(), pts)[0]
    with pytest.raises(ValueError):
        is_self_commuting(qubit_linear(), [[0, 0]])


def test_fock_truncation_consistency():
    small = coupled_oscillators(ModelParams(lam=0.6, m_Q=1.4, fock_dim=12))
    big = coupled_oscillators(ModelParams(lam=0.6, m_Q=1.4, fock_dim=16))
    k = 10
    for fn in (lambda H: H.eval(0.3, -0.4), lambda H: H.deriv(0.3, -0.4, "q")):
        assert np.abs(fn(small)[:k, :k] - fn(big)[:k, :k]).max() < 1e-12


def test_fock_operators_commutator():
    Q, P = fock_operators(10, hbar=0.5)
    c = Q @ P - P @ Q
    assert np.abs(c[:9, :9] - 0.5j * np.eye(9)).max() < 1e-14


def test_fock_tail_guard():
    psi = np.zeros(10)
    psi[0] = 1
    assert fock_truncation_ok(psi)
    psi[9] = 1e-2
    assert not fock_truncation_ok(psi)
    rho = np.diag([0.5, 0.5, 0, 0])
    assert fock_tail_weight(rho) == 0


@given(coords, coords, st.sampled_from(MODEL_NAMES))
def test_models_hermitian(q, p, name):
    H = build_model(name, ModelParams(lam=0.5, fock_dim=6, delta=0.3))
    assert hermiticity_error(H.eval(q, p)) < 1e-10
    assert hermiticity_error(H.deriv(q, p, "q")) < 1e-10


@given(coords, coords)
def test_derivative_integrates_back(q, p):
    # quadratic in q: eval(q+d) - eval(q) - d*dq = lam d^2 exactly, slope 2
    H = coupled_oscillators(ModelParams(lam=0.8, fock_dim=6))
    res = []
    for d in (1e-2, 1e-3, 1e-4):
        r = H.eval(q + d, p) - H.eval(q, p) - d * H.deriv(q, p, "q")
        res.append(np.abs(r).max())
    slopes = np.diff(np.log10(res))
    assert np.all(np.abs(slopes + 2) < 0.1)


def test_build_model_and_potentials():
    pr = ModelParams(m_C=2.0)
    H = build_model("single_system", pr, {"kind": "double_well", "a": 1.0, "b": 2.0})
    assert H.scalar
    assert np.abs(H.deriv(1.0, 0.0, "q") - 4 * 1.0 * (1 - 4) * np.eye(1)).max() < 1e-14
    with pytest.raises(ValueError):
        build_model("nope", pr)
    with pytest.raises(ValueError):
        potential("cubic")


def test_batched_eval_shape():
    q = np.zeros((3, 4))
    assert qubit_transverse().eval(q, q).shape == (3, 4, 2, 2)
