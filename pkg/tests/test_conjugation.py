import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from qpreduce.conjugation import (
    QPUnitary,
    TailError,
    apply_gauge,
    conjugate,
    expm_hermitian,
    gauge_b,
    magnetic_component,
    magnetic_norm,
    sobolev_operator_norm,
)
from qpreduce.qpoperator import QPOperator, hermitian_fill
from qpreduce.spectral_basis import DiscretizationParams, PotentialSpec, build_basis
from qpreduce.symbols import HypothesisViolation, QPSymbol, japanese_bracket, trig_modes


def herm_family(rng, n, K, N, scale=1.0):
    c = rng.normal(size=(2 * K + 1,) * n + (N, N)) + 1j * rng.normal(size=(2 * K + 1,) * n + (N, N))
    return QPOperator(scale * hermitian_fill(c, n), n)


@settings(max_examples=20, deadline=None)
@given(N=st.integers(1, 5), seed=st.integers(0, 2**31))
def test_expm_hermitian_matches_scipy(N, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(N, N)) + 1j * rng.normal(size=(N, N))
    X = A + A.conj().T
    dX = rng.normal(size=(N, N)) + 1j * rng.normal(size=(N, N))
    dX = dX + dX.conj().T
    U, dU = expm_hermitian(X, dX)
    np.testing.assert_allclose(U, expm(-1j * X), atol=1e-12)
    h = 1e-6
    fd = (expm(-1j * (X + h * dX)) - expm(-1j * (X - h * dX))) / (2 * h)
    np.testing.assert_allclose(dU, fd, atol=1e-7)


def test_expm_degenerate_eigenvalues():
    X = np.diag([1.0, 1.0, 2.0])
    dX = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex)
    _, dU = expm_hermitian(X, dX)
    h = 1e-6
    fd = (expm(-1j * (X + h * dX)) - expm(-1j * (X - h * dX))) / (2 * h)
    np.testing.assert_allclose(dU, fd, atol=1e-8)


def test_conjugate_identity(rng):
    H = herm_family(rng, 2, 2, 3)
    out = conjugate(H, QPUnitary.identity(2, 3), [1.0, 1.5])
    assert out.truncate(2).allclose(H, 1e-13)


def test_conjugate_closed_form_commuting_family():
    # X = x0 cos(k.phi) P with a projector P; U = exp(-i X) gives
    # H_+ = (omega.k) x0 sin(k.phi) P for H = 0.
    n, N = 2, 3
    P = np.zeros((N, N))
    P[0, 0] = P[1, 1] = 0.5
    P[0, 1] = P[1, 0] = 0.5
    k = (1, -2)
    x0 = 0.7
    omega = np.array([1.0, 1.618033988749895])
    X = QPOperator.from_dict({k: 0.5 * x0 * P, tuple(-v for v in k): 0.5 * x0 * P}, n, N)
    out = conjugate(QPOperator.zeros(n, 2, N), QPUnitary.exp(X), omega, cutoff=2)
    wk = float(np.dot(omega, k))
    expected = QPOperator.from_dict({k: wk * x0 * P / 2j, tuple(-v for v in k): -wk * x0 * P / 2j}, n, N, 2)
    assert out.allclose(expected, 1e-12)


def test_conjugate_roundtrip_small_case(rng):
    H = herm_family(rng, 1, 2, 4)
    X = herm_family(rng, 1, 1, 4, scale=0.2)
    U = QPUnitary.exp(X)
    omega = [1.3]
    Hp = conjugate(H, U, omega, cutoff=30, on_tail="ignore")
    back = conjugate(Hp, U.inverse(), omega, cutoff=40, on_tail="ignore")
    assert back.truncate(2).allclose(H, 1e-8)
    assert back.tail_norm(2) < 1e-8


def test_conjugate_static_unitary_preserves_spectrum(rng):
    H = herm_family(rng, 2, 1, 4)
    G = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    U = QPUnitary.exp(QPOperator.constant(G + G.conj().T, 2))
    Hp = conjugate(H, U, [1.0, 1.4])
    for phi in rng.uniform(0, 2 * np.pi, size=(5, 2)):
        np.testing.assert_allclose(np.linalg.eigvalsh(Hp(phi)), np.linalg.eigvalsh(H(phi)), atol=1e-11)


def test_conjugate_tail_policy(rng):
    H = herm_family(rng, 1, 1, 3)
    U = QPUnitary.exp(herm_family(rng, 1, 1, 3, scale=2.0))
    with pytest.raises(TailError):
        conjugate(H, U, [1.2], cutoff=2)
    out, tail = conjugate(H, U, [1.2], cutoff=2, on_tail="ignore", return_tail=True)
    assert tail > 1e-10 and out.k_cutoff == 2
    with pytest.raises(ValueError):
        conjugate(H, U, [1.2], on_tail="explode")


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 3.0))
def test_exp_unitaries_are_unitary(seed, scale):
    rng = np.random.default_rng(seed)
    U = QPUnitary.exp(herm_family(rng, 2, 2, 4, scale))
    assert U.unitarity_defect() <= 1e-12
    assert U.compose(U.inverse()).unitarity_defect() <= 1e-12
    phi = rng.uniform(0, 2 * np.pi, 2)
    np.testing.assert_allclose(U.compose(U.inverse())(phi), np.eye(4), atol=1e-12)


def test_unitary_derivative_matches_finite_difference(rng):
    U = QPUnitary.exp(herm_family(rng, 2, 1, 3, 0.5)).compose(QPUnitary.exp(herm_family(rng, 2, 2, 3, 0.3)))
    omega = np.array([1.0, 1.7])
    phi = np.array([0.3, 2.2])
    _, dU = U.evaluate_with_derivative(phi, omega)
    h = 1e-6
    fd = (U(phi + h * omega) - U(phi - h * omega)) / (2 * h)
    np.testing.assert_allclose(dU, fd, atol=1e-8)


# --- gauge ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def basis():
    return build_basis(PotentialSpec(2.0, (), 8.0), DiscretizationParams(401), 60)


def test_gauge_b_examples(basis):
    x = basis.position_grid
    assert gauge_b(QPSymbol.zero(1), basis.grid).is_zero()
    W1 = QPSymbol.separable(np.ones_like, trig_modes(1, cos={(1,): 1.0}), 0.0, 1)
    b = gauge_b(W1, basis.grid)
    np.testing.assert_allclose(b(x, 0.4), x * np.cos(0.4), atol=1e-12)
    assert b.declared_order == 1.0
    W1 = QPSymbol.separable(np.cos, trig_modes(1, cos={(1,): 1.0}), 0.0, 1)
    b = gauge_b(W1, basis.grid)
    np.testing.assert_allclose(b(x, 0.4), np.sin(x) * np.cos(0.4), atol=1e-8)
    assert b(np.array([0.0]), 1.0)[0] == 0.0


def test_gauge_without_magnetic_term_is_identity(basis):
    W0 = QPSymbol.separable(lambda x: japanese_bracket(x) ** 2, trig_modes(1, cos={(1,): 1.0}), 2.0, 1)
    g = apply_gauge(W0, QPSymbol.zero(1), 1e-3, [1.4], basis)
    assert g.U.kind == "identity"
    assert g.H1.allclose(g.H, 0)
    assert g.magnetic_ratio == 0.0


def test_gauge_constant_field_closed_form(basis):
    # W1 = cos(phi), W0 = 0: b = x cos(phi) and the new potential is
    # omega.d_phi b = -omega x sin(phi) for U1 = exp(+i eps b).
    omega = 1.3
    W1 = QPSymbol.separable(np.ones_like, trig_modes(1, cos={(1,): 1.0}), 0.0, 1)
    g = apply_gauge(QPSymbol.zero(1), W1, 1e-2, [omega], basis)
    x = basis.position_grid
    np.testing.assert_allclose(g.W0_gauged(x, 0.6), -omega * x * np.sin(0.6), atol=1e-12)
    assert g.magnetic_ratio <= 1e-8
    assert g.expected_deviation <= 1e-8


def test_gauge_ell2_preset_kills_magnetic_part(basis):
    n = 2
    W0 = QPSymbol.separable(
        lambda x: japanese_bracket(x) ** 2.5, trig_modes(n, 1.0, {(1, 0): 1.0, (0, 1): 1.0}), 2.5, n
    )
    W1 = QPSymbol.separable(lambda x: 0.5 * x, trig_modes(n, 0.0, {(1, 0): 1.0, (0, 1): 1.0}), 1.0, n)
    g = apply_gauge(W0, W1, 1e-3, [1.0, 1.618033988749895], basis)
    assert g.magnetic_before > 1e-4
    assert g.magnetic_after <= 1e-8 * g.magnetic_before
    assert magnetic_norm(g.H1) == g.magnetic_after
    assert g.H1.hermitian_defect() <= 1e-14
    assert g.expected_deviation <= 1e-8
    assert g.U.unitarity_defect() <= 1e-8
    # L2 isometry of the gauge at a fixed phase
    psi = np.random.default_rng(0).normal(size=basis.n_modes)
    psi /= np.linalg.norm(psi)
    Uphi = g.U(np.array([0.3, 1.9]))
    assert abs(np.linalg.norm(Uphi @ psi) - 1.0) <= 1e-10


def test_magnetic_component_is_imaginary_part(rng):
    H = herm_family(rng, 1, 2, 3)
    phi = 0.77
    np.testing.assert_allclose(magnetic_component(H)(phi), 1j * H(phi).imag, atol=1e-12)


def test_gauge_closeness_scales_with_eps(basis):
    W1 = QPSymbol.separable(lambda x: 0.5 * x, trig_modes(1, cos={(1,): 1.0}), 1.0, 1)
    b = gauge_b(W1, basis.grid)
    beta = 2.0  # [beta1 + 1]
    norms = []
    for eps in (1e-3, 5e-4):
        U = QPUnitary.multiplication(b, eps, basis)(np.array([0.9]))
        norms.append(sobolev_operator_norm(U - np.eye(basis.n_modes), basis, 1.0 + beta, 1.0))
    assert norms[0] / norms[1] == pytest.approx(2.0, rel=0.02)
    assert norms[0] < 1e-3 * 50


def test_gauge_rejects_beta1_above_ell(basis):
    W1 = QPSymbol.separable(lambda x: x**3, trig_modes(1, cos={(1,): 1.0}), 3.0, 1)
    with pytest.raises(HypothesisViolation):
        apply_gauge(QPSymbol.zero(1), W1, 1e-3, [1.3], basis)
