import math

import numpy as np
import pytest
from scipy.linalg import expm

from qpreduce.conjugation import QPUnitary
from qpreduce.floquet import (
    compare_reduced,
    monodromy_quasienergies,
    norm_trend,
    propagate,
    propagator,
    quasienergy_mismatch,
    spectral_bound,
    tail_population,
    track_norms,
)
from qpreduce.kam import KAMParams, kam_iterate
from qpreduce.qpoperator import QPOperator

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]])
SZ = np.diag([1.0, -1.0]).astype(complex)


def rabi(delta, g):
    # (delta/2) sz + g (cos phi sx + sin phi sy) = (delta/2) sz + g (e^{i phi} s- + e^{-i phi} s+)
    sp = np.array([[0, 1], [0, 0]], dtype=complex)
    return QPOperator.from_dict({(0,): 0.5 * delta * SZ, (1,): g * sp.T, (-1,): g * sp}, 1, 2)


def rabi_exact(delta, g, w, t, psi0):
    rot = expm(-0.5j * w * t * SZ)
    return rot @ expm(-1j * t * (0.5 * (delta - w) * SZ + g * SX)) @ psi0


def test_rabi_closed_form():
    delta, g, w = 1.0, 0.3, 1.2
    H = rabi(delta, g)
    phi = 0.7
    np.testing.assert_allclose(H(phi), 0.5 * delta * SZ + g * (math.cos(phi) * SX + math.sin(phi) * SY), atol=1e-15)
    psi0 = np.array([1.0, 0.0], dtype=complex)
    for method, tol in (("midpoint", 1e-4), ("magnus4", 1e-8)):
        traj = propagate(H, [w], psi0, 10.0, dt=0.01, method=method, n_store=10)
        for t, psi in zip(traj.times, traj.states):
            np.testing.assert_allclose(psi, rabi_exact(delta, g, w, t, psi0), atol=tol)


def test_stationary_state():
    lam = np.array([1.0, 3.0, 5.0])
    H = QPOperator.constant(np.diag(lam), 1)
    traj = propagate(H, [1.5], np.eye(3)[0], 20.0, n_store=50)
    np.testing.assert_allclose(np.abs(traj.states[:, 0]), 1.0, atol=1e-9)
    np.testing.assert_allclose(traj.states[:, 0], np.exp(-1j * lam[0] * traj.times), atol=1e-9)


def test_time_independent_matches_exponential(rng):
    A = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
    M = A + A.conj().T
    H = QPOperator.constant(M, 2)
    psi0 = rng.normal(size=5) + 0j
    psi0 /= np.linalg.norm(psi0)
    traj = propagate(H, [1.0, 1.3], psi0, 7.0, n_store=10)
    np.testing.assert_allclose(traj.states[-1], expm(-7j * M) @ psi0, atol=1e-8)
    np.testing.assert_allclose(propagator(H, [1.0, 1.3], 7.0, 50), expm(-7j * M), atol=1e-8)


def test_midpoint_second_order():
    H = rabi(1.0, 0.4)
    psi0 = np.array([0.6, 0.8], dtype=complex)
    ref = rabi_exact(1.0, 0.4, 1.3, 2.0, psi0)
    errs = []
    for dt in (0.02, 0.01):
        traj = propagate(H, [1.3], psi0, 2.0, dt=dt, n_store=1)
        errs.append(np.linalg.norm(traj.states[-1] - ref))
    assert 3.5 <= errs[0] / errs[1] <= 4.5


def test_step_size_rule():
    H = QPOperator.constant(np.diag([1.0, 100.0]), 1)
    assert spectral_bound(H) == pytest.approx(100.0)
    with pytest.raises(ValueError):
        propagate(H, [1.0], np.array([1.0, 0.0]), 1.0, dt=0.1)


def test_norms_constant_without_forcing(quartic_basis, rng):
    N = quartic_basis.n_modes
    H = QPOperator.constant(np.diag(quartic_basis.eigenvalues), 1)
    psi0 = np.zeros(N, dtype=complex)
    psi0[:5] = rng.normal(size=5)
    psi0 /= np.linalg.norm(psi0)
    traj = propagate(H, [1.4], psi0, 1.0, n_store=20)
    norms = track_norms(traj, [0, 1, 2], quartic_basis)
    for s, series in norms.items():
        np.testing.assert_allclose(series, series[0], rtol=1e-9)
    assert traj.norms is not None and 2.0 in traj.norms
    slope, rel = norm_trend(traj.times, norms[2.0])
    assert abs(rel) < 1e-8
    assert tail_population(traj) < 1e-20
    assert compare_reduced(traj, quartic_basis.eigenvalues, QPUnitary.identity(1, N), [1.4]) <= 1e-8


def test_norm_trend_linear():
    t = np.linspace(0, 10, 101)
    slope, rel = norm_trend(t, 2.0 + 0.1 * t)
    assert slope == pytest.approx(0.1)
    assert rel == pytest.approx(0.5)


def test_two_level_reduction_is_exact():
    H = QPOperator.constant(np.array([[1.0, 0.05], [0.05, 3.0]]), 1, 1)
    res = kam_iterate(H, [1.3], KAMParams(0.1, 1.0, K=2))
    psi0 = np.array([0.8, 0.6], dtype=complex)
    traj = propagate(H, [1.3], psi0, 30.0, n_store=300)
    assert compare_reduced(traj, res.lambda_inf, res.unitary, [1.3]) <= 1e-8


def test_monodromy_unperturbed_and_driven():
    lam = np.array([1.0, 3.0, 5.5])
    H0 = QPOperator.constant(np.diag(lam), 1)
    w = 1.4
    mono = monodromy_quasienergies(H0, [w])
    assert mono.unitarity_defect <= 1e-8
    assert mono.period == pytest.approx(2 * math.pi / w)
    assert quasienergy_mismatch(mono.quasienergies, lam, [w]).max() <= 1e-9
    # periodic drive: quasi-energies agree with the reduced spectrum
    c = np.zeros((3, 3, 3), dtype=complex)
    c[2, 0, 1] = c[0, 1, 0] = 0.02
    c[2, 1, 2] = c[0, 2, 1] = 0.03
    c[2, 2, 2] = c[0, 2, 2] = 0.01
    H = QPOperator.constant(np.diag(lam), 1, 1) + QPOperator(c, 1)
    res = kam_iterate(H, [w], KAMParams(0.1, 1.0, K=4))
    mono = monodromy_quasienergies(H, [w])
    assert quasienergy_mismatch(mono.quasienergies, res.lambda_inf, [w]).max() <= 1e-6


def test_monodromy_single_frequency_only():
    with pytest.raises(ValueError):
        monodromy_quasienergies(QPOperator.constant(np.eye(2), 2), [1.0, 1.5])
