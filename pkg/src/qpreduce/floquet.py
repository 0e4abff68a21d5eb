"""Direct integration of i psi' = H(omega t) psi in the truncated eigenbasis."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conjugation import QPUnitary, expm_hermitian
from .qpoperator import QPOperator
from .spectral_basis import EigenBasis, sobolev_weights

__all__ = [
    "Trajectory",
    "IntegratorError",
    "spectral_bound",
    "propagate",
    "propagator",
    "track_norms",
    "norm_trend",
    "compare_reduced",
    "reduced_states",
    "monodromy_quasienergies",
    "quasienergy_mismatch",
    "tail_population",
]


class IntegratorError(RuntimeError):
    pass


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_times, N) or (n_times, N, r)
    dt: float
    method: str
    norm_drift: float
    norms: dict = field(default_factory=dict)

    def fidelity(self, ref) -> np.ndarray:
        return np.abs(self.states @ np.conj(np.asarray(ref)))


def spectral_bound(H: QPOperator) -> float:
    """Upper bound on sup_phi ||H(phi)||_2."""
    avg = np.linalg.eigvalsh(0.5 * (H.average() + H.average().conj().T))
    rest = H.weighted_norm(0.0) - np.linalg.norm(H.average(), 2)
    return float(np.abs(avg).max() + max(rest, 0.0))


def _step_generators(H: QPOperator, omega, t0: float, dt: float, m: int, method: str) -> np.ndarray:
    """Hermitian G_a with psi_{a+1} = exp(-i G_a) psi_a for the m steps from t0."""
    start = t0 + dt * np.arange(m)
    if method == "midpoint":
        return dt * H(np.outer(start + 0.5 * dt, omega))
    if method == "magnus4":
        c = math.sqrt(3.0) / 6.0
        H1 = H(np.outer(start + (0.5 - c) * dt, omega))
        H2 = H(np.outer(start + (0.5 + c) * dt, omega))
        comm = H2 @ H1 - H1 @ H2
        G = 0.5 * dt * (H1 + H2) - 1j * (math.sqrt(3.0) * dt * dt / 12.0) * comm
        return 0.5 * (G + np.conj(np.swapaxes(G, -1, -2)))
    raise ValueError(f"unknown method {method!r}")


def _expm_action(G: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """exp(-i G) psi by its Taylor series (||G|| is kept O(1) by the step rule)."""
    out = psi.copy()
    term = psi
    scale = np.abs(psi).max()
    for m in range(1, 80):
        term = (-1j / m) * (G @ term)
        out = out + term
        if np.abs(term).max() <= 1e-17 * scale:
            return out
    raise IntegratorError("Taylor series of the step exponential did not converge; reduce dt")


def _run(H, omega, psi0, n_steps, dt, stride, method, chunk, t0=0.0, action="taylor"):
    psi = np.array(psi0, dtype=complex)
    stored = [psi.copy()]
    done = 0
    while done < n_steps:
        m = min(chunk, n_steps - done)
        G = _step_generators(H, omega, t0 + done * dt, dt, m, method)
        if action == "eigh" or np.abs(G).sum(axis=-1).max() > 4.0:
            Us = expm_hermitian(G)
            step = lambda a, v: Us[a] @ v  # noqa: E731
        else:
            step = lambda a, v: _expm_action(G[a], v)  # noqa: E731
        for a in range(m):
            psi = step(a, psi)
            if (done + a + 1) % stride == 0:
                stored.append(psi.copy())
        done += m
    return np.array(stored)


def propagate(
    H: QPOperator,
    omega,
    psi0,
    t_end: float,
    dt: float | None = None,
    method: str = "midpoint",
    n_store: int = 2000,
    chunk: int = 512,
    norm_tol: float = 1e-8,
) -> Trajectory:
    """Exponential midpoint (or fourth-order Magnus) integration.

    ``dt`` defaults to the largest step with dt * ||H|| <= 0.5 and is then
    shrunk so that ``n_store`` samples fall on steps.  Norm drift above
    ``norm_tol`` (relative) triggers one retry at dt / 2.
    """
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    lam_max = spectral_bound(H)
    if dt is None:
        dt = 0.5 / lam_max
    elif method == "midpoint" and dt * lam_max > 0.5 + 1e-12:
        raise ValueError(f"dt = {dt:g} does not resolve ||H|| = {lam_max:.3g} (need dt*||H|| <= 0.5)")
    psi0 = np.asarray(psi0, dtype=complex)
    n0 = np.linalg.norm(psi0, axis=0)
    for attempt in range(2):
        stride = max(1, math.ceil(t_end / (dt * n_store)))
        n_steps = stride * n_store
        h = t_end / n_steps
        states = _run(H, omega, psi0, n_steps, h, stride, method, chunk)
        drift = float(np.abs(np.linalg.norm(states, axis=1) - n0).max() / np.max(n0))
        if drift <= norm_tol:
            break
        dt = h / 2
    else:
        raise IntegratorError(f"L2 norm drift {drift:.2e} exceeds {norm_tol:.0e} even at dt = {h:g}")
    times = np.linspace(0.0, t_end, n_store + 1)
    return Trajectory(times=times, states=states, dt=h, method=method, norm_drift=drift)


def propagator(H: QPOperator, omega, t_end: float, n_steps: int, method: str = "magnus4", t0: float = 0.0) -> np.ndarray:
    """The N x N propagator from t0 to t0 + t_end."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    states = _run(H, omega, np.eye(H.dim, dtype=complex), n_steps, t_end / n_steps, n_steps, method, 512, t0, "eigh")
    return states[-1]


def track_norms(traj: Trajectory, s_list, basis: EigenBasis) -> dict:
    """H^s norms of every stored state; also cached on ``traj.norms``."""
    out = {}
    N = traj.states.shape[1]
    for s in s_list:
        w = sobolev_weights(basis, s).weights[:N]
        out[float(s)] = np.sqrt(np.sum((w * np.abs(traj.states)) ** 2, axis=1))
    traj.norms.update(out)
    return out


def norm_trend(times, series) -> tuple[float, float]:
    """Least-squares slope of the series and slope * t_end relative to series[0]."""
    times = np.asarray(times, dtype=float)
    series = np.asarray(series, dtype=float)
    slope = float(np.polyfit(times, series, 1)[0])
    return slope, slope * (times[-1] - times[0]) / series[0]


def reduced_states(times, psi0, lambda_inf, U: QPUnitary, omega, batch: int = 256) -> np.ndarray:
    """psi_red(t) = U(omega t) exp(-i diag(lambda) t) U(0)^{-1} psi0."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    times = np.asarray(times, dtype=float)
    U0 = U.evaluate(np.zeros(omega.size))
    chi = np.conj(U0.T) @ np.asarray(psi0, dtype=complex)
    out = np.empty((times.size,) + chi.shape, dtype=complex)
    for a in range(0, times.size, batch):
        t = times[a : a + batch]
        Ut = U.evaluate(np.outer(t, omega))
        ph = np.exp(-1j * np.outer(t, lambda_inf))
        out[a : a + batch] = np.einsum("tij,tj->ti", Ut, ph * chi)
    return out


def compare_reduced(traj: Trajectory, lambda_inf, U: QPUnitary, omega, return_series: bool = False):
    """max_t ||psi(t) - psi_red(t)||_2 over the stored times."""
    red = reduced_states(traj.times, traj.states[0], lambda_inf, U, omega)
    dev = np.linalg.norm(traj.states - red, axis=1)
    return (float(dev.max()), dev) if return_series else float(dev.max())


@dataclass
class Monodromy:
    quasienergies: np.ndarray
    matrix: np.ndarray
    period: float
    unitarity_defect: float


def monodromy_quasienergies(
    H: QPOperator, omega, n_steps: int | None = None, method: str = "magnus4", tol_unitary: float = 1e-8
) -> Monodromy:
    """Quasi-energies -arg(mu)/T of the one-period propagator (n = 1 only)."""
    if H.n_freq != 1:
        raise ValueError("monodromy is defined for a single frequency only")
    w = float(np.atleast_1d(omega)[0])
    T = 2.0 * math.pi / w
    if n_steps is None:
        n_steps = max(64, math.ceil(T * spectral_bound(H) / (1.0 if method == "magnus4" else 0.25)))
    M = propagator(H, [w], T, n_steps, method)
    defect = float(np.abs(M.conj().T @ M - np.eye(H.dim)).max())
    if defect > tol_unitary:
        raise IntegratorError(f"monodromy unitarity defect {defect:.2e} > {tol_unitary:.0e}")
    mu = np.linalg.eigvals(M)
    return Monodromy(quasienergies=np.sort(-np.angle(mu) / T), matrix=M, period=T, unitarity_defect=defect)


def quasienergy_mismatch(quasi, lambdas, omega) -> np.ndarray:
    """For each lambda_j, the circular distance (mod omega) to the nearest quasi-energy."""
    w = float(np.atleast_1d(omega)[0])
    q = np.asarray(quasi, dtype=float)
    lam = np.asarray(lambdas, dtype=float)
    diff = (lam[:, None] - q[None, :]) % w
    diff = np.minimum(diff, w - diff)
    return diff.min(axis=1)


def tail_population(traj: Trajectory, frac: float = 0.1) -> float:
    """max_t of the population of the top ``frac`` of modes."""
    N = traj.states.shape[1]
    top = max(1, int(round(frac * N)))
    pop = np.abs(traj.states[:, N - top :]) ** 2
    return float(pop.reshape(pop.shape[0], -1).sum(axis=1).max())
