"""Matrix-level KAM reducibility for H(phi) = diag(lambda) + P(phi).

Each step solves the homological equation for X, conjugates by
U = exp(-i X), moves the new phase average of the diagonal into ``diag_part``
and measures the remainder with the weighted norm
sum_k ||P_k||_2 (1 + |k|_1)^p.

The conjugated family is computed from the commutator series

    H_+ = D + sum_m i^m/m! ad_X^m P - sum_m i^m/(m+1)! ad_X^m R,
    R   = omega.d_phi X - i [X, D],

which is exact for any X and never multiplies D by a unitary, so round-off
stays proportional to the size of P rather than of the spectrum.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .conjugation import QPUnitary
from .diophantine import melnikov_bound
from .qpoperator import QPOperator, _synthesize, analyze_samples, hermitian_fill, k_norm
from .spectral_basis import PotentialSpec, flow_average

__all__ = [
    "KAMParams",
    "KAMState",
    "KAMResult",
    "DiagonalTimeSeries",
    "SmoothnessFit",
    "ReducibilityError",
    "SmallDivisorError",
    "DivergenceError",
    "homological_solve",
    "eliminate_diagonal_time",
    "diagonal_unitary",
    "initial_state",
    "kam_step",
    "kam_iterate",
    "fit_diagonal_smoothness",
    "trace_csv",
    "contraction_exponents",
]


class ReducibilityError(RuntimeError):
    """The iteration did not reach ``tol_final``; ``trace`` holds the states so far."""

    def __init__(self, message: str, trace=(), cause=None):
        super().__init__(message)
        self.trace = list(trace)
        self.cause = cause


class SmallDivisorError(ReducibilityError):
    def __init__(self, i, j, k, divisor, floor, trace=()):
        super().__init__(
            f"divisor |omega.k + l_i - l_j| = {divisor:.3e} below floor {floor:.3e} at i={i}, j={j}, k={k}", trace
        )
        self.site = (i, j, tuple(k))
        self.divisor = divisor
        self.floor = floor


class DivergenceError(ReducibilityError):
    pass


@dataclass(frozen=True)
class KAMParams:
    gamma: float
    tau: float
    K: int = 5
    d: float = 1.0
    tol_final: float = 1e-10
    max_steps: int = 12
    p: float | None = None
    diag_mode: str = "per_step"
    phase_factor: int = 4
    divisor_rel_min: float = 1e-12
    series_tol: float = 1e-18

    def __post_init__(self):
        if self.diag_mode not in ("per_step", "final"):
            raise ValueError("diag_mode must be 'per_step' or 'final'")
        if self.K < 0 or self.max_steps < 1:
            raise ValueError("K must be >= 0 and max_steps >= 1")

    @property
    def weight_power(self) -> float:
        return self.tau + 1.0 if self.p is None else self.p

    def phase_points(self, K: int) -> int:
        return max(self.phase_factor * K, 2 * K + 1, 1)


@dataclass(frozen=True, eq=False)
class DiagonalTimeSeries:
    """mu_j(phi) = sum_k mu[k, j] e^{i k.phi} relative to the spectrum ``base``."""

    mu: np.ndarray  # shape (2K+1,)*n + (N,)
    n_freq: int
    base: np.ndarray

    @classmethod
    def from_operator(cls, P: QPOperator, base) -> "DiagonalTimeSeries":
        return cls(P.diagonal(), P.n_freq, np.asarray(base, dtype=float))

    @property
    def k_cutoff(self) -> int:
        return (self.mu.shape[0] - 1) // 2

    def average(self) -> np.ndarray:
        return self.mu[(self.k_cutoff,) * self.n_freq].real.copy()

    def reality_defect(self) -> float:
        flipped = self.mu[(slice(None, None, -1),) * self.n_freq]
        return float(np.abs(self.mu - np.conj(flipped)).max())

    def __call__(self, phi) -> np.ndarray:
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        K, n = self.k_cutoff, self.n_freq
        r = np.arange(-K, K + 1)
        ks = np.stack(np.meshgrid(*([r] * n), indexing="ij"), -1).reshape(-1, n)
        ph = np.exp(1j * (ks @ phi))
        return (ph @ self.mu.reshape(ks.shape[0], -1)).real

    def sup_norms(self, L: int | None = None) -> np.ndarray:
        """max over a phase grid of |mu_j(phi)| for every j."""
        L = L or max(4 * self.k_cutoff, 2 * self.k_cutoff + 1)
        vals = _synthesize(self.mu[..., None], self.n_freq, L)[..., 0].real
        return np.abs(vals).reshape(-1, self.mu.shape[-1]).max(axis=0)


@dataclass(frozen=True, eq=False)
class KAMState:
    step_index: int
    diag_part: np.ndarray
    pert: QPOperator
    accum_unitary: QPUnitary
    eps_history: tuple
    min_divisor_ratio: float = math.inf
    tail: float = 0.0
    mu: DiagonalTimeSeries | None = None

    @property
    def eps(self) -> float:
        return self.eps_history[-1]

    def hamiltonian(self) -> QPOperator:
        D = QPOperator.constant(np.diag(self.diag_part), self.pert.n_freq, self.pert.k_cutoff)
        return D + self.pert


@dataclass
class KAMResult:
    lambda_inf: np.ndarray
    unitary: QPUnitary
    trace: list
    converged: bool = True

    def __iter__(self):
        return iter((self.lambda_inf, self.unitary, self.trace))

    @property
    def final_residual(self) -> float:
        return self.trace[-1].eps

    def theta(self) -> np.ndarray:
        return contraction_exponents([s.eps for s in self.trace])


def contraction_exponents(eps) -> np.ndarray:
    """theta_n = log eps_{n+1} / log eps_n."""
    e = np.asarray(eps, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(e[1:]) / np.log(e[:-1])


# --- homological equation ----------------------------------------------------------


def _divisors(diag: np.ndarray, P: QPOperator, omega: np.ndarray) -> np.ndarray:
    wk = P.k_vectors() @ omega
    return wk[..., None, None] + diag[:, None] - diag[None, :]


def _solve(diag, P: QPOperator, omega, gamma, tau, d, rel_min=1e-12, trace=()):
    omega = np.asarray(omega, dtype=float)
    diag = np.asarray(diag, dtype=float)
    n, N, K = P.n_freq, P.dim, P.k_cutoff
    div = _divisors(diag, P, omega)
    kvec = P.k_vectors()
    idx = np.arange(N)
    resonant = np.zeros(div.shape, dtype=bool)
    resonant[(K,) * n + (idx, idx)] = True
    C = P.coeffs
    scale = np.abs(C).max(initial=0.0)
    active = (np.abs(C) > rel_min * scale) & ~resonant if scale > 0 else np.zeros_like(resonant)
    floor = 0.5 * melnikov_bound(idx[:, None], idx[None, :], k_norm(kvec)[..., None, None], gamma, tau, d)
    ratio = np.where(active, np.abs(div) / floor, np.inf)
    min_ratio = float(ratio.min(initial=np.inf))
    if min_ratio < 1.0:
        site = np.unravel_index(int(np.argmin(ratio)), ratio.shape)
        k = tuple(int(v) for v in kvec[site[:n]])
        i, j = int(site[n]), int(site[n + 1])
        raise SmallDivisorError(i, j, k, float(abs(div[site])), float(floor[site]), trace)
    X = np.zeros_like(C)
    X[active] = C[active] / (1j * div[active])
    return QPOperator(X, n), min_ratio


def homological_solve(diag, pert: QPOperator, omega, gamma: float, tau: float, d: float, rel_min: float = 1e-12):
    """X_ijk = P_ijk / (i (omega.k + l_i - l_j)) off the resonant set {k=0, i=j}.

    Coefficients below ``rel_min`` times the largest one are treated as
    zero and skipped.  Raises :class:`SmallDivisorError` when a needed divisor
    is below gamma/2 (1 + |i^d - j^d|) / (1 + |k|_1^tau).
    """
    return _solve(diag, pert, omega, gamma, tau, d, rel_min)[0]


def eliminate_diagonal_time(mu: DiagonalTimeSeries, omega, gamma: float, tau: float, rel_min: float = 1e-12):
    """c_j(phi) = sum_{k != 0} mu_{j,k} / (i omega.k) e^{i k.phi} and
    lambda0_j = base_j + mu_{j,0}.

    Returns ``(c, lambda0)`` with ``c`` laid out like ``mu.mu``.  The
    change of variables psi_j -> exp(-i c_j) psi_j is :func:`diagonal_unitary`.
    """
    omega = np.asarray(omega, dtype=float)
    n, K = mu.n_freq, mu.k_cutoff
    r = np.arange(-K, K + 1)
    kvec = np.stack(np.meshgrid(*([r] * n), indexing="ij"), -1)
    wk = kvec @ omega
    kn = k_norm(kvec)
    scale = np.abs(mu.mu).max(initial=0.0)
    live = (np.abs(mu.mu) > rel_min * scale).any(axis=-1) & (kn > 0) if scale > 0 else kn < 0
    if np.any(live):
        bound = gamma / np.where(kn > 0, kn, 1).astype(float) ** tau
        bad = live & (np.abs(wk) < bound)
        if np.any(bad):
            site = tuple(int(v) for v in np.argwhere(bad)[0])
            k = tuple(int(v) for v in kvec[site])
            raise SmallDivisorError(-1, -1, k, float(abs(wk[site])), float(bound[site]))
    c = np.zeros_like(mu.mu, dtype=complex)
    c[live] = mu.mu[live] / (1j * wk[live])[..., None]
    lambda0 = mu.base + mu.average()
    return c, lambda0


def diagonal_unitary(c: np.ndarray, n_freq: int) -> QPUnitary:
    """psi_j -> exp(-i c_j(phi)) psi_j."""
    N = c.shape[-1]
    gen = np.zeros(c.shape + (N,), dtype=complex)
    idx = np.arange(N)
    gen[..., idx, idx] = c
    return QPUnitary.exp(QPOperator(gen, n_freq))


# --- one step --------------------------------------------------------------------


def _commutator_series(X, P, R, tol):
    """sum_m i^m/m! ad_X^m P - sum_m i^m/(m+1)! ad_X^m R, pointwise."""
    total = P - R
    a, b = P, R
    scale = max(np.abs(P).max(initial=0.0), np.abs(R).max(initial=0.0), 1e-300)
    for m in range(1, 60):
        a = 1j * (X @ a - a @ X) / m
        b = 1j * (X @ b - b @ X) / m
        term = a - b / (m + 1)
        total = total + term
        if max(np.abs(a).max(), np.abs(b).max()) < tol * scale:
            break
    return total


def conjugate_step(diag, pert: QPOperator, X: QPOperator, omega, K: int, L: int):
    """Fourier coefficients (|k|_inf <= K) of exp(iX)(D+P)exp(-iX) - i exp(iX) d exp(-iX) - D,
    plus the discarded tail mass."""
    n = pert.n_freq
    omega = np.asarray(omega, dtype=float)
    Kw = max(pert.k_cutoff, X.k_cutoff)
    Xw = X.widen(Kw)
    R = Xw.derivative(omega).coeffs - 1j * (Xw.coeffs * (np.asarray(diag)[None, :] - np.asarray(diag)[:, None]))
    Lg = max(L, 2 * Kw + 1)
    Xs = _synthesize(Xw.coeffs, n, Lg)
    Ps = _synthesize(pert.widen(Kw).coeffs, n, Lg)
    Rs = _synthesize(R, n, Lg)
    S = _commutator_series(Xs, Ps, Rs, 1e-17)
    coeffs, tail = analyze_samples(S, n, K)
    return QPOperator(hermitian_fill(coeffs, n), n), tail


def _split_average(diag, S: QPOperator):
    n = S.n_freq
    K = S.k_cutoff
    avg = np.diagonal(S.coeffs[(K,) * n]).real.copy()
    c = S.coeffs.copy()
    idx = np.arange(S.dim)
    c[(K,) * n + (idx, idx)] = 0.0
    return np.asarray(diag) + avg, QPOperator(c, n)


def initial_state(H: QPOperator, params: KAMParams) -> KAMState:
    """Split H = diag(<H_jj>) + P and widen P to the working cutoff."""
    n = H.n_freq
    K = max(params.K, H.k_cutoff)
    Hw = H.widen(K)
    diag = np.diagonal(Hw.coeffs[(K,) * n]).real.copy()
    _, P = _split_average(np.zeros_like(diag), Hw)
    if H.k_cutoff > params.K:
        P = P.truncate(params.K)
    return KAMState(
        step_index=0,
        diag_part=diag,
        pert=P,
        accum_unitary=QPUnitary.identity(n, H.dim),
        eps_history=(P.weighted_norm(params.weight_power),),
        tail=H.tail_norm(params.K),
    )


def kam_step(state: KAMState, omega, params: KAMParams) -> KAMState:
    """One Newton step of the reducibility iteration."""
    P = state.pert
    if P.max_abs() == 0.0:
        return state
    omega = np.asarray(omega, dtype=float)
    diag = state.diag_part
    mu = DiagonalTimeSeries.from_operator(P, diag)
    off = P.offdiagonal()
    X, ratio = _solve(diag, off, omega, params.gamma, params.tau, params.d, params.divisor_rel_min, ())
    if params.diag_mode == "per_step":
        c, _ = eliminate_diagonal_time(mu, omega, params.gamma, params.tau, params.divisor_rel_min)
        X = X + diagonal_unitary(c, P.n_freq).generator
    S, tail = conjugate_step(diag, P, X, omega, params.K, params.phase_points(params.K))
    new_diag, new_pert = _split_average(diag, S)
    eps = new_pert.weighted_norm(params.weight_power)
    return KAMState(
        step_index=state.step_index + 1,
        diag_part=new_diag,
        pert=new_pert,
        accum_unitary=state.accum_unitary.compose(QPUnitary.exp(X)),
        eps_history=state.eps_history + (eps,),
        min_divisor_ratio=ratio,
        tail=tail,
        mu=mu,
    )


def _residual(state: KAMState, params: KAMParams) -> float:
    if params.diag_mode == "final":
        return state.pert.offdiagonal().weighted_norm(params.weight_power)
    return state.eps


def kam_iterate(H1: QPOperator, omega, params: KAMParams) -> KAMResult:
    """Iterate :func:`kam_step` until the residual drops below ``tol_final``.

    Raises :class:`ReducibilityError` (or a subclass) carrying the trace when
    a divisor falls below the floor, the residual grows, or ``max_steps`` is
    exhausted.
    """
    omega = np.asarray(omega, dtype=float)
    state = initial_state(H1, params)
    trace = [state]
    res = _residual(state, params)
    steps = 0
    while res >= params.tol_final:
        if steps >= params.max_steps:
            raise ReducibilityError(
                f"no convergence after {steps} steps (residual {res:.3e} > {params.tol_final:.1e})", trace
            )
        try:
            new = kam_step(state, omega, params)
        except SmallDivisorError as err:
            err.trace = list(trace)
            raise
        new_res = _residual(new, params)
        trace.append(new)
        if not new_res < res:
            raise DivergenceError(
                f"residual grew from {res:.3e} to {new_res:.3e} at step {new.step_index}; "
                "likely a resonance or an exhausted Fourier cutoff",
                trace,
            )
        state, res = new, new_res
        steps += 1
    if params.diag_mode == "final" and state.pert.max_abs() > 0:
        mu = DiagonalTimeSeries.from_operator(state.pert, state.diag_part)
        c, lam0 = eliminate_diagonal_time(mu, omega, params.gamma, params.tau, params.divisor_rel_min)
        U = state.accum_unitary.compose(diagonal_unitary(c, H1.n_freq))
        pert = state.pert.offdiagonal()
        state = replace(state, diag_part=lam0, accum_unitary=U, pert=pert, mu=mu)
        trace.append(state)
    return KAMResult(lambda_inf=state.diag_part.copy(), unitary=state.accum_unitary, trace=trace)


def trace_csv(trace) -> str:
    """step, eps, theta, min divisor ratio, max |shift|, tail."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "eps", "theta", "min_divisor_ratio", "max_shift", "tail"])
    base = trace[0].diag_part
    prev = None
    for s in trace:
        theta = "" if prev is None or prev <= 0 or s.eps <= 0 else f"{math.log(s.eps) / math.log(prev):.6f}"
        w.writerow(
            [
                s.step_index,
                f"{s.eps:.6e}",
                theta,
                "" if math.isinf(s.min_divisor_ratio) else f"{s.min_divisor_ratio:.6e}",
                f"{np.abs(s.diag_part - base).max():.6e}",
                f"{s.tail:.3e}",
            ]
        )
        prev = s.eps
    return buf.getvalue()


# --- smooth interpolation of the diagonal ------------------------------------------


@dataclass
class SmoothnessFit:
    exponents: np.ndarray
    coefficients: np.ndarray  # (2K+1,)*n + (len(exponents),)
    residuals: np.ndarray  # delta_{j,k}, same layout as mu
    window: tuple
    decay_exponent: float
    condition: float
    ell: float
    classical_deviation: float | None = None
    warnings: list = field(default_factory=list)

    def design(self, E) -> np.ndarray:
        u = np.asarray(E, dtype=float) ** (1.0 / (2.0 * self.ell))
        return u[..., None] ** self.exponents

    def __call__(self, E, phi) -> np.ndarray:
        """Smooth fit <z>(E, phi)."""
        n = self.coefficients.ndim - 1
        K = (self.coefficients.shape[0] - 1) // 2
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        r = np.arange(-K, K + 1)
        ks = np.stack(np.meshgrid(*([r] * n), indexing="ij"), -1).reshape(-1, n)
        coef = self.coefficients.reshape(ks.shape[0], -1)
        vals = self.design(E) @ coef.T
        return (vals @ np.exp(1j * (ks @ phi))).real


def fit_diagonal_smoothness(
    mu: DiagonalTimeSeries,
    lambdas,
    ell: float,
    order: float = 0.0,
    degree: int = 3,
    window: tuple | None = None,
    spec: PotentialSpec | None = None,
    symbol_average=None,
    scale: float = 1.0,
    classical_window: tuple | None = None,
) -> SmoothnessFit:
    """Least-squares fit mu_{j,k} ~ sum_m a_{k,m} u_j^(order - m), u = lambda^(1/(2 ell)).

    ``order = 0`` with exponents going negative corresponds to a symbol of
    order 0; pass the symbol order to follow its classical expansion.  Rows
    in ``window`` (default: j from 2 up to 80% of N) enter the fit.  When a
    potential ``spec`` and a callable ``symbol_average(x)`` (the phase average
    of the perturbing symbol) are given, the k = 0 fit divided by ``scale``
    is compared with the classical orbit average at E = lambda_j over
    ``classical_window``.
    """
    lam = np.asarray(lambdas, dtype=float)
    N = lam.size
    if N < 12:
        raise ValueError("at least 12 resolved modes are needed")
    lo, hi = window or (2, int(0.8 * N))
    exps = order - np.arange(degree + 1, dtype=float)
    u = lam ** (1.0 / (2.0 * ell))
    A = u[:, None] ** exps
    rows = slice(lo, hi)
    Aw = A[rows]
    cond = float(np.linalg.cond(Aw))
    n = mu.n_freq
    shape = mu.mu.shape[:-1]
    Y = mu.mu.reshape(-1, N)[:, rows].T
    coef, *_ = np.linalg.lstsq(Aw, Y, rcond=None)
    fitted = (A @ coef).T.reshape(shape + (N,))
    resid = mu.mu - fitted
    warnings = []
    if cond > 1e12:
        warnings.append(f"ill-conditioned fit (cond = {cond:.2e})")
    K = mu.k_cutoff
    r0 = np.abs(resid[(K,) * n])[rows]
    j = np.arange(N)[rows].astype(float)
    good = r0 > 0
    if good.sum() >= 3:
        slope = np.polyfit(np.log(j[good] + 0.5), np.log(r0[good]), 1)[0]
        decay = float(-slope)
    else:
        decay = math.inf
    fit = SmoothnessFit(
        exponents=exps,
        coefficients=coef.T.reshape(shape + (exps.size,)),
        residuals=resid,
        window=(lo, hi),
        decay_exponent=decay,
        condition=cond,
        ell=ell,
        warnings=warnings,
    )
    if spec is not None and symbol_average is not None:
        clo, chi = classical_window or (N // 4, int(0.6 * N))
        devs = []
        avg_fit = (A @ coef[:, mu.mu.reshape(-1, N).shape[0] // 2]).real / scale
        for jj in range(clo, chi):
            classical = flow_average(lambda x, xi, phi: symbol_average(x), lam[jj], None, spec)
            devs.append(abs(avg_fit[jj] - classical) / abs(classical))
        fit.classical_deviation = float(max(devs))
    return fit
