"""Quasi-periodic unitary changes of variables and the magnetic gauge.

If psi = U(omega t) phi solves i psi' = H(omega t) psi then phi solves
i phi' = H_+(omega t) phi with

    H_+ = U^{-1} (H U - i omega.d_phi U).

Exponential unitaries use the convention U = exp(-i X) throughout; with it the
solution of the homological equation is X_ijk = P_ijk / (i (omega.k + l_i - l_j)).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson

from .qpoperator import QPOperator, analyze_samples, hermitian_fill, phase_grid
from .spectral_basis import EigenBasis, sobolev_weights
from .symbols import HypothesisViolation, QPSymbol, TabulatedFunction, assemble_hamiltonian, quantize_multiplication

__all__ = [
    "QPUnitary",
    "TailError",
    "GaugeResult",
    "conjugate",
    "gauge_b",
    "apply_gauge",
    "magnetic_component",
    "magnetic_norm",
    "sobolev_operator_norm",
    "expm_hermitian",
]


class TailError(RuntimeError):
    """Fourier truncation discarded more than the allowed tail mass."""


def _dagger(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def _as_phases(phi, n: int) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if n == 1 and (phi.ndim == 0 or phi.shape[-1] != 1):
        phi = phi[..., None]
    return phi


def expm_hermitian(X: np.ndarray, dX: np.ndarray | None = None):
    """exp(-i X) for hermitian X (batched) and, optionally, its directional
    derivative along dX from the Daleckii-Krein formula."""
    theta, Q = np.linalg.eigh(X)
    ph = np.exp(-1j * theta)
    U = (Q * ph[..., None, :]) @ _dagger(Q)
    if dX is None:
        return U
    half = 0.5 * (theta[..., :, None] - theta[..., None, :])
    # divided difference of exp(-i t): -i exp(-i (a+b)/2) sinc((a-b)/2)
    F = -1j * np.exp(-0.5j * (theta[..., :, None] + theta[..., None, :])) * np.sinc(half / np.pi)
    dU = Q @ (F * (_dagger(Q) @ dX @ Q)) @ _dagger(Q)
    return U, dU


def _polar_with_derivative(A: np.ndarray, dA: np.ndarray | None):
    """Unitary polar factor W Z^H of A = W S Z^H and its derivative along dA."""
    W, s, Zh = np.linalg.svd(A)
    U = W @ Zh
    if dA is None:
        return U, None
    Z = _dagger(Zh)
    Om = _dagger(W) @ dA @ Z
    denom = s[..., :, None] + s[..., None, :]
    dU = W @ ((Om - _dagger(Om)) / denom) @ Zh
    return U, dU


@dataclass(frozen=True, eq=False)
class QPUnitary:
    """A quasi-periodic unitary family U(phi) on C^N.

    ``kind`` is one of
      * ``"identity"``
      * ``"fourier"``: explicit Fourier family ``family``
      * ``"exp"``: U = exp(-i X(phi)) with hermitian generator ``generator``
      * ``"product"``: U = U_1 U_2 ... U_m over ``factors``
      * ``"multiplication"``: Galerkin compression of the multiplication by
        exp(i eps b(x, phi)), made exactly unitary by taking its polar factor.
    """

    kind: str
    n_freq: int
    dim: int
    family: QPOperator | None = None
    generator: QPOperator | None = None
    factors: tuple = ()
    symbol: QPSymbol | None = None
    eps: float = 0.0
    basis: EigenBasis | None = field(default=None, repr=False)
    sign: float = 1.0

    # -- constructors -----------------------------------------------------
    @classmethod
    def identity(cls, n_freq: int, dim: int) -> "QPUnitary":
        return cls("identity", n_freq, dim)

    @classmethod
    def from_family(cls, family: QPOperator) -> "QPUnitary":
        return cls("fourier", family.n_freq, family.dim, family=family)

    @classmethod
    def exp(cls, generator: QPOperator) -> "QPUnitary":
        return cls("exp", generator.n_freq, generator.dim, generator=generator)

    @classmethod
    def multiplication(cls, b: QPSymbol, eps: float, basis: EigenBasis, sign: float = 1.0) -> "QPUnitary":
        return cls("multiplication", b.n_freq, basis.n_modes, symbol=b, eps=float(eps), basis=basis, sign=sign)

    @classmethod
    def product(cls, factors) -> "QPUnitary":
        flat = []
        for f in factors:
            if f.kind == "product":
                flat.extend(f.factors)
            elif f.kind != "identity":
                flat.append(f)
        if not flat:
            return cls.identity(factors[0].n_freq, factors[0].dim)
        if len(flat) == 1:
            return flat[0]
        return cls("product", flat[0].n_freq, flat[0].dim, factors=tuple(flat))

    def compose(self, other: "QPUnitary") -> "QPUnitary":
        """phi -> U_self(phi) U_other(phi)."""
        return QPUnitary.product([self, other])

    # -- structure --------------------------------------------------------
    @property
    def k_cutoff(self) -> int:
        """Nominal Fourier cutoff (of the family or of the generator)."""
        if self.kind == "fourier":
            return self.family.k_cutoff
        if self.kind == "exp":
            return self.generator.k_cutoff
        if self.kind == "product":
            return sum(f.k_cutoff for f in self.factors)
        if self.kind == "multiplication":
            return self.symbol.k_cutoff
        return 0

    def inverse(self) -> "QPUnitary":
        if self.kind == "identity":
            return self
        if self.kind == "fourier":
            return QPUnitary.from_family(self.family.adjoint())
        if self.kind == "exp":
            return QPUnitary.exp(-self.generator)
        if self.kind == "product":
            return QPUnitary("product", self.n_freq, self.dim, factors=tuple(f.inverse() for f in reversed(self.factors)))
        return QPUnitary.multiplication(self.symbol, self.eps, self.basis, sign=-self.sign)

    # -- evaluation -------------------------------------------------------
    def __call__(self, phi) -> np.ndarray:
        return self.evaluate(phi)

    def evaluate(self, phi) -> np.ndarray:
        return self._eval(_as_phases(phi, self.n_freq), None)[0]

    def evaluate_with_derivative(self, phi, omega):
        """(U(phi), omega . d_phi U(phi))."""
        return self._eval(_as_phases(phi, self.n_freq), np.asarray(omega, dtype=float))

    def _eval(self, phi: np.ndarray, omega):
        shape = phi.shape[:-1] + (self.dim, self.dim)
        if self.kind == "identity":
            U = np.broadcast_to(np.eye(self.dim, dtype=complex), shape).copy()
            return U, (None if omega is None else np.zeros(shape, dtype=complex))
        if self.kind == "fourier":
            U = self.family(phi)
            return U, (None if omega is None else self.family.derivative(omega)(phi))
        if self.kind == "exp":
            X = self.generator(phi)
            if omega is None:
                return expm_hermitian(X), None
            return expm_hermitian(X, self.generator.derivative(omega)(phi))
        if self.kind == "product":
            U, dU = self.factors[0]._eval(phi, omega)
            for f in self.factors[1:]:
                V, dV = f._eval(phi, omega)
                if omega is not None:
                    dU = dU @ V + U @ dV
                U = U @ V
            return U, dU
        return self._eval_multiplication(phi, omega)

    def _eval_multiplication(self, phi, omega):
        basis = self.basis
        x = basis.position_grid
        V = basis.eigenvectors
        flat = phi.reshape(-1, self.n_freq)
        Us, dUs = [], []
        for p in flat:
            b = self.symbol(x, p)
            e = np.exp(1j * self.sign * self.eps * b)
            A = V.T @ (e[:, None] * V)
            dA = None
            if omega is not None:
                db = self.symbol.phase_derivative(omega)(x, p)
                dA = V.T @ ((1j * self.sign * self.eps * db * e)[:, None] * V)
            U, dU = _polar_with_derivative(A, dA)
            Us.append(U)
            dUs.append(dU)
        shape = phi.shape[:-1] + (self.dim, self.dim)
        U = np.asarray(Us).reshape(shape)
        return U, (None if omega is None else np.asarray(dUs).reshape(shape))

    def unitarity_defect(self, n_samples: int = 20, seed: int = 0) -> float:
        rng = np.random.default_rng(seed)
        phis = rng.uniform(0.0, 2.0 * np.pi, size=(n_samples, self.n_freq))
        U = self.evaluate(phis)
        return float(np.abs(_dagger(U) @ U - np.eye(self.dim)).max())

    def to_fourier(self, k_cutoff: int, L: int | None = None) -> tuple[QPOperator, float]:
        """Fourier analysis on a phase grid; returns ``(family, tail_norm)``."""
        L = L or max(4 * k_cutoff, 2 * k_cutoff + 1)
        vals = self.evaluate(phase_grid(self.n_freq, L))
        return QPOperator.from_samples(vals, self.n_freq, k_cutoff)


def conjugate(
    H: QPOperator,
    U: QPUnitary,
    omega,
    cutoff: int | None = None,
    L: int | None = None,
    tol_tail: float = 1e-10,
    on_tail: str = "raise",
    return_tail: bool = False,
):
    """H_+ = U^{-1} (H U - i omega.d_phi U) by pointwise evaluation on a phase
    grid followed by Fourier analysis.

    ``cutoff`` defaults to H's cutoff plus twice the nominal cutoff of U.  The
    discarded Fourier mass is compared with ``tol_tail``: ``on_tail`` selects
    whether an excess raises :class:`TailError`, doubles the cutoff (up to
    three times) or is ignored.
    """
    if on_tail not in ("raise", "widen", "ignore"):
        raise ValueError(f"on_tail must be raise, widen or ignore, not {on_tail!r}")
    if H.n_freq != U.n_freq or H.dim != U.dim:
        raise ValueError("H and U act on different spaces")
    n = H.n_freq
    omega = np.asarray(omega, dtype=float)
    K = H.k_cutoff + 2 * U.k_cutoff if cutoff is None else cutoff
    fixed_L = L
    for attempt in range(4):
        Lg = fixed_L or max(4 * K, 2 * K + 1, 4)
        phis = phase_grid(n, Lg)
        Uv, dU = U.evaluate_with_derivative(phis, omega)
        Hv = H.sample(Lg) if Lg >= 2 * H.k_cutoff + 1 else H(phis)
        Ud = _dagger(Uv)
        vals = Ud @ Hv @ Uv - 1j * (Ud @ dU)
        coeffs, tail = analyze_samples(vals, n, K)
        out = QPOperator(hermitian_fill(coeffs, n), n)
        if tail <= tol_tail or on_tail == "ignore":
            break
        if on_tail == "raise" or attempt == 3:
            raise TailError(
                f"conjugation discarded Fourier mass {tail:.3e} > {tol_tail:.1e} at cutoff {K}; "
                "widen the cutoff or refine the phase grid"
            )
        K *= 2
    return (out, tail) if return_tail else out


# --- magnetic gauge -------------------------------------------------------------


def _primitive_from_zero(x: np.ndarray, f: np.ndarray) -> np.ndarray:
    """int_0^x f by composite Simpson, anchored at the centre node x = 0."""
    c = x.size // 2
    if x[c] != 0.0:
        raise ValueError("grid must contain x = 0 at its centre")

    def cum(y, t):
        if np.iscomplexobj(y):
            return cum(y.real, t) + 1j * cum(y.imag, t)
        return cumulative_simpson(y, x=t, initial=0.0)

    out = np.zeros_like(f)
    out[c:] = cum(f[c:], x[c:])
    # int_0^{-u} f(x) dx = -int_0^u f(-y) dy
    out[: c + 1] = -cum(f[c::-1], -x[c::-1])[::-1]
    return out


def gauge_b(W1: QPSymbol, grid) -> QPSymbol:
    """b(x, phi) = int_0^x W1(y, phi) dy, coefficient by coefficient."""
    x = np.asarray(getattr(grid, "x", grid), dtype=float)
    terms = {}
    for k, f in W1.terms.items():
        terms[k] = TabulatedFunction(x, _primitive_from_zero(x, np.asarray(f(x), dtype=complex)))
    order = max(W1.declared_order + 1.0, 0.0) if W1.terms else -np.inf
    return QPSymbol(terms, declared_order=order, n_freq=W1.n_freq, label=f"int {W1.label}")


def magnetic_component(H: QPOperator) -> QPOperator:
    """The family phi -> i Im H(phi) in the real eigenbasis.

    Multiplication operators and H0 are real symmetric there; the Weyl
    quantization of xi W(x) is purely imaginary.
    """
    n = H.n_freq
    flipped = H.coeffs[(slice(None, None, -1),) * n]
    return QPOperator(0.5 * (H.coeffs - np.conj(flipped)), n)


def magnetic_norm(H: QPOperator) -> float:
    return magnetic_component(H).weighted_norm(0.0)


@dataclass
class GaugeResult:
    H: QPOperator
    H1: QPOperator
    H1_expected: QPOperator
    W0_gauged: QPSymbol
    b: QPSymbol
    U: QPUnitary
    magnetic_before: float
    magnetic_after: float
    expected_deviation: float
    tail: float
    b_boundary: float

    @property
    def magnetic_ratio(self) -> float:
        # a magnetic part at rounding level means there was nothing to remove
        if self.magnetic_before <= 1e-12 * self.H.weighted_norm(0.0):
            return 0.0
        return self.magnetic_after / self.magnetic_before


def _gauged_block(basis: EigenBasis, W0, W1, b, db, eps, p):
    """<e^{i eps b} v_i, H(p) e^{i eps b} v_j> + eps <v_i, omega.d_phi b v_j>
    evaluated on the grid for one phase p."""
    x = basis.position_grid
    V = basis.eigenvectors
    e = np.exp(1j * eps * b(x, p))
    psi = e[:, None] * V
    w1 = W1(x, p) if not W1.is_zero() else 0.0
    phi = -1j * basis.grid.apply_derivative(psi) - eps * (w1 * psi if np.ndim(w1) == 0 else w1[:, None] * psi)
    kinetic = _dagger(phi) @ phi
    pot = basis.spec(x) + eps * (W0(x, p) if not W0.is_zero() else 0.0) + eps * db(x, p)
    return kinetic + V.T @ (pot[:, None] * V)


def apply_gauge(
    W0: QPSymbol,
    W1: QPSymbol,
    eps: float,
    omega,
    basis: EigenBasis,
    k_cutoff: int | None = None,
    L: int | None = None,
) -> GaugeResult:
    """Remove the magnetic coupling with U1 = multiplication by exp(i eps b).

    The conjugation is performed on the spatial grid, where U1 is exactly a
    unimodular multiplication, and then projected onto the retained modes.
    The expected outcome is diag(lambda) + eps Op(W0 + omega.d_phi b).
    """
    if W1.declared_order > basis.ell:
        raise HypothesisViolation(
            f"beta1 = {W1.declared_order} exceeds ell = {basis.ell}: the gauge would not preserve the Sobolev scale"
        )
    omega = np.asarray(omega, dtype=float)
    n = W0.n_freq
    H = assemble_hamiltonian(eps, W0, W1, basis)
    b = gauge_b(W1, basis.grid)
    db = b.phase_derivative(omega)
    W0g = W0 + db if not W0.is_zero() else db
    if W1.is_zero():
        W0g = W0
    K = max(W0.k_cutoff, W1.k_cutoff) if k_cutoff is None else k_cutoff
    H1_expected = QPOperator.constant(np.diag(basis.eigenvalues), n, K)
    if not W0g.is_zero():
        H1_expected = H1_expected + eps * quantize_multiplication(W0g, basis, K)
    U = QPUnitary.multiplication(b, eps, basis)
    if W1.is_zero():
        return GaugeResult(
            H=H, H1=H, H1_expected=H1_expected, W0_gauged=W0g, b=b,
            U=QPUnitary.identity(n, basis.n_modes),
            magnetic_before=magnetic_norm(H), magnetic_after=magnetic_norm(H),
            expected_deviation=float(np.abs((H - H1_expected).coeffs).max()), tail=0.0, b_boundary=0.0,
        )
    Lg = L or max(4 * K, 2 * K + 1)
    phis = phase_grid(n, Lg).reshape(-1, n)
    blocks = np.array([_gauged_block(basis, W0, W1, b, db, eps, p) for p in phis])
    blocks = blocks.reshape((Lg,) * n + blocks.shape[-2:])
    coeffs, tail = analyze_samples(blocks, n, K)
    H1 = QPOperator(hermitian_fill(coeffs, n), n)
    x = basis.position_grid
    bvals = b.coefficient_values(x)
    b_boundary = float(np.abs(bvals[..., [0, -1]]).sum(axis=tuple(range(n))).max())
    return GaugeResult(
        H=H,
        H1=H1,
        H1_expected=H1_expected,
        W0_gauged=W0g,
        b=b,
        U=U,
        magnetic_before=magnetic_norm(H),
        magnetic_after=magnetic_norm(H1),
        expected_deviation=float(np.abs((H1 - H1_expected).coeffs).max()),
        tail=tail,
        b_boundary=b_boundary,
    )


def sobolev_operator_norm(A: np.ndarray, basis: EigenBasis, s_in: float, s_out: float) -> float:
    """Operator norm of A from H^{s_in} to H^{s_out} on the retained modes."""
    w_in = sobolev_weights(basis, s_in).weights
    w_out = sobolev_weights(basis, s_out).weights
    return float(np.linalg.norm(w_out[:, None] * np.asarray(A) / w_in[None, :], ord=2))
