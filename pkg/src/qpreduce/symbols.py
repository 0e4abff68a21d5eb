"""Quasi-periodic perturbation symbols W(x, phi) and their quantization.

A :class:`QPSymbol` is a trigonometric polynomial in phi whose Fourier
coefficients are functions of x.  Quantization happens on the spatial grid
of an :class:`~qpreduce.spectral_basis.EigenBasis` and is then projected to
the retained modes, so every matrix produced here equals the projection of
the corresponding grid operator.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.interpolate import CubicSpline

from .qpoperator import QPOperator, fourier_indices, hermitian_fill
from .spectral_basis import EigenBasis

__all__ = [
    "QPSymbol",
    "QPOperator",
    "SymbolClassReport",
    "HypothesisViolation",
    "TabulatedFunction",
    "japanese_bracket",
    "trig_modes",
    "check_symbol_class",
    "quantize_multiplication",
    "quantize_magnetic",
    "assemble_hamiltonian",
    "effective_beta",
    "check_hypotheses",
    "symbol_from_preset",
]


class HypothesisViolation(ValueError):
    """The perturbation orders fall outside beta < 2 ell - 1, beta_1 <= ell."""


def japanese_bracket(x):
    return np.sqrt(1.0 + np.asarray(x, dtype=float) ** 2)


class TabulatedFunction:
    """Grid-tabulated function; exact at the nodes, cubic spline in between."""

    def __init__(self, x: np.ndarray, values: np.ndarray):
        self.x = np.asarray(x, dtype=float)
        self.values = np.asarray(values)
        self._re = CubicSpline(self.x, self.values.real)
        self._im = CubicSpline(self.x, self.values.imag) if np.iscomplexobj(self.values) else None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape == self.x.shape and np.array_equal(x, self.x):
            return self.values.copy()
        out = self._re(x)
        return out + 1j * self._im(x) if self._im is not None else out


def trig_modes(n: int, const: float = 0.0, cos: Mapping | None = None, sin: Mapping | None = None) -> dict:
    """Fourier dict {k: a_k} of const + sum a cos(k.phi) + sum b sin(k.phi)."""
    modes: dict = {}

    def add(k, a):
        modes[k] = modes.get(k, 0.0) + a

    if const:
        add((0,) * n, complex(const))
    for k, a in (cos or {}).items():
        k = tuple(int(v) for v in k)
        add(k, a / 2.0)
        add(tuple(-v for v in k), a / 2.0)
    for k, b in (sin or {}).items():
        k = tuple(int(v) for v in k)
        add(k, b / 2j)
        add(tuple(-v for v in k), -b / 2j)
    return {k: v for k, v in modes.items() if v != 0}


@dataclass(frozen=True, eq=False)
class QPSymbol:
    """W(x, phi) = sum_k f_k(x) exp(i k.phi) with f_{-k} = conj(f_k)."""

    terms: dict
    declared_order: float
    n_freq: int
    label: str = ""

    def __post_init__(self):
        terms = {tuple(int(v) for v in k): f for k, f in self.terms.items()}
        for k in terms:
            if len(k) != self.n_freq:
                raise ValueError(f"Fourier index {k} does not match n={self.n_freq}")
            if tuple(-v for v in k) not in terms:
                raise ValueError(f"missing conjugate partner of mode {k}: W would not be real")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def zero(cls, n_freq: int) -> "QPSymbol":
        return cls({}, declared_order=-np.inf, n_freq=n_freq, label="0")

    @classmethod
    def separable(cls, profile: Callable, modes: Mapping, order: float, n_freq: int, label: str = "") -> "QPSymbol":
        """profile(x) * sum_k a_k e^{i k.phi}; ``modes`` must be conjugate-symmetric."""
        terms = {}
        for k, a in modes.items():
            terms[tuple(k)] = (lambda x, a=complex(a): a * np.asarray(profile(x), dtype=complex))
        return cls(terms, declared_order=float(order), n_freq=n_freq, label=label)

    @property
    def k_cutoff(self) -> int:
        return max((max(abs(v) for v in k) for k in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    def coefficient_values(self, x, k_cutoff: int | None = None) -> np.ndarray:
        """Array ``(2K+1,)*n + x.shape`` of f_k(x)."""
        x = np.asarray(x, dtype=float)
        K = self.k_cutoff if k_cutoff is None else k_cutoff
        out = np.zeros((2 * K + 1,) * self.n_freq + x.shape, dtype=complex)
        for k, f in self.terms.items():
            out[tuple(v + K for v in k)] += f(x)
        return out

    def __call__(self, x, phi) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        total = np.zeros(x.shape, dtype=complex)
        for k, f in self.terms.items():
            total = total + f(x) * np.exp(1j * np.dot(k, phi))
        return total.real

    def reality_defect(self, x) -> float:
        return max(
            (float(np.abs(f(x) - np.conj(self.terms[tuple(-v for v in k)](x))).max()) for k, f in self.terms.items()),
            default=0.0,
        )

    def __mul__(self, other: "QPSymbol") -> "QPSymbol":
        if not isinstance(other, QPSymbol):
            return NotImplemented
        terms: dict = {}
        for (k1, f1), (k2, f2) in itertools.product(self.terms.items(), other.terms.items()):
            k = tuple(a + b for a, b in zip(k1, k2))
            prev = terms.get(k)
            terms[k] = (
                (lambda x, f1=f1, f2=f2, prev=prev: f1(x) * f2(x) + (prev(x) if prev else 0.0))
            )
        return QPSymbol(terms, self.declared_order + other.declared_order, self.n_freq, f"({self.label})*({other.label})")

    def __add__(self, other: "QPSymbol") -> "QPSymbol":
        if not isinstance(other, QPSymbol):
            return NotImplemented
        terms = dict(self.terms)
        for k, f in other.terms.items():
            prev = terms.get(k)
            terms[k] = f if prev is None else (lambda x, f=f, prev=prev: prev(x) + f(x))
        return QPSymbol(terms, max(self.declared_order, other.declared_order), self.n_freq, f"{self.label}+{other.label}")

    def scaled(self, c: float) -> "QPSymbol":
        terms = {k: (lambda x, f=f: c * f(x)) for k, f in self.terms.items()}
        return QPSymbol(terms, self.declared_order, self.n_freq, self.label)

    def phase_derivative(self, omega) -> "QPSymbol":
        """omega . d/dphi W."""
        omega = np.asarray(omega, dtype=float)
        terms = {}
        for k, f in self.terms.items():
            wk = float(np.dot(omega, k))
            if wk != 0.0:
                terms[k] = lambda x, f=f, wk=wk: 1j * wk * f(x)
        return QPSymbol(terms, self.declared_order, self.n_freq, f"omega.d({self.label})")


# --- symbol class S^m_V --------------------------------------------------------


@dataclass
class SymbolClassReport:
    order: float
    constants: np.ndarray
    refined_constants: np.ndarray
    extended_constants: np.ndarray
    halfwidth: float
    passed: bool
    failures: list = field(default_factory=list)

    def summary(self) -> str:
        status = "pass" if self.passed else "fail"
        cs = ", ".join(f"C{k}={c:.3g}" for k, c in enumerate(self.constants))
        return f"S^{self.order:g}_V on |x|<={self.halfwidth:g}: {status} ({cs})"


def _class_constants(W: QPSymbol, m: float, k_max: int, x: np.ndarray, phis: np.ndarray):
    vals = np.stack([W(x, p) for p in phis])
    consts = np.empty(k_max + 1)
    sites = np.empty(k_max + 1)
    bracket = japanese_bracket(x)
    deriv = vals
    trim = slice(k_max + 1, x.size - k_max - 1)
    for k in range(k_max + 1):
        if k > 0:
            deriv = np.gradient(deriv, x, axis=1, edge_order=2)
        scaled = np.abs(deriv[:, trim]) * bracket[trim] ** (k - m)
        i = np.unravel_index(np.argmax(scaled), scaled.shape)
        consts[k] = scaled[i]
        sites[k] = x[trim][i[1]]
    return consts, sites


def check_symbol_class(
    W: QPSymbol,
    m: float,
    k_max: int = 4,
    grid=None,
    n_phases: int = 8,
    growth_tol: float = 0.1,
    seed: int = 0,
    noise_floor: float = 1e-6,
) -> SymbolClassReport:
    """Estimate C_k = max |d^k W / dx^k| <x>^(k - m) for k = 0..k_max.

    Derivatives come from nested finite differences.  The class test is
    passed when every C_k is finite and changes by at most ``growth_tol``
    (relative) both when the grid spacing is halved and when the domain is
    doubled; a symbol growing faster than <x>^(m-k) fails the latter.
    Constants below ``noise_floor * max(1, C_0)`` (or the rounding level of
    the k-fold differences, if larger) count as zero.
    """
    if k_max > 6:
        raise ValueError("k_max > 6: nested finite differences are unreliable")
    if grid is None:
        x = np.linspace(-10.0, 10.0, 801)
    else:
        x = np.asarray(getattr(grid, "x", grid), dtype=float)
    L = float(np.abs(x).max())
    h = float(x[1] - x[0])
    rng = np.random.default_rng(seed)
    phis = np.vstack([np.zeros(W.n_freq), rng.uniform(0, 2 * np.pi, size=(n_phases - 1, W.n_freq))])
    base, _ = _class_constants(W, m, k_max, x, phis)
    x_fine = np.linspace(-L, L, 2 * (x.size - 1) + 1)
    fine, _ = _class_constants(W, m, k_max, x_fine, phis)
    n_ext = int(round(2 * L / h)) * 2 + 1
    x_ext = np.linspace(-2 * L, 2 * L, n_ext)
    ext, ext_sites = _class_constants(W, m, k_max, x_ext, phis)
    failures = []
    # derivatives that vanish identically show up as rounding noise of
    # size ~ 2^k eps / h^k in the k-fold differences
    h_fine = float(x_fine[1] - x_fine[0])
    size = max(1.0, float(np.nanmax(ext[:1])))
    for k in range(k_max + 1):
        if not (np.isfinite(base[k]) and np.isfinite(fine[k]) and np.isfinite(ext[k])):
            failures.append((k, float(ext_sites[k]), "non-finite"))
            continue
        floor = size * max(noise_floor, 1e3 * 2**k * np.finfo(float).eps / h_fine**k)
        if max(base[k], fine[k], ext[k]) <= floor:
            continue
        scale = max(base[k], floor)
        if abs(fine[k] - base[k]) > growth_tol * scale:
            failures.append((k, float(ext_sites[k]), "unstable under refinement"))
        elif ext[k] > (1.0 + growth_tol) * scale:
            failures.append((k, float(ext_sites[k]), "grows faster than <x>^(m-k)"))
    return SymbolClassReport(
        order=float(m),
        constants=base,
        refined_constants=fine,
        extended_constants=ext,
        halfwidth=L,
        passed=not failures,
        failures=failures,
    )


# --- quantization --------------------------------------------------------------


def _hermitian_coeffs(values_fn, K: int, n: int, dim: int) -> np.ndarray:
    coeffs = np.zeros((2 * K + 1,) * n + (dim, dim), dtype=complex)
    for k in itertools.product(range(-K, K + 1), repeat=n):
        if k < tuple(-v for v in k):
            continue  # filled from the partner below
        c = values_fn(k)
        if c is None:
            continue
        coeffs[tuple(v + K for v in k)] = c
        coeffs[tuple(-v + K for v in k)] = np.conj(c.T)
    if K >= 0:
        z = (K,) * n
        coeffs[z] = 0.5 * (coeffs[z] + np.conj(coeffs[z].T))
    return coeffs


def quantize_multiplication(W: QPSymbol, basis: EigenBasis, k_cutoff: int | None = None) -> QPOperator:
    """C_k = <v_i, f_k v_j> by grid quadrature."""
    x = basis.position_grid
    K = W.k_cutoff if k_cutoff is None else k_cutoff
    V = basis.eigenvectors

    def block(k):
        f = W.terms.get(k)
        if f is None:
            return None
        return V.T @ (np.asarray(f(x))[:, None] * V)

    return QPOperator(_hermitian_coeffs(block, K, W.n_freq, basis.n_modes), W.n_freq)


def quantize_magnetic(W1: QPSymbol, basis: EigenBasis, k_cutoff: int | None = None) -> QPOperator:
    """Weyl quantization of xi W1(x): (P W + W P) / 2 with P = -i d/dx on the grid."""
    x = basis.position_grid
    K = W1.k_cutoff if k_cutoff is None else k_cutoff
    V = basis.eigenvectors
    DV = basis.grid.apply_derivative(V)

    def block(k):
        f = W1.terms.get(k)
        if f is None:
            return None
        A = (np.asarray(f(x))[:, None] * V).T @ DV  # <v_i, f D v_j>
        # D antisymmetric: <v_i, D f v_j> = -<D v_i, f v_j> = -A^T
        return -0.5j * (A - A.T)

    return QPOperator(_hermitian_coeffs(block, K, W1.n_freq, basis.n_modes), W1.n_freq)


def assemble_hamiltonian(
    eps: float,
    W0: QPSymbol,
    W1: QPSymbol,
    basis: EigenBasis,
    k_cutoff: int | None = None,
) -> QPOperator:
    """(-i d/dx - eps W1)^2 + V + eps W0 in the eigenbasis of H0.

    Expanded as diag(lambda) - 2 eps Op(xi W1) + eps^2 W1^2 + eps W0.
    """
    if abs(eps) >= 1:
        raise ValueError("|eps| must be < 1")
    if W0.n_freq != W1.n_freq:
        raise ValueError("W0 and W1 live on tori of different dimension")
    n = W0.n_freq
    needed = max(W0.k_cutoff, 2 * W1.k_cutoff)
    K = needed if k_cutoff is None else k_cutoff
    if K < needed:
        raise ValueError(f"k_cutoff={K} cannot hold the eps^2 W1^2 term (needs {needed})")
    H = QPOperator.constant(np.diag(basis.eigenvalues), n, K)
    if eps == 0:
        return H
    if not W0.is_zero():
        H = H + eps * quantize_multiplication(W0, basis, K)
    if not W1.is_zero():
        H = H - (2.0 * eps) * quantize_magnetic(W1, basis, K)
        H = H + eps**2 * quantize_multiplication(W1 * W1, basis, K)
    return H


# --- hypotheses -----------------------------------------------------------------


def effective_beta(beta0: float, beta1: float) -> float:
    """beta = max(beta0, [beta1 + 1]) with [a] = max(a, 0)."""
    return max(beta0, max(beta1 + 1.0, 0.0))


def check_hypotheses(ell: float, beta0: float, beta1: float) -> float:
    """Raise unless beta < 2 ell - 1 and beta1 <= ell; returns beta."""
    beta = effective_beta(beta0, beta1)
    if beta1 > ell:
        raise HypothesisViolation(f"beta1 = {beta1} exceeds ell = {ell}")
    if not beta < 2.0 * ell - 1.0:
        raise HypothesisViolation(f"beta = max(beta0, [beta1+1]) = {beta} is not < 2 ell - 1 = {2 * ell - 1}")
    return beta


# --- presets --------------------------------------------------------------------

_PROFILES = {
    "bracket_power": lambda p: ((lambda x: japanese_bracket(x) ** p["beta"]), p["beta"]),
    "odd_bracket": lambda p: (
        (lambda x: np.asarray(x, dtype=float) * japanese_bracket(x) ** (p["beta"] - 1.0)),
        p["beta"],
    ),
    "power": lambda p: ((lambda x: np.asarray(x, dtype=float) ** int(p["degree"])), float(p["degree"])),
    "cos": lambda p: ((lambda x: np.cos(p.get("scale", 1.0) * np.asarray(x, dtype=float))), 0.0),
    "sin": lambda p: ((lambda x: np.sin(p.get("scale", 1.0) * np.asarray(x, dtype=float))), 0.0),
    "constant": lambda p: ((lambda x: np.ones_like(np.asarray(x, dtype=float))), 0.0),
}


def symbol_from_preset(block: Mapping | None, n_freq: int) -> QPSymbol:
    """Build a separable symbol from a config block.

    ``{"form": "bracket_power", "beta": 2.5, "amplitude": 1.0,
    "const": 0.5, "cos": [[1, 0]], "sin": [[0, 1]]}``; ``cos``/``sin`` are lists
    of mode vectors (optionally ``[k, amplitude]`` pairs).  ``form: zero`` or a
    missing block gives W = 0.
    """
    if not block or block.get("form", "zero") == "zero":
        return QPSymbol.zero(n_freq)
    form = block["form"]
    if form not in _PROFILES:
        raise ValueError(f"unknown symbol form {form!r}")
    profile, order = _PROFILES[form](block)
    amp = float(block.get("amplitude", 1.0))

    def parse(entries):
        out = {}
        for e in entries or []:
            if len(e) == 2 and isinstance(e[0], (list, tuple)):
                out[tuple(e[0])] = float(e[1])
            else:
                out[tuple(e)] = 1.0
        return out

    modes = trig_modes(n_freq, const=float(block.get("const", 0.0)), cos=parse(block.get("cos")), sin=parse(block.get("sin")))
    modes = {k: amp * a for k, a in modes.items()}
    if not modes:
        return QPSymbol.zero(n_freq)
    order = float(block.get("order", order))
    return QPSymbol.separable(profile, modes, order, n_freq, label=form)
