"""Quasi-periodic matrix families H(phi) = sum_k C_k exp(i k.phi), phi in T^n.

Coefficients live in a dense array of shape ``(2K+1,)*n + (N, N)``; index
``K`` along each frequency axis is k = 0.  Products and any nonlinear
operation go through uniform phase grids and the FFT.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["QPOperator", "phase_grid", "fourier_indices", "k_norm", "analyze_samples", "hermitian_fill"]


def phase_grid(n: int, L: int) -> np.ndarray:
    """Uniform grid on T^n, shape ``(L,)*n + (n,)``."""
    axes = [2.0 * np.pi * np.arange(L) / L] * n
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def fourier_indices(n: int, K: int) -> np.ndarray:
    """Integer vectors k with |k|_inf <= K, shape ``(2K+1,)*n + (n,)``."""
    r = np.arange(-K, K + 1)
    return np.stack(np.meshgrid(*([r] * n), indexing="ij"), axis=-1)


def k_norm(k: np.ndarray, ord: int = 1) -> np.ndarray:
    k = np.asarray(k)
    if ord == 1:
        return np.abs(k).sum(axis=-1)
    return np.abs(k).max(axis=-1)


def _embed_index(K: int, L: int, n: int):
    idx = np.arange(-K, K + 1) % L
    return tuple(np.meshgrid(*([idx] * n), indexing="ij"))


def _synthesize(coeffs: np.ndarray, n: int, L: int) -> np.ndarray:
    K = (coeffs.shape[0] - 1) // 2
    if L < 2 * K + 1:
        raise ValueError(f"phase grid L={L} too small for cutoff K={K}")
    full = np.zeros((L,) * n + coeffs.shape[n:], dtype=complex)
    full[_embed_index(K, L, n)] = coeffs
    return np.fft.ifftn(full, axes=tuple(range(n))) * float(L) ** n


def analyze_samples(values: np.ndarray, n: int, K: int):
    """Fourier coefficients |k|_inf <= K of phase-grid samples plus the Frobenius
    mass of everything discarded (the tail)."""
    L = values.shape[0]
    if L < 2 * K + 1:
        raise ValueError(f"phase grid L={L} too small for cutoff K={K}")
    full = np.fft.fftn(values, axes=tuple(range(n))) / float(L) ** n
    index = _embed_index(K, L, n)
    coeffs = full[index].copy()
    full[index] = 0.0
    tail = float(np.sqrt(np.sum(np.abs(full) ** 2)))
    return coeffs, tail


def hermitian_fill(coeffs: np.ndarray, n: int) -> np.ndarray:
    """Average C_k with C_{-k}^dagger so that the family is exactly hermitian."""
    flipped = coeffs[(slice(None, None, -1),) * n]
    return 0.5 * (coeffs + np.conj(np.swapaxes(flipped, -1, -2)))


@dataclass(frozen=True, eq=False)
class QPOperator:
    """Finite Fourier family of N x N matrices on the torus T^n."""

    coeffs: np.ndarray
    n_freq: int

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        n = self.n_freq
        if c.ndim != n + 2 or len(set(c.shape[:n])) != 1 or c.shape[0] % 2 == 0:
            raise ValueError(f"coefficient array of shape {c.shape} is not a valid n={n} family")
        if c.shape[-1] != c.shape[-2]:
            raise ValueError("coefficients must be square matrices")
        c = np.array(c)
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    # -- construction -----------------------------------------------------
    @classmethod
    def zeros(cls, n_freq: int, k_cutoff: int, dim: int) -> "QPOperator":
        return cls(np.zeros((2 * k_cutoff + 1,) * n_freq + (dim, dim), dtype=complex), n_freq)

    @classmethod
    def constant(cls, matrix, n_freq: int, k_cutoff: int = 0) -> "QPOperator":
        m = np.asarray(matrix, dtype=complex)
        c = np.zeros((2 * k_cutoff + 1,) * n_freq + m.shape, dtype=complex)
        c[(k_cutoff,) * n_freq] = m
        return cls(c, n_freq)

    @classmethod
    def from_dict(cls, terms: dict, n_freq: int, dim: int, k_cutoff: int | None = None) -> "QPOperator":
        K = max((max(abs(int(v)) for v in k) for k in terms), default=0)
        K = K if k_cutoff is None else k_cutoff
        c = np.zeros((2 * K + 1,) * n_freq + (dim, dim), dtype=complex)
        for k, m in terms.items():
            if len(k) != n_freq:
                raise ValueError(f"index {k} has wrong length for n={n_freq}")
            if max(abs(int(v)) for v in k) > K:
                raise ValueError(f"index {k} exceeds cutoff {K}")
            c[tuple(int(v) + K for v in k)] += np.asarray(m, dtype=complex)
        return cls(c, n_freq)

    @classmethod
    def from_samples(cls, values: np.ndarray, n_freq: int, k_cutoff: int, hermitian: bool = False):
        """Returns ``(operator, tail_norm)``."""
        coeffs, tail = analyze_samples(values, n_freq, k_cutoff)
        if hermitian:
            coeffs = hermitian_fill(coeffs, n_freq)
        return cls(coeffs, n_freq), tail

    # -- shape ------------------------------------------------------------
    @property
    def k_cutoff(self) -> int:
        return (self.coeffs.shape[0] - 1) // 2

    @property
    def dim(self) -> int:
        return self.coeffs.shape[-1]

    def k_vectors(self) -> np.ndarray:
        return fourier_indices(self.n_freq, self.k_cutoff)

    def coeff(self, k) -> np.ndarray:
        K = self.k_cutoff
        k = tuple(int(v) for v in k)
        if max(abs(v) for v in k) > K:
            return np.zeros((self.dim, self.dim), dtype=complex)
        return self.coeffs[tuple(v + K for v in k)]

    def average(self) -> np.ndarray:
        return self.coeff((0,) * self.n_freq)

    def items(self, tol: float = 0.0):
        """Yield ``(k, C_k)`` for coefficients with max modulus above ``tol``."""
        K = self.k_cutoff
        for idx in itertools.product(range(2 * K + 1), repeat=self.n_freq):
            c = self.coeffs[idx]
            if np.abs(c).max(initial=0.0) > tol:
                yield tuple(i - K for i in idx), c

    def support(self, tol: float = 0.0) -> int:
        """Largest |k|_inf carrying a coefficient above ``tol``."""
        return max((max(abs(v) for v in k) for k, _ in self.items(tol)), default=0)

    def widen(self, K: int) -> "QPOperator":
        if K < self.k_cutoff:
            return self.truncate(K)
        pad = K - self.k_cutoff
        width = [(pad, pad)] * self.n_freq + [(0, 0), (0, 0)]
        return QPOperator(np.pad(self.coeffs, width), self.n_freq)

    def truncate(self, K: int) -> "QPOperator":
        if K >= self.k_cutoff:
            return self.widen(K)
        s = slice(self.k_cutoff - K, self.k_cutoff + K + 1)
        return QPOperator(self.coeffs[(s,) * self.n_freq], self.n_freq)

    def tail_norm(self, K: int) -> float:
        """Frobenius mass of coefficients with |k|_inf > K."""
        if K >= self.k_cutoff:
            return 0.0
        s = slice(self.k_cutoff - K, self.k_cutoff + K + 1)
        rest = self.coeffs.copy()
        rest[(s,) * self.n_freq] = 0.0
        return float(np.sqrt(np.sum(np.abs(rest) ** 2)))

    # -- evaluation -------------------------------------------------------
    def __call__(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        n = self.n_freq
        if n == 1 and (phi.ndim == 0 or phi.shape[-1] != 1):
            phi = phi[..., None]
        if phi.shape[-1] != n:
            raise ValueError(f"phase of shape {phi.shape} does not match n={n}")
        ks = self.k_vectors().reshape(-1, n)
        flat = self.coeffs.reshape(ks.shape[0], -1)
        live = np.flatnonzero(np.abs(flat).max(axis=1) > 0)
        if live.size == 0:
            return np.zeros(phi.shape[:-1] + (self.dim, self.dim), dtype=complex)
        ph = np.exp(1j * (phi.reshape(-1, n) @ ks[live].T))
        out = ph @ flat[live]
        return out.reshape(phi.shape[:-1] + (self.dim, self.dim))

    def sample(self, L: int) -> np.ndarray:
        """Values on :func:`phase_grid` ``(n, L)``."""
        return _synthesize(self.coeffs, self.n_freq, L)

    # -- algebra ----------------------------------------------------------
    def _aligned(self, other: "QPOperator"):
        if other.n_freq != self.n_freq or other.dim != self.dim:
            raise ValueError("incompatible quasi-periodic operators")
        K = max(self.k_cutoff, other.k_cutoff)
        return self.widen(K), other.widen(K)

    def __add__(self, other):
        if isinstance(other, QPOperator):
            a, b = self._aligned(other)
            return QPOperator(a.coeffs + b.coeffs, self.n_freq)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, QPOperator):
            a, b = self._aligned(other)
            return QPOperator(a.coeffs - b.coeffs, self.n_freq)
        return NotImplemented

    def __neg__(self):
        return QPOperator(-self.coeffs, self.n_freq)

    def __mul__(self, scalar):
        if np.isscalar(scalar):
            return QPOperator(self.coeffs * scalar, self.n_freq)
        return NotImplemented

    __rmul__ = __mul__

    def __matmul__(self, other: "QPOperator") -> "QPOperator":
        """Pointwise product; the result carries the exact cutoff K1 + K2."""
        if not isinstance(other, QPOperator):
            return NotImplemented
        K = self.k_cutoff + other.k_cutoff
        L = 2 * K + 1
        prod = self.sample(L) @ other.sample(L)
        out, _ = QPOperator.from_samples(prod, self.n_freq, K)
        return out

    def adjoint(self) -> "QPOperator":
        """The family phi -> H(phi)^dagger."""
        flipped = self.coeffs[(slice(None, None, -1),) * self.n_freq]
        return QPOperator(np.conj(np.swapaxes(flipped, -1, -2)), self.n_freq)

    def derivative(self, omega) -> "QPOperator":
        """omega . d/dphi, i.e. C_k -> i (omega . k) C_k."""
        omega = np.asarray(omega, dtype=float)
        wk = self.k_vectors() @ omega
        return QPOperator(self.coeffs * (1j * wk)[..., None, None], self.n_freq)

    def diagonal(self) -> np.ndarray:
        """Diagonal entries of every coefficient, shape ``(2K+1,)*n + (N,)``."""
        return np.diagonal(self.coeffs, axis1=-2, axis2=-1).copy()

    def offdiagonal(self) -> "QPOperator":
        c = self.coeffs.copy()
        idx = np.arange(self.dim)
        c[..., idx, idx] = 0.0
        return QPOperator(c, self.n_freq)

    def diagonal_part(self) -> "QPOperator":
        c = np.zeros_like(self.coeffs)
        idx = np.arange(self.dim)
        c[..., idx, idx] = self.coeffs[..., idx, idx]
        return QPOperator(c, self.n_freq)

    # -- checks and norms -------------------------------------------------
    def hermitian_defect(self) -> float:
        """max |C_{-k} - C_k^dagger| (zero for a hermitian family)."""
        return float(np.abs(self.coeffs - self.adjoint().coeffs).max())

    def pointwise_hermitian_defect(self, n_samples: int = 100, seed: int = 0) -> float:
        rng = np.random.default_rng(seed)
        phis = rng.uniform(0.0, 2.0 * np.pi, size=(n_samples, self.n_freq))
        H = self(phis)
        return float(np.abs(H - np.conj(np.swapaxes(H, -1, -2))).max())

    def weighted_norm(self, p: float) -> float:
        """sum_k ||C_k||_2 (1 + |k|_1)^p with the spectral norm."""
        flat = self.coeffs.reshape(-1, self.dim, self.dim)
        w = (1.0 + k_norm(self.k_vectors().reshape(-1, self.n_freq))) ** p
        live = np.flatnonzero(np.abs(flat).max(axis=(1, 2)) > 0)
        if live.size == 0:
            return 0.0
        norms = np.linalg.norm(flat[live], ord=2, axis=(1, 2))
        return float(np.sum(norms * w[live]))

    def max_abs(self) -> float:
        return float(np.abs(self.coeffs).max(initial=0.0))

    def allclose(self, other: "QPOperator", atol: float) -> bool:
        a, b = self._aligned(other)
        return bool(np.abs(a.coeffs - b.coeffs).max() <= atol)

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        np.savez(Path(path), coeffs=self.coeffs, n_freq=self.n_freq)

    @classmethod
    def load(cls, path) -> "QPOperator":
        with np.load(path) as data:
            return cls(data["coeffs"], int(data["n_freq"]))
