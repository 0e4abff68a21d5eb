"""Unperturbed operator H0 = -d^2/dx^2 + V(x) on a symmetric grid.

Builds the discretized operator, its lowest eigenpairs, the Sobolev scale
attached to H0 and a couple of classical-mechanics helpers (orbit period and
orbit averages of the Hamiltonian flow of xi^2 + V(x)).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, optimize

__all__ = [
    "PotentialSpec",
    "DiscretizationParams",
    "Grid",
    "EigenBasis",
    "SobolevWeights",
    "InvariantViolation",
    "make_grid",
    "build_h0",
    "eigendecompose",
    "build_basis",
    "fit_eigenvalue_exponent",
    "sobolev_weights",
    "sobolev_norm",
    "turning_point",
    "classical_period",
    "flow_average",
]


class InvariantViolation(ValueError):
    """Raised when an input breaks a structural assumption on V or the basis."""


@dataclass(frozen=True)
class PotentialSpec:
    """V(x) = |x|^(2 ell) + sum_j c_j |x|^(2(ell - j)).

    ``lower_terms`` is a sequence of ``(degree, coefficient)`` pairs; every
    degree must be of the form ``2 * (ell - j)`` with ``j >= 1`` and must be
    nonnegative (negative degrees are singular at the origin).
    """

    ell: float = 1.0
    lower_terms: tuple = ()
    domain_halfwidth: float = 10.0

    def __post_init__(self):
        terms = tuple((float(a), float(c)) for a, c in self.lower_terms)
        object.__setattr__(self, "lower_terms", terms)
        if self.ell < 1:
            raise InvariantViolation(f"ell must be >= 1, got {self.ell}")
        if self.domain_halfwidth <= 0:
            raise InvariantViolation("domain_halfwidth must be positive")
        if self.ell == 1 and terms:
            raise InvariantViolation("ell = 1 requires V(x) = x^2 exactly (no lower terms)")
        for a, _ in terms:
            j = self.ell - a / 2.0
            if a < 0 or j < 1 or abs(j - round(j)) > 1e-12:
                raise InvariantViolation(
                    f"lower term degree {a} is not of the form 2(ell - j), j >= 1, nonnegative"
                )

    def __call__(self, x):
        x = np.abs(np.asarray(x, dtype=float))
        v = x ** (2.0 * self.ell)
        for a, c in self.lower_terms:
            v = v + c * (x**a if a > 0 else np.ones_like(x))
        return v

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        ax = np.abs(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            dv = 2.0 * self.ell * ax ** (2.0 * self.ell - 1.0)
            for a, c in self.lower_terms:
                if a > 0:
                    dv = dv + c * a * ax ** (a - 1.0)
        return np.sign(x) * dv

    @property
    def d_exponent(self) -> float:
        return 2.0 * self.ell / (self.ell + 1.0)

    def to_dict(self) -> dict:
        return {
            "ell": self.ell,
            "lower_terms": [list(t) for t in self.lower_terms],
            "domain_halfwidth": self.domain_halfwidth,
        }


@dataclass(frozen=True)
class DiscretizationParams:
    """Grid of ``grid_size`` points on [-L, L]; ``grid_size`` must be odd so that
    x = 0 is a node.  ``method`` is ``"sinc"`` (sinc-DVR, spectrally accurate)
    or ``"fd2"`` (second-order finite differences)."""

    grid_size: int = 401
    method: str = "sinc"

    def __post_init__(self):
        if self.grid_size < 5 or self.grid_size % 2 == 0:
            raise ValueError("grid_size must be an odd integer >= 5")
        if self.method not in ("sinc", "fd2"):
            raise ValueError(f"unknown discretization method {self.method!r}")

    def to_dict(self) -> dict:
        return {"grid_size": self.grid_size, "method": self.method}


@dataclass(frozen=True, eq=False)
class Grid:
    x: np.ndarray
    h: float
    method: str

    @property
    def size(self) -> int:
        return self.x.size

    def _kernels(self):
        # first columns of the (symmetric) kinetic and (antisymmetric) derivative Toeplitz matrices
        m = np.arange(self.size, dtype=float)
        h = self.h
        if self.method == "sinc":
            sgn = np.where(np.arange(self.size) % 2 == 0, 1.0, -1.0)
            t = np.empty(self.size)
            t[0] = np.pi**2 / (3.0 * h * h)
            t[1:] = 2.0 * sgn[1:] / (h * h * m[1:] ** 2)
            dcol = np.zeros(self.size)
            dcol[1:] = sgn[1:] / (h * m[1:])  # D[i, 0] for i > 0
        else:
            t = np.zeros(self.size)
            t[0] = 2.0 / (h * h)
            t[1] = -1.0 / (h * h)
            dcol = np.zeros(self.size)
            dcol[1] = -1.0 / (2.0 * h)
        return t, dcol

    def kinetic_matrix(self) -> np.ndarray:
        t, _ = self._kernels()
        return linalg.toeplitz(t)

    def derivative_matrix(self) -> np.ndarray:
        _, dcol = self._kernels()
        return linalg.toeplitz(dcol, -dcol)

    def apply_kinetic(self, f: np.ndarray) -> np.ndarray:
        t, _ = self._kernels()
        return _toeplitz_apply(t, t, f)

    def apply_derivative(self, f: np.ndarray) -> np.ndarray:
        _, dcol = self._kernels()
        return _toeplitz_apply(dcol, -dcol, f)


def _toeplitz_apply(col, row, f):
    f = np.asarray(f)
    if np.iscomplexobj(f):
        return linalg.matmul_toeplitz((col, row), f.real) + 1j * linalg.matmul_toeplitz(
            (col, row), f.imag
        )
    return linalg.matmul_toeplitz((col, row), f)


def make_grid(spec: PotentialSpec, disc: DiscretizationParams) -> Grid:
    L = spec.domain_halfwidth
    m = disc.grid_size // 2
    h = L / m
    # integer multiples of h: exactly symmetric with an exact node at 0
    x = h * np.arange(-m, m + 1, dtype=float)
    return Grid(x=x, h=h, method=disc.method)


def _check_potential(spec: PotentialSpec, x: np.ndarray) -> np.ndarray:
    v = spec(x)
    if not np.all(np.isfinite(v)):
        raise InvariantViolation("potential is not finite on the grid")
    if not np.allclose(v, v[::-1], rtol=1e-13, atol=1e-13 * max(1.0, np.abs(v).max())):
        raise InvariantViolation("potential is not even under x -> -x")
    # V'(x) != 0 away from a small neighbourhood of 0: V strictly increasing on x > 0
    c = x.size // 2
    right = v[c:]
    near0 = np.abs(x[c:]) < 4 * (x[1] - x[0])
    dv = np.diff(right)
    if np.any(dv[~near0[1:]] <= 0):
        bad = x[c + 1 :][~near0[1:]][np.argmax(dv[~near0[1:]] <= 0)]
        raise InvariantViolation(f"V'(x) vanishes or changes sign near x = {bad:.4g}")
    return v


def build_h0(spec: PotentialSpec, disc: DiscretizationParams) -> np.ndarray:
    """Dense real symmetric matrix of -d^2/dx^2 + V on the grid."""
    grid = make_grid(spec, disc)
    v = _check_potential(spec, grid.x)
    h0 = grid.kinetic_matrix()
    h0[np.diag_indices_from(h0)] += v
    return h0


@dataclass(frozen=True, eq=False)
class EigenBasis:
    """Lowest ``n_modes`` eigenpairs of the discretized H0.

    Eigenvectors are stored as orthonormal columns of a real M x N array
    (discrete normalization: sum_m v_m^2 = 1), so grid quadrature of a
    multiplication operator is simply ``V.T @ diag(f) @ V``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    momentum_matrix: np.ndarray
    grid: Grid
    spec: PotentialSpec
    d_exponent: float
    residuals: np.ndarray = field(repr=False, default=None)

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size

    @property
    def position_grid(self) -> np.ndarray:
        return self.grid.x

    @property
    def ell(self) -> float:
        return self.spec.ell

    def quantize_values(self, f: np.ndarray) -> np.ndarray:
        """<v_i, f v_j> for f sampled on the grid; f may carry leading batch axes."""
        V = self.eigenvectors
        f = np.asarray(f)
        if f.ndim == 1:
            return V.T @ (f[:, None] * V)
        return np.einsum("mi,...m,mj->...ij", V, f, V, optimize=True)

    def orthonormality_defect(self) -> float:
        V = self.eigenvectors
        return float(np.abs(V.T @ V - np.eye(self.n_modes)).max())

    def parity_defect(self) -> float:
        V = self.eigenvectors
        sign = np.where(np.arange(self.n_modes) % 2 == 0, 1.0, -1.0)
        return float(np.abs(V[::-1, :] - sign * V).max())

    def hermiticity_defect(self) -> float:
        P = self.momentum_matrix
        return float(np.abs(P - P.conj().T).max())

    def cache_key(self) -> str:
        return basis_cache_key(self.spec, DiscretizationParams(self.grid.size, self.grid.method), self.n_modes)

    def save(self, path) -> None:
        path = Path(path)
        np.savez(
            path,
            eigenvalues=self.eigenvalues,
            eigenvectors=self.eigenvectors,
            residuals=self.residuals if self.residuals is not None else np.array([]),
            meta=json.dumps(
                {
                    "spec": self.spec.to_dict(),
                    "disc": {"grid_size": self.grid.size, "method": self.grid.method},
                }
            ),
        )

    @classmethod
    def load(cls, path) -> "EigenBasis":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            spec = PotentialSpec(
                ell=meta["spec"]["ell"],
                lower_terms=tuple(tuple(t) for t in meta["spec"]["lower_terms"]),
                domain_halfwidth=meta["spec"]["domain_halfwidth"],
            )
            disc = DiscretizationParams(**meta["disc"])
            grid = make_grid(spec, disc)
            V = data["eigenvectors"]
            res = data["residuals"]
            return cls(
                eigenvalues=data["eigenvalues"],
                eigenvectors=V,
                momentum_matrix=_momentum(grid, V),
                grid=grid,
                spec=spec,
                d_exponent=spec.d_exponent,
                residuals=res if res.size else None,
            )


def basis_cache_key(spec: PotentialSpec, disc: DiscretizationParams, n_keep: int) -> str:
    payload = json.dumps(
        {"spec": spec.to_dict(), "disc": disc.to_dict(), "n_keep": int(n_keep)}, sort_keys=True
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _momentum(grid: Grid, V: np.ndarray) -> np.ndarray:
    # -i D with D real antisymmetric: hermitian by construction
    DV = grid.apply_derivative(V)
    P = -1j * (V.T @ DV)
    return 0.5 * (P + P.conj().T)


def eigendecompose(
    h0: np.ndarray,
    n_keep: int,
    *,
    grid: Grid,
    spec: PotentialSpec,
    tol_eig: float = 1e-9,
    gap_tol: float = 1e-8,
) -> EigenBasis:
    """Lowest ``n_keep`` eigenpairs of ``h0``.

    Eigenvectors are made real with the sign fixed so that the first grid
    value exceeding 1e-3 of the vector's maximum modulus is positive.
    """
    M = h0.shape[0]
    if n_keep < 1 or 3 * n_keep > M:
        raise ValueError(f"n_keep={n_keep} must be in [1, grid_size/3] (grid_size={M})")
    try:
        w, V = linalg.eigh(h0, subset_by_index=[0, n_keep - 1])
    except linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise RuntimeError(f"eigensolver failed to converge: {exc}") from exc
    if np.any(w <= 0):
        raise InvariantViolation("H0 has nonpositive eigenvalues; shift the potential")
    gaps = np.diff(w) / np.abs(w[1:])
    if gaps.size and gaps.min() < gap_tol:
        j = int(np.argmin(gaps))
        raise InvariantViolation(f"near-degenerate eigenvalues at j={j},{j + 1} (rel. gap {gaps[j]:.2e})")
    V = np.ascontiguousarray(V.real)
    for j in range(n_keep):
        col = V[:, j]
        idx = np.argmax(np.abs(col) > 1e-3 * np.abs(col).max())
        if col[idx] < 0:
            V[:, j] = -col
    res = np.linalg.norm(h0 @ V - V * w, axis=0)
    if np.any(res > tol_eig * w):
        j = int(np.argmax(res / w))
        raise InvariantViolation(f"eigen-residual {res[j]:.2e} too large for mode {j}")
    return EigenBasis(
        eigenvalues=w,
        eigenvectors=V,
        momentum_matrix=_momentum(grid, V),
        grid=grid,
        spec=spec,
        d_exponent=spec.d_exponent,
        residuals=res,
    )


def build_basis(
    spec: PotentialSpec,
    disc: DiscretizationParams | None = None,
    n_keep: int | None = None,
    cache_dir=None,
) -> EigenBasis:
    """build_h0 + eigendecompose, optionally cached on disk by (spec, disc, n_keep)."""
    disc = disc or DiscretizationParams()
    n_keep = n_keep if n_keep is not None else disc.grid_size // 3
    if cache_dir is not None:
        path = Path(cache_dir) / f"basis-{basis_cache_key(spec, disc, n_keep)}.npz"
        if path.exists():
            return EigenBasis.load(path)
    grid = make_grid(spec, disc)
    basis = eigendecompose(build_h0(spec, disc), n_keep, grid=grid, spec=spec)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        basis.save(path)
    return basis


def fit_eigenvalue_exponent(basis, j_min: int, j_max: int):
    """Least-squares fit log(lambda_j) = log(c) + d log(j + 1/2) over j_min..j_max.

    The half-integer shift is the Maslov index of the semiclassical
    quantization; without it the harmonic spectrum 2j+1 would not fit
    to an exact power law.  Returns ``(d_est, c_est, rms_residual)``.
    """
    lam = basis.eigenvalues if isinstance(basis, EigenBasis) else np.asarray(basis)
    if j_max >= lam.size:
        raise ValueError(f"j_max={j_max} outside resolved range (n_modes={lam.size})")
    j = np.arange(j_min, j_max + 1)
    if j.size < 8:
        raise ValueError("need at least 8 points in the fit window")
    A = np.column_stack([np.ones(j.size), np.log(j + 0.5)])
    y = np.log(lam[j])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return float(coef[1]), float(np.exp(coef[0])), resid


@dataclass(frozen=True, eq=False)
class SobolevWeights:
    s: float
    weights: np.ndarray


def sobolev_weights(basis: EigenBasis, s: float) -> SobolevWeights:
    """w_j = (1 + lambda_j)^(s (ell+1) / (2 ell)), i.e. the spectrum of <K0>^s."""
    ell = basis.ell
    w = (1.0 + basis.eigenvalues) ** (s * (ell + 1.0) / (2.0 * ell))
    return SobolevWeights(s=float(s), weights=w)


def sobolev_norm(coeffs, s: float, basis: EigenBasis) -> float:
    c = np.asarray(coeffs)
    w = sobolev_weights(basis, s).weights
    return float(np.sqrt(np.sum((w * np.abs(c)) ** 2, axis=-1)))


# --- classical mechanics of h0 = xi^2 + V(x) ---------------------------------


def turning_point(E: float, spec: PotentialSpec) -> float:
    """Positive root of V(x) = E."""
    v0 = float(spec(0.0))
    if E <= v0:
        raise ValueError(f"energy {E} does not exceed min V = {v0}")
    hi = 1.0
    for _ in range(200):
        if spec(hi) > E:
            break
        hi *= 2.0
    else:
        raise RuntimeError("could not bracket the turning point")
    return optimize.brentq(lambda x: float(spec(x)) - E, 0.0, hi, xtol=1e-15, rtol=1e-15, maxiter=500)


def _orbit_nodes(E: float, spec: PotentialSpec, n_nodes: int):
    # x = x_t sin(theta), theta in (-pi/2, pi/2): dx / sqrt(E - V) becomes smooth
    xt = turning_point(E, spec)
    u, wq = np.polynomial.legendre.leggauss(n_nodes)
    theta = 0.5 * np.pi * u
    x = xt * np.sin(theta)
    gap = E - spec(x)
    speed = np.sqrt(np.maximum(gap, 0.0))
    jac = xt * np.cos(theta) * 0.5 * np.pi * wq
    # dt = dx / (2 |xi|) along each branch
    dt = jac / (2.0 * speed)
    return x, speed, dt


def classical_period(E: float, spec: PotentialSpec, n_nodes: int = 400) -> float:
    """Period of the orbit of h0 = xi^2 + V at energy E (x' = 2 xi)."""
    _, _, dt = _orbit_nodes(E, spec, n_nodes)
    return float(2.0 * dt.sum())


def flow_average(g: Callable, E: float, phi, spec: PotentialSpec, n_nodes: int = 400) -> float:
    """Time average of g(x, xi, phi) over the closed orbit of h0 at energy E."""
    x, speed, dt = _orbit_nodes(E, spec, n_nodes)
    T = 2.0 * dt.sum()
    total = np.sum(np.asarray(g(x, speed, phi)) * dt) + np.sum(np.asarray(g(x, -speed, phi)) * dt)
    return float(np.real(total) / T)
