"""Frequency arithmetic: Diophantine scans, excluded measure, Melnikov margins.

All scans use |k| = |k|_1.  Only one representative of each pair {k, -k}
is visited since |omega.k| is even in k.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "FrequencyVector",
    "DiophantineResult",
    "MelnikovReport",
    "integer_vectors",
    "check_diophantine",
    "gamma_max",
    "measure_estimate",
    "melnikov_bound",
    "check_second_melnikov",
    "lipschitz_constant",
]


@lru_cache(maxsize=32)
def integer_vectors(n: int, K: int) -> np.ndarray:
    """Nonzero k with |k|_1 <= K and first nonzero entry positive, sorted by
    |k|_1 (then lexicographically).  Read-only."""
    r = range(-K, K + 1)
    ks = [k for k in itertools.product(r, repeat=n) if 0 < sum(map(abs, k)) <= K]
    ks = [k for k in ks if next(v for v in k if v != 0) > 0]
    ks.sort(key=lambda k: (sum(map(abs, k)), k))
    out = np.array(ks, dtype=np.int64).reshape(-1, n)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DiophantineResult:
    certified: bool
    gamma_max: float
    argmin: tuple
    violation: tuple | None
    gamma: float
    tau: float
    K: int

    def to_dict(self) -> dict:
        return {
            "certified": self.certified,
            "gamma_max": self.gamma_max,
            "argmin": list(self.argmin),
            "violation": None if self.violation is None else list(self.violation),
            "gamma": self.gamma,
            "tau": self.tau,
            "K": self.K,
        }


@dataclass(frozen=True)
class FrequencyVector:
    omega: tuple
    certificate: tuple | None = None  # (gamma, tau, K_checked)

    def __post_init__(self):
        w = tuple(float(v) for v in np.atleast_1d(self.omega))
        if not all(1.0 <= v <= 2.0 for v in w):
            raise ValueError(f"frequency components must lie in [1, 2], got {w}")
        object.__setattr__(self, "omega", w)
        if self.certificate is not None:
            g, tau, K = self.certificate
            res = check_diophantine(w, g, tau, int(K))
            if not res.certified:
                raise ValueError(f"certificate {self.certificate} fails at k = {res.violation}")

    @property
    def n(self) -> int:
        return len(self.omega)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.omega, dtype=dtype)

    @classmethod
    def certify(cls, omega, gamma: float, tau: float, K: int) -> "FrequencyVector":
        return cls(tuple(np.atleast_1d(omega)), (float(gamma), float(tau), int(K)))


def _scan(omega: np.ndarray, tau: float, K: int):
    ks = integer_vectors(omega.size, K)
    norms = np.abs(ks).sum(axis=1).astype(float)
    vals = np.abs(ks @ omega) * norms**tau
    return ks, vals


def gamma_max(omega, tau: float, K: int) -> tuple[float, tuple]:
    """min over 0 < |k|_1 <= K of |omega.k| |k|^tau, with its argmin."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    ks, vals = _scan(omega, tau, K)
    i = int(np.argmin(vals))
    return float(vals[i]), tuple(int(v) for v in ks[i])


def check_diophantine(omega, gamma: float, tau: float, K: int) -> DiophantineResult:
    """Exhaustive check of |omega.k| >= gamma / |k|^tau for 0 < |k|_1 <= K.

    The violation reported is the first failing k in order of increasing |k|_1.
    """
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    n = omega.size
    if not tau > n - 1:
        raise ValueError(f"tau = {tau} must exceed n - 1 = {n - 1}")
    if K < 1:
        raise ValueError("K must be >= 1")
    ks, vals = _scan(omega, tau, K)
    i = int(np.argmin(vals))
    bad = np.flatnonzero(vals < gamma)
    violation = tuple(int(v) for v in ks[bad[0]]) if bad.size else None
    return DiophantineResult(
        certified=violation is None,
        gamma_max=float(vals[i]),
        argmin=tuple(int(v) for v in ks[i]),
        violation=violation,
        gamma=float(gamma),
        tau=float(tau),
        K=int(K),
    )


def measure_estimate(
    gamma: float,
    tau: float,
    n: int,
    K: int,
    n_samples: int = 100_000,
    rng_seed: int = 0,
    chunk: int = 4096,
) -> float:
    """Monte Carlo fraction of omega ~ U([1,2]^n) failing the scan at (gamma, tau, K)."""
    if gamma <= 0:
        return 0.0
    rng = np.random.default_rng(rng_seed)
    samples = rng.uniform(1.0, 2.0, size=(n_samples, n))
    ks = integer_vectors(n, K)
    thresh = gamma / np.abs(ks).sum(axis=1).astype(float) ** tau
    failed = 0
    for start in range(0, n_samples, chunk):
        dots = np.abs(samples[start : start + chunk] @ ks.T.astype(float))
        failed += int(np.any(dots < thresh, axis=1).sum())
    return failed / n_samples


@dataclass
class MelnikovReport:
    violations: list = field(default_factory=list)  # (i, j, k, divisor, bound)
    min_margin: float = np.inf
    argmin: tuple | None = None
    n_checked: int = 0

    @property
    def ok(self) -> bool:
        return self.min_margin > 0

    def to_dict(self) -> dict:
        return {
            "min_margin": self.min_margin,
            "argmin": None if self.argmin is None else [self.argmin[0], self.argmin[1], list(self.argmin[2])],
            "n_checked": self.n_checked,
            "violations": [[i, j, list(k), d, b] for i, j, k, d, b in self.violations],
        }


def melnikov_bound(i, j, k_norm, gamma: float, tau: float, d: float):
    """gamma (1 + |i^d - j^d|) / (1 + |k|^tau)."""
    i = np.asarray(i, dtype=float)
    j = np.asarray(j, dtype=float)
    return gamma * (1.0 + np.abs(i**d - j**d)) / (1.0 + np.asarray(k_norm, dtype=float) ** tau)


def check_second_melnikov(lambdas, omega, gamma: float, tau: float, d: float, K: int) -> MelnikovReport:
    """Scan |lambda_i - lambda_j + omega.k| >= gamma (1+|i^d-j^d|)/(1+|k|^tau)
    over i, j < N and |k|_1 <= K, excluding (i = j, k = 0).

    Margins are divisor minus bound; a negative margin is a violation.
    """
    lam = np.asarray(lambdas, dtype=float)
    if np.any(np.diff(lam) < 0):
        raise ValueError("lambdas must be ascending")
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    n = omega.size
    N = lam.size
    r = np.arange(-K, K + 1)
    ks = np.stack(np.meshgrid(*([r] * n), indexing="ij"), -1).reshape(-1, n)
    ks = ks[np.abs(ks).sum(1) <= K]
    kn = np.abs(ks).sum(1)
    wk = ks @ omega
    idx = np.arange(N)
    gap = lam[:, None] - lam[None, :]
    div = np.abs(gap[None, :, :] + wk[:, None, None])
    bound = melnikov_bound(idx[None, :, None], idx[None, None, :], kn[:, None, None], gamma, tau, d)
    margin = div - bound
    zero = np.flatnonzero(kn == 0)
    margin[zero[0], idx, idx] = np.inf
    report = MelnikovReport(n_checked=int(margin.size - N))
    flat = int(np.argmin(margin))
    a, i, j = np.unravel_index(flat, margin.shape)
    report.min_margin = float(margin[a, i, j])
    report.argmin = (int(i), int(j), tuple(int(v) for v in ks[a]))
    for a, i, j in zip(*np.nonzero(margin < 0)):
        report.violations.append(
            (int(i), int(j), tuple(int(v) for v in ks[a]), float(div[a, i, j]), float(bound[a, i, j]))
        )
    return report


def lipschitz_constant(fn, omegas, step: float = 1e-4) -> float:
    """max over the given frequencies and unit directions of |fn(w + h e) - fn(w)| / h.

    ``fn`` maps an omega vector to a real array (e.g. a reduced spectrum).
    """
    best = 0.0
    for w in np.atleast_2d(np.asarray(omegas, dtype=float)):
        f0 = np.asarray(fn(w))
        for a in range(w.size):
            e = np.zeros_like(w)
            e[a] = step
            best = max(best, float(np.abs(np.asarray(fn(w + e)) - f0).max() / step))
    return best
