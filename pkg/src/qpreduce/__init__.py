"""Galerkin-scale reducibility of quasi-periodically forced 1D oscillators."""

__version__ = "0.1.0"

from .conjugation import QPUnitary, apply_gauge, conjugate, gauge_b, magnetic_component
from .diophantine import FrequencyVector, check_diophantine, check_second_melnikov, measure_estimate
from .floquet import compare_reduced, monodromy_quasienergies, propagate, track_norms
from .kam import (
    DiagonalTimeSeries,
    KAMParams,
    KAMState,
    ReducibilityError,
    eliminate_diagonal_time,
    fit_diagonal_smoothness,
    homological_solve,
    kam_iterate,
    kam_step,
)
from .qpoperator import QPOperator
from .spectral_basis import (
    DiscretizationParams,
    EigenBasis,
    PotentialSpec,
    build_basis,
    build_h0,
    classical_period,
    eigendecompose,
    fit_eigenvalue_exponent,
    flow_average,
    sobolev_norm,
    sobolev_weights,
)
from .symbols import (
    HypothesisViolation,
    QPSymbol,
    assemble_hamiltonian,
    check_symbol_class,
    quantize_magnetic,
    quantize_multiplication,
)

__all__ = [name for name in dir() if not name.startswith("_")]
