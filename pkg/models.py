"""
Shared error types and structural validation helpers for the HFB lab.
Every library module raises from this hierarchy so the cli can map failures to exit codes.
"""
from typing import Any, Dict, Optional
import logging

import numpy as np

# Configure logging
logger = logging.getLogger(__name__)


class HFBLabError(Exception):
    """Base error for the HFB lab."""
    pass


class ConfigError(HFBLabError):
    """Invalid run file or environment settings."""

    def __init__(self, message: str, errors: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.errors = errors or {}


class GridMismatchError(HFBLabError, ValueError):
    """Operands live on different grids."""
    pass


class SymmetryError(HFBLabError, ValueError):
    """A symmetric or hermitian kernel violates its tag above tolerance."""

    def __init__(self, message: str, residual: float = float('nan')):
        super().__init__(message)
        self.residual = residual


class TakagiError(HFBLabError):
    """Takagi factorization or its inverse calculus failed."""

    def __init__(self, message: str, residual: float = float('nan')):
        super().__init__(message)
        self.residual = residual


class InvariantAbort(HFBLabError):
    """A monitored invariant left its tolerance during time stepping."""

    def __init__(self, message: str, t: float, monitor: str, value: float):
        super().__init__(message)
        self.t = t
        self.monitor = monitor
        self.value = value


class CutoffOverflowError(HFBLabError):
    """Occupation cutoff too small (tail mass) or basis too large (memory bound)."""

    def __init__(self, message: str, tail_mass: float = float('nan'), dimension: int = 0):
        super().__init__(message)
        self.tail_mass = tail_mass
        self.dimension = dimension


class KrylovConvergenceError(HFBLabError):
    """An exponential application drifted in norm beyond tolerance."""

    def __init__(self, message: str, drift: float):
        super().__init__(message)
        self.drift = drift


class TrajectoryError(HFBLabError):
    """Empty, too short or unreadable trajectory."""
    pass


# ============================================================================
# STRUCTURAL CHECKS
# ============================================================================

SYMMETRIC = 'symmetric'
HERMITIAN = 'hermitian'
NO_SYMMETRY = 'none'

VALID_TAGS = [SYMMETRIC, HERMITIAN, NO_SYMMETRY]


def _relative(diff: np.ndarray, ref: np.ndarray) -> float:
    scale = float(np.max(np.abs(ref))) if ref.size else 0.0
    value = float(np.max(np.abs(diff))) if diff.size else 0.0
    return value / scale if scale > 0 else value


def symmetry_residual(values: np.ndarray) -> float:
    """
    Relative max-norm residual of K(x,y) - K(y,x).

    Args:
        values: Square kernel matrix

    Returns:
        max|K - K^T| / max|K| (absolute when K vanishes)
    """
    return _relative(values - values.T, values)


def hermiticity_residual(values: np.ndarray) -> float:
    """Relative max-norm residual of K(x,y) - conj(K(y,x))."""
    return _relative(values - values.conj().T, values)


def tag_residual(values: np.ndarray, tag: str) -> float:
    """Residual against the given symmetry tag; zero for untagged kernels."""
    if tag == SYMMETRIC:
        return symmetry_residual(values)
    if tag == HERMITIAN:
        return hermiticity_residual(values)
    if tag == NO_SYMMETRY:
        return 0.0
    raise ValueError(f"Tag must be one of: {', '.join(VALID_TAGS)}")


def validate_tag(values: np.ndarray, tag: str, tol: float, what: str = 'kernel') -> float:
    """
    Check a kernel against its symmetry tag.

    Raises:
        SymmetryError: residual above tol
    """
    residual = tag_residual(values, tag)
    if residual > tol:
        logger.error(f"{what} violates {tag} tag: residual {residual:.3e} > {tol:.1e}")
        raise SymmetryError(f"{what} is not {tag} (residual {residual:.3e})", residual)
    return residual
