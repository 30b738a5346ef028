"""
Scaled pair interaction v_N(x) = N^{d beta} v(N^beta x) on the periodic grid.

Provides the two potential actions used by the evolution equations: convolution
against a field and multiplication along the difference diagonal of a kernel.
"""
from dataclasses import dataclass
from typing import Callable, Dict
import logging

import numpy as np

from grid import Field, Grid, Kernel, _same_grid
from models import ConfigError

# Configure logging
logger = logging.getLogger(__name__)

WRAP_TOLERANCE = 1e-10


# ============================================================================
# PROFILES
# ============================================================================

def gaussian_profile(r2: np.ndarray, amplitude: float, sigma: float) -> np.ndarray:
    """amplitude * exp(-|x|^2 / sigma^2)."""
    return amplitude * np.exp(-r2 / sigma ** 2)


def bump_profile(r2: np.ndarray, amplitude: float, sigma: float) -> np.ndarray:
    """Smooth compactly supported bump, amplitude * e * exp(-1 / (1 - |x|^2/sigma^2)) inside |x| < sigma."""
    s = r2 / sigma ** 2
    out = np.zeros_like(s, dtype=float)
    inside = s < 1.0
    out[inside] = amplitude * np.exp(1.0 - 1.0 / (1.0 - s[inside]))
    return out


PROFILES: Dict[str, Callable[[np.ndarray, float, float], np.ndarray]] = {
    'gaussian': gaussian_profile,
    'bump': bump_profile,
}

# Half-width of the effective support in units of sigma
SUPPORT_WIDTH = {'gaussian': 6.0, 'bump': 1.0}


@dataclass(frozen=True)
class PotentialSpec:
    """Named non-negative even profile, its parameters and the (N, beta) scaling."""

    profile: str = 'gaussian'
    amplitude: float = 1.0
    sigma: float = 0.5
    beta: float = 0.5
    N: int = 16

    def __post_init__(self):
        errors = {}
        if self.profile not in PROFILES:
            errors['profile'] = f"Profile must be one of: {', '.join(PROFILES)}"
        if self.amplitude < 0:
            errors['amplitude'] = 'Amplitude must be non-negative'
        if not self.sigma > 0:
            errors['sigma'] = 'Width must be positive'
        if not 0.0 <= self.beta <= 1.0:
            errors['beta'] = 'Scaling exponent must lie in [0, 1]'
        if int(self.N) != self.N or self.N < 1:
            errors['N'] = 'Particle number must be a positive integer'
        if errors:
            raise ConfigError('Invalid potential', errors)

    @property
    def scale(self) -> float:
        return float(self.N) ** self.beta

    def effective_support(self) -> float:
        return SUPPORT_WIDTH[self.profile] * self.sigma / self.scale

    def evaluate(self, r2: np.ndarray, d: int) -> np.ndarray:
        """v_N at squared distances r2."""
        base = PROFILES[self.profile](r2 * self.scale ** 2, self.amplitude, self.sigma)
        return self.scale ** d * base

    def to_dict(self) -> dict:
        return {'profile': self.profile, 'amplitude': self.amplitude, 'sigma': self.sigma,
                'beta': self.beta, 'N': int(self.N)}


# ============================================================================
# OPERATIONS
# ============================================================================

def build_vN(spec: PotentialSpec, grid: Grid) -> Field:
    """
    Periodized sample of v_N on the difference-variable torus.

    Images in the neighbouring cells are summed in; if they contribute more than
    1e-10 relative to the peak, the potential overlaps itself and a warning is logged.
    """
    if spec.effective_support() >= grid.L / 2:
        logger.warning(f"Effective support {spec.effective_support():.3g} does not fit in half box {grid.L / 2:.3g}")

    x = grid.minimal_image()
    central = spec.evaluate(np.sum(x ** 2, axis=1), grid.d)
    images = np.zeros_like(central)
    shifts = np.stack(np.meshgrid(*([np.arange(-1, 2)] * grid.d), indexing='ij'), axis=-1).reshape(-1, grid.d)
    for shift in shifts:
        if not np.any(shift):
            continue
        images += spec.evaluate(np.sum((x + grid.L * shift) ** 2, axis=1), grid.d)

    peak = float(np.max(central)) if central.size else 0.0
    overlap = float(np.max(images)) / peak if peak > 0 else 0.0
    if overlap > WRAP_TOLERANCE:
        logger.warning(f"Wrapped potential overlaps itself: relative image weight {overlap:.3e}")
    return Field(grid, central + images)


def interaction_matrix(vN: Field) -> np.ndarray:
    """Dense W[x, y] = v_N(x - y), symmetrized exactly."""
    grid = vN.grid
    w = vN.values.reshape(grid.shape)[grid.difference_index()]
    return 0.5 * (w + w.T)


def convolve(vN: Field, f: Field) -> Field:
    """Periodic convolution (v_N * f)(x) = int v_N(x - y) f(y) dy, computed spectrally."""
    grid = _same_grid(vN, f)
    a = np.fft.fftn(vN.values.reshape(grid.shape))
    b = np.fft.fftn(f.values.reshape(grid.shape))
    out = grid.weight * np.fft.ifftn(a * b).ravel()
    if np.all(vN.values.imag == 0) and np.all(f.values.imag == 0):
        out = out.real
    return Field(grid, out)


def convolve_values(grid: Grid, vN: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Array-level convolution used inside right-hand sides."""
    a = np.fft.fftn(vN.reshape(grid.shape))
    b = np.fft.fftn(f.reshape(grid.shape))
    return grid.weight * np.fft.ifftn(a * b).ravel()


def diag_multiply(vN: Field, k: Kernel) -> Kernel:
    """Kernel (x, y) -> v_N(x - y) K(x, y); keeps the symmetry tag of K."""
    _same_grid(vN, k)
    return Kernel(k.grid, interaction_matrix(vN) * k.values, k.tag, tol=max(k.tol, 1e-10))
