"""
Periodic torus discretization, spectral transforms and the kernel algebra.

Fields are complex vectors of length n^d, kernels are dense n^d x n^d matrices.
Integrals are Riemann sums with weight h^d, so the discrete delta is h^-d on the
diagonal and composition is a weighted matrix product.
"""
from dataclasses import dataclass, field as dataclass_field
from functools import cached_property
from typing import Optional, Tuple
import logging

import numpy as np

from models import ConfigError, GridMismatchError, NO_SYMMETRY, HERMITIAN, VALID_TAGS, validate_tag

# Configure logging
logger = logging.getLogger(__name__)

FORWARD = 'forward'
INVERSE = 'inverse'

X_AXIS = 'x'
Y_AXIS = 'y'


# ============================================================================
# GRID
# ============================================================================

@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on [0, L)^d with n points per axis."""

    d: int = 1
    n: int = 64
    L: float = 2 * np.pi

    def __post_init__(self):
        errors = {}
        if self.d not in (1, 2, 3):
            errors['d'] = 'Dimension must be 1, 2 or 3'
        if self.n < 8 or self.n & (self.n - 1):
            errors['n'] = 'Points per axis must be a power of two and at least 8'
        if not self.L > 0:
            errors['L'] = 'Box length must be positive'
        if errors:
            raise ConfigError('Invalid grid', errors)

    @property
    def h(self) -> float:
        return self.L / self.n

    @property
    def weight(self) -> float:
        """Quadrature weight h^d."""
        return self.h ** self.d

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n ** self.d

    @cached_property
    def coordinates(self) -> Tuple[np.ndarray, ...]:
        """Node coordinates x_i = i h per axis, each of shape `shape`."""
        axis = np.arange(self.n) * self.h
        return tuple(np.meshgrid(*([axis] * self.d), indexing='ij'))

    @cached_property
    def points(self) -> np.ndarray:
        """Flattened node coordinates, shape (size, d)."""
        return np.stack([c.ravel() for c in self.coordinates], axis=1)

    @cached_property
    def frequencies(self) -> Tuple[np.ndarray, ...]:
        """Angular frequencies per axis in FFT order, each of shape `shape`."""
        axis = 2 * np.pi * np.fft.fftfreq(self.n, d=self.h)
        return tuple(np.meshgrid(*([axis] * self.d), indexing='ij'))

    @cached_property
    def xi_squared(self) -> np.ndarray:
        """|xi|^2 on the frequency lattice, shape `shape`."""
        return sum(k ** 2 for k in self.frequencies)

    @cached_property
    def multi_indices(self) -> np.ndarray:
        """Integer node indices, shape (size, d)."""
        grids = np.meshgrid(*([np.arange(self.n)] * self.d), indexing='ij')
        return np.stack([g.ravel() for g in grids], axis=1)

    def difference_index(self) -> Tuple[np.ndarray, ...]:
        """
        Flat-index tuple addressing f(x - y) for every node pair.

        Returns:
            d arrays of shape (size, size) usable as f.reshape(shape)[result]
        """
        idx = self.multi_indices
        diff = (idx[:, None, :] - idx[None, :, :]) % self.n
        return tuple(diff[..., k] for k in range(self.d))

    def minimal_image(self) -> np.ndarray:
        """Signed node displacements in [-L/2, L/2), shape (size, d)."""
        x = self.points
        return x - self.L * np.floor(x / self.L + 0.5)

    # ------------------------------------------------------------------------
    # Spectral helpers on raw arrays
    # ------------------------------------------------------------------------

    def _split(self, values: np.ndarray, axis: Optional[str]):
        if axis is None:
            return values.reshape(self.shape), tuple(range(self.d))
        if axis == X_AXIS:
            return values.reshape(self.shape + (-1,)), tuple(range(self.d))
        if axis == Y_AXIS:
            return values.reshape((-1,) + self.shape), tuple(range(1, self.d + 1))
        raise ValueError(f"axis must be None, '{X_AXIS}' or '{Y_AXIS}'")

    @staticmethod
    def _broadcast(multiplier: np.ndarray, axis: Optional[str]) -> np.ndarray:
        if axis == X_AXIS:
            return multiplier[..., None]
        if axis == Y_AXIS:
            return multiplier[None, ...]
        return multiplier

    def apply_multiplier(self, values: np.ndarray, multiplier: np.ndarray,
                         axis: Optional[str] = None) -> np.ndarray:
        """
        Apply a Fourier multiplier to a field, or to one variable of a kernel.

        Args:
            values: Field vector (size,) or kernel matrix (size, size)
            multiplier: Symbol on the frequency lattice, shape `shape`
            axis: None for fields, 'x' or 'y' for the kernel variable

        Returns:
            Array of the same shape as values
        """
        arr, axes = self._split(values, axis)
        spectrum = np.fft.fftn(arr, axes=axes) * self._broadcast(multiplier, axis)
        return np.fft.ifftn(spectrum, axes=axes).reshape(values.shape)

    def laplacian(self, values: np.ndarray, axis: Optional[str] = None) -> np.ndarray:
        """Spectral Laplacian (symbol -|xi|^2)."""
        return self.apply_multiplier(values, -self.xi_squared, axis)

    def free_flow(self, values: np.ndarray, tau: float, axis: Optional[str] = None,
                  sign: int = 1) -> np.ndarray:
        """Exact flow e^{i sign Delta tau} on a field or one kernel variable."""
        return self.apply_multiplier(values, np.exp(-1j * sign * self.xi_squared * tau), axis)

    def compose_values(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.weight * (a @ b)

    def delta_values(self) -> np.ndarray:
        return np.eye(self.size, dtype=complex) / self.weight

    def inner(self, f: np.ndarray, g: np.ndarray) -> complex:
        """L^2 inner product, antilinear in the first slot."""
        return complex(self.weight * np.vdot(f, g))

    def norm(self, values: np.ndarray) -> float:
        """L^2 norm of a field, or Hilbert-Schmidt norm of a kernel."""
        w = self.weight if values.ndim == 1 else self.weight ** 2
        return float(np.sqrt(w * np.sum(np.abs(values) ** 2)))

    def to_dict(self) -> dict:
        return {'d': self.d, 'n': self.n, 'L': self.L}


# ============================================================================
# FIELDS AND KERNELS
# ============================================================================

@dataclass(frozen=True, eq=False)
class Field:
    """Complex function on the grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex).reshape(-1)
        if values.size != self.grid.size:
            raise GridMismatchError(f"Field has {values.size} values, grid has {self.grid.size} nodes")
        if not np.all(np.isfinite(values)):
            raise ValueError('Field values must be finite')
        object.__setattr__(self, 'values', values)

    def norm(self) -> float:
        return self.grid.norm(self.values)

    def conj(self) -> 'Field':
        return Field(self.grid, self.values.conj())


@dataclass(frozen=True, eq=False)
class Kernel:
    """Complex function on grid x grid with a symmetry tag."""

    grid: Grid
    values: np.ndarray
    tag: str = NO_SYMMETRY
    tol: float = dataclass_field(default=1e-12, repr=False)

    def __post_init__(self):
        n = self.grid.size
        values = np.asarray(self.values, dtype=complex).reshape(n, n)
        if self.tag not in VALID_TAGS:
            raise ValueError(f"Tag must be one of: {', '.join(VALID_TAGS)}")
        validate_tag(values, self.tag, self.tol, what=f"{self.tag} kernel")
        object.__setattr__(self, 'values', values)

    def norm(self) -> float:
        return self.grid.norm(self.values)

    def conj(self) -> 'Kernel':
        return Kernel(self.grid, self.values.conj(), self.tag, self.tol)


def _same_grid(*objs) -> Grid:
    grid = objs[0].grid
    for obj in objs[1:]:
        if obj.grid != grid:
            raise GridMismatchError(f"Grid mismatch: {grid} vs {obj.grid}")
    return grid


def delta(grid: Grid) -> Kernel:
    """Discrete delta kernel: h^-d on the diagonal."""
    return Kernel(grid, grid.delta_values(), HERMITIAN)


def outer(f: Field, g: Field, tag: str = NO_SYMMETRY) -> Kernel:
    """Kernel (x, y) -> f(x) g(y)."""
    grid = _same_grid(f, g)
    return Kernel(grid, np.outer(f.values, g.values), tag, tol=1e-10)


# ============================================================================
# OPERATIONS
# ============================================================================

def transform(f: Field, direction: str = FORWARD) -> Field:
    """
    Unitary discrete Fourier transform.

    Forward coefficients are h^d L^{-d/2} sum_x f(x) e^{-i xi.x}, so Parseval holds
    between the L^2 norm and the plain l^2 norm of the coefficients.
    """
    grid = f.grid
    scale = grid.weight * grid.L ** (-grid.d / 2)
    arr = f.values.reshape(grid.shape)
    if direction == FORWARD:
        out = scale * np.fft.fftn(arr)
    elif direction == INVERSE:
        out = np.fft.ifftn(arr) / scale
    else:
        raise ValueError(f"direction must be '{FORWARD}' or '{INVERSE}'")
    return Field(grid, out.ravel())


def compose(a: Kernel, b: Kernel, tag: Optional[str] = None) -> Kernel:
    """
    (A o B)(x, y) = int A(x, z) B(z, y) dz with weight h^d.

    The result is tagged hermitian for A o A^* patterns; pass `tag` to assert a
    tag implied by the caller's algebra (checked to 1e-10 relative).
    """
    grid = _same_grid(a, b)
    values = grid.compose_values(a.values, b.values)
    if tag is None:
        tag = HERMITIAN if (a.tag == HERMITIAN and b is a) else NO_SYMMETRY
    return Kernel(grid, values, tag, tol=1e-10)


def trace_density(a: Kernel) -> Field:
    """x -> A(x, x)."""
    return Field(a.grid, np.diagonal(a.values).copy())


def trace(a: Kernel) -> complex:
    """sum_x A(x, x) h^d."""
    return complex(a.grid.weight * np.trace(a.values))
