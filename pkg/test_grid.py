"""
Test suite for the periodic grid, its spectral transforms and the kernel algebra.
"""

import unittest

import numpy as np
import numpy.testing as npt

from grid import (FORWARD, INVERSE, X_AXIS, Y_AXIS, Field, Grid, Kernel, compose, delta, outer,
                  trace, trace_density, transform)
from models import ConfigError, GridMismatchError, HERMITIAN, SYMMETRIC, SymmetryError


class GridTestSuite(unittest.TestCase):
    """Transforms, composition, traces and exact free flows."""

    @classmethod
    def setUpClass(cls):
        cls.grid = Grid(d=1, n=32)
        cls.grid2 = Grid(d=2, n=8)
        cls.rng = np.random.default_rng(7)
        x = cls.grid.points[:, 0]
        cls.smooth = np.exp(np.cos(x)) * (1 + 0.3j * np.sin(2 * x))

    def random_kernel(self, grid, tag=None):
        a = self.rng.standard_normal((grid.size, grid.size)) + 1j * self.rng.standard_normal((grid.size, grid.size))
        if tag == SYMMETRIC:
            return 0.5 * (a + a.T)
        if tag == HERMITIAN:
            return 0.5 * (a + a.conj().T)
        return a

    # ============================================================================
    # CONSTRUCTION
    # ============================================================================

    def test_01_invalid_grid_rejected(self):
        """Non power-of-two sizes and bad dimensions raise ConfigError."""
        with self.assertRaises(ConfigError):
            Grid(d=1, n=12)
        with self.assertRaises(ConfigError):
            Grid(d=4, n=8)
        with self.assertRaises(ConfigError):
            Grid(d=1, n=8, L=0.0)

    def test_02_field_size_checked(self):
        with self.assertRaises(GridMismatchError):
            Field(self.grid, np.ones(self.grid.size + 1))
        with self.assertRaises(ValueError):
            Field(self.grid, np.full(self.grid.size, np.nan))

    def test_03_kernel_tag_checked(self):
        """A kernel tagged symmetric must actually be symmetric."""
        a = self.random_kernel(self.grid)
        with self.assertRaises(SymmetryError):
            Kernel(self.grid, a, SYMMETRIC)
        Kernel(self.grid, self.random_kernel(self.grid, SYMMETRIC), SYMMETRIC)
        Kernel(self.grid, self.random_kernel(self.grid, HERMITIAN), HERMITIAN)

    # ============================================================================
    # TRANSFORM
    # ============================================================================

    def test_04_transform_constant(self):
        """The constant 1 maps to L^{d/2} at the zero mode and nothing else."""
        for grid in (self.grid, self.grid2):
            hat = transform(Field(grid, np.ones(grid.size))).values
            self.assertAlmostEqual(hat[0], grid.L ** (grid.d / 2), places=12)
            npt.assert_allclose(hat[1:], 0.0, atol=1e-12)

    def test_05_transform_parseval_and_inverse(self):
        f = Field(self.grid, self.smooth)
        hat = transform(f, FORWARD)
        self.assertAlmostEqual(np.linalg.norm(hat.values), f.norm(), places=10)
        back = transform(hat, INVERSE)
        npt.assert_allclose(back.values, f.values, atol=1e-12)
        with self.assertRaises(ValueError):
            transform(f, 'sideways')
        print("✅ Transform test passed")

    # ============================================================================
    # KERNEL ALGEBRA
    # ============================================================================

    def test_06_compose_with_delta(self):
        """delta is the identity of composition and has trace n^d."""
        a = Kernel(self.grid, self.random_kernel(self.grid))
        d = delta(self.grid)
        npt.assert_allclose(compose(a, d).values, a.values, atol=1e-12)
        npt.assert_allclose(compose(d, a).values, a.values, atol=1e-12)
        self.assertAlmostEqual(trace(d).real, self.grid.size, places=10)

    def test_07_compose_associative_and_weighted(self):
        g = self.grid
        a, b, c = (Kernel(g, self.random_kernel(g)) for _ in range(3))
        left = compose(compose(a, b), c).values
        right = compose(a, compose(b, c)).values
        npt.assert_allclose(left, right, rtol=1e-10, atol=1e-10)
        npt.assert_allclose(compose(a, b).values, g.weight * a.values @ b.values)

    def test_08_outer_trace_density(self):
        """trace(phi (x) conj phi) = ||phi||^2 and its diagonal is |phi|^2."""
        f = Field(self.grid, self.smooth)
        k = outer(f.conj(), f, HERMITIAN)
        npt.assert_allclose(trace_density(k).values, np.abs(f.values) ** 2, atol=1e-12)
        self.assertAlmostEqual(trace(k).real, f.norm() ** 2, places=10)

    def test_09_grid_mismatch(self):
        a = Kernel(self.grid, self.random_kernel(self.grid))
        b = Kernel(Grid(d=1, n=16), np.eye(16))
        with self.assertRaises(GridMismatchError):
            compose(a, b)

    # ============================================================================
    # SPECTRAL OPERATORS
    # ============================================================================

    def test_10_laplacian_of_plane_wave(self):
        g = self.grid
        x = g.points[:, 0]
        wave = np.exp(3j * x)
        npt.assert_allclose(g.laplacian(wave), -9 * wave, atol=1e-10)

    def test_11_free_flow_matches_analytic(self):
        """e^{i Delta tau} multiplies each plane wave by e^{-i m^2 tau}."""
        g = self.grid
        x = g.points[:, 0]
        tau = 0.37
        f = np.exp(2j * x) + 0.5 * np.exp(-5j * x)
        exact = np.exp(-4j * tau) * np.exp(2j * x) + 0.5 * np.exp(-25j * tau) * np.exp(-5j * x)
        npt.assert_allclose(g.free_flow(f, tau), exact, atol=1e-10)

    def test_12_free_flow_on_kernel_variables(self):
        """Flows on x and y commute; the Gamma flow preserves hermiticity and the trace."""
        g = self.grid
        tau = 0.21
        k = self.random_kernel(g, HERMITIAN)
        xy = g.free_flow(g.free_flow(k, tau, X_AXIS, sign=-1), tau, Y_AXIS)
        yx = g.free_flow(g.free_flow(k, tau, Y_AXIS), tau, X_AXIS, sign=-1)
        npt.assert_allclose(xy, yx, atol=1e-10)
        npt.assert_allclose(xy, xy.conj().T, atol=1e-10)
        self.assertAlmostEqual(np.trace(xy).real, np.trace(k).real, places=9)
        print("✅ Kernel free flow test passed")

    def test_13_two_dimensional_flow(self):
        g = self.grid2
        x, y = g.points[:, 0], g.points[:, 1]
        f = np.exp(1j * (x + 2 * y))
        npt.assert_allclose(g.free_flow(f, 0.5), np.exp(-2.5j) * f, atol=1e-10)


if __name__ == '__main__':
    unittest.main()
