"""
Test suite for the Takagi factorization, the hyperbolic functional calculus and the
marginals of quasi-free states.
"""

import unittest

import numpy as np
import numpy.testing as npt

from bogoliubov import (PairKernel, ch_series, closed_form_marginals, hierarchy_source_values,
                        hierarchy_sources, hierarchy_sources_from_tensors, hyperbolic_from_k,
                        hyperbolic_matrices, k_from_pair, kernel_symplectic_residual, marginals_from_pair,
                        matrix_hyperbolics, recover_pair, sh_series, symplectic_residual, takagi,
                        takagi_matrix)
from grid import Field, Grid, Kernel
from models import SYMMETRIC, TakagiError
from potential import PotentialSpec, build_vN, interaction_matrix


def random_symmetric(rng, size, norm):
    a = rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))
    a = 0.5 * (a + a.T)
    return norm * a / np.linalg.norm(a, 2)


class TakagiTestSuite(unittest.TestCase):
    """Factorization of complex symmetric matrices."""

    @classmethod
    def setUpClass(cls):
        cls.rng = np.random.default_rng(11)

    def test_01_reconstruction(self):
        a = random_symmetric(self.rng, 12, 2.0)
        u, s = takagi_matrix(a)
        npt.assert_allclose(u @ np.diag(s) @ u.T, a, atol=1e-10)
        npt.assert_allclose(u.conj().T @ u, np.eye(12), atol=1e-10)
        self.assertTrue(np.all(np.diff(s) <= 1e-12))

    def test_02_degenerate_singular_values(self):
        """Repeated singular values are handled by the cluster square root."""
        q, _ = np.linalg.qr(self.rng.standard_normal((6, 6)) + 1j * self.rng.standard_normal((6, 6)))
        a = q @ np.diag([1.0, 1.0, 1.0, 0.5, 0.5, 0.0]) @ q.T
        u, s = takagi_matrix(a)
        npt.assert_allclose(s, [1.0, 1.0, 1.0, 0.5, 0.5, 0.0], atol=1e-10)
        npt.assert_allclose(u @ np.diag(s) @ u.T, a, atol=1e-10)

    def test_03_zero_and_nonsymmetric(self):
        u, s = takagi_matrix(np.zeros((4, 4)))
        npt.assert_array_equal(s, 0.0)
        with self.assertRaises(TakagiError):
            takagi_matrix(self.rng.standard_normal((4, 4)))
        print("✅ Takagi tests passed")


class HyperbolicTestSuite(unittest.TestCase):
    """sh(k), ch(k) and the identities between them."""

    @classmethod
    def setUpClass(cls):
        cls.rng = np.random.default_rng(5)
        cls.grid = Grid(d=1, n=16)
        k_op = random_symmetric(cls.rng, cls.grid.size, 0.6)
        cls.k = PairKernel.from_values(cls.grid, k_op / cls.grid.weight)
        cls.k_op = k_op
        cls.pair = hyperbolic_from_k(cls.k)

    def test_01_factors_reconstruct_kernel(self):
        factors = takagi(self.k.k)
        npt.assert_allclose(factors.reconstruct(), self.k.k.values, atol=1e-8)

    def test_02_matches_power_series(self):
        """Takagi calculus agrees with the truncated series for sh and ch."""
        w = self.grid.weight
        npt.assert_allclose(self.pair.u * w, sh_series(self.k_op), atol=1e-12)
        npt.assert_allclose(self.pair.c * w, ch_series(self.k_op), atol=1e-12)

    def test_03_symplectic_identities(self):
        res = symplectic_residual(self.pair)
        for name, value in res.items():
            self.assertLess(value, 1e-9, name)
        self.assertLess(kernel_symplectic_residual(self.grid, self.pair.s2, self.pair.w2), 1e-9)

    def test_04_small_kernels_stay_accurate(self):
        """ch - 1 is assembled without cancellation."""
        tiny = random_symmetric(self.rng, 8, 1e-9)
        u, s = takagi_matrix(tiny)
        mats = hyperbolic_matrices(u, s)
        npt.assert_allclose(mats['ch_minus_one'], 0.5 * tiny @ tiny.conj(), atol=1e-28)

    def test_05_matrix_hyperbolics_mode_space(self):
        S, C = matrix_hyperbolics(self.k_op)
        npt.assert_allclose(C @ C - S @ S.conj(), np.eye(len(C)), atol=1e-10)
        npt.assert_allclose(C @ S, S @ C.conj(), atol=1e-10)


class MarginalTestSuite(unittest.TestCase):
    """Pair data recovery and the closed-form marginals."""

    @classmethod
    def setUpClass(cls):
        cls.rng = np.random.default_rng(3)
        cls.grid = Grid(d=1, n=8)
        cls.N = 4
        x = cls.grid.points[:, 0]
        phi = np.exp(np.cos(x)) * (1 + 0.2j * np.sin(x))
        cls.phi = Field(cls.grid, phi / cls.grid.norm(phi))
        k_op = random_symmetric(cls.rng, cls.grid.size, 0.4)
        cls.k = PairKernel.from_values(cls.grid, k_op / cls.grid.weight)
        cls.pair = hyperbolic_from_k(cls.k)
        cls.lam, cls.gam = marginals_from_pair(cls.phi, cls.pair, cls.N)
        spec = PotentialSpec('gaussian', 1.0, 0.8, 0.0, cls.N)
        cls.vN = build_vN(spec, cls.grid)

    def test_01_recover_pair(self):
        psi, omega = recover_pair(self.lam, self.gam, self.phi, self.N)
        npt.assert_allclose(psi.values, self.pair.s2, atol=1e-10)
        npt.assert_allclose(omega.values, self.pair.omega, atol=1e-10)

    def test_02_k_from_pair_inverts(self):
        psi = Kernel(self.grid, self.pair.s2, SYMMETRIC, tol=1e-10)
        k = k_from_pair(psi)
        npt.assert_allclose(k.k.values, self.k.k.values, atol=1e-8)

    def test_03_k_zero_marginals(self):
        """With k = 0 every marginal is a product of phi factors."""
        g = self.grid
        f = self.phi.values
        zero = np.zeros((g.size, g.size), dtype=complex)
        c = g.delta_values()
        l12 = closed_form_marginals(self.phi, zero, c, self.N, (1, 2))
        npt.assert_allclose(l12, np.einsum('y,a,b->yab', f.conj(), f, f), atol=1e-12)
        l22 = closed_form_marginals(self.phi, zero, c, self.N, (2, 2))
        npt.assert_allclose(l22, np.einsum('p,q,a,b->pqab', f.conj(), f.conj(), f, f), atol=1e-12)

    def test_04_marginal_contractions(self):
        """L_{1,2} is symmetric in its two annihilation labels."""
        g = self.grid
        l12 = closed_form_marginals(self.phi, self.pair.u, self.pair.c, self.N, (1, 2))
        # annihilation labels commute
        npt.assert_allclose(l12, np.swapaxes(l12, 1, 2), atol=1e-12)
        self.assertEqual(l12.shape, (g.size,) * 3)

    def test_05_unsupported_marginal(self):
        with self.assertRaises(ValueError):
            closed_form_marginals(self.phi, self.pair.u, self.pair.c, self.N, (2, 1))

    def test_06_hierarchy_sources_agree(self):
        """Wick-contracted collision terms equal the ones contracted from materialized marginals."""
        g = self.grid
        W = interaction_matrix(self.vN)
        tensors = [closed_form_marginals(self.phi, self.pair.u, self.pair.c, self.N, which)
                   for which in ((1, 2), (2, 2), (1, 3))]
        direct = hierarchy_sources_from_tensors(g, *tensors, W)
        wick = hierarchy_source_values(g, self.phi.values, self.lam.values, self.gam.values, W)
        for name in ('J1', 'J2', 'J3'):
            scale = max(np.max(np.abs(direct[name])), 1.0)
            npt.assert_allclose(wick[name], direct[name], atol=1e-9 * scale, err_msg=name)
        via_fields = hierarchy_sources(self.phi, self.lam, self.gam, self.vN)
        npt.assert_allclose(via_fields['J2'], wick['J2'])

    def test_07_k_from_pair_beyond_unit_singular_values(self):
        """Strong pairing puts sh(2 sigma) above 1; the arcsinh inversion still recovers k."""
        g = self.grid
        k_op = random_symmetric(np.random.default_rng(17), g.size, 1.3)
        k = PairKernel.from_values(g, k_op / g.weight)
        pair = hyperbolic_from_k(k)
        _, tau = takagi_matrix(g.weight * pair.s2)
        self.assertGreater(tau.max(), 1.0)
        back = k_from_pair(Kernel(g, pair.s2, SYMMETRIC, tol=1e-10))
        npt.assert_allclose(back.k.values, k.k.values, atol=1e-8 * np.max(np.abs(k.k.values)))
        print("✅ Hierarchy collision terms and pair inversion agree")


if __name__ == '__main__':
    unittest.main()
