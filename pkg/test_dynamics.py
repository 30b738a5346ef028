"""
Test suite for the coupled (phi, Lambda, Gamma) integrator, its monitors, the uncoupled
system and the mode-space form of the equations.
"""

import unittest
from dataclasses import replace

import numpy as np
import numpy.testing as npt

from bogoliubov import hierarchy_source_values, recover_pair_values
from config import InitialConfig, make_rng
from dynamics import (RK4_MOL, STRANG, IntegratorConfig, ModeSpaceHFB, Trajectory, conserved_energy,
                      conserved_number, corrected_pair, default_dt, evolve, evolve_uncoupled, from_uncoupled,
                      full_derivative, gamma_eigenvalue_floor, initial_state, interaction_for, monitor,
                      rhs_gamma, rhs_lambda, rhs_lambda_values, rhs_phi, rhs_uncoupled, state_distance, step,
                      to_uncoupled, uncoupled_derivative)
from fock_oracle import ModeBasis
from grid import X_AXIS, Y_AXIS, Grid
from models import ConfigError, SymmetryError
from potential import PotentialSpec

PAIR_DATA = InitialConfig(k_mode='gaussian_pair', pair_amplitude=0.3, pair_width=0.6)


class RightHandSideTestSuite(unittest.TestCase):
    """Structure of the nonlinear right-hand sides."""

    @classmethod
    def setUpClass(cls):
        cls.grid = Grid(d=1, n=16)
        cls.potential = PotentialSpec('gaussian', 1.0, 0.5, 0.5, 16)
        cls.state, _ = initial_state(cls.grid, cls.potential, PAIR_DATA)

    def test_01_gamma_rhs_has_zero_diagonal(self):
        f = rhs_gamma(self.state).values
        npt.assert_array_equal(np.diagonal(f), 0.0)
        npt.assert_allclose(f, -f.conj().T, atol=1e-14)

    def test_02_lambda_rhs_symmetric(self):
        f = rhs_lambda(self.state).values
        npt.assert_array_equal(f, f.T)

    def test_03_matches_hierarchy_sources(self):
        """The right sides are the Wick-closed collision integrals of the hierarchy."""
        s = self.state
        J = hierarchy_source_values(self.grid, s.phi, s.lam, s.gam, s.interaction.W)
        npt.assert_allclose(rhs_phi(s).values, -J['J1'], atol=1e-10)
        npt.assert_allclose(rhs_gamma(s).values, J['J2'], atol=1e-10)
        npt.assert_allclose(rhs_lambda(s).values, -J['J3'], atol=1e-10)

    def test_04_asymmetric_lambda_rejected(self):
        s = self.state
        rng = np.random.default_rng(0)
        bad = s.lam + 0.1 * rng.standard_normal(s.lam.shape)
        with self.assertRaises(SymmetryError):
            rhs_lambda_values(s.interaction, s.phi, bad, s.gam)

    def test_05_uncoupled_rhs_tags(self):
        f_phi, f_s2, f_p2 = rhs_uncoupled(to_uncoupled(self.state))
        npt.assert_allclose(f_s2.values, f_s2.values.T, atol=1e-12)
        npt.assert_allclose(f_p2.values, -f_p2.values.conj().T, atol=1e-12)
        print("✅ Right-hand side structure tests passed")


class IntegratorTestSuite(unittest.TestCase):
    """Stepping, monitors and the reference conservation run."""

    @classmethod
    def setUpClass(cls):
        cls.grid = Grid(d=1, n=32)
        cls.potential = PotentialSpec('gaussian', 1.0, 0.5, 0.5, 16)
        cls.s0, _ = initial_state(cls.grid, cls.potential, PAIR_DATA)
        cls.cfg = IntegratorConfig(dt=1e-3, T=0.1, scheme=STRANG, output_cadence=10)
        cls.traj = evolve(cls.s0, cls.cfg)

    def test_01_config_validation(self):
        with self.assertRaises(ConfigError):
            IntegratorConfig(dt=0.0, T=1.0)
        with self.assertRaises(ConfigError):
            IntegratorConfig(dt=1e-3, T=1.0, scheme='euler')
        with self.assertRaises(ConfigError):
            IntegratorConfig(dt=0.5, T=0.1)

    def test_02_default_dt(self):
        self.assertEqual(default_dt(STRANG, self.grid), 1e-3)
        self.assertAlmostEqual(default_dt(RK4_MOL, self.grid), 0.25 * self.grid.h ** 2 / np.pi)

    def test_03_free_flow_is_exact(self):
        """With v = 0 a Strang step is the exact Fourier propagation."""
        g = self.grid
        free = replace(self.potential, amplitude=0.0)
        s0, _ = initial_state(g, free, PAIR_DATA)
        traj = evolve(s0, IntegratorConfig(dt=0.01, T=0.1, scheme=STRANG, output_cadence=10))
        final = traj.frames[-1]
        T = final.t
        npt.assert_allclose(final.phi, g.free_flow(s0.phi, T), atol=1e-10)
        lam = g.free_flow(g.free_flow(s0.lam, T, X_AXIS), T, Y_AXIS)
        gam = g.free_flow(g.free_flow(s0.gam, T, X_AXIS, sign=-1), T, Y_AXIS)
        npt.assert_allclose(final.lam, lam, atol=1e-10)
        npt.assert_allclose(final.gam, gam, atol=1e-10)
        energies = [m['energy'] for m in traj.monitors]
        npt.assert_allclose(energies, energies[0], rtol=1e-12, atol=1e-12)

    def test_04_frames_at_cadence(self):
        npt.assert_allclose(self.traj.times, np.linspace(0.0, 0.1, 11), atol=1e-12)
        self.assertEqual(len(self.traj.monitors), self.cfg.steps + 1)
        self.assertFalse(self.traj.aborted)

    def test_05_number_conserved(self):
        traces = np.array([m['trace_gamma'] for m in self.traj.monitors])
        self.assertLess(np.max(np.abs(traces - traces[0])) / traces[0], 1e-7)
        self.assertAlmostEqual(conserved_number(self.traj.frames[-1]), self.s0.N * traces[-1], places=8)

    def test_06_energy_conserved(self):
        energies = np.array([conserved_energy(s) for s in self.traj.frames])
        self.assertLess(np.max(np.abs(energies - energies[0])) / abs(energies[0]), 1e-4)

    def test_07_structure_preserved(self):
        """Symmetry, hermiticity and the symplectic constraint hold along the run."""
        for record in self.traj.monitors:
            self.assertLess(record['sym_residual_lambda'], 1e-9)
            self.assertLess(record['herm_residual_gamma'], 1e-9)
            self.assertLess(record['symplectic'], 1e-4)
            self.assertGreater(record['gamma_floor'], -1e-6)
        print("✅ Reference run conserved its invariants")

    def test_08_rk4_mol_agrees_with_strang(self):
        g = self.grid
        T = 0.02
        a = evolve(self.s0, IntegratorConfig(dt=default_dt(RK4_MOL, g), T=T, scheme=RK4_MOL, output_cadence=1000))
        b = evolve(self.s0, IntegratorConfig(dt=1e-3, T=T, scheme=STRANG, output_cadence=1000))
        self.assertLess(state_distance(a.frames[-1], b.frames[-1]), 1e-3)

    def test_09_strang_second_order(self):
        """Differences between successive dt halvings shrink by about 4."""
        g = Grid(d=1, n=16)
        pot = PotentialSpec('gaussian', 1.0, 0.6, 0.25, 4)
        s0, _ = initial_state(g, pot, PAIR_DATA)
        finals = [evolve(s0, IntegratorConfig(dt=dt, T=0.1, scheme=STRANG, output_cadence=1000)).frames[-1]
                  for dt in (0.01, 0.005, 0.0025)]
        ratio = state_distance(finals[0], finals[1]) / state_distance(finals[1], finals[2])
        self.assertGreater(ratio, 3.3)
        self.assertLess(ratio, 4.7)

    def test_10_zero_horizon(self):
        traj = evolve(self.s0, IntegratorConfig(dt=1e-3, T=0.0))
        self.assertEqual(len(traj.frames), 1)
        self.assertEqual(len(traj.monitors), 1)

    def test_11_invariant_violation_aborts(self):
        """A Gamma with a negative eigenvalue stops the run with an abort record."""
        g = self.grid
        s = self.s0
        bad = s.evolved(0.0, s.phi, s.lam, s.gam - 1e-4 * np.eye(g.size) / g.weight)
        self.assertLess(gamma_eigenvalue_floor(bad), -1e-6)
        traj = evolve(bad, IntegratorConfig(dt=1e-3, T=0.01))
        self.assertTrue(traj.aborted)
        self.assertEqual(traj.abort['monitor'], 'gamma_floor')

    def test_12_trajectory_times_increase(self):
        traj = Trajectory()
        traj.append_frame(self.s0)
        with self.assertRaises(ValueError):
            traj.append_frame(self.s0)

    def test_13_single_step_keeps_tags(self):
        s1 = step(self.s0, self.cfg)
        npt.assert_array_equal(s1.lam, s1.lam.T)
        npt.assert_array_equal(s1.gam, s1.gam.conj().T)
        self.assertAlmostEqual(s1.t, 1e-3)


class ReferenceRunTestSuite(unittest.TestCase):
    """Gaussian condensate with k = 0, N = 16, beta = 1/2 on 64 points up to T = 0.5."""

    @classmethod
    def setUpClass(cls):
        grid = Grid(d=1, n=64)
        potential = PotentialSpec('gaussian', 1.0, 0.5, 0.5, 16)
        s0, _ = initial_state(grid, potential, InitialConfig())
        cls.traj = evolve(s0, IntegratorConfig(dt=1e-3, T=0.5, scheme=STRANG, output_cadence=50))

    def test_01_completes(self):
        self.assertFalse(self.traj.aborted)
        npt.assert_allclose(self.traj.times, np.linspace(0.0, 0.5, 11), atol=1e-12)

    def test_02_number_drift(self):
        traces = np.array([m['trace_gamma'] for m in self.traj.monitors])
        self.assertLess(np.max(np.abs(traces - traces[0])) / traces[0], 1e-7)

    def test_03_energy_drift(self):
        energies = np.array([conserved_energy(s) for s in self.traj.frames])
        self.assertLess(np.max(np.abs(energies - energies[0])) / abs(energies[0]), 1e-5)

    def test_04_structure(self):
        for record in self.traj.monitors:
            self.assertLess(record['sym_residual_lambda'], 1e-9)
            self.assertLess(record['herm_residual_gamma'], 1e-9)
            self.assertLess(record['symplectic'], 1e-4)
        print("✅ Reference conservation run within tolerances")


class InitialDataTestSuite(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.grid = Grid(d=1, n=32)
        cls.potential = PotentialSpec('gaussian', 1.0, 0.5, 0.5, 16)

    def test_01_zero_pair_flagged(self):
        with self.assertLogs('dynamics', level='WARNING'):
            s, flags = initial_state(self.grid, self.potential, InitialConfig())
        self.assertIn('k_zero_initial_data', flags)
        npt.assert_allclose(s.lam, np.outer(s.phi, s.phi))
        self.assertAlmostEqual(self.grid.norm(s.phi), 1.0)

    def test_02_pair_corrected_consistent(self):
        """The corrected family reproduces its prescribed sh(2k)."""
        initial = InitialConfig(k_mode='pair_corrected', correction_amplitude=0.3, correction_width=1.0)
        s, flags = initial_state(self.grid, self.potential, initial)
        self.assertEqual(flags, [])
        psi, _ = recover_pair_values(s.lam, s.gam, s.phi, s.N)
        expected = corrected_pair(self.grid, s.phi, s.N, s.beta, 'bump', 0.3, 1.0)
        npt.assert_allclose(psi, expected, atol=1e-8)
        self.assertGreaterEqual(gamma_eigenvalue_floor(s), -1e-12)

    def test_03_random_profile_reproducible(self):
        initial = InitialConfig(phi_profile='random_smooth')
        a, _ = initial_state(self.grid, self.potential, initial, make_rng(42))
        b, _ = initial_state(self.grid, self.potential, initial, make_rng(42))
        npt.assert_array_equal(a.phi, b.phi)
        with self.assertRaises(ConfigError):
            initial_state(self.grid, self.potential, initial, None)

    def test_04_monitor_record(self):
        s, _ = initial_state(self.grid, self.potential, PAIR_DATA)
        record = monitor(s)
        for key in ('t', 'trace_gamma', 'energy', 'sym_residual_lambda', 'herm_residual_gamma',
                    'l2_sh2k', 'linf_sh2k', 'symplectic', 'gamma_floor'):
            self.assertIn(key, record)
        self.assertGreater(record['l2_sh2k'], 0.0)
        # sup over rows bounds the L^2 norm over the box
        self.assertGreaterEqual(record['linf_sh2k'] * np.sqrt(self.grid.L), record['l2_sh2k'] * (1 - 1e-12))


class UncoupledTestSuite(unittest.TestCase):
    """The older system agrees with the coupled one as the interaction vanishes."""

    def test_01_round_trip(self):
        g = Grid(d=1, n=16)
        s, _ = initial_state(g, PotentialSpec(N=8), PAIR_DATA)
        back = from_uncoupled(to_uncoupled(s))
        self.assertLess(state_distance(s, back), 1e-12)

    def test_02_distance_decreases_with_interaction_scale(self):
        g = Grid(d=1, n=16)
        cfg = IntegratorConfig(dt=0.01, T=0.2, scheme=STRANG, output_cadence=100)
        distances = []
        for eta in (1e-1, 1e-2, 1e-3):
            pot = PotentialSpec('gaussian', eta, 0.5, 0.5, 8)
            s0, _ = initial_state(g, pot, PAIR_DATA)
            coupled = evolve(s0, cfg).frames[-1]
            uncoupled = from_uncoupled(evolve_uncoupled(to_uncoupled(s0), cfg)[-1])
            distances.append(state_distance(coupled, uncoupled))
        self.assertGreater(distances[0], distances[1])
        self.assertGreater(distances[1], distances[2])
        print(f"✅ Coupled/uncoupled distances: {distances}")

    def test_03_sources_are_coupled_sources_at_leading_order(self):
        """
        Written in s2 = 2N (Lambda - phi phi) and p2bar = 2N (Gamma - conj(phi) phi), the coupled
        derivative differs from the uncoupled one by exactly O(1/N): the gap halves when N doubles.
        """
        g = Grid(d=1, n=16)
        s, _ = initial_state(g, PotentialSpec('gaussian', 1.0, 0.5, 0.0, 8), PAIR_DATA)
        u = to_uncoupled(s)
        phi = u.phi
        gaps = []
        for N in (8, 16, 32):
            inter = interaction_for(g, PotentialSpec('gaussian', 1.0, 0.5, 0.0, N))
            lam = np.outer(phi, phi) + u.s2 / (2 * N)
            gam = np.outer(phi.conj(), phi) + u.p2bar / (2 * N)
            dphi, dlam, dgam = full_derivative(inter, N, (phi, lam, gam))
            uphi, us2, up2 = uncoupled_derivative(inter, (phi, u.s2, u.p2bar))
            ds2 = 2 * N * (dlam - np.outer(dphi, phi) - np.outer(phi, dphi))
            dp2 = 2 * N * (dgam - np.outer(dphi.conj(), phi) - np.outer(phi.conj(), dphi))
            gaps.append([g.norm(dphi - uphi) / g.norm(uphi), g.norm(ds2 - us2) / g.norm(us2),
                         g.norm(dp2 - up2) / g.norm(up2)])
        gaps = np.array(gaps)
        npt.assert_allclose(gaps[:-1] / gaps[1:], 2.0, rtol=0.05)
        self.assertTrue(np.all(gaps[-1] < 0.5))
        print(f"✅ Coupled/uncoupled source gaps at N=32: {gaps[-1]}")


class ModeSpaceTestSuite(unittest.TestCase):
    """With every plane wave kept, the mode-space equations are the grid equations."""

    @classmethod
    def setUpClass(cls):
        cls.grid = Grid(d=1, n=8)
        cls.potential = PotentialSpec('gaussian', 1.0, 0.7, 0.0, 4)
        cls.basis = ModeBasis(cls.grid, 8)
        cls.hfb = ModeSpaceHFB(cls.basis, cls.potential)
        cls.state, _ = initial_state(cls.grid, cls.potential, PAIR_DATA)

    def test_01_full_basis_matches_grid(self):
        b = self.basis
        s = self.state
        y_modes = (b.field_to_modes(s.phi), b.pair_to_modes(s.lam), b.density_to_modes(s.gam))
        d_phi, d_lam, d_gam = self.hfb.derivative(y_modes)
        inter = interaction_for(self.grid, self.potential)
        g_phi, g_lam, g_gam = full_derivative(inter, s.N, (s.phi, s.lam, s.gam))
        for got, expected in ((b.field_from_modes(d_phi), g_phi), (b.pair_from_modes(d_lam), g_lam),
                              (b.density_from_modes(d_gam), g_gam)):
            scale = np.max(np.abs(expected))
            npt.assert_allclose(got, expected, atol=1e-9 * scale)

    def test_02_mode_space_conservation(self):
        basis = ModeBasis(self.grid, 3)
        hfb = ModeSpaceHFB(basis, self.potential)
        rng = np.random.default_rng(1)
        phi = rng.standard_normal(3) + 1j * rng.standard_normal(3)
        k = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        s0 = hfb.initial(phi / np.linalg.norm(phi), 0.2 * (k + k.T) / np.linalg.norm(k + k.T, 2))
        states = hfb.evolve(s0, 0.1, 1e-3, [0.05, 0.1])
        self.assertEqual([s.t for s in states], [0.0, 0.05, 0.1])
        self.assertAlmostEqual(hfb.number(states[-1]), hfb.number(s0), places=8)
        self.assertAlmostEqual(hfb.energy(states[-1]) / hfb.energy(s0), 1.0, places=7)
        print("✅ Mode-space tests passed")


if __name__ == '__main__':
    unittest.main()
