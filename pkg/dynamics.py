"""
Time integration of the coupled (phi, Lambda, Gamma) system and of the older
uncoupled (phi, sh(2k), conj(ch(2k)) - delta) system.

Sign convention: S u = F means d/dt u = i (Delta u + F). The right-hand sides
returned by rhs_* exclude the linear parts, which are integrated exactly:

    phi     e^{i Delta t}
    Lambda  e^{i (Delta_x + Delta_y) t}, then the phase e^{-i v_N(x - y) t / N}
    Gamma   e^{i (Delta_y - Delta_x) t}
"""
from dataclasses import dataclass, field as dataclass_field, replace
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np

from bogoliubov import (PairKernel, hyperbolic_from_k, k_from_pair, kernel_symplectic_residual,
                        marginals_from_pair, matrix_hyperbolics, recover_pair_values, takagi_matrix)
from fock_oracle import ModeBasis
from grid import Field, Grid, Kernel, X_AXIS, Y_AXIS
from models import (ConfigError, HERMITIAN, InvariantAbort, SYMMETRIC, SymmetryError,
                    hermiticity_residual, symmetry_residual)
from potential import PROFILES, PotentialSpec, build_vN, convolve_values, interaction_matrix

# Configure logging
logger = logging.getLogger(__name__)

STRANG = 'strang'
RK4_MOL = 'rk4-mol'
VALID_SCHEMES = [STRANG, RK4_MOL]

SYMMETRY_TOL = 1e-9
STEP_REJECT_TOL = 1e-8
DIAGONAL_TOL = 1e-12
GAMMA_FLOOR_TOL = -1e-8
TRACE_IMAG_TOL = 1e-12
ABORT_FACTOR = 100.0


# ============================================================================
# STATE AND CONFIGURATION TYPES
# ============================================================================

@dataclass(frozen=True, eq=False)
class Interaction:
    """v_N and its dense difference-diagonal matrix on one grid."""

    grid: Grid
    spec: PotentialSpec
    vN: Field
    W: np.ndarray

    def convolve(self, f: np.ndarray) -> np.ndarray:
        return convolve_values(self.grid, self.vN.values, f)


@lru_cache(maxsize=32)
def interaction_for(grid: Grid, spec: PotentialSpec) -> Interaction:
    vN = build_vN(spec, grid)
    return Interaction(grid, spec, vN, interaction_matrix(vN))


@dataclass(frozen=True, eq=False)
class HFBState:
    """Time-stamped (phi, Lambda, Gamma) with the interaction it evolves under."""

    grid: Grid
    potential: PotentialSpec
    t: float
    phi: np.ndarray
    lam: np.ndarray
    gam: np.ndarray

    @property
    def N(self) -> int:
        return int(self.potential.N)

    @property
    def beta(self) -> float:
        return self.potential.beta

    @property
    def interaction(self) -> Interaction:
        return interaction_for(self.grid, self.potential)

    def phi_field(self) -> Field:
        return Field(self.grid, self.phi)

    def lam_kernel(self) -> Kernel:
        return Kernel(self.grid, self.lam, SYMMETRIC, tol=1e-10)

    def gam_kernel(self) -> Kernel:
        return Kernel(self.grid, self.gam, HERMITIAN, tol=1e-10)

    def evolved(self, t: float, phi: np.ndarray, lam: np.ndarray, gam: np.ndarray) -> 'HFBState':
        return replace(self, t=t, phi=phi, lam=lam, gam=gam)


@dataclass(frozen=True, eq=False)
class UncoupledState:
    """(phi, s2 = sh(2k), p2bar = conj(ch(2k)) - delta) of the uncoupled system."""

    grid: Grid
    potential: PotentialSpec
    t: float
    phi: np.ndarray
    s2: np.ndarray
    p2bar: np.ndarray

    @property
    def N(self) -> int:
        return int(self.potential.N)

    @property
    def interaction(self) -> Interaction:
        return interaction_for(self.grid, self.potential)


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size, horizon, scheme, output cadence (in steps) and monitor toggles."""

    dt: float
    T: float
    scheme: str = STRANG
    output_cadence: int = 1
    monitor_energy: bool = True
    monitor_pairs: bool = True

    def __post_init__(self):
        errors = {}
        if not self.dt > 0:
            errors['dt'] = 'Time step must be positive'
        if self.T < 0:
            errors['T'] = 'Horizon must be non-negative'
        elif self.T > 0 and self.dt > self.T:
            errors['dt'] = 'Time step must not exceed the horizon'
        if self.scheme not in VALID_SCHEMES:
            errors['scheme'] = f"Scheme must be one of: {', '.join(VALID_SCHEMES)}"
        if self.output_cadence < 1:
            errors['output_cadence'] = 'Output cadence must be at least one step'
        if errors:
            raise ConfigError('Invalid integrator configuration', errors)

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt)) if self.T > 0 else 0


def default_dt(scheme: str, grid: Grid) -> float:
    """0.25 h^2 / pi for the explicit method of lines, 1e-3 for the splitting."""
    if scheme == RK4_MOL:
        return 0.25 * grid.h ** 2 / np.pi
    return 1e-3


@dataclass
class Trajectory:
    """Frames at the output cadence plus one monitor record per step."""

    frames: List[HFBState] = dataclass_field(default_factory=list)
    monitors: List[Dict[str, float]] = dataclass_field(default_factory=list)
    abort: Optional[Dict[str, float]] = None
    flags: List[str] = dataclass_field(default_factory=list)

    def append_frame(self, state: HFBState):
        if self.frames and not state.t > self.frames[-1].t:
            raise ValueError('Trajectory times must be strictly increasing')
        self.frames.append(state)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.frames])

    @property
    def grid(self) -> Grid:
        return self.frames[0].grid

    @property
    def aborted(self) -> bool:
        return self.abort is not None

    def stack(self, name: str) -> np.ndarray:
        """Array of one state variable over the frames, frame index first."""
        return np.stack([getattr(s, name) for s in self.frames])


# ============================================================================
# COUPLED RIGHT-HAND SIDES
# ============================================================================

def _densities(inter: Interaction, phi: np.ndarray, gam: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    U = inter.convolve(np.real(np.diagonal(gam)))
    q = inter.convolve(np.abs(phi) ** 2)
    return U, q


def rhs_phi_values(inter: Interaction, phi: np.ndarray, lam: np.ndarray, gam: np.ndarray) -> np.ndarray:
    grid = inter.grid
    w = grid.weight
    W = inter.W
    U, _ = _densities(inter, phi, gam)
    lam_c = lam - np.outer(phi, phi)
    gam_c = gam - np.outer(phi.conj(), phi)
    return -U * phi - w * ((W * gam_c.T) @ phi + (W * lam_c) @ phi.conj())


def rhs_lambda_values(inter: Interaction, phi: np.ndarray, lam: np.ndarray, gam: np.ndarray) -> np.ndarray:
    w = inter.grid.weight
    W = inter.W
    U, q = _densities(inter, phi, gam)
    a = w * ((W * lam) @ gam + lam @ (W * gam))
    out = -(U[:, None] + U[None, :]) * lam - (a + a.T) + 2 * (q[:, None] + q[None, :]) * np.outer(phi, phi)
    residual = symmetry_residual(out)
    if residual > SYMMETRY_TOL:
        logger.error(f"Lambda right side lost symmetry: {residual:.3e}")
        raise SymmetryError('Lambda right side is not symmetric', residual)
    return 0.5 * (out + out.T)


def rhs_gamma_values(inter: Interaction, phi: np.ndarray, lam: np.ndarray, gam: np.ndarray) -> np.ndarray:
    w = inter.grid.weight
    W = inter.W
    U, q = _densities(inter, phi, gam)
    fb = phi.conj()
    left = w * ((W * lam.conj()) @ lam + (W * gam) @ gam) + U[:, None] * gam - 2 * np.outer(fb * q, phi)
    right = w * (lam.conj() @ (W * lam) + gam @ (W * gam)) + gam * U[None, :] - 2 * np.outer(fb, phi * q)
    out = left - right
    scale = max(float(np.max(np.abs(left))), float(np.max(np.abs(right))), 1e-300)
    diag = float(np.max(np.abs(np.diagonal(out))))
    if diag > DIAGONAL_TOL * scale:
        logger.error(f"Gamma right side has nonzero diagonal: {diag:.3e}")
        raise SymmetryError('Gamma right side has a nonzero diagonal', diag / scale)
    np.fill_diagonal(out, 0.0)
    return 0.5 * (out - out.conj().T)


def rhs_phi(s: HFBState) -> Field:
    """Right side F of (1/i) d_t phi - Delta phi = F."""
    return Field(s.grid, rhs_phi_values(s.interaction, s.phi, s.lam, s.gam))


def rhs_lambda(s: HFBState) -> Kernel:
    """Right side of the Lambda equation without -Delta_x - Delta_y and (1/N) v_N(x - y)."""
    return Kernel(s.grid, rhs_lambda_values(s.interaction, s.phi, s.lam, s.gam), SYMMETRIC)


def rhs_gamma(s: HFBState) -> Kernel:
    """Right side of (1/i) d_t Gamma - (Delta_y - Delta_x) Gamma = F; zero diagonal."""
    return Kernel(s.grid, rhs_gamma_values(s.interaction, s.phi, s.lam, s.gam))


def full_derivative(inter: Interaction, N: int, y: Tuple[np.ndarray, ...]) -> Tuple[np.ndarray, ...]:
    """d/dt of (phi, Lambda, Gamma) including the linear parts."""
    grid = inter.grid
    phi, lam, gam = y
    dphi = grid.laplacian(phi) + rhs_phi_values(inter, phi, lam, gam)
    dlam = (grid.laplacian(lam, X_AXIS) + grid.laplacian(lam, Y_AXIS) - inter.W * lam / N
            + rhs_lambda_values(inter, phi, lam, gam))
    dgam = (grid.laplacian(gam, Y_AXIS) - grid.laplacian(gam, X_AXIS)
            + rhs_gamma_values(inter, phi, lam, gam))
    return 1j * dphi, 1j * dlam, 1j * dgam


def nonlinear_derivative(inter: Interaction, y: Tuple[np.ndarray, ...]) -> Tuple[np.ndarray, ...]:
    phi, lam, gam = y
    return (1j * rhs_phi_values(inter, phi, lam, gam),
            1j * rhs_lambda_values(inter, phi, lam, gam),
            1j * rhs_gamma_values(inter, phi, lam, gam))


def rk4(f: Callable[[Tuple[np.ndarray, ...]], Tuple[np.ndarray, ...]],
        y: Tuple[np.ndarray, ...], dt: float) -> Tuple[np.ndarray, ...]:
    """Classic four-stage explicit update on a tuple of arrays."""
    k1 = f(y)
    k2 = f(tuple(a + 0.5 * dt * b for a, b in zip(y, k1)))
    k3 = f(tuple(a + 0.5 * dt * b for a, b in zip(y, k2)))
    k4 = f(tuple(a + dt * b for a, b in zip(y, k3)))
    return tuple(a + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4))


# ============================================================================
# STEPPING
# ============================================================================

def _linear_half(inter: Interaction, N: int, y: Tuple[np.ndarray, ...], tau: float,
                 phase_first: bool) -> Tuple[np.ndarray, ...]:
    grid = inter.grid
    phi, lam, gam = y
    phase = np.exp(-1j * inter.W * tau / N)
    phi = grid.free_flow(phi, tau)
    if phase_first:
        lam = phase * lam
    lam = grid.free_flow(grid.free_flow(lam, tau, X_AXIS), tau, Y_AXIS)
    if not phase_first:
        lam = phase * lam
    gam = grid.free_flow(grid.free_flow(gam, tau, X_AXIS, sign=-1), tau, Y_AXIS)
    return phi, lam, gam


def step(s: HFBState, cfg: IntegratorConfig) -> HFBState:
    """
    One time step of the coupled system.

    Raises:
        InvariantAbort: symmetry or hermiticity residual above 1e-8 after the step
    """
    inter = s.interaction
    N = s.N
    dt = cfg.dt
    y = (s.phi, s.lam, s.gam)
    if cfg.scheme == STRANG:
        y = _linear_half(inter, N, y, dt / 2, phase_first=False)
        y = rk4(lambda z: nonlinear_derivative(inter, z), y, dt)
        y = _linear_half(inter, N, y, dt / 2, phase_first=True)
    else:
        y = rk4(lambda z: full_derivative(inter, N, z), y, dt)
    phi, lam, gam = y

    sym = symmetry_residual(lam)
    herm = hermiticity_residual(gam)
    worst = max(sym, herm)
    if not np.isfinite(worst) or worst > STEP_REJECT_TOL:
        monitor = 'sym_residual_lambda' if sym >= herm else 'herm_residual_gamma'
        logger.error(f"Step rejected at t={s.t + dt:.6g}: {monitor}={worst:.3e}")
        raise InvariantAbort(f"step rejected: {monitor} = {worst:.3e}", s.t + dt, monitor, worst)
    return s.evolved(s.t + dt, phi, 0.5 * (lam + lam.T), 0.5 * (gam + gam.conj().T))


# ============================================================================
# CONSERVED QUANTITIES AND MONITORS
# ============================================================================

def conserved_number(s: HFBState) -> float:
    """N trace(Gamma)."""
    return float(s.N * s.grid.weight * np.real(np.trace(s.gam)))


def energy_values(grid: Grid, W: np.ndarray, N: int, phi: np.ndarray, lam: np.ndarray, gam: np.ndarray) -> float:
    w = grid.weight
    kinetic = N * w * np.real(np.trace(grid.laplacian(gam, Y_AXIS)))
    rho = np.real(np.diagonal(gam))
    dens = np.abs(phi) ** 2
    integrand = np.abs(lam) ** 2 + np.abs(gam) ** 2 + np.outer(rho, rho) - 2 * np.outer(dens, dens)
    potential = -0.5 * N * w ** 2 * np.sum(W * integrand)
    return float(kinetic + potential)


def conserved_energy(s: HFBState) -> float:
    """
    Expectation of the Fock Hamiltonian in the quasi-free state with data (phi, Lambda, Gamma):

        N int Delta_y Gamma(x, y)|_{y=x} dx
          - N/2 int int v_N(x - y) (|Lambda|^2 + |Gamma|^2 + rho(x) rho(y) - 2 |phi(x)|^2 |phi(y)|^2)
    """
    return energy_values(s.grid, s.interaction.W, s.N, s.phi, s.lam, s.gam)


def gamma_eigenvalue_floor(s: HFBState) -> float:
    """Smallest eigenvalue of the one-body density operator h^d Gamma."""
    g = s.grid.weight * s.gam
    return float(np.min(np.linalg.eigvalsh(0.5 * (g + g.conj().T))))


def pair_sizes(grid: Grid, psi: np.ndarray) -> Tuple[float, float]:
    """||psi||_{L^2} and sup_x ||psi(x, .)||_{L^2}."""
    rows = np.sqrt(grid.weight * np.sum(np.abs(psi) ** 2, axis=1))
    return grid.norm(psi), float(np.max(rows))


def monitor(s: HFBState, cfg: Optional[IntegratorConfig] = None) -> Dict[str, float]:
    """Per-step monitor record."""
    grid = s.grid
    trace = s.grid.weight * np.trace(s.gam)
    record = {
        't': s.t,
        'trace_gamma': float(np.real(trace)),
        'trace_gamma_imag': float(abs(np.imag(trace))),
        'number': conserved_number(s),
        'sym_residual_lambda': symmetry_residual(s.lam),
        'herm_residual_gamma': hermiticity_residual(s.gam),
        'gamma_floor': gamma_eigenvalue_floor(s),
    }
    if cfg is None or cfg.monitor_energy:
        record['energy'] = conserved_energy(s)
    if cfg is None or cfg.monitor_pairs:
        psi, omega = recover_pair_values(s.lam, s.gam, s.phi, s.N)
        l2, linf = pair_sizes(grid, psi)
        record['l2_sh2k'] = l2
        record['linf_sh2k'] = linf
        record['symplectic'] = kernel_symplectic_residual(grid, psi, omega.conj())
    return record


def _violation(record: Dict[str, float]) -> Optional[Tuple[str, float]]:
    for name, value in record.items():
        if not np.isfinite(value):
            return name, value
    limits = {
        'sym_residual_lambda': SYMMETRY_TOL * ABORT_FACTOR,
        'herm_residual_gamma': SYMMETRY_TOL * ABORT_FACTOR,
    }
    for name, limit in limits.items():
        if record[name] > limit:
            return name, record[name]
    if record['gamma_floor'] < GAMMA_FLOOR_TOL * ABORT_FACTOR:
        return 'gamma_floor', record['gamma_floor']
    if record['trace_gamma_imag'] > TRACE_IMAG_TOL * ABORT_FACTOR * max(abs(record['trace_gamma']), 1.0):
        return 'trace_gamma_imag', record['trace_gamma_imag']
    return None


def evolve(s0: HFBState, cfg: IntegratorConfig, progress: Optional[Callable[[HFBState, Dict[str, float]], None]] = None) -> Trajectory:
    """
    Integrate from s0 to cfg.T, storing frames every cfg.output_cadence steps and at T.

    A rejected step or a monitor beyond 100x its tolerance ends the run early;
    the trajectory then carries an abort record with t, monitor and value.
    """
    traj = Trajectory()
    traj.append_frame(s0)
    traj.monitors.append(monitor(s0, cfg))
    steps = cfg.steps
    if steps == 0:
        return traj
    run_cfg = replace(cfg, dt=cfg.T / steps)

    state = s0
    for i in range(1, steps + 1):
        try:
            state = step(state, run_cfg)
        except InvariantAbort as exc:
            traj.abort = {'t': exc.t, 'monitor': exc.monitor, 'value': exc.value}
            break
        record = monitor(state, run_cfg)
        traj.monitors.append(record)
        violation = _violation(record)
        if violation is not None:
            name, value = violation
            logger.error(f"Invariant {name}={value:.3e} out of bounds at t={state.t:.6g}")
            traj.abort = {'t': state.t, 'monitor': name, 'value': value}
            traj.append_frame(state)
            break
        if i % run_cfg.output_cadence == 0 or i == steps:
            traj.append_frame(state)
        if progress is not None:
            progress(state, record)
    return traj


# ============================================================================
# UNCOUPLED SYSTEM
# ============================================================================

def rhs_uncoupled_values(inter: Interaction, phi: np.ndarray, s2: np.ndarray,
                         p2bar: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    w = inter.grid.weight
    W = inter.W
    q = inter.convolve(np.abs(phi) ** 2)
    fb = phi.conj()
    m = W * np.outer(phi, phi)
    g_off = W * np.outer(fb, phi)

    f_phi = -q * phi
    f_s2 = (-(q[:, None] + q[None, :]) * s2
            - w * (g_off.T @ s2 + s2 @ g_off)
            - 2 * m - w * (m @ p2bar + p2bar.conj() @ m))
    f_p2 = ((q[:, None] - q[None, :]) * p2bar
            + w * (g_off @ p2bar - p2bar @ g_off)
            + w * (m.conj() @ s2 - s2.conj() @ m))
    return f_phi, 0.5 * (f_s2 + f_s2.T), 0.5 * (f_p2 - f_p2.conj().T)


def uncoupled_derivative(inter: Interaction, y: Tuple[np.ndarray, ...]) -> Tuple[np.ndarray, ...]:
    """d/dt of (phi, s2, p2bar) including the linear parts."""
    grid = inter.grid
    phi, s2, p2 = y
    lin = (grid.laplacian(phi),
           grid.laplacian(s2, X_AXIS) + grid.laplacian(s2, Y_AXIS),
           grid.laplacian(p2, Y_AXIS) - grid.laplacian(p2, X_AXIS))
    return tuple(1j * (a + b) for a, b in zip(lin, rhs_uncoupled_values(inter, *y)))


def rhs_uncoupled(s: UncoupledState) -> Tuple[Field, Kernel, Kernel]:
    """
    Nonlinear right sides of the uncoupled system, with ch(2k) = delta + conj(p2bar):

        phi:    -q phi
        s2:     -(q_x + q_y) s2 - (g^T o s2 + s2 o g) - 2 m - (m o p2bar + conj(p2bar) o m)
        p2bar:  (q_x - q_y) p2bar + [g, p2bar] + conj(m) o s2 - conj(s2) o m

    where q = v_N * |phi|^2, g = v_N(x - y) conj(phi)(x) phi(y), m = +v_N(x - y) phi(x) phi(y)
    and o is composition with the h^d weight. These are the coupled sources written for
    s2 = 2N (Lambda - phi phi) and p2bar = 2N (Gamma - conj(phi) phi) with the O(1/N) terms dropped.
    """
    f_phi, f_s2, f_p2 = rhs_uncoupled_values(s.interaction, s.phi, s.s2, s.p2bar)
    return (Field(s.grid, f_phi), Kernel(s.grid, f_s2, SYMMETRIC, tol=1e-10),
            Kernel(s.grid, f_p2))


def step_uncoupled(s: UncoupledState, cfg: IntegratorConfig) -> UncoupledState:
    inter = s.interaction
    grid = s.grid
    dt = cfg.dt

    def linear(y, tau):
        phi, s2, p2 = y
        return (grid.free_flow(phi, tau),
                grid.free_flow(grid.free_flow(s2, tau, X_AXIS), tau, Y_AXIS),
                grid.free_flow(grid.free_flow(p2, tau, X_AXIS, sign=-1), tau, Y_AXIS))

    def nonlinear(y):
        return tuple(1j * f for f in rhs_uncoupled_values(inter, *y))

    y = (s.phi, s.s2, s.p2bar)
    if cfg.scheme == STRANG:
        y = linear(rk4(nonlinear, linear(y, dt / 2), dt), dt / 2)
    else:
        y = rk4(lambda z: uncoupled_derivative(inter, z), y, dt)
    phi, s2, p2 = y
    return replace(s, t=s.t + dt, phi=phi, s2=0.5 * (s2 + s2.T), p2bar=0.5 * (p2 + p2.conj().T))


def evolve_uncoupled(s0: UncoupledState, cfg: IntegratorConfig) -> List[UncoupledState]:
    """Frames of the uncoupled flow at the output cadence (and at T)."""
    frames = [s0]
    steps = cfg.steps
    if steps == 0:
        return frames
    run_cfg = replace(cfg, dt=cfg.T / steps)
    state = s0
    for i in range(1, steps + 1):
        state = step_uncoupled(state, run_cfg)
        if i % run_cfg.output_cadence == 0 or i == steps:
            frames.append(state)
    return frames


def to_uncoupled(s: HFBState) -> UncoupledState:
    psi, omega = recover_pair_values(s.lam, s.gam, s.phi, s.N)
    return UncoupledState(s.grid, s.potential, s.t, s.phi.copy(), psi, omega)


def from_uncoupled(u: UncoupledState) -> HFBState:
    N = u.N
    lam = np.outer(u.phi, u.phi) + u.s2 / (2 * N)
    gam = np.outer(u.phi.conj(), u.phi) + u.p2bar / (2 * N)
    return HFBState(u.grid, u.potential, u.t, u.phi.copy(), lam, gam)


def state_distance(a: HFBState, b: HFBState) -> float:
    """||phi_a - phi_b|| + ||Lambda_a - Lambda_b|| + ||Gamma_a - Gamma_b|| in L^2."""
    g = a.grid
    return g.norm(a.phi - b.phi) + g.norm(a.lam - b.lam) + g.norm(a.gam - b.gam)


# ============================================================================
# INITIAL DATA
# ============================================================================

def condensate_profile(grid: Grid, profile: str = 'gaussian', width: float = 0.6,
                       center: Optional[float] = None, momentum: int = 0,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Unit-norm condensate on the grid.

    Profiles: 'gaussian' (periodic distance to `center`, plane-wave factor with
    `momentum` wavelengths along the first axis), 'plane_wave' and
    'random_smooth' (random coefficients on |m| <= 3 with Gaussian decay).
    """
    if profile == 'gaussian':
        c = grid.L / 2 if center is None else center
        x = grid.points - c
        x = x - grid.L * np.floor(x / grid.L + 0.5)
        values = np.exp(-np.sum(x ** 2, axis=1) / (2 * width ** 2)).astype(complex)
        values *= np.exp(2j * np.pi * momentum * grid.points[:, 0] / grid.L)
    elif profile == 'plane_wave':
        values = np.exp(2j * np.pi * momentum * grid.points[:, 0] / grid.L)
    elif profile == 'random_smooth':
        if rng is None:
            raise ConfigError('random_smooth profile needs a random generator')
        freqs = grid.frequencies
        m2 = sum((k * grid.L / (2 * np.pi)) ** 2 for k in freqs)
        coeff = (rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)) * np.exp(-m2 / 4)
        coeff[m2 > 9] = 0.0
        values = np.fft.ifftn(coeff).ravel()
    else:
        raise ConfigError(f"Unknown condensate profile '{profile}'")
    return values / grid.norm(values)


def periodic_difference_r2(grid: Grid) -> np.ndarray:
    """|x - y|^2 with the periodic (minimal image) difference, shape (size, size)."""
    diff = grid.points[:, None, :] - grid.points[None, :, :]
    diff = diff - grid.L * np.floor(diff / grid.L + 0.5)
    return np.sum(diff ** 2, axis=-1)


def gaussian_pair_kernel(grid: Grid, phi: np.ndarray, amplitude: float, width: float) -> PairKernel:
    """k(x, y) = amplitude phi(x) phi(y) exp(-|x - y|^2 / width^2)."""
    values = amplitude * np.outer(phi, phi) * np.exp(-periodic_difference_r2(grid) / width ** 2)
    return PairKernel.from_values(grid, values)


def corrected_pair(grid: Grid, phi: np.ndarray, N: int, beta: float, profile: str,
                   amplitude: float, width: float) -> np.ndarray:
    """sh(2k) of Lambda_0 = phi phi (1 - N^{beta-1} w_c(N^beta (x - y))), i.e. -2 N^beta w_c phi phi."""
    scale = float(N) ** beta
    wc = PROFILES[profile](periodic_difference_r2(grid) * scale ** 2, amplitude, width)
    psi = -2 * scale * wc * np.outer(phi, phi)
    return 0.5 * (psi + psi.T)


def state_from_pair(grid: Grid, potential: PotentialSpec, phi: np.ndarray, k: PairKernel, t: float = 0.0) -> HFBState:
    pair = hyperbolic_from_k(k)
    lam, gam = marginals_from_pair(Field(grid, phi), pair, int(potential.N))
    return HFBState(grid, potential, t, phi, lam.values, gam.values)


def initial_pair_kernel(grid: Grid, potential: PotentialSpec, initial, phi: np.ndarray) -> PairKernel:
    """k_0 for the configured family; the zero kernel for 'zero'."""
    if initial.k_mode == 'zero':
        return PairKernel.from_values(grid, np.zeros((grid.size, grid.size), dtype=complex))
    if initial.k_mode == 'gaussian_pair':
        return gaussian_pair_kernel(grid, phi, initial.pair_amplitude, initial.pair_width)
    if initial.k_mode == 'pair_corrected':
        psi = corrected_pair(grid, phi, int(potential.N), potential.beta, initial.correction_profile,
                             initial.correction_amplitude, initial.correction_width)
        return k_from_pair(Kernel(grid, psi, SYMMETRIC))
    raise ConfigError(f"Unknown k_mode '{initial.k_mode}'")


def initial_condensate(grid: Grid, initial, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return condensate_profile(grid, initial.phi_profile, initial.phi_width, initial.phi_center,
                              initial.phi_momentum, rng)


def initial_state(grid: Grid, potential: PotentialSpec, initial, rng: Optional[np.random.Generator] = None) -> Tuple[HFBState, List[str]]:
    """
    Build the initial (phi, Lambda, Gamma) for one of the families 'zero',
    'gaussian_pair' or 'pair_corrected'.

    Returns:
        (state, flags) where flags name numerically legal but irregular choices
    """
    flags = []
    phi = initial_condensate(grid, initial, rng)
    if initial.k_mode == 'zero':
        logger.warning('k = 0 initial data: pair kernels start at zero')
        flags.append('k_zero_initial_data')
        return HFBState(grid, potential, 0.0, phi, np.outer(phi, phi), np.outer(phi.conj(), phi)), flags
    k = initial_pair_kernel(grid, potential, initial, phi)
    return state_from_pair(grid, potential, phi, k), flags


# ============================================================================
# MODE-SPACE (GALERKIN) SYSTEM
# ============================================================================

@dataclass(frozen=True, eq=False)
class ModeState:
    t: float
    phi: np.ndarray
    lam: np.ndarray
    gam: np.ndarray


class ModeSpaceHFB:
    """
    The coupled system projected on M plane-wave modes.

    Equations follow from (1/i) d_t <A> = <[A, H]> with
    H = sum_j T_j a*_j a_j - (1/2N) sum V_{ij,kl} a*_i a*_j a_l a_k and
    the Wick factorization of the cubic and quartic moments.
    """

    def __init__(self, basis: ModeBasis, potential: PotentialSpec):
        self.basis = basis
        self.potential = potential
        self.N = int(potential.N)
        inter = interaction_for(basis.grid, potential)
        self.V = basis.two_body_elements(inter.W)
        self.T = -basis.xi_squared

    @staticmethod
    def moments(phi: np.ndarray, lam: np.ndarray, gam: np.ndarray) -> Dict[str, np.ndarray]:
        fb = phi.conj()
        w3 = (np.einsum('j,lk->jlk', fb, lam) + np.einsum('jl,k->jlk', gam, phi)
              + np.einsum('jk,l->jlk', gam, phi) - 2 * np.einsum('j,l,k->jlk', fb, phi, phi))
        w4c = (np.einsum('jp,qr->jpqr', gam, lam) + np.einsum('jq,pr->jpqr', gam, lam)
               + np.einsum('jr,pq->jpqr', gam, lam) - 2 * np.einsum('j,p,q,r->jpqr', fb, phi, phi, phi))
        w4 = (np.einsum('ij,lk->ijlk', lam.conj(), lam) + np.einsum('il,jk->ijlk', gam, gam)
              + np.einsum('ik,jl->ijlk', gam, gam) - 2 * np.einsum('i,j,l,k->ijlk', fb, fb, phi, phi))
        return {'W3': w3, 'W4c': w4c, 'W4': w4}

    def derivative(self, y: Tuple[np.ndarray, ...]) -> Tuple[np.ndarray, ...]:
        phi, lam, gam = y
        V, T, N = self.V, self.T, self.N
        mom = self.moments(phi, lam, gam)
        dphi = T * phi - np.einsum('mjkl,jlk->m', V, mom['W3'])
        dlam = ((T[:, None] + T[None, :]) * lam
                - np.einsum('nmkl,lk->mn', V, lam) / N
                - np.einsum('mjkl,jlkn->mn', V, mom['W4c'])
                - np.einsum('njkl,jmlk->mn', V, mom['W4c']))
        dgam = ((T[None, :] - T[:, None]) * gam
                - np.einsum('njkl,mjlk->mn', V, mom['W4'])
                + np.einsum('mjkl,kljn->mn', V.conj(), mom['W4']))
        return 1j * dphi, 1j * dlam, 1j * dgam

    def initial(self, phi_modes: np.ndarray, k_modes: np.ndarray) -> ModeState:
        """Quasi-free marginals of e^{-sqrt(N) A(phi)} e^{-B(k)} Omega in mode coordinates."""
        S, C = matrix_hyperbolics(k_modes)
        lam = np.outer(phi_modes, phi_modes) + C @ S / self.N
        gam = np.outer(phi_modes.conj(), phi_modes) + S.conj() @ S / self.N
        return ModeState(0.0, phi_modes.astype(complex), lam, gam)

    def energy(self, s: ModeState) -> float:
        w4 = self.moments(s.phi, s.lam, s.gam)['W4']
        kinetic = self.N * np.sum(self.T * np.real(np.diagonal(s.gam)))
        return float(np.real(kinetic - 0.5 * self.N * np.einsum('ijkl,ijlk->', self.V, w4)))

    def number(self, s: ModeState) -> float:
        return float(self.N * np.real(np.trace(s.gam)))

    def evolve(self, s0: ModeState, T: float, dt: float, times: Optional[Sequence[float]] = None) -> List[ModeState]:
        """
        RK4 integration; returns states at `times` (default: every step).

        Each output time is hit exactly by shortening the step that reaches it.
        """
        if times is None:
            steps = int(round(T / dt)) if T > 0 else 0
            times = [T * i / steps for i in range(1, steps + 1)] if steps else []
        out = [s0]
        y = (s0.phi, s0.lam, s0.gam)
        t = s0.t
        for target in times:
            while target - t > 1e-14:
                h = min(dt, target - t)
                y = rk4(self.derivative, y, h)
                t += h
            t = target
            out.append(ModeState(t, *y))
        return out

    def pair_kernel(self, s: ModeState) -> np.ndarray:
        """Mode-space k recovered from psi = 2N (Lambda - phi phi)."""
        psi = 2 * self.N * (s.lam - np.outer(s.phi, s.phi))
        u, tau = takagi_matrix(0.5 * (psi + psi.T), tol=1e-8)
        return (u * (0.5 * np.arcsinh(tau))) @ u.T

    def to_grid(self, s: ModeState) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        b = self.basis
        return b.field_from_modes(s.phi), b.pair_from_modes(s.lam), b.density_from_modes(s.gam)
