"""
Post-processing of stored trajectories: Sobolev-weighted and collapsing norms,
the composite well-posedness norms, pair-kernel size reports and the residuals
of the hierarchy and of the sh(2k)/ch(2k) equations.
"""
from dataclasses import dataclass, field as dataclass_field
from functools import lru_cache
from typing import Any, Dict, List, Optional, Union
import logging

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from bogoliubov import (closed_form_marginals, hierarchy_source_values, hierarchy_sources_from_tensors,
                        hyperbolic_from_k, k_from_pair, kernel_symplectic_residual, recover_pair_values)
from dynamics import Trajectory, conserved_energy, conserved_number
from grid import Field, Grid, Kernel, X_AXIS, Y_AXIS
from models import NO_SYMMETRY, SYMMETRIC, TakagiError, TrajectoryError

# Configure logging
logger = logging.getLogger(__name__)

LAMBDA_TYPE = 'S'
GAMMA_TYPE = 'W'
DEFAULT_EPSILON = 0.1
# interior-frame residual above this multiple of the median marks an outlier
OUTLIER_FACTOR = 10.0


@dataclass
class NormReport:
    """Named functional values, the parameters they were computed with and optional time series."""

    values: Dict[str, float]
    params: Dict[str, Any] = dataclass_field(default_factory=dict)
    series: Dict[str, List[float]] = dataclass_field(default_factory=dict)
    flags: List[str] = dataclass_field(default_factory=list)

    def __post_init__(self):
        for name, value in self.values.items():
            if not np.isfinite(value):
                self.flags.append(f"non_finite:{name}")
            elif value < 0:
                raise ValueError(f"Norm '{name}' is negative: {value}")

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.series)

    def to_dict(self) -> dict:
        return {
            'values': {k: float(v) for k, v in self.values.items()},
            'params': self.params,
            'flags': list(self.flags),
        }


def _require_frames(traj: Trajectory, minimum: int = 1) -> Grid:
    if len(traj.frames) < minimum:
        raise TrajectoryError(f"Trajectory has {len(traj.frames)} frames, need at least {minimum}")
    return traj.grid


# ============================================================================
# SOBOLEV WEIGHTS
# ============================================================================

def sobolev_multiplier(grid: Grid, s: float, homogeneous: bool = False) -> np.ndarray:
    """(1 + |xi|^2)^{s/2}, or |xi|^s with the zero mode set to 0."""
    if not -2.0 <= s <= 2.0:
        raise ValueError(f"Sobolev exponent {s} outside [-2, 2]")
    xi2 = grid.xi_squared
    if not homogeneous:
        return (1.0 + xi2) ** (s / 2)
    out = np.zeros_like(xi2)
    nonzero = xi2 > 0
    out[nonzero] = xi2[nonzero] ** (s / 2)
    return out


def sobolev_weight(obj: Union[Field, Kernel], s: float, homogeneous: bool = False,
                   variables: tuple = (X_AXIS, Y_AXIS)) -> Union[Field, Kernel]:
    """Apply the Sobolev multiplier to a field, or to the chosen variables of a kernel."""
    grid = obj.grid
    mult = sobolev_multiplier(grid, s, homogeneous)
    if isinstance(obj, Field):
        return Field(grid, grid.apply_multiplier(obj.values, mult))
    values = obj.values
    for axis in variables:
        values = grid.apply_multiplier(values, mult, axis)
    tag = obj.tag if set(variables) == {X_AXIS, Y_AXIS} else NO_SYMMETRY
    return Kernel(grid, values, tag, tol=1e-10)


# ============================================================================
# COLLAPSING NORMS
# ============================================================================

@lru_cache(maxsize=8)
def _shift_index(grid: Grid) -> np.ndarray:
    """flat index of x + z for every (x, z), shape (size, size)."""
    idx = grid.multi_indices
    total = (idx[:, None, :] + idx[None, :, :]) % grid.n
    return np.ravel_multi_index(tuple(total[..., k] for k in range(grid.d)), grid.shape)


def shifted_diagonals(grid: Grid, kernel: np.ndarray) -> np.ndarray:
    """D[x, z] = K(x + z, x)."""
    return kernel[_shift_index(grid), np.arange(grid.size)[:, None]]


def collapsing_norm_values(grid: Grid, times: np.ndarray, kernels: np.ndarray, s: float,
                           homogeneous: bool = False) -> float:
    """sup_z || W_s [x -> K(t, x + z, x)] ||_{L^2(dt dx)} with trapezoid quadrature in t."""
    mult = sobolev_multiplier(grid, s, homogeneous)
    per_frame = []
    for kernel in kernels:
        d = grid.apply_multiplier(shifted_diagonals(grid, kernel), mult, X_AXIS)
        per_frame.append(grid.weight * np.sum(np.abs(d) ** 2, axis=0))
    per_frame = np.array(per_frame)
    if len(times) < 2:
        return 0.0
    return float(np.sqrt(np.max(trapezoid(per_frame, times, axis=0))))


def collapsing_norm(traj: Trajectory, s: float, variant: str = LAMBDA_TYPE) -> float:
    """
    Collapsing norm of Lambda (variant 'S', inhomogeneous weight) or of Gamma
    (variant 'W', homogeneous weight) over the stored frames.
    """
    grid = _require_frames(traj)
    if variant == LAMBDA_TYPE:
        return collapsing_norm_values(grid, traj.times, traj.stack('lam'), s, homogeneous=False)
    if variant == GAMMA_TYPE:
        return collapsing_norm_values(grid, traj.times, traj.stack('gam'), s, homogeneous=True)
    raise ValueError(f"variant must be '{LAMBDA_TYPE}' or '{GAMMA_TYPE}'")


def relative_half_derivative_norm(grid: Grid, kernel: np.ndarray) -> float:
    """|| |nabla_{x-y}|^{1/2} K ||_{L^2(dx dy)} with nabla_{x-y} = (nabla_x - nabla_y) / 2."""
    spectrum = np.fft.fftn(kernel.reshape(grid.shape * 2))
    freqs = grid.frequencies
    rel2 = sum(((fx[(...,) + (None,) * grid.d] - fy[(None,) * grid.d + (...,)]) / 2) ** 2
               for fx, fy in zip(freqs, freqs))
    weighted = np.sqrt(np.sqrt(rel2)) * spectrum
    return float(np.sqrt(grid.weight ** 2 * np.sum(np.abs(weighted) ** 2) / grid.size ** 2))


def collapsing_ratio(traj: Trajectory) -> float:
    """||Lambda(t, x, x)||_{L^2(dt dx)} / || |nabla_{x-y}|^{1/2} Lambda_0 ||_{L^2}."""
    grid = _require_frames(traj, 2)
    diag = np.array([grid.weight * np.sum(np.abs(np.diagonal(k)) ** 2) for k in traj.stack('lam')])
    lhs = float(np.sqrt(trapezoid(diag, traj.times)))
    rhs = relative_half_derivative_norm(grid, traj.frames[0].lam)
    return lhs / rhs if rhs > 0 else float('inf')


def nt_norms(traj: Trajectory, epsilon: float = DEFAULT_EPSILON) -> NormReport:
    """N_T(Lambda), the homogeneous N_T(Gamma) and N_T(phi) over the run window."""
    grid = _require_frames(traj)
    s = 0.5 + epsilon
    times = traj.times
    lam = traj.stack('lam')
    gam = traj.stack('gam')
    phi = traj.stack('phi')
    mult = sobolev_multiplier(grid, s)

    def energy_part(kernels):
        best = 0.0
        for kernel in kernels:
            weighted = grid.apply_multiplier(grid.apply_multiplier(kernel, mult, X_AXIS), mult, Y_AXIS)
            best = max(best, grid.norm(weighted))
        return best

    lam_collapse = collapsing_norm_values(grid, times, lam, s)
    gam_collapse = collapsing_norm_values(grid, times, gam, s, homogeneous=True)
    gam_collapse_half = collapsing_norm_values(grid, times, gam, 0.5, homogeneous=True)
    lam_energy = energy_part(lam)
    gam_energy = energy_part(gam)

    weighted_phi = np.array([grid.apply_multiplier(f, mult) for f in phi])
    l2 = np.sqrt(grid.weight * np.sum(np.abs(weighted_phi) ** 2, axis=1))
    l6 = (grid.weight * np.sum(np.abs(weighted_phi) ** 6, axis=1)) ** (1 / 6)
    phi_strichartz = float(np.sqrt(trapezoid(l6 ** 2, times))) if len(times) > 1 else 0.0

    values = {
        'N_lambda': lam_collapse + lam_energy,
        'N_gamma': gam_collapse + gam_collapse_half + gam_energy,
        'N_phi': float(np.max(l2)) + phi_strichartz,
        'lambda_collapsing': lam_collapse,
        'lambda_energy': lam_energy,
        'gamma_collapsing': gam_collapse,
        'gamma_collapsing_half': gam_collapse_half,
        'gamma_energy': gam_energy,
        'phi_energy': float(np.max(l2)),
        'phi_strichartz': phi_strichartz,
    }
    params = {'epsilon': epsilon, 'frames': len(times), 'T': float(times[-1] - times[0])}
    return NormReport(values, params)


# ============================================================================
# PAIR KERNEL SIZES
# ============================================================================

def center_of_mass_norms(grid: Grid, kernel: np.ndarray, orders=(0, 1, 2)) -> Dict[int, float]:
    """|| nabla_{x+y}^j K ||_{L^2} from the joint spectrum (symbol |xi_x + xi_y|^j)."""
    spectrum = np.fft.fftn(kernel.reshape(grid.shape * 2))
    freqs = grid.frequencies
    com2 = sum((fx[(...,) + (None,) * grid.d] + fy[(None,) * grid.d + (...,)]) ** 2
               for fx, fy in zip(freqs, freqs))
    power = np.abs(spectrum) ** 2
    out = {}
    for j in orders:
        out[j] = float(np.sqrt(grid.weight ** 2 * np.sum(com2 ** j * power) / grid.size ** 2))
    return out


def pair_norm_report(traj: Trajectory) -> NormReport:
    """Time series and suprema of ||sh(2k)||, sup_x ||sh(2k)(x, .)||, ||sh(k)||, ||p|| and center-of-mass derivatives."""
    grid = _require_frames(traj)
    series = {name: [] for name in ('t', 'l2_sh2k', 'linf_sh2k', 'l2_shk', 'l2_p',
                                    'com1_sh2k', 'com2_sh2k')}
    flags = []
    for state in traj.frames:
        psi, _ = recover_pair_values(state.lam, state.gam, state.phi, state.N)
        rows = np.sqrt(grid.weight * np.sum(np.abs(psi) ** 2, axis=1))
        com = center_of_mass_norms(grid, psi)
        try:
            pair = hyperbolic_from_k(k_from_pair(Kernel(grid, psi, SYMMETRIC, tol=1e-10)))
            shk, p = grid.norm(pair.u), grid.norm(pair.p)
        except TakagiError as exc:
            logger.warning(f"Pair recovery failed at t={state.t:.6g}: {exc}")
            flags.append(f"takagi_failure:t={state.t:.6g}")
            shk, p = float('nan'), float('nan')
        series['t'].append(state.t)
        series['l2_sh2k'].append(com[0])
        series['linf_sh2k'].append(float(np.max(rows)))
        series['l2_shk'].append(shk)
        series['l2_p'].append(p)
        series['com1_sh2k'].append(com[1])
        series['com2_sh2k'].append(com[2])

    values = {f"sup_{name}": float(np.nanmax(vals)) if not np.all(np.isnan(vals)) else float('nan')
              for name, vals in series.items() if name != 't'}
    return NormReport(values, {'frames': len(traj.frames)}, series, flags)


def symplectic_report(traj: Trajectory) -> NormReport:
    """Per-frame L^2 residual of ch(2k) o ch(2k) - sh(2k) o conj(sh(2k)) - delta."""
    grid = _require_frames(traj)
    residuals = []
    for state in traj.frames:
        psi, omega = recover_pair_values(state.lam, state.gam, state.phi, state.N)
        residuals.append(kernel_symplectic_residual(grid, psi, omega.conj()))
    return NormReport({'max_symplectic': float(np.max(residuals))}, {'frames': len(residuals)},
                      {'t': list(traj.times), 'symplectic': residuals})


# ============================================================================
# EQUATION RESIDUALS
# ============================================================================

def _centred(traj: Trajectory, name: str):
    """(interior states, d/dt of the named variable at those states)."""
    frames = traj.frames
    times = traj.times
    out = []
    for i in range(1, len(frames) - 1):
        span = times[i + 1] - times[i - 1]
        out.append((getattr(frames[i + 1], name) - getattr(frames[i - 1], name)) / span)
    return frames[1:-1], out


def _outlier_flag(series: List[float], name: str) -> Optional[str]:
    if len(series) < 3:
        return None
    median = float(np.median(series))
    if median > 0 and max(series) > OUTLIER_FACTOR * median:
        return f"outlier:{name}"
    return None


def bbgky_residual(traj: Trajectory, materialize: bool = False) -> NormReport:
    """
    Max-norm residuals of the first three hierarchy equations

        (1/i) d_t phi - Delta phi + J1 = 0
        (1/i) d_t Gamma + (Delta_x - Delta_y) Gamma - J2 = 0
        (1/i) d_t Lambda - (Delta_x + Delta_y) Lambda + (1/N) v_N(x - y) Lambda + J3 = 0

    with centred time differences over the stored frames. The collision terms come
    from Wick contraction, or from materialized marginals when `materialize` is set.
    """
    grid = _require_frames(traj)
    if len(traj.frames) < 3:
        raise TrajectoryError('Hierarchy residuals need at least 3 frames')
    states, dphi = _centred(traj, 'phi')
    _, dlam = _centred(traj, 'lam')
    _, dgam = _centred(traj, 'gam')

    series = {'t': [], 'BB1': [], 'BB2': [], 'BB3': []}
    for s, dp, dl, dg in zip(states, dphi, dlam, dgam):
        W = s.interaction.W
        if materialize:
            psi, _ = recover_pair_values(s.lam, s.gam, s.phi, s.N)
            pair = hyperbolic_from_k(k_from_pair(Kernel(grid, psi, SYMMETRIC, tol=1e-10)))
            f = Field(grid, s.phi)
            tensors = [closed_form_marginals(f, pair.u, pair.c, s.N, which) for which in ((1, 2), (2, 2), (1, 3))]
            J = hierarchy_sources_from_tensors(grid, *tensors, W)
        else:
            J = hierarchy_source_values(grid, s.phi, s.lam, s.gam, W)
        bb1 = -1j * dp - grid.laplacian(s.phi) + J['J1']
        bb2 = -1j * dg + grid.laplacian(s.gam, X_AXIS) - grid.laplacian(s.gam, Y_AXIS) - J['J2']
        bb3 = (-1j * dl - grid.laplacian(s.lam, X_AXIS) - grid.laplacian(s.lam, Y_AXIS)
               + W * s.lam / s.N + J['J3'])
        series['t'].append(s.t)
        series['BB1'].append(float(np.max(np.abs(bb1))))
        series['BB2'].append(float(np.max(np.abs(bb2))))
        series['BB3'].append(float(np.max(np.abs(bb3))))

    values = {name: max(series[name]) for name in ('BB1', 'BB2', 'BB3')}
    flags = [flag for name in ('BB1', 'BB2', 'BB3') if (flag := _outlier_flag(series[name], name))]
    params = {'frames': len(traj.frames), 'cadence': float(np.min(np.diff(traj.times))),
              'materialized': materialize}
    return NormReport(values, params, series, flags)


def equivalence_residual(traj: Trajectory) -> NormReport:
    """
    L^2 residuals of the sh(2k) and ch(2k) equations along a coupled trajectory, with
    g = -Delta + v_N * rho + v_N(x - y) Gamma and w2 = ch(2k) - delta:

        (1/i) d_t s2 + g^T o s2 + s2 o g + (v Lambda) o (delta + conj(w2)) + (delta + w2) o (v Lambda)
        (1/i) d_t w2 + [g^T, w2] + (v Lambda) o conj(s2) - s2 o conj(v Lambda)
    """
    grid = _require_frames(traj)
    if len(traj.frames) < 3:
        raise TrajectoryError('Equation residuals need at least 3 frames')
    w = grid.weight
    pairs = [recover_pair_values(s.lam, s.gam, s.phi, s.N) for s in traj.frames]
    times = traj.times

    series = {'t': [], 'R_S': [], 'R_W': [], 'rel_S': [], 'rel_W': []}
    for i in range(1, len(traj.frames) - 1):
        s = traj.frames[i]
        span = times[i + 1] - times[i - 1]
        psi, omega = pairs[i]
        w2 = omega.conj()
        dpsi = -1j * (pairs[i + 1][0] - pairs[i - 1][0]) / span
        dw2 = -1j * (pairs[i + 1][1].conj() - pairs[i - 1][1].conj()) / span

        inter = s.interaction
        W = inter.W
        U = inter.convolve(np.real(np.diagonal(s.gam)))
        WL = W * s.lam
        WGt = W * s.gam.T

        gt_psi = -grid.laplacian(psi, X_AXIS) + U[:, None] * psi + w * WGt @ psi
        psi_g = -grid.laplacian(psi, Y_AXIS) + psi * U[None, :] + w * psi @ (W * s.gam)
        r_s = dpsi + gt_psi + psi_g + 2 * WL + w * WL @ omega + w * w2 @ WL

        comm = (-grid.laplacian(w2, X_AXIS) + grid.laplacian(w2, Y_AXIS)
                + (U[:, None] - U[None, :]) * w2 + w * (WGt @ w2 - w2 @ WGt))
        r_w = dw2 + comm + w * WL @ psi.conj() - w * psi @ WL.conj()

        series['t'].append(s.t)
        series['R_S'].append(grid.norm(r_s))
        series['R_W'].append(grid.norm(r_w))
        series['rel_S'].append(grid.norm(r_s) / max(grid.norm(dpsi), 1e-300))
        series['rel_W'].append(grid.norm(r_w) / max(grid.norm(dw2), 1e-300))

    values = {name: max(series[name]) for name in ('R_S', 'R_W', 'rel_S', 'rel_W')}
    return NormReport(values, {'frames': len(traj.frames)}, series)


def conservation_report(traj: Trajectory) -> NormReport:
    """Relative drift of the particle number N tr(Gamma) and of the energy over the frames."""
    _require_frames(traj)
    number = np.array([conserved_number(s) for s in traj.frames])
    energy = np.array([conserved_energy(s) for s in traj.frames])
    n0 = abs(number[0])
    e_scale = max(abs(energy[0]), 1e-300)
    values = {
        'number_drift': float(np.max(np.abs(number - number[0])) / n0) if n0 > 0 else float(np.max(np.abs(number))),
        'energy_drift': float(np.max(np.abs(energy - energy[0])) / e_scale),
    }
    series = {'t': list(traj.times), 'number': list(number), 'energy': list(energy)}
    return NormReport(values, {'frames': len(traj.frames)}, series)
