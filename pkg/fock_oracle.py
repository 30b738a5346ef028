"""
Exact second-quantized reference on finitely many plane-wave modes.

The Fock space is truncated by total occupation n_max. Annihilators are sparse
matrices a_j |n> = sqrt(n_j) |n - e_j>, creators are their adjoints, so the
truncated pair and coherent generators stay exactly skew-hermitian and the
Hamiltonian stays exactly number conserving.
"""
from dataclasses import dataclass
from functools import cached_property
from itertools import product
from math import comb
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import scipy.sparse
import scipy.stats
from scipy.sparse.linalg import expm_multiply

from bogoliubov import matrix_hyperbolics, takagi_matrix
from grid import Field, Grid, _same_grid
from models import ConfigError, CutoffOverflowError, KrylovConvergenceError
from potential import interaction_matrix

# Configure logging
logger = logging.getLogger(__name__)

KRYLOV_TOL = 1e-10
TAIL_BOUND = 1e-8
MAX_FOCK_DIM = 200_000
ORTHONORMAL_TOL = 1e-12
TAIL_MARGIN = 1e-2

POISSON = 'poisson'
FIXED = 'fixed'
CUTOFF_POLICIES = [POISSON, FIXED]


# ============================================================================
# MODES
# ============================================================================

@dataclass(frozen=True, eq=False)
class ModeBasis:
    """The M lowest-|frequency| plane waves L^{-d/2} e^{i xi.x} on the grid torus."""

    grid: Grid
    M: int

    def __post_init__(self):
        if not 1 <= self.M <= self.grid.size:
            raise ConfigError('Invalid mode count', {'modes': f"Must lie in [1, {self.grid.size}]"})

    @cached_property
    def integer_modes(self) -> np.ndarray:
        """Integer frequency vectors, shape (M, d); ties broken positive before negative."""
        n = self.grid.n
        ints = np.rint(np.fft.fftfreq(n) * n).astype(int)
        candidates = list(product(ints.tolist(), repeat=self.grid.d))
        candidates.sort(key=lambda m: (sum(c * c for c in m), tuple(-c for c in m)))
        return np.array(candidates[:self.M], dtype=int)

    @cached_property
    def xi(self) -> np.ndarray:
        return 2 * np.pi * self.integer_modes / self.grid.L

    @cached_property
    def xi_squared(self) -> np.ndarray:
        return np.sum(self.xi ** 2, axis=1)

    @cached_property
    def functions(self) -> np.ndarray:
        """E[x, m] = L^{-d/2} exp(i xi_m . x), shape (size, M)."""
        g = self.grid
        return np.exp(1j * g.points @ self.xi.T) * g.L ** (-g.d / 2)

    def gram_residual(self) -> float:
        E = self.functions
        return float(np.max(np.abs(self.grid.weight * E.conj().T @ E - np.eye(self.M))))

    def field_to_modes(self, phi: np.ndarray) -> np.ndarray:
        return self.grid.weight * self.functions.conj().T @ phi

    def pair_to_modes(self, k: np.ndarray) -> np.ndarray:
        E = self.functions
        return self.grid.weight ** 2 * E.conj().T @ k @ E.conj()

    def density_to_modes(self, gam: np.ndarray) -> np.ndarray:
        E = self.functions
        return self.grid.weight ** 2 * E.T @ gam @ E.conj()

    def field_from_modes(self, coeffs: np.ndarray) -> np.ndarray:
        return self.functions @ coeffs

    def pair_from_modes(self, mat: np.ndarray) -> np.ndarray:
        E = self.functions
        return E @ mat @ E.T

    def density_from_modes(self, mat: np.ndarray) -> np.ndarray:
        E = self.functions
        return E.conj() @ mat @ E.T

    def projection_residual(self, phi: np.ndarray) -> float:
        """||phi - P phi|| / ||phi|| for the orthogonal projection P on the mode span."""
        rest = phi - self.field_from_modes(self.field_to_modes(phi))
        size = self.grid.norm(phi)
        return self.grid.norm(rest) / size if size > 0 else 0.0

    def two_body_elements(self, W: np.ndarray) -> np.ndarray:
        """V[i, j, k, l] = int int conj(e_i)(x) conj(e_j)(y) v_N(x - y) e_k(x) e_l(y)."""
        E = self.functions
        M = self.M
        pairs = (E.conj()[:, :, None] * E[:, None, :]).reshape(-1, M * M)
        V = self.grid.weight ** 2 * pairs.T @ W @ pairs
        return V.reshape(M, M, M, M).transpose(0, 2, 1, 3)

    def to_grid(self, tensor: np.ndarray, creations: int) -> np.ndarray:
        """Map a mode tensor to grid labels; the first `creations` axes take conj(e)."""
        E = self.functions
        out = tensor
        for axis in range(tensor.ndim):
            f = E.conj() if axis < creations else E
            out = np.tensordot(out, f, axes=([0], [1]))
        return out


# ============================================================================
# OCCUPATION BASIS, VECTORS, OPERATORS
# ============================================================================

class OccupationBasis:
    """All occupation vectors (n_1, ..., n_M) with total <= n_max, sorted by total."""

    def __init__(self, M: int, n_max: int, max_dim: int = MAX_FOCK_DIM):
        dim = comb(n_max + M, M)
        if dim > max_dim:
            logger.error(f"Occupation basis dimension {dim} above bound {max_dim}")
            raise CutoffOverflowError(f"Fock basis with M={M}, n_max={n_max} has {dim} states (bound {max_dim})",
                                      dimension=dim)
        self.M = M
        self.n_max = n_max
        states = []
        for total in range(n_max + 1):
            states.extend(self._compositions(total, M))
        self.states = np.array(states, dtype=int).reshape(-1, M)
        self.totals = self.states.sum(axis=1)
        self.index: Dict[Tuple[int, ...], int] = {tuple(s): i for i, s in enumerate(states)}
        logger.info(f"Occupation basis: M={M}, n_max={n_max}, dimension={self.dimension}")

    @staticmethod
    def _compositions(total: int, parts: int) -> List[Tuple[int, ...]]:
        if parts == 1:
            return [(total,)]
        out = []
        for first in range(total, -1, -1):
            out.extend((first,) + rest for rest in OccupationBasis._compositions(total - first, parts - 1))
        return out

    @property
    def dimension(self) -> int:
        return len(self.states)

    @cached_property
    def annihilators(self) -> List[scipy.sparse.csr_matrix]:
        ops = []
        for j in range(self.M):
            src = np.nonzero(self.states[:, j] > 0)[0]
            targets = self.states[src].copy()
            targets[:, j] -= 1
            rows = np.array([self.index[tuple(t)] for t in targets], dtype=int)
            data = np.sqrt(self.states[src, j].astype(float))
            ops.append(scipy.sparse.csr_matrix((data, (rows, src)), shape=(self.dimension,) * 2))
        return ops

    @cached_property
    def creators(self) -> List[scipy.sparse.csr_matrix]:
        return [a.T.conj().tocsr() for a in self.annihilators]

    def vacuum(self) -> 'FockVector':
        amps = np.zeros(self.dimension, dtype=complex)
        amps[0] = 1.0
        return FockVector(self, amps)

    def basis_vector(self, occupation: Sequence[int]) -> 'FockVector':
        amps = np.zeros(self.dimension, dtype=complex)
        amps[self.index[tuple(occupation)]] = 1.0
        return FockVector(self, amps)


@dataclass(frozen=True, eq=False)
class FockVector:
    """
    Amplitudes over an OccupationBasis, stored as a dense complex vector of length
    basis.dimension. Memory is bounded because OccupationBasis refuses dimensions above
    max_dim (MAX_FOCK_DIM = 2e5 by default, HFB_MAX_FOCK_DIM in the CLI), about 3 MB per vector.
    """

    basis: OccupationBasis
    amplitudes: np.ndarray

    def __post_init__(self):
        if np.shape(self.amplitudes) != (self.basis.dimension,):
            raise ValueError(f"Fock vector of shape {np.shape(self.amplitudes)} on a basis of dimension {self.basis.dimension}")

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def inner(self, other: 'FockVector') -> complex:
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def tail_mass(self) -> float:
        """Probability in the top occupation shell."""
        top = self.basis.totals == self.basis.n_max
        return float(np.sum(np.abs(self.amplitudes[top]) ** 2))

    def parity_mass(self, parity: int) -> float:
        sel = (self.basis.totals % 2) == parity
        return float(np.sum(np.abs(self.amplitudes[sel]) ** 2))


@dataclass(frozen=True, eq=False)
class SecondQuantizedOperator:
    """Sparse operator over an OccupationBasis."""

    basis: OccupationBasis
    matrix: scipy.sparse.csr_matrix
    hermitian: bool = False

    def hermiticity_residual(self) -> float:
        diff = self.matrix - self.matrix.conj().T
        scale = max(abs(self.matrix).max(), 1e-300) if self.matrix.nnz else 1.0
        return float(abs(diff).max() / scale) if diff.nnz else 0.0

    def apply(self, psi: FockVector) -> FockVector:
        return FockVector(psi.basis, self.matrix @ psi.amplitudes)


def number_operator(basis: OccupationBasis) -> SecondQuantizedOperator:
    return SecondQuantizedOperator(basis, scipy.sparse.diags(basis.totals.astype(complex)).tocsr(), hermitian=True)


def expectation(psi: FockVector, op: SecondQuantizedOperator) -> complex:
    return complex(np.vdot(psi.amplitudes, op.matrix @ psi.amplitudes))


def occupation_distribution(psi: FockVector) -> np.ndarray:
    """P(total = n) for n = 0..n_max."""
    return np.bincount(psi.basis.totals, weights=np.abs(psi.amplitudes) ** 2, minlength=psi.basis.n_max + 1)


def poisson_weights(mean: float, n_max: int) -> np.ndarray:
    """Poisson(mean) probabilities on 0..n_max."""
    return scipy.stats.poisson.pmf(np.arange(n_max + 1), mean)


# ============================================================================
# HAMILTONIAN AND EXPONENTIALS
# ============================================================================

def build_hamiltonian(basis: OccupationBasis, modes: ModeBasis, vN: Field, N: int) -> SecondQuantizedOperator:
    """
    H = sum_j T_j a*_j a_j - (1/2N) sum V_{ij,kl} a*_i a*_j a_l a_k with T_j = -|xi_j|^2
    and V from grid quadrature of v_N against the mode functions.
    """
    _same_grid(modes, vN)
    if modes.M != basis.M:
        raise ConfigError('Mode count differs between mode and occupation bases')
    a = basis.annihilators
    ad = basis.creators
    M = basis.M
    V = modes.two_body_elements(interaction_matrix(vN))
    T = -modes.xi_squared

    H = scipy.sparse.csr_matrix((basis.dimension,) * 2, dtype=complex)
    for j in range(M):
        H = H + T[j] * (ad[j] @ a[j])
    pairs = {(k, l): a[l] @ a[k] for k in range(M) for l in range(M)}
    for i in range(M):
        for j in range(M):
            lowered = sum(V[i, j, k, l] * pairs[(k, l)] for k in range(M) for l in range(M))
            H = H - (0.5 / N) * (ad[i] @ ad[j] @ lowered)
    op = SecondQuantizedOperator(basis, H.tocsr(), hermitian=True)
    residual = op.hermiticity_residual()
    if residual > 1e-12:
        logger.warning(f"Fock Hamiltonian hermiticity residual {residual:.3e}")
    return op


def _apply_exponential(generator: scipy.sparse.spmatrix, psi: FockVector, krylov_tol: float) -> FockVector:
    out = expm_multiply(generator, psi.amplitudes)
    before = psi.norm()
    drift = abs(np.linalg.norm(out) - before) / max(before, 1e-300)
    if not np.isfinite(drift) or drift > krylov_tol:
        logger.error(f"Exponential changed the norm by {drift:.3e}")
        raise KrylovConvergenceError(f"norm drift {drift:.3e} above {krylov_tol:.1e}", drift)
    return FockVector(psi.basis, out)


def _check_tail(psi: FockVector, tail_bound: float, what: str) -> FockVector:
    tail = psi.tail_mass()
    if tail > tail_bound:
        logger.error(f"{what}: tail mass {tail:.3e} above {tail_bound:.1e}")
        raise CutoffOverflowError(f"{what}: tail mass {tail:.3e} above {tail_bound:.1e}, raise n_max",
                                  tail_mass=tail, dimension=psi.basis.dimension)
    if tail > 1e-2 * tail_bound:
        logger.warning(f"{what}: tail mass {tail:.3e} close to bound")
    return psi


def coherent_displace(psi: FockVector, phi_modes: np.ndarray, N: int, krylov_tol: float = KRYLOV_TOL,
                      tail_bound: float = TAIL_BOUND) -> FockVector:
    """e^{-sqrt(N) A(phi)} psi with generator sqrt(N) sum (phi_j a*_j - conj(phi_j) a_j)."""
    basis = psi.basis
    gen = scipy.sparse.csr_matrix((basis.dimension,) * 2, dtype=complex)
    for j, c in enumerate(phi_modes):
        if c != 0:
            gen = gen + np.sqrt(N) * (c * basis.creators[j] - np.conj(c) * basis.annihilators[j])
    if gen.nnz == 0:
        return psi
    return _check_tail(_apply_exponential(gen, psi, krylov_tol), tail_bound, 'coherent_displace')


def pair_generator(basis: OccupationBasis, k_modes: np.ndarray) -> scipy.sparse.csr_matrix:
    """X = -B(k) = (1/2) sum (k_ij a*_i a*_j - conj(k_ij) a_i a_j)."""
    a, ad = basis.annihilators, basis.creators
    gen = scipy.sparse.csr_matrix((basis.dimension,) * 2, dtype=complex)
    for i in range(basis.M):
        for j in range(basis.M):
            kij = k_modes[i, j]
            if kij != 0:
                gen = gen + 0.5 * (kij * (ad[i] @ ad[j]) - np.conj(kij) * (a[i] @ a[j]))
    return gen.tocsr()


def pair_rotate(psi: FockVector, k_modes: np.ndarray, krylov_tol: float = KRYLOV_TOL,
                tail_bound: float = TAIL_BOUND) -> FockVector:
    """e^{-B(k)} psi for a symmetric mode-space pair kernel."""
    gen = pair_generator(psi.basis, k_modes)
    if gen.nnz == 0:
        return psi
    return _check_tail(_apply_exponential(gen, psi, krylov_tol), tail_bound, 'pair_rotate')


def prepare(basis: OccupationBasis, phi_modes: np.ndarray, k_modes: np.ndarray, N: int,
            krylov_tol: float = KRYLOV_TOL, tail_bound: float = TAIL_BOUND) -> FockVector:
    """e^{-sqrt(N) A(phi)} e^{-B(k)} Omega."""
    rotated = pair_rotate(basis.vacuum(), k_modes, krylov_tol, tail_bound)
    return coherent_displace(rotated, phi_modes, N, krylov_tol, tail_bound)


def evolve_exact(psi: FockVector, H: SecondQuantizedOperator, t: float,
                 krylov_tol: float = KRYLOV_TOL) -> FockVector:
    """e^{itH} psi."""
    if t == 0:
        return psi
    return _apply_exponential(1j * t * H.matrix, psi, krylov_tol)


def evolve_exact_series(psi: FockVector, H: SecondQuantizedOperator, times: Sequence[float],
                        krylov_tol: float = KRYLOV_TOL) -> List[FockVector]:
    """States at increasing times, each propagated from the previous one."""
    out = []
    current, t_prev = psi, 0.0
    for t in times:
        current = evolve_exact(current, H, t - t_prev, krylov_tol)
        out.append(current)
        t_prev = t
    return out


# ============================================================================
# MARGINALS AND ERRORS
# ============================================================================

def _lowered(psi: FockVector, count: int) -> Dict[Tuple[int, ...], np.ndarray]:
    """a_{j1} ... a_{jc} psi for every label tuple."""
    a = psi.basis.annihilators
    out = {(): psi.amplitudes}
    for _ in range(count):
        nxt = {}
        for labels, vec in out.items():
            for j in range(psi.basis.M):
                nxt[(j,) + labels] = a[j] @ vec
        out = nxt
    return out


def marginal(psi: FockVector, m: int, n: int, N: int, modes: Optional[ModeBasis] = None) -> np.ndarray:
    """
    L_{m,n}(y_1..y_m; x_1..x_n) = N^{-(m+n)/2} <a_y1..a_ym psi, a_x1..a_xn psi>.

    Returns the mode tensor, or grid kernels when `modes` is given.
    """
    if m < 0 or n < 0 or m + n > 4 or m + n == 0:
        raise ValueError(f"Unsupported marginal order ({m}, {n}); need 1 <= m + n <= 4")
    M = psi.basis.M
    left = _lowered(psi, m)
    right = _lowered(psi, n)
    out = np.zeros((M,) * (m + n), dtype=complex)
    for ly, vy in left.items():
        for lx, vx in right.items():
            out[ly + lx] = np.vdot(vy, vx)
    out /= N ** ((m + n) / 2)
    if modes is not None:
        return modes.to_grid(out, creations=m)
    return out


def quasi_free_data(psi: FockVector, N: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(phi, Lambda, Gamma) in mode coordinates."""
    return marginal(psi, 0, 1, N), marginal(psi, 0, 2, N), marginal(psi, 1, 1, N)


def verify_conjugation(basis: OccupationBasis, k_modes: np.ndarray,
                       probes: Optional[Sequence[FockVector]] = None) -> float:
    """
    max over modes j and probe vectors of || e^{B} a_j e^{-B} psi - (sum C_jw a_w + S_jw a*_w) psi ||,
    with S = sh(k), C = ch(k). Probes default to the vacuum and the one-particle states.
    """
    if probes is None:
        probes = [basis.vacuum()] + [basis.basis_vector(np.eye(basis.M, dtype=int)[j]) for j in range(basis.M)]
    S, C = matrix_hyperbolics(np.asarray(k_modes, dtype=complex))
    gen = pair_generator(basis, k_modes)
    a, ad = basis.annihilators, basis.creators
    worst = 0.0
    for probe in probes:
        rotated = expm_multiply(gen, probe.amplitudes) if gen.nnz else probe.amplitudes
        for j in range(basis.M):
            lowered = a[j] @ rotated
            lhs = expm_multiply(-gen, lowered) if gen.nnz else lowered
            rhs = sum(C[j, w] * (a[w] @ probe.amplitudes) + S[j, w] * (ad[w] @ probe.amplitudes)
                      for w in range(basis.M))
            worst = max(worst, float(np.linalg.norm(lhs - rhs)))
    return worst


def fock_error(psi_exact: FockVector, psi_approx: FockVector) -> Tuple[float, float]:
    """
    min over theta of ||psi_exact - e^{i theta} psi_approx||, and the minimizing theta.
    """
    overlap = psi_approx.inner(psi_exact)
    sq = psi_exact.norm() ** 2 + psi_approx.norm() ** 2 - 2 * abs(overlap)
    return float(np.sqrt(max(0.0, sq))), float(np.angle(overlap))


def approximate_state(basis: OccupationBasis, phi_modes: np.ndarray, k_modes: np.ndarray, N: int,
                      krylov_tol: float = KRYLOV_TOL, tail_bound: float = TAIL_BOUND) -> FockVector:
    """Quasi-free approximation built from PDE data at some time."""
    return prepare(basis, phi_modes, k_modes, N, krylov_tol, tail_bound)


def fock_error_from_data(psi_exact: FockVector, phi_modes: np.ndarray, k_modes: np.ndarray, N: int,
                         krylov_tol: float = KRYLOV_TOL, tail_bound: float = TAIL_BOUND) -> Tuple[float, float]:
    """Optimal-phase distance between psi_exact and the quasi-free state of (phi, k)."""
    approx = approximate_state(psi_exact.basis, phi_modes, k_modes, N, krylov_tol, tail_bound)
    return fock_error(psi_exact, approx)


# ============================================================================
# CUTOFF POLICY
# ============================================================================

def mean_occupation(phi_modes: np.ndarray, k_modes: np.ndarray, N: int) -> float:
    """N ||phi||^2 + sum sinh^2(sigma_j)."""
    _, sigma = takagi_matrix(0.5 * (k_modes + k_modes.T), tol=1e-8)
    return float(N * np.sum(np.abs(phi_modes) ** 2) + np.sum(np.sinh(sigma) ** 2))


def choose_cutoff(phi_modes: np.ndarray, k_modes: np.ndarray, N: int, policy: str = POISSON,
                  n_max: Optional[int] = None, tail_bound: float = TAIL_BOUND,
                  krylov_tol: float = KRYLOV_TOL, max_dim: int = MAX_FOCK_DIM) -> int:
    """
    Occupation cutoff.

    The Poisson policy starts from nbar + 8 sqrt(nbar) + 10, raised until the Poisson(nbar)
    tail beyond it is below 1e-2 tail_bound. The state is then prepared in that basis and
    the cutoff grows until the realized top-shell mass is below TAIL_MARGIN * tail_bound,
    so prepare() with the returned cutoff and the same tail_bound does not overflow.
    A basis above max_dim ends the search with CutoffOverflowError.
    """
    if policy == FIXED:
        if n_max is None or n_max < 1:
            raise ConfigError('Fixed cutoff policy needs a positive n_max', {'n_max': 'Required for fixed policy'})
        return int(n_max)
    if policy != POISSON:
        raise ConfigError(f"Unknown cutoff policy '{policy}'", {'n_max_policy': f"Must be one of: {', '.join(CUTOFF_POLICIES)}"})
    nbar = mean_occupation(phi_modes, k_modes, N)
    cutoff = int(np.ceil(nbar + 8 * np.sqrt(nbar) + 10))
    while nbar > 0 and scipy.stats.poisson.sf(cutoff, nbar) > 1e-2 * tail_bound:
        cutoff += 1
    cutoff = max(cutoff, n_max or 0)
    step = max(2, int(np.ceil(np.sqrt(nbar))))
    while True:
        basis = OccupationBasis(len(phi_modes), cutoff, max_dim)
        try:
            tail = prepare(basis, phi_modes, k_modes, N, krylov_tol, tail_bound).tail_mass()
        except CutoffOverflowError as exc:
            tail = exc.tail_mass
        if tail <= TAIL_MARGIN * tail_bound:
            logger.debug(f"Cutoff {cutoff}: realized tail {tail:.3e}")
            return cutoff
        logger.info(f"Cutoff {cutoff} leaves tail {tail:.3e}, raising by {step}")
        cutoff += step
