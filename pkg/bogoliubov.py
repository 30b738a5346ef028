"""
Functional calculus on symmetric pair kernels.

Kernels are turned into integral operators (matrix times h^d) before any matrix
function is taken, so that sh(k), ch(k) and their 2k counterparts are the kernels
of the operator functions. Conjugation convention:

    e^{B} a_x e^{-B} = int C(x, w) a_w + S(x, w) a*_w dw,
    S = sh(k) = U sinh(s) U^T,  C = ch(k) = U cosh(s) U^*.

With it sh(2k) = 2 C o S, ch(2k) - delta = 2 conj(conj(S) o S), and the
pair/one-body marginals of the quasi-free state are
Lambda = phi phi + C o S / N, Gamma = conj(phi) phi + conj(S) o S / N.
"""
from dataclasses import dataclass
from typing import Dict, Tuple
import logging

import numpy as np
import scipy.linalg

from grid import Field, Grid, Kernel, _same_grid
from models import HERMITIAN, SYMMETRIC, TakagiError, symmetry_residual, validate_tag
from potential import interaction_matrix

# Configure logging
logger = logging.getLogger(__name__)

TAKAGI_TOL = 1e-10
CLUSTER_RTOL = 1e-10
SERIES_TOL = 1e-14
# Largest materialized marginal tensor (entries)
MAX_TENSOR_ENTRIES = 2 ** 22

SUPPORTED_MARGINALS = [(1, 2), (2, 2), (1, 3)]


# ============================================================================
# TAKAGI FACTORIZATION
# ============================================================================

def takagi_matrix(matrix: np.ndarray, tol: float = TAKAGI_TOL) -> Tuple[np.ndarray, np.ndarray]:
    """
    Takagi factorization A = U diag(s) U^T of a complex symmetric matrix.

    SVD A = V diag(s) W^*, then within each cluster of equal singular values the
    block Z = V^T W is a unitary and U = V conj(sqrtm(Z)).

    Returns:
        (U, s) with s sorted descending

    Raises:
        TakagiError: non-symmetric input or reconstruction residual above tol
    """
    a = np.asarray(matrix, dtype=complex)
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    asym = symmetry_residual(a)
    if asym > tol:
        raise TakagiError(f"Takagi input is not symmetric (residual {asym:.3e})", asym)
    if scale == 0.0:
        return np.eye(a.shape[0], dtype=complex), np.zeros(a.shape[0])

    v, s, w_adjoint = np.linalg.svd(a)
    w = w_adjoint.conj().T

    # clusters of (nearly) equal singular values, s is already descending
    clusters = []
    start = 0
    for i in range(1, len(s) + 1):
        if i == len(s) or s[start] - s[i] > CLUSTER_RTOL * max(s[0], 1.0):
            clusters.append(list(range(start, i)))
            start = i

    blocks = []
    for indices in clusters:
        if s[indices[0]] <= CLUSTER_RTOL * s[0]:
            # numerical null space: any unitary block reconstructs it
            blocks.append(np.eye(len(indices)))
            continue
        z = v[:, indices].T @ w[:, indices]
        blocks.append(scipy.linalg.sqrtm(z))
    q = scipy.linalg.block_diag(*blocks)
    u = v @ q.conj()

    residual = float(np.linalg.norm(u @ np.diag(s) @ u.T - a) / max(np.linalg.norm(a), 1e-300))
    if not np.isfinite(residual) or residual > tol:
        logger.error(f"Takagi reconstruction residual {residual:.3e} above {tol:.1e}")
        raise TakagiError(f"Takagi factorization failed (residual {residual:.3e})", residual)
    return u, s


@dataclass(frozen=True, eq=False)
class TakagiFactors:
    """Factors of the integral operator h^d k = U diag(sigma) U^T."""

    grid: Grid
    U: np.ndarray
    sigma: np.ndarray

    def reconstruct(self) -> np.ndarray:
        """Kernel values of k."""
        return (self.U * self.sigma) @ self.U.T / self.grid.weight


@dataclass(frozen=True, eq=False)
class PairKernel:
    """Symmetric pair-excitation kernel k(x, y)."""

    k: Kernel

    def __post_init__(self):
        validate_tag(self.k.values, SYMMETRIC, 1e-12, what='pair kernel')

    @property
    def grid(self) -> Grid:
        return self.k.grid

    @classmethod
    def from_values(cls, grid: Grid, values: np.ndarray) -> 'PairKernel':
        values = np.asarray(values, dtype=complex)
        return cls(Kernel(grid, 0.5 * (values + values.T), SYMMETRIC))


def takagi(k: Kernel) -> TakagiFactors:
    """Takagi factors of the operator with kernel k; sigma descending."""
    u, s = takagi_matrix(k.grid.weight * k.values)
    return TakagiFactors(k.grid, u, s)


# ============================================================================
# HYPERBOLIC FUNCTIONS
# ============================================================================

def hyperbolic_matrices(u: np.ndarray, sigma: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Operator-level sh(k), ch(k) - 1, sh(2k), ch(2k) - 1 from Takagi factors.

    `ch - 1` is assembled from 2 sinh^2(s/2) to keep small kernels accurate.
    """
    uh = u.conj().T
    return {
        'sh': (u * np.sinh(sigma)) @ u.T,
        'ch_minus_one': (u * (2.0 * np.sinh(sigma / 2) ** 2)) @ uh,
        'sh2': (u * np.sinh(2 * sigma)) @ u.T,
        'ch2_minus_one': (u * (2.0 * np.sinh(sigma) ** 2)) @ uh,
    }


def matrix_hyperbolics(k_op: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(S, C) operator matrices for an operator-level symmetric k (mode space, weight 1)."""
    u, s = takagi_matrix(k_op)
    mats = hyperbolic_matrices(u, s)
    return mats['sh'], np.eye(len(s), dtype=complex) + mats['ch_minus_one']


@dataclass(frozen=True, eq=False)
class HyperbolicPair:
    """
    Kernels u = sh(k), c = delta + p = ch(k), s2 = sh(2k), w2 = ch(2k) - delta.

    omega = conj(w2) = 2 conj(u) o u is the hermitian kernel entering Gamma.
    """

    grid: Grid
    u: np.ndarray
    p: np.ndarray
    s2: np.ndarray
    w2: np.ndarray

    @property
    def c(self) -> np.ndarray:
        return self.grid.delta_values() + self.p

    @property
    def omega(self) -> np.ndarray:
        return self.w2.conj()

    def kernels(self) -> Dict[str, Kernel]:
        g = self.grid
        return {
            'u': Kernel(g, self.u, SYMMETRIC, tol=1e-10),
            'p': Kernel(g, self.p, HERMITIAN, tol=1e-10),
            's2': Kernel(g, self.s2, SYMMETRIC, tol=1e-10),
            'w2': Kernel(g, self.w2, HERMITIAN, tol=1e-10),
        }


def hyperbolic_from_factors(factors: TakagiFactors) -> HyperbolicPair:
    w = factors.grid.weight
    mats = hyperbolic_matrices(factors.U, factors.sigma)
    return HyperbolicPair(
        grid=factors.grid,
        u=mats['sh'] / w,
        p=mats['ch_minus_one'] / w,
        s2=mats['sh2'] / w,
        w2=mats['ch2_minus_one'] / w,
    )


def hyperbolic_from_k(k: PairKernel) -> HyperbolicPair:
    """sh(k), ch(k), sh(2k), ch(2k) - delta for a symmetric pair kernel."""
    return hyperbolic_from_factors(takagi(k.k))


def sh_series(k_op: np.ndarray, tol: float = SERIES_TOL) -> np.ndarray:
    """sum_n (k conj(k))^n k / (2n+1)!, truncated once the next term is below tol."""
    kk = k_op @ k_op.conj()
    term = k_op.astype(complex)
    total = term.copy()
    n = 0
    while np.linalg.norm(term) >= tol:
        n += 1
        term = kk @ term / ((2 * n) * (2 * n + 1))
        total += term
        if n > 200:
            break
    return total


def ch_series(k_op: np.ndarray, tol: float = SERIES_TOL) -> np.ndarray:
    """sum_n (k conj(k))^n / (2n)!."""
    kk = k_op @ k_op.conj()
    term = np.eye(k_op.shape[0], dtype=complex)
    total = term.copy()
    n = 0
    while np.linalg.norm(term) >= tol:
        n += 1
        term = kk @ term / ((2 * n - 1) * (2 * n))
        total += term
        if n > 200:
            break
    return total


def symplectic_residual(pair: HyperbolicPair) -> Dict[str, float]:
    """
    Operator-norm-free residuals of the hyperbolic identities, in L^2 kernel norm.

    Returns:
        Dictionary with keys 'k' (c o c - u o conj(u) - delta), '2k' (same for the
        2k pair), 'sh2k' (s2 - 2 c o u) and 'omega' (conj(w2) - 2 conj(u) o u)
    """
    g = pair.grid
    w = g.weight
    cc = pair.p + pair.p + w * pair.p @ pair.p
    res_k = cc - w * pair.u @ pair.u.conj()
    c2c2 = 2 * pair.w2 + w * pair.w2 @ pair.w2
    res_2k = c2c2 - w * pair.s2 @ pair.s2.conj()
    res_s2 = pair.s2 - 2 * w * pair.c @ pair.u
    res_omega = pair.omega - 2 * w * pair.u.conj() @ pair.u
    return {
        'k': g.norm(res_k),
        '2k': g.norm(res_2k),
        'sh2k': g.norm(res_s2),
        'omega': g.norm(res_omega),
    }


def kernel_symplectic_residual(grid: Grid, psi: np.ndarray, w2: np.ndarray) -> float:
    """L^2 residual of ch(2k) o ch(2k) - sh(2k) o conj(sh(2k)) - delta with ch(2k) = delta + w2."""
    w = grid.weight
    return grid.norm(2 * w2 + w * w2 @ w2 - w * psi @ psi.conj())


# ============================================================================
# MARGINALS <-> PAIR DATA
# ============================================================================

def recover_pair(lam: Kernel, gam: Kernel, phi: Field, N: int, tol: float = 1e-10) -> Tuple[Kernel, Kernel]:
    """
    psi = 2N (Lambda - phi phi), omega = 2N (Gamma - conj(phi) phi).

    Inputs are validated against their tags; outputs are projected onto their
    tags so that rounding in long runs does not leak into later factorizations.
    """
    grid = _same_grid(lam, gam, phi)
    validate_tag(lam.values, SYMMETRIC, tol, what='Lambda')
    validate_tag(gam.values, HERMITIAN, tol, what='Gamma')
    psi, omega = recover_pair_values(lam.values, gam.values, phi.values, N)
    return Kernel(grid, psi, SYMMETRIC), Kernel(grid, omega, HERMITIAN)


def recover_pair_values(lam: np.ndarray, gam: np.ndarray, phi: np.ndarray, N: int) -> Tuple[np.ndarray, np.ndarray]:
    psi = 2 * N * (lam - np.outer(phi, phi))
    omega = 2 * N * (gam - np.outer(phi.conj(), phi))
    return 0.5 * (psi + psi.T), 0.5 * (omega + omega.conj().T)


def marginals_from_pair(phi: Field, pair: HyperbolicPair, N: int) -> Tuple[Kernel, Kernel]:
    """(Lambda, Gamma) of the quasi-free state built from phi and k."""
    grid = _same_grid(phi, pair)
    f = phi.values
    lam = np.outer(f, f) + pair.s2 / (2 * N)
    gam = np.outer(f.conj(), f) + pair.omega / (2 * N)
    return (Kernel(grid, 0.5 * (lam + lam.T), SYMMETRIC),
            Kernel(grid, 0.5 * (gam + gam.conj().T), HERMITIAN))


def k_from_pair(psi: Kernel) -> PairKernel:
    """Inverse calculus: k = U (arcsinh(tau) / 2) U^T from the Takagi factors of psi = sh(2k)."""
    grid = psi.grid
    u, tau = takagi_matrix(grid.weight * psi.values)
    sigma = 0.5 * np.arcsinh(tau)
    if not np.all(np.isfinite(sigma)):
        raise TakagiError('arcsinh branch produced non-finite values')
    values = (u * sigma) @ u.T / grid.weight
    return PairKernel.from_values(grid, values)


# ============================================================================
# CLOSED-FORM MARGINALS
# ============================================================================

def wick_blocks(phi: np.ndarray, u: np.ndarray, c: np.ndarray, N: int, w: float) -> Dict[str, np.ndarray]:
    """
    Fock components of a_x a_y psi (f-blocks), a*_x a_y psi (g-blocks) and a_y psi (e-blocks).

    Index order: Fock variables first, then the operator labels.
    """
    rn = np.sqrt(N)
    cb = c.conj()
    f0 = N * np.outer(phi, phi) + w * c @ u
    f1 = rn * (phi[None, :, None] * u[:, None, :] + phi[None, None, :] * u[:, :, None])
    f2 = (u[:, None, :, None] * u[None, :, None, :] + u[None, :, :, None] * u[:, None, None, :]) / np.sqrt(2)
    g0 = N * np.outer(phi.conj(), phi) + w * u.conj() @ u
    # g1[w, x1, y] = sqrt(N) (conj(phi)(x1) S(y, w) + phi(y) conj(C)(x1, w))
    g1 = rn * (phi.conj()[None, :, None] * u.T[:, None, :] + phi[None, None, :] * cb.T[:, :, None])
    # g2[w1, w2, x1, y] = (conj(C)(x1, w1) S(y, w2) + conj(C)(x1, w2) S(y, w1)) / sqrt(2)
    g2 = (cb.T[:, None, :, None] * u.T[None, :, None, :] + cb.T[None, :, :, None] * u.T[:, None, None, :]) / np.sqrt(2)
    return {'e0': rn * phi, 'e1': u.T, 'f0': f0, 'f1': f1, 'f2': f2, 'g0': g0, 'g1': g1, 'g2': g2}


def closed_form_marginals(phi: Field, u: np.ndarray, c: np.ndarray, N: int, which: Tuple[int, int]) -> np.ndarray:
    """
    L_{m,n}(y...; x...) = N^{-(m+n)/2} <a_y... psi, a_x... psi> of the state
    e^{-sqrt(N) A(phi)} e^{-B(k)} Omega, assembled from the Wick blocks.

    Args:
        phi: Condensate field
        u, c: Kernel values of sh(k) and ch(k) (c includes the discrete delta)
        N: Particle number
        which: (1, 2), (2, 2) or (1, 3)

    Returns:
        Array of shape (size,) * (m + n), creation labels first
    """
    which = tuple(which)
    if which not in SUPPORTED_MARGINALS:
        raise ValueError(f"Unsupported marginal {which}; supported: {SUPPORTED_MARGINALS}")
    grid = phi.grid
    n = grid.size
    if n ** 4 > MAX_TENSOR_ENTRIES:
        raise ValueError(f"Grid with {n} nodes is too large to materialize four-index marginals")
    w = grid.weight
    b = wick_blocks(phi.values, u, c, N, w)

    if which == (1, 2):
        out = np.einsum('y,ab->yab', b['e0'].conj(), b['f0'])
        out += w * np.einsum('wy,wab->yab', b['e1'].conj(), b['f1'])
        return out / N ** 1.5

    f2 = b['f2'].reshape(n * n, n, n)
    if which == (2, 2):
        out = np.einsum('pq,ab->pqab', b['f0'].conj(), b['f0'])
        out += w * np.einsum('wpq,wab->pqab', b['f1'].conj(), b['f1'])
        out += w ** 2 * np.einsum('wpq,wab->pqab', f2.conj(), f2)
        return out / N ** 2

    # (1, 3): <a*_{x1} a_{y1} psi, a_{x2} a_{x3} psi>
    g2 = b['g2'].reshape(n * n, n, n)
    out = np.einsum('ay,bc->yabc', b['g0'].conj(), b['f0'])
    out += w * np.einsum('way,wbc->yabc', b['g1'].conj(), b['f1'])
    out += w ** 2 * np.einsum('way,wbc->yabc', g2.conj(), f2)
    return out / N ** 2


# ============================================================================
# HIERARCHY COLLISION TERMS
# ============================================================================

def hierarchy_sources(phi: Field, lam: Kernel, gam: Kernel, vN: Field) -> Dict[str, np.ndarray]:
    """
    Collision integrals of the first three hierarchy equations:

        J1(x)      = int v(x - z) L12(z; x, z) dz
        J2(x1, x2) = int (v(x1 - z) - v(x2 - z)) L22(x1, z; z, x2) dz
        J3(x1, x2) = int (v(x1 - z) + v(x2 - z)) L13(z; x1, x2, z) dz

    evaluated by Wick contraction of the marginals, without four-index tensors.
    """
    grid = _same_grid(phi, lam, gam, vN)
    return hierarchy_source_values(grid, phi.values, lam.values, gam.values, interaction_matrix(vN))


def hierarchy_source_values(grid: Grid, f: np.ndarray, lam: np.ndarray, gam: np.ndarray,
                            W: np.ndarray) -> Dict[str, np.ndarray]:
    w = grid.weight
    fb = f.conj()
    gam_c = gam - np.outer(fb, f)
    U = w * W @ np.diagonal(gam)
    q = w * W @ np.abs(f) ** 2
    WL = W * lam
    WG = W * gam

    j1 = w * WL @ fb + f * (w * W @ np.diagonal(gam_c)) + w * (W * gam_c.T) @ f

    left = w * (W * lam.conj()) @ lam + w * WG @ gam + U[:, None] * gam - 2 * np.outer(fb * q, f)
    right = w * lam.conj() @ WL + w * gam @ WG + gam * U[None, :] - 2 * np.outer(fb, f * q)
    j2 = left - right

    p = (w * lam @ WG).T + w * WL @ gam + U[:, None] * lam - 2 * q[:, None] * np.outer(f, f)
    j3 = p + p.T
    return {'J1': j1, 'J2': j2, 'J3': j3}


def hierarchy_sources_from_tensors(grid: Grid, l12: np.ndarray, l22: np.ndarray, l13: np.ndarray,
                                   W: np.ndarray) -> Dict[str, np.ndarray]:
    """Same collision integrals contracted directly from materialized marginals."""
    w = grid.weight
    d12 = np.einsum('zxz->xz', l12)
    d22 = np.einsum('azzb->azb', l22)
    d13 = np.einsum('zabz->abz', l13)
    return {
        'J1': w * np.sum(W * d12, axis=1),
        'J2': w * (np.einsum('az,azb->ab', W, d22) - np.einsum('bz,azb->ab', W, d22)),
        'J3': w * (np.einsum('az,abz->ab', W, d13) + np.einsum('bz,abz->ab', W, d13)),
    }
