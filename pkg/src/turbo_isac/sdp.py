"""Small dense log-barrier solver for linear objectives under Hermitian LMIs.

maximize c^T z  subject to  F0_b + sum_k z_k F_bk >= 0 for every block b,

with real z. Scalar inequalities are 1x1 blocks. The barrier method needs a
strictly feasible start and certifies the result with the usual nu / t bound on
the duality gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg


class SolverError(RuntimeError):
    pass


@dataclass
class LmiBlock:
    f0: np.ndarray  # (d, d) Hermitian
    fk: np.ndarray  # (n, d, d) Hermitian

    def value(self, z: np.ndarray) -> np.ndarray:
        return self.f0 + np.tensordot(z, self.fk, axes=(0, 0))

    @property
    def dim(self) -> int:
        return self.f0.shape[0]


@dataclass
class SdpResult:
    z: np.ndarray
    objective: float
    gap_bound: float
    newton_steps: int
    min_eig: float  # smallest eigenvalue over all blocks at z


def hermitian_basis(r: int) -> np.ndarray:
    """Orthonormal (Frobenius) real-coefficient basis of r x r Hermitian matrices, shape (r*r, r, r)."""
    basis = []
    for i in range(r):
        e = np.zeros((r, r), complex)
        e[i, i] = 1.0
        basis.append(e)
    s = 1.0 / np.sqrt(2.0)
    for i in range(r):
        for j in range(i + 1, r):
            e = np.zeros((r, r), complex)
            e[i, j] = e[j, i] = s
            basis.append(e)
            e = np.zeros((r, r), complex)
            e[i, j] = -1j * s
            e[j, i] = 1j * s
            basis.append(e)
    return np.array(basis)


def _chol(mat):
    try:
        return linalg.cholesky(mat, lower=True, check_finite=False)
    except (linalg.LinAlgError, ValueError):
        return None


def _barrier_terms(blocks, z, need_hessian=True):
    """Barrier value, gradient and Hessian of -sum log det F_b(z); None if infeasible."""
    n = z.size
    val = 0.0
    grad = np.zeros(n)
    hess = np.zeros((n, n)) if need_hessian else None
    for b in blocks:
        chol = _chol(b.value(z))
        if chol is None:
            return None
        val -= 2.0 * np.sum(np.log(np.real(np.diag(chol))))
        if not need_hessian:
            continue
        linv = linalg.solve_triangular(chol, np.eye(b.dim), lower=True)
        t = np.einsum("ab,kbc,dc->kad", linv, b.fk, linv.conj())  # L^{-1} F_k L^{-H}
        flat = t.reshape(n, -1)
        grad -= np.real(np.einsum("kii->k", t))
        hess += np.real(flat.conj() @ flat.T)
    return val, grad, hess


def min_eigenvalue(blocks, z) -> float:
    return min(float(np.linalg.eigvalsh(b.value(z))[0]) for b in blocks)


def solve_lmi(c: np.ndarray, blocks: list[LmiBlock], z0: np.ndarray, tol: float = 1e-8,
              mu: float = 20.0, t0: float = 1.0, max_newton: int = 500,
              bound: float = 1e9, center_tol: float = 1e-7) -> SdpResult:
    """Barrier method from the strictly feasible ``z0``; stops once nu / t <= tol."""
    c = np.asarray(c, float)
    z = np.asarray(z0, float).copy()
    if _barrier_terms(blocks, z, need_hessian=False) is None:
        raise SolverError("starting point is not strictly feasible for every LMI block")
    nu = sum(b.dim for b in blocks)
    t = t0
    steps = 0
    while True:
        for _ in range(100):
            val, g_bar, h_bar = _barrier_terms(blocks, z)
            grad = -t * c + g_bar
            hess = h_bar + 1e-14 * max(np.trace(h_bar), 1.0) * np.eye(z.size)
            try:
                cho = linalg.cho_factor(hess)
                dz = -linalg.cho_solve(cho, grad)
            except linalg.LinAlgError:
                dz = -np.linalg.lstsq(hess, grad, rcond=None)[0]
            dec2 = float(-grad @ dz)
            if dec2 / 2.0 <= center_tol:
                break
            phi0 = -t * float(c @ z) + val
            s = 1.0
            while s > 1e-12:
                trial = _barrier_terms(blocks, z + s * dz, need_hessian=False)
                if trial is not None and -t * float(c @ (z + s * dz)) + trial[0] <= phi0 - 0.25 * s * dec2:
                    break
                s *= 0.5
            else:
                break
            z = z + s * dz
            steps += 1
            if steps > max_newton:
                raise SolverError(f"barrier method exceeded {max_newton} Newton steps")
            if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > bound:
                raise SolverError("iterates diverge: the program appears unbounded")
        if nu / t <= tol:
            break
        t *= mu
    return SdpResult(z, float(c @ z), nu / t, steps, min_eigenvalue(blocks, z))
