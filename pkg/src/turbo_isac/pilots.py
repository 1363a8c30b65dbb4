"""Stage-2 downlink pilot design: maximize the smallest EFIM eigenvalue of the
radar targets under per-pilot power and rank-one constraints.

The rank-one constraint is replaced by a smooth log-det surrogate and handled by
majorization-minimization: each iteration linearizes the concave surrogate at
the previous covariance and solves the resulting convex program. The EFIM only
sees the pilot covariance through its compression onto span{a_k, a'_k} of the
radar-target steering vectors and their derivatives, so the programs are posed
in that subspace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fim import (AoaPartition, EfimBundle, IdentifiabilityError, assemble_from_parts, comm_fim,
                  radar_fim_from_cov, radar_gram)
from .geometry import steering_derivative_matrix, steering_matrix
from .observation import PilotSet
from .sdp import LmiBlock, SolverError, hermitian_basis, solve_lmi


@dataclass(frozen=True)
class PilotCovariances:
    v_mats: np.ndarray  # (P2, M, M)
    power_budget: float
    epsilon: float = 1e-3

    def __post_init__(self):
        v = np.asarray(self.v_mats, complex)
        if v.ndim == 2:
            v = v[None]
        object.__setattr__(self, "v_mats", v)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        for mat in v:
            w = np.linalg.eigvalsh(0.5 * (mat + mat.conj().T))
            scale = max(self.power_budget, 1e-300)
            if w.size and w[0] < -1e-8 * scale:
                raise ValueError("pilot covariance is not PSD")
            if np.real(np.trace(mat)) > self.power_budget * (1 + 1e-7):
                raise ValueError("pilot covariance exceeds the power budget")

    @classmethod
    def from_vectors(cls, vectors, power_budget: float, epsilon: float = 1e-3) -> "PilotCovariances":
        vectors = np.atleast_2d(np.asarray(vectors, complex))
        return cls(np.einsum("pi,pj->pij", vectors, vectors.conj()), power_budget, epsilon)

    @property
    def total(self) -> np.ndarray:
        return self.v_mats.sum(axis=0)


def rank_surrogate(v: np.ndarray, epsilon: float = 1e-3) -> float:
    """[M log(1/eps) + log det(V + eps I)] / log(1 + 1/eps), a smooth concave rank proxy.

    Evaluated as sum_m log(1 + lambda_m / eps) / log(1 + 1/eps), which is the same
    quantity and is exactly zero at V = 0.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    w = np.clip(np.linalg.eigvalsh(0.5 * (v + np.conj(v).T)), 0.0, None)
    return float(np.sum(np.log1p(w / epsilon)) / np.log1p(1.0 / epsilon))


def _stage1_cov(pilots: PilotSet) -> np.ndarray:
    dp = pilots.dp_stage1
    return dp.T @ dp.conj()


def efim_from_covariances(partition: AoaPartition, pilots: PilotSet, covs: PilotCovariances | None,
                          noise_var_r: float, noise_var_c: float) -> EfimBundle:
    """EFIM with stage-1 pilots as vectors and stage-2 pilots as covariances.

    The radar blocks are linear in S = sum_p v_p v_p^H, so rank-one covariances give
    the same result as the explicit vectors.
    """
    cov = _stage1_cov(pilots)
    if covs is not None:
        cov = cov + covs.total
    j_radar = radar_fim_from_cov(radar_gram(partition), cov, noise_var_r)
    j_comm = comm_fim(partition, pilots.up, noise_var_c)
    return assemble_from_parts(partition, j_radar, j_comm, noise_var_r, noise_var_c,
                               pilots.dp_stage1, pilots.up)


def target_subspace(partition: AoaPartition, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of span{a(theta_k), a'(theta_k)} over the radar targets."""
    th, _ = partition.radar_targets()
    if th.size == 0:
        raise IdentifiabilityError("no radar targets to design pilots for")
    span = np.hstack([steering_matrix(th, partition.m), steering_derivative_matrix(th, partition.m)])
    u, s, _ = np.linalg.svd(span, full_matrices=False)
    return u[:, s > tol * s[0]]


@dataclass
class ConvexSubproblem:
    """max lambda s.t. c0 + sum_p Re tr(gram X_p) >= lambda I, X_p >= 0, tr X_p <= P_t and,
    when ``rank_lin`` is set, tr(W_p X_p / P_t) <= rhs_p.

    ``X_p`` are r x r Hermitian coordinates of V_p = B X_p B^H in ``basis``.
    """

    c0: np.ndarray  # (n, n) EFIM without stage-2 pilots
    gram: np.ndarray  # (n, n, r, r)
    basis: np.ndarray  # (M, r)
    power_budget: float
    n_pilots: int = 1
    rank_lin: list | None = None  # [(W_p, rhs_p)] in normalized coordinates X_p / P_t
    epsilon: float = 1e-3

    @property
    def r(self) -> int:
        return self.basis.shape[1]

    def efim(self, xs_norm) -> np.ndarray:
        """EFIM for normalized coordinates X_p / P_t."""
        tot = self.power_budget * np.sum(xs_norm, axis=0)
        j = self.c0 + np.real(np.einsum("ijab,ba->ij", self.gram, tot))
        return 0.5 * (j + j.T)

    def lambda_min(self, xs_norm) -> float:
        return float(np.linalg.eigvalsh(self.efim(xs_norm))[0])


def build_subproblem(partition: AoaPartition, pilots: PilotSet, noise_var_r: float,
                     noise_var_c: float, n_pilots: int = 1, epsilon: float = 1e-3) -> ConvexSubproblem:
    basis = target_subspace(partition)
    c0 = efim_from_covariances(partition, pilots, None, noise_var_r, noise_var_c).j_eff
    g = radar_gram(partition)
    gram = 2.0 / noise_var_r * np.einsum("ma,ijmn,nb->ijab", basis.conj(), g, basis)
    return ConvexSubproblem(c0, gram, basis, pilots.power_budget, n_pilots, None, epsilon)


def _coords(mats, basis_e):
    return np.real(np.einsum("kab,pba->pk", basis_e, np.asarray(mats)))


def solve_subproblem(sub: ConvexSubproblem, tol: float = 1e-9, start=None):
    """Solve the convex program; returns (normalized X_p, lambda, SdpResult).

    ``start`` is a strictly feasible list of normalized X_p. Without it an isotropic
    point is used. ``lambda`` is the smallest EFIM eigenvalue at the returned point,
    which the barrier iterate keeps at or above the solver's own lambda.
    """
    r, p2 = sub.r, sub.n_pilots
    e = hermitian_basis(r)
    nb = e.shape[0]
    n = sub.c0.shape[0]
    nvar = 1 + p2 * nb

    if start is None:
        c = 0.5 / r
        if sub.rank_lin is not None:
            for w, rhs in sub.rank_lin:
                c = min(c, 0.5 * rhs / max(np.real(np.trace(w)), 1e-300))
        if c <= 0:
            raise SolverError("linearized rank constraint admits no interior point")
        start = [c * np.eye(r) for _ in range(p2)]
    start = np.asarray(start, complex)

    lin = np.real(np.einsum("ijab,kba->kij", sub.gram, e)) * sub.power_budget
    iso = np.repeat(np.eye(r)[None] / r, p2, axis=0)
    scale = max(float(np.max(np.abs(np.linalg.eigvalsh(sub.efim(iso))))), 1e-300)

    blocks = []
    fk = np.zeros((nvar, n, n), complex)
    fk[0] = -np.eye(n)
    for p in range(p2):
        fk[1 + p * nb: 1 + (p + 1) * nb] = lin / scale
    blocks.append(LmiBlock(sub.c0.astype(complex) / scale, fk))
    tr_e = np.real(np.einsum("kii->k", e))
    for p in range(p2):
        sl = slice(1 + p * nb, 1 + (p + 1) * nb)
        fk = np.zeros((nvar, r, r), complex)
        fk[sl] = e
        blocks.append(LmiBlock(np.zeros((r, r), complex), fk))
        fk = np.zeros((nvar, 1, 1), complex)
        fk[sl, 0, 0] = -tr_e
        blocks.append(LmiBlock(np.ones((1, 1), complex), fk))
        if sub.rank_lin is not None:
            w, rhs = sub.rank_lin[p]
            fk = np.zeros((nvar, 1, 1), complex)
            fk[sl, 0, 0] = -np.real(np.einsum("ab,kba->k", w, e))
            blocks.append(LmiBlock(np.full((1, 1), rhs, complex), fk))

    z0 = np.zeros(nvar)
    z0[1:] = _coords(start, e).reshape(-1)
    lam0 = sub.lambda_min(start) / scale
    z0[0] = lam0 - max(0.1 * abs(lam0), 1e-3)
    res = solve_lmi(np.eye(nvar)[0], blocks, z0, tol=tol)
    res.objective *= scale
    res.gap_bound *= scale
    xs = np.einsum("pk,kab->pab", res.z[1:].reshape(p2, nb), e)
    return xs, sub.lambda_min(xs), res


def _surrogate_unnormalized(x, eps):
    w = np.clip(np.linalg.eigvalsh(x), 0.0, None)
    return float(np.sum(np.log1p(w / eps)))


def _interior_start(xs, rank_lin, alpha=0.98):
    """Shrink the previous iterate towards a small multiple of I, strictly inside all constraints."""
    out = []
    for x, (w, rhs) in zip(xs, rank_lin):
        r = x.shape[0]
        trw = np.real(np.trace(w))
        slack = rhs - alpha * np.real(np.trace(w @ x))
        beta = min(0.5 * slack / trw, 0.5 * (1 - alpha * np.real(np.trace(x))) / r)
        out.append(alpha * x + max(beta, 0.0) * np.eye(r))
    return out


def rank_one_projection(v_mat: np.ndarray, power: float) -> np.ndarray:
    """Dominant eigenvector scaled to squared norm ``power``; first nonzero entry made real positive."""
    w, u = np.linalg.eigh(0.5 * (v_mat + v_mat.conj().T))
    vec = u[:, -1]
    nz = np.flatnonzero(np.abs(vec) > 1e-12 * np.max(np.abs(vec)))
    if nz.size:
        vec = vec * np.exp(-1j * np.angle(vec[nz[0]]))
    return np.sqrt(power) * vec / np.linalg.norm(vec)


@dataclass(frozen=True)
class PilotOptConfig:
    p2: int = 1
    epsilon: float = 1e-3
    max_iter: int = 20
    tol: float = 1e-3  # relative change of the EFIM between MM iterations
    sdp_tol: float = 1e-9
    init: str = "sdr"  # "sdr": rank-one projection of the relaxed optimum; "isotropic": c I

    def __post_init__(self):
        if self.p2 < 1 or self.max_iter < 1 or self.epsilon <= 0 or self.tol <= 0:
            raise ValueError("invalid pilot optimization settings")
        if self.init not in ("sdr", "isotropic"):
            raise ValueError(f"unknown initialization {self.init!r}")


@dataclass
class PilotDesign:
    vectors: np.ndarray  # (P2, M)
    covariances: PilotCovariances  # before projection
    lambda_before: float
    lambda_after: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)

    @property
    def projection_ratio(self) -> float:
        return self.lambda_after / self.lambda_before if self.lambda_before > 0 else np.nan


def _finish(sub, xs, partition, pilots, noise_var_r, noise_var_c, eps):
    pt = sub.power_budget
    mats = np.array([pt * sub.basis @ x @ sub.basis.conj().T for x in xs])
    mats = 0.5 * (mats + mats.conj().transpose(0, 2, 1))
    covs = PilotCovariances(mats, pt, eps)
    vectors = np.array([rank_one_projection(v, pt) for v in mats])
    after = efim_from_covariances(partition, pilots, PilotCovariances.from_vectors(vectors, pt, eps),
                                  noise_var_r, noise_var_c).lambda_min
    return covs, vectors, after


def optimize_pilots(partition: AoaPartition, pilots: PilotSet, noise_var_r: float,
                    noise_var_c: float, config: PilotOptConfig = PilotOptConfig()) -> PilotDesign:
    """MM over the linearized rank surrogate, then rank-one projection of each covariance.

    The default start is the rank-one projection of the relaxed (rank-free) optimum,
    which is feasible for the surrogate constraint; every MM step keeps the previous
    iterate feasible, so the lambda sequence cannot fall below that starting value.
    """
    eps = config.epsilon
    sub = build_subproblem(partition, pilots, noise_var_r, noise_var_c, config.p2, eps)
    r = sub.r
    limit = np.log1p(1.0 / eps)
    if config.init == "sdr":
        relaxed, _, _ = solve_subproblem(sub, config.sdp_tol)
        xs = []
        for x in relaxed:
            u = rank_one_projection(x, 1.0)
            xs.append(np.outer(u, u.conj()))
        c = 1.0 / r
    else:
        # isotropic start strictly inside the surrogate constraint r log(1 + c/eps) <= log(1 + 1/eps)
        c = 0.9 * min(1.0 / r, eps * np.expm1(limit / r))
        xs = [c * np.eye(r) for _ in range(config.p2)]
    lam = sub.lambda_min(xs)
    j_prev = sub.efim(xs)
    trace = [{"iteration": 0, "lambda": lam, "lmi_margin": 0.0,
              "max_trace": c * r * sub.power_budget, "surrogate": _surrogate_unnormalized(xs[0], eps) / limit}]
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        rank_lin = []
        for x in xs:
            w = np.linalg.inv(x + eps * np.eye(r))
            rhs = limit - _surrogate_unnormalized(x, eps) + np.real(np.trace(w @ x))
            rank_lin.append((w, rhs))
        sub.rank_lin = rank_lin
        try:
            xs_new, lam_new, res = solve_subproblem(sub, config.sdp_tol, _interior_start(xs, rank_lin))
        except SolverError as exc:
            raise SolverError(f"MM iteration {it}: {exc}") from exc
        j_new = sub.efim(xs_new)
        change = np.linalg.norm(j_new - j_prev) / max(np.linalg.norm(j_new), 1e-300)
        xs, lam, j_prev = list(xs_new), lam_new, j_new
        trace.append({"iteration": it, "lambda": lam, "lmi_margin": lam - res.objective,
                      "max_trace": float(max(np.real(np.trace(x)) for x in xs)) * sub.power_budget,
                      "surrogate": max(_surrogate_unnormalized(x, eps) for x in xs) / limit})
        if change <= config.tol:
            converged = True
            break
    covs, vectors, after = _finish(sub, xs, partition, pilots, noise_var_r, noise_var_c, eps)
    return PilotDesign(vectors, covs, lam, after, it, converged, trace)


def sdr_baseline(partition: AoaPartition, pilots: PilotSet, noise_var_r: float, noise_var_c: float,
                 config: PilotOptConfig = PilotOptConfig()) -> PilotDesign:
    """Drop the rank constraint, solve once and project each covariance to rank one."""
    sub = build_subproblem(partition, pilots, noise_var_r, noise_var_c, config.p2, config.epsilon)
    xs, lam, _ = solve_subproblem(sub, config.sdp_tol)
    covs, vectors, after = _finish(sub, xs, partition, pilots, noise_var_r, noise_var_c, config.epsilon)
    return PilotDesign(vectors, covs, lam, after, 1, True,
                       [{"iteration": 1, "lambda": lam, "lmi_margin": 0.0,
                         "max_trace": float(np.real(np.trace(covs.v_mats[0])))}])


def pilot_lambda(partition: AoaPartition, pilots: PilotSet, vectors, noise_var_r: float,
                 noise_var_c: float) -> float:
    """Smallest EFIM eigenvalue with explicit stage-2 pilot vectors."""
    covs = PilotCovariances.from_vectors(vectors, pilots.power_budget)
    return efim_from_covariances(partition, pilots, covs, noise_var_r, noise_var_c).lambda_min
