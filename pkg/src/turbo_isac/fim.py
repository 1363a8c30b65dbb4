"""Fisher information for the partitioned AoAs (pure radar, common, pure comm),
the equivalent FIM of the radar targets and the CRB."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import steering_derivative_matrix, steering_matrix
from .observation import PilotSet


class IdentifiabilityError(ValueError):
    """Singular information: some AoA cannot be estimated from the pilots."""


@dataclass(frozen=True)
class AoaPartition:
    """AoAs split into pure-radar, common and pure-comm sets with their known gains."""

    m: int
    theta_r: np.ndarray
    theta_s: np.ndarray
    theta_c: np.ndarray
    gains_r: np.ndarray  # radar gains of theta_r
    gains_s_r: np.ndarray  # radar gains of theta_s
    gains_s_c: np.ndarray  # comm gains of theta_s
    gains_c: np.ndarray  # comm gains of theta_c

    def __post_init__(self):
        for name, kind in (("theta_r", float), ("theta_s", float), ("theta_c", float),
                           ("gains_r", complex), ("gains_s_r", complex), ("gains_s_c", complex),
                           ("gains_c", complex)):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=kind).reshape(-1))
        if (self.theta_r.size != self.gains_r.size or self.theta_s.size != self.gains_s_r.size
                or self.theta_s.size != self.gains_s_c.size or self.theta_c.size != self.gains_c.size):
            raise ValueError("each angle needs its gains")
        allth = self.theta_vector()
        if np.unique(allth).size != allth.size:
            raise ValueError("AoA sets must be disjoint with distinct angles")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.theta_r.size, self.theta_s.size, self.theta_c.size

    def theta_vector(self) -> np.ndarray:
        return np.concatenate([self.theta_r, self.theta_s, self.theta_c])

    def with_theta(self, theta) -> "AoaPartition":
        kr, ks, _ = self.sizes
        theta = np.asarray(theta, float)
        return AoaPartition(self.m, theta[:kr], theta[kr:kr + ks], theta[kr + ks:],
                            self.gains_r, self.gains_s_r, self.gains_s_c, self.gains_c)

    # radar targets are theta_r followed by theta_s; comm paths are theta_s then theta_c
    def radar_targets(self) -> tuple[np.ndarray, np.ndarray]:
        return np.concatenate([self.theta_r, self.theta_s]), np.concatenate([self.gains_r, self.gains_s_r])

    def comm_paths(self) -> tuple[np.ndarray, np.ndarray]:
        return np.concatenate([self.theta_s, self.theta_c]), np.concatenate([self.gains_s_c, self.gains_c])

    @classmethod
    def from_scene(cls, scene) -> "AoaPartition":
        """Partition taken from the true scene (genie information)."""
        r = scene.x_r != 0
        c = scene.x_c != 0
        th = scene.grid_truth.theta
        return cls(scene.m, th[r & ~c], th[r & c], th[c & ~r], scene.x_r[r & ~c],
                   scene.x_r[r & c], scene.x_c[r & c], scene.x_c[c & ~r])


def radar_derivative_matrices(partition: AoaPartition) -> np.ndarray:
    """dH^r/dtheta_k = x_k (a' a^H + a a'^H) for each radar target, shape (K, M, M)."""
    th, g = partition.radar_targets()
    a = steering_matrix(th, partition.m)
    da = steering_derivative_matrix(th, partition.m)
    outer = np.einsum("ik,jk->kij", da, a.conj()) + np.einsum("ik,jk->kij", a, da.conj())
    return g[:, None, None] * outer


def channel_jacobians(partition: AoaPartition, m: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rows d h^r / d theta_k with h^r = vec((H^r)^T) and rows d h^c / d theta_l."""
    if m is not None and m != partition.m:
        raise ValueError("array size does not match the partition")
    d = radar_derivative_matrices(partition)
    dhr = d.reshape(d.shape[0], partition.m ** 2)  # row-major flatten of H equals vec(H^T)
    th, g = partition.comm_paths()
    dhc = (steering_derivative_matrix(th, partition.m) * g[None, :]).T
    return dhr, dhc


def psi_matrix(dp: np.ndarray) -> np.ndarray:
    """Stacked [I kron v_p^T], mapping vec((H^r)^T) onto the reflected pilots."""
    m = dp.shape[1]
    if dp.shape[0] == 0:
        return np.zeros((0, m * m), complex)
    return np.vstack([np.kron(np.eye(m), v[None, :]) for v in dp])


def noiseless_mean(partition: AoaPartition, pilots: PilotSet, stage: int = 2) -> np.ndarray:
    """Stacked noiseless observations [H^r v_p ...; h^c u_q ...] for the partition's paths."""
    m = partition.m
    th, g = partition.radar_targets()
    a = steering_matrix(th, m)
    h_r = (a * g[None, :]) @ a.conj().T
    th_c, g_c = partition.comm_paths()
    h_c = steering_matrix(th_c, m) @ g_c
    dp = pilots.downlink(stage)
    parts = [h_r @ v for v in dp] + [h_c * u for u in pilots.up]
    return np.concatenate(parts) if parts else np.zeros(0, complex)


def radar_gram(partition: AoaPartition) -> np.ndarray:
    """G[i, j] = D_i^H D_j, so the radar FIM entry is (2/noise) Re tr(G[i, j] S)."""
    d = radar_derivative_matrices(partition)
    return np.einsum("irc,jrd->ijcd", d.conj(), d)


def radar_fim_from_cov(gram: np.ndarray, cov: np.ndarray, noise_var_r: float) -> np.ndarray:
    """Radar FIM for the aggregate pilot covariance S = sum_p v_p v_p^H."""
    j = 2.0 / noise_var_r * np.real(np.einsum("ijcd,dc->ij", gram, cov))
    return 0.5 * (j + j.T)


def comm_fim(partition: AoaPartition, up: np.ndarray, noise_var_c: float) -> np.ndarray:
    _, dhc = channel_jacobians(partition)
    j = 2.0 / noise_var_c * np.sum(np.abs(up) ** 2) * np.real(dhc.conj() @ dhc.T)
    return 0.5 * (j + j.T)


@dataclass(frozen=True)
class EfimBundle:
    partition: AoaPartition
    j_full: np.ndarray  # ordered [theta_r, theta_s, theta_c]
    j_eff: np.ndarray  # radar targets [theta_r, theta_s]
    noise_var_r: float
    noise_var_c: float
    dp: np.ndarray
    up: np.ndarray

    @property
    def j_blocks(self) -> dict:
        kr, ks, _ = self.partition.sizes
        sl = {"r": slice(0, kr), "s": slice(kr, kr + ks), "c": slice(kr + ks, None)}
        keys = [("r", "r"), ("r", "s"), ("r", "c"), ("s", "s"), ("s", "c"), ("c", "c")]
        return {k: self.j_full[sl[k[0]], sl[k[1]]] for k in keys}

    @property
    def psi_r(self) -> np.ndarray:
        return psi_matrix(self.dp)

    @property
    def psi_c(self) -> np.ndarray:
        return np.vstack([u * np.eye(self.partition.m) for u in self.up]) if self.up.size \
            else np.zeros((0, self.partition.m), complex)

    @property
    def lambda_min(self) -> float:
        return float(np.linalg.eigvalsh(self.j_eff)[0]) if self.j_eff.size else np.inf


def schur_correction(partition: AoaPartition, j_comm: np.ndarray) -> np.ndarray:
    """J(s,c) J(c,c)^{-1} J(s,c)^T embedded in the radar-target index set."""
    kr, ks, kc = partition.sizes
    corr = np.zeros((kr + ks, kr + ks))
    if kc == 0 or ks == 0:
        return corr
    j_sc = j_comm[:ks, ks:]
    j_cc = j_comm[ks:, ks:]
    try:
        sol = np.linalg.solve(j_cc, j_sc.T)
    except np.linalg.LinAlgError as exc:
        raise IdentifiabilityError("pure-comm AoA block is singular") from exc
    if np.linalg.cond(j_cc) > 1e14:
        raise IdentifiabilityError("pure-comm AoA block is singular")
    c = j_sc @ sol
    corr[kr:, kr:] = 0.5 * (c + c.T)
    return corr


def assemble_from_parts(partition: AoaPartition, j_radar: np.ndarray, j_comm: np.ndarray,
                        noise_var_r, noise_var_c, dp, up) -> EfimBundle:
    kr, ks, kc = partition.sizes
    n = kr + ks + kc
    full = np.zeros((n, n))
    full[: kr + ks, : kr + ks] += j_radar
    full[kr:, kr:] += j_comm
    full = 0.5 * (full + full.T)
    j_eff = full[: kr + ks, : kr + ks] - schur_correction(partition, j_comm)
    return EfimBundle(partition, full, 0.5 * (j_eff + j_eff.T), noise_var_r, noise_var_c,
                      np.asarray(dp, complex), np.asarray(up, complex))


def assemble_fim(partition: AoaPartition, pilots: PilotSet, noise_var_r: float,
                 noise_var_c: float, stage: int = 2) -> EfimBundle:
    """FIM of [theta_r, theta_s, theta_c] under known gains, with the radar-target EFIM.

    Radar blocks use the aggregated pilot operator Psi acting on vec((H^r)^T); the comm
    block scales with sum_q |u_q|^2. The two share only the common AoAs, so the
    pure-radar/pure-comm block is zero.
    """
    if pilots.m != partition.m:
        raise ValueError("pilot and partition dimensions differ")
    dp = pilots.downlink(stage)
    dhr, _ = channel_jacobians(partition)
    if dhr.shape[0]:
        psi = psi_matrix(dp)
        pd = psi @ dhr.T  # (P*M, K)
        j_radar = 2.0 / noise_var_r * np.real(pd.conj().T @ pd)
    else:
        j_radar = np.zeros((0, 0))
    j_comm = comm_fim(partition, pilots.up, noise_var_c)
    return assemble_from_parts(partition, j_radar, j_comm, noise_var_r, noise_var_c, dp, pilots.up)


def crb(bundle: EfimBundle | np.ndarray) -> np.ndarray:
    """Inverse EFIM; its diagonal lower-bounds the per-AoA MSE."""
    j = bundle.j_eff if isinstance(bundle, EfimBundle) else np.atleast_2d(np.asarray(bundle, float))
    if j.size == 0:
        return np.zeros((0, 0))
    w = np.linalg.eigvalsh(0.5 * (j + j.T))
    if w[0] <= 1e-12 * max(abs(w[-1]), 1e-300):
        raise IdentifiabilityError("EFIM is singular")
    c = np.linalg.inv(j)
    return 0.5 * (c + c.T)
