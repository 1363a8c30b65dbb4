"""Pilots, measurement operators and noisy observations for both stages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import AngularGrid, radar_matrix, steering_matrix
from .scene import ConfigurationError, SceneTruth, synthesize_channels


@dataclass(frozen=True)
class PilotSet:
    """Downlink pilots of both stages (rows are vectors), uplink pilot scalars and power budget."""

    dp_stage1: np.ndarray
    dp_stage2: np.ndarray
    up: np.ndarray
    power_budget: float

    def __post_init__(self):
        dp1 = np.atleast_2d(np.asarray(self.dp_stage1, dtype=complex))
        m = dp1.shape[1]
        dp2 = np.asarray(self.dp_stage2, dtype=complex)
        dp2 = dp2.reshape(-1, m) if dp2.size else np.zeros((0, m), complex)
        up = np.asarray(self.up, dtype=complex).reshape(-1)
        if self.power_budget <= 0:
            raise ConfigurationError("power budget must be positive")
        norms = np.concatenate([np.sum(np.abs(dp1) ** 2, 1), np.sum(np.abs(dp2) ** 2, 1)])
        if np.any(norms > self.power_budget * (1 + 1e-9)):
            raise ConfigurationError("downlink pilot exceeds the power budget")
        if up.size and np.any(np.abs(np.abs(up) - 1.0) > 1e-9):
            raise ConfigurationError("uplink pilots must have unit modulus")
        object.__setattr__(self, "dp_stage1", dp1)
        object.__setattr__(self, "dp_stage2", dp2)
        object.__setattr__(self, "up", up)

    @property
    def m(self) -> int:
        return self.dp_stage1.shape[1]

    def downlink(self, stage: int) -> np.ndarray:
        if stage == 1:
            return self.dp_stage1
        if stage == 2:
            return np.vstack([self.dp_stage1, self.dp_stage2])
        raise ConfigurationError(f"stage must be 1 or 2, got {stage}")

    def with_stage2(self, dp_stage2) -> "PilotSet":
        return PilotSet(self.dp_stage1, dp_stage2, self.up, self.power_budget)


def random_unitary(m: int, rng) -> np.ndarray:
    z = (rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))[None, :]


def omnidirectional_pilots(m: int, p: int, power: float, rng_seed=None) -> np.ndarray:
    """``p`` columns of a Haar unitary, each scaled to squared norm ``power`` (rows of the result)."""
    rng = np.random.default_rng(rng_seed)
    cols = []
    while len(cols) < p:
        u = random_unitary(m, rng)
        cols.extend(u.T[: p - len(cols)])
    return np.sqrt(power) * np.array(cols, dtype=complex).reshape(p, m)


def make_pilots(m: int, p1: int, q: int, power: float, rng_seed=None, p2: int = 0) -> PilotSet:
    """Omnidirectional stage-1 (and optional random stage-2) DPs and all-ones UPs."""
    rng = np.random.default_rng(rng_seed)
    dp = omnidirectional_pilots(m, p1 + p2, power, rng)
    return PilotSet(dp[:p1], dp[p1:], np.ones(q, complex), power)


def radar_operator(dp: np.ndarray, theta, m: int) -> np.ndarray:
    """F^r = V A_tilde(theta); column k of block p is a_k (a_k^H v_p)."""
    a = steering_matrix(theta, m)
    proj = dp @ a.conj()  # (P, n): a_k^H v_p
    return (a[None, :, :] * proj[:, None, :]).reshape(-1, a.shape[1])


def comm_operator(up: np.ndarray, theta, m: int) -> np.ndarray:
    a = steering_matrix(theta, m)
    return (up[:, None, None] * a[None, :, :]).reshape(-1, a.shape[1])


def downlink_kron(dp: np.ndarray) -> np.ndarray:
    """V = [v_1^T kron I_M; ...; v_P^T kron I_M]."""
    m = dp.shape[1]
    return np.vstack([np.kron(v[None, :], np.eye(m)) for v in dp])


def uplink_kron(up: np.ndarray, m: int) -> np.ndarray:
    return np.vstack([u * np.eye(m) for u in up])


@dataclass(frozen=True)
class MeasurementOperator:
    f_r: np.ndarray
    f_c: np.ndarray
    dp: np.ndarray
    up: np.ndarray
    grid: AngularGrid

    @property
    def m(self) -> int:
        return self.dp.shape[1]

    @property
    def v_mat(self) -> np.ndarray:
        return downlink_kron(self.dp)

    @property
    def u_mat(self) -> np.ndarray:
        return uplink_kron(self.up, self.m)

    def radar_matrix(self) -> np.ndarray:
        return radar_matrix(self.grid.theta, self.m)

    def apply(self, x_r, x_c) -> tuple[np.ndarray, np.ndarray]:
        return self.f_r @ x_r, self.f_c @ x_c


def build_operator(pilots: PilotSet, grid: AngularGrid, stage: int) -> MeasurementOperator:
    dp = pilots.downlink(stage)
    m = pilots.m
    if grid.m_tilde != m:
        raise ConfigurationError(f"grid has {grid.m_tilde} points, pilots have dimension {m}")
    return MeasurementOperator(radar_operator(dp, grid.theta, m),
                               comm_operator(pilots.up, grid.theta, m), dp, pilots.up, grid)


@dataclass(frozen=True)
class Observation:
    y_r: np.ndarray
    y_c: np.ndarray
    noise_var_r: float
    noise_var_c: float


def _cn_noise(rng, var: float, size: int) -> np.ndarray:
    # independent real/imaginary parts of variance var/2
    if var == 0:
        return np.zeros(size, complex)
    return np.sqrt(var / 2.0) * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


def observe(scene: SceneTruth, pilots: PilotSet, stage: int, noise_var_r: float,
            noise_var_c: float, rng_seed=None) -> Observation:
    """Reflected DP and received UP signals.

    Noise streams for stage-1 DPs, stage-2 DPs and UPs are spawned separately from
    ``rng_seed`` so stage-1 noise is identical across stages and stage-2 pilot choices.
    """
    if pilots.m != scene.m:
        raise ConfigurationError("pilot and scene dimensions differ")
    if isinstance(rng_seed, np.random.Generator):
        rng_seed = rng_seed.integers(0, 2**63)
    ss = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    rng1, rng2, rng_c = (np.random.default_rng(s) for s in ss.spawn(3))
    h_r, h_c = synthesize_channels(scene)
    m = scene.m
    dp = pilots.downlink(stage)
    p1 = pilots.dp_stage1.shape[0]
    noise_r = [_cn_noise(rng1, noise_var_r, m) for _ in range(p1)]
    noise_r += [_cn_noise(rng2, noise_var_r, m) for _ in range(dp.shape[0] - p1)]
    y_r = np.concatenate([h_r @ v + n for v, n in zip(dp, noise_r)])
    y_c = np.concatenate([h_c * u + _cn_noise(rng_c, noise_var_c, m) for u in pilots.up]) \
        if pilots.up.size else np.zeros(0, complex)
    return Observation(y_r, y_c, float(noise_var_r), float(noise_var_c))


def noise_variance_for_snr(signal_power_per_antenna: float, snr_db: float) -> float:
    return float(signal_power_per_antenna) / 10.0 ** (snr_db / 10.0)


def expected_radar_power(k_targets: int, var_r: float, power: float, m: int) -> float:
    """E ||H^r v||^2 / M for an isotropic pilot of squared norm ``power``."""
    return k_targets * var_r * power / m ** 2


def expected_comm_power(l_paths: int, var_c: float, m: int) -> float:
    return l_paths * var_c / m
