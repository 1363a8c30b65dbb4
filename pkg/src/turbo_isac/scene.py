"""Joint burst-sparse supports, ground-truth scenes and channel synthesis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import AngularGrid, sin_bin_width, steering_matrix, uniform_sines


class ConfigurationError(ValueError):
    """Invalid or infeasible configuration."""


@dataclass(frozen=True)
class HmmParams:
    """Markov-chain support prior with conditional radar/comm activity and Gaussian slabs.

    ``var_r`` / ``var_c`` may be scalars or per-index arrays.
    """

    rho01: float
    rho10: float
    rho_r: float
    rho_c_cond: float
    var_r: float | np.ndarray = 1.0
    var_c: float | np.ndarray = 1.0

    def __post_init__(self):
        for name in ("rho01", "rho10", "rho_r", "rho_c_cond"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name}={p} is not a probability")
        if self.rho01 + self.rho10 <= 0.0:
            raise ConfigurationError("rho01 + rho10 must be positive")
        for name in ("var_r", "var_c"):
            v = np.asarray(getattr(self, name), dtype=float)
            if np.any(~np.isfinite(v)) or np.any(v <= 0.0):
                raise ConfigurationError(f"{name} must be strictly positive")

    @property
    def steady_state(self) -> float:
        """P(s_m = 1) of the stationary chain."""
        return self.rho01 / (self.rho01 + self.rho10)

    def slab_vars(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        return (np.broadcast_to(np.asarray(self.var_r, float), (m,)).copy(),
                np.broadcast_to(np.asarray(self.var_c, float), (m,)).copy())

    def replace(self, **kw) -> "HmmParams":
        d = dict(rho01=self.rho01, rho10=self.rho10, rho_r=self.rho_r,
                 rho_c_cond=self.rho_c_cond, var_r=self.var_r, var_c=self.var_c)
        d.update(kw)
        return HmmParams(**d)


@dataclass(frozen=True)
class SupportTriple:
    s: np.ndarray
    s_r: np.ndarray
    s_c: np.ndarray

    def __post_init__(self):
        s, s_r, s_c = (np.asarray(v, dtype=bool).reshape(-1) for v in (self.s, self.s_r, self.s_c))
        if not (s.size == s_r.size == s_c.size):
            raise ConfigurationError("support vectors differ in length")
        if np.any((s_r | s_c) & ~s):
            raise ConfigurationError("radar/comm support outside the joint support")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "s_r", s_r)
        object.__setattr__(self, "s_c", s_c)

    @property
    def m(self) -> int:
        return self.s.size

    @classmethod
    def from_sets(cls, m: int, radar, comm) -> "SupportTriple":
        s_r = np.zeros(m, bool)
        s_c = np.zeros(m, bool)
        s_r[list(radar)] = True
        s_c[list(comm)] = True
        return cls(s_r | s_c, s_r, s_c)

    def common_ratio(self) -> float:
        union = np.count_nonzero(self.s_r | self.s_c)
        return np.count_nonzero(self.s_r & self.s_c) / union if union else 0.0


@dataclass(frozen=True)
class SceneTruth:
    grid_truth: AngularGrid
    support: SupportTriple
    x_r: np.ndarray
    x_c: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x_r = np.asarray(self.x_r, dtype=complex).reshape(-1)
        x_c = np.asarray(self.x_c, dtype=complex).reshape(-1)
        m = self.support.m
        if x_r.size != m or x_c.size != m or self.grid_truth.m_tilde != m:
            raise ConfigurationError("scene dimensions are inconsistent")
        object.__setattr__(self, "x_r", x_r)
        object.__setattr__(self, "x_c", x_c)

    @property
    def m(self) -> int:
        return self.support.m

    @property
    def radar_indices(self) -> np.ndarray:
        return np.flatnonzero(self.x_r)

    @property
    def comm_indices(self) -> np.ndarray:
        return np.flatnonzero(self.x_c)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_supports(params: HmmParams, m: int, rng_seed=None) -> SupportTriple:
    """Draw (s, s_r, s_c) from the Markov chain started in its steady state.

    Indices with s=1 but s_r = s_c = 0 are kept: the prior allows them and they
    carry no channel energy.
    """
    rng = _rng(rng_seed)
    u = rng.random(m)
    s = np.empty(m, dtype=bool)
    s[0] = u[0] < params.steady_state
    for i in range(1, m):
        p_on = (1.0 - params.rho10) if s[i - 1] else params.rho01
        s[i] = u[i] < p_on
    s_r = s & (rng.random(m) < params.rho_r)
    s_c = s & (rng.random(m) < params.rho_c_cond)
    return SupportTriple(s, s_r, s_c)


def _cn(rng: np.random.Generator, var, size) -> np.ndarray:
    std = np.sqrt(np.asarray(var, float) / 2.0)
    return std * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


def jittered_grid(grid: AngularGrid, offgrid_jitter: float, rng) -> AngularGrid:
    """Perturb every grid sine by U(-j, j) half-bins; ``offgrid_jitter`` = 1 means +-half a bin."""
    m = grid.m_tilde
    half_bin = 0.5 * sin_bin_width(m)
    sines = grid.sines()
    if offgrid_jitter > 0:
        sines = sines + offgrid_jitter * half_bin * rng.uniform(-1.0, 1.0, m)
    edge = 1.0 - 0.05 * sin_bin_width(m)
    return AngularGrid(np.arcsin(np.clip(sines, -edge, edge)))


def sample_scene(params: HmmParams, support: SupportTriple, grid: AngularGrid,
                 offgrid_jitter: float = 1.0, rng_seed=None) -> SceneTruth:
    rng = _rng(rng_seed)
    m = support.m
    var_r, var_c = params.slab_vars(m)
    x_r = np.where(support.s_r, _cn(rng, var_r, m), 0.0)
    x_c = np.where(support.s_c, _cn(rng, var_c, m), 0.0)
    truth = jittered_grid(grid, offgrid_jitter, rng)
    return SceneTruth(truth, support, x_r, x_c)


def overlap_count(rho_common: float, k_targets: int, l_paths: int) -> int:
    """Number of shared AoAs n with n / (K + L - n) closest to ``rho_common``."""
    if not 0.0 <= rho_common <= 1.0:
        raise ConfigurationError("rho_common must lie in [0, 1]")
    n = int(round(rho_common * (k_targets + l_paths) / (1.0 + rho_common)))
    if n > min(k_targets, l_paths):
        raise ConfigurationError(
            f"common ratio {rho_common} needs {n} shared AoAs but K={k_targets}, L={l_paths}")
    return n


def _burst_sizes(total: int, rng) -> list[int]:
    sizes = []
    left = total
    while left > 0:
        size = min(int(rng.integers(2, 5)), left)
        sizes.append(size)
        left -= size
    if len(sizes) > 1 and sizes[-1] == 1 and sizes[-2] < 4:
        last = sizes.pop()
        sizes[-1] += last
    return sizes


def _place_bursts(sizes, m: int, occupied: np.ndarray, rng, gap: int = 1) -> list[np.ndarray]:
    bursts = []
    blocked = occupied.copy()
    for size in sizes:
        for _ in range(1000):
            start = int(rng.integers(0, m - size + 1))
            lo, hi = max(0, start - gap), min(m, start + size + gap)
            if not blocked[lo:hi].any():
                break
        else:
            # crowded array: accept any free contiguous slot
            free = [s for s in range(m - size + 1) if not blocked[s:s + size].any()]
            if not free:
                raise ConfigurationError("array too small for the requested clusters")
            start = int(rng.choice(free))
        idx = np.arange(start, start + size)
        blocked[idx] = True
        bursts.append(idx)
    return bursts


def make_cdl_like_scene(rho_common: float, k_targets: int, l_paths: int, m: int,
                        rng_seed=None, var_r: float = 1.0, var_c: float = 1.0,
                        offgrid_jitter: float = 1.0) -> SceneTruth:
    """Clustered scene with a controlled common sparsity ratio.

    Communication AoAs come in bursts of 2-4 adjacent grid indices. A subset of
    them (taken burst by burst so it stays clustered) is reused for radar
    targets; the remaining targets are fresh bursts on unused indices.
    """
    if k_targets + l_paths > m:
        raise ConfigurationError("more AoAs than grid points")
    rng = _rng(rng_seed)
    n_common = overlap_count(rho_common, k_targets, l_paths)
    occupied = np.zeros(m, dtype=bool)
    comm_bursts = _place_bursts(_burst_sizes(l_paths, rng), m, occupied, rng)
    comm = np.concatenate(comm_bursts) if comm_bursts else np.empty(0, int)
    occupied[comm] = True

    common = []
    for b in rng.permutation(len(comm_bursts)):
        take = comm_bursts[b][: n_common - len(common)]
        common.extend(int(i) for i in take)
        if len(common) == n_common:
            break
    fresh_bursts = _place_bursts(_burst_sizes(k_targets - n_common, rng), m, occupied, rng)
    radar = list(common) + [int(i) for b in fresh_bursts for i in b]

    support = SupportTriple.from_sets(m, radar, comm)
    params = HmmParams(0.5, 0.5, 1.0, 1.0, var_r, var_c)
    scene = sample_scene(params, support, AngularGrid.uniform(m), offgrid_jitter, rng)
    return SceneTruth(scene.grid_truth, scene.support, scene.x_r, scene.x_c,
                      meta={"rho_common": rho_common, "n_common": n_common})


def synthesize_channels(scene: SceneTruth) -> tuple[np.ndarray, np.ndarray]:
    """H^r = A diag(x_r) A^H and h^c = A x_c at the true AoAs."""
    a = steering_matrix(scene.grid_truth.theta, scene.m)
    h_r = (a * scene.x_r[None, :]) @ a.conj().T
    h_c = a @ scene.x_c
    return h_r, h_c


def scene_from_angles(m: int, radar_angles=(), radar_gains=(), comm_angles=(), comm_gains=(),
                      common_angles=(), common_gains_r=(), common_gains_c=()) -> SceneTruth:
    """Build a scene from explicit angles; each angle occupies its nearest uniform-grid index."""
    base = AngularGrid.uniform(m)
    theta = base.theta.copy()
    x_r = np.zeros(m, complex)
    x_c = np.zeros(m, complex)
    centres = uniform_sines(m)

    def slot(angle):
        i = int(np.argmin(np.abs(centres - np.sin(angle))))
        if x_r[i] != 0 or x_c[i] != 0:
            raise ConfigurationError("two AoAs share one grid index")
        theta[i] = angle
        return i

    for ang, g in zip(radar_angles, radar_gains):
        x_r[slot(ang)] = g
    for ang, g in zip(comm_angles, comm_gains):
        x_c[slot(ang)] = g
    for ang, gr, gc in zip(common_angles, common_gains_r, common_gains_c):
        i = slot(ang)
        x_r[i], x_c[i] = gr, gc
    support = SupportTriple((x_r != 0) | (x_c != 0), x_r != 0, x_c != 0)
    return SceneTruth(AngularGrid(theta), support, x_r, x_c)
