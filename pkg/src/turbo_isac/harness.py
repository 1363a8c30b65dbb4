"""Two-stage Monte-Carlo protocol, baseline arms, metrics and CSV output."""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .estep import EstepConfig, InferenceError
from .fim import AoaPartition, IdentifiabilityError
from .geometry import AngularGrid, steering_matrix
from .mstep import MstepConfig, TurboResult, run_turbo_sbi
from .observation import (PilotSet, expected_comm_power, expected_radar_power, noise_variance_for_snr,
                          observe, omnidirectional_pilots)
from .pilots import PilotOptConfig, optimize_pilots, sdr_baseline
from .scene import ConfigurationError, HmmParams, SceneTruth, make_cdl_like_scene, overlap_count
from .sdp import SolverError

ARMS = ("JPOTDCE", "GENIE", "JDRP", "JDSDR", "SD_SBI")
CSV_COLUMNS = ("rho_c", "arm", "nmse_comm", "nmse_radar", "aoa_mse_avg", "aoa_mse_worst",
               "p_fa", "p_md", "trials_failed")
MEAN_BURST = 3.0


@dataclass(frozen=True)
class ScenarioConfig:
    m: int = 32
    p1: int = 1
    p2: int = 1
    q: int = 1
    snr_db: float = 3.0
    rho_common: tuple = (0.0, 0.5, 1.0)
    k_targets: int = 4
    l_paths: int = 4
    trials: int = 10
    seed: int = 0
    arms: tuple = ARMS
    detection_threshold: float = 0.5
    power_budget: float = 1.0
    var_r: float = 1.0
    var_c: float = 1.0
    offgrid_jitter: float = 1.0
    hmm: HmmParams | None = None  # None: matched to the scene generator for each rho
    estep: EstepConfig = field(default_factory=EstepConfig)
    mstep: MstepConfig = field(default_factory=MstepConfig)
    pilot: PilotOptConfig = field(default_factory=PilotOptConfig)
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "rho_common", tuple(float(r) for r in np.atleast_1d(self.rho_common)))
        object.__setattr__(self, "arms", tuple(self.arms))
        if min(self.m, self.p1, self.q, self.trials, self.k_targets, self.l_paths) < 1 or self.p2 < 0:
            raise ConfigurationError("counts must be positive")
        if not 0.0 < self.detection_threshold < 1.0:
            raise ConfigurationError("detection threshold must lie in (0, 1)")
        bad = set(self.arms) - set(ARMS)
        if bad:
            raise ConfigurationError(f"unknown arms {sorted(bad)}")
        if self.k_targets + self.l_paths > self.m:
            raise ConfigurationError("more AoAs than antennas")
        for rho in self.rho_common:
            overlap_count(rho, self.k_targets, self.l_paths)
        if self.power_budget <= 0 or self.var_r <= 0 or self.var_c <= 0:
            raise ConfigurationError("power and variances must be positive")

    def noise_vars(self) -> tuple[float, float]:
        """Noise variances giving the configured received SNR per antenna, averaged over scenes."""
        pr = expected_radar_power(self.k_targets, self.var_r, self.power_budget, self.m)
        pc = expected_comm_power(self.l_paths, self.var_c, self.m)
        return noise_variance_for_snr(pr, self.snr_db), noise_variance_for_snr(pc, self.snr_db)


@dataclass
class TrialMetrics:
    nmse_comm: float = np.nan
    nmse_radar: float = np.nan
    aoa_mse_avg: float = np.nan
    aoa_mse_worst: float = np.nan
    p_false_alarm: float = np.nan
    p_miss: float = np.nan
    runtime_stage1: float = 0.0
    runtime_stage2: float = 0.0
    failed: bool = False
    message: str = ""


def matched_hmm(config: ScenarioConfig, rho_common: float) -> HmmParams:
    """Prior matched to the clustered scene generator for a given common ratio."""
    if config.hmm is not None:
        return config.hmm
    n = overlap_count(rho_common, config.k_targets, config.l_paths)
    union = config.k_targets + config.l_paths - n
    lam = union / config.m
    rho10 = 1.0 / MEAN_BURST
    rho01 = min(lam * rho10 / (1.0 - lam), 1.0)
    return HmmParams(rho01, rho10, config.k_targets / union, config.l_paths / union,
                     config.var_r, config.var_c)


def separate_hmms(config: ScenarioConfig) -> tuple[HmmParams, HmmParams]:
    """Independent radar-only and comm-only chains for the separate-design arm."""
    out = []
    for count, (rr, rc) in ((config.k_targets, (1.0, 0.0)), (config.l_paths, (0.0, 1.0))):
        lam = count / config.m
        rho10 = 1.0 / MEAN_BURST
        out.append(HmmParams(min(lam * rho10 / (1 - lam), 1.0), rho10, rr, rc, config.var_r, config.var_c))
    return out[0], out[1]


def _match(est_sines, true_sines, tol):
    """Greedy one-to-one nearest matching in sin-space within ``tol``."""
    pairs = sorted((abs(e - t), i, j) for i, e in enumerate(est_sines) for j, t in enumerate(true_sines))
    used_e, used_t, out = set(), set(), []
    for d, i, j in pairs:
        if d > tol + 1e-12:
            break
        if i in used_e or j in used_t:
            continue
        used_e.add(i)
        used_t.add(j)
        out.append((i, j))
    return out


def compute_metrics(scene: SceneTruth, belief_mean: np.ndarray, support_r: np.ndarray,
                    grid: AngularGrid, threshold: float = 0.5) -> TrialMetrics:
    """Channel NMSEs, matched-AoA squared errors (radians) and detection error rates.

    A radar target is detected at index m when its support posterior is strictly
    above ``threshold``. Detections are paired one-to-one with the nearest true target
    in sin-space when within one grid bin (2/M); unpaired detections are false alarms
    (rate over the M - K inactive indices) and unpaired targets are misses.
    """
    m = scene.m
    a_true = steering_matrix(scene.grid_truth.theta, m)
    a_est = steering_matrix(grid.theta, m)
    x_r, x_c = belief_mean[:m], belief_mean[m:]
    h_r = (a_true * scene.x_r) @ a_true.conj().T
    h_c = a_true @ scene.x_c
    h_r_est = (a_est * x_r) @ a_est.conj().T
    h_c_est = a_est @ x_c
    nr = np.linalg.norm(h_r) ** 2
    nc = np.linalg.norm(h_c) ** 2
    met = TrialMetrics()
    met.nmse_radar = float(np.linalg.norm(h_r_est - h_r) ** 2 / nr) if nr > 0 else np.nan
    met.nmse_comm = float(np.linalg.norm(h_c_est - h_c) ** 2 / nc) if nc > 0 else np.nan

    det = np.flatnonzero(np.asarray(support_r) > threshold)
    truth = scene.radar_indices
    pairs = _match(grid.sines()[det], scene.grid_truth.sines()[truth], 2.0 / m)
    errs = [(grid.theta[det[i]] - scene.grid_truth.theta[truth[j]]) ** 2 for i, j in pairs]
    k = truth.size
    met.p_false_alarm = (det.size - len(pairs)) / (m - k) if m > k else 0.0
    met.p_miss = (k - len(pairs)) / k if k else 0.0
    if errs:
        met.aoa_mse_avg = float(np.mean(errs))
        met.aoa_mse_worst = float(np.max(errs))
    return met


def estimated_partition(result: TurboResult, m: int, threshold: float) -> AoaPartition:
    """Split stage-1 detections into pure-radar, common and pure-comm AoAs with their gains."""
    r = result.support.pi_r > threshold
    c = result.support.pi_c > threshold
    th = result.grid.theta
    x = result.belief.mean
    return AoaPartition(m, th[r & ~c], th[r & c], th[c & ~r], x[:m][r & ~c], x[:m][r & c],
                        x[m:][r & c], x[m:][c & ~r])


def trial_seeds(config: ScenarioConfig, rho_index: int, trial: int):
    ss = np.random.SeedSequence([config.seed, rho_index, trial])
    # plain integers: a SeedSequence mutates when spawned, and the noise seed is reused per stage
    return tuple(int(c.generate_state(1, np.uint64)[0]) for c in ss.spawn(4))


def _stage2_pilots(arm, config, pilots, stage1, scene, nvr, nvc, rng_ss):
    m = config.m
    if config.p2 == 0:
        return pilots.with_stage2(np.zeros((0, m)))
    random_dp = omnidirectional_pilots(m, config.p2, config.power_budget, rng_ss)
    if arm in ("JDRP", "SD_SBI"):
        return pilots.with_stage2(random_dp)
    part = AoaPartition.from_scene(scene) if arm == "GENIE" else \
        estimated_partition(stage1, m, config.detection_threshold)
    pcfg = replace(config.pilot, p2=config.p2)
    try:
        design = (sdr_baseline if arm == "JDSDR" else optimize_pilots)(part, pilots, nvr, nvc, pcfg)
    except IdentifiabilityError:
        # no radar target detected: nothing to focus on, fall back to a random pilot
        return pilots.with_stage2(random_dp)
    return pilots.with_stage2(design.vectors)


def _run_joint(config, pilots, obs, hmm, stage, grid0=None):
    return run_turbo_sbi(pilots, obs, hmm, stage, config.estep, config.mstep, grid0)


def _run_separate(config, pilots, obs, stage, grids=(None, None)):
    hr, hc = separate_hmms(config)
    res_r = run_turbo_sbi(pilots, obs, hr, stage, config.estep, config.mstep, grids[0])
    res_c = run_turbo_sbi(pilots, obs, hc, stage, config.estep, config.mstep, grids[1])
    return res_r, res_c


def _metrics_separate(scene, res_r, res_c, threshold):
    """Radar quantities from the radar-only run, comm quantities from the comm-only run."""
    met_r = compute_metrics(scene, res_r.belief.mean, res_r.support.pi_r, res_r.grid, threshold)
    met_c = compute_metrics(scene, res_c.belief.mean, res_c.support.pi_r, res_c.grid, threshold)
    met_r.nmse_comm = met_c.nmse_comm
    return met_r


def run_trial_arms(config: ScenarioConfig, rho_index: int, trial: int, arms=None) -> dict:
    """All requested arms on one paired scene; arms share the scene, stage-1 pilots and noise."""
    arms = tuple(config.arms if arms is None else arms)
    rho = config.rho_common[rho_index]
    scene_ss, pilot_ss, noise_ss, stage2_ss = trial_seeds(config, rho_index, trial)
    scene = make_cdl_like_scene(rho, config.k_targets, config.l_paths, config.m, scene_ss,
                                config.var_r, config.var_c, config.offgrid_jitter)
    rng_p = np.random.default_rng(pilot_ss)
    dp1 = omnidirectional_pilots(config.m, config.p1, config.power_budget, rng_p)
    pilots = PilotSet(dp1, np.zeros((0, config.m)), np.ones(config.q, complex), config.power_budget)
    nvr, nvc = config.noise_vars()
    hmm = matched_hmm(config, rho)
    obs1 = observe(scene, pilots, 1, nvr, nvc, noise_ss)

    out = {}
    joint1 = sep1 = None
    t1 = t1_sep = 0.0
    for arm in arms:
        try:
            t0 = time.perf_counter()
            if arm == "SD_SBI":
                if sep1 is None:
                    sep1 = _run_separate(config, pilots, obs1, 1)
                    t1_sep = time.perf_counter() - t0
                stage1, rt1 = sep1, t1_sep
            else:
                if joint1 is None:
                    joint1 = _run_joint(config, pilots, obs1, hmm, 1)
                    t1 = time.perf_counter() - t0
                stage1, rt1 = joint1, t1
            t0 = time.perf_counter()
            if config.p2 == 0:
                final = stage1
            else:
                p_all = _stage2_pilots(arm, config, pilots, joint1, scene, nvr, nvc, stage2_ss)
                obs2 = observe(scene, p_all, 2, nvr, nvc, noise_ss)
                if arm == "SD_SBI":
                    final = _run_separate(config, p_all, obs2, 2, (sep1[0].grid, sep1[1].grid))
                else:
                    final = _run_joint(config, p_all, obs2, hmm, 2, joint1.grid)
            rt2 = time.perf_counter() - t0
            if arm == "SD_SBI":
                met = _metrics_separate(scene, final[0], final[1], config.detection_threshold)
            else:
                met = compute_metrics(scene, final.belief.mean, final.support.pi_r, final.grid,
                                      config.detection_threshold)
            met.runtime_stage1, met.runtime_stage2 = rt1, rt2
        except (InferenceError, SolverError, IdentifiabilityError, np.linalg.LinAlgError,
                FloatingPointError, ValueError) as exc:
            met = TrialMetrics(failed=True, message=f"{type(exc).__name__}: {exc}")
        out[arm] = met
    return out


def run_trial(config: ScenarioConfig, scene_seed: int, arm: str, rho_index: int = 0) -> TrialMetrics:
    """One arm on the scene of trial ``scene_seed`` at ``config.rho_common[rho_index]``."""
    if arm not in ARMS:
        raise ConfigurationError(f"unknown arm {arm!r}")
    return run_trial_arms(config, rho_index, scene_seed, (arm,))[arm]


def _job(args):
    config, rho_index, trial = args
    return rho_index, trial, run_trial_arms(config, rho_index, trial)


def _aggregate(metrics: list[TrialMetrics]) -> dict:
    ok = [mt for mt in metrics if not mt.failed]

    def mean(name):
        vals = np.array([getattr(mt, name) for mt in ok], float)
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else float("nan")

    return {"nmse_comm": mean("nmse_comm"), "nmse_radar": mean("nmse_radar"),
            "aoa_mse_avg": mean("aoa_mse_avg"), "aoa_mse_worst": mean("aoa_mse_worst"),
            "p_fa": mean("p_false_alarm"), "p_md": mean("p_miss"),
            "trials_failed": len(metrics) - len(ok)}


def run_experiment(config: ScenarioConfig, return_trials: bool = False):
    """Rows (one per rho_c and arm) of trial-averaged metrics; arms are paired per trial."""
    jobs = [(config, i, t) for i in range(len(config.rho_common)) for t in range(config.trials)]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    per = {}
    for rho_index, trial, arms in sorted(results, key=lambda r: (r[0], r[1])):
        for arm, met in arms.items():
            per.setdefault((rho_index, arm), []).append(met)
    rows = []
    for i, rho in enumerate(config.rho_common):
        for arm in config.arms:
            row = {"rho_c": rho, "arm": arm}
            row.update(_aggregate(per[(i, arm)]))
            rows.append(row)
    return (rows, per) if return_trials else rows


def format_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([row["arm"] if col == "arm" else
                         str(int(row[col])) if col == "trials_failed" else
                         f"{row[col]:.5e}" for col in CSV_COLUMNS])
    return buf.getvalue()


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_csv(rows))


def metrics_dict(met: TrialMetrics) -> dict:
    return asdict(met)
