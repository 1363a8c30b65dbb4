"""Brute-force references for small instances: exhaustive support posterior,
central finite differences and Monte-Carlo score covariance."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .scene import HmmParams

MAX_ENUM_M = 6

# compatible per-index states (s; s_r, s_c)
STATES = np.array([(0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 0, 1), (1, 1, 1)], dtype=bool)


@dataclass(frozen=True)
class EnumeratedPosterior:
    pi_r: np.ndarray
    pi_c: np.ndarray
    pi_s: np.ndarray
    mean: np.ndarray  # stacked [x_r; x_c]
    var: np.ndarray
    evidence: float  # log p(y)

    @property
    def support_marginals(self) -> tuple[np.ndarray, np.ndarray]:
        return self.pi_r, self.pi_c


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def _log_prior(cfg: np.ndarray, params: HmmParams) -> float:
    """log p(s, s_r, s_c) for a (M, 3) boolean configuration."""
    s, sr, sc = cfg[:, 0], cfg[:, 1], cfg[:, 2]
    lam = params.steady_state
    lp = _log(lam if s[0] else 1.0 - lam)
    trans = {(0, 0): 1 - params.rho01, (0, 1): params.rho01,
             (1, 0): params.rho10, (1, 1): 1 - params.rho10}
    for i in range(1, s.size):
        lp += _log(trans[(int(s[i - 1]), int(s[i]))])
    on = s.astype(bool)
    lp += np.sum(_log(np.where(sr[on], params.rho_r, 1 - params.rho_r)))
    lp += np.sum(_log(np.where(sc[on], params.rho_c_cond, 1 - params.rho_c_cond)))
    return float(lp)


def enumerate_linear_gaussian(f: np.ndarray, y: np.ndarray, noise_diag: np.ndarray,
                              params: HmmParams) -> EnumeratedPosterior:
    """Exact posterior for y = f [x_r; x_c] + n, n ~ CN(0, diag(noise_diag)),
    under the joint HMM spike-and-slab prior, by summing over all 5^M supports."""
    f = np.asarray(f, complex)
    y = np.asarray(y, complex)
    noise_diag = np.asarray(noise_diag, float)
    m = f.shape[1] // 2
    if m > MAX_ENUM_M:
        raise ValueError(f"enumeration is limited to M <= {MAX_ENUM_M}, got {m}")
    slab = np.concatenate(params.slab_vars(m))
    w = 1.0 / noise_diag
    fw = f.conj().T * w[None, :]  # F^H N^{-1}
    gram = fw @ f
    b_all = fw @ y
    base = -np.sum(np.log(np.pi * noise_diag)) - np.real(np.vdot(y, w * y))

    log_w = []
    means = []
    second = []
    active_r = []
    active_c = []
    active_s = []
    for combo in itertools.product(range(len(STATES)), repeat=m):
        cfg = STATES[list(combo)]
        lp = _log_prior(cfg, params)
        if not np.isfinite(lp):
            continue
        act = np.concatenate([cfg[:, 1], cfg[:, 2]])
        idx = np.flatnonzero(act)
        mean = np.zeros(2 * m, complex)
        sec = np.zeros(2 * m)
        ll = base
        if idx.size:
            prec = gram[np.ix_(idx, idx)] + np.diag(1.0 / slab[idx])
            cho = linalg.cho_factor(prec, lower=True)
            b = b_all[idx]
            mu = linalg.cho_solve(cho, b)
            cov_diag = np.real(np.diag(linalg.cho_solve(cho, np.eye(idx.size))))
            logdet = 2.0 * np.sum(np.log(np.real(np.diag(cho[0]))))
            ll += np.real(np.vdot(b, mu)) - logdet - np.sum(np.log(slab[idx]))
            mean[idx] = mu
            sec[idx] = np.abs(mu) ** 2 + cov_diag
        log_w.append(lp + ll)
        means.append(mean)
        second.append(sec)
        active_s.append(cfg[:, 0])
        active_r.append(cfg[:, 1])
        active_c.append(cfg[:, 2])

    log_w = np.array(log_w)
    evidence = float(logsumexp(log_w))
    p = np.exp(log_w - evidence)
    mean = p @ np.array(means)
    var = p @ np.array(second) - np.abs(mean) ** 2
    return EnumeratedPosterior(p @ np.array(active_r, float), p @ np.array(active_c, float),
                               p @ np.array(active_s, float), mean, np.maximum(var, 0.0),
                               evidence)


def enumerate_posterior(op, obs, params: HmmParams, noise_floor: float = 1e-10) -> EnumeratedPosterior:
    """Exact marginals for the stacked radar/comm model built from a measurement operator."""
    n_r, m = op.f_r.shape
    n_c = op.f_c.shape[0]
    if m > MAX_ENUM_M:
        raise ValueError(f"enumeration is limited to M <= {MAX_ENUM_M}, got {m}")
    f = linalg.block_diag(op.f_r, op.f_c) if n_c else np.hstack([op.f_r, np.zeros((n_r, m))])
    y = np.concatenate([obs.y_r, obs.y_c])
    noise = np.concatenate([np.full(n_r, max(obs.noise_var_r, noise_floor)),
                            np.full(n_c, max(obs.noise_var_c, noise_floor))])
    return enumerate_linear_gaussian(f, y, noise, params)


def enumerate_virtual_awgn(mean, var, params: HmmParams) -> EnumeratedPosterior:
    """Exact posterior when the only evidence is x observed in independent Gaussian noise."""
    mean = np.asarray(mean, complex)
    return enumerate_linear_gaussian(np.eye(mean.size), mean, np.asarray(var, float), params)


def finite_diff(fn, x, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at real point ``x``.

    The result has shape fn(x).shape + x.shape; complex-valued maps are supported.
    """
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x))
    jac = np.zeros(f0.shape + x.shape, dtype=np.result_type(f0.dtype, float))
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = step
        jac[(Ellipsis,) + i] = (np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * step)
    return jac


def score_covariance(partition, pilots, noise_var_r: float, noise_var_c: float,
                     n_samples: int = 100_000, rng_seed=None, stage: int = 2,
                     step: float = 1e-6) -> np.ndarray:
    """Empirical covariance of the Gaussian score for the AoA vector [theta_r, theta_s, theta_c].

    The mean derivatives come from finite differences of the noiseless observation
    map, so the result does not share code with the analytic FIM.
    """
    from .fim import noiseless_mean  # local import keeps the oracle free of cycles

    theta0 = partition.theta_vector()
    if theta0.size == 0:
        return np.zeros((0, 0))
    jac = finite_diff(lambda th: noiseless_mean(partition.with_theta(th), pilots, stage),
                      theta0, step)  # (n_obs, n_theta)
    n_r = pilots.downlink(stage).shape[0] * pilots.m
    n_obs = jac.shape[0]
    var = np.concatenate([np.full(n_r, noise_var_r), np.full(n_obs - n_r, noise_var_c)])
    rng = np.random.default_rng(rng_seed)
    cov = np.zeros((theta0.size, theta0.size))
    done = 0
    chunk = 10_000
    weight = (2.0 / var)[:, None] * jac.conj()
    while done < n_samples:
        n = min(chunk, n_samples - done)
        noise = np.sqrt(var / 2.0) * (rng.standard_normal((n, n_obs)) + 1j * rng.standard_normal((n, n_obs)))
        score = np.real(noise @ weight)  # (n, n_theta)
        cov += score.T @ score
        done += n
    cov /= n_samples
    return 0.5 * (cov + cov.T)
