"""Turbo E step: LMMSE module (A) and HMM-MMSE message passing module (B)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import expit

from .observation import MeasurementOperator, Observation
from .scene import HmmParams

MODES = ("exact", "banded", "banded_printed", "po_approx")


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GaussianBelief:
    """Stacked [x_r; x_c] mean with a diagonal covariance."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=complex).reshape(-1))
        object.__setattr__(self, "var", np.asarray(self.var, dtype=float).reshape(-1))
        if self.mean.shape != self.var.shape:
            raise ValueError("mean and variance sizes differ")

    @property
    def m(self) -> int:
        return self.mean.size // 2

    def radar(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean[: self.m], self.var[: self.m]

    def comm(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean[self.m:], self.var[self.m:]

    @classmethod
    def stack(cls, mean_r, var_r, mean_c, var_c) -> "GaussianBelief":
        return cls(np.concatenate([mean_r, mean_c]), np.concatenate([var_r, var_c]))


@dataclass(frozen=True)
class SupportPosterior:
    pi_r: np.ndarray
    pi_c: np.ndarray


@dataclass(frozen=True)
class EstepResult:
    belief: GaussianBelief
    support: SupportPosterior
    iterations_used: int
    converged: bool


@dataclass(frozen=True)
class EstepConfig:
    max_iter: int = 50
    tol: float = 1e-4
    damping: float = 0.5  # weight kept from the previous B->A message; 0 disables
    mode: str = "exact"
    var_ceiling_factor: float = 1e6
    prob_floor: float = 1e-12
    noise_floor: float = 1e-10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown LMMSE mode {self.mode!r}")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


def _pentadiagonal_banded(mat: np.ndarray) -> np.ndarray:
    """Diagonal-ordered storage of the |i-j| <= 2 band, as used by solve_banded((2, 2), ...)."""
    n = mat.shape[0]
    ab = np.zeros((5, n), dtype=mat.dtype)
    for k in range(-2, 3):
        d = np.diagonal(mat, k)
        if k >= 0:
            ab[2 - k, k:] = d
        else:
            ab[2 - k, : n + k] = d
    return ab


def _lmmse_block(f, y, noise_var, mean_pri, var_pri, mode):
    n = mean_pri.size
    if f.shape[0] == 0:
        return mean_pri.copy(), var_pri.copy()
    rhs = mean_pri / var_pri + f.conj().T @ y / noise_var
    if mode == "po_approx":
        scale = np.real(np.vdot(f, f)) / n  # tr(F^H F) / n
        var = 1.0 / (scale / noise_var + 1.0 / var_pri)
        return var * rhs, var
    info = f.conj().T @ f / noise_var + np.diag(1.0 / var_pri)
    if mode == "exact":
        try:
            cho = linalg.cho_factor(info, lower=True)
        except linalg.LinAlgError as exc:
            raise InferenceError("LMMSE information matrix is not positive definite") from exc
        cov = linalg.cho_solve(cho, np.eye(n))
        return linalg.cho_solve(cho, rhs), np.real(np.diag(cov))
    # first-order expansion of info^{-1} around its penta-diagonal part
    ab = _pentadiagonal_banded(info)
    w = linalg.solve_banded((2, 2), ab, np.eye(n, dtype=info.dtype))
    u = linalg.solve_banded((2, 2), ab, rhs)
    mean = 2.0 * u - linalg.solve_banded((2, 2), ab, info @ u)
    second = np.einsum("ij,ji->i", w, info @ w)
    if mode == "banded":
        var = np.real(2.0 * np.diag(w) - second)
    else:
        # literal printed form: 2 V0 - V0^{-1} V V0^{-1}; kept for comparison only
        var = np.real(2.0 * np.diag(info) - second)
    return mean, var


def lmmse_update(op: MeasurementOperator, obs: Observation, prior: GaussianBelief,
                 mode: str = "exact", noise_floor: float = 1e-10) -> GaussianBelief:
    """Module A: Gaussian posterior of the stacked coefficients, returned with its diagonal.

    Radar and communication rows use their own noise variances; the problem is
    block-diagonal, so each block is solved separately.
    """
    if mode not in MODES:
        raise ValueError(f"unknown LMMSE mode {mode!r}")
    if np.any(prior.var <= 0) or not np.all(np.isfinite(prior.var)):
        raise InferenceError("prior variances must be positive and finite")
    m_r, v_r = prior.radar()
    m_c, v_c = prior.comm()
    mr, vr = _lmmse_block(op.f_r, obs.y_r, max(obs.noise_var_r, noise_floor), m_r, v_r, mode)
    mc, vc = _lmmse_block(op.f_c, obs.y_c, max(obs.noise_var_c, noise_floor), m_c, v_c, mode)
    return GaussianBelief.stack(mr, vr, mc, vc)


def extrinsic(posterior: GaussianBelief, prior: GaussianBelief, ceiling=1e6) -> GaussianBelief:
    """Remove ``prior`` from ``posterior`` in information form.

    Where the posterior is not sharper than the prior the message carries no
    information: its variance is set to ``ceiling`` and its mean to the posterior mean.
    """
    ceiling = np.broadcast_to(np.asarray(ceiling, float), posterior.var.shape)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        prec = 1.0 / posterior.var - 1.0 / prior.var
        var = 1.0 / prec
        mean = var * (posterior.mean / posterior.var - prior.mean / prior.var)
    ok = (prec > 0) & np.isfinite(var) & (var <= ceiling) & np.isfinite(mean)
    return GaussianBelief(np.where(ok, mean, posterior.mean), np.where(ok, var, ceiling))


def _cn_zero_log_ratio(mean, var, slab):
    """log CN(0; mean, var) - log CN(0; mean, var + slab)."""
    a2 = np.abs(mean) ** 2
    return np.log((var + slab) / var) - a2 / var + a2 / (var + slab)


def _clip(p, floor):
    return np.clip(p, floor, 1.0 - floor)


def _to_joint(pi_in, rho, floor):
    """Message from the conditional-activity factor to the joint support node."""
    on = rho * pi_in + (1.0 - rho) * (1.0 - pi_in)
    return _clip(on / (on + (1.0 - pi_in)), floor)


def _forward_backward(pi_in, rho01, rho10, floor):
    m = pi_in.size
    rho11, rho00 = 1.0 - rho10, 1.0 - rho01
    gf = np.empty(m)
    gb = np.empty(m)
    gf[0] = _clip(rho01 / (rho01 + rho10), floor)
    for i in range(1, m):
        p, g = pi_in[i - 1], gf[i - 1]
        num = rho01 * (1 - p) * (1 - g) + rho11 * p * g
        gf[i] = num / ((1 - p) * (1 - g) + p * g)
    gf = _clip(gf, floor)
    gb[m - 1] = 0.5
    for i in range(m - 2, -1, -1):
        p, g = pi_in[i + 1], gb[i + 1]
        off = (1 - p) * (1 - g)
        on1 = rho10 * off + rho11 * p * g
        on0 = rho00 * off + rho01 * p * g
        gb[i] = min(max(on1 / (on1 + on0), floor), 1.0 - floor)
    return gf, gb


def _bg_posterior(mean, var, slab, pi_out, floor):
    """Bernoulli-Gaussian posterior moments given the virtual AWGN observation."""
    pi_in = _clip(expit(-_cn_zero_log_ratio(mean, var, slab)), floor)
    num = pi_in * pi_out
    p = num / (num + (1.0 - pi_in) * (1.0 - pi_out))
    mu = slab / (slab + var) * mean
    tau = var * slab / (var + slab)
    post_mean = p * mu
    post_var = p * tau + p * (1.0 - p) * np.abs(mu) ** 2
    return post_mean, np.maximum(post_var, np.finfo(float).tiny), p, pi_in


def module_b_pass(ext_from_a: GaussianBelief, params: HmmParams,
                  floor: float = 1e-12) -> tuple[GaussianBelief, SupportPosterior]:
    """Module B: sum-product over the HMM support graph with the A->B message as a
    virtual AWGN observation. The graph is a tree, so the pass is exact for it."""
    m = ext_from_a.m
    slab_r, slab_c = params.slab_vars(m)
    xr, vr = ext_from_a.radar()
    xc, vc = ext_from_a.comm()

    pin_r = _clip(expit(-_cn_zero_log_ratio(xr, vr, slab_r)), floor)
    pin_c = _clip(expit(-_cn_zero_log_ratio(xc, vc, slab_c)), floor)
    to_s_r = _to_joint(pin_r, params.rho_r, floor)
    to_s_c = _to_joint(pin_c, params.rho_c_cond, floor)
    pi_in = _clip(to_s_r * to_s_c / (to_s_r * to_s_c + (1 - to_s_r) * (1 - to_s_c)), floor)

    gf, gb = _forward_backward(pi_in, params.rho01, params.rho10, floor)
    chain_on = gf * gb
    chain_off = (1 - gf) * (1 - gb)
    out_s_r = chain_on * to_s_c / (chain_on * to_s_c + chain_off * (1 - to_s_c))
    out_s_c = chain_on * to_s_r / (chain_on * to_s_r + chain_off * (1 - to_s_r))
    pout_r = _clip(params.rho_r * out_s_r, floor)
    pout_c = _clip(params.rho_c_cond * out_s_c, floor)

    mr, var_r, p_r, _ = _bg_posterior(xr, vr, slab_r, pout_r, floor)
    mc, var_c, p_c, _ = _bg_posterior(xc, vc, slab_c, pout_c, floor)
    return GaussianBelief.stack(mr, var_r, mc, var_c), SupportPosterior(p_r, p_c)


def initial_prior(params: HmmParams, m: int, floor: float = 1e-12) -> GaussianBelief:
    """Zero mean with the marginal prior variance lambda * rho * slab variance."""
    slab_r, slab_c = params.slab_vars(m)
    lam = params.steady_state
    var_r = np.maximum(lam * params.rho_r, floor) * slab_r
    var_c = np.maximum(lam * params.rho_c_cond, floor) * slab_c
    return GaussianBelief.stack(np.zeros(m), var_r, np.zeros(m), var_c)


def _block_average(belief: GaussianBelief) -> GaussianBelief:
    m = belief.m
    v = belief.var
    var = np.concatenate([np.full(m, v[:m].mean()), np.full(m, v[m:].mean())])
    return GaussianBelief(belief.mean, var)


def run_estep(op: MeasurementOperator, obs: Observation, params: HmmParams,
              config: EstepConfig = EstepConfig()) -> EstepResult:
    """Alternate modules A and B until the module-B posterior mean settles."""
    m = op.f_r.shape[1]
    slab_r, slab_c = params.slab_vars(m)
    ceiling = config.var_ceiling_factor * np.concatenate([slab_r, slab_c])
    prior_a = initial_prior(params, m, config.prob_floor)
    po = config.mode == "po_approx"

    post_b = None
    support = None
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        post_a = lmmse_update(op, obs, prior_a, config.mode, config.noise_floor)
        if po:
            post_a = _block_average(post_a)
        ext_ab = extrinsic(post_a, prior_a, ceiling)
        new_post_b, support = module_b_pass(ext_ab, params, config.prob_floor)
        if po:
            new_post_b = _block_average(new_post_b)
        ext_ba = extrinsic(new_post_b, ext_ab, ceiling)
        if config.damping > 0 and it > 1:
            d = config.damping
            ext_ba = GaussianBelief(d * prior_a.mean + (1 - d) * ext_ba.mean,
                                    d * prior_a.var + (1 - d) * ext_ba.var)
        if post_b is not None:
            change = np.linalg.norm(new_post_b.mean - post_b.mean)
            scale = max(np.linalg.norm(new_post_b.mean), 1e-12)
            if change <= config.tol * scale:
                converged = True
        post_b = new_post_b
        prior_a = ext_ba
        if converged:
            break
    return EstepResult(post_b, support, it, converged)
