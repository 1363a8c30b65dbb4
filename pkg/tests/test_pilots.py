import numpy as np
import pytest

from turbo_isac.fim import AoaPartition, assemble_fim
from turbo_isac.observation import PilotSet, omnidirectional_pilots
from turbo_isac.pilots import (PilotCovariances, PilotOptConfig, build_subproblem, efim_from_covariances,
                               optimize_pilots, pilot_lambda, rank_one_projection, rank_surrogate,
                               sdr_baseline, solve_subproblem, ConvexSubproblem)
from turbo_isac.sdp import LmiBlock, SolverError, solve_lmi

from conftest import crandn


def _stage1(m, p1=1, q=1, power=1.0, seed=0):
    dp1 = omnidirectional_pilots(m, p1, power, np.random.default_rng(seed))
    return PilotSet(dp1, np.zeros((0, m)), np.ones(q, complex), power)


def _radar_partition(m, angles, rng):
    k = len(angles)
    return AoaPartition(m, angles, [], [], crandn(rng, k) + 1.0, [], [], [])


def _random_psd(rng, m, rank=None):
    a = crandn(rng, m, rank or m)
    return a @ a.conj().T


# --- rank surrogate ---------------------------------------------------------

def test_rank_surrogate_examples():
    assert rank_surrogate(np.zeros((5, 5))) == 0.0
    assert 1.999 <= rank_surrogate(np.eye(2), 1e-3) <= 2.001
    assert abs(rank_surrogate(np.diag([1.0, 0.0]), 1e-3) - 1.0) <= 1e-3
    with pytest.raises(ValueError):
        rank_surrogate(np.eye(2), 0.0)


def test_rank_surrogate_matches_logdet_form(rng):
    v = _random_psd(rng, 4) * 0.1
    eps = 1e-2
    _, logdet = np.linalg.slogdet(v + eps * np.eye(4))
    ref = (4 * np.log(1 / eps) + logdet) / np.log1p(1 / eps)
    assert rank_surrogate(v, eps) == pytest.approx(ref, rel=1e-12)


def test_rank_surrogate_concave(rng):
    for _ in range(200):
        m = int(rng.integers(2, 6))
        a = _random_psd(rng, m, int(rng.integers(1, m + 1))) / m
        b = _random_psd(rng, m, int(rng.integers(1, m + 1))) / m
        t = rng.uniform(0.05, 0.95)
        mid = rank_surrogate(t * a + (1 - t) * b)
        assert mid >= t * rank_surrogate(a) + (1 - t) * rank_surrogate(b) - 1e-9


# --- covariance-form EFIM ---------------------------------------------------

def _mixed_partition(rng, m=6):
    return AoaPartition(m, [0.4], [-0.3], [1.0], [1.0 + 0.5j], [0.8], [0.6j], [1.1])


def test_efim_zero_covariance_is_stage1(rng):
    part = _mixed_partition(rng)
    pil = _stage1(6, 2, 2)
    zero = PilotCovariances(np.zeros((1, 6, 6)), 1.0)
    a = efim_from_covariances(part, pil, zero, 0.5, 0.7).j_eff
    b = assemble_fim(part, pil, 0.5, 0.7).j_eff
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_efim_rank_one_covariances_match_vectors(rng):
    part = _mixed_partition(rng)
    pil = _stage1(6, 2, 2)
    v2 = crandn(rng, 2, 6)
    v2 /= np.linalg.norm(v2, axis=1, keepdims=True)
    covs = PilotCovariances.from_vectors(v2, 1.0)
    stacked = PilotSet(pil.dp_stage1, v2, pil.up, 1.0)
    ref = assemble_fim(part, stacked, 0.5, 0.7, stage=2)
    got = efim_from_covariances(part, pil, covs, 0.5, 0.7)
    np.testing.assert_allclose(got.j_full, ref.j_full, atol=1e-10)
    np.testing.assert_allclose(got.j_eff, ref.j_eff, atol=1e-10)


def test_efim_linear_in_covariance(rng):
    part = _radar_partition(5, [0.2, -0.6], rng)
    pil = _stage1(5)
    v = _random_psd(rng, 5)
    v *= 0.4 / np.trace(v).real
    j0 = efim_from_covariances(part, pil, None, 0.5, 0.5).j_eff
    j1 = efim_from_covariances(part, pil, PilotCovariances(v, 1.0), 0.5, 0.5).j_eff
    j2 = efim_from_covariances(part, pil, PilotCovariances(2.5 * v, 1.0), 0.5, 0.5).j_eff
    np.testing.assert_allclose(j2 - j0, 2.5 * (j1 - j0), rtol=1e-10, atol=1e-12)


def test_covariance_validation():
    with pytest.raises(ValueError):
        PilotCovariances(np.diag([2.0, 0.0]), 1.0)
    with pytest.raises(ValueError):
        PilotCovariances(np.diag([0.5, -0.5]), 1.0)
    with pytest.raises(ValueError):
        PilotCovariances(np.eye(2) * 0.1, 1.0, epsilon=0.0)


# --- SDP solver -------------------------------------------------------------

def test_solve_lmi_scalar_program():
    # max z s.t. 3 - z >= 0, z + 1 >= 0
    blocks = [LmiBlock(np.array([[3.0 + 0j]]), np.array([[[-1.0 + 0j]]])),
              LmiBlock(np.array([[1.0 + 0j]]), np.array([[[1.0 + 0j]]]))]
    res = solve_lmi(np.array([1.0]), blocks, np.array([0.0]), tol=1e-9)
    assert res.objective == pytest.approx(3.0, abs=1e-8)
    assert res.gap_bound <= 1e-9
    with pytest.raises(SolverError):
        solve_lmi(np.array([1.0]), blocks, np.array([5.0]))


def test_solve_lmi_max_eigenvalue_program():
    # max t s.t. A - t I >= 0 gives t = lambda_min(A)
    a = np.array([[2.0, 1.0], [1.0, 3.0]], complex)
    block = LmiBlock(a, np.array([-np.eye(2, dtype=complex)]))
    res = solve_lmi(np.array([1.0]), [block], np.array([0.0]), tol=1e-10)
    assert res.objective == pytest.approx(np.linalg.eigvalsh(a)[0], abs=1e-9)


def test_solve_lmi_unbounded_raises():
    block = LmiBlock(np.array([[1.0 + 0j]]), np.array([[[1.0 + 0j]]]))
    with pytest.raises(SolverError):
        solve_lmi(np.array([1.0]), [block], np.array([0.0]))


def test_subproblem_scalar_case():
    # M = 1, no rank constraint: V* = P_t, lambda* = j0 + g P_t
    j0, g, pt = 0.7, 2.0, 1.5
    sub = ConvexSubproblem(np.array([[j0]]), np.full((1, 1, 1, 1), g + 0j), np.ones((1, 1), complex), pt)
    xs, lam, res = solve_subproblem(sub, tol=1e-10)
    assert lam == pytest.approx(j0 + g * pt, abs=1e-8)
    assert np.real(xs[0, 0, 0]) == pytest.approx(1.0, abs=1e-8)


@pytest.mark.filterwarnings("ignore:Solution may be inaccurate")
def test_subproblem_matches_reference_solver(rng):
    cp = pytest.importorskip("cvxpy")
    m = 6
    part = _radar_partition(m, [-0.5, 0.1, 0.7], rng)
    sub = build_subproblem(part, _stage1(m), 0.5, 0.5)
    xs, lam, res = solve_subproblem(sub, tol=1e-9)
    assert lam >= res.objective - 1e-9
    r, n = sub.r, sub.c0.shape[0]
    x = cp.Variable((r, r), hermitian=True)
    t = cp.Variable()
    rows = [[sub.c0[i, j] + sub.power_budget * cp.real(cp.trace(sub.gram[i, j] @ x)) for j in range(n)]
            for i in range(n)]
    j = cp.bmat(rows)
    cons = [0.5 * (j + j.T) - t * np.eye(n) >> 0, x >> 0, cp.real(cp.trace(x)) <= 1]
    cp.Problem(cp.Maximize(t), cons).solve(solver=cp.CLARABEL)
    assert lam == pytest.approx(t.value, abs=1e-4 * max(1.0, abs(t.value)))


# --- pilot optimization -----------------------------------------------------

def test_rank_one_projection_phase_and_power(rng):
    v = crandn(rng, 5)
    p = rank_one_projection(np.outer(v, v.conj()), 2.0)
    assert np.linalg.norm(p) ** 2 == pytest.approx(2.0)
    assert abs(np.vdot(p, v)) / (np.linalg.norm(p) * np.linalg.norm(v)) == pytest.approx(1.0)
    assert np.imag(p[0]) == pytest.approx(0.0) and np.real(p[0]) > 0


def test_single_target_matches_dominant_eigenvector(rng):
    m = 8
    part = _radar_partition(m, [0.35], rng)
    dp1 = 1e-4 * np.ones((1, m)) / np.sqrt(m)  # negligible stage-1 illumination
    pil = PilotSet(dp1, np.zeros((0, m)), np.ones(1, complex), 1.0)
    nv = 0.5
    # quadratic form J(v) - J(0) = v^H Q v recovered by polarization of the scalar EFIM
    j0 = efim_from_covariances(part, pil, None, nv, nv).j_eff[0, 0]
    f = lambda v: efim_from_covariances(part, pil, PilotCovariances.from_vectors(0.5 * v, 1.0),
                                        nv, nv).j_eff[0, 0] - j0
    eye = np.eye(m)
    q = np.zeros((m, m), complex)
    for i in range(m):
        q[i, i] = f(eye[i])
        for k in range(i + 1, m):
            re = 0.5 * (f(eye[i] + eye[k]) - f(eye[i]) - f(eye[k]))
            im = 0.5 * (f(eye[i] + 1j * eye[k]) - f(eye[i]) - f(eye[k]))
            q[i, k] = re - 1j * im
            q[k, i] = np.conj(q[i, k])
    q /= 0.25
    w, u = np.linalg.eigh(q)
    # the top eigenvalue is twofold (a and its derivative span it), so align with the eigenspace
    top = u[:, w >= w[-1] * (1 - 1e-8)]
    design = optimize_pilots(part, pil, nv, nv)
    v = design.vectors[0]
    assert np.linalg.norm(top.conj().T @ v) / np.linalg.norm(v) >= 0.99
    assert np.real(v.conj() @ q @ v) >= 0.99 * w[-1] * np.linalg.norm(v) ** 2
    sdr = sdr_baseline(part, pil, nv, nv)
    # the relaxation is tight: projecting its optimum to rank one loses nothing
    assert np.linalg.norm(top.conj().T @ sdr.vectors[0]) / np.linalg.norm(sdr.vectors[0]) >= 0.99
    assert sdr.lambda_after == pytest.approx(sdr.lambda_before, rel=1e-6)
    assert sdr.lambda_after == pytest.approx(design.lambda_after, rel=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_optimized_pilots_properties(seed):
    rng = np.random.default_rng(seed)
    m = 12
    angles = np.sort(rng.choice(np.linspace(-1.0, 1.0, 9), 3, replace=False) + rng.uniform(-0.05, 0.05, 3))
    part = AoaPartition(m, angles[:2], angles[2:], [], crandn(rng, 2) + 1, [0.9], [0.7], [])
    pil = _stage1(m, 1, 1, 1.0, seed)
    nv = 0.3
    design = optimize_pilots(part, pil, nv, nv)
    lams = [row["lambda"] for row in design.trace]
    assert np.all(np.diff(lams) >= -1e-6 * max(1.0, abs(lams[-1])))
    assert np.linalg.norm(design.vectors[0]) ** 2 == pytest.approx(pil.power_budget)
    for mat in design.covariances.v_mats:
        assert np.real(np.trace(mat)) <= pil.power_budget * (1 + 1e-7)
    omni = omnidirectional_pilots(m, 1, 1.0, np.random.default_rng(100 + seed))
    assert design.lambda_after >= pilot_lambda(part, pil, omni, nv, nv)
    relaxed = sdr_baseline(part, pil, nv, nv)
    assert relaxed.lambda_before >= design.lambda_before - 1e-6 * abs(design.lambda_before)
    ev = np.linalg.eigvalsh(design.covariances.v_mats[0])
    assert ev[-2] / ev[-1] <= 0.05
    assert design.lambda_after >= 0.9 * design.lambda_before
    assert design.converged and design.iterations <= 10


def test_isotropic_start_is_monotone(rng):
    part = _radar_partition(8, [-0.4, 0.5], rng)
    design = optimize_pilots(part, _stage1(8), 0.5, 0.5, PilotOptConfig(init="isotropic"))
    lams = [row["lambda"] for row in design.trace]
    assert np.all(np.diff(lams) >= -1e-6 * max(1.0, abs(lams[-1])))


def test_config_validation():
    with pytest.raises(ValueError):
        PilotOptConfig(p2=0)
    with pytest.raises(ValueError):
        PilotOptConfig(init="random")
