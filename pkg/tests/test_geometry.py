import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from turbo_isac.geometry import (AngularGrid, clamp_angles, radar_column, radar_column_derivative,
                                 radar_matrix, steering_derivative, steering_matrix, steering_vector)
from turbo_isac.oracle import finite_diff

s2 = 1 / np.sqrt(2)


def _cfd(fn, theta, step=1e-6):
    return (fn(theta + step) - fn(theta - step)) / (2 * step)


@pytest.mark.parametrize("theta, expected", [
    (0.0, [s2, s2]), (np.pi / 2, [s2, -s2]), (np.pi / 6, [s2, -1j * s2])])
def test_steering_vector_examples(theta, expected):
    np.testing.assert_allclose(steering_vector(theta, 2), expected, atol=1e-15)


def test_steering_derivative_examples():
    np.testing.assert_allclose(steering_derivative(0.0, 2), [0, -1j * np.pi * s2], atol=1e-15)
    np.testing.assert_allclose(steering_derivative(np.pi / 2, 5), np.zeros(5), atol=1e-14)
    fd = _cfd(lambda t: steering_vector(t, 4), 0.3)
    assert np.max(np.abs(fd - steering_derivative(0.3, 4))) <= 1e-6


def test_radar_column_examples(rng):
    np.testing.assert_allclose(radar_column(0.0, 2), [0.5] * 4, atol=1e-15)
    np.testing.assert_allclose(radar_column(np.pi / 2, 2), [0.5, -0.5, -0.5, 0.5], atol=1e-15)
    th = rng.uniform(-1.4, 1.4)
    a = np.exp(-1j * np.pi * np.arange(3) * np.sin(th)) / np.sqrt(3)
    explicit = np.array([a[i] * np.conj(a[j]) for j in range(3) for i in range(3)])  # column-major
    np.testing.assert_allclose(radar_column(th, 3), explicit, atol=1e-15)


def test_radar_column_derivative_examples():
    np.testing.assert_allclose(radar_column_derivative(np.pi / 2, 3), np.zeros(9), atol=1e-14)
    a = np.array([s2, s2])
    da = np.array([0, -1j * np.pi * s2])
    closed = (np.outer(da, a.conj()) + np.outer(a, da.conj())).reshape(-1, order="F")
    np.testing.assert_allclose(radar_column_derivative(0.0, 2), closed, atol=1e-15)
    fd = _cfd(lambda t: radar_column(t, 4), 0.7)
    assert np.max(np.abs(fd - radar_column_derivative(0.7, 4))) <= 1e-6


def test_radar_matrix_maps_gains_to_vec_hr(rng):
    m = 5
    th = rng.uniform(-1.2, 1.2, 3)
    x = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    a = steering_matrix(th, m)
    h = a @ np.diag(x) @ a.conj().T
    np.testing.assert_allclose(radar_matrix(th, m) @ x, h.reshape(-1, order="F"), atol=1e-14)


def test_finite_diff_cross_check_steering():
    jac = finite_diff(lambda t: steering_vector(t[0], 6), np.array([0.4]))
    np.testing.assert_allclose(jac[:, 0], steering_derivative(0.4, 6), atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1.55, 1.55), st.integers(1, 12))
def test_steering_unit_norm(theta, m):
    assert abs(np.linalg.norm(steering_vector(theta, m)) - 1) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.floats(-1.55, 1.55), st.integers(1, 8))
def test_radar_column_is_hermitian_psd_trace_one(theta, m):
    mat = radar_column(theta, m).reshape(m, m, order="F")
    np.testing.assert_allclose(mat, mat.conj().T, atol=1e-14)
    assert np.linalg.eigvalsh(mat)[0] >= -1e-12
    assert abs(np.trace(mat) - 1) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.4, 1.4), st.integers(2, 8))
def test_derivatives_match_central_differences(theta, m):
    step = 1e-5
    fd = _cfd(lambda t: steering_vector(t, m), theta, step)
    assert np.max(np.abs(fd - steering_derivative(theta, m))) < 1e-7 * m ** 3
    fd = _cfd(lambda t: radar_column(t, m), theta, step)
    assert np.max(np.abs(fd - radar_column_derivative(theta, m))) < 1e-7 * m ** 3


def test_uniform_grid_is_uniform_in_sine():
    g = AngularGrid.uniform(16)
    d = np.diff(g.sines())
    np.testing.assert_allclose(d, 2 / 16)
    assert g.m_tilde == 16 and np.all(np.abs(g.theta) < np.pi / 2)
    assert np.isclose(g.sines()[0] + 1, 1 / 16)


def test_grid_rejects_endpoint_angles():
    with pytest.raises(ValueError):
        AngularGrid(np.array([0.0, np.pi / 2]))
    assert np.all(np.abs(clamp_angles(np.array([2.0, -2.0]))) < np.pi / 2)
