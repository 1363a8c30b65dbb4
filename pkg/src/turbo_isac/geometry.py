"""Half-wavelength ULA steering vectors, their angle derivatives and the AoA grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def steering_vector(theta: float, m: int) -> np.ndarray:
    """Unit-norm array response a(theta) with entries exp(-j*i*pi*sin(theta))/sqrt(m)."""
    idx = np.arange(m)
    return np.exp(-1j * np.pi * idx * np.sin(theta)) / np.sqrt(m)


def steering_derivative(theta: float, m: int) -> np.ndarray:
    """d a(theta) / d theta."""
    idx = np.arange(m)
    return (-1j * np.pi * idx * np.cos(theta)) * steering_vector(theta, m)


def steering_matrix(theta, m: int) -> np.ndarray:
    """A(theta) = [a(theta_1), ..., a(theta_n)], shape (m, n)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    idx = np.arange(m)[:, None]
    return np.exp(-1j * np.pi * idx * np.sin(theta)[None, :]) / np.sqrt(m)


def steering_derivative_matrix(theta, m: int) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    idx = np.arange(m)[:, None]
    return (-1j * np.pi * idx * np.cos(theta)[None, :]) * steering_matrix(theta, m)


def radar_column(theta: float, m: int) -> np.ndarray:
    """vec(a a^H) in column-major order, i.e. the column of conj(A) kron A that maps
    a single reflection coefficient onto vec(H^r)."""
    a = steering_vector(theta, m)
    return np.outer(a, a.conj()).reshape(-1, order="F")


def radar_column_derivative(theta: float, m: int) -> np.ndarray:
    a = steering_vector(theta, m)
    da = steering_derivative(theta, m)
    return (np.outer(da, a.conj()) + np.outer(a, da.conj())).reshape(-1, order="F")


def radar_matrix(theta, m: int) -> np.ndarray:
    """A_tilde(theta): stacked radar columns, shape (m*m, n)."""
    a = steering_matrix(theta, m)
    # column k: vec(a_k a_k^H) = kron(conj(a_k), a_k)
    return (a.conj()[:, None, :] * a[None, :, :]).reshape(m * m, -1)


@dataclass(frozen=True)
class AngularGrid:
    """Dynamic AoA grid (radians), one angle per angular-domain coefficient."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if theta.size == 0:
            raise ValueError("grid must contain at least one angle")
        if np.any(np.abs(theta) >= np.pi / 2):
            raise ValueError("grid angles must lie strictly inside (-pi/2, pi/2)")
        object.__setattr__(self, "theta", theta)

    @property
    def m_tilde(self) -> int:
        return self.theta.size

    @classmethod
    def uniform(cls, m: int) -> "AngularGrid":
        """Grid whose sines are uniformly spaced over [-1, 1] (bin centres)."""
        return cls(np.arcsin(uniform_sines(m)))

    def sines(self) -> np.ndarray:
        return np.sin(self.theta)

    def steering(self, m: int) -> np.ndarray:
        return steering_matrix(self.theta, m)


def uniform_sines(m: int) -> np.ndarray:
    # bin centres avoid the aliased endpoints sin = +-1
    return -1.0 + (2.0 * np.arange(m) + 1.0) / m


def sin_bin_width(m: int) -> float:
    return 2.0 / m


def clamp_angles(theta: np.ndarray, margin: float = 1e-9) -> np.ndarray:
    lim = np.pi / 2 - margin
    return np.clip(theta, -lim, lim)
