"""Torus embeddings, adapted frames and torsion in the canonical setting.

An embedding ``K`` of the torus ``T^n x T^l`` is stored as a degree map plus
periodic parts held spectrally.  All frame quantities are pointwise matrix
fields on the grid with the matrix indices in front: ``L`` has shape
``(2n, n, *grid)``, ``B`` and ``T`` have shape ``(n, n, *grid)``.

The symplectic form is ``Omega0 = [[0, -I], [I, 0]]``, the metric is the
identity and ``J = Omega0``.  This is the only geometric case implemented.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import spectral as sp
from .errors import (ConfigurationError, DegenerateParameterizationError, NoTwistError,
                     UnsupportedCaseError)
from .spectral import FourierSeries, FrequencyVector

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e13
CANONICAL = "canonical"


# -- pointwise matrix algebra -------------------------------------------------

def matmul(a, b):
    """Pointwise product of matrix fields ``(i, j, *g) x (j, k, *g)``."""
    return np.einsum("ij...,jk...->ik...", a, b)


def transpose(a):
    return np.swapaxes(a, 0, 1)


def omega_left(x):
    """``Omega0 @ x`` for a field whose first axis has length ``2n``."""
    n = x.shape[0] // 2
    return np.concatenate([-x[n:], x[:n]])


def omega_right(x):
    """``x @ Omega0`` for a field whose second axis has length ``2n``."""
    n = x.shape[1] // 2
    return np.concatenate([x[:, n:], -x[:, :n]], axis=1)


def identity_field(n, d):
    return np.eye(n).reshape((n, n) + (1,) * d)


def inverse_field(m, what="matrix"):
    """Pointwise inverse of an ``(n, n, *g)`` field with a conditioning guard.

    Closed forms are used for ``n <= 2``.  For ``n = 1`` the guard compares
    the extreme values over the grid, since a scalar is always well
    conditioned on its own.
    """
    n = m.shape[0]
    if n == 1:
        a = m[0, 0]
        amax = np.abs(a).max()
        amin = np.abs(a).min()
        if amin == 0.0 or amax / amin > CONDITION_LIMIT:
            raise DegenerateParameterizationError(f"{what} is singular on the grid (|min| = {amin:.3e})")
        return (1.0 / a)[None, None]
    if n == 2:
        a, b, c, d = m[0, 0], m[0, 1], m[1, 0], m[1, 1]
        det = a * d - b * c
        fro = np.sqrt(a * a + b * b + c * c + d * d)
        with np.errstate(divide="ignore"):
            cond = fro * fro / np.abs(det)
        if not np.all(np.isfinite(cond)) or cond.max() > CONDITION_LIMIT:
            raise DegenerateParameterizationError(f"{what} is ill conditioned (cond > {CONDITION_LIMIT:.0e})")
        return np.array([[d, -b], [-c, a]]) / det
    moved = np.moveaxis(m, (0, 1), (-2, -1))
    cond = np.linalg.cond(moved)
    if not np.all(np.isfinite(cond)) or cond.max() > CONDITION_LIMIT:
        raise DegenerateParameterizationError(f"{what} is ill conditioned (cond > {CONDITION_LIMIT:.0e})")
    return np.moveaxis(np.linalg.inv(moved), (-2, -1), (0, 1))


def sup_norm(field_values, matrix_axes=2):
    """Largest absolute row sum over all grid points (matrix infinity norm)."""
    a = np.abs(field_values)
    if matrix_axes == 2:
        a = a.sum(axis=1)
    return float(a.max())


# -- embeddings ---------------------------------------------------------------

@dataclass
class TorusEmbedding:
    """``K(theta, phi) = (D theta + K_x^p, K_y^p)`` on the unit torus.

    Parameters
    ----------
    coeffs : ndarray
        Half-spectrum Fourier coefficients of the ``2n`` periodic components,
        shape ``(2n, *half_shape)``.
    shape : tuple of int
        Grid sizes, internal angles first then external angles.
    degree : ndarray
        Integer matrix of shape ``(n1, n)``; the angular part of ``x`` winds
        like ``degree @ theta``.
    freq : FrequencyVector
    params : dict
        Model parameters the torus belongs to.
    """

    coeffs: np.ndarray
    shape: tuple
    degree: np.ndarray
    freq: FrequencyVector
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.shape = sp.check_shape(self.shape)
        self.degree = np.atleast_2d(np.asarray(self.degree))
        if not np.issubdtype(self.degree.dtype, np.integer):
            if not np.all(self.degree == np.round(self.degree)):
                raise ConfigurationError("degree map entries must be integers")
            self.degree = self.degree.astype(np.int64)
        n = self.freq.n
        if len(self.shape) != n + self.freq.ell:
            raise ConfigurationError(
                f"grid of dimension {len(self.shape)} does not match n + l = {n + self.freq.ell}")
        if self.degree.shape[1] != n or self.degree.shape[0] > n:
            raise ConfigurationError(f"degree map of shape {self.degree.shape} for n = {n}")
        if self.coeffs.shape != (2 * n,) + sp.half_shape(self.shape):
            raise ConfigurationError("coefficient array does not match the grid")
        self.params = dict(self.params)

    @property
    def n(self) -> int:
        return self.freq.n

    @property
    def n1(self) -> int:
        return self.degree.shape[0]

    @property
    def n2(self) -> int:
        return self.n - self.n1

    @property
    def ell(self) -> int:
        return self.freq.ell

    @property
    def dim(self) -> int:
        return len(self.shape)

    @classmethod
    def from_grid(cls, periodic_values, degree, freq, params=None):
        """Build from grid samples of the periodic part, shape ``(2n, *grid)``."""
        shape = periodic_values.shape[1:]
        return cls(sp.forward(periodic_values, len(shape)), shape, degree, freq, params or {})

    @classmethod
    def from_full_grid(cls, values, degree, freq, params=None):
        """Build from samples of ``K`` itself; the winding part is removed."""
        shape = values.shape[1:]
        lin = linear_part(np.atleast_2d(degree), freq.n, shape)
        return cls.from_grid(values - lin, degree, freq, params)

    @classmethod
    def flat(cls, y0, degree, freq, shape, params=None):
        """Flat torus ``x = D theta``, ``y = y0``."""
        n = freq.n
        vals = np.zeros((2 * n,) + tuple(shape))
        vals[n:] = np.asarray(y0, dtype=float).reshape((n,) + (1,) * len(shape))
        return cls.from_grid(vals, degree, freq, params)

    def periodic(self) -> FourierSeries:
        return FourierSeries(self.coeffs, self.shape)

    def periodic_grid(self) -> np.ndarray:
        return sp.inverse(self.coeffs, self.shape)

    def linear_part(self) -> np.ndarray:
        return linear_part(self.degree, self.n, self.shape)

    def grid(self) -> np.ndarray:
        """Samples of ``K``, shape ``(2n, *grid)``."""
        return self.periodic_grid() + self.linear_part()

    def copy(self) -> "TorusEmbedding":
        return replace(self, coeffs=self.coeffs.copy(), degree=self.degree.copy(),
                       freq=replace(self.freq), params=dict(self.params))

    def with_periodic_grid(self, values) -> "TorusEmbedding":
        return replace(self, coeffs=sp.forward(values, self.dim))

    def resampled(self, new_shape) -> "TorusEmbedding":
        new_shape = sp.check_shape(new_shape)
        return replace(self, coeffs=sp.resample(self.coeffs, self.shape, new_shape), shape=new_shape)

    def sobolev_norm(self, r: float = 4.0) -> float:
        """``sqrt(|K_x^p|_r^2 + |K_y^p|_r^2)`` summed over all components."""
        per = sp.sobolev_norm(self.periodic(), r)
        return float(np.sqrt(np.sum(np.asarray(per) ** 2)))


def linear_part(degree, n, shape) -> np.ndarray:
    """Grid samples of ``(D theta, 0)`` with shape ``(2n, *grid)``."""
    d = len(shape)
    lat = sp.lattice(shape)
    parts = []
    for i in range(2 * n):
        acc = np.zeros((1,) * d)
        if i < degree.shape[0]:
            for j in range(n):
                if degree[i, j]:
                    acc = acc + degree[i, j] * lat[j]
        parts.append(acc)
    full = np.broadcast_shapes(*[p.shape for p in parts])
    out = np.empty((2 * n,) + full)
    for i, p in enumerate(parts):
        out[i] = p
    return out


# -- frames -------------------------------------------------------------------

@dataclass
class AdaptedFrame:
    """Pointwise tangent/normal frame and torsion over the grid."""

    L: np.ndarray
    B: np.ndarray
    N: np.ndarray
    A: np.ndarray
    T: np.ndarray | None = None
    T_avg: np.ndarray | None = None
    T_avg_inv: np.ndarray | None = None

    @property
    def N_tilde(self) -> np.ndarray:
        return self.N

    @property
    def n(self) -> int:
        return self.L.shape[1]

    @property
    def P(self) -> np.ndarray:
        return np.concatenate([self.L, self.N], axis=1)


def tangent_frame(K: TorusEmbedding) -> np.ndarray:
    """``L = D_theta K`` on the grid, shape ``(2n, n, *grid)``."""
    n = K.n
    cols = []
    for j in range(n):
        dk = sp.inverse(sp.derivative_coeffs(K.coeffs, K.shape, j), K.shape)
        lin = np.zeros(2 * n)
        lin[: K.n1] = K.degree[:, j]
        cols.append(dk + lin.reshape((2 * n,) + (1,) * K.dim))
    return np.stack(cols, axis=1)


def normal_frame(K: TorusEmbedding, L: np.ndarray, case: str = CANONICAL):
    """Return ``(B, A, N_tilde, N)`` for the canonical structure.

    ``B = (L^T L)^{-1}``, ``A = 0``, ``N_tilde = Omega0 L B`` and ``N = N_tilde``.
    """
    if case != CANONICAL:
        raise UnsupportedCaseError(
            f"geometric case {case!r} is not implemented; only the canonical structure is supported")
    gram = matmul(transpose(L), L)
    B = inverse_field(gram, "L^T L")
    B = 0.5 * (B + transpose(B))
    A = np.zeros((K.n, K.n) + (1,) * K.dim)
    N = matmul(omega_left(L), B)
    return B, A, N, N


def build_frame(K: TorusEmbedding, case: str = CANONICAL) -> AdaptedFrame:
    L = tangent_frame(K)
    B, A, _, N = normal_frame(K, L, case)
    return AdaptedFrame(L=L, B=B, N=N, A=A)


def _commutator(jac):
    """``Omega0 DZ - DZ Omega0`` pointwise."""
    return omega_left(jac) - omega_right(jac)


def torsion_field(frame: AdaptedFrame, jac: np.ndarray) -> np.ndarray:
    """``T = N^T (Omega0 DZ - DZ Omega0) N`` from the flow Jacobian on the torus."""
    N = frame.N
    return matmul(transpose(N), matmul(_commutator(jac), N))


def hamiltonian_torsion_field(frame: AdaptedFrame, hess: np.ndarray) -> np.ndarray:
    """Same torsion written with the Hamiltonian: ``T = B L^T S_H L B``.

    ``S_H = [[H_yy - H_xx, -(H_xy + H_yx)], [-(H_yx + H_xy), H_xx - H_yy]]``.
    """
    n = frame.n
    hxx, hxy = hess[:n, :n], hess[:n, n:]
    hyx, hyy = hess[n:, :n], hess[n:, n:]
    off = -(hxy + hyx)
    s = np.concatenate([np.concatenate([hyy - hxx, off], axis=1),
                        np.concatenate([off, hxx - hyy], axis=1)], axis=0)
    lb = matmul(frame.L, frame.B)
    return matmul(transpose(lb), matmul(s, lb))


def average_field(values, d):
    """Average over the last ``d`` axes."""
    return values.mean(axis=tuple(range(-d, 0)))


def twist(T: np.ndarray, d: int):
    """Return ``(<T>, <T>^{-1})``; raises :class:`NoTwistError` if ``<T>`` is singular."""
    T_avg = average_field(T, d)
    cond = np.linalg.cond(T_avg)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise NoTwistError(f"averaged torsion is singular (cond = {cond:.3e})")
    return T_avg, np.linalg.inv(T_avg)


def torsion(K: TorusEmbedding, frame: AdaptedFrame, units, route: str = "flow"):
    """Fill ``frame.T``, ``frame.T_avg`` and ``frame.T_avg_inv``.

    Parameters
    ----------
    units : UnitCoordinates
        Model evaluated on the unit torus.
    route : {"flow", "hamiltonian"}
        Which of the two equivalent expressions to evaluate.
    """
    z, phi = evaluation_points(K)
    if route == "flow":
        T = torsion_field(frame, units.jacobian(z, phi))
    elif route == "hamiltonian":
        T = hamiltonian_torsion_field(frame, units.hessian(z, phi))
    else:
        raise ConfigurationError(f"unknown torsion route {route!r}")
    frame.T = T
    frame.T_avg, frame.T_avg_inv = twist(T, K.dim)
    return frame.T, frame.T_avg, frame.T_avg_inv


def evaluation_points(K: TorusEmbedding):
    """``(K(theta, phi), phi)`` on the grid, ready for model evaluation."""
    z = K.grid()
    lat = sp.lattice(K.shape)
    phi = np.stack(np.broadcast_arrays(*lat[K.n:])) if K.ell else np.zeros((0,) + K.shape)
    return z, phi


def symplectic_frame(frame: AdaptedFrame):
    """``P = (L N)`` and the block field ``Lambda = [[0, T], [0, 0]]``."""
    n = frame.n
    P = frame.P
    if frame.T is None:
        raise ConfigurationError("torsion must be computed before the symplectic frame")
    zero = np.zeros_like(frame.T)
    lam = np.concatenate([np.concatenate([zero, frame.T], axis=1),
                          np.concatenate([zero, zero], axis=1)], axis=0)
    assert lam.shape[0] == 2 * n
    return P, lam


def symplectic_defect(frame: AdaptedFrame) -> float:
    """Max-norm of ``P^T Omega0 P - Omega0`` over the grid."""
    P = frame.P
    m = matmul(transpose(P), omega_left(P))
    d = P.ndim - 2
    n2 = P.shape[0]
    om = np.zeros((n2, n2))
    om[:] = omega_left(np.eye(n2))
    return float(np.abs(m - om.reshape((n2, n2) + (1,) * d)).max())


def lagrangian_defect(K: TorusEmbedding, L: np.ndarray) -> float:
    """Max-norm of ``L^T Omega0 L`` over the grid."""
    return float(np.abs(matmul(transpose(L), omega_left(L))).max())
