"""Grid/Fourier representation of real functions on the torus T^n x T^l.

Functions live on the unit torus: angles are periodic with period one and the
lattice points are ``theta_i = i / N``.  Real fields are transformed with
real-to-complex FFTs over all torus axes, so the last axis only keeps the
non-negative wave numbers.  Coefficients are normalized so that
``coeffs[0, ..., 0]`` is the average of the grid samples.

Any number of leading "component" axes is allowed in front of the torus axes;
a 2n-vector field on a 2-D torus is simply an array of shape ``(2n, N1, N2)``.

Wave vectors that contain a Nyquist index (``|k_a| = N_a / 2``) are outside
the resolved band.  Derivatives and the cohomological solver annihilate them.
"""
from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .errors import ConfigurationError, ResonanceError, ResonanceWarning, TruncationWarning

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
GOLDEN_MEAN = (1.0 + math.sqrt(5.0)) / 2.0
RESONANCE_THRESHOLD = 1e-300

_workers = 1


def set_threads(n: int) -> None:
    """Cap the number of workers used by the FFTs."""
    global _workers
    _workers = max(1, int(n))


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ConfigurationError("a torus grid needs at least one axis")
    for s in shape:
        if not is_power_of_two(s) or s < 2:
            raise ConfigurationError(f"grid axis size {s} is not a power of two >= 2")
    return shape


def half_shape(shape) -> tuple[int, ...]:
    return tuple(shape[:-1]) + (shape[-1] // 2 + 1,)


def lattice(shape) -> list[np.ndarray]:
    """Broadcastable unit-torus coordinates ``i / N`` for each axis."""
    d = len(shape)
    out = []
    for a, n in enumerate(shape):
        idx = [1] * d
        idx[a] = n
        out.append((np.arange(n) / n).reshape(idx))
    return out


class _Spectrum:
    """Wave-number tables for one grid shape (half-spectrum layout)."""

    def __init__(self, shape):
        self.shape = shape
        self.dim = len(shape)
        self.half_shape = half_shape(shape)
        d = self.dim
        self.k = []        # signed wave numbers, Nyquist kept as -N/2 (or +N/2 on the last axis)
        self.k_band = []   # same with the Nyquist index set to zero
        for a, n in enumerate(shape):
            if a == d - 1:
                k = np.arange(n // 2 + 1)
            else:
                k = np.fft.fftfreq(n, 1.0 / n).astype(int)
            kb = np.where(np.abs(k) == n // 2, 0, k)
            idx = [1] * d
            idx[a] = k.size
            self.k.append(k.reshape(idx))
            self.k_band.append(kb.reshape(idx))
        band = np.ones(self.half_shape, dtype=bool)
        for a, n in enumerate(shape):
            band &= np.abs(self.k[a]) != n // 2
        self.band = band
        # each stored mode with 0 < k_last < N/2 stands for itself and its conjugate
        w = np.full(self.half_shape[-1], 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        self.weight = w

    def k_inf(self) -> np.ndarray:
        out = np.zeros(self.half_shape)
        for k in self.k:
            out = np.maximum(out, np.abs(k))
        return out

    def dot(self, nu) -> np.ndarray:
        """``k . nu`` over the resolved band (zero on Nyquist modes)."""
        out = np.zeros(self.half_shape)
        for k, v in zip(self.k_band, nu):
            out = out + k * float(v)
        return np.where(self.band, out, 0.0)


@lru_cache(maxsize=16)
def spectrum(shape) -> _Spectrum:
    return _Spectrum(check_shape(shape))


@dataclass(frozen=True)
class TorusGrid:
    """Samples of a real field at the lattice points of the unit torus.

    ``values`` has shape ``(*components, *shape)``.
    """

    values: np.ndarray
    shape: tuple[int, ...]

    def __post_init__(self):
        shape = check_shape(self.shape)
        object.__setattr__(self, "shape", shape)
        if tuple(self.values.shape[-len(shape):]) != shape:
            raise ConfigurationError(
                f"values of shape {self.values.shape} do not end with grid shape {shape}")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @classmethod
    def from_function(cls, func, shape) -> "TorusGrid":
        shape = check_shape(shape)
        return cls(np.asarray(func(*lattice(shape)), dtype=float) + np.zeros(shape), shape)

    def at(self, index) -> np.ndarray:
        """Sample at an arbitrary (possibly wrapped) lattice index."""
        idx = tuple(int(i) % n for i, n in zip(index, self.shape))
        return self.values[(..., *idx)]


@dataclass(frozen=True)
class FourierSeries:
    """Fourier coefficients of a real field, half-spectrum storage.

    ``coeffs`` has shape ``(*components, *half_shape(shape))``; the mode with
    wave vector ``k`` is stored at the usual FFT position, the last axis only
    holding ``k_last >= 0``.  Negative last-axis modes follow from Hermitian
    symmetry, which is what ``hermitian`` asserts.
    """

    coeffs: np.ndarray
    shape: tuple[int, ...]
    hermitian: bool = True

    def __post_init__(self):
        shape = check_shape(self.shape)
        object.__setattr__(self, "shape", shape)
        hs = half_shape(shape)
        if tuple(self.coeffs.shape[-len(shape):]) != hs:
            raise ConfigurationError(
                f"coefficients of shape {self.coeffs.shape} do not match grid shape {shape}")

    @property
    def dim(self) -> int:
        return len(self.shape)

    def __getitem__(self, item) -> "FourierSeries":
        return FourierSeries(self.coeffs[item], self.shape)

    def __add__(self, other: "FourierSeries") -> "FourierSeries":
        return FourierSeries(self.coeffs + other.coeffs, self.shape)

    def __sub__(self, other: "FourierSeries") -> "FourierSeries":
        return FourierSeries(self.coeffs - other.coeffs, self.shape)

    def __mul__(self, c) -> "FourierSeries":
        return FourierSeries(self.coeffs * c, self.shape)

    __rmul__ = __mul__

    def mode(self, k) -> complex:
        """Coefficient of wave vector ``k`` (negative last index via conjugation)."""
        k = list(int(v) for v in k)
        conj = False
        if k[-1] < 0:
            k = [-v for v in k]
            conj = True
        idx = tuple(v % n for v, n in zip(k, self.shape))
        c = self.coeffs[(..., *idx)]
        return np.conj(c) if conj else c

    def grid(self) -> TorusGrid:
        return fourier_to_grid(self)


def _axes(d: int) -> tuple[int, ...]:
    return tuple(range(-d, 0))


def forward(values: np.ndarray, d: int) -> np.ndarray:
    """Raw forward transform of the last ``d`` axes (coefficients, not a series)."""
    return sfft.rfftn(values, axes=_axes(d), norm="forward", workers=_workers)


def inverse(coeffs: np.ndarray, shape) -> np.ndarray:
    return sfft.irfftn(coeffs, s=shape, axes=_axes(len(shape)), norm="forward", workers=_workers)


def grid_to_fourier(g: TorusGrid) -> FourierSeries:
    return FourierSeries(forward(g.values, len(g.shape)), g.shape)


def fourier_to_grid(f: FourierSeries) -> TorusGrid:
    return TorusGrid(inverse(f.coeffs, f.shape), f.shape)


def differentiate(f: FourierSeries, axis: int) -> FourierSeries:
    """Partial derivative along torus axis ``axis`` (multiplies by 2 pi i k)."""
    if not 0 <= axis < f.dim:
        raise ConfigurationError(f"axis {axis} out of range for a {f.dim}-torus")
    sp = spectrum(f.shape)
    return FourierSeries(f.coeffs * (1j * TWO_PI * sp.k_band[axis]), f.shape)


def derivative_coeffs(coeffs: np.ndarray, shape, axis: int) -> np.ndarray:
    return coeffs * (1j * TWO_PI * spectrum(tuple(shape)).k_band[axis])


@dataclass
class FrequencyVector:
    """Internal frequencies ``omega`` and external frequencies ``alpha``.

    Frequencies are measured in cycles of the unit torus per unit time.
    """

    omega: np.ndarray
    alpha: np.ndarray
    tau: float | None = None
    gamma_estimate: float | None = None

    def __post_init__(self):
        self.omega = np.atleast_1d(np.asarray(self.omega, dtype=float))
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float)) if np.size(self.alpha) else np.zeros(0)
        if self.tau is None:
            self.tau = float(max(self.n + self.ell - 1, 1))

    @property
    def n(self) -> int:
        return self.omega.size

    @property
    def ell(self) -> int:
        return self.alpha.size

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.omega, self.alpha])


class CohomologySolver:
    """Small-divisor operators for a fixed grid shape and frequency vector.

    Builds the divisor table ``k1.omega + k2.alpha`` once and applies the
    Lie derivative and its inverse to any number of components.
    """

    def __init__(self, shape, freq: FrequencyVector):
        shape = check_shape(shape)
        nu = freq.values
        if nu.size != len(shape):
            raise ConfigurationError(
                f"frequency vector of length {nu.size} on a {len(shape)}-torus")
        sp = spectrum(shape)
        self.shape = shape
        d = sp.dot(nu)
        active = sp.band.copy()
        active[(0,) * len(shape)] = False
        small = active & (np.abs(d) < RESONANCE_THRESHOLD)
        if small.any():
            idx = np.argwhere(small)[0]
            k = [int(sp.k[a].ravel()[i]) for a, i in enumerate(idx)]
            raise ResonanceError(k, float(abs(d[tuple(idx)])))
        self.min_divisor = float(np.abs(d[active]).min()) if active.any() else math.inf
        self._lie = np.where(active, -1j * TWO_PI * d, 0.0)
        with np.errstate(divide="ignore"):
            self._inv = np.where(active, -1.0 / (1j * TWO_PI * np.where(active, d, 1.0)), 0.0)
        logger.debug("cohomology solver on %s: smallest divisor %.3e", shape, self.min_divisor)

    def lie(self, coeffs: np.ndarray) -> np.ndarray:
        return coeffs * self._lie

    def solve(self, coeffs: np.ndarray) -> np.ndarray:
        return coeffs * self._inv


@lru_cache(maxsize=8)
def _solver(shape, nu) -> CohomologySolver:
    nu = np.array(nu)
    return CohomologySolver(shape, FrequencyVector(nu[: len(nu)], np.zeros(0)))


def cohomology_solver(shape, freq: FrequencyVector) -> CohomologySolver:
    """Cached :class:`CohomologySolver` for ``(shape, freq)``."""
    return _solver(check_shape(shape), tuple(float(v) for v in freq.values))


def lie_derivative(f: FourierSeries, freq: FrequencyVector) -> FourierSeries:
    """Apply ``-(omega . d_theta + alpha . d_phi)``."""
    if freq.values.size != f.dim:
        raise ConfigurationError(
            f"frequency vector of length {freq.values.size} on a {f.dim}-torus")
    d = spectrum(f.shape).dot(freq.values)
    return FourierSeries(f.coeffs * (-1j * TWO_PI * d), f.shape)


def average(f: FourierSeries):
    avg = f.coeffs[(..., *([0] * f.dim))].real
    return float(avg) if np.ndim(avg) == 0 else avg


def solve_cohomological(v: FourierSeries, freq: FrequencyVector) -> FourierSeries:
    """Zero-average solution ``u`` of ``L u = v - <v>``.

    Raises :class:`ResonanceError` if a divisor in the band vanishes.
    """
    solver = cohomology_solver(v.shape, freq)
    return FourierSeries(solver.solve(v.coeffs), v.shape)


def _weighted_sum(coeffs: np.ndarray, shape, weight: np.ndarray):
    sp = spectrum(shape)
    d = len(shape)
    s = np.abs(coeffs) ** 2 * weight * sp.weight
    return s.sum(axis=_axes(d))


def sobolev_norm(f: FourierSeries, r: float):
    """Sobolev seminorm ``sqrt(sum_{k != 0} (2 pi |k|_inf)^(2r) |v_k|^2)``."""
    if r < 0:
        raise ConfigurationError("Sobolev order must be non-negative")
    sp = spectrum(f.shape)
    w = (TWO_PI * sp.k_inf()) ** (2.0 * r)
    w[(0,) * f.dim] = 0.0
    out = np.sqrt(_weighted_sum(f.coeffs, f.shape, w))
    return float(out) if np.ndim(out) == 0 else out


def tail_norm(f: FourierSeries, band_fraction: float, axis: int | None = None):
    """l2 norm of the modes beyond ``band_fraction`` of the Nyquist index.

    With ``axis`` set only that axis is tested, otherwise a mode counts when
    it lies beyond the band on any axis.
    """
    if not 0.0 < band_fraction < 1.0:
        raise ConfigurationError("band_fraction must lie in (0, 1)")
    sp = spectrum(f.shape)
    mask = np.zeros(sp.half_shape, dtype=bool)
    for a, (k, n) in enumerate(zip(sp.k, f.shape)):
        if axis is None or a == axis:
            mask |= np.abs(k) > band_fraction * (n // 2)
    out = np.sqrt(_weighted_sum(f.coeffs, f.shape, mask.astype(float)))
    return float(out) if np.ndim(out) == 0 else out


def resample(coeffs: np.ndarray, old_shape, new_shape) -> np.ndarray:
    """Zero-pad or truncate a half spectrum onto another grid shape.

    Padding splits each Nyquist coefficient evenly between ``+-N/2`` so the
    trigonometric interpolant is preserved; truncation drops everything at or
    beyond the new Nyquist index.
    """
    old_shape = check_shape(old_shape)
    new_shape = check_shape(new_shape)
    d = len(old_shape)
    out = coeffs
    for a in range(d):
        n, m = old_shape[a], new_shape[a]
        if n == m:
            continue
        ax = out.ndim - d + a
        last = a == d - 1
        src = np.moveaxis(out, ax, -1)
        size = m // 2 + 1 if last else m
        dst = np.zeros(src.shape[:-1] + (size,), dtype=complex)
        if m > n:
            h = n // 2
            dst[..., :h] = src[..., :h]
            if last:
                dst[..., h] = 0.5 * src[..., h]
            else:
                dst[..., m - h + 1:] = src[..., h + 1:]
                dst[..., h] = 0.5 * src[..., h]
                dst[..., m - h] = 0.5 * src[..., h]
        else:
            h = m // 2
            dst[..., :h] = src[..., :h]
            if not last:
                dst[..., m - h + 1:] = src[..., n - h + 1:]
        out = np.moveaxis(dst, -1, ax)
    return out


def resample_series(f: FourierSeries, new_shape) -> FourierSeries:
    return FourierSeries(resample(f.coeffs, f.shape, new_shape), tuple(new_shape))


# -- frequency arithmetic -----------------------------------------------------

def continued_fraction(x: float, depth: int) -> list[int]:
    """First ``depth`` partial quotients of ``x`` (fewer if ``x`` is rational)."""
    quotients = []
    r = float(x)
    for _ in range(depth):
        a = math.floor(r)
        quotients.append(int(a))
        frac = r - a
        if frac <= 4.0 * np.finfo(float).eps * max(1.0, abs(r)):
            break
        r = 1.0 / frac
    return quotients


def evaluate_continued_fraction(quotients, tail: float | None = None) -> float:
    """Value of ``[a0; a1, ..., ak, tail]`` (``tail=None`` ends the fraction)."""
    if tail is None:
        value = float(quotients[-1])
        rest = quotients[:-1]
    else:
        value = float(tail)
        rest = quotients
    for a in reversed(rest):
        value = a + 1.0 / value
    return value


def convergent_denominators(quotients) -> list[int]:
    q = [1, quotients[1]] if len(quotients) > 1 else [1]
    for a in quotients[2:]:
        q.append(a * q[-1] + q[-2])
    return q


def refine_frequency_cf(x: float, depth: int) -> float:
    """Keep ``depth`` partial quotients of ``x`` and continue with ones.

    An infinite tail of ones is the golden mean, so the result is
    ``[a0; a1, ..., a_{depth-1}, (1 + sqrt 5) / 2]``.
    """
    if depth < 1:
        raise ConfigurationError("continued-fraction depth must be at least 1")
    quotients = continued_fraction(x, depth)
    if len(quotients) < depth:
        warnings.warn(
            f"{x!r} is rational to working precision: continued fraction stops "
            f"after {len(quotients)} < {depth} quotients", TruncationWarning, stacklevel=2)
    return evaluate_continued_fraction(quotients, GOLDEN_MEAN)


def _integer_vectors(dim: int, k_max: int):
    """Nonzero integer vectors with ``|k|_1 <= k_max``, one of each +-k pair."""
    for k in itertools.product(range(-k_max, k_max + 1), repeat=dim):
        s = sum(abs(v) for v in k)
        if s == 0 or s > k_max:
            continue
        first = next(v for v in k if v != 0)
        if first > 0:
            yield k


def diophantine_estimate(freq: FrequencyVector, tau: float, k_max: int) -> float:
    """Exhaustive estimate of the Diophantine constant gamma.

    For ``l > 0`` this is ``min |k1.omega + k2.alpha| |k|_1^tau`` over
    ``0 < |k|_1 <= k_max``.  With no external frequencies the internal
    frequency is read as a rotation number (map convention) and the divisor is
    the distance from ``k.omega`` to the nearest integer.
    """
    if k_max < 1:
        raise ConfigurationError("k_max must be at least 1")
    nu = freq.values
    dim = nu.size
    ks = np.array(list(_integer_vectors(dim, int(k_max))), dtype=float)
    dots = ks @ nu
    if freq.ell == 0:
        dots = dots - np.round(dots)
    norms = np.abs(ks).sum(axis=1)
    div = np.abs(dots)
    vals = div * norms ** tau
    i = int(np.argmin(vals))
    if div.min() < RESONANCE_THRESHOLD or div[np.argmin(div)] == 0.0:
        j = int(np.argmin(div))
        k = tuple(int(v) for v in ks[j])
        warnings.warn(f"resonance at k={k}: |k.nu| = {div[j]:.3e}", ResonanceWarning, stacklevel=2)
        gamma = 0.0
    else:
        gamma = float(vals[i])
    freq.gamma_estimate = gamma
    freq.tau = float(tau)
    return gamma
