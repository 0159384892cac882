"""Flow integration, stroboscopic sampling and initial tori.

Orbits are integrated in the native variables of a model.  Angles are never
reduced modulo their period during integration, so the integrated angle is
already the continuous lift needed for rotation numbers.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from . import spectral as sp
from .errors import ConfigurationError, ConvergenceWarning, IntegrationError, PeriodicOrbitError
from .geometry import TorusEmbedding
from .models import HamiltonianModel, UnitCoordinates, vector_field
from .spectral import FrequencyVector

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-13


@dataclass
class OrbitSample:
    """States ``z`` (shape ``(2n, m)``), external angles and times of one orbit.

    The angle rows of ``z`` are continuous lifts.
    """

    t: np.ndarray
    z: np.ndarray
    phi: np.ndarray
    n: int = 1

    def __post_init__(self):
        if self.t.size > 1 and np.any(np.diff(self.t) <= 0):
            raise ConfigurationError("orbit timestamps must be strictly increasing")

    @property
    def lift(self) -> np.ndarray:
        return self.z[: self.n]

    def __len__(self):
        return self.t.size


def _flat_rhs(model: HamiltonianModel, shape, phi0, scale=None):
    """Right-hand side on a flattened batch of states.

    With ``scale`` given, time is rescaled per trajectory: each state advances
    ``scale * s`` native time units while ``s`` runs over ``[0, 1]``.
    """
    alpha = model.alpha.reshape((-1,) + (1,) * (len(shape) - 1))

    def rhs(t, y):
        z = y.reshape(shape)
        if scale is None:
            phi = phi0 + alpha * t
            return vector_field(model, z, phi).ravel()
        phi = phi0 + alpha * (scale * t)
        return (scale * vector_field(model, z, phi)).ravel()

    return rhs


def integrate_flow(model: HamiltonianModel, z0, phi0=None, t_final=1.0, tol=DEFAULT_TOL,
                   t_eval=None, dense=False):
    """Integrate ``z' = Z_H(z, phi)``, ``phi' = alpha`` from ``t = 0``.

    Parameters
    ----------
    z0 : array_like
        Initial state ``(2n,)`` or a batch ``(2n, m)`` integrated together.
    t_final : float
        Final native time.
    tol : float
        Relative and absolute tolerance of the order 8 embedded pair.
    t_eval : array_like, optional
        Output times; defaults to the final time only.
    dense : bool
        Keep the continuous extension (returned as ``sample.dense``).

    Returns
    -------
    OrbitSample
        For batches, ``z`` has shape ``(2n, m, len(t))``.
    """
    if tol <= 0:
        raise ConfigurationError("integration tolerance must be positive")
    z0 = np.asarray(z0, dtype=float)
    phi0 = np.zeros(model.ell) if phi0 is None else np.asarray(phi0, dtype=float)
    phi0 = phi0.reshape((-1,) + (1,) * (z0.ndim - 1))
    if t_eval is None:
        t_eval = np.array([t_final])
    t_eval = np.asarray(t_eval, dtype=float)
    rhs = _flat_rhs(model, z0.shape, phi0)
    sol = solve_ivp(rhs, (0.0, t_final), z0.ravel(), method="DOP853", rtol=tol, atol=tol,
                    t_eval=t_eval, dense_output=dense)
    if sol.status < 0:
        raise IntegrationError(f"flow integration failed: {sol.message}")
    z = sol.y.reshape(z0.shape + (sol.t.size,))
    phi = phi0[..., None] + model.alpha.reshape((-1,) + (1,) * z0.ndim) * sol.t
    orbit = OrbitSample(sol.t, z, phi, model.n)
    orbit.dense = sol.sol
    orbit.nfev = sol.nfev
    return orbit


def external_period(model: HamiltonianModel) -> float:
    if model.ell != 1:
        raise ConfigurationError("a stroboscopic map needs exactly one external frequency")
    return 2.0 * math.pi / float(model.alpha[0])


def stroboscopic_map(model: HamiltonianModel, z, phi0=0.0, tol=DEFAULT_TOL, iterates=1):
    """Flow over ``iterates`` external periods; returns all iterates.

    The result has shape ``z.shape + (iterates + 1,)`` with the initial state
    first.  Angles are lifted.
    """
    period = external_period(model)
    times = period * np.arange(iterates + 1)
    orbit = integrate_flow(model, z, [phi0], period * iterates, tol, t_eval=times)
    return orbit.z


def bump_weights(count: int) -> np.ndarray:
    """``exp(-1/(s(1-s)))`` at ``s = i/count``, ``i = 0..count-1``, normalized."""
    s = np.arange(count) / count
    w = np.zeros(count)
    inner = (s > 0) & (s < 1)
    si = s[inner]
    w[inner] = np.exp(-1.0 / (si * (1.0 - si)))
    total = w.sum()
    if total == 0.0:
        raise ConfigurationError("too few samples for a weighted Birkhoff average")
    return w / total


def weighted_birkhoff(values) -> float:
    """Weighted Birkhoff average of a sequence of observations."""
    values = np.asarray(values, dtype=float)
    return float(np.dot(bump_weights(values.size), values))


def birkhoff_frequency(lift, scale: float = 1.0, n_samples: int | None = None,
                       threshold: float = 1e-6) -> float:
    """Rotation number from a lifted angle sequence.

    Parameters
    ----------
    lift : array_like
        Lifted angle at consecutive sample times; ``N + 1`` values give ``N``
        increments.
    scale : float
        Divides the result, e.g. ``2 pi`` to get cycles from radians or the
        sampling step to get a rate.
    n_samples : int, optional
        Use only the first ``N`` increments.
    threshold : float
        A :class:`ConvergenceWarning` is emitted when halving ``N`` changes the
        estimate by more than this.
    """
    inc = np.diff(np.asarray(lift, dtype=float))
    if n_samples is not None:
        inc = inc[:n_samples]
    if inc.size < 100:
        raise ConfigurationError("Birkhoff averages need at least 100 increments")
    value = weighted_birkhoff(inc) / scale
    half = weighted_birkhoff(inc[: inc.size // 2]) / scale
    if abs(value - half) > threshold:
        warnings.warn(f"Birkhoff average not converged: change {abs(value - half):.3e} on doubling N",
                      ConvergenceWarning, stacklevel=2)
    return value


def birkhoff_change(lift, scale: float = 1.0) -> float:
    """Difference between the estimates from ``N`` and ``N / 2`` increments."""
    inc = np.diff(np.asarray(lift, dtype=float))
    return abs(weighted_birkhoff(inc) - weighted_birkhoff(inc[: inc.size // 2])) / scale


def stroboscopic_frequency(model: HamiltonianModel, z0, iterates: int = 2000, tol=DEFAULT_TOL,
                           angle: int = 0):
    """Rotation number (cycles per external period) of the orbit through ``z0``.

    Returns ``(omega, change, iterates_array)``.
    """
    orbit = stroboscopic_map(model, np.asarray(z0, dtype=float), 0.0, tol, iterates)
    lift = orbit[angle]
    scale = model.angle_scale
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        omega = birkhoff_frequency(lift, scale)
    return omega, birkhoff_change(lift, scale), orbit


def flow_frequency(model: HamiltonianModel, z0, t_final: float, samples: int, tol=DEFAULT_TOL,
                   angle: int = 0):
    """Mean angular velocity (native units) along the orbit through ``z0``.

    The orbit is sampled uniformly in time; returns ``(omega, change)``.
    """
    times = np.linspace(0.0, t_final, samples + 1)
    orbit = integrate_flow(model, z0, None, t_final, tol, t_eval=times)
    dt = times[1] - times[0]
    lift = orbit.z[angle]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        omega = birkhoff_frequency(lift, dt)
    return omega, birkhoff_change(lift, dt)


# -- section curves and initial tori ------------------------------------------

@dataclass
class SectionCurve:
    """Closed curve ``theta -> K0(theta)`` on the unit torus from map iterates.

    ``nodes`` are the sorted parameters in ``[0, 1)`` and ``values`` the
    periodic parts (shape ``(2n, m)``) interpolated by periodic cubic splines.
    The angle components of ``K0`` are ``degree @ theta`` plus the periodic part.
    """

    nodes: np.ndarray
    values: np.ndarray
    omega: float
    degree: np.ndarray

    def __post_init__(self):
        x = np.concatenate([self.nodes, [self.nodes[0] + 1.0]])
        y = np.concatenate([self.values, self.values[:, :1]], axis=1)
        self._spline = CubicSpline(x, y, axis=1, bc_type="periodic")

    @property
    def n(self) -> int:
        return self.values.shape[0] // 2

    def periodic(self, theta):
        theta = np.asarray(theta, dtype=float)
        t = self.nodes[0] + np.mod(theta - self.nodes[0], 1.0)
        return self._spline(t)

    def __call__(self, theta):
        """Unit-torus point ``K0(theta)``, shape ``(2n,) + theta.shape``."""
        theta = np.asarray(theta, dtype=float)
        out = self.periodic(theta)
        n1 = self.degree.shape[0]
        out[:n1] = out[:n1] + self.degree[:, 0].reshape((-1,) + (1,) * theta.ndim) * theta
        return out

    @classmethod
    def from_iterates(cls, iterates, omega: float, angle_scale: float = 2.0 * math.pi):
        """Build from native stroboscopic iterates ``(2n, m)`` with lifted angles.

        Iterate ``k`` sits at ``theta_k = frac(k omega)`` and the periodic part
        of its angle is ``x_k / angle_scale - k omega``.
        """
        iterates = np.asarray(iterates, dtype=float)
        n = iterates.shape[0] // 2
        m = iterates.shape[1]
        k = np.arange(m)
        theta = np.mod(k * omega, 1.0)
        vals = iterates.copy()
        vals[:n] = iterates[:n] / angle_scale - k * omega
        order = np.argsort(theta)
        theta = theta[order]
        if np.any(np.diff(theta) <= 0):
            raise ConfigurationError("repeated section parameters; is omega rational?")
        return cls(theta, vals[:, order], omega, np.eye(n, dtype=np.int64))


def section_curve(model: HamiltonianModel, z0, omega: float, points: int, tol=DEFAULT_TOL) -> SectionCurve:
    """Sample ``points`` stroboscopic iterates from ``z0`` and spline them."""
    it = stroboscopic_map(model, np.asarray(z0, dtype=float), 0.0, tol, points - 1)
    return SectionCurve.from_iterates(it, omega, model.angle_scale)


def build_initial_torus_flow(model: HamiltonianModel, curve: SectionCurve, omega: float,
                             n_theta: int, n_phi: int, tol=DEFAULT_TOL) -> TorusEmbedding:
    """Spread the curve ``K0`` over ``T x T`` by the flow.

    ``K(theta_i, phi_j) = Phi_{t*}(K0(theta_i - omega t*))`` with ``t*`` the
    time at which the external angle reaches ``phi_j``.  All grid points are
    integrated together with per-point rescaled time.
    """
    if model.ell != 1:
        raise ConfigurationError("flow-built tori need exactly one external frequency")
    units = UnitCoordinates(model)
    shape = sp.check_shape((n_theta, n_phi))
    th, ph = sp.lattice(shape)
    alpha_u = float(units.alpha[0])
    tau = np.broadcast_to(ph / alpha_u, shape)             # unit time to reach phi_j
    start = curve(np.broadcast_to(th - omega * tau, shape))  # (2n, Nt, Np) unit
    n = model.n
    s = np.concatenate([np.full(n, model.angle_scale), np.ones(n)]).reshape((-1, 1, 1))
    z0 = (start * s).reshape(2 * n, -1)
    t_native = (tau * model.time_scale).ravel()
    rhs = _flat_rhs(model, z0.shape, np.zeros((1, 1)), scale=t_native)
    sol = solve_ivp(rhs, (0.0, 1.0), z0.ravel(), method="DOP853", rtol=tol, atol=tol, t_eval=[1.0])
    if sol.status < 0:
        raise IntegrationError(f"torus construction failed: {sol.message}")
    z1 = sol.y[:, -1].reshape(2 * n, *shape) / s
    freq = FrequencyVector([omega], units.alpha)
    return TorusEmbedding.from_full_grid(z1, curve.degree, freq, model.params)


def _crossing(func, t_lo, t_hi, samples=64):
    """First sign change ``- -> +`` of ``func`` on ``(t_lo, t_hi]``, refined by brentq."""
    ts = np.linspace(t_lo, t_hi, samples + 1)
    vals = np.array([func(t) for t in ts])
    for a, b, fa, fb in zip(ts[:-1], ts[1:], vals[:-1], vals[1:]):
        if fa < 0 <= fb:
            return brentq(func, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return None


def orbit_period(model: HamiltonianModel, z0, t_max: float = 200.0, tol=DEFAULT_TOL):
    """Period and winding of the periodic orbit of an autonomous model.

    Returns ``(period, winding)`` with ``winding`` the number of turns of the
    angle per period (0 for librations).
    """
    z0 = np.asarray(z0, dtype=float)
    n = model.n
    if n != 1:
        raise ConfigurationError("periodic-orbit detection is implemented for one degree of freedom")
    phi0 = np.zeros(model.ell)
    v0 = vector_field(model, z0, phi0)
    if np.abs(v0).max() <= 1e-14 * max(1.0, np.abs(z0).max()):
        raise PeriodicOrbitError("initial point is an equilibrium")
    orbit = integrate_flow(model, z0, phi0, t_max, tol, dense=True)
    sol = orbit.dense
    period_turn = model.angle_scale
    chunk = t_max / 2000
    t = 0.0
    while t < t_max:
        t_next = min(t + chunk, t_max)
        # rotation: the angle has advanced by a full turn
        zs = sol(t_next)
        if abs(zs[0] - z0[0]) >= period_turn:
            w = int(np.sign(zs[0] - z0[0]))
            T = brentq(lambda s: w * (sol(s)[0] - z0[0]) - period_turn, t, t_next,
                       xtol=1e-15, rtol=4 * np.finfo(float).eps)
            return T, w
        # libration: return through the hyperplane normal to the flow at z0
        if t > 0:
            def g(s):
                return float(np.dot(v0, sol(s) - z0))
            T = _crossing(g, t, t_next, samples=8)
            if T is not None:
                zT = sol(T)
                if np.abs(zT - z0).max() < 1e-6 * max(1.0, np.abs(z0).max()):
                    return T, 0
        t = t_next
    raise PeriodicOrbitError(f"orbit through {z0} did not close before t = {t_max}")


def build_initial_torus_autonomous(model: HamiltonianModel, z0, n_theta: int, n_phi,
                                   tol=DEFAULT_TOL, t_max: float = 200.0) -> TorusEmbedding:
    """Torus from the periodic orbit through ``z0`` of an autonomous model.

    The orbit is parameterized by ``theta = t / T`` with ``theta = 0`` at
    ``z0`` and extended constantly over the external angles.
    """
    n_phi = tuple(np.atleast_1d(n_phi).tolist())
    if len(n_phi) != model.ell:
        raise ConfigurationError(f"model has {model.ell} external angles, got {len(n_phi)} grid sizes")
    if any(model.params.get(k, 0.0) for k in model.param_names if k != "eps1"):
        raise ConfigurationError("the autonomous construction needs all time-dependent couplings at zero")
    T, winding = orbit_period(model, z0, t_max, tol)
    shape = sp.check_shape((n_theta,) + n_phi)
    times = T * np.arange(n_theta) / n_theta
    orbit = integrate_flow(model, z0, None, T, tol, t_eval=np.append(times, T))
    z = orbit.z[:, :-1]
    closure = np.abs(orbit.z[:, -1] - np.asarray(z0) - np.array([winding * model.angle_scale, 0.0]))
    if closure.max() > 1e-8 * max(1.0, np.abs(z0).max()):
        raise PeriodicOrbitError(f"orbit does not close (defect {closure.max():.3e})")
    units = UnitCoordinates(model)
    n = model.n
    vals = z.copy()
    vals[:n] = z[:n] / model.angle_scale
    full = np.broadcast_to(vals.reshape((2 * n, n_theta) + (1,) * model.ell), (2 * n,) + shape).copy()
    omega_u = model.time_scale / T
    freq = FrequencyVector([omega_u], units.alpha)
    degree = np.array([[winding]], dtype=np.int64)
    K = TorusEmbedding.from_full_grid(full, degree, freq, model.params)
    K.orbit_period = T
    return K


def native_omega(model: HamiltonianModel, omega_unit: float) -> float:
    """Internal frequency in native radians per native time."""
    return omega_unit * model.angle_scale / model.time_scale


def unit_omega(model: HamiltonianModel, omega_native: float) -> float:
    return omega_native * model.time_scale / model.angle_scale
