"""Hamiltonian models and the unit-torus coordinate adapter.

Models are written in their native variables: 2 pi periodic angles and the
physical time.  Every evaluator takes ``z`` of shape ``(2n, ...)`` and native
external angles ``phi`` of shape ``(l, ...)`` and broadcasts over the trailing
axes, so a whole torus grid is evaluated in one call.

The parameterization layers work on the unit torus instead.  With
``x_native = 2 pi x``, ``y_native = y`` and ``t_native = c t`` the flow stays
canonical for the Hamiltonian ``(c / 2 pi) H``; :class:`UnitCoordinates`
applies that change of variables.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import ClassVar

import numpy as np

from .errors import ConfigurationError, ModelDomainError

TWO_PI = 2.0 * math.pi
GOLDEN_MEAN = (1.0 + math.sqrt(5.0)) / 2.0


def omega0(n: int) -> np.ndarray:
    """Canonical symplectic matrix [[0, -I], [I, 0]]."""
    eye = np.eye(n)
    zero = np.zeros((n, n))
    return np.block([[zero, -eye], [eye, zero]])


def _stack(rows):
    """Stack a nested list of broadcastable arrays into one array."""
    rows = [np.broadcast_arrays(*r) if isinstance(r, (list, tuple)) else r for r in rows]
    return np.array(rows)


@dataclass(frozen=True)
class HamiltonianModel:
    """Evaluator bundle for ``H(z, phi)`` with ``phi' = alpha``.

    Subclasses fill in ``hamiltonian``, ``gradient``, ``hessian`` and the
    parameter derivatives.  ``time_scale`` is the native duration of one unit
    of time on the torus.
    """

    n1 = 1
    n2 = 0
    name = "abstract"
    param_names: ClassVar[tuple[str, ...]] = ()

    @property
    def n(self) -> int:
        return self.n1 + self.n2

    @property
    def alpha(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def ell(self) -> int:
        return self.alpha.size

    angle_scale = TWO_PI

    @property
    def time_scale(self) -> float:
        return 1.0

    @property
    def params(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in self.param_names}

    @property
    def settings(self) -> dict[str, float]:
        """Continuation parameters plus fixed extras such as a reference flux."""
        out = self.params
        out.update({k: float(getattr(self, k)) for k in self.extra_names()})
        return out

    def with_params(self, **values) -> "HamiltonianModel":
        unknown = set(values) - set(self.param_names) - set(self.extra_names())
        if unknown:
            raise ConfigurationError(f"unknown parameter(s) {sorted(unknown)} for model {self.name}")
        return replace(self, **values)

    def extra_names(self) -> tuple[str, ...]:
        return ()

    def check_param(self, name: str) -> None:
        if name not in self.param_names:
            raise ConfigurationError(f"model {self.name} has no parameter {name!r}")

    def hamiltonian(self, z, phi):
        raise NotImplementedError

    def gradient(self, z, phi):
        raise NotImplementedError

    def hessian(self, z, phi):
        raise NotImplementedError

    def param_derivative(self, z, phi, name):
        raise NotImplementedError

    def param_gradient(self, z, phi, name):
        raise NotImplementedError


@dataclass(frozen=True)
class TokamakModel(HamiltonianModel):
    """Magnetic field lines: ``H = int dpsi/q + eps H1 + eps^2 f2``.

    Variables are the poloidal angle ``theta`` and the toroidal flux ``psi``;
    the toroidal angle ``phi`` plays the role of time (``alpha = 1``).
    """

    eps: float = 0.0
    psi0: float = 0.35
    name = "tokamak"
    param_names = ("eps",)

    def __post_init__(self):
        w = inverse_q(self.psi0)
        if abs(2 * w - 1) < 1e-12 or abs(3 * w - 2) < 1e-12:
            raise ConfigurationError(f"psi0={self.psi0} puts w={w} on a resonance of f2")

    def extra_names(self):
        return ("psi0",)

    @property
    def alpha(self):
        return np.array([1.0])

    @property
    def time_scale(self) -> float:
        return TWO_PI / 1.0

    @property
    def w(self) -> float:
        return inverse_q(self.psi0)

    def _control(self):
        w = self.w
        coef = -0.5 * d_inverse_q(self.psi0)
        return coef, 2.0 / (2.0 * w - 1.0), 3.0 / (3.0 * w - 2.0)

    def _angles(self, theta, phi):
        return 2.0 * theta - phi, 3.0 * theta - 2.0 * phi

    def _check(self, psi):
        psi = np.asarray(psi)
        if not np.all(np.isfinite(psi)) or np.any(psi >= 2.0):
            raise ModelDomainError("psi outside the safety-factor profile domain (psi < 2)")

    def _parts(self, theta, phi):
        """H1, f2 and their first two theta derivatives."""
        u, v = self._angles(theta, phi)
        cu, su, cv, sv = np.cos(u), np.sin(u), np.cos(v), np.sin(v)
        coef, a, b = self._control()
        h1 = cu + cv
        h1_t = -2.0 * su - 3.0 * sv
        h1_tt = -4.0 * cu - 9.0 * cv
        g = a * cu + b * cv
        g_t = -2.0 * a * su - 3.0 * b * sv
        g_tt = -4.0 * a * cu - 9.0 * b * cv
        f2 = coef * g * g
        f2_t = 2.0 * coef * g * g_t
        f2_tt = 2.0 * coef * (g_t * g_t + g * g_tt)
        return (h1, h1_t, h1_tt), (f2, f2_t, f2_tt)

    def hamiltonian(self, z, phi):
        theta, psi = z[0], z[1]
        self._check(psi)
        (h1, _, _), (f2, _, _) = self._parts(theta, phi[0])
        return integral_inverse_q(psi) + self.eps * h1 + self.eps ** 2 * f2

    def gradient(self, z, phi):
        theta, psi = z[0], z[1]
        self._check(psi)
        (_, h1_t, _), (_, f2_t, _) = self._parts(theta, phi[0])
        return _stack([self.eps * h1_t + self.eps ** 2 * f2_t, inverse_q(psi)])

    def hessian(self, z, phi):
        theta, psi = z[0], z[1]
        self._check(psi)
        (_, _, h1_tt), (_, _, f2_tt) = self._parts(theta, phi[0])
        h_tt = self.eps * h1_tt + self.eps ** 2 * f2_tt
        zero = np.zeros(np.broadcast(h_tt, psi).shape)
        return _stack([[h_tt, zero], [zero, d_inverse_q(psi) + zero]])

    def param_derivative(self, z, phi, name):
        self.check_param(name)
        (h1, _, _), (f2, _, _) = self._parts(z[0], phi[0])
        return h1 + 2.0 * self.eps * f2

    def param_gradient(self, z, phi, name):
        self.check_param(name)
        (_, h1_t, _), (_, f2_t, _) = self._parts(z[0], phi[0])
        dth = h1_t + 2.0 * self.eps * f2_t
        return _stack([dth, np.zeros_like(dth)])


@dataclass(frozen=True)
class PendulumModel(HamiltonianModel):
    """``H = p^2/2 + eps1 cos q - (eps2 + eps3 cos(phi1)) cos(q - phi2)``.

    ``phi = (alpha1 t, alpha2 t)`` with ``alpha = (sqrt 3, golden mean)``.
    With ``eps1 = 0`` this is the single-wave reduction.
    """

    eps1: float = 0.0
    eps2: float = 0.0
    eps3: float = 0.0
    name = "qp-pendulum"
    param_names = ("eps1", "eps2", "eps3")

    @property
    def alpha(self):
        return np.array([math.sqrt(3.0), GOLDEN_MEAN])

    def _amp(self, phi):
        return self.eps2 + self.eps3 * np.cos(phi[0])

    def hamiltonian(self, z, phi):
        q, p = z[0], z[1]
        return 0.5 * p * p + self.eps1 * np.cos(q) - self._amp(phi) * np.cos(q - phi[1])

    def gradient(self, z, phi):
        q, p = z[0], z[1]
        return _stack([-self.eps1 * np.sin(q) + self._amp(phi) * np.sin(q - phi[1]), p])

    def hessian(self, z, phi):
        q, p = z[0], z[1]
        h_qq = -self.eps1 * np.cos(q) + self._amp(phi) * np.cos(q - phi[1])
        shape = np.broadcast(h_qq, p).shape
        zero = np.zeros(shape)
        return _stack([[h_qq + zero, zero], [zero, np.ones(shape)]])

    def param_derivative(self, z, phi, name):
        self.check_param(name)
        q = z[0]
        if name == "eps1":
            return np.cos(q) + 0.0 * phi[0]
        if name == "eps2":
            return -np.cos(q - phi[1])
        return -np.cos(phi[0]) * np.cos(q - phi[1])

    def param_gradient(self, z, phi, name):
        self.check_param(name)
        q = z[0]
        if name == "eps1":
            dq = -np.sin(q) + 0.0 * phi[0]
        elif name == "eps2":
            dq = np.sin(q - phi[1])
        else:
            dq = np.cos(phi[0]) * np.sin(q - phi[1])
        return _stack([dq, np.zeros_like(dq)])


MODELS = {"tokamak": TokamakModel, "qp-pendulum": PendulumModel}


def make_model(name: str, **params) -> HamiltonianModel:
    try:
        cls = MODELS[name]
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    allowed = set(cls.param_names) | set(cls().extra_names())
    unknown = set(params) - allowed
    if unknown:
        raise ConfigurationError(f"unknown parameter(s) {sorted(unknown)} for model {name}")
    return cls(**params)


# -- safety factor profile ------------------------------------------------------

def inverse_q(psi):
    """``1/q(psi) = (2 - psi)(2 - 2 psi + psi^2) / 4``."""
    return 1.0 - 1.5 * psi + psi ** 2 - 0.25 * psi ** 3


def d_inverse_q(psi):
    return -1.5 + 2.0 * psi - 0.75 * psi ** 2


def integral_inverse_q(psi):
    """Antiderivative of ``1/q`` vanishing at ``psi = 0``."""
    return psi - 0.75 * psi ** 2 + psi ** 3 / 3.0 - psi ** 4 / 16.0


def tokamak_profile(psi):
    """Return ``(q(psi), w = 1/q(psi))``; raises at the pole ``psi = 2``."""
    w = inverse_q(psi)
    if np.any(np.abs(w) < 1e-300):
        raise ModelDomainError(f"safety factor q has a pole at psi={psi}")
    return 1.0 / w, w


# -- native-coordinate operations ---------------------------------------------

def vector_field(model: HamiltonianModel, z, phi):
    """``Z_H = Omega0^{-1} grad H``: ``(dH/dy, -dH/dx)``."""
    g = model.gradient(np.asarray(z, dtype=float), np.asarray(phi, dtype=float))
    n = model.n
    return np.concatenate([g[n:], -g[:n]])


def jacobian(model: HamiltonianModel, z, phi):
    """``D_z Z_H = Omega0^{-1} Hess H``."""
    h = model.hessian(np.asarray(z, dtype=float), np.asarray(phi, dtype=float))
    n = model.n
    return np.concatenate([h[n:], -h[:n]])


def d_eps_vector_field(model: HamiltonianModel, z, phi, param_name: str):
    """Derivative of ``Z_H`` with respect to one model parameter."""
    g = model.param_gradient(np.asarray(z, dtype=float), np.asarray(phi, dtype=float), param_name)
    n = model.n
    return np.concatenate([g[n:], -g[:n]])


@dataclass(frozen=True)
class UnitCoordinates:
    """The model seen on the unit torus with rescaled time.

    ``z_native = S z`` with ``S = diag(2 pi I_n, I_n)``, ``phi_native = 2 pi phi``
    and ``t_native = c t`` where ``c = model.time_scale``.
    """

    model: HamiltonianModel
    _scale: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.model.n
        s = np.concatenate([np.full(n, self.model.angle_scale), np.ones(n)])
        object.__setattr__(self, "_scale", s)

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def alpha(self) -> np.ndarray:
        """External frequencies in cycles per unit time."""
        return self.model.alpha * self.model.time_scale / self.model.angle_scale

    @property
    def factor(self) -> float:
        return self.model.time_scale / self.model.angle_scale

    def _native(self, z, phi):
        s = self._scale.reshape((-1,) + (1,) * (np.ndim(z) - 1))
        return z * s, np.asarray(phi) * self.model.angle_scale

    def _sc(self, ndim):
        return self._scale.reshape((-1,) + (1,) * (ndim - 1))

    def hamiltonian(self, z, phi):
        zn, pn = self._native(z, phi)
        return self.factor * self.model.hamiltonian(zn, pn)

    def gradient(self, z, phi):
        zn, pn = self._native(z, phi)
        return self.factor * self._sc(np.ndim(z)) * self.model.gradient(zn, pn)

    def hessian(self, z, phi):
        zn, pn = self._native(z, phi)
        s = self._sc(np.ndim(z))
        return self.factor * s[:, None] * s[None, :] * self.model.hessian(zn, pn)

    def vector_field(self, z, phi):
        g = self.gradient(z, phi)
        n = self.n
        return np.concatenate([g[n:], -g[:n]])

    def jacobian(self, z, phi):
        h = self.hessian(z, phi)
        n = self.n
        return np.concatenate([h[n:], -h[:n]])

    def param_derivative(self, z, phi, name):
        zn, pn = self._native(z, phi)
        return self.factor * self.model.param_derivative(zn, pn, name)

    def param_gradient(self, z, phi, name):
        zn, pn = self._native(z, phi)
        return self.factor * self._sc(np.ndim(z)) * self.model.param_gradient(zn, pn, name)

    def d_param_vector_field(self, z, phi, name):
        g = self.param_gradient(z, phi, name)
        n = self.n
        return np.concatenate([g[n:], -g[:n]])
