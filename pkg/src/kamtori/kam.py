"""Invariance error, quasi-Newton correction and the iteration driver.

Every quantity is evaluated on the unit torus through
:class:`~kamtori.models.UnitCoordinates`.  One Newton step solves the
triangular system ``L xi + Lambda xi = eta`` in the adapted frame ``P`` and
updates the periodic part of ``K`` by ``P xi``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import spectral as sp
from .errors import (ConfigurationError, DivergenceError, KamtoriError, ModelDomainError,
                     NoTwistError, ResolutionExhaustedError)
from .geometry import AdaptedFrame, TorusEmbedding
from .models import UnitCoordinates

logger = logging.getLogger(__name__)

ETA_N_WARNING = 1e-6
DEALIAS = 2.0 / 3.0


def band_mask(shape, fraction: float) -> np.ndarray | None:
    """Half-spectrum mask of modes with ``|k_a| <= fraction * N_a / 2`` on every axis."""
    if fraction >= 1.0:
        return None
    spec = sp.spectrum(tuple(shape))
    mask = np.ones(spec.half_shape, dtype=bool)
    for k, n in zip(spec.k, shape):
        mask &= np.abs(k) <= fraction * (n // 2)
    return mask


def resident_memory_mb() -> float:
    """Current resident set size in MiB (0 if unavailable)."""
    try:
        with open("/proc/self/statm") as fh:
            pages = int(fh.read().split()[1])
        return pages * os.sysconf("SC_PAGE_SIZE") / 2 ** 20
    except (OSError, ValueError, IndexError):
        return 0.0


def _grid_norm(values) -> float:
    return float(np.abs(values).max())


# -- invariance error ---------------------------------------------------------

def lie_of_embedding(K: TorusEmbedding) -> np.ndarray:
    """``L_{omega,alpha} K`` on the grid, including the winding part ``-D omega``."""
    out = sp.inverse(sp.lie_derivative(sp.FourierSeries(K.coeffs, K.shape), K.freq).coeffs, K.shape)
    drift = K.degree @ K.freq.omega
    out[: K.n1] -= drift.reshape((-1,) + (1,) * K.dim)
    return out


def invariance_error(K: TorusEmbedding, units: UnitCoordinates):
    """Return ``(E, |E|)`` with ``E = Z_H(K, phi) + L_{omega,alpha} K`` on the grid."""
    z, phi = geo.evaluation_points(K)
    E = units.vector_field(z, phi)
    E += lie_of_embedding(K)
    return E, _grid_norm(E)


# -- Newton pieces --------------------------------------------------------------

def newton_rhs(E: np.ndarray, frame: AdaptedFrame):
    """``eta^L = -N^T Omega0 E`` and ``eta^N = L^T Omega0 E`` pointwise.

    Returns ``(eta, avg_eta_N)`` with ``eta`` of shape ``(2n, *grid)``; the
    average of ``eta^N`` is reported and left in place for the solver to
    discard.
    """
    oe = geo.omega_left(E)
    eta_l = -np.einsum("ij...,i...->j...", frame.N, oe)
    eta_n = np.einsum("ij...,i...->j...", frame.L, oe)
    d = E.ndim - 1
    avg_n = geo.average_field(eta_n, d)
    return np.concatenate([eta_l, eta_n]), avg_n


def _pointwise_apply(m, v):
    return np.einsum("ij...,j...->i...", m, v)


def newton_solve(eta: np.ndarray, T: np.ndarray, T_avg_inv: np.ndarray, freq, shape,
                 check: bool = True) -> np.ndarray:
    """Solve ``L xi + Lambda xi = eta`` (averages projected) for ``xi = (xi^L, xi^N)``.

    ``xi^N = xi^N_00 + R eta^N`` with ``xi^N_00`` fixed by the solvability of
    the tangential equation, and ``xi^L = R(eta^L - T xi^N)`` with zero
    average.
    """
    shape = tuple(shape)
    d = len(shape)
    n = eta.shape[0] // 2
    solver = sp.cohomology_solver(shape, freq)
    eta_l, eta_n = eta[:n], eta[n:]
    r_eta_n = sp.inverse(solver.solve(sp.forward(eta_n, d)), shape)
    base = eta_l - _pointwise_apply(T, r_eta_n)
    xi_n00 = T_avg_inv @ geo.average_field(base, d)
    xi_n = r_eta_n + xi_n00.reshape((n,) + (1,) * d)
    rhs = eta_l - _pointwise_apply(T, xi_n)
    if check:
        avg = np.abs(geo.average_field(rhs, d)).max()
        scale = max(_grid_norm(eta), 1e-300)
        if avg > 1e-12 * scale and avg > 1e-15:
            raise NoTwistError(f"tangential equation unsolvable: average {avg:.3e} after correction")
    xi_l = sp.inverse(solver.solve(sp.forward(rhs, d)), shape)
    return np.concatenate([xi_l, xi_n])


def triangular_residual(xi, eta, T, freq, shape) -> float:
    """Max-norm of ``L xi + Lambda xi - eta`` after removing the averages of ``eta``."""
    d = len(shape)
    n = xi.shape[0] // 2
    solver = sp.cohomology_solver(shape, freq)
    lxi = sp.inverse(solver.lie(sp.forward(xi, d)), shape)
    res = lxi.copy()
    res[:n] += _pointwise_apply(T, xi[n:])
    res -= eta
    res[n:] += geo.average_field(eta[n:], d).reshape((n,) + (1,) * d)
    return _grid_norm(res)


# -- reports ------------------------------------------------------------------

def _fmt_matrix(m) -> str:
    m = np.atleast_2d(m)
    if m.size == 1:
        return f"{float(m.ravel()[0]):.8e}"
    return " ".join(f"{v:.8e}" for v in m.ravel())


@dataclass
class NewtonRow:
    """One line of the per-iteration table."""

    step: int
    time: float
    memory: float
    norm_L: float
    norm_omega_L: float
    norm_lie_L: float
    norm_T: float
    T_avg: np.ndarray
    T_avg_inv: np.ndarray
    norm_dK: float
    norm_E: float
    eta_N_avg: float
    shape: tuple
    stage_times: dict = field(default_factory=dict)

    def as_csv(self) -> dict:
        return {
            "step": self.step,
            "time": f"{self.time:.3f}",
            "memory_mb": f"{self.memory:.1f}",
            "norm_L": f"{self.norm_L:.6e}",
            "norm_Omega_L": f"{self.norm_omega_L:.6e}",
            "norm_LieL": f"{self.norm_lie_L:.6e}",
            "norm_T": f"{self.norm_T:.6e}",
            "T_avg": _fmt_matrix(self.T_avg),
            "T_avg_inv": _fmt_matrix(self.T_avg_inv),
            "norm_dK": f"{self.norm_dK:.6e}",
            "norm_E": f"{self.norm_E:.6e}",
            "eta_N_avg": f"{self.eta_N_avg:.3e}",
            "grid": "x".join(str(s) for s in self.shape),
            "t_frame": f"{self.stage_times.get('frame', 0.0):.3f}",
            "t_torsion": f"{self.stage_times.get('torsion', 0.0):.3f}",
            "t_correction": f"{self.stage_times.get('correction', 0.0):.3f}",
            "t_update": f"{self.stage_times.get('update', 0.0):.3f}",
        }


@dataclass
class NewtonReport:
    """Records of a Newton run and its final status."""

    rows: list = field(default_factory=list)
    initial_error: float = math.nan
    status: str = "running"
    events: list = field(default_factory=list)

    STATUSES = ("converged", "diverged", "no-twist", "resolution-exhausted", "max-iter")

    def append(self, row: NewtonRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ConfigurationError("report rows must be appended in step order")
        self.rows.append(row)

    @property
    def iterations(self) -> int:
        return len(self.rows)

    @property
    def errors(self) -> list:
        return [self.initial_error] + [r.norm_E for r in self.rows]

    @property
    def final_error(self) -> float:
        return self.errors[-1]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        if self.rows:
            keys = list(self.rows[0].as_csv())
            writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
            writer.writeheader()
            for r in self.rows:
                writer.writerow(r.as_csv())
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


# -- one step -----------------------------------------------------------------

def frame_and_torsion(K: TorusEmbedding, units: UnitCoordinates, route: str = "flow") -> AdaptedFrame:
    frame = geo.build_frame(K)
    geo.torsion(K, frame, units, route)
    return frame


def newton_step(K: TorusEmbedding, units: UnitCoordinates, step: int = 1, E=None,
                t0: float | None = None, dealias: float = DEALIAS):
    """One quasi-Newton correction.

    Parameters
    ----------
    dealias : float
        The correction ``P xi`` is truncated to modes within this fraction of
        the Nyquist index on each axis (the two-thirds rule by default);
        ``1`` keeps every mode.

    Returns
    -------
    K_new, E_new, row
        ``E_new`` is the invariance error of the corrected torus on its grid.
    """
    t0 = time.perf_counter() if t0 is None else t0
    stages = {}
    clock = time.perf_counter()
    if E is None:
        E, _ = invariance_error(K, units)
    frame = geo.build_frame(K)
    norm_L = geo.sup_norm(frame.L)
    norm_omega_L = geo.lagrangian_defect(K, frame.L)
    stages["frame"] = time.perf_counter() - clock

    clock = time.perf_counter()
    geo.torsion(K, frame, units)
    norm_T = geo.sup_norm(frame.T)
    stages["torsion"] = time.perf_counter() - clock

    clock = time.perf_counter()
    eta, avg_n = newton_rhs(E, frame)
    eta_scale = max(_grid_norm(eta), 1e-300)
    avg_n_mag = float(np.abs(avg_n).max())
    if avg_n_mag > ETA_N_WARNING * eta_scale:
        logger.warning("average of eta^N is %.3e (relative %.3e)", avg_n_mag, avg_n_mag / eta_scale)
    xi = newton_solve(eta, frame.T, frame.T_avg_inv, K.freq, K.shape)
    dK = np.einsum("ij...,j...->i...", frame.P, xi)
    stages["correction"] = time.perf_counter() - clock

    clock = time.perf_counter()
    norm_lie_L = _lie_norm(K)
    T_avg, T_avg_inv = frame.T_avg, frame.T_avg_inv
    del frame, eta, xi
    K_new = K.copy()
    dk_hat = sp.forward(dK, K.dim)
    mask = band_mask(K.shape, dealias)
    if mask is not None:
        dk_hat *= mask
        dK = sp.inverse(dk_hat, K.shape)
    K_new.coeffs = K.coeffs + dk_hat
    norm_dK = _grid_norm(dK)
    del dK
    E_new, norm_E = invariance_error(K_new, units)
    stages["update"] = time.perf_counter() - clock

    row = NewtonRow(step=step, time=time.perf_counter() - t0, memory=resident_memory_mb(),
                    norm_L=norm_L, norm_omega_L=norm_omega_L, norm_lie_L=norm_lie_L,
                    norm_T=norm_T, T_avg=T_avg, T_avg_inv=T_avg_inv, norm_dK=norm_dK, norm_E=norm_E,
                    eta_N_avg=avg_n_mag, shape=K.shape, stage_times=stages)
    return K_new, E_new, row


def _lie_norm(K: TorusEmbedding) -> float:
    """Max-norm of ``L_{omega,alpha} D_theta K``."""
    solver = sp.cohomology_solver(K.shape, K.freq)
    out = 0.0
    for j in range(K.n):
        dk = sp.derivative_coeffs(K.coeffs, K.shape, j)
        out = max(out, _grid_norm(sp.inverse(solver.lie(dk), K.shape)))
    return out


# -- driver -------------------------------------------------------------------

@dataclass
class DoublingPolicy:
    """When and how to grow the grid during a Newton run.

    Parameters
    ----------
    stagnation : float
        Double when ``|E_{k+1}| / |E_k|`` exceeds this ratio.
    tail_threshold : float
        Double when the spectral tail of ``K`` exceeds this fraction of ``|E|``.
    band_fraction : float
        Modes beyond this fraction of the Nyquist index form the tail.
    max_shape : tuple of int, optional
        Per-axis cap on the grid sizes.
    max_points : int, optional
        Cap on the total number of grid points, a memory budget.
    order : tuple of str
        Axes tried on successive stagnations: ``"theta"``, ``"phi"``, ``"both"``.
        Axes whose own tail is significant are doubled ahead of this order.
    """

    stagnation: float = 0.1
    tail_threshold: float = 1e-2
    band_fraction: float = 0.5
    max_shape: tuple | None = None
    max_points: int | None = None
    order: tuple = ("theta", "phi", "both")

    def candidates(self, shape, n: int, tail_axes=()):
        """Doubled shapes in policy order.

        Within each group only the axes still below their cap are doubled;
        a group with no such axis is skipped.  A non-empty ``tail_axes``
        puts a ``"tail"`` group doubling exactly those axes first.
        """
        out = []
        cap = self.max_shape or (math.inf,) * len(shape)
        groups = {"theta": range(n), "phi": range(n, len(shape)), "both": range(len(shape)),
                  "tail": tuple(tail_axes)}
        for kind in (("tail",) if len(tail_axes) else ()) + tuple(self.order):
            axes = groups[kind]
            new = list(shape)
            for a in axes:
                if 2 * new[a] <= cap[a]:
                    new[a] *= 2
            new = tuple(new)
            if new == tuple(shape) or any(new == c for _, c in out):
                continue
            if self.max_points is not None and math.prod(new) > self.max_points:
                continue
            out.append((kind, new))
        return out


def _fail(exc_type, message, report, K):
    exc = exc_type(message)
    exc.report = report
    exc.embedding = K
    return exc


def newton_iterate(K: TorusEmbedding, units: UnitCoordinates, tol: float = 1e-12, max_iter: int = 20,
                   policy: DoublingPolicy | None = None, dealias: float = DEALIAS, callback=None):
    """Iterate :func:`newton_step` until ``|E| < tol``.

    The grid is doubled (zero-padding the spectra) when the error stagnates
    or the spectral tail of ``K`` becomes comparable to the error.  Axes whose
    own tail is comparable to the error are doubled first.  Otherwise
    successive doublings follow ``policy.order`` and the cycle restarts after
    any step that contracts normally.

    Returns
    -------
    K, report : TorusEmbedding, NewtonReport

    Raises
    ------
    DivergenceError
        The error grew in two consecutive steps (or the torus left the model
        domain).
    ResolutionExhaustedError
        Doubling was needed but every option exceeds ``policy.max_shape``.
    NoTwistError, ResonanceError
        Propagated from the step.  Every raised error carries ``report`` and
        ``embedding`` attributes.
    """
    if tol <= 0:
        raise ConfigurationError("Newton tolerance must be positive")
    policy = policy or DoublingPolicy()
    report = NewtonReport()
    t0 = time.perf_counter()
    E, err = invariance_error(K, units)
    report.initial_error = err
    stage = 0
    increases = 0
    step = 0
    while err >= tol:
        if step >= max_iter:
            report.status = "max-iter"
            raise _fail(DivergenceError, f"no convergence in {max_iter} steps (|E| = {err:.3e})", report, K)
        try:
            K_new, E_new, row = newton_step(K, units, step + 1, E, t0, dealias)
        except NoTwistError as exc:
            report.status = "no-twist"
            exc.report, exc.embedding = report, K
            raise
        except (ValueError, ArithmeticError) as exc:
            if isinstance(exc, KamtoriError) and not isinstance(exc, (ModelDomainError,)):
                exc.report, exc.embedding = report, K
                raise
            report.status = "diverged"
            raise _fail(DivergenceError, f"step {step + 1} left the model domain: {exc}", report, K) from exc
        step += 1
        report.append(row)
        logger.info("step %d grid %s |E| = %.3e |dK| = %.3e <T> = %s", step, K.shape, row.norm_E,
                    row.norm_dK, _fmt_matrix(row.T_avg))
        if callback is not None:
            callback(row)
        if not np.isfinite(row.norm_E):
            report.status = "diverged"
            raise _fail(DivergenceError, f"non-finite error at step {step}", report, K)
        increases = increases + 1 if row.norm_E > err else 0
        if increases >= 2:
            report.status = "diverged"
            raise _fail(DivergenceError, f"error grew in two consecutive steps (|E| = {row.norm_E:.3e})",
                        report, K_new)
        ratio = row.norm_E / err
        K, E, err = K_new, E_new, row.norm_E
        if err < tol:
            break
        P = K.periodic()
        tail = float(np.max(sp.tail_norm(P, policy.band_fraction)))
        if ratio > policy.stagnation or tail > policy.tail_threshold * err:
            tail_axes = [a for a in range(len(K.shape))
                         if np.max(sp.tail_norm(P, policy.band_fraction, axis=a)) > policy.tail_threshold * err]
            options = policy.candidates(K.shape, K.n, tail_axes)
            if not options:
                report.status = "resolution-exhausted"
                raise _fail(ResolutionExhaustedError,
                            f"grid {K.shape} cannot grow within caps {policy.max_shape}, "
                            f"{policy.max_points} points (|E| = {err:.3e})", report, K)
            if options[0][0] == "tail":
                kind, new_shape = options[0]
            else:
                kind, new_shape = options[min(stage, len(options) - 1)]
            reason = "stagnation" if ratio > policy.stagnation else "tail"
            report.events.append((step, reason, kind, tuple(new_shape)))
            logger.info("doubling %s: %s -> %s (%s, ratio %.2e, tail %.2e)", kind, K.shape, new_shape,
                        reason, ratio, tail)
            K = K.resampled(new_shape)
            E, err = invariance_error(K, units)
            stage += kind != "tail"
            increases = 0
        else:
            stage = 0
    report.status = "converged"
    return K, report
