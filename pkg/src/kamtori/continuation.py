"""Parameter continuation of invariant tori and breakdown diagnostics.

A family is followed along a piecewise-linear path in parameter space.  Each
step predicts the next torus from the linearized invariance equation and
corrects it with :func:`kamtori.kam.newton_iterate`.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from . import geometry as geo
from . import kam
from . import spectral as sp
from .errors import (ConfigurationError, ConvergenceWarning, DivergenceError, ModelDomainError,
                     NoTwistError, ResolutionExhaustedError, ResonanceError)
from .geometry import TorusEmbedding
from .models import HamiltonianModel, UnitCoordinates

logger = logging.getLogger(__name__)

MAX_HALVINGS = 6
ETA_N_LIMIT = 1e-10
SIGNIFICANT = 1e-14


# -- predictor ------------------------------------------------------------------

def parameter_field(K: TorusEmbedding, units: UnitCoordinates, direction: dict) -> np.ndarray:
    """``sum_p d_p dZ/dp`` evaluated on the torus, shape ``(2n, *grid)``."""
    z, phi = geo.evaluation_points(K)
    out = np.zeros_like(z)
    for name, weight in direction.items():
        if weight:
            out += weight * units.d_param_vector_field(z, phi, name)
    return out


def predictor(K: TorusEmbedding, frame, units: UnitCoordinates, direction, delta: float,
              dealias: float = kam.DEALIAS):
    """First-order prediction of the torus at the parameters ``p + delta * direction``.

    The derivative ``K_p`` solves ``dZ/dp(K) + DZ(K) K_p + L K_p = 0``, which is
    the Newton system with ``dZ/dp(K)`` in place of the invariance error.

    Parameters
    ----------
    frame : AdaptedFrame or None
        Frame with torsion at ``K``; recomputed when ``None``.
    direction : dict or str
        Parameter name (unit direction) or mapping from names to components.

    Returns
    -------
    K_pred : TorusEmbedding
        Carries the new parameter values in ``params``.
    """
    if isinstance(direction, str):
        direction = {direction: 1.0}
    for name in direction:
        units.model.check_param(name)
    if frame is None or frame.T is None:
        frame = kam.frame_and_torsion(K, units)
    e_p = parameter_field(K, units, direction)
    eta, avg_n = kam.newton_rhs(e_p, frame)
    scale = float(np.abs(eta).max())
    avg = float(np.abs(avg_n).max())
    if scale > 0 and avg > ETA_N_LIMIT * scale:
        logger.warning("average of the normal parameter derivative is %.3e (relative %.3e)", avg, avg / scale)
    xi = kam.newton_solve(eta, frame.T, frame.T_avg_inv, K.freq, K.shape)
    dK = np.einsum("ij...,j...->i...", frame.P, xi)
    dk_hat = sp.forward(dK, K.dim)
    mask = kam.band_mask(K.shape, dealias)
    if mask is not None:
        dk_hat *= mask
    out = K.copy()
    out.coeffs = K.coeffs + delta * dk_hat
    out.params = {k: K.params.get(k, getattr(units.model, k)) for k in units.model.param_names}
    for name, weight in direction.items():
        out.params[name] = out.params[name] + delta * weight
    return out


# -- family records -------------------------------------------------------------

@dataclass
class FamilyEntry:
    """One converged member of a family."""

    s: float
    params: dict
    error: float
    norm: float
    shape: tuple
    iterations: int
    T_avg: np.ndarray
    path: str | None = None


@dataclass
class FamilyRecord:
    """Converged tori along a path, ordered by the path coordinate ``s``.

    ``norm`` is the Sobolev norm of order ``sobolev_order`` of the periodic
    part of each torus.  ``delta`` is the requested step and ``last_step``
    the step in use when the run ended.
    """

    entries: list = field(default_factory=list)
    tol: float = 1e-12
    sobolev_order: float = 4.0
    status: str = "running"
    delta: float = math.nan
    last_step: float = math.nan
    message: str = ""

    def append(self, entry: FamilyEntry) -> None:
        if self.entries and entry.s <= self.entries[-1].s:
            raise ConfigurationError("family entries must be strictly monotone in the path coordinate")
        if not entry.error < self.tol:
            raise ConfigurationError(f"entry error {entry.error:.3e} is above the run tolerance")
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    @property
    def s(self) -> np.ndarray:
        return np.array([e.s for e in self.entries])

    @property
    def norms(self) -> np.ndarray:
        return np.array([e.norm for e in self.entries])

    def values(self, name: str) -> np.ndarray:
        return np.array([e.params[name] for e in self.entries])

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        names = list(self.entries[0].params) if self.entries else []
        dims = max((len(e.shape) for e in self.entries), default=0)
        grid_cols = ["N_theta"] + [f"N_phi{i}" for i in range(1, dims)]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["s"] + names + ["norm_E", f"norm_K{self.sobolev_order:g}"] + grid_cols
                        + ["iterations", "T_avg", "file"])
        for e in self.entries:
            writer.writerow([f"{e.s:.12e}"] + [f"{e.params[k]:.12e}" for k in names]
                            + [f"{e.error:.6e}", f"{e.norm:.12e}"] + list(e.shape)
                            + [e.iterations, kam._fmt_matrix(e.T_avg), e.path or ""])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def sobolev_norm_k(K: TorusEmbedding, order: float = 4.0) -> float:
    """``sqrt(|K_x^p|_r^2 + |K_y^p|_r^2)`` summed over components."""
    return K.sobolev_norm(order)


# -- paths ----------------------------------------------------------------------

@dataclass
class ParameterPath:
    """Piecewise-linear path through parameter waypoints.

    The coordinate ``s`` is the Euclidean arc length in parameter space.
    """

    waypoints: list

    def __post_init__(self):
        if not self.waypoints:
            raise ConfigurationError("a parameter path needs at least one waypoint")
        names = set(self.waypoints[0])
        for w in self.waypoints:
            if set(w) != names:
                raise ConfigurationError("every waypoint must set the same parameters")
        self.names = sorted(names)
        pts = np.array([[float(w[k]) for k in self.names] for w in self.waypoints])
        self._points = pts
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1) if len(pts) > 1 else np.zeros(0)
        self._knots = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self._knots[-1])

    def _segment(self, s: float) -> int:
        i = int(np.searchsorted(self._knots, s, side="right") - 1)
        return min(max(i, 0), len(self._knots) - 2)

    def point(self, s: float) -> dict:
        if len(self._points) == 1:
            return dict(zip(self.names, self._points[0]))
        i = self._segment(s)
        span = self._knots[i + 1] - self._knots[i]
        t = 0.0 if span == 0 else (s - self._knots[i]) / span
        p = self._points[i] + t * (self._points[i + 1] - self._points[i])
        return dict(zip(self.names, p.tolist()))

    def direction(self, s: float) -> dict:
        """Unit tangent of the segment that starts at or before ``s``."""
        if len(self._points) == 1:
            return {k: 0.0 for k in self.names}
        i = self._segment(s)
        # at a knot move on to the next segment
        while i + 1 < len(self._knots) - 1 and s >= self._knots[i + 1] - 1e-15:
            i += 1
        d = self._points[i + 1] - self._points[i]
        nrm = np.linalg.norm(d)
        return dict(zip(self.names, (d / nrm if nrm else d).tolist()))

    def next_knot(self, s: float) -> float:
        """First waypoint coordinate strictly beyond ``s``."""
        later = self._knots[self._knots > s + 1e-15]
        return float(later[0]) if later.size else self.length


# -- family driver ----------------------------------------------------------------

NEWTON_FAILURES = (DivergenceError, ResolutionExhaustedError, NoTwistError, ResonanceError, ModelDomainError)


def continue_family(model: HamiltonianModel, K_start: TorusEmbedding, path, delta: float,
                    tol: float = 1e-12, max_iter: int = 20, policy: kam.DoublingPolicy | None = None,
                    use_predictor: bool = True, sobolev_order: float = 4.0, save=None,
                    max_halvings: int = MAX_HALVINGS, callback=None) -> FamilyRecord:
    """Follow the torus ``K_start`` along ``path``.

    Parameters
    ----------
    model : HamiltonianModel
        Model at the start of the path; parameters off the path are kept.
    K_start : TorusEmbedding
        Torus converged for ``model``.
    path : ParameterPath or list of dict
        Waypoints; the first must match the parameters of ``model``.
    delta : float
        Initial step in the path coordinate.
    save : callable, optional
        ``save(K, index) -> str`` persists a converged torus and returns its
        location.
    max_halvings : int
        The step is halved after each Newton failure and kept after a
        success; a failure at ``delta / 2**max_halvings`` ends the run.

    Returns
    -------
    FamilyRecord
        ``status`` is ``"complete"`` when the end of the path was reached and
        ``"breakdown"`` when the step could no longer be reduced.
    """
    if not isinstance(path, ParameterPath):
        path = ParameterPath(list(path))
    if delta <= 0:
        raise ConfigurationError("continuation step must be positive")
    start = path.point(0.0)
    for k, v in start.items():
        if not math.isclose(getattr(model, k), v, rel_tol=1e-12, abs_tol=1e-15):
            raise ConfigurationError(f"path starts at {k} = {v} but the model has {getattr(model, k)}")
    record = FamilyRecord(tol=tol, sobolev_order=sobolev_order, delta=delta, last_step=delta)
    units = UnitCoordinates(model)
    K = K_start.copy()
    K.params = model.settings
    _, err = kam.invariance_error(K, units)
    if not err < tol:
        K, rep = kam.newton_iterate(K, units, tol, max_iter, policy)
        err, iters = rep.final_error, rep.iterations
    else:
        iters = 0
    frame = kam.frame_and_torsion(K, units)
    entry = FamilyEntry(0.0, model.params, err, sobolev_norm_k(K, sobolev_order), K.shape, iters,
                        frame.T_avg.copy())
    entry.path = save(K, 0) if save else None
    record.append(entry)
    if callback is not None:
        callback(entry, K)

    s = 0.0
    step = delta
    halvings = 0
    t0 = time.perf_counter()
    while s < path.length - 1e-15:
        s_new = min(s + step, path.next_knot(s))
        target = path.point(s_new)
        direction = path.direction(s)
        new_model = model.with_params(**target)
        new_units = UnitCoordinates(new_model)
        ds = s_new - s
        try:
            if use_predictor:
                guess = predictor(K, frame, units, direction, ds)
            else:
                guess = K.copy()
            guess.params = new_model.settings
            K_new, rep = kam.newton_iterate(guess, new_units, tol, max_iter, policy)
        except NEWTON_FAILURES as exc:
            logger.info("step to s = %.6e failed (%s); halving %d", s_new, exc, halvings + 1)
            if halvings >= max_halvings:
                record.status = "breakdown"
                record.message = f"no convergence beyond s = {s:.6e} after {max_halvings} halvings: {exc}"
                logger.warning(record.message)
                break
            halvings += 1
            step *= 0.5
            record.last_step = step
            continue
        s, K, model, units = s_new, K_new, new_model, new_units
        frame = kam.frame_and_torsion(K, units)
        entry = FamilyEntry(s, model.params, rep.final_error, sobolev_norm_k(K, sobolev_order), K.shape,
                            rep.iterations, frame.T_avg.copy())
        entry.path = save(K, len(record)) if save else None
        record.append(entry)
        record.last_step = step
        logger.info("s = %.6e %s |E| = %.3e |K|_%g = %.6e iterations %d (%.1f s)", s, target,
                    rep.final_error, sobolev_order, entry.norm, rep.iterations, time.perf_counter() - t0)
        if callback is not None:
            callback(entry, K)
    else:
        record.status = "complete"
    return record


# -- blow-up fit ----------------------------------------------------------------

@dataclass
class BlowupFit:
    """``log |K|_r = slope * log(eps_c - eps) + intercept``."""

    eps_c: float
    slope: float
    intercept: float
    correlation: float
    residuals: np.ndarray

    def as_dict(self) -> dict:
        return {"eps_c": self.eps_c, "slope": self.slope, "intercept": self.intercept,
                "correlation": self.correlation, "residuals": self.residuals.tolist()}


def _linear_fit(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    r = np.corrcoef(x, y)[0, 1]
    return slope, intercept, r


def blowup_fit(eps, norms, step: float | None = None, resolution: float = 1e-6,
               span: int = 50, min_entries: int = 8, refine: bool = True) -> BlowupFit:
    """Fit ``|K| ~ (eps_c - eps)^A`` by scanning ``eps_c`` above the last ``eps``.

    Parameters
    ----------
    eps, norms : array_like
        Parameter values (increasing) and the norms of the family.
    step : float, optional
        Continuation step; ``eps_c`` is scanned over ``(eps_last, eps_last +
        span * step]``.  Defaults to the last spacing of ``eps``.
    resolution : float
        Spacing of the scan.
    refine : bool
        Polish the best scan point by a bounded one-dimensional search of
        ``|r|`` within one scan cell on either side.

    Warns
    -----
    ConvergenceWarning
        If the norms do not grow monotonically.
    """
    eps = np.asarray(eps, dtype=float)
    norms = np.asarray(norms, dtype=float)
    if eps.size < min_entries:
        raise ConfigurationError(f"a blow-up fit needs at least {min_entries} family members")
    if np.any(np.diff(eps) <= 0):
        raise ConfigurationError("family parameters must increase")
    if np.any(np.diff(norms) <= 0):
        warnings.warn("norms are not monotonically increasing; the blow-up fit is unreliable",
                      ConvergenceWarning, stacklevel=2)
    if step is None:
        step = float(eps[-1] - eps[-2])
    count = max(int(round(span * step / resolution)), 1)
    candidates = eps[-1] + resolution * np.arange(1, count + 1)
    y = np.log(norms)
    if np.ptp(y) == 0:
        raise ConfigurationError("blow-up fit is undefined for constant norms")
    best = None
    for c in candidates:
        x = np.log(c - eps)
        r = np.corrcoef(x, y)[0, 1]
        if not np.isfinite(r):
            continue
        if best is None or abs(r) > abs(best[1]):
            best = (c, r)
    if best is None:
        raise ConfigurationError("blow-up fit is undefined for constant norms")
    c = best[0]
    if refine:
        lo = max(c - resolution, eps[-1] + 1e-3 * resolution)
        res = minimize_scalar(lambda cc: -abs(np.corrcoef(np.log(cc - eps), y)[0, 1]),
                              bounds=(lo, c + resolution), method="bounded",
                              options={"xatol": 1e-4 * resolution})
        if res.success and -res.fun >= abs(best[1]):
            c = float(res.x)
    x = np.log(c - eps)
    slope, intercept, r = _linear_fit(x, y)
    return BlowupFit(float(c), float(slope), float(intercept), float(r), y - (slope * x + intercept))


def family_blowup_fit(record: FamilyRecord, param: str, **kw) -> BlowupFit:
    """:func:`blowup_fit` on the stored norms against parameter ``param``."""
    kw.setdefault("step", record.delta if np.isfinite(record.delta) else None)
    return blowup_fit(record.values(param), record.norms, **kw)


# -- spectral diagnostics ---------------------------------------------------------

@dataclass
class SpectralDiagnostics:
    """Decay of the Fourier coefficients of a torus.

    ``slope`` fits ``log |c_k|`` against ``|k|_inf`` over the envelope of the
    significant coefficients (``nan`` when fewer than three envelope points
    exist).  ``profile`` holds, per external wave number ``k_phi`` (first
    external axis), the log of the largest H^r-weighted coefficient.
    """

    slope: float
    intercept: float
    envelope: np.ndarray
    profile_k: np.ndarray
    profile: np.ndarray
    reliable: bool

    def profile_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["k_phi", "log_max_weighted_coefficient"])
        for k, v in zip(self.profile_k, self.profile):
            writer.writerow([int(k), f"{v:.10e}"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def spectral_diagnostics(K: TorusEmbedding, order: float = 4.0, threshold: float = SIGNIFICANT):
    spec = sp.spectrum(K.shape)
    amp = np.sqrt((np.abs(K.coeffs) ** 2).sum(axis=0))
    kinf = spec.k_inf().astype(np.int64)
    env = np.zeros(int(kinf.max()) + 1)
    np.maximum.at(env, kinf.ravel(), amp.ravel())
    ks = np.nonzero(env > threshold)[0]
    ks = ks[ks > 0]
    if ks.size >= 3:
        slope, intercept = np.polyfit(ks, np.log(env[ks]), 1)
        reliable = True
    else:
        slope, intercept, reliable = math.nan, math.nan, False
    if K.ell:
        weighted = amp * (2 * np.pi * spec.k_inf()) ** order
        axis = K.n
        kphi = np.abs(spec.k[axis]).astype(np.int64)
        kphi = np.broadcast_to(kphi, weighted.shape)
        prof = np.zeros(int(kphi.max()) + 1)
        np.maximum.at(prof, kphi.ravel(), weighted.ravel())
        with np.errstate(divide="ignore"):
            profile = np.log(prof)
        profile_k = np.arange(prof.size)
    else:
        profile_k = np.zeros(0, dtype=np.int64)
        profile = np.zeros(0)
    return SpectralDiagnostics(float(slope), float(intercept), env, profile_k, profile, reliable)
