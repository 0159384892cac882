"""Command-line interface: ``kamtori {frequency,init-guess,refine,continue,diagnose}``.

Configuration comes from an optional ``key = value`` file with section headers
and from flags, which override the file.  Every command writes a JSON metadata
record next to its outputs.

Exit codes: 0 on success (including a reported breakdown of a family), 2 on
configuration errors and 3 on numerical failures.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import platform
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import continuation as ct
from . import dynamics as dy
from . import geometry as geo
from . import kam
from . import spectral as sp
from .errors import ConfigurationError, KamtoriError, ResonanceWarning
from .ktf import read_ktf, write_ktf
from .models import MODELS, UnitCoordinates, make_model

logger = logging.getLogger("kamtori")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

DEFAULT_SEEDS = {"tokamak": (0.0, 0.35597895233), "qp-pendulum": (0.0, 2.0)}

# section -> key -> converter
SCHEMA = {
    "model": {"name": str, "eps": float, "eps1": float, "eps2": float, "eps3": float, "psi0": float},
    "frequency": {"omega": float, "cf_depth": int, "seed": str, "iterates": int, "step": float},
    "grid": {"ntheta": int, "nphi1": int, "nphi2": int},
    "newton": {"tol": float, "max_iter": int, "max_ntheta": int, "max_nphi": int},
    "integrator": {"tol": float},
    "init": {"mode": str, "points": int},
    "continuation": {"delta_eps": float, "path": str},
    "output": {"out": str},
    "run": {"threads": int},
}

INIT_MODES = ("flow-curve", "autonomous-orbit", "flat")


@dataclass
class RunConfig:
    """Validated settings of one run.

    ``params`` holds only the model parameters set explicitly; the remaining
    ones come from an input torus file or the model defaults.
    """

    model: str = "tokamak"
    params: dict = field(default_factory=dict)
    omega: float | None = None
    cf_depth: int | None = None
    seed: tuple | None = None
    iterates: int = 4000
    step: float = 0.5
    ntheta: int = 9
    nphi: list = field(default_factory=lambda: [9, 9])
    tol: float = 1e-12
    max_iter: int = 20
    max_ntheta: int = 12
    max_nphi: int = 11
    integrator_tol: float = dy.DEFAULT_TOL
    mode: str | None = None
    points: int | None = None
    delta_eps: float = 5e-5
    path: list = field(default_factory=list)
    out: str = "kamtori-run"
    threads: int = 1

    def validate(self) -> None:
        if self.model not in MODELS:
            raise ConfigurationError(f"unknown model {self.model!r}; choose from {sorted(MODELS)}")
        make_model(self.model, **self.params)
        for name, v in (("ntheta", self.ntheta), ("max_ntheta", self.max_ntheta), ("max_nphi", self.max_nphi),
                        *((f"nphi{i + 1}", x) for i, x in enumerate(self.nphi))):
            if not 1 <= v <= 16:
                raise ConfigurationError(f"{name} is a log2 grid size in [1, 16], got {v}")
        if self.tol <= 0 or self.integrator_tol <= 0:
            raise ConfigurationError("tolerances must be positive")
        if self.max_iter < 1 or self.iterates < 100 or self.threads < 1:
            raise ConfigurationError("max_iter, threads must be positive and iterates at least 100")
        if self.mode is not None and self.mode not in INIT_MODES:
            raise ConfigurationError(f"init mode must be one of {INIT_MODES}")
        if self.cf_depth is not None and self.cf_depth < 1:
            raise ConfigurationError("cf_depth must be at least 1")
        if self.delta_eps <= 0:
            raise ConfigurationError("delta_eps must be positive")
        if self.seed is not None and len(self.seed) != 2:
            raise ConfigurationError("seed takes two numbers")

    def build_model(self, base: dict | None = None):
        params = dict(base or {})
        params.update(self.params)
        known = set(model_settings(MODELS[self.model]()))
        return make_model(self.model, **{k: v for k, v in params.items() if k in known})

    def grid_shape(self, ell: int) -> tuple:
        return (2 ** self.ntheta,) + tuple(2 ** v for v in self.nphi[:ell])

    def policy(self, ell: int) -> kam.DoublingPolicy:
        return kam.DoublingPolicy(max_shape=(2 ** self.max_ntheta,) + (2 ** self.max_nphi,) * ell)


def model_settings(model) -> dict:
    """Parameters plus the extra settings (such as the reference flux) of a model."""
    return model.settings


def parse_floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigurationError(f"cannot read numbers from {text!r}") from exc


def parse_path(text: str) -> list:
    """``"eps2=0,eps3=0; eps2=0.32,eps3=0"`` -> list of waypoint dicts."""
    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        point = {}
        for item in chunk.split(","):
            if "=" not in item:
                raise ConfigurationError(f"waypoint entry {item!r} is not name=value")
            k, v = item.split("=", 1)
            try:
                point[k.strip()] = float(v)
            except ValueError as exc:
                raise ConfigurationError(f"waypoint value {v!r} is not a number") from exc
        out.append(point)
    return out


def read_config_file(path) -> dict:
    """Read a ``key = value`` file into ``{section: {key: value}}`` with type checks."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigurationError(f"cannot read configuration {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown configuration section [{section}]")
        out[section] = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
            try:
                out[section][key] = SCHEMA[section][key](raw)
            except ValueError as exc:
                raise ConfigurationError(f"bad value {raw!r} for {section}.{key}") from exc
    return out


def config_from_sections(sections: dict) -> RunConfig:
    cfg = RunConfig()
    m = sections.get("model", {})
    cfg.model = m.get("name", cfg.model)
    cfg.params = {k: v for k, v in m.items() if k != "name"}
    f = sections.get("frequency", {})
    cfg.omega = f.get("omega")
    cfg.cf_depth = f.get("cf_depth")
    if "seed" in f:
        cfg.seed = parse_floats(f["seed"])
    cfg.iterates = f.get("iterates", cfg.iterates)
    cfg.step = f.get("step", cfg.step)
    g = sections.get("grid", {})
    cfg.ntheta = g.get("ntheta", cfg.ntheta)
    cfg.nphi = [g.get("nphi1", cfg.nphi[0]), g.get("nphi2", cfg.nphi[1])]
    n = sections.get("newton", {})
    cfg.tol = n.get("tol", cfg.tol)
    cfg.max_iter = n.get("max_iter", cfg.max_iter)
    cfg.max_ntheta = n.get("max_ntheta", cfg.max_ntheta)
    cfg.max_nphi = n.get("max_nphi", cfg.max_nphi)
    cfg.integrator_tol = sections.get("integrator", {}).get("tol", cfg.integrator_tol)
    i = sections.get("init", {})
    cfg.mode = i.get("mode")
    cfg.points = i.get("points")
    c = sections.get("continuation", {})
    cfg.delta_eps = c.get("delta_eps", cfg.delta_eps)
    if "path" in c:
        cfg.path = parse_path(c["path"])
    cfg.out = sections.get("output", {}).get("out", cfg.out)
    cfg.threads = sections.get("run", {}).get("threads", cfg.threads)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file with [section] headers")
    common.add_argument("--model", choices=sorted(MODELS))
    for name in ("eps", "eps1", "eps2", "eps3", "psi0"):
        common.add_argument(f"--{name}", type=float)
    common.add_argument("--omega", type=float, help="internal frequency in native units")
    common.add_argument("--cf-depth", type=int, help="continued-fraction depth used to refine omega")
    common.add_argument("--seed", help="seed point 'x, y' in native coordinates")
    common.add_argument("--iterates", type=int, help="orbit samples for Birkhoff averages")
    common.add_argument("--ntheta", type=int, help="log2 of the internal grid size")
    common.add_argument("--nphi1", type=int, help="log2 of the first external grid size")
    common.add_argument("--nphi2", type=int, help="log2 of the second external grid size")
    common.add_argument("--max-ntheta", type=int, help="log2 cap of the internal grid size")
    common.add_argument("--max-nphi", type=int, help="log2 cap of the external grid sizes")
    common.add_argument("--tol", type=float, help="Newton tolerance on the invariance error")
    common.add_argument("--integrator-tol", type=float)
    common.add_argument("--max-iter", type=int)
    common.add_argument("--mode", choices=INIT_MODES, help="initial guess construction")
    common.add_argument("--points", type=int, help="section points for the flow-curve guess")
    common.add_argument("--delta-eps", type=float, help="continuation step")
    common.add_argument("--path", help="waypoints 'eps2=0,eps3=0; eps2=0.32,eps3=0'")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="FFT worker cap")

    parser = argparse.ArgumentParser(prog="kamtori", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kamtori {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("frequency", parents=[common], help="rotation number of a seed orbit")
    sub.add_parser("init-guess", parents=[common], help="build an initial torus")
    for name, text in (("refine", "Newton-correct a torus file"),
                       ("continue", "continue a converged torus along a parameter path"),
                       ("diagnose", "invariance error, torsion and spectrum of a torus file")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("input", help="KTF torus file")
    return parser


def resolve_config(args) -> RunConfig:
    sections = read_config_file(args.config) if args.config else {}
    cfg = config_from_sections(sections)
    if args.model:
        if args.model != cfg.model:
            cfg.params = {}
        cfg.model = args.model
    for name in ("eps", "eps1", "eps2", "eps3", "psi0"):
        v = getattr(args, name)
        if v is not None:
            cfg.params[name] = v
    simple = {"omega": "omega", "cf_depth": "cf_depth", "iterates": "iterates", "ntheta": "ntheta",
              "max_ntheta": "max_ntheta", "max_nphi": "max_nphi", "tol": "tol",
              "integrator_tol": "integrator_tol", "max_iter": "max_iter", "mode": "mode",
              "points": "points", "delta_eps": "delta_eps", "out": "out", "threads": "threads"}
    for arg, attr in simple.items():
        v = getattr(args, arg)
        if v is not None:
            setattr(cfg, attr, v)
    if args.nphi1 is not None:
        cfg.nphi[0] = args.nphi1
    if args.nphi2 is not None:
        cfg.nphi[1] = args.nphi2
    if args.seed is not None:
        cfg.seed = parse_floats(args.seed)
    if args.path is not None:
        cfg.path = parse_path(args.path)
    cfg.validate()
    return cfg


# -- run bookkeeping ------------------------------------------------------------

class Run:
    """Output directory, stage timers and the metadata record."""

    def __init__(self, command: str, cfg: RunConfig, argv):
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.meta = {
            "command": command,
            "argv": list(argv),
            "config": asdict(cfg),
            "versions": {"kamtori": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "stages": {},
            "results": {},
            "status": "running",
        }
        self._clock = time.perf_counter()

    def stage(self, name: str):
        run = self

        class _Stage:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.meta["stages"][name] = time.perf_counter() - self.t
                return False

        return _Stage()

    def finish(self, status: str) -> None:
        self.meta["status"] = status
        self.meta["wall_time"] = time.perf_counter() - self._clock
        with open(self.out / "metadata.json", "w") as fh:
            json.dump(self.meta, fh, indent=2, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return repr(obj)


def _unit_omega(cfg: RunConfig, model) -> float | None:
    if cfg.omega is None:
        return None
    w = dy.unit_omega(model, cfg.omega)
    if cfg.cf_depth:
        w = sp.refine_frequency_cf(w, cfg.cf_depth)
    return w


def _seed(cfg: RunConfig) -> np.ndarray:
    return np.array(cfg.seed if cfg.seed is not None else DEFAULT_SEEDS[cfg.model], dtype=float)


def measure_frequency(cfg: RunConfig, model):
    """Birkhoff estimate ``(omega_native, change)`` from the configured seed."""
    seed = _seed(cfg)
    if model.ell == 1:
        w_unit, change, _ = dy.stroboscopic_frequency(model, seed, cfg.iterates, cfg.integrator_tol)
        return dy.native_omega(model, w_unit), dy.native_omega(model, change)
    return dy.flow_frequency(model, seed, cfg.iterates * cfg.step, cfg.iterates, cfg.integrator_tol)


# -- commands -------------------------------------------------------------------

def cmd_frequency(cfg: RunConfig, run: Run) -> int:
    model = cfg.build_model()
    with run.stage("orbit"):
        omega, change = measure_frequency(cfg, model)
    units = UnitCoordinates(model)
    freq = sp.FrequencyVector([dy.unit_omega(model, omega)], units.alpha)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ResonanceWarning)
        gamma = sp.diophantine_estimate(freq, freq.tau, 50)
    resonant = gamma < 1e-8 or any(issubclass(w.category, ResonanceWarning) for w in caught)
    print(f"omega = {omega:.16g} (native units)")
    print(f"birkhoff change = {change:.3e}")
    print(f"gamma estimate = {gamma:.6e} (tau = {freq.tau:g}, |k|_1 <= 50)")
    if resonant:
        print("warning: frequency is resonant or nearly so")
    run.meta["results"] = {"omega": omega, "change": change, "gamma": gamma, "resonant": resonant}
    return EXIT_OK


def cmd_init_guess(cfg: RunConfig, run: Run) -> int:
    model = cfg.build_model()
    units = UnitCoordinates(model)
    mode = cfg.mode or ("flow-curve" if model.ell == 1 else "autonomous-orbit")
    shape = cfg.grid_shape(model.ell)
    seed = _seed(cfg)
    omega_u = _unit_omega(cfg, model)
    with run.stage("construction"):
        if mode == "flow-curve":
            if omega_u is None:
                w, _ = measure_frequency(cfg, model)
                omega_u = dy.unit_omega(model, w)
            curve = dy.section_curve(model, seed, omega_u, cfg.points or shape[0], cfg.integrator_tol)
            K = dy.build_initial_torus_flow(model, curve, omega_u, shape[0], shape[1], cfg.integrator_tol)
        elif mode == "autonomous-orbit":
            K = dy.build_initial_torus_autonomous(model, seed, shape[0], shape[1:], cfg.integrator_tol)
            omega_u = float(K.freq.omega[0])
        else:
            if omega_u is None:
                raise ConfigurationError("the flat guess needs --omega")
            freq = sp.FrequencyVector([omega_u], units.alpha)
            K = geo.TorusEmbedding.flat([seed[1]], [[1]], freq, shape)
    K.params = model_settings(model)
    with run.stage("error"):
        _, err = kam.invariance_error(K, units)
    path = write_ktf(run.out / "initial.ktf", K)
    print(f"initial torus {path} on grid {'x'.join(map(str, K.shape))}: |E| = {err:.6e}")
    run.meta["results"] = {"file": str(path), "error": err, "mode": mode, "shape": K.shape,
                           "omega_native": dy.native_omega(model, omega_u)}
    return EXIT_OK


def _load(cfg: RunConfig, path):
    K = read_ktf(path)
    model = cfg.build_model(K.params)
    K.params = model_settings(model)
    return K, model


def _write_diagnostics(run: Run, K) -> ct.SpectralDiagnostics:
    diag = ct.spectral_diagnostics(K)
    diag.profile_csv(run.out / "spectrum.csv")
    run.meta["results"]["decay_slope"] = diag.slope
    return diag


def cmd_refine(cfg: RunConfig, run: Run, input_path) -> int:
    K, model = _load(cfg, input_path)
    units = UnitCoordinates(model)
    if cfg.omega is not None:
        K.freq = sp.FrequencyVector([_unit_omega(cfg, model)], K.freq.alpha)
    try:
        with run.stage("newton"):
            K, report = kam.newton_iterate(K, units, cfg.tol, cfg.max_iter, cfg.policy(model.ell))
    except KamtoriError as exc:
        report = getattr(exc, "report", None)
        if report is not None:
            report.to_csv(run.out / "newton.csv")
            run.meta["results"]["errors"] = report.errors
        embedding = getattr(exc, "embedding", None)
        if embedding is not None:
            write_ktf(run.out / "last.ktf", embedding)
        raise
    report.to_csv(run.out / "newton.csv")
    path = write_ktf(run.out / "refined.ktf", K)
    run.meta["results"].update({"file": str(path), "status": report.status, "iterations": report.iterations,
                                "errors": report.errors, "shape": K.shape, "events": report.events})
    _write_diagnostics(run, K)
    print(f"{report.status} in {report.iterations} steps: |E| = {report.final_error:.3e} "
          f"on grid {'x'.join(map(str, K.shape))} -> {path}")
    return EXIT_OK


def cmd_continue(cfg: RunConfig, run: Run, input_path) -> int:
    K, model = _load(cfg, input_path)
    if not cfg.path:
        raise ConfigurationError("continuation needs --path")
    path = list(cfg.path)
    start = {k: getattr(model, k) for k in path[0]}
    # a single waypoint is the end point; the start is the torus's own parameters
    if len(path) == 1 and any(not math.isclose(start[k], path[0][k]) for k in start):
        path = [start] + path
    family_dir = run.out / "family"
    family_dir.mkdir(exist_ok=True)

    def save(torus, index):
        return str(write_ktf(family_dir / f"torus_{index:04d}.ktf", torus))

    with run.stage("continuation"):
        record = ct.continue_family(model, K, path, cfg.delta_eps, cfg.tol, cfg.max_iter,
                                    cfg.policy(model.ell), save=save)
    record.to_csv(run.out / "family.csv")
    results = {"status": record.status, "members": len(record), "message": record.message,
               "last": model.with_params(**record.entries[-1].params).settings}
    names = ct.ParameterPath(path).names
    if len(names) == 1 and len(record) >= 8:
        with run.stage("fit"), warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fit = ct.family_blowup_fit(record, names[0])
        results["fit"] = fit.as_dict()
        results["fit_warnings"] = [str(w.message) for w in caught]
        with open(run.out / "fit.json", "w") as fh:
            json.dump(fit.as_dict(), fh, indent=2)
        print(f"blow-up fit: eps_c = {fit.eps_c:.7g}, slope = {fit.slope:.6g}, r = {fit.correlation:.6f}")
    run.meta["results"] = results
    print(f"family {record.status}: {len(record)} tori up to {record.entries[-1].params}")
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig, run: Run, input_path) -> int:
    K, model = _load(cfg, input_path)
    units = UnitCoordinates(model)
    with run.stage("error"):
        _, err = kam.invariance_error(K, units)
    with run.stage("frame"):
        frame = kam.frame_and_torsion(K, units)
    res = {"error": err, "T_avg": frame.T_avg, "norm_L": geo.sup_norm(frame.L), "norm_T": geo.sup_norm(frame.T),
           "sobolev_4": K.sobolev_norm(4.0), "shape": K.shape}
    run.meta["results"] = res
    diag = _write_diagnostics(run, K)
    print(f"|E| = {err:.6e}  <T> = {kam._fmt_matrix(frame.T_avg)}  |L| = {res['norm_L']:.6e}  "
          f"|T| = {res['norm_T']:.6e}  |K|_4 = {res['sobolev_4']:.6e}  decay slope = {diag.slope:.6g}")
    return EXIT_OK


COMMANDS = {"frequency": cmd_frequency, "init-guess": cmd_init_guess, "refine": cmd_refine,
            "continue": cmd_continue, "diagnose": cmd_diagnose}


def configure_logging() -> None:
    level = os.environ.get("KAMTORI_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    sp.set_threads(cfg.threads)
    run = Run(args.command, cfg, argv)
    handler = COMMANDS[args.command]
    try:
        if args.command in ("refine", "continue", "diagnose"):
            code = handler(cfg, run, args.input)
        else:
            code = handler(cfg, run)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        run.meta["error"] = str(exc)
        run.finish("config-error")
        return EXIT_CONFIG
    except KamtoriError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        run.meta["error"] = f"{type(exc).__name__}: {exc}"
        report = getattr(exc, "report", None)
        run.finish(report.status if report is not None else "failed")
        return EXIT_NUMERICAL
    run.finish("ok")
    return code


if __name__ == "__main__":
    sys.exit(main())
