"""Command-line driver: ``nhaah <subcommand> --config cfg.json --out dir``.

Every artifact carries the resolved configuration and the package version;
wall-clock timestamps go only to ``run.log`` so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__, plotting
from .laser import (
    IntegrationError,
    LossModulatedConfig,
    PumpModulatedConfig,
    SimConfig,
    linear_threshold,
    simulate,
    write_laser_spectrum_csv,
    write_sweep_csv,
)
from .model import DomainSpec, LatticeSpec, ModulationSpec, Rational, build_open_hamiltonian
from .spectral import (
    EigenSolverError,
    delta_sweep,
    eigendecompose,
    lattice_zero_modes,
    protected_anchors,
    trajectory_sweep,
    write_spectrum_csv,
    write_wavefunction_csv,
)
from .topology import TopologyError, phase_diagram, spoke_census, write_phase_diagram_csv

EXIT_OK, EXIT_PHYSICS, EXIT_CONFIG = 0, 1, 2
THREADS_ENV = "NHAAH_THREADS"

log = logging.getLogger("nhaah")


class ConfigError(ValueError):
    pass


# -- schema -----------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _check_alpha(v: str) -> str:
    Rational.parse(v)
    return v


class DomainParams(_Strict):
    alpha: str
    V: float
    delta_pi: float
    length: int = Field(ge=1)

    _alpha = field_validator("alpha")(_check_alpha)

    def spec(self) -> DomainSpec:
        return DomainSpec(ModulationSpec(self.V, Rational.parse(self.alpha), self.delta_pi * math.pi), self.length)


class SpectrumParams(_Strict):
    alpha: str
    V: float = Field(ge=0)
    n_sites: int = Field(200, ge=2)
    n_delta: int = Field(200, ge=1)
    eps_re: float = Field(1e-6, gt=0)
    profile_delta_pi: list[float] = []

    _alpha = field_validator("alpha")(_check_alpha)


class PhaseDiagramParams(_Strict):
    alphas: list[str] = Field(min_length=1)
    v_max: float = Field(2.0, gt=0)
    nv: int = Field(40, ge=8)
    ndelta: int = Field(40, ge=8)
    nk: int = Field(64, ge=4)
    ring_v: float | None = 1.5
    with_global: bool = True

    @field_validator("alphas")
    @classmethod
    def _alphas(cls, v):
        for a in v:
            _check_alpha(a)
        return v


class DomainWallParams(_Strict):
    domains: list[DomainParams] = Field(min_length=2)
    eps_re: float = Field(1e-6, gt=0)


class TrajectoryParams(_Strict):
    alpha: str
    v_sin: float = 2.0
    v_cos_min: float = -1.5
    v_cos_max: float = 1.5
    n_points: int = Field(61, ge=2)
    n_sites: int = Field(200, ge=2)
    eps_re: float = Field(1e-6, gt=0)

    _alpha = field_validator("alpha")(_check_alpha)


class PumpParams(_Strict):
    alpha: str
    delta_pi: float
    passive_loss: float = 3.0
    lattice_size: int = 48

    _alpha = field_validator("alpha")(_check_alpha)


class LossParams(_Strict):
    domains: list[DomainParams] = Field(min_length=2)
    margin: float = 0.5


class SimParams(_Strict):
    dt: float = 0.01
    t_end: float = 5000.0
    sample_stride: int = 50
    init_scale: float = 0.01
    average_window: tuple[float, float] = (2000.0, 5000.0)


class LaserParams(_Strict):
    mode: Literal["pump", "loss"]
    pump: PumpParams | None = None
    loss: LossParams | None = None
    gammas: list[float] = Field(min_length=1)
    spectra_at: list[float] = []
    sim: SimParams = SimParams()

    @model_validator(mode="after")
    def _layout(self):
        if self.mode == "pump" and self.pump is None:
            raise ValueError("mode 'pump' needs a 'pump' block")
        if self.mode == "loss" and self.loss is None:
            raise ValueError("mode 'loss' needs a 'loss' block")
        return self


PARAMS = {
    "spectrum": SpectrumParams,
    "phase-diagram": PhaseDiagramParams,
    "domain-wall": DomainWallParams,
    "trajectory": TrajectoryParams,
    "laser": LaserParams,
}


class ExperimentConfig(_Strict):
    kind: str | None = None
    parameters: dict[str, Any]
    output_dir: str | None = None
    seed: int | None = Field(None, ge=0, lt=2**64)


def load_config(kind: str, path: str | Path) -> tuple[ExperimentConfig, BaseModel]:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        exp = ExperimentConfig.model_validate(raw)
        if exp.kind is not None and exp.kind != kind:
            raise ConfigError(f"config kind {exp.kind!r} does not match subcommand {kind!r}")
        params = PARAMS[kind].model_validate(exp.parameters)
    except ValidationError as exc:
        raise ConfigError(f"config {path} failed validation:\n{exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return exp, params


# -- provenance -------------------------------------------------------------


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class Run:
    """Output directory plus the provenance stamped into every file."""

    def __init__(self, out: Path, kind: str, resolved: dict[str, Any]):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.version = version_string()
        self.resolved = {"kind": kind, **resolved}
        self.config_json = json.dumps(self.resolved, sort_keys=True)
        self.files: list[Path] = []

    @property
    def header(self) -> list[str]:
        return [f"nhaah {self.version}", f"config {self.config_json}"]

    @property
    def description(self) -> str:
        return f"nhaah {self.version}; config {self.config_json}"

    def path(self, name: str) -> Path:
        p = self.out / name
        self.files.append(p)
        return p

    def write_json(self, name: str, body: dict[str, Any]) -> Path:
        p = self.path(name)
        doc = {"version": self.version, "config": self.resolved, **body}
        p.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
        return p


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    return str(o)


def _threads(arg: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer")
    return 1


# -- experiments ------------------------------------------------------------


def run_spectrum(p: SpectrumParams, run: Run, threads: int) -> None:
    m = ModulationSpec(p.V, Rational.parse(p.alpha), 0.0)
    deltas = 2 * np.pi * np.arange(p.n_delta) / p.n_delta
    points = delta_sweep(m, p.n_sites, deltas, p.eps_re, workers=threads)
    write_spectrum_csv(points, run.path("spectrum.csv"), run.header)
    plotting.spectrum_vs_delta(points, run.path("spectrum.svg"), run.description)
    windows = [pt.delta for pt in points if pt.protected]
    profiles = []
    for dpi in p.profile_delta_pi:
        lat = LatticeSpec.single(ModulationSpec(p.V, m.alpha, dpi * math.pi), p.n_sites)
        es = eigendecompose(build_open_hamiltonian(lat))
        for k, z in enumerate(lattice_zero_modes(lat, p.eps_re, es)):
            stem = f"zero_mode_delta{dpi:g}pi_{k}"
            psi = es.normalized_right(z.index)
            write_wavefunction_csv(psi, run.path(stem + ".csv"), run.header)
            plotting.wavefunction(psi, run.path(stem + ".svg"), description=run.description)
            profiles.append(_zero_mode_summary(z) | {"delta_pi": dpi, "file": stem + ".csv"})
    run.write_json(
        "summary.json",
        {"protected_deltas": windows, "zero_mode_profiles": profiles},
    )


def _zero_mode_summary(z) -> dict[str, Any]:
    return {
        "anchor": str(z.anchor),
        "energy": [z.energy.real, z.energy.imag],
        "ipr": z.ipr,
        "decay_length": z.decay_length,
        "fit_residual": z.fit_residual,
        "ct_phase": z.ct_phase,
        "ct_residual": z.ct_residual,
    }


def run_phase_diagram(p: PhaseDiagramParams, run: Run, threads: int) -> None:
    census = {}
    for a in p.alphas:
        d = phase_diagram(a, p.v_max, p.nv, p.ndelta, nk=p.nk, with_global=p.with_global, workers=threads)
        tag = a.replace("/", "_")
        write_phase_diagram_csv(d, run.path(f"phase_{tag}.csv"), run.header)
        plotting.phase_diagram(d, run.path(f"phase_{tag}.svg"), run.description)
        entry: dict[str, Any] = {"diagnostics": {f"{i},{j}": msg for (i, j), msg in sorted(d.diagnostics.items())}}
        if p.ring_v is not None:
            count, alternating = spoke_census(d, p.ring_v)
            entry |= {"spokes": count, "alternating": alternating}
        census[a] = entry
    run.write_json("summary.json", {"census": census})


def run_domain_wall(p: DomainWallParams, run: Run, threads: int) -> None:
    lat = LatticeSpec(tuple(d.spec() for d in p.domains))
    lat.require_even()
    es = eigendecompose(build_open_hamiltonian(lat))
    zms = lattice_zero_modes(lat, p.eps_re, es)
    E = es.eigenvalues
    wall_modes = [z for z in zms if z.anchor.kind == "wall"]
    imax = float(E.imag.max())
    with run.path("spectrum.csv").open("w") as fh:
        for line in run.header:
            fh.write(f"# {line}\n")
        fh.write("index,re_E,im_E,is_zero_mode\n")
        zi = {z.index for z in zms}
        for i, e in enumerate(E):
            fh.write(f"{i},{e.real!r},{e.imag!r},{int(i in zi)}\n")
    plotting.complex_spectrum(E, [z.index for z in wall_modes], run.path("spectrum.svg"), run.description)
    for k, z in enumerate(zms):
        stem = f"zero_mode_{k}"
        psi = es.normalized_right(z.index)
        write_wavefunction_csv(psi, run.path(stem + ".csv"), run.header)
        plotting.wavefunction(psi, run.path(stem + ".svg"), lat.walls, run.description)
    run.write_json(
        "summary.json",
        {
            "walls": lat.walls,
            "zero_modes": [_zero_mode_summary(z) for z in zms],
            "wall_mode_present": bool(wall_modes),
            "wall_mode_count": len(wall_modes),
            "wall_mode_has_max_im": bool(wall_modes) and any(abs(z.energy.imag - imax) < 1e-9 for z in wall_modes),
            "protected_anchors": [str(a) for a in protected_anchors(zms)],
        },
    )


def run_trajectory(p: TrajectoryParams, run: Run, threads: int) -> None:
    xs = np.linspace(p.v_cos_min, p.v_cos_max, p.n_points)
    res = trajectory_sweep(Rational.parse(p.alpha), p.n_sites, p.v_sin, xs, p.eps_re)
    pts = [pt for _, pt in res]
    write_spectrum_csv(pts, run.path("trajectory.csv"), run.header)
    plotting.trajectory_spectrum(xs, pts, run.path("trajectory.svg"), run.description)
    rows = []
    for x, pt in res:
        rows.append(
            {
                "v_cos": x,
                "delta": pt.delta,
                "gapped": pt.gap.gapped,
                "zero_modes": [
                    _zero_mode_summary(z) | {"bulk_separation": z.bulk_separation} for z in pt.zero_modes
                ],
            }
        )
    run.write_json("summary.json", {"points": rows})


def run_laser(p: LaserParams, run: Run, threads: int, seed: int) -> None:
    if p.mode == "pump":
        q = p.pump
        base = PumpModulatedConfig(0.0, Rational.parse(q.alpha), q.delta_pi * math.pi, q.passive_loss, q.lattice_size)
        walls: list[int] = []
    else:
        lat = LatticeSpec(tuple(d.spec() for d in p.loss.domains))
        base = LossModulatedConfig.from_lattice(lat, 0.0, p.loss.margin)
        walls = lat.walls
    sim = SimConfig(
        p.sim.dt, p.sim.t_end, p.sim.sample_stride, seed, p.sim.init_scale, p.sim.average_window
    )
    threshold = linear_threshold(base)
    reports, failures = [], {}
    def one(g):
        try:
            return simulate(base.with_pump(g), sim)[0]
        except IntegrationError as exc:
            return exc

    gammas = list(p.gammas)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, gammas))
    else:
        results = [one(g) for g in gammas]
    for g, r in zip(gammas, results):
        if isinstance(r, Exception):
            failures[repr(g)] = str(r)
        else:
            reports.append(r)
    write_sweep_csv(reports, run.path("sweep.csv"), run.header)
    plotting.laser_sweep(
        [r.gamma_pump for r in reports], [r.i_out for r in reports],
        [r.mode_class for r in reports], run.path("sweep.svg"), run.description,
    )
    by_gamma = {r.gamma_pump: r for r in reports}
    for g in p.spectra_at:
        r = by_gamma.get(float(g)) or simulate(base.with_pump(g), sim)[0]
        tag = f"{g:g}"
        write_laser_spectrum_csv(r.spectrum, run.path(f"spectrum_G{tag}.csv"), run.header)
        plotting.laser_spectrum(r.spectrum.omega, r.spectrum.power, run.path(f"spectrum_G{tag}.svg"), run.description)
        plotting.intensity_profile(r.spatial_profile, run.path(f"profile_G{tag}.svg"), walls, run.description)
    run.write_json(
        "summary.json",
        {
            "linear_threshold": threshold,
            "offset": getattr(base, "offset", None),
            "i_out_normalization": "per-site mean of |psi_n|^2",
            "peak_rule": "peaks above 10% of the strongest; one peak = SingleMode",
            "runs": [
                {
                    "gamma": r.gamma_pump, "seed": r.seed, "i_out": r.i_out,
                    "mode_class": str(r.mode_class), "peaks": list(r.peak_omegas),
                    "anchor_site": r.anchor_site,
                }
                for r in reports
            ],
            "failures": failures,
        },
    )


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nhaah", description="Imaginary AAH lattice experiments.")
    ap.add_argument("--version", action="version", version=f"nhaah {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in PARAMS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", help="output directory (overrides output_dir in the config)")
        sp.add_argument("--seed", type=int, help="RNG seed override (laser runs)")
        sp.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    return ap


def _setup_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    kind = args.command
    try:
        exp, params = load_config(kind, args.config)
        threads = _threads(args.threads)
        seed = args.seed if args.seed is not None else (exp.seed if exp.seed is not None else 0)
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed {seed} does not fit in 64 bits")
        out = Path(args.out or exp.output_dir or f"nhaah-{kind}")
        resolved = {"parameters": params.model_dump(mode="json")}
        if kind == "laser":
            resolved["seed"] = seed
            SimConfig(  # validate timing before any work
                params.sim.dt, params.sim.t_end, params.sim.sample_stride, seed,
                params.sim.init_scale, params.sim.average_window,
            )
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        run = Run(out, kind, resolved)
        handler = _setup_log(out)
    except OSError as exc:
        print(f"I/O error: cannot use output directory {out}: {exc}", file=sys.stderr)
        return EXIT_PHYSICS
    log.info("start %s version=%s threads=%d", kind, run.version, threads)
    try:
        if kind == "spectrum":
            run_spectrum(params, run, threads)
        elif kind == "phase-diagram":
            run_phase_diagram(params, run, threads)
        elif kind == "domain-wall":
            run_domain_wall(params, run, threads)
        elif kind == "trajectory":
            run_trajectory(params, run, threads)
        else:
            run_laser(params, run, threads, seed)
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        print(f"I/O error: {exc.filename or ''}: {exc}", file=sys.stderr)
        return EXIT_PHYSICS
    except (TopologyError, EigenSolverError, IntegrationError, ValueError, np.linalg.LinAlgError) as exc:
        log.error("failed: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PHYSICS
    finally:
        log.info("finished %s", kind)
        log.removeHandler(handler)
        handler.close()
    for f in run.files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
