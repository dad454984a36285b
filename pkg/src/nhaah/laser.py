"""Saturable-gain laser dynamics on imaginary AAH lattices.

Two gain/loss layouts are supported:

* pump-modulated: ``V_n = Gamma lambda_n / (1 + |psi_n|^2) - gamma`` with
  ``lambda_n = [1 + sin(2 pi alpha n + delta)] / 2``;
* loss-modulated: ``V_n = Gamma / (1 + |psi_n|^2) + gamma_n - gamma`` with
  ``gamma_n`` the (possibly multi-domain) modulation profile.

The field obeys ``i dpsi/dt = H(psi) psi`` where ``H`` has unit hopping and
diagonal ``i V_n``.  Time stepping is fixed-step RK4 compiled with numba;
initial data are drawn from ``numpy.random.Generator(Philox(seed))`` as
``standard_normal((2, N))`` (row 0 real parts, row 1 imaginary parts),
scaled by ``init_scale``.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numba
import numpy as np
from scipy.optimize import brentq
from scipy.signal import find_peaks

from .model import (
    SITE_ORIGIN,
    LatticeSpec,
    Rational,
    potential_profile,
)
from .spectral import lattice_zero_modes

#: Fields with any |psi_n| above this are treated as a blow-up.
BLOWUP_AMPLITUDE = 1e6
#: Below this max |psi_n|^2 the field is set to exactly zero (avoids denormal arithmetic).
DENORMAL_FLOOR = 1e-200
#: i_out below this is reported as below threshold.
LASING_FLOOR = 1e-6
#: Secondary peaks above this fraction of the strongest one make a run multimode.
PEAK_FRACTION = 0.1


class IntegrationError(RuntimeError):
    def __init__(self, message: str, time: float):
        super().__init__(f"{message} at t={time:.6g}")
        self.time = time


class ModeClass(enum.Enum):
    BELOW_THRESHOLD = "BelowThreshold"
    SINGLE_MODE = "SingleMode"
    MULTI_MODE = "MultiMode"

    def __str__(self) -> str:
        return self.value


def pump_profile(alpha: Rational | float, delta: float, n) -> np.ndarray | float:
    """``[1 + sin(2 pi alpha n + delta)] / 2``.

    For a :class:`Rational` alpha the phase ``q n mod p`` is reduced in
    integers, so the profile is exactly p-periodic.
    """
    if isinstance(alpha, Rational):
        angle = 2 * math.pi * ((alpha.q * np.asarray(n, dtype=np.int64)) % alpha.p) / alpha.p
    else:
        angle = 2 * math.pi * float(alpha) * np.asarray(n, dtype=float)
    out = 0.5 * (1.0 + np.sin(angle + delta))
    return float(out) if np.ndim(out) == 0 else out


# -- configurations ---------------------------------------------------------


@dataclass(frozen=True)
class PumpModulatedConfig:
    gamma_pump: float
    alpha: Rational
    delta: float
    passive_loss: float = 3.0
    lattice_size: int = 48

    def __post_init__(self):
        if self.lattice_size < 2 or self.lattice_size % 2:
            raise ValueError(f"lattice_size must be even and >= 2, got {self.lattice_size}")
        if isinstance(self.alpha, str):
            object.__setattr__(self, "alpha", Rational.parse(self.alpha))

    @property
    def n_sites(self) -> int:
        return self.lattice_size

    @property
    def pump(self) -> np.ndarray:
        return pump_profile(self.alpha, self.delta, np.arange(self.lattice_size) + SITE_ORIGIN)

    def gain_and_base(self) -> tuple[np.ndarray, np.ndarray]:
        """Saturable gain coefficients and the unsaturated remainder of ``V_n``."""
        return self.gamma_pump * self.pump, np.full(self.lattice_size, -self.passive_loss)

    def with_pump(self, gamma_pump: float) -> "PumpModulatedConfig":
        return replace(self, gamma_pump=float(gamma_pump))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "pump_modulated",
            "gamma_pump": self.gamma_pump,
            "alpha": str(self.alpha),
            "delta": self.delta,
            "passive_loss": self.passive_loss,
            "lattice_size": self.lattice_size,
        }


@dataclass(frozen=True)
class LossModulatedConfig:
    """Uniform pump over a lattice whose linear loss follows ``lattice``'s modulation.

    ``offset`` is the constant loss gamma; :meth:`from_lattice` sets it to
    ``Im(E0) + margin`` for the wall-anchored zero mode E0.
    """

    gamma_pump: float
    lattice: LatticeSpec
    offset: float

    @property
    def n_sites(self) -> int:
        return self.lattice.n_sites

    @property
    def loss_profile(self) -> np.ndarray:
        return potential_profile(self.lattice)

    def gain_and_base(self) -> tuple[np.ndarray, np.ndarray]:
        return np.full(self.n_sites, float(self.gamma_pump)), self.loss_profile - self.offset

    def with_pump(self, gamma_pump: float) -> "LossModulatedConfig":
        return replace(self, gamma_pump=float(gamma_pump))

    @classmethod
    def from_lattice(
        cls, lattice: LatticeSpec, gamma_pump: float, margin: float = 0.5
    ) -> "LossModulatedConfig":
        return cls(float(gamma_pump), lattice, wall_mode_energy(lattice).imag + margin)

    def offset_mismatch(self, margin: float = 0.5) -> float:
        """``|offset - (Im E0 + margin)|`` recomputed from the linear spectrum."""
        return abs(self.offset - (wall_mode_energy(self.lattice).imag + margin))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "loss_modulated",
            "gamma_pump": self.gamma_pump,
            "offset": self.offset,
            "lattice": self.lattice.to_dict(),
        }


LaserConfig = PumpModulatedConfig | LossModulatedConfig


def wall_mode_energy(lattice: LatticeSpec, eps_re: float = 1e-6) -> complex:
    """Energy of the wall-anchored zero mode (largest Im(E) if several)."""
    walls = [z for z in lattice_zero_modes(lattice, eps_re) if z.anchor.kind == "wall"]
    if not walls:
        raise ValueError("lattice has no wall-anchored zero mode")
    return max(walls, key=lambda z: z.energy.imag).energy


def config_from_dict(d: dict[str, Any]) -> LaserConfig:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "pump_modulated":
        return PumpModulatedConfig(
            float(d["gamma_pump"]), Rational.parse(d["alpha"]), float(d["delta"]),
            float(d.get("passive_loss", 3.0)), int(d.get("lattice_size", 48)),
        )
    if kind == "loss_modulated":
        return LossModulatedConfig(
            float(d["gamma_pump"]), LatticeSpec.from_dict(d["lattice"]), float(d["offset"])
        )
    raise ValueError(f"unknown laser config kind {kind!r}")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    t_end: float = 5000.0
    sample_stride: int = 50
    seed: int = 0
    init_scale: float = 0.01
    average_window: tuple[float, float] = (2000.0, 5000.0)

    def __post_init__(self):
        object.__setattr__(self, "average_window", tuple(float(x) for x in self.average_window))
        if not (self.dt > 0 and self.t_end > 0 and self.sample_stride >= 1):
            raise ValueError("dt, t_end and sample_stride must be positive")
        if abs(self.n_steps * self.dt - self.t_end) > 1e-9 * self.t_end:
            raise ValueError(f"t_end={self.t_end} is not a whole number of steps dt={self.dt}")
        t1, t2 = self.average_window
        if not 0 <= t1 < t2 <= self.t_end:
            raise ValueError(f"average window {self.average_window} not inside [0, {self.t_end}]")
        if math.pi / self.sample_step < 5.0:
            raise ValueError(
                f"sample step {self.sample_step} cannot resolve |omega| = 5 (need dt*stride <= pi/5)"
            )
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def sample_step(self) -> float:
        return self.dt * self.sample_stride

    @property
    def n_samples(self) -> int:
        return self.n_steps // self.sample_stride + 1

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["average_window"] = list(self.average_window)
        return d


def initial_field(n_sites: int, seed: int, scale: float = 0.01) -> np.ndarray:
    z = np.random.Generator(np.random.Philox(int(seed))).standard_normal((2, n_sites))
    return (z[0] + 1j * z[1]) * scale


def config_fingerprint(cfg: LaserConfig, sim: SimConfig | None = None) -> str:
    body = {"laser": cfg.to_dict(), "sim": sim.to_dict() if sim else None}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


# -- dynamics ---------------------------------------------------------------


def effective_potential(psi: np.ndarray, cfg: LaserConfig) -> np.ndarray:
    gain, base = cfg.gain_and_base()
    return gain / (1.0 + np.abs(psi) ** 2) + base


def nonlinear_hamiltonian(psi: np.ndarray, cfg: LaserConfig) -> np.ndarray:
    """Dense ``H(psi)``: unit hopping, diagonal ``i V_n(psi)``."""
    n = cfg.n_sites
    H = np.diag(1j * effective_potential(np.asarray(psi), cfg))
    i = np.arange(n - 1)
    H[i, i + 1] = H[i + 1, i] = 1.0
    return H


def linear_hamiltonian(cfg: LaserConfig) -> np.ndarray:
    """Small-signal limit ``H(0)``."""
    return nonlinear_hamiltonian(np.zeros(cfg.n_sites, complex), cfg)


def nonlinear_rhs(psi: np.ndarray, cfg: LaserConfig) -> np.ndarray:
    """``dpsi/dt = -i H(psi) psi``."""
    psi = np.asarray(psi, dtype=complex)
    if not np.all(np.isfinite(psi)):
        raise IntegrationError("non-finite field", math.nan)
    h = 1j * effective_potential(psi, cfg) * psi
    h[1:] += psi[:-1]
    h[:-1] += psi[1:]
    return -1j * h


@numba.njit(cache=True, nogil=True)
def _rhs(psi, gain, base, out):
    n_sites = psi.shape[0]
    for n in range(n_sites):
        a = psi[n]
        v = gain[n] / (1.0 + (a.real * a.real + a.imag * a.imag)) + base[n]
        h = 1j * v * a
        if n > 0:
            h += psi[n - 1]
        if n < n_sites - 1:
            h += psi[n + 1]
        out[n] = -1j * h


@numba.njit(cache=True, nogil=True)
def _rk4(psi0, gain, base, dt, n_steps, stride, blowup, floor):
    """Returns (samples, status, failing step); status 0 ok, 1 blow-up, 2 non-finite."""
    n_sites = psi0.shape[0]
    out = np.zeros((n_steps // stride + 1, n_sites), np.complex128)
    psi = psi0.copy()
    k1 = np.empty(n_sites, np.complex128)
    k2 = np.empty_like(k1)
    k3 = np.empty_like(k1)
    k4 = np.empty_like(k1)
    tmp = np.empty_like(k1)
    out[0] = psi
    s = 1
    b2 = blowup * blowup
    for i in range(1, n_steps + 1):
        _rhs(psi, gain, base, k1)
        for n in range(n_sites):
            tmp[n] = psi[n] + 0.5 * dt * k1[n]
        _rhs(tmp, gain, base, k2)
        for n in range(n_sites):
            tmp[n] = psi[n] + 0.5 * dt * k2[n]
        _rhs(tmp, gain, base, k3)
        for n in range(n_sites):
            tmp[n] = psi[n] + dt * k3[n]
        _rhs(tmp, gain, base, k4)
        for n in range(n_sites):
            psi[n] += dt / 6.0 * (k1[n] + 2.0 * k2[n] + 2.0 * k3[n] + k4[n])
        if i % stride == 0:
            peak = 0.0
            for n in range(n_sites):
                a2 = psi[n].real * psi[n].real + psi[n].imag * psi[n].imag
                if not np.isfinite(a2):
                    return out, 2, i
                if a2 > peak:
                    peak = a2
            if peak > b2:
                return out, 1, i
            if peak < floor:
                psi[:] = 0.0
            out[s] = psi
            s += 1
    return out, 0, n_steps


@dataclass(frozen=True)
class TimeTrace:
    times: np.ndarray
    fields: np.ndarray  # (n_samples, n_sites)
    fingerprint: str
    dt: float
    sample_stride: int

    @property
    def sample_step(self) -> float:
        return self.dt * self.sample_stride

    def window(self, t1: float, t2: float) -> np.ndarray:
        if self.times[0] > t1 + 1e-9 or self.times[-1] < t2 - 1e-9:
            raise ValueError(
                f"trace covers [{self.times[0]}, {self.times[-1]}], not the window [{t1}, {t2}]"
            )
        eps = 1e-9 * max(1.0, t2)
        return (self.times >= t1 - eps) & (self.times <= t2 + eps)


def integrate(cfg: LaserConfig, sim: SimConfig = SimConfig(), psi0: np.ndarray | None = None) -> TimeTrace:
    """Fixed-step RK4 evolution from the seeded random initial field."""
    if psi0 is None:
        psi0 = initial_field(cfg.n_sites, sim.seed, sim.init_scale)
    gain, base = cfg.gain_and_base()
    samples, status, step = _rk4(
        np.ascontiguousarray(psi0, np.complex128),
        np.ascontiguousarray(gain, np.float64),
        np.ascontiguousarray(base, np.float64),
        float(sim.dt), sim.n_steps, sim.sample_stride,
        BLOWUP_AMPLITUDE, DENORMAL_FLOOR,
    )
    if status:
        what = "field amplitude exceeded 1e6" if status == 1 else "non-finite field"
        raise IntegrationError(what, step * sim.dt)
    times = np.arange(sim.n_samples) * sim.sample_step
    return TimeTrace(times, samples, config_fingerprint(cfg, sim), sim.dt, sim.sample_stride)


# -- analysis ---------------------------------------------------------------


def output_intensity(
    trace: TimeTrace, window: tuple[float, float] = (2000.0, 5000.0), per_site: bool = True
) -> float:
    """Time average of the per-site mean (or, with ``per_site=False``, the sum) of ``|psi_n|^2``."""
    w = trace.window(*window)
    intensity = np.abs(trace.fields[w]) ** 2
    per_sample = intensity.mean(axis=1) if per_site else intensity.sum(axis=1)
    return float(per_sample.mean())


@dataclass(frozen=True)
class Spectrum:
    omega: np.ndarray
    power: np.ndarray

    def peaks(self, fraction: float = PEAK_FRACTION) -> np.ndarray:
        """Frequencies of local maxima above ``fraction`` of the strongest."""
        if not np.any(self.power > 0):
            return np.empty(0)
        idx, _ = find_peaks(self.power, height=fraction * self.power.max())
        return self.omega[idx]

    def as_rows(self) -> list[tuple[float, float]]:
        return list(zip(self.omega.tolist(), self.power.tolist()))


def emission_spectrum(
    trace: TimeTrace, site: int | None = None, window: tuple[float, float] = (2000.0, 5000.0)
) -> Spectrum:
    """Hann-tapered power spectrum over ``window``, normalized to unit peak.

    Frequencies follow ``psi ~ exp(-i omega t)``.  With ``site=None`` the
    per-site power spectra are summed (equal outcoupling from every site);
    otherwise only that site is used.
    """
    w = trace.window(*window)
    x = trace.fields[w]
    if site is not None:
        if not 0 <= site < x.shape[1]:
            raise IndexError(f"site {site} outside lattice of {x.shape[1]} sites")
        x = x[:, [site]]
    x = x * np.hanning(len(x))[:, None]
    power = np.sum(np.abs(np.fft.fft(x, axis=0)) ** 2, axis=1)
    omega = 0.0 - 2 * np.pi * np.fft.fftfreq(len(x), trace.sample_step)
    order = np.argsort(omega, kind="stable")
    omega, power = omega[order], power[order]
    top = power.max()
    return Spectrum(omega, power / top if top > 0 else power)


def classify_lasing(
    i_out: float, spectrum: Spectrum, fraction: float = PEAK_FRACTION, floor: float = LASING_FLOOR
) -> ModeClass:
    if i_out < floor:
        return ModeClass.BELOW_THRESHOLD
    return ModeClass.SINGLE_MODE if len(spectrum.peaks(fraction)) <= 1 else ModeClass.MULTI_MODE


@dataclass(frozen=True)
class LasingReport:
    gamma_pump: float
    seed: int
    i_out: float
    i_out_total: float
    spectrum: Spectrum = field(repr=False)
    mode_class: ModeClass
    spatial_profile: np.ndarray = field(repr=False)
    peak_omegas: tuple[float, ...] = ()

    @property
    def anchor_site(self) -> int:
        return int(np.argmax(self.spatial_profile))


def analyze(trace: TimeTrace, cfg: LaserConfig, sim: SimConfig) -> LasingReport:
    i_out = output_intensity(trace, sim.average_window)
    spec = emission_spectrum(trace, window=sim.average_window)
    mode = classify_lasing(i_out, spec)
    peaks = tuple(float(w) for w in spec.peaks()) if mode is not ModeClass.BELOW_THRESHOLD else ()
    return LasingReport(
        float(cfg.gamma_pump), int(sim.seed), i_out,
        output_intensity(trace, sim.average_window, per_site=False),
        spec, mode, np.abs(trace.fields[-1]) ** 2, peaks,
    )


def simulate(cfg: LaserConfig, sim: SimConfig = SimConfig()) -> tuple[LasingReport, TimeTrace]:
    trace = integrate(cfg, sim)
    return analyze(trace, cfg, sim), trace


def max_gain(cfg: LaserConfig, psi: np.ndarray | None = None) -> float:
    """Largest Im(E) of ``H(psi)`` (of the linearization when ``psi`` is None)."""
    H = linear_hamiltonian(cfg) if psi is None else nonlinear_hamiltonian(psi, cfg)
    return float(np.max(np.linalg.eigvals(H).imag))


def gain_clamping_residual(cfg: LaserConfig, psi: np.ndarray) -> float:
    """How far the steady state's instantaneous net gain is from zero."""
    return abs(max_gain(cfg, psi))


def linear_threshold(cfg: LaserConfig, upper: float = 1e3, xtol: float = 1e-10) -> float:
    """Smallest pump at which the linearized lattice has a non-decaying mode."""
    f = lambda g: max_gain(cfg.with_pump(g))
    lo, hi = 0.0, 1.0
    if f(lo) >= 0:
        raise ValueError("linear lattice already has gain at zero pump (always lasing)")
    while f(hi) < 0:
        lo, hi = hi, 2 * hi
        if hi > upper:
            raise ValueError(f"no lasing threshold below pump {upper}")
    return float(brentq(f, lo, hi, xtol=xtol))


def pump_sweep(
    cfg: LaserConfig, gammas: Iterable[float], sim: SimConfig = SimConfig(), workers: int | None = None
) -> list[LasingReport]:
    """One run per pump strength, returned in input order."""
    run = lambda g: simulate(cfg.with_pump(g), sim)[0]
    gammas = [float(g) for g in gammas]
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(run, gammas))
    return [run(g) for g in gammas]


def seed_ensemble(
    cfg: LaserConfig, seeds: Iterable[int], sim: SimConfig = SimConfig(), workers: int | None = None
) -> list[LasingReport]:
    run = lambda s: simulate(cfg, replace(sim, seed=int(s)))[0]
    seeds = list(seeds)
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(run, seeds))
    return [run(s) for s in seeds]


# -- persistence ------------------------------------------------------------

TRACE_MAGIC = b"NHAAHTR1"


def write_trace(trace: TimeTrace, path: str | Path, meta: dict[str, Any] | None = None) -> Path:
    """Binary trace: magic, u32 header length, JSON header, then little-endian
    float64 (re, im) pairs ordered sample-major, site-minor."""
    path = Path(path)
    header = {
        "fingerprint": trace.fingerprint,
        "dt": trace.dt,
        "sample_stride": trace.sample_stride,
        "n_samples": int(trace.fields.shape[0]),
        "n_sites": int(trace.fields.shape[1]),
        "t0": float(trace.times[0]),
        **(meta or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(trace.fields, dtype="<c16").tobytes())
    return path


def read_trace(path: str | Path) -> tuple[TimeTrace, dict[str, Any]]:
    data = Path(path).read_bytes()
    if data[:8] != TRACE_MAGIC:
        raise ValueError(f"{path} is not a trace file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen])
    ns, nsite = header["n_samples"], header["n_sites"]
    fields = np.frombuffer(data[12 + hlen :], dtype="<c16").reshape(ns, nsite).copy()
    times = header["t0"] + np.arange(ns) * header["dt"] * header["sample_stride"]
    trace = TimeTrace(times, fields, header["fingerprint"], header["dt"], header["sample_stride"])
    return trace, header


def write_sweep_csv(reports: Sequence[LasingReport], path: str | Path, header: Sequence[str] = ()) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["gamma", "seed", "i_out", "i_out_total", "mode_class", "anchor_site"])
        for r in reports:
            w.writerow([repr(r.gamma_pump), r.seed, repr(r.i_out), repr(r.i_out_total), str(r.mode_class), r.anchor_site])
    return path


def write_laser_spectrum_csv(spectrum: Spectrum, path: str | Path, header: Sequence[str] = ()) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["omega", "power"])
        for om, pw in spectrum.as_rows():
            w.writerow([repr(om), repr(pw)])
    return path
