"""Biorthogonal Wilson loops, phase labels and polar phase diagrams."""

from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import SITE_ORIGIN, ModulationSpec, Rational, bloch_hamiltonians
from .spectral import EPS_GAP, EigenSystem, eigendecompose_many, k_grid, real_line_gap

#: Default k-grid size for Wilson loops.
NK_DEFAULT = 64
#: Largest k grid tried by adaptive refinement.
NK_MAX = 4096
#: Allowed |p(nk) - p(2 nk)| before the grid is refined.
CONVERGENCE_TOL = 1e-6
#: Distance from 0 or 1/2 still accepted as quantized.
QUANTIZATION_TOL = 0.05

#: ``gauge(k_index, n) -> (right_scale, left_scale)``, each of shape ``(n,)``.
GaugeHook = Callable[[int, int], tuple[np.ndarray, np.ndarray]]


class TopologyError(RuntimeError):
    """Invariant could not be evaluated; ``det_track`` holds the phase increments so far."""

    def __init__(self, message: str, det_track: Sequence[float] = ()):
        super().__init__(message)
        self.det_track = list(det_track)


class GapClosedError(TopologyError):
    pass


class PhaseLabel(enum.Enum):
    NONTRIVIAL = "Nontrivial"
    TRIVIAL = "Trivial"
    GAPLESS = "Gapless"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class WilsonLoopResult:
    polarization: float
    nk: int
    det_track: list[float] = field(repr=False)
    occupied_count: int
    total_phase: float = 0.0


def _frac(x: float) -> float:
    f = x - math.floor(x)
    return 0.0 if f > 1.0 - 1e-12 else f


def circular_distance(a: float, b: float) -> float:
    """Distance between two numbers on the unit circle R/Z."""
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


def bloch_eigensystems(m: ModulationSpec, nk: int, origin: int = SITE_ORIGIN) -> list[EigenSystem]:
    return eigendecompose_many(bloch_hamiltonians(m, k_grid(nk), origin=origin))


def occupied_bands(m: ModulationSpec, k: float, eps_gap: float = EPS_GAP) -> list[int]:
    """Indices of the bands with Re(E) < 0 at ``k``, sorted by Re(E)."""
    E = np.linalg.eigvals(bloch_hamiltonians(m, [k])[0])
    return _occupied_from_eigenvalues(E, k, eps_gap)


def _occupied_from_eigenvalues(E: np.ndarray, k: float, eps_gap: float) -> list[int]:
    if np.min(np.abs(E.real)) <= eps_gap:
        raise GapClosedError(f"no real line gap at k={k:.6g} (min |Re E| = {np.min(np.abs(E.real)):.3g})")
    order = np.argsort(E.real)
    return [int(i) for i in order if E[i].real < 0]


def _subspace_frames(
    ess: list[EigenSystem], ks: np.ndarray, eps_gap: float, which: str
) -> tuple[np.ndarray, np.ndarray, int]:
    R, L = [], []
    count = None
    for j, (es, k) in enumerate(zip(ess, ks)):
        occ = _occupied_from_eigenvalues(es.eigenvalues, k, eps_gap)
        if which == "occupied":
            idx = occ
        elif which == "empty":
            idx = sorted(set(range(es.dim)) - set(occ))
        else:
            idx = list(range(es.dim))
        if count is None:
            count = len(idx)
        elif len(idx) != count:
            raise GapClosedError(f"occupied band count changes at k={k:.6g}")
        if np.any(es.exceptional[idx]):
            raise TopologyError(
                f"exceptional point in the {which} subspace at k={k:.6g}; refine the k grid "
                "or move away from the degeneracy"
            )
        R.append(es.right_vectors[:, idx])
        L.append(es.left_vectors[:, idx])
    return np.stack(R), np.stack(L), int(count)


def _loop_increments(R: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Gauge-invariant phase increments ``arg det(L_j^+ R_{j+1}) - arg det(L_j^+ R_j)``.

    The normalization by ``det(L_j^+ R_j)`` cancels arbitrary rescaling of
    left and right vectors independently; the loop closes with the k=0
    frame (the Bloch matrix is 2 pi periodic in this gauge).
    """
    Rn = np.roll(R, -1, axis=0)
    M = np.einsum("kai,kaj->kij", L.conj(), Rn)
    N = np.einsum("kai,kaj->kij", L.conj(), R)
    return np.angle(np.linalg.det(M) / np.linalg.det(N))


def _loop_phase(
    m: ModulationSpec,
    nk: int,
    eps_gap: float,
    which: str,
    gauge: GaugeHook | None,
    origin: int,
) -> tuple[np.ndarray, int]:
    ks = k_grid(nk)
    R, L, count = _subspace_frames(bloch_eigensystems(m, nk, origin), ks, eps_gap, which)
    if gauge is not None:
        for j in range(nk):
            gr, gl = gauge(j, count)
            R[j] = R[j] * gr
            L[j] = L[j] * gl
    return _loop_increments(R, L), count


def _converged_loop(
    m: ModulationSpec,
    nk: int,
    eps_gap: float,
    which: str,
    gauge: GaugeHook | None,
    origin: int,
    tol: float = CONVERGENCE_TOL,
    nk_max: int = NK_MAX,
) -> tuple[np.ndarray, int, int]:
    """Double nk until the loop phase agrees (mod 2 pi) with the next finer grid.

    Individual increments depend on the eigenvector gauge at each k; only
    their sum mod 2 pi is meaningful, so that is what is compared.
    """
    inc, count = _loop_phase(m, nk, eps_gap, which, gauge, origin)
    while True:
        if 2 * nk > nk_max:
            raise TopologyError(
                f"Wilson loop not converged up to nk={nk_max}", det_track=inc.tolist()
            )
        inc2, _ = _loop_phase(m, 2 * nk, eps_gap, which, None, origin)
        p1, p2 = _frac(-inc.sum() / (2 * math.pi)), _frac(-inc2.sum() / (2 * math.pi))
        if circular_distance(p1, p2) < tol:
            return inc, count, nk
        nk, inc = 2 * nk, inc2


def wilson_polarization(
    m: ModulationSpec,
    nk: int = NK_DEFAULT,
    *,
    eps_gap: float = EPS_GAP,
    gauge: GaugeHook | None = None,
    origin: int = SITE_ORIGIN,
    refine: bool = True,
) -> WilsonLoopResult:
    """Polarization of the Re(E) < 0 bands from a discretized biorthogonal Wilson loop.

    The grid is doubled until the result agrees with the next finer grid
    to ``1e-6``; ``nk`` in the result is the grid actually used.  A
    ``gauge`` hook rescales the eigenvectors at each k before the loop is
    formed (used to check gauge invariance).
    """
    if nk < 4 * m.p:
        raise ValueError(f"nk={nk} is below 4p={4 * m.p}")
    if not refine:
        inc, count = _loop_phase(m, nk, eps_gap, "occupied", gauge, origin)
    else:
        inc, count, nk = _converged_loop(m, nk, eps_gap, "occupied", gauge, origin)
    total = float(inc.sum())
    return WilsonLoopResult(_frac(-total / (2 * math.pi)), nk, inc.tolist(), count, total)


def _branch(phi: float) -> float:
    """Reduce to (-pi/2, 3pi/2], so quantized values land on 0 or pi."""
    return phi - 2 * math.pi * math.floor((phi + math.pi / 2) / (2 * math.pi))


def global_berry_phase(
    m: ModulationSpec, nk: int = NK_DEFAULT, *, eps_gap: float = EPS_GAP, origin: int = SITE_ORIGIN
) -> float:
    """Total Berry phase of all p bands, taken as the sum over the two sides of the gap.

    The determinant of the full p x p overlap loop is identically one (the
    frames are complete at every k), so the phase is resolved per band
    group: each group's Wilson phase is reduced to (-pi/2, 3pi/2] and the
    two are added.  This gives 2 pi in the nontrivial phase and 0 in the
    trivial one.
    """
    if nk < 4 * m.p:
        raise ValueError(f"nk={nk} is below 4p={4 * m.p}")
    total = 0.0
    for which in ("occupied", "empty"):
        inc, _, _ = _converged_loop(m, nk, eps_gap, which, None, origin)
        total += _branch(float(inc.sum()))
    return total


def full_band_loop_phase(m: ModulationSpec, nk: int = NK_DEFAULT) -> float:
    """Accumulated phase of the full p x p overlap loop (always ~0 mod 2 pi)."""
    ks = k_grid(nk)
    R, L, _ = _subspace_frames(bloch_eigensystems(m, nk), ks, -1.0, "all")
    return float(_loop_increments(R, L).sum())


@dataclass(frozen=True)
class PointResult:
    label: PhaseLabel
    polarization: float = math.nan
    global_phase: float = math.nan
    diagnostic: str = ""


def label_from_polarization(pol: float, det_track: Sequence[float] = ()) -> PhaseLabel:
    if circular_distance(pol, 0.5) < QUANTIZATION_TOL:
        return PhaseLabel.NONTRIVIAL
    if circular_distance(pol, 0.0) < QUANTIZATION_TOL:
        return PhaseLabel.TRIVIAL
    raise TopologyError(f"polarization {pol:.6f} is not quantized", det_track)


def evaluate_point(
    m: ModulationSpec, nk: int = NK_DEFAULT, eps_gap: float = EPS_GAP, with_global: bool = True
) -> PointResult:
    """Label plus both invariants for one (V, delta) point."""
    if not real_line_gap(m, eps_gap=eps_gap).gapped:
        return PointResult(PhaseLabel.GAPLESS)
    try:
        w = wilson_polarization(m, max(nk, 4 * m.p), eps_gap=eps_gap)
    except GapClosedError as exc:
        return PointResult(PhaseLabel.GAPLESS, diagnostic=str(exc))
    label = label_from_polarization(w.polarization, w.det_track)
    g = global_berry_phase(m, w.nk, eps_gap=eps_gap) if with_global else math.nan
    return PointResult(label, w.polarization, g)


def classify_point(m: ModulationSpec, nk: int = NK_DEFAULT, eps_gap: float = EPS_GAP) -> PhaseLabel:
    """Nontrivial / Trivial from the polarization, Gapless without a real line gap."""
    return evaluate_point(m, nk, eps_gap, with_global=False).label


# -- phase diagrams ---------------------------------------------------------


@dataclass(frozen=True)
class PhaseDiagram:
    alpha: Rational
    v_grid: np.ndarray
    delta_grid: np.ndarray
    labels: np.ndarray  # object array of PhaseLabel, shape (nv, ndelta)
    polarization: np.ndarray
    global_phase: np.ndarray
    diagnostics: dict[tuple[int, int], str] = field(default_factory=dict, repr=False)

    def label_codes(self) -> np.ndarray:
        """+1 nontrivial, -1 trivial, 0 gapless."""
        code = {PhaseLabel.NONTRIVIAL: 1, PhaseLabel.TRIVIAL: -1, PhaseLabel.GAPLESS: 0}
        return np.vectorize(code.__getitem__, otypes=[int])(self.labels)


def polar_grid(v_max: float, nv: int, ndelta: int) -> tuple[np.ndarray, np.ndarray]:
    return np.linspace(v_max / nv, v_max, nv), 2 * np.pi * np.arange(ndelta) / ndelta


def phase_diagram(
    alpha: Rational | str,
    v_max: float,
    nv: int,
    ndelta: int,
    *,
    nk: int = NK_DEFAULT,
    eps_gap: float = EPS_GAP,
    with_global: bool = True,
    workers: int | None = None,
) -> PhaseDiagram:
    """Classify every point of the polar grid ``V = v_max * i / nv``, ``delta = 2 pi j / ndelta``.

    Cells that fail numerically are stored as Gapless and their error
    message kept in ``diagnostics``.
    """
    if isinstance(alpha, str):
        alpha = Rational.parse(alpha)
    if nv < 8 or ndelta < 8:
        raise ValueError(f"need nv, ndelta >= 8, got nv={nv}, ndelta={ndelta}")
    if not v_max > 0:
        raise ValueError("v_max must be positive")
    vs, ds = polar_grid(v_max, nv, ndelta)
    cells = [(i, j) for i in range(nv) for j in range(ndelta)]

    def run(cell):
        i, j = cell
        try:
            return evaluate_point(ModulationSpec(vs[i], alpha, ds[j]), nk, eps_gap, with_global)
        except (TopologyError, np.linalg.LinAlgError, RuntimeError) as exc:
            return PointResult(PhaseLabel.GAPLESS, diagnostic=f"{type(exc).__name__}: {exc}")

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]

    labels = np.empty((nv, ndelta), dtype=object)
    pol = np.full((nv, ndelta), np.nan)
    glob = np.full((nv, ndelta), np.nan)
    diag = {}
    for (i, j), r in zip(cells, results):
        labels[i, j] = r.label
        pol[i, j] = r.polarization
        glob[i, j] = r.global_phase
        if r.diagnostic:
            diag[(i, j)] = r.diagnostic
    return PhaseDiagram(alpha, vs, ds, labels, pol, glob, diag)


def spoke_census(d: PhaseDiagram, v_ring: float) -> tuple[int, bool]:
    """Number of gapped arcs on the ring nearest ``v_ring`` and whether their labels alternate.

    An arc is a maximal circular run of cells sharing one gapped label.
    """
    vs = d.v_grid
    step = vs[1] - vs[0] if len(vs) > 1 else vs[0]
    if not vs[0] - step / 2 <= v_ring <= vs[-1] + step / 2:
        raise ValueError(f"v_ring={v_ring} outside the grid [{vs[0]}, {vs[-1]}]")
    ring = list(d.labels[int(np.argmin(np.abs(vs - v_ring)))])
    if all(x is PhaseLabel.GAPLESS for x in ring):
        return 0, True
    # rotate so the walk starts at an arc boundary
    n = len(ring)
    start = next((j for j in range(n) if ring[j] != ring[j - 1]), 0)
    ring = ring[start:] + ring[:start]
    arcs = []
    for j, lab in enumerate(ring):
        if lab is PhaseLabel.GAPLESS:
            continue
        if j > 0 and ring[j - 1] is lab and arcs:
            continue
        arcs.append(lab)
    alternating = all(arcs[i] is not arcs[(i + 1) % len(arcs)] for i in range(len(arcs))) if len(arcs) > 1 else True
    return len(arcs), alternating


def write_phase_diagram_csv(d: PhaseDiagram, path: str | Path, header: Sequence[str] = ()) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["v", "delta", "label", "polarization", "global_phase"])
        for i, v in enumerate(d.v_grid):
            for j, dl in enumerate(d.delta_grid):
                w.writerow(
                    [repr(float(v)), repr(float(dl)), str(d.labels[i, j]),
                     repr(float(d.polarization[i, j])), repr(float(d.global_phase[i, j]))]
                )
    return path
