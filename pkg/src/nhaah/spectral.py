"""Non-Hermitian eigensolutions, real line gaps and zero-mode detection."""

from __future__ import annotations

import csv
import hashlib
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse.csgraph import connected_components

from .model import (
    LatticeSpec,
    ModulationSpec,
    bloch_hamiltonians,
    build_open_hamiltonian,
    symmetry_operator,
)

#: |<L|R>| of unit vectors below this marks a pair as (near-)exceptional.
EP_THRESHOLD = 1e-8
#: Default real-line-gap resolution.
EPS_GAP = 1e-4
#: Default |Re E| tolerance for zero modes.
EPS_RE = 1e-6


class EigenSolverError(RuntimeError):
    def __init__(self, message: str, fingerprint: str):
        super().__init__(f"{message} (matrix fingerprint {fingerprint})")
        self.fingerprint = fingerprint


def matrix_fingerprint(H: np.ndarray) -> str:
    H = np.ascontiguousarray(H, dtype=complex)
    h = hashlib.sha256(str(H.shape).encode())
    h.update(H.tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class EigenSystem:
    """Eigenvalues with biorthonormal right/left eigenvectors (as columns).

    ``L[:, i].conj() @ R[:, j] == delta_ij`` for every pair not flagged in
    ``exceptional``; right vectors have unit norm.
    """

    eigenvalues: np.ndarray
    right_vectors: np.ndarray
    left_vectors: np.ndarray
    biorth_condition: float
    pairing_distance: np.ndarray = field(repr=False)
    exceptional: np.ndarray = field(repr=False)
    ambiguous_pairing: bool = False

    @property
    def dim(self) -> int:
        return len(self.eigenvalues)

    @property
    def has_exceptional(self) -> bool:
        return bool(np.any(self.exceptional))

    def reconstruct(self) -> np.ndarray:
        R, L = self.right_vectors, self.left_vectors
        return (R * self.eigenvalues) @ L.conj().T

    def normalized_right(self, j: int) -> np.ndarray:
        v = self.right_vectors[:, j]
        return v / np.linalg.norm(v)


def _greedy_pairing(a: np.ndarray, b: np.ndarray, tol: float = 1e-10):
    """Match ``a[i]`` to ``b[order[i]]`` by repeatedly taking the closest free pair."""
    n = len(a)
    D = np.abs(a[:, None] - b[None, :])
    order = np.argmin(D, axis=1)
    if len(np.unique(order)) == n:
        dist = D[np.arange(n), order]
    else:
        order = np.full(n, -1)
        dist = np.empty(n)
        used_b = np.zeros(n, bool)
        for flat in np.argsort(D, axis=None, kind="stable"):
            i, j = divmod(int(flat), n)
            if order[i] < 0 and not used_b[j]:
                order[i], dist[i] = j, D[i, j]
                used_b[j] = True
    if n > 1:
        part = np.partition(D, 1, axis=1)
        ambiguous = bool(np.any(part[:, 1] - part[:, 0] < tol))
    else:
        ambiguous = False
    return order, dist, ambiguous


def _degenerate_clusters(E: np.ndarray, tol: float) -> list[np.ndarray]:
    n = len(E)
    if n == 1:
        return []
    adj = np.abs(E[:, None] - E[None, :]) < tol
    ncomp, labels = connected_components(adj, directed=False)
    if ncomp == n:
        return []
    sizes = np.bincount(labels)
    return [np.flatnonzero(labels == c) for c in np.flatnonzero(sizes > 1)]


def eigendecompose(H: np.ndarray, *, ep_threshold: float = EP_THRESHOLD) -> EigenSystem:
    """Full spectrum of a dense complex matrix with paired left eigenvectors.

    Left eigenvectors come from a separate decomposition of ``H^dagger``,
    matched to right eigenvectors by nearest conjugate eigenvalue (complex
    symmetric matrices skip this and use ``conj(R)`` directly).  Within
    clusters of degenerate eigenvalues the left vectors are re-solved so
    the cluster is biorthonormal as a block.
    """
    H = np.asarray(H, dtype=complex)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {H.shape}")
    if not np.all(np.isfinite(H)):
        raise ValueError("matrix has non-finite entries")
    symmetric = np.array_equal(H, H.T)
    try:
        E, R = np.linalg.eig(H)
        if symmetric:
            # H^T = H: left eigenvectors are the conjugated right ones
            L, dist, ambiguous = R.conj(), np.zeros(len(E)), False
        else:
            Ed, Lraw = np.linalg.eig(H.conj().T)
    except np.linalg.LinAlgError as exc:
        raise EigenSolverError(f"eigensolver did not converge: {exc}", matrix_fingerprint(H)) from exc

    if not symmetric:
        order, dist, ambiguous = _greedy_pairing(E, Ed.conj())
        L = Lraw[:, order]
    R = R / np.linalg.norm(R, axis=0)
    L = L / np.linalg.norm(L, axis=0)

    s = np.einsum("ij,ij->j", L.conj(), R)
    overlap = np.abs(s)
    exceptional = overlap < ep_threshold
    scale = max(1.0, float(np.max(np.abs(H))))
    condition = 1.0

    in_cluster = np.zeros(len(E), bool)
    for idx in _degenerate_clusters(E, 1e-8 * scale):
        in_cluster[idx] = True
        S = L[:, idx].conj().T @ R[:, idx]
        smin = np.linalg.svd(S, compute_uv=False)[-1]
        if smin < ep_threshold:
            exceptional[idx] = True
            continue
        condition = max(condition, 1.0 / smin)
        L[:, idx] = L[:, idx] @ np.linalg.inv(S).conj().T
        exceptional[idx] = False

    single = ~in_cluster & ~exceptional
    L[:, single] = L[:, single] / s[single].conj()
    if np.any(single):
        condition = max(condition, float(np.max(1.0 / overlap[single])))
    if np.any(exceptional):
        condition = math.inf

    return EigenSystem(E, R, L, condition, dist, exceptional, ambiguous)


def eigendecompose_many(Hs: np.ndarray, *, ep_threshold: float = EP_THRESHOLD) -> list[EigenSystem]:
    """Batched :func:`eigendecompose` for a stack of small matrices.

    Slices whose eigenvalues are well separated take a vectorized path;
    anything degenerate falls back to the general routine.
    """
    Hs = np.asarray(Hs, dtype=complex)
    if not np.all(np.isfinite(Hs)):
        raise ValueError("matrix stack has non-finite entries")
    try:
        E, R = np.linalg.eig(Hs)
        Ed, Lraw = np.linalg.eig(np.conj(np.swapaxes(Hs, 1, 2)))
    except np.linalg.LinAlgError:
        return [eigendecompose(h, ep_threshold=ep_threshold) for h in Hs]

    nb, n = E.shape
    D = np.abs(E[:, :, None] - Ed.conj()[:, None, :])
    order = np.argmin(D, axis=2)
    dist = np.take_along_axis(D, order[:, :, None], axis=2)[:, :, 0]
    gaps = np.abs(E[:, :, None] - E[:, None, :])
    gaps[:, np.arange(n), np.arange(n)] = np.inf
    scale = np.maximum(1.0, np.max(np.abs(Hs), axis=(1, 2)))
    is_perm = np.all(np.sort(order, axis=1) == np.arange(n)[None], axis=1)
    clean = is_perm & (np.min(gaps, axis=(1, 2)) > 1e-8 * scale)

    L = np.take_along_axis(Lraw, order[:, None, :], axis=2)
    R = R / np.linalg.norm(R, axis=1, keepdims=True)
    L = L / np.linalg.norm(L, axis=1, keepdims=True)
    s = np.einsum("bij,bij->bj", L.conj(), R)
    overlap = np.abs(s)
    clean &= np.all(overlap >= ep_threshold, axis=1)
    L = L / s.conj()[:, None, :]

    out = []
    for b in range(nb):
        if clean[b]:
            out.append(
                EigenSystem(
                    E[b], R[b], L[b], float(np.max(1.0 / overlap[b])),
                    dist[b], np.zeros(n, bool), False,
                )
            )
        else:
            out.append(eigendecompose(Hs[b], ep_threshold=ep_threshold))
    return out


def spectral_symmetry_residual(spectrum: EigenSystem | Sequence[complex]) -> float:
    """Largest mismatch in the optimal matching of ``{E}`` onto ``{-E*}``.

    Purely imaginary eigenvalues may match themselves.
    """
    E = np.asarray(spectrum.eigenvalues if isinstance(spectrum, EigenSystem) else spectrum, complex)
    if len(E) % 2:
        raise ValueError(f"spectral mirror check needs an even dimension, got {len(E)}")
    cost = np.abs(E[:, None] + E.conj()[None, :])
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].max()) if len(E) else 0.0


# -- bulk spectra -----------------------------------------------------------


def k_grid(nk: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(nk) / nk


@dataclass(frozen=True)
class GapReport:
    min_abs_re: float
    gapped: bool
    k_samples: int
    eps_gap: float
    occupied_counts: tuple[int, ...] = ()


def real_line_gap(m: ModulationSpec, k_samples: int | None = None, eps_gap: float = EPS_GAP) -> GapReport:
    """Gap of the bulk bands in Re(E) around zero, sampled on a uniform k grid.

    A band whose real part changes sign between grid points shows up as a
    change in the number of Re(E) < 0 eigenvalues, so that also counts as
    gapless.
    """
    if k_samples is None:
        k_samples = max(4 * m.p, 64)
    if k_samples < 4 * m.p:
        raise ValueError(f"k_samples={k_samples} is below 4p={4 * m.p}")
    E = np.linalg.eigvals(bloch_hamiltonians(m, k_grid(k_samples)))
    min_abs_re = float(np.min(np.abs(E.real)))
    counts = tuple(int(c) for c in np.sum(E.real < 0, axis=1))
    gapped = min_abs_re > eps_gap and len(set(counts)) == 1
    return GapReport(min_abs_re, gapped, k_samples, eps_gap, counts)


def bulk_im_intervals(m: ModulationSpec, k_samples: int = 512) -> np.ndarray:
    """Union of the Im(E) ranges swept by the bulk bands, as merged ``[lo, hi]`` rows."""
    E = np.linalg.eigvals(bloch_hamiltonians(m, k_grid(k_samples)))
    im = np.sort(E.imag, axis=1)
    lo, hi = im.min(axis=0), im.max(axis=0)
    return merge_intervals(np.column_stack([lo, hi]))


def merge_intervals(iv: np.ndarray) -> np.ndarray:
    iv = np.asarray(iv, float).reshape(-1, 2)
    if len(iv) == 0:
        return iv
    iv = iv[np.argsort(iv[:, 0])]
    out = [list(iv[0])]
    for lo, hi in iv[1:]:
        if lo <= out[-1][1]:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return np.array(out)


def interval_distance(x: float, iv: np.ndarray) -> float:
    if len(iv) == 0:
        return math.inf
    d = np.maximum(iv[:, 0] - x, x - iv[:, 1])
    return float(max(0.0, np.min(d)))


# -- zero modes -------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Anchor:
    """Where a localized mode lives: ``left``/``right`` edge or a domain ``wall``.

    For walls, ``index`` is the first site (0-based) of the domain to the
    right of the wall.
    """

    kind: str
    index: int

    def __str__(self) -> str:
        return {"left": "LeftEdge", "right": "RightEdge"}.get(self.kind, f"WallIndex({self.index})")

    @property
    def is_edge(self) -> bool:
        return self.kind in ("left", "right")


@dataclass(frozen=True)
class DecayFit:
    decay_length: float
    residual: float
    n_points: int
    slope: float


@dataclass(frozen=True)
class ZeroModeReport:
    index: int
    energy: complex
    re_energy_abs: float
    ipr: float
    decay_length: float
    fit_residual: float
    anchor: Anchor
    ct_phase: float
    ct_residual: float
    bulk_separation: float | None = None


def ipr(psi: np.ndarray) -> float:
    w = np.abs(psi) ** 2
    return float(np.sum(w**2) / np.sum(w) ** 2)


def ct_phase(psi: np.ndarray) -> tuple[float, float]:
    """Phase theta and residual ``||psi - e^{i theta} C T psi||`` for normalized psi."""
    psi = psi / np.linalg.norm(psi)
    chi = symmetry_operator(len(psi)).apply_ct(psi)
    theta = float(np.angle(np.vdot(chi, psi)))
    return theta, float(np.linalg.norm(psi - np.exp(1j * theta) * chi))


def envelope_decay_fit(
    psi: np.ndarray,
    start: int,
    direction: int,
    period: int,
    stop: int | None = None,
    max_blocks: int = 10,
    floor: float = 1e-12,
) -> DecayFit:
    """Semi-log fit of the unit-cell amplitude envelope moving away from ``start``.

    Amplitudes are the norms of consecutive blocks of ``period`` sites; the
    intra-cell structure of a Bloch-like evanescent state (which can have
    exact nodes) drops out, leaving a geometric sequence.  Blocks below
    ``floor`` times the first block are dropped as round-off.
    """
    a = np.abs(psi)
    n = len(a)
    if stop is None:
        stop = n if direction > 0 else -1
    blocks, dists = [], []
    for b in range(max_blocks):
        lo = start + direction * b * period
        hi = lo + direction * period
        if direction > 0 and hi > stop or direction < 0 and hi < stop:
            break
        sl = slice(lo, hi) if direction > 0 else slice(hi + 1, lo + 1)
        blocks.append(np.linalg.norm(a[sl]))
        dists.append(b * period + 0.5 * (period - 1))
    blocks = np.array(blocks)
    keep = blocks > floor * blocks[0] if len(blocks) else blocks.astype(bool)
    # keep the leading run only
    if len(keep) and not keep.all():
        keep[np.argmin(keep):] = False
    x, y = np.array(dists)[keep], np.log(blocks[keep])
    if len(x) < 2:
        return DecayFit(math.nan, math.nan, len(x), math.nan)
    slope, icpt = np.polyfit(x, y, 1)
    res = y - (slope * x + icpt)
    rms = float(np.sqrt(np.mean(res**2)))
    length = -1.0 / slope if slope < 0 else math.inf
    return DecayFit(float(length), rms, len(x), float(slope))


def _assign_anchor(site: int, n: int, walls: Sequence[int]) -> tuple[Anchor, int]:
    options = [(site, Anchor("left", 0)), (n - 1 - site, Anchor("right", n - 1))]
    for w in walls:
        options.append((min(abs(site - w), abs(site - (w - 1))), Anchor("wall", w)))
    dist, anchor = min(options, key=lambda t: t[0])
    return anchor, dist


def find_zero_modes(
    es: EigenSystem,
    eps_re: float = EPS_RE,
    *,
    lattice: LatticeSpec | None = None,
    walls: Sequence[int] = (),
    anchor_window: int | None = None,
    bulk_im: np.ndarray | None = None,
    separation: float | None = None,
) -> list[ZeroModeReport]:
    """Localized eigenstates with ``|Re E| < eps_re``.

    A candidate is anchored to the nearest chain end or domain wall; it is
    dropped as bulk-like when its peak lies ``anchor_window`` or more sites
    away (default: the modulation period of the domain holding the peak).
    With ``bulk_im`` (merged Im(E) intervals of the bulk bands) candidates
    must additionally sit at least ``separation`` (default ``10 * eps_re``)
    away from every bulk Im(E); this is how zero modes are told apart from
    purely imaginary bulk states once the real line gap has closed.
    """
    if eps_re <= 0:
        raise ValueError(f"eps_re must be positive, got {eps_re}")
    n = es.dim
    if n % 2:
        raise ValueError(f"zero-mode analysis needs an even dimension, got {n}")
    if lattice is not None:
        walls = lattice.walls
    if separation is None:
        separation = 10.0 * eps_re

    def period_at(site: int) -> int:
        if anchor_window is not None:
            return anchor_window
        if lattice is not None:
            return lattice.domains[lattice.domain_of(site)].modulation.p
        return 8

    reports = []
    for j in np.flatnonzero(np.abs(es.eigenvalues.real) < eps_re):
        E = complex(es.eigenvalues[j])
        psi = es.normalized_right(j)
        peak = int(np.argmax(np.abs(psi)))
        anchor, dist = _assign_anchor(peak, n, walls)
        if dist >= period_at(peak):
            continue
        sep = None
        if bulk_im is not None:
            sep = interval_distance(E.imag, bulk_im)
            if sep <= separation:
                continue
        fit = _fit_for_anchor(psi, anchor, peak, n, walls, period_at)
        theta, ct_res = ct_phase(psi)
        reports.append(
            ZeroModeReport(
                int(j), E, abs(E.real), ipr(psi), fit.decay_length, fit.residual,
                anchor, theta, ct_res, sep,
            )
        )
    reports.sort(key=lambda r: (r.anchor, r.energy.imag))
    return reports


def _fit_for_anchor(psi, anchor: Anchor, peak: int, n: int, walls, period_at) -> DecayFit:
    if anchor.kind == "left":
        return envelope_decay_fit(psi, 0, +1, period_at(0), stop=_next_wall(walls, 0, n))
    if anchor.kind == "right":
        return envelope_decay_fit(psi, n - 1, -1, period_at(n - 1), stop=_prev_wall(walls, n - 1) - 1)
    w = anchor.index
    if peak < w:
        return envelope_decay_fit(psi, w - 1, -1, period_at(w - 1), stop=_prev_wall(walls, w - 1) - 1)
    return envelope_decay_fit(psi, w, +1, period_at(w), stop=_next_wall(walls, w, n))


def _next_wall(walls, site, n):
    return min([w for w in walls if w > site], default=n)


def _prev_wall(walls, site):
    return max([w for w in walls if w <= site], default=0)


def anchor_parity(reports: Iterable[ZeroModeReport]) -> dict[Anchor, int]:
    return dict(Counter(r.anchor for r in reports))


def protected_anchors(reports: Iterable[ZeroModeReport]) -> list[Anchor]:
    """Anchors holding an odd number of zero modes.

    Zero modes at one anchor can pair off the Re(E) = 0 axis two at a time,
    so only the count mod 2 is robust.
    """
    return sorted(a for a, c in anchor_parity(reports).items() if c % 2)


def lattice_zero_modes(
    lattice: LatticeSpec,
    eps_re: float = EPS_RE,
    es: EigenSystem | None = None,
    eps_gap: float = EPS_GAP,
) -> list[ZeroModeReport]:
    """:func:`find_zero_modes` for an open lattice, switching on the bulk
    Im(E) discriminator whenever some domain has no real line gap."""
    lattice.require_even()
    if es is None:
        es = eigendecompose(build_open_hamiltonian(lattice))
    mods = {d.modulation for d in lattice.domains}
    bulk_im = None
    if any(not real_line_gap(m, eps_gap=eps_gap).gapped for m in mods):
        bulk_im = merge_intervals(np.vstack([bulk_im_intervals(m) for m in mods]))
    return find_zero_modes(es, eps_re, lattice=lattice, bulk_im=bulk_im)


# -- sweeps -----------------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    delta: float
    eigenvalues: np.ndarray
    zero_modes: list[ZeroModeReport]
    gap: GapReport

    @property
    def zero_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.eigenvalues), bool)
        mask[[z.index for z in self.zero_modes]] = True
        return mask

    @property
    def protected(self) -> bool:
        return bool(protected_anchors(self.zero_modes))


def _sweep_one(m: ModulationSpec, n_sites: int, eps_re: float) -> SweepPoint:
    lattice = LatticeSpec.single(m, n_sites)
    es = eigendecompose(build_open_hamiltonian(lattice))
    gap = real_line_gap(m)
    bulk_im = None if gap.gapped else bulk_im_intervals(m)
    zms = find_zero_modes(es, eps_re, lattice=lattice, bulk_im=bulk_im)
    return SweepPoint(m.delta, es.eigenvalues, zms, gap)


def delta_sweep(
    m: ModulationSpec,
    n_sites: int,
    deltas: Iterable[float],
    eps_re: float = EPS_RE,
    workers: int | None = None,
) -> list[SweepPoint]:
    """Open-chain spectra and zero modes for each phase in ``deltas`` (sorted)."""
    if n_sites % 2:
        raise ValueError(f"delta sweep needs even N, got {n_sites}")
    mods = sorted((ModulationSpec(m.V, m.alpha, d) for d in deltas), key=lambda x: x.delta)
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda x: _sweep_one(x, n_sites, eps_re), mods))
    return [_sweep_one(x, n_sites, eps_re) for x in mods]


def trajectory_sweep(
    alpha, n_sites: int, v_sin: float, v_cos_values: Iterable[float], eps_re: float = EPS_RE
) -> list[tuple[float, SweepPoint]]:
    """Open-chain sweep along the line ``V sin(delta) = v_sin``, parametrized by ``V cos(delta)``."""
    out = []
    for x in v_cos_values:
        V = math.hypot(x, v_sin)
        m = ModulationSpec(V, alpha, math.atan2(v_sin, x))
        out.append((float(x), _sweep_one(m, n_sites, eps_re)))
    return out


# -- export -----------------------------------------------------------------


def write_spectrum_csv(points: Sequence[SweepPoint], path: str | Path, header: Sequence[str] = ()) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["delta", "index", "re_E", "im_E", "is_zero_mode"])
        for pt in points:
            mask = pt.zero_mask
            for i, E in enumerate(pt.eigenvalues):
                w.writerow([repr(pt.delta), i, repr(float(E.real)), repr(float(E.imag)), int(mask[i])])
    return path


def write_wavefunction_csv(psi: np.ndarray, path: str | Path, header: Sequence[str] = ()) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["site", "re_psi", "im_psi", "abs_psi"])
        for n, z in enumerate(psi):
            w.writerow([n, repr(float(z.real)), repr(float(z.imag)), repr(float(abs(z)))])
    return path
