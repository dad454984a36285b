"""Deterministic SVG figures (Agg backend, fixed hash salt, no date stamp)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

plt.rcParams["svg.hashsalt"] = "nhaah"

ORANGE, BLUE, BLACK = "#f28e2b", "#4e79a7", "#000000"


def _save(fig, path: str | Path, description: str = "") -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None, "Description": description or None})
    plt.close(fig)
    return path


def spectrum_vs_delta(points, path, description: str = "") -> Path:
    fig, (ax_re, ax_im) = plt.subplots(2, 1, sharex=True, figsize=(6, 6))
    for pt in points:
        E, mask, x = pt.eigenvalues, pt.zero_mask, pt.delta / np.pi
        for ax, part in ((ax_re, E.real), (ax_im, E.imag)):
            ax.plot(np.full((~mask).sum(), x), part[~mask], ",", color="0.3")
            ax.plot(np.full(mask.sum(), x), part[mask], ".", color="red", ms=3)
    ax_re.set_ylabel("Re E")
    ax_im.set_ylabel("Im E")
    ax_im.set_xlabel("delta / pi")
    return _save(fig, path, description)


def trajectory_spectrum(xs: Sequence[float], points, path, description: str = "") -> Path:
    fig, (ax_re, ax_im) = plt.subplots(2, 1, sharex=True, figsize=(6, 6))
    for x, pt in zip(xs, points):
        E, mask = pt.eigenvalues, pt.zero_mask
        for ax, part in ((ax_re, E.real), (ax_im, E.imag)):
            ax.plot(np.full((~mask).sum(), x), part[~mask], ",", color="0.3")
            ax.plot(np.full(mask.sum(), x), part[mask], ".", color="red", ms=3)
            if pt.gap.gapped:
                ax.axvspan(x - 0.5 * _step(xs), x + 0.5 * _step(xs), color=ORANGE, alpha=0.15, lw=0)
    ax_re.set_ylabel("Re E")
    ax_im.set_ylabel("Im E")
    ax_im.set_xlabel("V cos(delta)")
    return _save(fig, path, description)


def _step(xs) -> float:
    return float(xs[1] - xs[0]) if len(xs) > 1 else 1.0


def complex_spectrum(E: np.ndarray, highlight: Sequence[int], path, description: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(E.real, E.imag, ".", color="0.3")
    ax.plot(E.real[list(highlight)], E.imag[list(highlight)], "o", color="green", mfc="none")
    ax.set_xlabel("Re E")
    ax.set_ylabel("Im E")
    return _save(fig, path, description)


def wavefunction(psi: np.ndarray, path, walls: Sequence[int] = (), description: str = "") -> Path:
    a = np.abs(psi)
    fig, (ax, axl) = plt.subplots(2, 1, figsize=(6, 5))
    ax.bar(np.arange(1, len(a) + 1), a, color="0.2", width=0.8)
    axl.semilogy(np.arange(1, len(a) + 1), np.maximum(a, 1e-300), ".-", color="0.2")
    for w in walls:
        for x in (ax, axl):
            x.axvline(w + 0.5, ls="--", color="0.5")
    ax.set_ylabel("|psi_n|")
    axl.set_ylabel("|psi_n|")
    axl.set_xlabel("site n")
    return _save(fig, path, description)


def phase_diagram(d, path, description: str = "") -> Path:
    """Polar map: orange nontrivial, blue trivial, black gapless."""
    codes = d.label_codes()  # -1 trivial, 0 gapless, 1 nontrivial
    nd = len(d.delta_grid)
    dd = 2 * np.pi / nd
    theta = np.append(d.delta_grid - dd / 2, d.delta_grid[-1] + dd / 2)
    vs = d.v_grid
    dv = vs[1] - vs[0] if len(vs) > 1 else vs[0]
    r = np.append(vs - dv / 2, vs[-1] + dv / 2).clip(min=0)
    fig, ax = plt.subplots(subplot_kw={"projection": "polar"}, figsize=(4, 4))
    cmap = ListedColormap([BLUE, BLACK, ORANGE])
    ax.pcolormesh(theta, r, codes, cmap=cmap, vmin=-1.5, vmax=1.5, shading="flat")
    ax.set_title(f"alpha = {d.alpha}")
    ax.set_yticklabels([])
    return _save(fig, path, description)


def laser_sweep(gammas, i_out, classes, path, description: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(gammas, i_out, "-", color="0.4")
    colors = {"BelowThreshold": "0.6", "SingleMode": ORANGE, "MultiMode": BLUE}
    for g, i, c in zip(gammas, i_out, classes):
        ax.plot(g, i, "o", color=colors[str(c)])
    ax.set_xlabel("pump Gamma")
    ax.set_ylabel("I_out")
    return _save(fig, path, description)


def laser_spectrum(omega, power, path, description: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(omega, power, color=ORANGE)
    ax.set_xlim(-2, 2)
    ax.set_xlabel("omega")
    ax.set_ylabel("power (normalized)")
    return _save(fig, path, description)


def intensity_profile(profile, path, walls: Sequence[int] = (), description: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(np.arange(1, len(profile) + 1), profile, color="0.2", width=0.8)
    for w in walls:
        ax.axvline(w + 0.5, ls="--", color="0.5")
    ax.set_xlabel("site n")
    ax.set_ylabel("|psi_n|^2")
    return _save(fig, path, description)
