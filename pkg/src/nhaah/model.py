"""Lattice construction for imaginary Aubry-Andre-Harper modulations.

Sites inside a modulation domain (and inside the Bloch unit cell) carry the
labels n = 1, 2, ..., so the on-site term of site n is ``i V sin(2 pi q n / p + delta)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

__all__ = [
    "SITE_ORIGIN",
    "Rational",
    "ModulationSpec",
    "DomainSpec",
    "LatticeSpec",
    "SymmetryOperator",
    "potential_value",
    "potential_profile",
    "build_open_hamiltonian",
    "build_bloch_hamiltonian",
    "bloch_hamiltonians",
    "symmetry_operator",
    "ct_anticommutation_residual",
    "bloch_ct_residual",
]

#: Label of the first site of every domain and of the Bloch unit cell.
SITE_ORIGIN = 1

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Rational:
    """Inverse modulation period ``q/p`` with coprime ``0 < q < p``."""

    q: int
    p: int

    def __post_init__(self):
        if not (isinstance(self.q, (int, np.integer)) and isinstance(self.p, (int, np.integer))):
            raise TypeError("q and p must be integers")
        if not 0 < self.q < self.p:
            raise ValueError(f"need 0 < q < p, got q={self.q}, p={self.p}")
        if math.gcd(int(self.q), int(self.p)) != 1:
            raise ValueError(f"q={self.q} and p={self.p} are not coprime")
        object.__setattr__(self, "q", int(self.q))
        object.__setattr__(self, "p", int(self.p))

    @classmethod
    def parse(cls, text: str) -> "Rational":
        q, p = str(text).split("/")
        return cls(int(q), int(p))

    def __float__(self) -> float:
        return self.q / self.p

    def __str__(self) -> str:
        return f"{self.q}/{self.p}"


@dataclass(frozen=True)
class ModulationSpec:
    """Imaginary potential ``V sin(2 pi alpha n + delta)``.

    Negative amplitudes are folded into the phase and the phase is reduced
    to ``[0, 2 pi)`` on construction.
    """

    V: float
    alpha: Rational
    delta: float = 0.0

    def __post_init__(self):
        V = float(self.V)
        delta = float(self.delta)
        if not (math.isfinite(V) and math.isfinite(delta)):
            raise ValueError("V and delta must be finite")
        if V < 0:
            V, delta = -V, delta + math.pi
        delta = math.fmod(delta, TWO_PI)
        if delta < 0:
            delta += TWO_PI
        if delta >= TWO_PI:
            delta = 0.0
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "delta", delta)

    @property
    def p(self) -> int:
        return self.alpha.p

    @property
    def q(self) -> int:
        return self.alpha.q

    @classmethod
    def from_polar(cls, V: float, alpha: Rational | str, delta: float) -> "ModulationSpec":
        if isinstance(alpha, str):
            alpha = Rational.parse(alpha)
        return cls(V, alpha, delta)

    def shifted(self, cells: int = 1) -> "ModulationSpec":
        """Same modulation with site labels advanced by ``cells`` sites."""
        return ModulationSpec(self.V, self.alpha, self.delta + TWO_PI * self.q * cells / self.p)

    def to_dict(self) -> dict[str, Any]:
        return {"V": self.V, "q": self.q, "p": self.p, "delta": self.delta}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModulationSpec":
        return cls(float(d["V"]), Rational(int(d["q"]), int(d["p"])), float(d["delta"]))


@dataclass(frozen=True)
class DomainSpec:
    modulation: ModulationSpec
    length: int

    def __post_init__(self):
        if int(self.length) < 1:
            raise ValueError(f"domain length must be >= 1, got {self.length}")
        object.__setattr__(self, "length", int(self.length))

    def to_dict(self) -> dict[str, Any]:
        return {**self.modulation.to_dict(), "length": self.length}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DomainSpec":
        return cls(ModulationSpec.from_dict(d), int(d["length"]))


@dataclass(frozen=True)
class LatticeSpec:
    """Open chain made of consecutive modulation domains.

    With ``global_index=True`` the site label keeps counting across domain
    walls instead of restarting at :data:`SITE_ORIGIN` in each domain.
    """

    domains: tuple[DomainSpec, ...]
    hopping: float = 1.0
    global_index: bool = False

    def __post_init__(self):
        domains = tuple(self.domains)
        if not domains:
            raise ValueError("lattice needs at least one domain")
        object.__setattr__(self, "domains", domains)
        object.__setattr__(self, "hopping", float(self.hopping))
        if self.n_sites < 2:
            raise ValueError(f"lattice needs at least 2 sites, got {self.n_sites}")

    @classmethod
    def single(cls, modulation: ModulationSpec, n_sites: int, hopping: float = 1.0) -> "LatticeSpec":
        return cls((DomainSpec(modulation, n_sites),), hopping)

    @property
    def n_sites(self) -> int:
        return sum(d.length for d in self.domains)

    @property
    def walls(self) -> list[int]:
        """Index (0-based) of the first site of every domain after the first."""
        out, pos = [], 0
        for d in self.domains[:-1]:
            pos += d.length
            out.append(pos)
        return out

    def domain_of(self, site: int) -> int:
        pos = 0
        for i, d in enumerate(self.domains):
            pos += d.length
            if site < pos:
                return i
        raise IndexError(site)

    def require_even(self) -> None:
        if self.n_sites % 2:
            raise ValueError(
                f"symmetry analysis needs an even number of sites, got N={self.n_sites}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.hopping,
            "global_index": self.global_index,
            "domains": [d.to_dict() for d in self.domains],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LatticeSpec":
        return cls(
            tuple(DomainSpec.from_dict(x) for x in d["domains"]),
            float(d.get("t", 1.0)),
            bool(d.get("global_index", False)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LatticeSpec":
        return cls.from_dict(json.loads(text))


def _angle(m: ModulationSpec, n) -> np.ndarray:
    # reduce q*n mod p in integers so large n carries no rounding drift
    n = np.asarray(n, dtype=np.int64)
    return TWO_PI * ((m.q * n) % m.p) / m.p + m.delta


def potential_value(m: ModulationSpec, n):
    """``V sin(2 pi q n / p + delta)`` for integer site label(s) ``n``."""
    out = m.V * np.sin(_angle(m, n))
    return float(out) if np.ndim(out) == 0 else out


def potential_profile(lattice: LatticeSpec) -> np.ndarray:
    """Real modulation ``V_n`` on every site of the lattice, in chain order."""
    parts, start = [], SITE_ORIGIN
    for d in lattice.domains:
        labels = np.arange(d.length) + start
        parts.append(np.atleast_1d(potential_value(d.modulation, labels)))
        if lattice.global_index:
            start += d.length
    return np.concatenate(parts)


def _chain(diagonal: np.ndarray, hopping: float) -> np.ndarray:
    n = len(diagonal)
    H = np.diag(np.asarray(diagonal, dtype=complex))
    off = np.arange(n - 1)
    H[off, off + 1] = hopping
    H[off + 1, off] = hopping
    return H


def build_open_hamiltonian(lattice: LatticeSpec) -> np.ndarray:
    """Dense N x N open-boundary Hamiltonian with on-site terms ``i V_n``."""
    return _chain(1j * potential_profile(lattice), lattice.hopping)


def bloch_hamiltonians(
    m: ModulationSpec, ks: Sequence[float], hopping: float = 1.0, origin: int = SITE_ORIGIN
) -> np.ndarray:
    """Stack of p x p Bloch Hamiltonians, shape ``(len(ks), p, p)``.

    Periodic gauge: only the bond between the last site of a cell and the
    first site of the next carries the Bloch phase.  ``origin`` is the
    label of the first site in the cell.
    """
    ks = np.atleast_1d(np.asarray(ks, dtype=float))
    p = m.p
    cell = _chain(1j * np.atleast_1d(potential_value(m, np.arange(p) + origin)), hopping)
    H = np.repeat(cell[None], len(ks), axis=0)
    phase = hopping * np.exp(1j * ks)
    if p == 1:
        H[:, 0, 0] += phase + phase.conj()
    elif p == 2:
        H[:, 1, 0] += phase
        H[:, 0, 1] += phase.conj()
    else:
        H[:, p - 1, 0] = phase
        H[:, 0, p - 1] = phase.conj()
    return H


def build_bloch_hamiltonian(
    m: ModulationSpec, k: float, hopping: float = 1.0, origin: int = SITE_ORIGIN
) -> np.ndarray:
    return bloch_hamiltonians(m, [k], hopping, origin)[0]


@dataclass(frozen=True)
class SymmetryOperator:
    """``C = I_{dim/2} (x) sigma_z``, stored as its diagonal."""

    dimension: int
    diagonal: np.ndarray = field(repr=False)

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.diagonal.astype(float))

    def apply_ct(self, v: np.ndarray) -> np.ndarray:
        """Antiunitary ``C T``: ``v -> C conj(v)``."""
        d = self.diagonal.reshape((-1,) + (1,) * (np.ndim(v) - 1))
        return d * np.conj(v)


def symmetry_operator(dim: int) -> SymmetryOperator:
    dim = int(dim)
    if dim <= 0 or dim % 2:
        raise ValueError(
            f"the particle-hole operator I (x) sigma_z needs an even dimension (N even), got {dim}"
        )
    diag = np.tile(np.array([1, -1], dtype=np.int8), dim // 2)
    diag.setflags(write=False)
    return SymmetryOperator(dim, diag)


def ct_anticommutation_residual(H: np.ndarray, C: SymmetryOperator) -> float:
    """``max |C H* C + H|``; zero when ``{H, CT} = 0``."""
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] != H.shape[1] or H.shape[0] != C.dimension:
        raise ValueError(f"shape {H.shape} does not match operator dimension {C.dimension}")
    c = C.diagonal.astype(float)
    return float(np.max(np.abs(c[:, None] * H.conj() * c[None, :] + H)))


def bloch_ct_residual(Hk: np.ndarray, C: SymmetryOperator | None = None) -> float:
    """``max |C H_k^dagger C + H_k|`` for a Bloch matrix.

    ``H_k^dagger`` equals ``H_{-k}^*`` in the periodic gauge, so this is the
    bulk particle-hole condition ``-H_k = C H_{-k}^* C``.
    """
    Hk = np.asarray(Hk)
    C = C or symmetry_operator(Hk.shape[0])
    c = C.diagonal.astype(float)
    return float(np.max(np.abs(c[:, None] * Hk.conj().T * c[None, :] + Hk)))
