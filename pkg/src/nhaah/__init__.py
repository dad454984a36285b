"""Non-Hermitian Aubry-Andre-Harper lattices with imaginary modulation."""

from .model import (
    DomainSpec,
    LatticeSpec,
    ModulationSpec,
    Rational,
    build_bloch_hamiltonian,
    build_open_hamiltonian,
    potential_value,
    symmetry_operator,
)

__version__ = "0.1.0"

__all__ = [
    "DomainSpec",
    "LatticeSpec",
    "ModulationSpec",
    "Rational",
    "build_bloch_hamiltonian",
    "build_open_hamiltonian",
    "potential_value",
    "symmetry_operator",
]
