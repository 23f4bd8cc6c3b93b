"""Physical constants for Rb-87 and the unit helpers used throughout."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from scipy import constants as sc

HBAR = sc.hbar
KB = sc.k
MU0 = sc.mu_0
MU_B = sc.physical_constants["Bohr magneton"][0]
BOHR_RADIUS = sc.physical_constants["Bohr radius"][0]

GAUSS = 1e-4  # tesla
NK = 1e-9 * KB  # joule per nanokelvin


@dataclass(frozen=True)
class PhysicalConstants:
    """Atomic species and condensate parameters.

    ``magnetic_moment`` is the effective moment of the trapped Zeeman state,
    so that the potential energy is ``magnetic_moment * |B|``. The default is
    the |F=2, m_F=2> state of Rb-87 (g_F m_F = 1).
    """

    atom_mass: float = 1.443160e-25
    scattering_length: float = 98.98 * BOHR_RADIUS
    atom_count: float = 1e5
    reduced_planck: float = HBAR
    boltzmann: float = KB
    vacuum_permeability: float = MU0
    magnetic_moment: float = MU_B
    interaction_strength: float = field(init=False)

    def __post_init__(self):
        for name in ("atom_mass", "scattering_length", "atom_count",
                     "reduced_planck", "boltzmann", "vacuum_permeability",
                     "magnetic_moment"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        g = 4 * math.pi * self.reduced_planck**2 * self.scattering_length / self.atom_mass
        object.__setattr__(self, "interaction_strength", g)

    def to_nK(self, energy):
        return energy / (1e-9 * self.boltzmann)


RB87 = PhysicalConstants()
