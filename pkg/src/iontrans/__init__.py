"""Simulation of a photon <-> collective spin wave <-> phonon <-> single-ion
transfer protocol in a linear ion chain coupled to an optical cavity.

Subpackages
-----------
ionchain
    Chain geometry, axial normal modes, per-ion coupling weights.
statespace
    Excitation-truncated bases and sparse operators.
dynamics
    Pulse schedules, Schroedinger/Lindblad propagation, channel fidelities.
protocol
    The three transfer steps, calibration, joint protocol, extensions.
harness
    Config parsing, seeded sweeps, CSV emission (CLI: ``iontrans``).
"""

from . import ionchain, statespace, dynamics, protocol, harness

__all__ = ["ionchain", "statespace", "dynamics", "protocol", "harness"]
__version__ = "0.1.0"
