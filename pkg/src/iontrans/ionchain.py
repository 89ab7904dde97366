"""Equilibrium geometry and axial normal modes of a linear ion chain,
plus the per-ion coupling weights used by every Hamiltonian downstream.

Everything is dimensionless: lengths in units of the characteristic
length ``l = (k_e q^2 / (m w^2))**(1/3)`` and frequencies in units of the
axial trap frequency ``w``.  The cavity couples to ion ``i`` with weight
``g_i = g0 * sin(theta_i)`` where ``theta_i`` is the phase of the cavity
standing wave at the ion's equilibrium position; the engineered
quadrupole drive imprints the matching pattern ``cos(theta_i)`` (carrier)
and ``-sin(theta_i)`` (sideband) when interferometrically locked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SolverFailureError(RuntimeError):
    """Equilibrium solver did not reach the requested force residual."""

    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"equilibrium solver stalled at residual {residual:.3e} "
            f"after {iterations} iterations"
        )


class GeometryError(ValueError):
    """Geometry whose Hessian is not positive definite."""


@dataclass(frozen=True)
class ChainGeometry:
    """Equilibrium configuration of an N-ion chain in a harmonic trap.

    Attributes
    ----------
    n_ions : int
        Number of ions N.
    positions : ndarray
        Strictly increasing equilibrium coordinates, antisymmetric about
        the trap center, in units of the characteristic length.
    length_scale : float
        Characteristic length in the caller's units (1.0 = dimensionless).
    """

    n_ions: int
    positions: np.ndarray
    length_scale: float = 1.0


@dataclass(frozen=True)
class ModeTable:
    """Axial normal modes of a chain.

    ``frequencies`` are in units of the trap frequency, ascending; the
    lowest is the center-of-mass mode at exactly 1 and the second the
    stretch mode at sqrt(3).  ``mode_vectors[k]`` is the orthonormal
    displacement pattern of mode ``k``.
    """

    frequencies: np.ndarray
    mode_vectors: np.ndarray


@dataclass(frozen=True)
class CouplingProfile:
    """Per-ion cavity couplings ``g[i] = g0 * sin(phases[i])``.

    ``phases[i]`` is ``k * z_i + phase_offset`` when built from a physical
    wavevector, or drawn uniformly from [0, 2pi) in sampled mode
    (``k`` is then None).  Rates are in units of the cavity linewidth.
    """

    g: np.ndarray
    g0: float
    phases: np.ndarray
    k: float | None = None
    phase_offset: float = 0.0

    @property
    def collective_coupling(self) -> float:
        """Collectively enhanced coupling sqrt(sum g_i^2)."""
        return float(np.sqrt(np.sum(self.g**2)))


@dataclass(frozen=True)
class QuadrupoleFieldConfig:
    """Beam parameters of the four-beam quadrupole drive.

    ``theta``, ``k_x`` and ``omega0`` document the beam geometry; only the
    longitudinal pattern matters for the dynamics (transverse corrections
    are quadratic in the Lamb-Dicke parameter and dropped).
    ``pattern_phase`` is the phase of the quadrupole standing-wave pattern
    relative to the cavity pattern; 0 means a perfect interferometric lock.
    """

    theta: float = 0.0
    k_x: float = 0.0
    omega0: float = 0.0
    pattern_phase: float = 0.0


@dataclass(frozen=True)
class QuadrupoleProfile:
    """Carrier/sideband weights of the quadrupole drive at each ion.

    ``carrier[i] = cos(theta_i)`` and ``sideband[i] = -sin(theta_i)`` with
    ``theta_i`` the quadrupole pattern phase at ion ``i``; the sideband
    weights are proportional to the cavity couplings when the patterns are
    locked.  ``eta`` / ``eta_spurious`` are the Lamb-Dicke parameters of
    the bus and the lumped spurious mode; the per-ion bus sideband factor
    is ``eta / sqrt(n_ions)``.
    """

    carrier: np.ndarray
    sideband: np.ndarray
    eta: float
    eta_spurious: float
    n_ions: int
    nbar_spurious: float = 0.0

    @property
    def com_sideband_factor(self) -> float:
        return self.eta / np.sqrt(self.n_ions)

    @property
    def spurious_sideband_factor(self) -> float:
        return self.eta_spurious / np.sqrt(self.n_ions)


def _potential_gradient(z: np.ndarray) -> np.ndarray:
    dz = z[:, None] - z[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv2 = np.where(dz != 0.0, np.sign(dz) / dz**2, 0.0)
    return z - inv2.sum(axis=1)


def _potential_hessian(z: np.ndarray) -> np.ndarray:
    dz = z[:, None] - z[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv3 = np.where(dz != 0.0, 1.0 / np.abs(dz) ** 3, 0.0)
    hess = -2.0 * inv3
    np.fill_diagonal(hess, 1.0 + 2.0 * inv3.sum(axis=1))
    return hess


def equilibrium_positions(
    n_ions: int, tol: float = 1e-12, max_iter: int = 200
) -> ChainGeometry:
    """Solve for the equilibrium positions of ``n_ions`` ions.

    Damped Newton iteration on the dimensionless potential
    ``sum z_i^2 / 2 + sum_{i<j} 1/|z_i - z_j|`` starting from a uniformly
    spaced ansatz.  The returned positions are antisymmetric about the
    trap center and carry a force residual below ``tol``.

    Raises
    ------
    SolverFailureError
        If the residual does not reach ``tol`` within ``max_iter`` steps.
    """
    if n_ions < 1:
        raise ValueError("n_ions must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    if n_ions == 1:
        return ChainGeometry(1, np.zeros(1))

    # Uniform ansatz at the typical minimum spacing of a harmonic chain.
    spacing = 2.018 / n_ions**0.559
    z = (np.arange(n_ions) - (n_ions - 1) / 2.0) * spacing

    grad = _potential_gradient(z)
    for iteration in range(max_iter):
        res = np.max(np.abs(grad))
        if res < tol:
            break
        step = np.linalg.solve(_potential_hessian(z), grad)
        # Backtracking keeps the ordering intact and the residual decreasing.
        scale = 1.0
        for _ in range(60):
            trial = z - scale * step
            if np.all(np.diff(trial) > 0):
                trial_grad = _potential_gradient(trial)
                if np.max(np.abs(trial_grad)) < res:
                    z, grad = trial, trial_grad
                    break
            scale *= 0.5
        else:
            raise SolverFailureError(res, iteration)
    else:
        raise SolverFailureError(float(np.max(np.abs(grad))), max_iter)

    # The exact solution is antisymmetric; enforce it, then re-polish.
    z = 0.5 * (z - z[::-1])
    for _ in range(3):
        z = z - np.linalg.solve(_potential_hessian(z), _potential_gradient(z))
        z = 0.5 * (z - z[::-1])
    res = float(np.max(np.abs(_potential_gradient(z))))
    if res >= tol:
        raise SolverFailureError(res, max_iter)
    return ChainGeometry(n_ions, z)


def axial_mode_spectrum(geom: ChainGeometry) -> ModeTable:
    """Diagonalize the dimensionless Hessian at equilibrium.

    Returns frequencies in units of the trap frequency (ascending) and
    orthonormal mode vectors, with the center-of-mass vector uniform and
    every vector's sign fixed so its largest-magnitude entry is positive.
    """
    hess = _potential_hessian(np.asarray(geom.positions, dtype=float))
    eigvals, eigvecs = np.linalg.eigh(hess)
    if eigvals[0] <= 0:
        raise GeometryError(
            f"Hessian not positive definite (lowest eigenvalue {eigvals[0]:.3e})"
        )
    vectors = eigvecs.T.copy()
    for k in range(vectors.shape[0]):
        lead = np.argmax(np.abs(vectors[k]))
        if vectors[k, lead] < 0:
            vectors[k] = -vectors[k]
    return ModeTable(np.sqrt(eigvals), vectors)


def cavity_coupling_profile(
    geom: ChainGeometry, g0: float, k: float, phase: float = 0.0
) -> CouplingProfile:
    """Per-ion cavity couplings ``g0 * sin(k z_i + phase)``."""
    if g0 <= 0:
        raise ValueError("g0 must be > 0")
    phases = k * np.asarray(geom.positions) + phase
    return CouplingProfile(g0 * np.sin(phases), g0, phases, k, phase)


def sampled_coupling_profile(
    n_ions: int, g0: float, rng: np.random.Generator
) -> CouplingProfile:
    """Coupling profile with standing-wave phases drawn uniformly.

    The optical wavelength is a few hundred nm against micron-scale ion
    spacings, so the phases ``k z_i mod 2pi`` are effectively random; this
    is the default for ensemble sweeps.
    """
    if g0 <= 0:
        raise ValueError("g0 must be > 0")
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_ions)
    return CouplingProfile(g0 * np.sin(phases), g0, phases, None, 0.0)


def quadrupole_weight_profile(
    coupling: CouplingProfile,
    cfg: QuadrupoleFieldConfig,
    eta: float,
    eta_spurious: float,
    nbar_spurious: float = 0.0,
) -> QuadrupoleProfile:
    """Carrier and sideband weights of the quadrupole drive.

    The drive pattern sits at ``coupling.phases + cfg.pattern_phase``; a
    nonzero ``pattern_phase`` models an imperfect interferometric lock
    between the quadrupole interference pattern and the cavity mode.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    if eta_spurious < 0.0:
        raise ValueError("eta_spurious must be >= 0")
    theta = np.asarray(coupling.phases) + cfg.pattern_phase
    return QuadrupoleProfile(
        carrier=np.cos(theta),
        sideband=-np.sin(theta),
        eta=eta,
        eta_spurious=eta_spurious,
        n_ions=len(theta),
        nbar_spurious=nbar_spurious,
    )
