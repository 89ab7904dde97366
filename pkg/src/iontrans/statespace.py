"""Excitation-truncated Hilbert spaces and sparse operators.

A basis label is ``(pattern, n_bus, n_spur, n_ph)`` where ``pattern`` is a
tuple of per-ion level indices (0, 1 and optionally 2 for the optically
excited level) and the remaining entries are the bus-phonon, lumped
spurious-phonon and cavity-photon occupation numbers.  A label is kept
when it satisfies every individual cutoff and the total-excitation cap
(ions not in level 0, plus all mode quanta).

Transitions that would leave the sector are dropped; the resulting
truncation error is certified by the cutoff-convergence checks in the
protocol layer rather than handled here.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, product
from math import comb

import numpy as np
import scipy.sparse as sp

_MODE_SLOT = {"bus": 1, "spurious": 2, "photon": 3}
_PRUNE_TOL = 1e-15


class BudgetError(MemoryError):
    """Requested sector exceeds the configured dimension budget."""

    def __init__(self, dimension: int, budget: int):
        self.dimension = dimension
        self.budget = budget
        super().__init__(f"sector dimension {dimension} exceeds budget {budget}")


@dataclass(frozen=True)
class SectorConfig:
    """Caps defining an excitation-truncated sector.

    ``max_ion_excitations`` counts ions not in level 0; ``total_cap``
    bounds ion excitations plus all mode quanta.  A cutoff of 0 pins the
    corresponding mode to its ground state.
    """

    n_ions: int
    levels_per_ion: int = 2
    max_ion_excitations: int = 1
    bus_cutoff: int = 0
    spurious_cutoff: int = 0
    photon_cutoff: int = 0
    total_cap: int = 1
    dimension_budget: int = 500_000

    def __post_init__(self):
        if self.n_ions < 1:
            raise ValueError("n_ions must be >= 1")
        if self.levels_per_ion not in (2, 3):
            raise ValueError("levels_per_ion must be 2 or 3")
        if self.max_ion_excitations < 1:
            raise ValueError("max_ion_excitations must be >= 1")
        if self.total_cap < self.max_ion_excitations:
            raise ValueError("total_cap must be >= max_ion_excitations")
        for name in ("bus_cutoff", "spurious_cutoff", "photon_cutoff"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


class SectorBasis:
    """Ordered basis of an excitation-truncated sector.

    Labels are sorted lexicographically by ``(pattern, n_bus, n_spur,
    n_ph)`` so the sparse structure of every operator is reproducible.
    """

    def __init__(self, config: SectorConfig, labels: list[tuple]):
        self.config = config
        self.labels = labels
        self.index = {label: i for i, label in enumerate(labels)}
        if len(self.index) != len(labels):
            raise ValueError("duplicate basis labels")

    @property
    def dimension(self) -> int:
        return len(self.labels)

    def index_of(self, label: tuple) -> int:
        return self.index[label]

    def excitation_count(self, label: tuple) -> int:
        pattern, n, ns, p = label
        return sum(1 for lv in pattern if lv != 0) + n + ns + p

    def state(self, label: tuple) -> np.ndarray:
        """Unit vector for a single basis label."""
        psi = np.zeros(self.dimension, dtype=complex)
        psi[self.index[label]] = 1.0
        return psi

    def ground_label(self) -> tuple:
        return ((0,) * self.config.n_ions, 0, 0, 0)


def sector_dimension(cfg: SectorConfig) -> int:
    """Dimension of the sector by direct combinatorial counting."""
    mode_combos = [0] * (cfg.total_cap + 1)
    for n, ns, p in product(
        range(cfg.bus_cutoff + 1),
        range(cfg.spurious_cutoff + 1),
        range(cfg.photon_cutoff + 1),
    ):
        for m in range(cfg.total_cap + 1):
            if m + n + ns + p <= cfg.total_cap:
                mode_combos[m] += 1
    excited_levels = cfg.levels_per_ion - 1
    total = 0
    for m in range(min(cfg.max_ion_excitations, cfg.n_ions) + 1):
        total += comb(cfg.n_ions, m) * excited_levels**m * mode_combos[m]
    return total


def build_sector_basis(cfg: SectorConfig) -> SectorBasis:
    """Enumerate every label satisfying the caps, in lexicographic order."""
    dim = sector_dimension(cfg)
    if dim > cfg.dimension_budget:
        raise BudgetError(dim, cfg.dimension_budget)

    excited = list(range(1, cfg.levels_per_ion))
    patterns = []
    for m in range(min(cfg.max_ion_excitations, cfg.n_ions) + 1):
        for sites in combinations(range(cfg.n_ions), m):
            for levels in product(excited, repeat=m):
                pat = [0] * cfg.n_ions
                for site, lv in zip(sites, levels):
                    pat[site] = lv
                patterns.append((tuple(pat), m))

    labels = []
    for pat, m in patterns:
        room = cfg.total_cap - m
        for n in range(min(cfg.bus_cutoff, room) + 1):
            for ns in range(min(cfg.spurious_cutoff, room - n) + 1):
                for p in range(min(cfg.photon_cutoff, room - n - ns) + 1):
                    labels.append((pat, n, ns, p))
    labels.sort()
    assert len(labels) == dim
    return SectorBasis(cfg, labels)


@dataclass(frozen=True)
class SparseOperator:
    """Sparse operator on a sector, wrapping a CSR matrix."""

    dimension: int
    matrix: sp.csr_matrix

    @staticmethod
    def from_triplets(dimension, rows, cols, values) -> "SparseOperator":
        mat = sp.coo_matrix(
            (values, (rows, cols)), shape=(dimension, dimension), dtype=complex
        ).tocsr()
        mat.sum_duplicates()
        mat.data[np.abs(mat.data) <= _PRUNE_TOL] = 0.0
        mat.eliminate_zeros()
        return SparseOperator(dimension, mat)

    def dagger(self) -> "SparseOperator":
        return SparseOperator(self.dimension, self.matrix.conjugate().transpose().tocsr())

    def hermiticity_defect(self) -> float:
        diff = self.matrix - self.matrix.conjugate().transpose()
        return 0.0 if diff.nnz == 0 else float(np.max(np.abs(diff.data)))

    def to_coo(self):
        """Canonically sorted ``(row, col, value)`` triplets."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return list(zip(coo.row[order], coo.col[order], coo.data[order]))

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def __add__(self, other):
        return SparseOperator(self.dimension, (self.matrix + other.matrix).tocsr())

    def __mul__(self, scalar):
        return SparseOperator(self.dimension, (scalar * self.matrix).tocsr())

    __rmul__ = __mul__

    def __matmul__(self, other):
        return SparseOperator(self.dimension, (self.matrix @ other.matrix).tocsr())


def _map_labels(basis: SectorBasis, action) -> SparseOperator:
    """Build an operator from a per-label generator of (new_label, amp).

    ``action(label)`` yields the images of each basis ket; images outside
    the sector are dropped.
    """
    rows, cols, vals = [], [], []
    for col, label in enumerate(basis.labels):
        for new_label, amp in action(label):
            row = basis.index.get(new_label)
            if row is not None and amp != 0.0:
                rows.append(row)
                cols.append(col)
                vals.append(amp)
    return SparseOperator.from_triplets(basis.dimension, rows, cols, vals)


def transition_op(basis: SectorBasis, ion: int, to_level: int, from_level: int) -> SparseOperator:
    """Single-site operator |to><from| on one ion."""
    if not 0 <= ion < basis.config.n_ions:
        raise ValueError(f"ion index {ion} out of range")
    for lv in (to_level, from_level):
        if not 0 <= lv < basis.config.levels_per_ion:
            raise ValueError(f"level {lv} out of range")

    def action(label):
        pattern, n, ns, p = label
        if pattern[ion] == from_level:
            new_pat = pattern[:ion] + (to_level,) + pattern[ion + 1 :]
            yield (new_pat, n, ns, p), 1.0

    return _map_labels(basis, action)


def weighted_transition_op(
    basis: SectorBasis, to_level: int, from_level: int, weights: np.ndarray
) -> SparseOperator:
    """Collective operator ``sum_i w_i |to><from|_i``."""
    weights = np.asarray(weights)
    if weights.shape != (basis.config.n_ions,):
        raise ValueError(
            f"weight vector length {weights.shape} does not match N={basis.config.n_ions}"
        )

    def action(label):
        pattern, n, ns, p = label
        for ion, w in enumerate(weights):
            if pattern[ion] == from_level:
                new_pat = pattern[:ion] + (to_level,) + pattern[ion + 1 :]
                yield (new_pat, n, ns, p), w

    return _map_labels(basis, action)


def sideband_coupling_op(
    basis: SectorBasis, weights: np.ndarray, mode: str,
    upper: int = 1, lower: int = 0,
) -> SparseOperator:
    """Composite drive ``sum_i w_i (|u><l|_i + |l><u|_i)(b + b^dag)``.

    Built atomically, label to label, so Hermiticity survives the sector
    truncation exactly (a product of two truncated factors would not: the
    intermediate state can fall outside the sector even when initial and
    final states are inside).
    """
    weights = np.asarray(weights)
    if weights.shape != (basis.config.n_ions,):
        raise ValueError("weight vector length does not match N")
    slot = _MODE_SLOT[mode]

    def action(label):
        pattern = label[0]
        occ = label[slot]
        for ion, w in enumerate(weights):
            if w == 0.0:
                continue
            if pattern[ion] == lower:
                new_pat = pattern[:ion] + (upper,) + pattern[ion + 1 :]
            elif pattern[ion] == upper:
                new_pat = pattern[:ion] + (lower,) + pattern[ion + 1 :]
            else:
                continue
            for shift, amp in ((-1, np.sqrt(occ)), (1, np.sqrt(occ + 1))):
                if occ + shift < 0:
                    continue
                new = list(label)
                new[0] = new_pat
                new[slot] = occ + shift
                yield tuple(new), w * amp

    return _map_labels(basis, action)


def sideband_exchange_op(
    basis: SectorBasis, weights: np.ndarray, mode: str,
    upper: int = 1, lower: int = 0,
) -> SparseOperator:
    """Excitation-conserving part ``sum_i w_i (|u><l|_i b + |l><u|_i b^dag)``.

    The rotating-wave cousin of :func:`sideband_coupling_op`; commutes
    with the total excitation count.
    """
    weights = np.asarray(weights)
    if weights.shape != (basis.config.n_ions,):
        raise ValueError("weight vector length does not match N")
    slot = _MODE_SLOT[mode]

    def action(label):
        pattern = label[0]
        occ = label[slot]
        for ion, w in enumerate(weights):
            if w == 0.0:
                continue
            if pattern[ion] == lower and occ > 0:
                new_pat = pattern[:ion] + (upper,) + pattern[ion + 1 :]
                new = list(label)
                new[0] = new_pat
                new[slot] = occ - 1
                yield tuple(new), w * np.sqrt(occ)
            elif pattern[ion] == upper:
                new_pat = pattern[:ion] + (lower,) + pattern[ion + 1 :]
                new = list(label)
                new[0] = new_pat
                new[slot] = occ + 1
                yield tuple(new), w * np.sqrt(occ + 1)

    return _map_labels(basis, action)


def cavity_exchange_op(
    basis: SectorBasis, weights: np.ndarray,
    excited: int = 2, ground: int = 0,
) -> SparseOperator:
    """Composite coupling ``sum_i w_i (|e><g|_i a + |g><e|_i a^dag)``."""
    weights = np.asarray(weights)
    if weights.shape != (basis.config.n_ions,):
        raise ValueError("weight vector length does not match N")
    slot = _MODE_SLOT["photon"]

    def action(label):
        pattern = label[0]
        occ = label[slot]
        for ion, w in enumerate(weights):
            if w == 0.0:
                continue
            if pattern[ion] == ground and occ > 0:
                new_pat = pattern[:ion] + (excited,) + pattern[ion + 1 :]
                new = list(label)
                new[0] = new_pat
                new[slot] = occ - 1
                yield tuple(new), w * np.sqrt(occ)
            elif pattern[ion] == excited:
                new_pat = pattern[:ion] + (ground,) + pattern[ion + 1 :]
                new = list(label)
                new[0] = new_pat
                new[slot] = occ + 1
                yield tuple(new), w * np.sqrt(occ + 1)

    return _map_labels(basis, action)


def mode_lower_op(basis: SectorBasis, mode: str) -> SparseOperator:
    """Annihilation operator on ``bus``, ``spurious`` or ``photon``."""
    slot = _MODE_SLOT[mode]

    def action(label):
        occ = label[slot]
        if occ > 0:
            new = list(label)
            new[slot] = occ - 1
            yield tuple(new), np.sqrt(occ)

    return _map_labels(basis, action)


def mode_raise_op(basis: SectorBasis, mode: str) -> SparseOperator:
    return mode_lower_op(basis, mode).dagger()


def mode_number_op(basis: SectorBasis, mode: str) -> SparseOperator:
    slot = _MODE_SLOT[mode]
    diag = np.array([label[slot] for label in basis.labels], dtype=complex)
    return SparseOperator(basis.dimension, sp.diags(diag).tocsr())


def level_population_op(basis: SectorBasis, level: int) -> SparseOperator:
    """Diagonal operator counting ions in ``level``."""
    diag = np.array(
        [sum(1 for lv in pat if lv == level) for pat, *_ in basis.labels], dtype=complex
    )
    return SparseOperator(basis.dimension, sp.diags(diag).tocsr())


def total_excitation_op(basis: SectorBasis) -> SparseOperator:
    diag = np.array([basis.excitation_count(lb) for lb in basis.labels], dtype=complex)
    return SparseOperator(basis.dimension, sp.diags(diag).tocsr())


def projector_op(basis: SectorBasis, label: tuple) -> SparseOperator:
    i = basis.index_of(label)
    return SparseOperator.from_triplets(basis.dimension, [i], [i], [1.0])


def identity_op(basis: SectorBasis) -> SparseOperator:
    return SparseOperator(basis.dimension, sp.identity(basis.dimension, dtype=complex, format="csr"))


_BUILDERS = {
    "transition": transition_op,
    "weighted_transition": weighted_transition_op,
    "sideband_coupling": sideband_coupling_op,
    "sideband_exchange": sideband_exchange_op,
    "cavity_exchange": cavity_exchange_op,
    "lower": mode_lower_op,
    "raise": mode_raise_op,
    "number": mode_number_op,
    "level_population": level_population_op,
    "total_excitations": total_excitation_op,
    "projector": projector_op,
    "identity": identity_op,
}


def build_operator(kind: str, basis: SectorBasis, **kwargs) -> SparseOperator:
    """Dispatch on an operator-spec name; see the ``*_op`` builders."""
    try:
        builder = _BUILDERS[kind]
    except KeyError:
        raise ValueError(f"unknown operator kind {kind!r}") from None
    return builder(basis, **kwargs)


def collective_excitation_state(
    basis: SectorBasis,
    weights: np.ndarray,
    n_excited: int = 1,
    mode_occ: tuple[int, int, int] = (0, 0, 0),
) -> np.ndarray:
    """Normalized coupling-weighted spin-wave state.

    For ``n_excited`` ions in level 1 the amplitude of each occupation
    pattern is the product of the weights of the excited ions, i.e. the
    single-excitation state is ``sum_i w_i |0..1_i..0>`` and the
    two-excitation one ``sum_{i<j} w_i w_j |..1_i..1_j..>``, normalized.
    """
    weights = np.asarray(weights, dtype=float)
    n = basis.config.n_ions
    psi = np.zeros(basis.dimension, dtype=complex)
    for sites in combinations(range(n), n_excited):
        pat = [0] * n
        amp = 1.0
        for s in sites:
            pat[s] = 1
            amp *= weights[s]
        psi[basis.index[(tuple(pat), *mode_occ)]] = amp
    norm = np.linalg.norm(psi)
    if norm == 0:
        raise ValueError("all weights vanish; collective state undefined")
    return psi / norm


def expectation(state: np.ndarray, op: SparseOperator) -> complex:
    """<psi|A|psi> for a vector or Tr(rho A) for a density matrix."""
    state = np.asarray(state)
    if state.ndim == 1:
        if state.shape[0] != op.dimension:
            raise ValueError("state/operator dimension mismatch")
        return complex(np.vdot(state, op.matrix @ state))
    if state.shape != (op.dimension, op.dimension):
        raise ValueError("density/operator dimension mismatch")
    coo = op.matrix.tocoo()
    return complex(np.sum(coo.data * state[coo.col, coo.row]))


def reduced_labels(basis: SectorBasis, mode: str = "spurious") -> list[tuple]:
    """Sorted labels of the basis with one mode's occupation removed."""
    slot = _MODE_SLOT[mode]
    seen = {lb[:slot] + lb[slot + 1 :] for lb in basis.labels}
    return sorted(seen)


def partial_trace_mode(rho: np.ndarray, basis: SectorBasis, mode: str) -> np.ndarray:
    """Trace one mode out of a density matrix.

    Returns the reduced density matrix over ``reduced_labels(basis,
    mode)``; the trace is preserved exactly.
    """
    if rho.shape != (basis.dimension, basis.dimension):
        raise ValueError("density/basis dimension mismatch")
    slot = _MODE_SLOT[mode]
    red = reduced_labels(basis, mode)
    red_index = {lb: i for i, lb in enumerate(red)}
    occupations = sorted({lb[slot] for lb in basis.labels})
    out = np.zeros((len(red), len(red)), dtype=complex)
    for occ in occupations:
        full_idx, red_idx = [], []
        for i, lb in enumerate(basis.labels):
            if lb[slot] == occ:
                full_idx.append(i)
                red_idx.append(red_index[lb[:slot] + lb[slot + 1 :]])
        fi = np.asarray(full_idx)
        ri = np.asarray(red_idx)
        out[np.ix_(ri, ri)] += rho[np.ix_(fi, fi)]
    return out


def partial_trace_spurious(rho: np.ndarray, basis: SectorBasis) -> np.ndarray:
    return partial_trace_mode(rho, basis, "spurious")


def check_state_norm(psi: np.ndarray, tol: float = 1e-8) -> float:
    """Norm defect of a state vector; raises if above ``tol``."""
    defect = abs(np.linalg.norm(psi) - 1.0)
    if defect > tol:
        raise ValueError(f"state norm drifted by {defect:.3e}")
    return defect


def check_density(
    rho: np.ndarray,
    herm_tol: float = 1e-10,
    trace_tol: float = 1e-8,
    eig_tol: float = 1e-8,
) -> dict:
    """Hermiticity / trace / positivity diagnostics of a density matrix."""
    herm = float(np.max(np.abs(rho - rho.conjugate().T)))
    trace = abs(np.trace(rho).real - 1.0)
    min_eig = float(np.linalg.eigvalsh(0.5 * (rho + rho.conjugate().T))[0])
    if herm > herm_tol:
        raise ValueError(f"density hermiticity defect {herm:.3e}")
    if trace > trace_tol:
        raise ValueError(f"density trace drifted by {trace:.3e}")
    if min_eig < -eig_tol:
        raise ValueError(f"density eigenvalue {min_eig:.3e} below tolerance")
    return {"hermiticity": herm, "trace_defect": trace, "min_eigenvalue": min_eig}


def dump_operator(op: SparseOperator, path) -> None:
    """Debug dump as a coordinate list: ``row col re im`` per line."""
    with open(path, "w", newline="\n") as fh:
        for row, col, val in op.to_coo():
            fh.write(f"{row} {col} {val.real:.17g} {val.imag:.17g}\n")
