"""Time-dependent propagation and process-fidelity machinery.

Pure states evolve under ``i dpsi/dt = H(t) psi`` with an adaptive
exponential-midpoint integrator (Lanczos for the matrix exponential,
step-doubling error control); density matrices evolve under the Lindblad
equation through the vectorized superoperator.  Requested time integrals
of observables ride inside the (augmented) generator, so they converge at
the integrator's order rather than by post-hoc quadrature.

A reconstructed logical channel (2x2 input to 2x2 output plus leakage)
supports exact uniform pure-state averaging of the fidelity: the Haar
average over the Bloch sphere of a functional linear in the input density
matrix equals the average over the six cardinal states.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh_tridiagonal
from scipy.sparse.linalg import expm_multiply

from .statespace import SparseOperator


class StiffnessError(RuntimeError):
    """Step size underflowed during propagation."""

    def __init__(self, time: float, dt: float):
        self.time = time
        self.dt = dt
        super().__init__(f"step size underflow ({dt:.3e}) at t = {time:.6g}")


# ---------------------------------------------------------------------------
# pulse shapes


@dataclass(frozen=True)
class GaussianPulse:
    """Gaussian amplitude envelope peaking at ``center``."""

    peak: float
    center: float
    width: float

    def __post_init__(self):
        if self.peak < 0 or self.width <= 0:
            raise ValueError("gaussian pulse needs peak >= 0 and width > 0")

    def __call__(self, t: float, duration: float) -> float:
        return self.peak * np.exp(-((t - self.center) ** 2) / (2.0 * self.width**2))


@dataclass(frozen=True)
class Sin2Ramp:
    """sin^2 turn-on from 0 at ``start`` to ``peak`` at ``stop``, then flat."""

    start: float
    stop: float
    peak: float

    def __post_init__(self):
        if self.peak < 0 or self.stop <= self.start:
            raise ValueError("ramp needs peak >= 0 and stop > start")

    def __call__(self, t: float, duration: float) -> float:
        if t <= self.start:
            return 0.0
        if t >= self.stop:
            return self.peak
        x = (t - self.start) / (self.stop - self.start)
        return self.peak * np.sin(0.5 * np.pi * x) ** 2


@dataclass(frozen=True)
class ConstantPulse:
    value: float

    def __call__(self, t: float, duration: float) -> float:
        return self.value


@dataclass(frozen=True)
class LinearChirp:
    """Detuning swept linearly from ``start_value`` to ``end_value``."""

    start_value: float
    end_value: float

    def __post_init__(self):
        if not (np.isfinite(self.start_value) and np.isfinite(self.end_value)):
            raise ValueError("chirp endpoints must be finite")

    def __call__(self, t: float, duration: float) -> float:
        return self.start_value + (self.end_value - self.start_value) * t / duration


@dataclass(frozen=True)
class PulseSchedule:
    """Named control shapes over a fixed duration."""

    duration: float
    controls: dict

    def value(self, name: str, t: float) -> float:
        if not -1e-12 * self.duration <= t <= self.duration * (1 + 1e-12):
            raise ValueError(f"t = {t!r} outside schedule [0, {self.duration!r}]")
        return self.controls[name](t, self.duration)

    def values(self, t: float) -> dict:
        return {name: self.value(name, t) for name in self.controls}


def pulse_value(sched: PulseSchedule, t: float) -> dict:
    """Evaluate every control of a schedule at time ``t``."""
    return sched.values(t)


# ---------------------------------------------------------------------------
# time-dependent operators


class TimeDependentOperator:
    """Linear combination ``sum_k c_k(t) A_k`` of sparse operators.

    Coefficients are floats or callables of time.  The combination is
    frozen onto the union sparsity pattern once, so re-assembly at a new
    time only rescales data arrays.
    """

    def __init__(self, terms: list):
        if not terms:
            raise ValueError("need at least one term")
        self.terms = [
            (coef, op.matrix if isinstance(op, SparseOperator) else sp.csr_matrix(op))
            for coef, op in terms
        ]
        self.dimension = self.terms[0][1].shape[0]
        for _, mat in self.terms:
            if mat.shape != (self.dimension, self.dimension):
                raise ValueError("term dimensions differ")

        union = None
        for _, mat in self.terms:
            pattern = abs(mat)
            union = pattern if union is None else union + pattern
        union = union.tocsr()
        union.sort_indices()
        self._indptr = union.indptr
        self._indices = union.indices
        dim = self.dimension
        row_of = np.repeat(np.arange(dim), np.diff(union.indptr))
        union_keys = row_of.astype(np.int64) * dim + union.indices

        self._aligned = []
        all_real = True
        for coef, mat in self.terms:
            mat = mat.tocsr()
            mat.sort_indices()
            rows = np.repeat(np.arange(dim), np.diff(mat.indptr))
            keys = rows.astype(np.int64) * dim + mat.indices
            pos = np.searchsorted(union_keys, keys)
            data = np.zeros(union.nnz, dtype=complex)
            data[pos] = mat.data
            if np.max(np.abs(data.imag), initial=0.0) > 0:
                all_real = False
            self._aligned.append((coef, data))
        self.is_real = all_real
        if all_real:
            self._aligned = [(c, d.real.copy()) for c, d in self._aligned]

    def coefficients_at(self, t: float) -> list[float]:
        return [c(t) if callable(c) else c for c, _ in self._aligned]

    def _combine(self, values) -> sp.csr_matrix:
        data = None
        for (_, aligned), value in zip(self._aligned, values):
            contrib = value * aligned
            data = contrib if data is None else data + contrib
        return sp.csr_matrix(
            (data, self._indices, self._indptr),
            shape=(self.dimension, self.dimension),
        )

    def csr_at(self, t: float) -> sp.csr_matrix:
        return self._combine(self.coefficients_at(t))

    def at(self, t: float) -> SparseOperator:
        return SparseOperator(self.dimension, self.csr_at(t))

    def commutator_table(self):
        """Pairwise commutators [A_k, A_l] (k < l) of the term operators.

        Built lazily; drops pairs that commute exactly.  Feeds the
        fourth-order Magnus correction.
        """
        if not hasattr(self, "_comms"):
            comms = []
            for k in range(len(self.terms)):
                for l in range(k + 1, len(self.terms)):
                    # two constant coefficients never produce a correction
                    if not callable(self.terms[k][0]) and not callable(self.terms[l][0]):
                        continue
                    c = (self.terms[k][1] @ self.terms[l][1]
                         - self.terms[l][1] @ self.terms[k][1]).tocsr()
                    c.data[np.abs(c.data) <= 1e-15] = 0.0
                    c.eliminate_zeros()
                    if c.nnz:
                        comms.append((k, l, c))
            self._comms = comms
        return self._comms

    def _exponent_combo(self):
        """Frozen union pattern over the terms and their commutators.

        Returns aligned complex data arrays plus one reusable CSR whose
        data is overwritten in place on every evaluation.
        """
        if hasattr(self, "_exp"):
            return self._exp
        comms = self.commutator_table()
        mats = [mat for _, mat in self.terms] + [m for _, _, m in comms]
        union = None
        for mat in mats:
            pattern = abs(mat)
            union = pattern if union is None else union + pattern
        union = union.tocsr()
        union.sort_indices()
        dim = self.dimension
        row_of = np.repeat(np.arange(dim), np.diff(union.indptr))
        union_keys = row_of.astype(np.int64) * dim + union.indices
        aligned = []
        for mat in mats:
            mat = mat.tocsr()
            mat.sort_indices()
            rows = np.repeat(np.arange(dim), np.diff(mat.indptr))
            keys = rows.astype(np.int64) * dim + mat.indices
            pos = np.searchsorted(union_keys, keys)
            data = np.zeros(union.nnz, dtype=complex)
            data[pos] = mat.data
            aligned.append(data)
        out = sp.csr_matrix(
            (np.zeros(union.nnz, dtype=complex), union.indices, union.indptr),
            shape=(dim, dim),
        )
        self._exp = (aligned[: len(self.terms)], [
            (k, l, aligned[len(self.terms) + i]) for i, (k, l, _) in enumerate(comms)
        ], out)
        return self._exp

    def effective_exponent(self, t: float, dt: float) -> sp.csr_matrix:
        """Hermitian generator of the 4th-order Magnus step over [t, t+dt].

        Two-point Gauss-Legendre average of H plus the leading commutator
        correction; the propagator is ``exp(-1j * dt * result)``.  The
        returned matrix is a shared buffer, overwritten by the next call.
        """
        term_data, comm_data, out = self._exponent_combo()
        s = 0.5 * np.sqrt(3.0) / 3.0
        t1, t2 = t + (0.5 - s) * dt, t + (0.5 + s) * dt
        c1 = [c(t1) if callable(c) else c for c, _ in self.terms]
        c2 = [c(t2) if callable(c) else c for c, _ in self.terms]
        acc = out.data
        acc[:] = 0.0
        for value, data in zip((0.5 * (a + b) for a, b in zip(c1, c2)), term_data):
            if value != 0.0:
                acc += value * data
        # i[A, B] is Hermitian for Hermitian A, B.
        scale = -1j * np.sqrt(3.0) * dt / 12.0
        for k, l, data in comm_data:
            gamma = c2[k] * c1[l] - c1[k] * c2[l]
            if gamma != 0.0:
                acc += (scale * gamma) * data
        return out

    def generator_exponent(self, t: float, dt: float) -> sp.csr_matrix:
        """4th-order Magnus exponent for a general (non-Hermitian)
        generator: ``dt * mean + (sqrt(3) dt^2 / 12) [A_2, A_1]``.

        The propagator is ``exp(result)``; trace annihilation of the
        terms is inherited by the commutator, so Lindblad generators stay
        trace preserving.  The returned matrix is a shared buffer.
        """
        term_data, comm_data, out = self._exponent_combo()
        s = 0.5 * np.sqrt(3.0) / 3.0
        t1, t2 = t + (0.5 - s) * dt, t + (0.5 + s) * dt
        c1 = [c(t1) if callable(c) else c for c, _ in self.terms]
        c2 = [c(t2) if callable(c) else c for c, _ in self.terms]
        acc = out.data
        acc[:] = 0.0
        for value, data in zip((0.5 * dt * (a + b) for a, b in zip(c1, c2)), term_data):
            if value != 0.0:
                acc += value * data
        scale = np.sqrt(3.0) * dt * dt / 12.0
        for k, l, data in comm_data:
            gamma = c2[k] * c1[l] - c1[k] * c2[l]
            if gamma != 0.0:
                acc += (scale * gamma) * data
        return out


def _as_csr_factory(hamiltonian):
    """Normalize the Hamiltonian argument to a ``t -> csr`` callable."""
    if isinstance(hamiltonian, TimeDependentOperator):
        return hamiltonian.csr_at, hamiltonian.dimension
    if isinstance(hamiltonian, SparseOperator):
        return (lambda t: hamiltonian.matrix), hamiltonian.dimension
    if callable(hamiltonian):
        probe = hamiltonian(0.0)
        mat = probe.matrix if isinstance(probe, SparseOperator) else probe

        def factory(t):
            h = hamiltonian(t)
            return h.matrix if isinstance(h, SparseOperator) else h

        return factory, mat.shape[0]
    raise TypeError("hamiltonian must be TimeDependentOperator, SparseOperator or callable")


def _make_matvec(mat: sp.csr_matrix):
    # Real Hamiltonians act on the interleaved re/im view: two real
    # matvecs instead of one complex one, at half the flops.
    if mat.dtype == np.float64:

        def mv(x):
            xr = x.view(np.float64).reshape(-1, 2)
            return np.ascontiguousarray(mat @ xr).view(np.complex128).ravel()

        return mv
    return lambda x: mat @ x


class _KrylovFailure(Exception):
    pass


def _lanczos_expm(matvec, v, z, tol, m_max=70):
    """Approximate ``exp(z A) v`` for Hermitian A via the Lanczos process.

    ``z`` is the (complex) scale, e.g. ``-1j * dt``.  Full
    reorthogonalization; raises ``_KrylovFailure`` if ``m_max`` vectors do
    not reach ``tol``.
    """
    norm0 = np.linalg.norm(v)
    if norm0 == 0.0:
        return v.copy()
    basis = np.empty((m_max + 1, v.shape[0]), dtype=complex)
    basis[0] = v / norm0
    w = matvec(basis[0])
    alpha = [np.vdot(basis[0], w).real]
    w = w - alpha[0] * basis[0]
    beta: list[float] = []

    for j in range(1, m_max + 1):
        b = np.linalg.norm(w)
        if b < 1e-14 * max(1.0, abs(alpha[0])):
            u = _tridiag_expm_col(alpha, beta, z)
            return norm0 * (u @ basis[: len(u)])
        if j == m_max:
            break
        basis[j] = w / b
        beta.append(b)
        w = matvec(basis[j]) - b * basis[j - 1]
        a = np.vdot(basis[j], w).real
        w = w - a * basis[j]
        w = w - basis[: j + 1].T @ (basis[: j + 1].conj() @ w)
        alpha.append(a)
        if j >= 3:
            u = _tridiag_expm_col(alpha, beta, z)
            err = np.linalg.norm(w) * abs(u[-1])
            if err < tol:
                return norm0 * (u @ basis[: len(u)])
    raise _KrylovFailure


def _tridiag_expm_col(alpha, beta, z):
    """First column of ``exp(z T)`` for a real symmetric tridiagonal T."""
    if len(alpha) == 1:
        return np.array([np.exp(z * alpha[0])])
    lam, q = eigh_tridiagonal(alpha, beta)
    return q @ (np.exp(z * lam) * q[0].conj())


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """States/densities sampled on a time grid, plus diagnostics.

    ``accumulators`` maps observable names to their running time
    integrals at the sample times; ``observables`` to instantaneous
    expectation values there.
    """

    times: np.ndarray
    states: np.ndarray
    accumulators: dict = field(default_factory=dict)
    observables: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.states[-1]

    def accumulated(self, name: str) -> float:
        return float(self.accumulators[name][-1])


def dump_trajectory(traj: Trajectory, path) -> None:
    """CSV dump with columns ``t`` and every named observable."""
    names = sorted(traj.observables)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(["t"] + names) + "\n")
        for i, t in enumerate(traj.times):
            row = [f"{t:.17g}"]
            row += [f"{traj.observables[n][i].real:.17g}" for n in names]
            fh.write(",".join(row) + "\n")


def _adaptive_steps(apply_step, y0, t0, t1, tol_rate, first_dt, order=2, recheck_every=1):
    """March ``y`` from t0 to t1 with step-doubling error control.

    ``apply_step(t, dt, y)`` propagates ``y`` over ``[t, t+dt]``; one full
    step against two half steps estimates the local error.  With
    ``recheck_every > 1`` the measured error coefficient is reused for the
    following steps and only re-measured on schedule, saving the two extra
    propagations on steps in between.
    """
    t, y, dt = t0, y0, min(first_dt, t1 - t0)
    n_steps = 0
    min_dt_seen = np.inf
    span = t1 - t0
    power = order + 1
    coeff = None
    since_check = 0
    while t < t1 - 1e-12 * max(1.0, abs(t1)):
        dt = min(dt, t1 - t)
        if dt < 1e-12 * max(span, 1.0):
            raise StiffnessError(t, dt)
        allow = tol_rate * dt
        check = coeff is None or since_check >= recheck_every
        try:
            if check:
                y_full = apply_step(t, dt, y)
                y_half = apply_step(t, 0.5 * dt, y)
                y_half = apply_step(t + 0.5 * dt, 0.5 * dt, y_half)
                err = np.linalg.norm(y_full - y_half)
                coeff = max(err / dt**power, 1e-300)
                if err > allow:
                    dt *= max(0.25, 0.85 * (allow / err) ** (1.0 / power))
                    continue
                y_new = y_half
                since_check = 0
            else:
                if coeff * dt**power > 0.5 * allow:
                    dt = max(0.25 * dt, 0.8 * (0.5 * tol_rate / coeff) ** (1.0 / (power - 1)))
                    allow = tol_rate * dt
                y_new = apply_step(t, dt, y)
                since_check += 1
        except _KrylovFailure:
            dt *= 0.5
            coeff = None
            continue
        t += dt
        y = y_new
        n_steps += 1
        min_dt_seen = min(min_dt_seen, dt)
        err_est = coeff * dt**power
        grow = 2.5 if err_est == 0.0 else min(2.5, 0.85 * (allow / err_est) ** (1.0 / power))
        dt *= max(grow, 0.3)
    return y, dt, n_steps, min_dt_seen


def evolve_state(
    hamiltonian,
    psi0: np.ndarray,
    grid,
    tol: float = 1e-7,
    method: str = "magnus",
    observables: dict | None = None,
    krylov_max: int = 70,
    recheck_every: int = 1,
) -> Trajectory:
    """Propagate ``i dpsi/dt = H(t) psi`` over the sample grid.

    Parameters
    ----------
    hamiltonian : TimeDependentOperator, SparseOperator or callable
        ``H(t)``; a callable must map a time to a SparseOperator (or CSR).
    psi0 : ndarray
        Normalized initial state.
    grid : array_like
        Ascending sample times; propagation runs from ``grid[0]`` to
        ``grid[-1]``.
    tol : float
        Target 2-norm error of the final state (split uniformly over the
        schedule).
    method : {"magnus", "rk"}
        Adaptive exponential-midpoint (default) or explicit DOP853
        reference stepping.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    psi0 = np.asarray(psi0, dtype=complex)
    csr_at, dim = _as_csr_factory(hamiltonian)
    if psi0.shape != (dim,):
        raise ValueError("psi0 dimension mismatch")

    span = max(grid[-1] - grid[0], np.finfo(float).tiny)
    states = np.empty((len(grid), dim), dtype=complex)
    states[0] = psi0

    if method == "rk":
        from scipy.integrate import solve_ivp

        sol = solve_ivp(
            lambda t, y: -1j * (csr_at(t) @ y),
            (grid[0], grid[-1]),
            psi0,
            t_eval=grid,
            method="DOP853",
            rtol=tol,
            atol=tol * 1e-3,
        )
        if not sol.success:
            raise StiffnessError(sol.t[-1] if len(sol.t) else grid[0], 0.0)
        states = sol.y.T.astype(complex)
        n_steps, min_dt = len(sol.t), np.nan
    elif method == "magnus":
        tol_rate = tol / span
        order = 2
        if isinstance(hamiltonian, TimeDependentOperator):
            order = 4

            def apply_step(t, dt, y):
                mat = hamiltonian.effective_exponent(t, dt)
                mv = _make_matvec(mat)
                ktol = min(max(0.1 * tol_rate * dt, 2e-14), 1e-12)
                return _lanczos_expm(mv, y, -1j * dt, ktol, m_max=krylov_max)

        else:

            def apply_step(t, dt, y):
                mat = csr_at(t + 0.5 * dt)
                mv = _make_matvec(mat)
                ktol = min(max(0.1 * tol_rate * dt, 2e-14), 1e-12)
                return _lanczos_expm(mv, y, -1j * dt, ktol, m_max=krylov_max)

        psi = psi0.copy()
        dt = span / 64.0
        n_steps = 0
        min_dt = np.inf
        for i in range(1, len(grid)):
            psi, dt, steps, mdt = _adaptive_steps(
                apply_step, psi, grid[i - 1], grid[i], tol_rate, dt, order=order,
                recheck_every=recheck_every,
            )
            n_steps += steps
            min_dt = min(min_dt, mdt)
            states[i] = psi
    else:
        raise ValueError(f"unknown method {method!r}")

    norms = np.linalg.norm(states, axis=1)
    traj = Trajectory(
        times=grid,
        states=states,
        diagnostics={
            "n_steps": n_steps,
            "min_dt": min_dt,
            "max_norm_defect": float(np.max(np.abs(norms - 1.0))),
            "method": method,
            "tol": tol,
        },
    )
    if observables:
        for name, op in observables.items():
            traj.observables[name] = np.array(
                [np.vdot(s, op.matrix @ s) for s in states]
            )
    return traj


# ---------------------------------------------------------------------------
# Lindblad propagation


def liouvillian_terms(hamiltonian, jumps) -> list:
    """Vectorized Lindblad generator as ``(coef, superoperator)`` terms.

    Row-major vectorization: ``vec(A rho B) = (A kron B^T) vec(rho)``.
    The dissipator (time independent) is folded into a single constant
    term; each time-dependent Hamiltonian term maps to its own commutator
    superoperator.
    """
    if isinstance(hamiltonian, TimeDependentOperator):
        h_terms = [(coef, mat) for coef, mat in hamiltonian.terms]
    else:
        mat = hamiltonian.matrix if isinstance(hamiltonian, SparseOperator) else hamiltonian
        h_terms = [(1.0, sp.csr_matrix(mat))]
    dim = h_terms[0][1].shape[0]
    eye = sp.identity(dim, dtype=complex, format="csr")

    terms = []
    dissipator = sp.csr_matrix((dim * dim, dim * dim), dtype=complex)
    for op, rate in jumps or []:
        if rate < 0:
            raise ValueError("negative jump rate")
        L = op.matrix if isinstance(op, SparseOperator) else sp.csr_matrix(op)
        LdL = (L.conjugate().transpose() @ L).tocsr()
        dissipator = dissipator + rate * (
            sp.kron(L, L.conjugate(), format="csr")
            - 0.5 * sp.kron(LdL, eye, format="csr")
            - 0.5 * sp.kron(eye, LdL.transpose(), format="csr")
        )
    terms.append((1.0, dissipator.tocsr()))
    for coef, mat in h_terms:
        mat = sp.csr_matrix(mat, dtype=complex)
        comm = -1j * (sp.kron(mat, sp.identity(dim, format="csr"), format="csr")
                      - sp.kron(sp.identity(dim, format="csr"), mat.transpose(), format="csr"))
        terms.append((coef, comm.tocsr()))
    return terms


class LindbladPropagator:
    """Reusable Lindblad propagator over the vectorized density.

    Building the superoperator once lets segment-wise evolutions (e.g. a
    drain monitored chunk by chunk) skip the Kronecker assembly.
    ``accumulate`` maps names to operators whose expectation values ride
    as extra quadrature rows of the augmented generator, so their time
    integrals converge at the stepper's order.
    """

    def __init__(self, hamiltonian, jumps, accumulate: dict | None = None):
        terms = liouvillian_terms(hamiltonian, jumps)
        self.dim = int(np.sqrt(terms[0][1].shape[0]))
        self.acc_names = sorted(accumulate) if accumulate else []
        n_acc = len(self.acc_names)
        big = self.dim * self.dim + n_acc

        # Tr(A rho) = vec(A^T) . vec(rho) rides as one extra generator row.
        def augment(mat, with_rows):
            mat = sp.csr_matrix(mat)
            blocks = [[mat, None], [None, sp.csr_matrix((n_acc, n_acc), dtype=complex)]]
            if with_rows and n_acc:
                rows = sp.vstack(
                    [
                        sp.csr_matrix(
                            np.asarray(accumulate[n].matrix.transpose().todense()).reshape(1, -1)
                        )
                        for n in self.acc_names
                    ]
                )
                blocks[1][0] = rows
            return sp.bmat(blocks, format="csr")

        aug = [(terms[0][0], augment(terms[0][1], True))]
        aug += [(c, augment(m, False)) for c, m in terms[1:]]
        self.generator = TimeDependentOperator([(c, SparseOperator(big, m)) for c, m in aug])

    def evolve(
        self,
        rho0: np.ndarray,
        grid,
        tol: float = 1e-9,
        observables: dict | None = None,
        method: str = "magnus",
        recheck_every: int = 1,
        acc_init: dict | None = None,
    ) -> Trajectory:
        if tol <= 0:
            raise ValueError("tol must be > 0")
        grid = np.atleast_1d(np.asarray(grid, dtype=float))
        rho0 = np.asarray(rho0, dtype=complex)
        dim = self.dim
        if rho0.shape != (dim, dim):
            raise ValueError("rho0 dimension mismatch")
        n_acc = len(self.acc_names)
        acc0 = np.array(
            [complex((acc_init or {}).get(name, 0.0)) for name in self.acc_names]
        )
        y0 = np.concatenate([rho0.reshape(-1), acc0])
        span = max(grid[-1] - grid[0], np.finfo(float).tiny)
        ys = np.empty((len(grid), dim * dim + n_acc), dtype=complex)
        ys[0] = y0
        generator = self.generator

        if method == "rk":
            from scipy.integrate import solve_ivp

            sol = solve_ivp(
                lambda t, y: generator.csr_at(t) @ y,
                (grid[0], grid[-1]),
                y0,
                t_eval=grid,
                method="DOP853",
                rtol=tol,
                atol=tol * 1e-3,
            )
            if not sol.success:
                raise StiffnessError(sol.t[-1] if len(sol.t) else grid[0], 0.0)
            ys = sol.y.T.astype(complex)
            n_steps, min_dt = len(sol.t), np.nan
        elif method == "magnus":
            tol_rate = tol / span

            def apply_step(t, dt, y):
                mat = generator.generator_exponent(t, dt)
                return expm_multiply(mat, y, traceA=complex(mat.diagonal().sum()))

            y = y0.copy()
            dt = span / 64.0
            n_steps = 0
            min_dt = np.inf
            for i in range(1, len(grid)):
                y, dt, steps, mdt = _adaptive_steps(
                    apply_step, y, grid[i - 1], grid[i], tol_rate, dt,
                    order=4, recheck_every=recheck_every,
                )
                n_steps += steps
                min_dt = min(min_dt, mdt)
                ys[i] = y
        else:
            raise ValueError(f"unknown method {method!r}")

        densities = ys[:, : dim * dim].reshape(len(grid), dim, dim)
        traces = np.einsum("tii->t", densities).real
        herm = max(
            float(np.max(np.abs(rho - rho.conjugate().T))) for rho in densities
        )
        min_eig = min(
            float(np.linalg.eigvalsh(0.5 * (rho + rho.conjugate().T))[0])
            for rho in densities
        )
        traj = Trajectory(
            times=grid,
            states=densities,
            diagnostics={
                "n_steps": n_steps,
                "min_dt": min_dt,
                "max_trace_defect": float(np.max(np.abs(traces - traces[0]))),
                "max_herm_defect": herm,
                "min_eigenvalue": min_eig,
                "method": method,
                "tol": tol,
            },
        )
        for j, name in enumerate(self.acc_names):
            traj.accumulators[name] = ys[:, dim * dim + j].real
        if observables:
            coos = {name: op.matrix.tocoo() for name, op in observables.items()}
            for name, coo in coos.items():
                traj.observables[name] = np.array(
                    [np.sum(coo.data * rho[coo.col, coo.row]) for rho in densities]
                )
        return traj


def evolve_density(
    hamiltonian,
    jumps,
    rho0: np.ndarray,
    grid,
    tol: float = 1e-9,
    accumulate: dict | None = None,
    observables: dict | None = None,
    method: str = "magnus",
    recheck_every: int = 1,
) -> Trajectory:
    """Lindblad evolution of a density matrix.

    One-shot convenience wrapper around :class:`LindbladPropagator`.
    """
    prop = LindbladPropagator(hamiltonian, jumps, accumulate)
    return prop.evolve(
        rho0, grid, tol=tol, observables=observables, method=method,
        recheck_every=recheck_every,
    )


# ---------------------------------------------------------------------------
# logical channels and average fidelity

_CARDINAL = [
    np.array([1.0, 0.0], dtype=complex),
    np.array([0.0, 1.0], dtype=complex),
    np.array([1.0, 1.0], dtype=complex) / np.sqrt(2),
    np.array([1.0, -1.0], dtype=complex) / np.sqrt(2),
    np.array([1.0, 1.0j], dtype=complex) / np.sqrt(2),
    np.array([1.0, -1.0j], dtype=complex) / np.sqrt(2),
]


@dataclass
class ChannelEstimate:
    """Linear map on the logical qubit, reconstructed from evolutions.

    ``blocks[i, j]`` is the (projected, generally subnormalized) output
    operator ``E(|i><j|)``; population missing from ``E(|i><i|)`` is
    leakage out of the logical subspace.
    """

    blocks: np.ndarray
    flags: list = field(default_factory=list)

    def __post_init__(self):
        leak = self.leakage
        if leak > 0.5 and "high_leakage" not in self.flags:
            self.flags.append("high_leakage")
            warnings.warn(f"channel leakage {leak:.3f} exceeds 0.5", stacklevel=2)

    @property
    def leakage(self) -> float:
        pops = [1.0 - np.trace(self.blocks[i, i]).real for i in (0, 1)]
        return float(max(pops))

    def apply(self, rho: np.ndarray) -> np.ndarray:
        return np.einsum("ij,ijab->ab", np.asarray(rho, dtype=complex), self.blocks)

    def compose(self, inner: "ChannelEstimate") -> "ChannelEstimate":
        """Channel running ``inner`` first, then ``self``."""
        blocks = np.empty_like(self.blocks)
        for i in range(2):
            for j in range(2):
                blocks[i, j] = self.apply(inner.blocks[i, j])
        return ChannelEstimate(blocks, flags=sorted(set(self.flags + inner.flags)))

    def choi(self) -> np.ndarray:
        c = np.zeros((4, 4), dtype=complex)
        for i in range(2):
            for j in range(2):
                c[2 * i : 2 * i + 2, 2 * j : 2 * j + 2] = self.blocks[i, j]
        return c

    def cp_defect(self) -> float:
        """How far the Choi matrix dips below positive semidefinite."""
        eigs = np.linalg.eigvalsh(0.5 * (self.choi() + self.choi().conjugate().T))
        return float(max(0.0, -eigs[0]))


def channel_from_pure_states(
    finals,
    logical_out,
    basis=None,
    traced_mode: str | None = "spurious",
) -> ChannelEstimate:
    """Channel from the evolved images of the two logical basis kets.

    For unitary evolution the joint final state of any input superposition
    is the matching superposition of the two columns, so tracing the
    ``traced_mode`` out of every ``E(|i><j|)`` only needs the per-
    occupation overlaps with the logical output vectors.

    Parameters
    ----------
    finals : pair of ndarray
        Full-space states ``U|0_L>`` and ``U|1_L>``.
    logical_out : pair of ndarray
        Output logical vectors, in the traced (reduced) space when
        ``traced_mode`` is set, else in the full space.
    basis : SectorBasis
        Required when ``traced_mode`` is set.
    """
    finals = [np.asarray(f, dtype=complex) for f in finals]
    logical_out = [np.asarray(v, dtype=complex) for v in logical_out]

    if traced_mode is None:
        overlaps = np.array(
            [[np.vdot(L, f) for f in finals] for L in logical_out]
        )[:, :, None]
    else:
        from .statespace import _MODE_SLOT, reduced_labels

        slot = _MODE_SLOT[traced_mode]
        red = reduced_labels(basis, traced_mode)
        red_index = {lb: i for i, lb in enumerate(red)}
        occupations = sorted({lb[slot] for lb in basis.labels})
        overlaps = np.zeros((2, 2, len(occupations)), dtype=complex)
        for k, occ in enumerate(occupations):
            full_idx, red_idx = [], []
            for i, lb in enumerate(basis.labels):
                if lb[slot] == occ:
                    full_idx.append(i)
                    red_idx.append(red_index[lb[:slot] + lb[slot + 1 :]])
            fi, ri = np.asarray(full_idx), np.asarray(red_idx)
            for a, L in enumerate(logical_out):
                for i, f in enumerate(finals):
                    overlaps[a, i, k] = np.vdot(L[ri], f[fi])

    blocks = np.empty((2, 2, 2, 2), dtype=complex)
    for i in range(2):
        for j in range(2):
            blocks[i, j] = np.einsum("ak,bk->ab", overlaps[:, i, :], overlaps[:, j, :].conj())
    return ChannelEstimate(blocks)


def channel_from_density_outputs(outputs: dict, logical_out) -> ChannelEstimate:
    """Linear-inversion channel from the four basis-state evolutions.

    ``outputs`` maps the input names ``"0"``, ``"1"``, ``"+"``, ``"+i"``
    to output density matrices (already reduced); they are projected onto
    the logical pair and inverted for the off-diagonal blocks.
    """
    logical_out = [np.asarray(v, dtype=complex) for v in logical_out]

    def project(rho):
        return np.array(
            [[np.vdot(a, rho @ b) for b in logical_out] for a in logical_out]
        )

    p0 = project(outputs["0"])
    p1 = project(outputs["1"])
    pp = project(outputs["+"])
    pi = project(outputs["+i"])
    e01 = pp + 1j * pi - 0.5 * (1 + 1j) * (p0 + p1)
    blocks = np.empty((2, 2, 2, 2), dtype=complex)
    blocks[0, 0], blocks[1, 1] = p0, p1
    blocks[0, 1] = e01
    blocks[1, 0] = e01.conjugate().T
    return ChannelEstimate(blocks)


def average_channel_fidelity(
    channel: ChannelEstimate,
    target: np.ndarray,
    optimize_phase: bool = False,
) -> float:
    """Uniform pure-state average of the output-target overlap.

    Exact sphere average via the six cardinal states (a 2-design), so no
    sampling is involved.  With ``optimize_phase`` the fidelity is
    maximized over a relative phase ``diag(1, e^{i phi})`` appended to the
    target, modeling the calibrated frame of the next protocol step.
    """
    target = np.asarray(target, dtype=complex)

    def fid(phase):
        u = target @ np.diag([1.0, np.exp(1j * phase)])
        total = 0.0
        for psi in _CARDINAL:
            rho_in = np.outer(psi, psi.conj())
            out = channel.apply(rho_in)
            tpsi = u @ psi
            total += np.vdot(tpsi, out @ tpsi).real
        return total / len(_CARDINAL)

    if not optimize_phase:
        return float(fid(0.0))
    f0, fq, fp = fid(0.0), fid(0.5 * np.pi), fid(np.pi)
    a = 0.5 * (f0 + fp)
    b = complex(0.5 * (f0 - fp), a - fq)
    return float(a + abs(b))
