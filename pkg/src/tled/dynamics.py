"""Explicit central-difference stepping and adaptive Dynamic Relaxation.

Models are duck-typed: anything with ``n_nodes``, ``mass`` (kg per node),
``internal_forces(u)`` and ``diameter`` works. FEM and meshless models add
``element_wave_data()`` (for the critical step) and ``stiffness_row_bound()``
(for DR mass scaling).

Constraints are applied after every update, in list order; each has
``apply(state)`` which edits ``state.u`` (and ``state.u_prev`` where the
correction must not create velocity) in place, plus ``fixed_mask(n)`` naming
the degrees of freedom it owns outright.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConstraintError, InstabilityError

log = logging.getLogger(__name__)

DEFAULT_SAFETY = 0.9
CONVERGENCE_WINDOW = 10


def ramp_factor(t, T):
    """Smooth 3-4-5 ramp from 0 at t=0 to 1 at t=T (zero end slopes and curvature)."""
    if T <= 0:
        raise ValueError(f"ramp duration must be positive, got {T}")
    tau = np.clip(np.asarray(t, dtype=float) / T, 0.0, 1.0)
    r = tau ** 3 * (10.0 - 15.0 * tau + 6.0 * tau * tau)
    return float(r) if np.ndim(r) == 0 else r


# ---------------------------------------------------------------------------
# state and constraints


@dataclass
class SolverState:
    u: np.ndarray
    u_prev: np.ndarray
    mass: np.ndarray
    dt: float
    t: float = 0.0
    step: int = 0
    f_int: np.ndarray | None = None
    f_ext: np.ndarray | None = None

    def __post_init__(self):
        self.u = np.array(self.u, dtype=float)
        self.u_prev = np.array(self.u_prev, dtype=float)
        self.mass = np.array(self.mass, dtype=float)
        if self.u.shape != self.u_prev.shape or self.u.shape != (len(self.mass), 3):
            raise ValueError("u, u_prev and mass disagree on node count")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if np.any(self.mass <= 0):
            raise ValueError("nodal masses must be positive")

    @classmethod
    def at_rest(cls, n_nodes, mass, dt, u0=None) -> "SolverState":
        u0 = np.zeros((n_nodes, 3)) if u0 is None else u0
        return cls(u0, np.array(u0, dtype=float), mass, dt)

    @classmethod
    def start(cls, mass, dt, u0, v0, a0) -> "SolverState":
        """Initial conditions with the second-order start u_-1 = u0 - dt v0 + dt^2/2 a0."""
        u0 = np.asarray(u0, dtype=float)
        return cls(u0, u0 - dt * np.asarray(v0) + 0.5 * dt * dt * np.asarray(a0), mass, dt)

    @property
    def velocity(self) -> np.ndarray:
        """Backward-difference velocity (m/s)."""
        return (self.u - self.u_prev) / self.dt


@dataclass
class PrescribedDisplacement:
    """Ramped Dirichlet data: u[nodes, comps] = r(t) * values[:, comps].

    ``values`` is (k, 3) or a single 3-vector; ``components`` masks which
    axes are prescribed (default all three).
    """

    nodes: np.ndarray
    values: np.ndarray
    ramp_duration: float = 1.0
    components: tuple = (True, True, True)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float)
        if vals.shape == (3,):
            vals = np.tile(vals, (len(self.nodes), 1))
        if vals.shape != (len(self.nodes), 3):
            raise ConstraintError(f"prescribed values shape {vals.shape} does not match {len(self.nodes)} nodes")
        self.values = vals
        self.components = np.asarray(self.components, dtype=bool)

    def targets(self, t):
        return ramp_factor(t, self.ramp_duration) * self.values

    def apply(self, state: SolverState):
        target = self.targets(state.t)
        sub = state.u[self.nodes]
        sub[:, self.components] = target[:, self.components]
        state.u[self.nodes] = sub

    def fixed_mask(self, n):
        mask = np.zeros((n, 3), dtype=bool)
        mask[np.ix_(self.nodes, np.nonzero(self.components)[0])] = True
        return mask


@dataclass
class Loading:
    """Everything that drives a solve: Dirichlet data, other constraints, external forces.

    ``forces`` (n, 3) in N is ramped with ``force_ramp`` (None: applied at full value).
    """

    prescribed: list = field(default_factory=list)
    constraints: list = field(default_factory=list)
    forces: np.ndarray | None = None
    force_ramp: float | None = None

    @property
    def ramp_duration(self) -> float:
        durations = [p.ramp_duration for p in self.prescribed]
        if self.forces is not None and self.force_ramp:
            durations.append(self.force_ramp)
        return max(durations, default=0.0)

    def all_constraints(self):
        # prescribed values first, then corrections, contact last
        return list(self.prescribed) + list(self.constraints)

    def external_force(self, n, t):
        if self.forces is None:
            return np.zeros((n, 3))
        scale = 1.0 if not self.force_ramp else ramp_factor(t, self.force_ramp)
        return scale * np.asarray(self.forces, dtype=float)

    def fixed_mask(self, n):
        mask = np.zeros((n, 3), dtype=bool)
        for c in self.all_constraints():
            if hasattr(c, "fixed_mask"):
                mask |= c.fixed_mask(n)
        return mask


def apply_constraints(state: SolverState, constraints) -> list:
    reports = []
    for c in constraints:
        out = c.apply(state)
        if out is not None:
            reports.append(out)
    return reports


# ---------------------------------------------------------------------------
# stepping


def critical_time_step(model) -> float:
    """min over elements / integration cells of L / c_d (no safety factor).

    Models without wave data fall back to 2 / sqrt(lambda_max(M^-1 K)).
    """
    if hasattr(model, "element_wave_data"):
        lengths, speeds = model.element_wave_data()
        return float(np.min(lengths / speeds))
    lam = max_eigenvalue(model, np.zeros((model.n_nodes, 3)), model.mass)
    return 2.0 / np.sqrt(lam)


def stable_time_step(model, u=None) -> float:
    """min(critical_time_step, 2 / sqrt(lambda_max(M^-1 K))) with physical masses.

    The wave-speed estimate can exceed the true central-difference limit (a
    lumped-mass single-point unit hex is stable only up to about 0.58 L / c_d),
    so time-accurate solves also respect the power-iteration bound.
    """
    u = np.zeros((model.n_nodes, 3)) if u is None else u
    lam = max_eigenvalue(model, u, np.asarray(model.mass, dtype=float), iterations=200)
    return min(critical_time_step(model), 2.0 / np.sqrt(lam))


def _check_stable(state: SolverState, diameter: float):
    u = state.u
    limit = 1e3 * max(diameter, 1e-300)
    if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > limit:
        raise InstabilityError(state.step, f"displacement exceeded {limit:.3g} m or became non-finite")


def explicit_step(state: SolverState, f_int, f_ext, constraints=(), damping: float = 0.0,
                  diameter: float | None = None) -> SolverState:
    """One (optionally mass-damped) central-difference step, then constraints.

    m (u+ - 2u + u-)/dt^2 + c m (u+ - u-)/(2 dt) = f_ext - f_int
    """
    dt = state.dt
    acc = (np.asarray(f_ext) - np.asarray(f_int)) / state.mass[:, None]
    if damping == 0.0:
        u_next = 2.0 * state.u - state.u_prev + dt * dt * acc
    else:
        h = 0.5 * damping * dt
        u_next = (2.0 * state.u - (1.0 - h) * state.u_prev + dt * dt * acc) / (1.0 + h)
    new = SolverState(u_next, state.u, state.mass, dt, state.t + dt, state.step + 1, f_int, f_ext)
    apply_constraints(new, constraints)
    if diameter is not None:
        _check_stable(new, diameter)
    return new


# ---------------------------------------------------------------------------
# eigenvalue estimates (vectors only)


def _apply_stiffness(model, u, v, free):
    """Directional derivative K(u) v by central differences of the internal force."""
    scale = np.max(np.abs(v))
    if scale == 0:
        return np.zeros_like(v)
    eps = 1e-7 * max(model.diameter, 1e-12) / scale
    Kv = (model.internal_forces(u + eps * v) - model.internal_forces(u - eps * v)) / (2.0 * eps)
    return np.where(free, Kv, 0.0)


def max_eigenvalue(model, u, mass, free=None, iterations=40, seed=0) -> float:
    """Largest eigenvalue of M^-1 K(u) on the free dofs by power iteration."""
    n = model.n_nodes
    free = np.ones((n, 3), dtype=bool) if free is None else free
    rng = np.random.default_rng(seed)
    v = np.where(free, rng.standard_normal((n, 3)), 0.0)
    lam = 0.0
    for _ in range(iterations):
        v /= np.linalg.norm(v)
        w = _apply_stiffness(model, u, v, free) / mass[:, None]
        lam_new = float(np.sum(v * w))
        v = w
        if lam and abs(lam_new - lam) <= 1e-3 * abs(lam):
            lam = lam_new
            break
        lam = lam_new
    if not lam > 0:
        raise InstabilityError(0, "could not estimate the largest stiffness eigenvalue")
    return lam


# ---------------------------------------------------------------------------
# Dynamic Relaxation


@dataclass
class DRParams:
    """Dynamic Relaxation settings.

    ``adaptive`` switches on the Rayleigh-quotient damping update; with it
    off, ``damping`` (1/s) is used throughout. ``mass_scaling`` chooses nodal
    masses from the stiffness so that ``dt`` is stable (steady state does not
    depend on mass). ``tolerance`` defaults to 1e-5 of the domain diameter.
    """

    damping: float = 0.0
    adaptive: bool = True
    mass_scaling: bool = True
    tolerance: float | None = None
    max_iterations: int = 100_000
    safety: float = DEFAULT_SAFETY
    dt: float | None = None
    stiffness_check_interval: int = 200
    history_every: int = 1

    def __post_init__(self):
        if self.damping < 0:
            raise ValueError("damping coefficient must be >= 0")
        if self.tolerance is not None and not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass
class ConvergenceReport:
    converged: bool
    iterations: int
    final_increment: float
    tolerance: float
    dt: float
    damping: float
    mass_scale: float
    lambda_max: float
    lambda_min_estimate: float
    increment_history: list
    damping_history: list
    contact: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "final_increment_m": self.final_increment,
            "tolerance_m": self.tolerance,
            "dt_s": self.dt,
            "damping_per_s": self.damping,
            "mass_scale": self.mass_scale,
            "lambda_max": self.lambda_max,
            "lambda_min_estimate": self.lambda_min_estimate,
            "increment_history": self.increment_history,
            "damping_history": self.damping_history,
            "contact": self.contact,
        }


@dataclass
class DRResult:
    u: np.ndarray
    report: ConvergenceReport
    state: SolverState


def _dr_masses(model, loading, params, free, u):
    """Stable (dt, masses, lambda_max, scale) for the DR iteration."""
    if params.mass_scaling and hasattr(model, "stiffness_row_bound"):
        base = np.maximum(model.stiffness_row_bound(), 1e-300)
        base = np.where(base > 0, base, base[base > 0].min() if np.any(base > 0) else 1.0)
    else:
        base = np.array(model.mass, dtype=float)
    dt = params.dt if params.dt is not None else params.safety * critical_time_step(model)
    lam = max_eigenvalue(model, u, base, free)
    scale = 1.0
    if params.mass_scaling:
        # masses chosen so that lambda_max dt^2 = 4 safety^2 (stable with margin)
        scale = lam * dt * dt / (4.0 * params.safety ** 2)
    elif lam * dt * dt > 4.0:
        log.warning("DR time step %.3g exceeds the estimated stability limit %.3g", dt, 2 / np.sqrt(lam))
    return dt, base * scale, lam / scale, scale


def dynamic_relaxation_solve(model, loading: Loading | None = None, params: DRParams | None = None,
                             u0=None) -> DRResult:
    """Damped explicit iteration to the steady state.

    The damping coefficient follows c = 2 sqrt(lambda_min), with lambda_min
    estimated every step from the Rayleigh quotient of the last displacement
    increment, du.(f(u_n) - f(u_n-1)) / du.M du, which needs only vectors the
    iteration already holds. Convergence: max nodal increment below the
    tolerance for 10 consecutive steps after the loading has fully ramped.
    """
    loading = loading or Loading()
    params = params or DRParams()
    n = model.n_nodes
    tol = params.tolerance if params.tolerance is not None else 1e-5 * model.diameter
    constraints = loading.all_constraints()
    free = ~loading.fixed_mask(n)

    u = np.zeros((n, 3)) if u0 is None else np.array(u0, dtype=float)
    dt, mass, lam_max, mass_scale = _dr_masses(model, loading, params, free, u)
    state = SolverState.at_rest(n, mass, dt, u)
    c = params.damping
    lam_min = np.nan
    ramp_T = loading.ramp_duration
    increments, damping_hist, contact_reports = [], [], []
    quiet = 0
    f_int = model.internal_forces(state.u)
    converged = False
    inc = 0.0
    for it in range(1, params.max_iterations + 1):
        f_ext = loading.external_force(n, state.t + dt)
        prev = state
        state = explicit_step(state, f_int, f_ext, (), c)
        for con in constraints:
            rep = con.apply(state)
            if rep is not None:
                contact_reports.append(rep)
        _check_stable(state, model.diameter)
        f_new = model.internal_forces(state.u)

        du = np.where(free, state.u - prev.u, 0.0)
        inc = float(np.max(np.linalg.norm(state.u - prev.u, axis=1))) if n else 0.0
        if params.adaptive:
            denom = float(np.sum(mass[:, None] * du * du))
            if denom > 0:
                rq = float(np.sum(du * np.where(free, f_new - f_int, 0.0))) / denom
                if rq > 0:
                    lam_min = min(rq, lam_max)
                    c = 2.0 * np.sqrt(lam_min)
        f_int = f_new
        if it % params.history_every == 0:
            increments.append(inc)
            damping_hist.append(c)

        if params.mass_scaling and it % params.stiffness_check_interval == 0:
            lam_now = max_eigenvalue(model, state.u, mass, free, iterations=15)
            if lam_now * dt * dt > 4.0 * params.safety ** 2:
                # the structure stiffened: rescale masses, keep the same velocities
                grow = lam_now * dt * dt / (4.0 * params.safety ** 2)
                mass = mass * grow
                mass_scale *= grow
                lam_max = lam_now / grow
                state.mass = mass
                if np.isfinite(lam_min):
                    lam_min /= grow
                    c = 2.0 * np.sqrt(lam_min)

        loaded = state.t >= ramp_T
        quiet = quiet + 1 if (loaded and inc < tol) else 0
        if quiet >= CONVERGENCE_WINDOW:
            converged = True
            break
    state.f_int = f_int
    report = ConvergenceReport(
        converged, it if params.max_iterations else 0, inc, tol, dt, float(c), float(mass_scale),
        float(lam_max), float(lam_min), increments, damping_hist, contact_reports[-50:],
    )
    if not converged:
        log.warning("DR did not converge in %d iterations (last increment %.3g m)", params.max_iterations, inc)
    return DRResult(state.u, report, state)


# ---------------------------------------------------------------------------
# time-accurate integration


@dataclass
class Trajectory:
    times: np.ndarray
    displacements: np.ndarray  # (snapshots, n, 3)
    dt: float
    steps: int
    kinetic_energy: np.ndarray | None = None
    strain_energy: np.ndarray | None = None


def time_accurate_solve(model, loading: Loading | None, duration: float, snapshot_times=None,
                        safety: float = DEFAULT_SAFETY, dt: float | None = None, u0=None, v0=None,
                        track_energy: bool = False) -> Trajectory:
    """Undamped central differences with physical (unscaled) lumped masses.

    The default step is ``safety * stable_time_step(model)``. Snapshots are
    recorded at the first step landing at or after each requested time. With
    ``track_energy`` the kinetic energy uses the half-step velocity
    (u_n - u_n-1)/dt and the strain energy the matching average
    (W(u_n) + W(u_n-1))/2, a pairing whose sum is conserved to O(dt^2).
    """
    loading = loading or Loading()
    n = model.n_nodes
    dt = dt if dt is not None else safety * stable_time_step(model, u0)
    steps = int(np.ceil(duration / dt - 1e-12))
    snapshot_times = np.array([duration] if snapshot_times is None else snapshot_times, dtype=float)
    constraints = loading.all_constraints()
    mass = np.asarray(model.mass, dtype=float)
    u0 = np.zeros((n, 3)) if u0 is None else np.asarray(u0, dtype=float)
    v0 = np.zeros((n, 3)) if v0 is None else np.asarray(v0, dtype=float)
    f_int = model.internal_forces(u0)
    a0 = (loading.external_force(n, 0.0) - f_int) / mass[:, None]
    state = SolverState.start(mass, dt, u0, v0, a0)

    order = np.argsort(snapshot_times)
    snaps = np.zeros((len(snapshot_times), n, 3))
    taken = np.zeros(len(snapshot_times), dtype=bool)
    times = np.zeros(len(snapshot_times))
    ke, se = [], []
    w_prev = model.energy(u0) if track_energy and hasattr(model, "energy") else np.nan

    def record(st):
        for k in order:
            if not taken[k] and st.t >= snapshot_times[k] - 1e-12 * dt:
                snaps[k] = st.u
                times[k] = st.t
                taken[k] = True

    record(state)
    for _ in range(steps):
        f_ext = loading.external_force(n, state.t)
        state = explicit_step(state, f_int, f_ext, constraints, 0.0, model.diameter)
        f_int = model.internal_forces(state.u)
        if track_energy:
            v = state.velocity
            w_now = model.energy(state.u) if hasattr(model, "energy") else np.nan
            ke.append(0.5 * float(np.sum(mass[:, None] * v * v)))
            se.append(0.5 * (w_now + w_prev))
            w_prev = w_now
        record(state)
    for k in np.nonzero(~taken)[0]:
        snaps[k] = state.u
        times[k] = state.t
    return Trajectory(times, snaps, dt, steps, np.array(ke) if track_energy else None,
                      np.array(se) if track_energy else None)


# ---------------------------------------------------------------------------
# a linear test model


class LinearModel:
    """f_int = K u with a constant (dense or sparse) stiffness; for spring tests."""

    kind = "linear"

    def __init__(self, K, mass, diameter=1.0):
        self.K = K
        self.mass = np.asarray(mass, dtype=float)
        self.diameter = float(diameter)

    @property
    def n_nodes(self) -> int:
        return len(self.mass)

    def internal_forces(self, u):
        return (self.K @ np.asarray(u, dtype=float).ravel()).reshape(-1, 3)

    def energy(self, u):
        x = np.asarray(u, dtype=float).ravel()
        return 0.5 * float(x @ (self.K @ x))

    def stiffness_row_bound(self):
        K = self.K.toarray() if hasattr(self.K, "toarray") else np.asarray(self.K)
        return np.abs(K).sum(axis=1).reshape(-1, 3).max(axis=1)


def spring_chain(n_springs, k=1.0, node_mass=1.0, axis=0):
    """Nodes 0..n joined by equal springs along ``axis``; other axes are inert."""
    n = n_springs + 1
    K = np.zeros((3 * n, 3 * n))
    for e in range(n_springs):
        i, j = 3 * e + axis, 3 * (e + 1) + axis
        K[i, i] += k
        K[j, j] += k
        K[i, j] -= k
        K[j, i] -= k
    for a in range(n):
        for b in range(3):
            if b != axis:
                K[3 * a + b, 3 * a + b] = k  # tie off the inert directions
    return LinearModel(K, np.full(n, node_mass), diameter=float(n_springs))
