"""Coupled solver: operator-splitting marcher, fixed-point map and continuation.

Two discretisations of the same problem live here.  :func:`coupled_march`
is the production time stepper.  :func:`apply_H` is the solution operator
of the fixed-point construction (frozen-velocity characteristics, weights
on the new characteristics, linear species solve with frozen reaction
terms), and :func:`picard_solve` iterates it.  Both use the same step
primitives from :mod:`transport` and :mod:`smoluchowski`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BoundViolation,
    ConvergenceError,
    DegenerateFieldError,
    ShapeError,
    SolverError,
    StepSizeError,
)
from .kernels import JumpSpec, KernelChoice, ModelParams, production
from .smoluchowski import (
    BOUND_TOL,
    NONNEG_TOL,
    SpatialGrid,
    apriori_bound,
    boundary_outflow,
    step_species,
)
from .transport import (
    MASS_TOL,
    SUPPORT_TOL,
    CharacteristicField,
    GState,
    LabelLayout,
    advance_weights,
    check_field,
    heun_field,
    marcher_velocity,
    support_margin,
)

logger = logging.getLogger(__name__)

MAX_DT_HALVINGS = 10
DEFAULT_WINDOWS = 10


@dataclass
class ModelData:
    """Everything that defines a run apart from the time mesh."""

    params: ModelParams
    kernels: KernelChoice
    jump: JumpSpec
    grid: SpatialGrid
    layout: LabelLayout
    g0: np.ndarray  # (K, n) initial label weights
    u0: np.ndarray  # (N, K) initial concentrations

    def __post_init__(self):
        K, N = self.grid.K, self.params.n_species
        if self.g0.shape != (K, self.layout.n_labels):
            raise ShapeError(f"g0 has shape {self.g0.shape}, expected {(K, self.layout.n_labels)}")
        if self.u0.shape != (N, K):
            raise ShapeError(f"u0 has shape {self.u0.shape}, expected {(N, K)}")
        if np.any(np.abs(self.g0.sum(axis=1) - 1.0) > MASS_TOL) or np.any(self.g0 < 0.0):
            raise ShapeError("initial label weights are not probability vectors")
        if np.any(self.u0 < 0.0):
            raise ShapeError("initial concentrations must be nonnegative")

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    def eta_chi(self, t: float) -> np.ndarray:
        return self.jump.eta_chi(self.x, t)

    def initial_state(self) -> "SystemState":
        K = self.grid.K
        N = self.params.n_species
        return SystemState(
            t=0.0,
            step=0,
            field=CharacteristicField.identity(self.layout.seeds, K),
            g=GState(self.g0.copy(), np.zeros(K)),
            u=self.u0.copy(),
            u0_sup=self.u0.max(axis=1),
            bound_consts=np.zeros(N),
            outflow=np.zeros(N - 1),
        )

    def validate(self, allow_degenerate_rates: bool = False) -> None:
        self.params.validate(allow_degenerate_rates)
        self.kernels.validate(self.params.n_species)
        self.jump.validate()


@dataclass
class SystemState:
    t: float
    step: int
    field: CharacteristicField
    g: GState
    u: np.ndarray
    u0_sup: np.ndarray
    bound_consts: np.ndarray
    clipped_mass: float = 0.0
    outflow: np.ndarray | None = None

    def copy(self) -> "SystemState":
        return SystemState(self.t, self.step, self.field.copy(), self.g.copy(), self.u.copy(),
                           self.u0_sup.copy(), self.bound_consts.copy(), self.clipped_mass,
                           None if self.outflow is None else self.outflow.copy())

    def dump(self) -> dict:
        return {
            "t": self.t,
            "step": self.step,
            "A_min": float(self.field.A.min()),
            "g_mass_range": [float(self.g.mass.min()), float(self.g.mass.max())],
            "u_min": self.u.min(axis=1).tolist(),
            "u_max": self.u.max(axis=1).tolist(),
        }


@dataclass
class Trajectory:
    """Snapshots on a time mesh: A (T, K, S), g (T, K, n), E (T, K), u (T, N, K)."""

    times: np.ndarray
    A: np.ndarray
    g: np.ndarray
    E: np.ndarray
    u: np.ndarray
    layout: LabelLayout
    log_dA: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.times.size

    def state_at(self, i: int, data: ModelData) -> SystemState:
        st = data.initial_state()
        st.t = float(self.times[i])
        st.field = CharacteristicField(self.layout.seeds, self.A[i].copy(), st.t,
                                       None if self.log_dA is None else self.log_dA[i].copy())
        st.g = GState(self.g[i].copy(), self.E[i].copy())
        st.u = self.u[i].copy()
        return st

    @classmethod
    def concatenate(cls, parts: list["Trajectory"]) -> "Trajectory":
        """Join windows; the first snapshot of each later window duplicates the junction."""
        first = parts[0]
        keep = [first] + [p for p in parts[1:]]
        sl = [slice(None)] + [slice(1, None)] * (len(parts) - 1)
        cat = lambda name: np.concatenate([getattr(p, name)[s] for p, s in zip(keep, sl)])  # noqa: E731
        log = None if first.log_dA is None else cat("log_dA")
        return cls(cat("times"), cat("A"), cat("g"), cat("E"), cat("u"), first.layout, log)


class _Recorder:
    def __init__(self, n: int, state: SystemState, keep_log: bool):
        K, S = state.field.A.shape
        self.times = np.empty(n)
        self.A = np.empty((n, K, S))
        self.log_dA = np.empty((n, K, S)) if keep_log else None
        self.g = np.empty((n,) + state.g.weights.shape)
        self.E = np.empty((n, K))
        self.u = np.empty((n,) + state.u.shape)
        self.i = 0

    def add(self, st: SystemState) -> None:
        i = self.i
        self.times[i] = st.t
        self.A[i] = st.field.A
        if self.log_dA is not None:
            self.log_dA[i] = st.field.log_dA
        self.g[i] = st.g.weights
        self.E[i] = st.g.E
        self.u[i] = st.u
        self.i += 1

    def trajectory(self, layout: LabelLayout) -> Trajectory:
        n = self.i
        log = None if self.log_dA is None else self.log_dA[:n]
        return Trajectory(self.times[:n], self.A[:n], self.g[:n], self.E[:n], self.u[:n], layout, log)


# ---------------------------------------------------------------------------
# metric


def w1_rows(labels1: np.ndarray, W1: np.ndarray, labels2: np.ndarray, W2: np.ndarray) -> np.ndarray:
    """Row-wise W1 between measures with atoms ``labels`` and weight rows ``W``."""
    pts = np.concatenate([labels1, labels2])
    order = np.argsort(pts, kind="stable")
    signed = np.concatenate([W1, -W2], axis=-1)[..., order]
    gaps = np.diff(pts[order])
    return np.abs(np.cumsum(signed, axis=-1)[..., :-1]) @ gaps


def xtau_distance(tr1: Trajectory, tr2: Trajectory) -> float:
    """``max_{x,t} [W1(g1, g2) + max_y |A1 - A2|] + max_{x,t,m} |u1 - u2|``."""
    if tr1.times.shape != tr2.times.shape or not np.allclose(tr1.times, tr2.times, rtol=0, atol=1e-9):
        raise ShapeError("trajectories live on different time meshes")
    if tr1.A.shape != tr2.A.shape or tr1.u.shape != tr2.u.shape:
        raise ShapeError(f"state shapes differ: {tr1.A.shape}/{tr2.A.shape}, {tr1.u.shape}/{tr2.u.shape}")
    if not np.array_equal(tr1.layout.seeds, tr2.layout.seeds):
        raise ShapeError("characteristic seeds differ")
    return distance_components(tr1.A, tr2.A, tr1.layout.labels, tr1.g, tr2.layout.labels, tr2.g,
                               tr1.u, tr2.u)


def distance_components(A1, A2, labels1, g1, labels2, g2, u1, u2) -> float:
    """The X_tau combination from raw arrays; g may live on different label sets."""
    w1 = w1_rows(labels1, g1, labels2, g2)
    dA = np.abs(A1 - A2).max(axis=-1)
    du = np.abs(u1 - u2).max()
    return float((w1 + dA).max() + du)


# ---------------------------------------------------------------------------
# marcher


@dataclass
class MarchMonitor:
    """Per-step invariant bookkeeping for a march."""

    check: bool = True
    fixed_bound_consts: np.ndarray | None = None
    max_drift: float = 0.0
    max_drift_ratio: float = 0.0  # drift / dt^2
    max_mass_error: float = 0.0
    min_support_margin: float = np.inf
    min_u: float = np.inf
    min_bound_margin: float = np.inf
    clamp_events: int = 0
    dt_halvings: int = 0
    species_substeps: int = 1
    steps: int = 0

    def as_dict(self) -> dict:
        return {
            "steps": self.steps,
            "max_drift": self.max_drift,
            "max_drift_over_dt2": self.max_drift_ratio,
            "max_mass_error": self.max_mass_error,
            "min_support_margin": self.min_support_margin,
            "min_u": self.min_u,
            "min_bound_margin": self.min_bound_margin,
            "clamp_events": self.clamp_events,
            "dt_halvings": self.dt_halvings,
            "max_species_substeps": self.species_substeps,
        }


def _check_state(data: ModelData, st: SystemState, prev_A: np.ndarray, mon: MarchMonitor) -> None:
    mass_err = float(np.max(np.abs(st.g.mass - 1.0)))
    margin = support_margin(data.layout, st.g.weights, st.field.A)
    u_min = float(st.u.min())
    consts = st.bound_consts if mon.fixed_bound_consts is None else mon.fixed_bound_consts
    bound = apriori_bound(data.u0, st.t, consts)
    excess = st.u.max(axis=1) - bound
    mon.max_mass_error = max(mon.max_mass_error, mass_err)
    mon.min_support_margin = min(mon.min_support_margin, margin)
    mon.min_u = min(mon.min_u, u_min)
    mon.min_bound_margin = min(mon.min_bound_margin, float(-excess.max()))
    if not mon.check:
        return
    dump = st.dump()
    try:
        check_field(st.field.A, prev_A)
    except DegenerateFieldError as exc:
        raise SolverError(str(exc), step=st.step, state_dump=dump) from exc
    if mass_err > MASS_TOL:
        raise SolverError(f"g-mass off by {mass_err:.3g}", step=st.step, state_dump=dump)
    if margin < -SUPPORT_TOL:
        raise SolverError(f"support left [A(0,t), 1] by {-margin:.3g}", step=st.step, state_dump=dump)
    if u_min < -NONNEG_TOL:
        raise SolverError(f"negative concentration {u_min:.3g}", step=st.step, state_dump=dump)
    if np.any(excess > BOUND_TOL):
        m = int(np.argmax(excess))
        node = int(np.argmax(st.u[m]))
        estimate = "a priori bound u_1 <= sup u_01 + C_1 t" if m == 0 else \
            f"a priori bound u_{m + 1} <= sup u_0{m + 1} + C_{m + 1} t"
        raise BoundViolation(estimate, m + 1, node, st.t, float(st.u[m, node]), float(bound[m]))


def march_step(data: ModelData, st: SystemState, dt: float, mon: MarchMonitor | None = None) -> SystemState:
    """Advance the coupled state by one step (with dt halving on monotonicity failure)."""
    mon = mon or MarchMonitor(check=False)
    try:
        return _march_step(data, st, dt, mon)
    except StepSizeError:
        pass
    for level in range(1, MAX_DT_HALVINGS + 1):
        n = 2**level
        try:
            cur = st
            for _ in range(n):
                cur = _march_step(data, cur, dt / n, mon)
            mon.dt_halvings = max(mon.dt_halvings, level)
            logger.info("step %d needed %d halvings of dt", st.step, level)
            cur.step = st.step + 1
            return cur
        except StepSizeError:
            continue
    raise SolverError(f"monotonicity still broken after {MAX_DT_HALVINGS} halvings", step=st.step,
                      state_dump=st.dump())


def _march_step(data: ModelData, st: SystemState, dt: float, mon: MarchMonitor) -> SystemState:
    layout, kern = data.layout, data.kernels
    A_n, g_n, u_n = st.field.A, st.g.weights, st.u
    u_diff = u_n[: data.params.n_species - 1]
    v_now = marcher_velocity(kern, layout, g_n, u_diff, peers_from=A_n)
    v_next = marcher_velocity(kern, layout, g_n, u_diff)
    A_new, log_new, clamped = heun_field(A_n, st.field.log_dA, v_now, v_next, dt)
    if clamped:
        mon.clamp_events += clamped
        logger.warning("clamped %d characteristic values at t=%.6g", clamped, st.t + dt)
    t_next = st.t + dt
    g_new, drift = advance_weights(layout, st.g, A_n, A_new, data.eta_chi(st.t), data.eta_chi(t_next),
                                   data.jump, st.t, dt)
    mon.max_drift = max(mon.max_drift, drift)
    mon.max_drift_ratio = max(mon.max_drift_ratio, drift / dt**2)
    F = production(data.params, layout.positions(A_new), g_new.weights)
    u_new, info = step_species(u_n, F, dt, data.params, data.grid)
    mon.species_substeps = max(mon.species_substeps, info.substeps)
    new = SystemState(
        t=t_next,
        step=st.step + 1,
        field=CharacteristicField(layout.seeds, A_new, t_next, log_new),
        g=g_new,
        u=u_new,
        u0_sup=st.u0_sup,
        bound_consts=np.maximum(st.bound_consts, info.max_gain),
        clipped_mass=st.clipped_mass + info.clipped_mass,
        outflow=st.outflow + dt * boundary_outflow(u_new, data.params, data.grid),
    )
    mon.steps += 1
    _check_state(data, new, A_n, mon)
    return new


def _n_steps(span: float, dt: float) -> int:
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    n = int(round(span / dt))
    if n < 1 or abs(n * dt - span) > 1e-9 * max(1.0, span):
        raise ValueError(f"time span {span} is not a whole number of steps dt={dt}")
    return n


def march_from(data: ModelData, state: SystemState, n_steps: int, dt: float, stride: int = 1,
               monitor: MarchMonitor | None = None, keep_log: bool = True) -> tuple[Trajectory, SystemState]:
    """March ``n_steps`` from ``state``; snapshots every ``stride`` steps and at the end."""
    mon = monitor or MarchMonitor()
    n_snap = n_steps // stride + 1 + (1 if n_steps % stride else 0)
    rec = _Recorder(n_snap, state, keep_log and state.field.log_dA is not None)
    rec.add(state)
    st = state
    for n in range(1, n_steps + 1):
        st = march_step(data, st, dt, mon)
        if n % stride == 0 or n == n_steps:
            rec.add(st)
    traj = rec.trajectory(data.layout)
    traj.diagnostics = mon.as_dict()
    traj.diagnostics["clipped_mass"] = st.clipped_mass
    traj.diagnostics["bound_consts"] = st.bound_consts.tolist()
    traj.diagnostics["boundary_outflow"] = st.outflow.tolist()
    return traj, st


def coupled_march(data: ModelData, T: float, dt: float, stride: int = 1, check: bool = True,
                  keep_log: bool = True) -> Trajectory:
    """Production solver on ``[0, T]``.

    Per step: Heun for the characteristics with weights and concentrations
    frozen at the step start, trapezoidal weight update on the new
    characteristics, monomer production from the updated state, then the
    species step.  Every invariant is checked after each step when
    ``check`` is set.
    """
    traj, _ = march_from(data, data.initial_state(), _n_steps(T, dt), dt, stride,
                         MarchMonitor(check=check), keep_log)
    return traj


# ---------------------------------------------------------------------------
# fixed-point map


def constant_extension(data: ModelData, times: np.ndarray) -> Trajectory:
    st = data.initial_state()
    n = times.size
    rep = lambda a: np.broadcast_to(a, (n,) + a.shape).copy()  # noqa: E731
    return Trajectory(times.copy(), rep(st.field.A), rep(st.g.weights), rep(st.g.E), rep(st.u),
                      data.layout, rep(st.field.log_dA))


def apply_H(data: ModelData, inp: Trajectory, iterate: int | None = None) -> Trajectory:
    """One application of the fixed-point map on the input's time mesh.

    Stage 1 moves the characteristics in the velocity built from the input
    (peers, weights and concentrations all taken from ``inp``).  Stage 2
    evolves the weights on the new characteristics.  Stage 3 advances the
    species with reaction terms evaluated at the input concentrations and the
    production computed from the new characteristics and weights.
    """
    times = inp.times
    dts = np.diff(times)
    layout, kern, params = data.layout, data.kernels, data.params
    Nd = params.n_species - 1
    st = data.initial_state()
    out = _Recorder(times.size, st, True)
    out.add(st)
    A, log_dA, g, u = st.field.A, st.field.log_dA, st.g, st.u
    for n, dt in enumerate(dts):
        v_now = marcher_velocity(kern, layout, inp.g[n], inp.u[n, :Nd], peers_from=inp.A[n])
        v_next = marcher_velocity(kern, layout, inp.g[n + 1], inp.u[n + 1, :Nd], peers_from=inp.A[n + 1])
        try:
            A_new, log_dA, _ = heun_field(A, log_dA, v_now, v_next, dt)
        except StepSizeError as exc:
            raise SolverError(str(exc), step=n, iterate=iterate) from exc
        g, _ = advance_weights(layout, g, A, A_new, data.eta_chi(times[n]), data.eta_chi(times[n + 1]),
                               data.jump, times[n], dt)
        A = A_new
        F = production(params, layout.positions(A), g.weights)
        u, _ = step_species(u, F, dt, params, data.grid, frozen_u=inp.u[n], clip=False)
        out.add(SystemState(times[n + 1], n + 1, CharacteristicField(layout.seeds, A, times[n + 1], log_dA),
                            g, u, st.u0_sup, st.bound_consts))
    tr = out.trajectory(layout)
    tr.times = times.copy()
    return tr


@dataclass
class ContractionReport:
    iterates: int = 0
    distances: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    converged: bool = False
    tau: float = 0.0
    dt: float = 0.0
    tol: float = 0.0
    rho: float = 0.0
    predicted_ratio_bound: float | None = None

    @property
    def max_ratio(self) -> float:
        return max(self.ratios) if self.ratios else 0.0

    @property
    def residual(self) -> float:
        return self.distances[-1] if self.distances else float("inf")

    def as_dict(self) -> dict:
        return {
            "iterates": self.iterates,
            "distances": self.distances,
            "ratios": self.ratios,
            "max_ratio": self.max_ratio,
            "residual": self.residual,
            "converged": self.converged,
            "tau": self.tau,
            "dt": self.dt,
            "tol": self.tol,
            "rho": self.rho,
            "predicted_ratio_bound": self.predicted_ratio_bound,
        }


def _mesh(tau: float, dt: float) -> np.ndarray:
    n = _n_steps(tau, dt)
    return np.arange(n + 1) * dt


def predicted_ratio_bound(data: ModelData, tau: float) -> float:
    """``tau L max eta``: the weight-equation contraction factor implied by the kernel's Lipschitz constant."""
    eta_max = float(np.max(data.jump.eta_values))
    return tau * data.jump.P_lipschitz * eta_max


def picard_solve(data: ModelData, tau: float, dt: float, tol: float = 1e-8, max_iter: int = 30,
                 raise_on_failure: bool = True) -> tuple[Trajectory, ContractionReport]:
    """Iterate the fixed-point map from ``H(constant extension of the data)``."""
    if tau <= 0.0 or tol <= 0.0:
        raise ValueError("tau and tol must be positive")
    times = _mesh(tau, dt)
    base = constant_extension(data, times)
    report = ContractionReport(tau=tau, dt=dt, tol=tol, predicted_ratio_bound=predicted_ratio_bound(data, tau))
    x = apply_H(data, base, iterate=0)
    for k in range(1, max_iter + 1):
        x_new = apply_H(data, x, iterate=k)
        d = xtau_distance(x_new, x)
        report.distances.append(d)
        if len(report.distances) > 1:
            prev = report.distances[-2]
            report.ratios.append(d / prev if prev > 0.0 else 0.0)
        report.iterates = k
        logger.info("picard iterate %d: distance %.3e", k, d)
        x = x_new
        if d < tol:
            report.converged = True
            break
    report.rho = xtau_distance(x, base)
    x.diagnostics["contraction"] = report.as_dict()
    if not report.converged and raise_on_failure:
        raise ConvergenceError(
            f"no convergence to {tol:g} in {max_iter} iterations (last distance {report.residual:.3g}); "
            "try a smaller tau", report)
    return x, report


def contraction_boundary(data: ModelData, tau0: float, dt: float, doublings: int = 5,
                         iterations: int = 3) -> dict:
    """Measure early Picard ratios while doubling tau; report the first tau with ratio >= 1."""
    rows = []
    first = None
    tau = tau0
    for _ in range(doublings + 1):
        times = _mesh(tau, dt)
        x = apply_H(data, constant_extension(data, times))
        dists = []
        for k in range(iterations + 1):
            x_new = apply_H(data, x, iterate=k)
            dists.append(xtau_distance(x_new, x))
            x = x_new
        ratios = [b / a if a > 0 else 0.0 for a, b in zip(dists[:-1], dists[1:])]
        max_ratio = max(ratios) if ratios else 0.0
        rows.append({"tau": tau, "distances": dists, "ratios": ratios, "max_ratio": max_ratio})
        if first is None and max_ratio >= 1.0:
            first = tau
            break
        tau *= 2.0
    return {"first_tau_ratio_ge_1": first, "table": rows}


def cross_validate(data: ModelData, tau: float, dt: float, tol: float = 1e-10,
                   max_iter: int = 50) -> tuple[float, ContractionReport]:
    """X_tau distance between the Picard fixed point and the marcher on the same mesh."""
    fixed, report = picard_solve(data, tau, dt, tol, max_iter)
    marched = coupled_march(data, tau, dt, stride=1)
    marched.times = fixed.times.copy()
    return xtau_distance(fixed, marched), report


# ---------------------------------------------------------------------------
# continuation


def continue_solution(data: ModelData, state: SystemState, T_target: float, dt: float,
                      window: float | None = None, stride: int = 1,
                      bound_consts: np.ndarray | None = None,
                      allow_degenerate_rates: bool = False) -> Trajectory:
    """March from ``state`` to ``T_target`` in windows, restarting from the carried state.

    At every window boundary the model data are re-validated, the state is
    checked for finite limits, and the a priori bounds are tested.  With
    ``bound_consts`` given, those constants replace the running estimates
    (used to exercise the violation path).
    """
    span = T_target - state.t
    n_total = _n_steps(span, dt)
    if window is None:
        window = span / DEFAULT_WINDOWS
    per = max(1, int(round(window / dt)))
    mon = MarchMonitor(check=True, fixed_bound_consts=None if bound_consts is None else np.asarray(bound_consts))
    parts = []
    st = state
    done = 0
    while done < n_total:
        n = min(per, n_total - done)
        data.validate(allow_degenerate_rates)
        if not (np.all(np.isfinite(st.field.A)) and np.all(np.isfinite(st.g.weights)) and np.all(np.isfinite(st.u))):
            raise SolverError("state has no finite limit at the window start", step=st.step, state_dump=st.dump())
        tr, st = march_from(data, st, n, dt, stride, mon)
        parts.append(tr)
        done += n
        consts = st.bound_consts if bound_consts is None else np.asarray(bound_consts)
        bound = apriori_bound(data.u0, st.t, consts)
        excess = st.u.max(axis=1) - bound
        if np.any(excess > BOUND_TOL):
            m = int(np.argmax(excess))
            node = int(np.argmax(st.u[m]))
            raise BoundViolation(f"a priori bound u_{m + 1} <= sup u_0{m + 1} + C_{m + 1} t", m + 1, node,
                                 st.t, float(st.u[m, node]), float(bound[m]))
    traj = Trajectory.concatenate(parts)
    traj.diagnostics = mon.as_dict()
    traj.diagnostics["windows"] = len(parts)
    traj.diagnostics["clipped_mass"] = st.clipped_mass
    traj.diagnostics["bound_consts"] = st.bound_consts.tolist()
    return traj
