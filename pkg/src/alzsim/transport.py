"""Characteristics and Lagrangian weights for the health-state transport.

Each spatial node carries a map ``y -> A(y, t)`` sampled on a fixed seed grid
and a measure ``g`` over the initial labels ``y``.  The physical measure is
recovered as the push-forward ``f = A(., t)_# g``.  Labels are of two kinds:
grid cells between consecutive seeds (they receive the absolutely continuous
jump gain) and point atoms sitting on seeds (Dirac masses of the initial
datum, which only lose mass).

Arrays are batched over nodes: ``A`` has shape (K, S) for S seeds and the
weights ``g`` shape (K, n) for n labels.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateFieldError, SolverError, StepSizeError
from .kernels import JumpSpec, KernelChoice, velocity_field
from .measure import CELL, POINT, ParticleMeasure

logger = logging.getLogger(__name__)

MASS_TOL = 1e-12
SUPPORT_TOL = 1e-12


# ---------------------------------------------------------------------------
# label layout


@dataclass(frozen=True)
class LabelLayout:
    """Seeds and the labels (atoms of g) built on them.

    ``left[i]`` and ``right[i]`` are the seeds bounding label ``i``; they
    coincide for point atoms.  Labels are ordered by label position, which is
    also their order in health space because every characteristic map is
    increasing.
    """

    seeds: np.ndarray
    labels: np.ndarray
    left: np.ndarray
    right: np.ndarray
    is_cell: np.ndarray
    cell_atoms: np.ndarray  # label index of the cell between seeds c and c+1

    @classmethod
    def build(cls, n_seeds: int, point_positions: Sequence[float] = ()) -> "LabelLayout":
        if n_seeds < 2:
            raise ValueError("need at least two seeds")
        pts = np.unique(np.asarray(point_positions, dtype=float))
        if np.any((pts < 0.0) | (pts > 1.0)):
            raise ValueError("point atoms must lie in [0, 1]")
        seeds = np.union1d(np.linspace(0.0, 1.0, n_seeds), pts)
        s = seeds.size
        cell_left = np.arange(s - 1)
        point_idx = np.searchsorted(seeds, pts)
        labels = np.concatenate([0.5 * (seeds[:-1] + seeds[1:]), seeds[point_idx]])
        left = np.concatenate([cell_left, point_idx])
        right = np.concatenate([cell_left + 1, point_idx])
        is_cell = np.concatenate([np.ones(s - 1, bool), np.zeros(pts.size, bool)])
        order = np.lexsort((~is_cell, labels))
        inv = np.empty_like(order)
        inv[order] = np.arange(order.size)
        return cls(
            seeds=seeds,
            labels=labels[order],
            left=left[order],
            right=right[order],
            is_cell=is_cell[order],
            cell_atoms=inv[: s - 1],
        )

    @property
    def n_seeds(self) -> int:
        return self.seeds.size

    @property
    def n_labels(self) -> int:
        return self.labels.size

    @property
    def widths(self) -> np.ndarray:
        return self.seeds[self.right] - self.seeds[self.left]

    def point_index(self, position: float) -> int:
        hit = np.flatnonzero(~self.is_cell & (self.labels == position))
        if hit.size != 1:
            raise KeyError(f"no point atom at label {position}")
        return int(hit[0])

    def positions(self, A: np.ndarray) -> np.ndarray:
        """Health-space positions of all labels under the piecewise-linear field."""
        return 0.5 * (A[..., self.left] + A[..., self.right])

    def weights_from_measure(self, mu: ParticleMeasure) -> np.ndarray:
        """Place an initial measure on the labels.

        Point atoms of ``mu`` go to the matching point labels; cell atoms go
        to the cell containing them.
        """
        w = np.zeros(self.n_labels)
        for pos, wt, cell in zip(mu.positions, mu.weights, mu.is_cell):
            if cell:
                c = min(int(np.searchsorted(self.seeds, pos, side="right")) - 1, self.n_seeds - 2)
                w[self.cell_atoms[c]] += wt
            else:
                w[self.point_index(float(pos))] += wt
        return w

    def uniform_weights(self) -> np.ndarray:
        return np.where(self.is_cell, self.widths, 0.0)

    def measure(self, weights: np.ndarray) -> ParticleMeasure:
        """The label-space measure g for one node."""
        return ParticleMeasure.from_atoms(
            self.labels, weights, [CELL if c else POINT for c in self.is_cell], self.widths
        )


# ---------------------------------------------------------------------------
# state containers


@dataclass
class CharacteristicField:
    """Characteristic maps of all nodes at one time.

    ``log_dA`` integrates ``d/dt log dA/dy = dv/da`` along each seed's
    trajectory, giving the exponential representation of the slope.
    """

    seeds: np.ndarray
    A: np.ndarray
    t: float = 0.0
    log_dA: np.ndarray | None = None

    @classmethod
    def identity(cls, seeds: np.ndarray, n_nodes: int, t: float = 0.0) -> "CharacteristicField":
        A = np.tile(seeds, (n_nodes, 1))
        return cls(seeds=seeds, A=A, t=t, log_dA=np.zeros_like(A))

    def copy(self) -> "CharacteristicField":
        return CharacteristicField(self.seeds, self.A.copy(), self.t,
                                   None if self.log_dA is None else self.log_dA.copy())

    def slopes(self) -> np.ndarray:
        return slopes(self)

    def exp_slopes(self) -> np.ndarray:
        return np.exp(self.log_dA)


@dataclass
class GState:
    """Label weights g of all nodes plus the accumulated loss exponent E."""

    weights: np.ndarray
    E: np.ndarray

    def copy(self) -> "GState":
        return GState(self.weights.copy(), self.E.copy())

    @property
    def mass(self) -> np.ndarray:
        return self.weights.sum(axis=1)


def check_field(A: np.ndarray, A_prev: np.ndarray | None = None, atol: float = 0.0) -> None:
    """Strict monotonicity in y, pinned endpoint, and monotonicity in t."""
    if not np.all(np.isfinite(A)):
        raise DegenerateFieldError("non-finite characteristic values")
    gaps = np.diff(A, axis=-1)
    if np.any(gaps <= 0.0):
        k, j = np.unravel_index(np.argmin(gaps), gaps.shape)
        raise DegenerateFieldError(f"characteristics not strictly increasing at node {k}, seed {j}")
    if np.any(A[..., -1] != 1.0):
        raise DegenerateFieldError("endpoint A(1, t) moved away from 1")
    if A_prev is not None and np.any(A < A_prev - atol):
        raise DegenerateFieldError("characteristics moved backwards in time")


# ---------------------------------------------------------------------------
# characteristics

VelocityFn = Callable[[np.ndarray], tuple]


def heun_field(A: np.ndarray, log_dA: np.ndarray | None, v_now: VelocityFn, v_next: VelocityFn,
               dt: float) -> tuple[np.ndarray, np.ndarray | None, int]:
    """One Heun step of ``dA/dt = v(A, t)`` for every seed.

    ``v_now`` and ``v_next`` return ``(v, dv/da)`` at the queried health
    states for times ``t`` and ``t + dt``.  Returns the clamped, pinned field,
    the updated log-slopes and the number of clamped entries.  Raises
    :class:`StepSizeError` if the step breaks strict monotonicity.
    """
    k1, l1 = v_now(A)
    A_star = np.clip(A + dt * k1, 0.0, 1.0)
    k2, l2 = v_next(A_star)
    new = A + 0.5 * dt * (k1 + k2)
    clamped = int(np.count_nonzero((new < 0.0) | (new > 1.0)))
    np.clip(new, 0.0, 1.0, out=new)
    new[..., -1] = 1.0
    if np.any(np.diff(new, axis=-1) <= 0.0):
        raise StepSizeError(f"characteristic step dt={dt:.3g} breaks monotonicity")
    new_log = None if log_dA is None else log_dA + 0.5 * dt * (l1 + l2)
    return new, new_log, clamped


def marcher_velocity(kernels: KernelChoice, layout: LabelLayout, g: np.ndarray,
                     u: np.ndarray, peers_from: np.ndarray | None = None) -> VelocityFn:
    """Velocity closure with weights and concentrations frozen.

    If ``peers_from`` is given, peer positions come from that field;
    otherwise they are taken from the queried field itself (the queries are
    then the full seed arrays).
    """
    peer_pos = None if peers_from is None else layout.positions(peers_from)

    def v(query: np.ndarray):
        pos = layout.positions(query) if peer_pos is None else peer_pos
        return velocity_field(kernels, query, pos, g, u, with_derivative=True)

    return v


def advance_characteristics(field: CharacteristicField, kernels: KernelChoice, layout: LabelLayout,
                            g: np.ndarray, u: np.ndarray, dt: float) -> tuple[CharacteristicField, int]:
    """Heun step with weights and concentrations held at their current values.

    Stage one uses peers at ``A(t)``, stage two at the predicted field.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    v_now = marcher_velocity(kernels, layout, g, u, peers_from=field.A)
    v_next = marcher_velocity(kernels, layout, g, u)
    A, log_dA, clamped = heun_field(field.A, field.log_dA, v_now, v_next, dt)
    if clamped:
        logger.warning("clamped %d characteristic values to [0, 1] at t=%.6g", clamped, field.t + dt)
    return CharacteristicField(field.seeds, A, field.t + dt, log_dA), clamped


def slopes(field: CharacteristicField) -> np.ndarray:
    """Finite-difference ``dA/dy``: centred inside, one-sided at both ends."""
    d = np.gradient(field.A, field.seeds, axis=-1, edge_order=1)
    if np.any(d <= 0.0):
        raise DegenerateFieldError("nonpositive characteristic slope")
    return d


# ---------------------------------------------------------------------------
# weights


def jump_gain(layout: LabelLayout, A: np.ndarray, w: np.ndarray, jump: JumpSpec, t: float) -> np.ndarray:
    """Per-label gain ``int_cell dA/dy(y) sum_i w_i P(t, A_i, A(y)) dy`` (no eta chi factor).

    With ``A`` piecewise linear the integral over a cell equals the exact
    P-mass landing in ``[A_left, A_right]``, so the total gain equals the
    total row mass of the sources.  Point labels receive nothing.
    """
    pos = layout.positions(A)
    cum = jump.kernel.mixture_cumulative(t, pos, w, A)
    out = np.zeros_like(w)
    # consecutive differences of a nondecreasing function; rounding can leave -1e-17
    out[:, layout.cell_atoms] = np.maximum(np.diff(cum, axis=1), 0.0)
    return out


def jump_gain_rates(layout: LabelLayout, A: np.ndarray, w: np.ndarray, jump: JumpSpec, t: float,
                    x: np.ndarray) -> np.ndarray:
    """Gain rates ``eta(t) chi(x, t)`` times :func:`jump_gain`, all nonnegative."""
    ec = jump.eta_chi(x, t)
    return ec[:, None] * jump_gain(layout, A, w, jump, t)


def advance_weights(layout: LabelLayout, g: GState, A_now: np.ndarray, A_next: np.ndarray,
                    ec_now: np.ndarray, ec_next: np.ndarray, jump: JumpSpec, t: float,
                    dt: float) -> tuple[GState, float]:
    """Trapezoidal step in the loss-free frame ``q = exp(E) g``.

    With ``q`` rebased to ``g`` at the start of the step, ``dq/dt = eta chi
    gain[A](q)`` has a nonnegative right-hand side, so q never decreases.  The
    loss is applied exactly through ``exp(-dE)``.  Returns the renormalised
    state and the pre-renormalisation mass drift (max over nodes).
    """
    q = g.weights
    dE = 0.5 * dt * (ec_now + ec_next)
    active = np.flatnonzero((ec_now > 0.0) | (ec_next > 0.0))
    new = q.copy()
    if active.size:
        qa = q[active]
        Lq = ec_now[active, None] * jump_gain(layout, A_now[active], qa, jump, t)
        q_star = qa + dt * Lq
        Lq_star = ec_next[active, None] * jump_gain(layout, A_next[active], q_star, jump, t + dt)
        new[active] = (qa + 0.5 * dt * (Lq + Lq_star)) * np.exp(-dE[active])[:, None]
    if np.any(new < 0.0):
        raise SolverError("negative label weight in the loss-free frame", step=None)
    mass = new.sum(axis=1)
    drift = float(np.max(np.abs(mass - 1.0)))
    new /= mass[:, None]
    return GState(new, g.E + dE), drift


# ---------------------------------------------------------------------------
# reconstruction and checks


def reconstruct_f(layout: LabelLayout, weights: np.ndarray, A: np.ndarray) -> ParticleMeasure:
    """``f = A_# g`` for one node, through the piecewise-linear field."""
    pos = layout.positions(A)
    width = A[layout.right] - A[layout.left]
    kinds = [CELL if c else POINT for c in layout.is_cell]
    return ParticleMeasure.from_atoms(np.clip(pos, 0.0, 1.0), weights, kinds, width)


def support_check(f: ParticleMeasure, A0: float) -> tuple[bool, float]:
    """Whether ``supp f`` lies in ``[A(0, t), 1]``; the margin is ``min pos - A(0, t)``."""
    margin = float(np.min(f.positions) - A0) if len(f) else 0.0
    return margin >= -SUPPORT_TOL, margin


def support_margin(layout: LabelLayout, weights: np.ndarray, A: np.ndarray) -> float:
    """Batched support margin over all nodes (atoms with zero weight ignored)."""
    pos = layout.positions(A)
    pos = np.where(weights > 0.0, pos, np.inf)
    return float(np.min(pos.min(axis=1) - A[:, 0]))


# ---------------------------------------------------------------------------
# weak formulation


def weak_integrand(layout: LabelLayout, kernels: KernelChoice, jump: JumpSpec, A: np.ndarray,
                   w: np.ndarray, u: np.ndarray, t: float, x: np.ndarray,
                   phi, phi_t, phi_a) -> np.ndarray:
    """``int (phi_t + v phi_a) df + int phi dJ`` per node at one time."""
    pos = layout.positions(A)
    v = velocity_field(kernels, pos, pos, w, u)
    drift = (w * (phi_t(pos, t) + v * phi_a(pos, t))).sum(axis=1)
    ec = jump.eta_chi(x, t)
    jump_term = np.zeros(A.shape[0])
    active = np.flatnonzero(ec > 0.0)
    if active.size:
        pa = pos[active]
        gain = jump.kernel.expectation(t, pa, lambda a: phi(a, t))
        jump_term[active] = ec[active] * (w[active] * (gain - phi(pa, t))).sum(axis=1)
    return drift + jump_term


def weak_residual(layout: LabelLayout, kernels: KernelChoice, jump: JumpSpec, times: np.ndarray,
                  A: np.ndarray, g: np.ndarray, u: np.ndarray, x: np.ndarray,
                  phi, phi_t, phi_a) -> np.ndarray:
    """Per-node residual of the weak transport identity over ``[times[0], times[-1]]``.

    ``A``, ``g`` and ``u`` are stacked over ``times`` (first axis).  Time
    integrals use the trapezoidal rule on the given mesh.
    """
    vals = np.array([
        weak_integrand(layout, kernels, jump, A[n], g[n], u[n, :-1], times[n], x, phi, phi_t, phi_a)
        for n in range(times.size)
    ])
    integral = np.trapezoid(vals, times, axis=0) if times.size > 1 else np.zeros(A.shape[1])
    end = (g[-1] * phi(layout.positions(A[-1]), times[-1])).sum(axis=1)
    start = (g[0] * phi(layout.positions(A[0]), times[0])).sum(axis=1)
    return integral - end + start


# ---------------------------------------------------------------------------
# export


def write_snapshot_csv(path: str | Path, layout: LabelLayout, A: np.ndarray, g: np.ndarray,
                       t: float) -> None:
    """One row per (node, label): label, seeds, A at both seeds, g weight, f atom."""
    pos = layout.positions(A)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "node", "label", "kind", "seed_left", "seed_right",
                     "A_left", "A_right", "g_weight", "f_position"])
        for k in range(A.shape[0]):
            for i in range(layout.n_labels):
                wr.writerow([
                    repr(t), k, repr(float(layout.labels[i])), CELL if layout.is_cell[i] else POINT,
                    repr(float(layout.seeds[layout.left[i]])), repr(float(layout.seeds[layout.right[i]])),
                    repr(float(A[k, layout.left[i]])), repr(float(A[k, layout.right[i]])),
                    repr(float(g[k, i])), repr(float(pos[k, i])),
                ])
