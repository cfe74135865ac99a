"""Amyloid species: coagulation reactions, diffusion with Neumann/Robin ends.

Concentrations are stored as an (N, K) array: row ``m - 1`` is species
``u_m`` on the K spatial nodes.  Species ``1..N-1`` diffuse; ``u_N``
(plaques) only accumulates.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded

from .errors import SolverError, StepSizeError
from .kernels import ModelParams

logger = logging.getLogger(__name__)

NEUMANN = "Omega0"
ROBIN = "Omega1"
BOUNDARY_LABELS = (NEUMANN, ROBIN)
CFL_LIMIT = 0.5
NONNEG_TOL = 1e-12
BOUND_TOL = 1e-9
MAX_SUBCYCLE_HALVINGS = 12


@dataclass(frozen=True)
class SpatialGrid:
    K: int
    X_len: float = 1.0
    left: str = NEUMANN
    right: str = NEUMANN

    def __post_init__(self):
        if self.K < 3:
            raise ValueError(f"need K >= 3 spatial nodes, got {self.K}")
        if not self.X_len > 0.0:
            raise ValueError("domain length must be positive")
        for lab in (self.left, self.right):
            if lab not in BOUNDARY_LABELS:
                raise ValueError(f"boundary label must be one of {BOUNDARY_LABELS}, got {lab!r}")

    @property
    def h(self) -> float:
        return self.X_len / (self.K - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.X_len, self.K)

    @property
    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.K, self.h)
        w[[0, -1]] *= 0.5
        return w

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Trapezoidal integral over the last axis."""
        return values @ self.trapezoid_weights

    def to_dict(self) -> dict:
        return {"K": self.K, "X_len": self.X_len, "left": self.left, "right": self.right}


@dataclass
class Concentrations:
    u: np.ndarray
    t: float = 0.0

    @property
    def N(self) -> int:
        return self.u.shape[0]


# ---------------------------------------------------------------------------
# reactions


def reaction_parts(u: np.ndarray, F: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Gain and loss parts of the reaction terms, both nonnegative for u >= 0.

    ``R = gain - loss``.  Gains are the production F (species 1) and the
    coagulation inflow; losses are the coagulation outflow and clearance.
    """
    N = params.n_species
    a = params.a_coag
    gain = np.zeros_like(u)
    loss = np.zeros_like(u)
    gain[0] = F
    outflow = a[: N - 1] @ u  # sum_j a_{m j} u_j for m < N
    loss[: N - 1] = u[: N - 1] * outflow + params.sigma[:, None] * u[: N - 1]
    for m in range(2, N):
        acc = np.zeros(u.shape[1])
        for j in range(1, m):
            acc += a[j - 1, m - j - 1] * u[j - 1] * u[m - j - 1]
        gain[m - 1] = 0.5 * acc
    acc = np.zeros(u.shape[1])
    for j in range(1, N):
        for k in range(max(1, N - j), N):
            acc += a[j - 1, k - 1] * u[j - 1] * u[k - 1]
    gain[N - 1] = 0.5 * acc
    return gain, loss


def reaction_rhs(u: np.ndarray, F: np.ndarray, params: ModelParams) -> np.ndarray:
    gain, loss = reaction_parts(u, F, params)
    return gain - loss


def loss_rate(u: np.ndarray, params: ModelParams) -> np.ndarray:
    """Relative loss rate ``sum_j a_{mj} u_j + sigma_m`` of the diffusing species."""
    N = params.n_species
    return params.a_coag[: N - 1] @ u + params.sigma[:, None]


# ---------------------------------------------------------------------------
# diffusion


def diffusion_matrix(grid: SpatialGrid, d: float, gamma: float, dt: float, eps: float) -> np.ndarray:
    """Banded form of ``eps I - dt d Lap_h`` with ghost-node boundary closure."""
    K, h = grid.K, grid.h
    r = dt * d / h**2
    ab = np.zeros((3, K))
    ab[0, 1:] = -r
    ab[1, :] = eps + 2.0 * r
    ab[2, :-1] = -r
    # ghost nodes: Neumann mirrors the neighbour; Robin adds -2 h gamma u_end
    ab[0, 1] = -2.0 * r
    ab[2, K - 2] = -2.0 * r
    if grid.left == ROBIN:
        ab[1, 0] += 2.0 * r * h * gamma
    if grid.right == ROBIN:
        ab[1, K - 1] += 2.0 * r * h * gamma
    return ab


def diffusion_step(u_m: np.ndarray, d_m: float, dt: float, grid: SpatialGrid, gamma_m: float,
                   eps: float = 1.0) -> np.ndarray:
    """Backward-Euler diffusion of one species: ``eps v - dt d Lap_h v = eps u``."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    ab = diffusion_matrix(grid, d_m, gamma_m, dt, eps)
    if np.any(ab[1] <= 0.0):
        raise SolverError("diffusion matrix lost its positive diagonal")
    return solve_banded((1, 1), ab, eps * np.asarray(u_m, dtype=float))


def boundary_outflow(u: np.ndarray, params: ModelParams, grid: SpatialGrid) -> np.ndarray:
    """Instantaneous Robin outflow ``d_m gamma_m u_m`` summed over absorbing ends."""
    out = np.zeros(params.n_species - 1)
    for end, label in ((0, grid.left), (-1, grid.right)):
        if label == ROBIN:
            out += params.d * params.gamma * u[: params.n_species - 1, end]
    return out


# ---------------------------------------------------------------------------
# species step


@dataclass
class SpeciesStepInfo:
    clipped_mass: float = 0.0
    substeps: int = 1
    max_gain: np.ndarray | None = None


def _single_step(u: np.ndarray, F: np.ndarray, dt: float, params: ModelParams, grid: SpatialGrid,
                 frozen_u: np.ndarray | None, clip: bool, info: SpeciesStepInfo) -> np.ndarray:
    eps = params.eps
    src = u if frozen_u is None else frozen_u
    gain, loss = reaction_parts(src, F, params)
    if frozen_u is None:
        rate = dt * loss_rate(u, params) / eps
        bad = (u[: params.n_species - 1] > 0.0) & (rate > CFL_LIMIT)
        if np.any(bad):
            raise StepSizeError(f"reaction step dt={dt:.3g} exceeds the loss-rate limit {CFL_LIMIT}")
    new = u + (dt / eps) * (gain - loss)
    g_sup = gain.max(axis=1) / eps
    info.max_gain = g_sup if info.max_gain is None else np.maximum(info.max_gain, g_sup)
    if clip:
        neg = new < 0.0
        if np.any(neg):
            clipped = float(grid.integrate(np.where(neg, -new, 0.0)).sum())
            info.clipped_mass += clipped
            logger.debug("clipped %.3g of negative concentration mass", clipped)
            new[neg] = 0.0
    for m in range(params.n_species - 1):
        new[m] = diffusion_step(new[m], params.d[m], dt, grid, params.gamma[m], eps)
    return new


def step_species(u: np.ndarray, F: np.ndarray, dt: float, params: ModelParams, grid: SpatialGrid,
                 *, frozen_u: np.ndarray | None = None, clip: bool = True
                 ) -> tuple[np.ndarray, SpeciesStepInfo]:
    """Lie splitting: explicit reaction, then implicit diffusion for species 1..N-1.

    With ``frozen_u`` the reaction terms are evaluated at that fixed profile
    (the linear sub-problem of the fixed-point map) and no stability limit
    applies.  Otherwise a loss-rate violation triggers sub-cycling with F
    held fixed.
    """
    n_sub = 1
    for _ in range(MAX_SUBCYCLE_HALVINGS + 1):
        try:
            cur = u
            sub_info = SpeciesStepInfo()
            for _ in range(n_sub):
                cur = _single_step(cur, F, dt / n_sub, params, grid, frozen_u, clip, sub_info)
            sub_info.substeps = n_sub
            return cur, sub_info
        except StepSizeError:
            n_sub *= 2
            logger.info("sub-cycling the reaction step into %d pieces", n_sub)
    raise StepSizeError(f"reaction step still unstable after {n_sub // 2} sub-steps")


# ---------------------------------------------------------------------------
# checks


def nonnegativity_check(u: np.ndarray) -> tuple[bool, float]:
    low = float(np.min(u))
    return low >= -NONNEG_TOL, low


def apriori_bound(u0: np.ndarray, t: float, bound_consts: np.ndarray) -> np.ndarray:
    """``sup u_0m + C_m t`` per species."""
    return u0.max(axis=1) + np.asarray(bound_consts, dtype=float) * t


def apriori_bound_check(u: np.ndarray, u0: np.ndarray, t: float,
                        bound_consts: np.ndarray) -> tuple[bool, np.ndarray]:
    """Whether ``u_m <= sup u_0m + C_m t + 1e-9`` everywhere.

    Margins are ``bound - max_x u_m`` per species (negative means violated).
    """
    margins = apriori_bound(u0, t, bound_consts) - u.max(axis=1)
    return bool(np.all(margins >= -BOUND_TOL)), margins


# ---------------------------------------------------------------------------
# export


def write_profile_csv(path: str | Path, grid: SpatialGrid, u: np.ndarray, t: float) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "x"] + [f"u_{m + 1}" for m in range(u.shape[0])])
        for k, xk in enumerate(grid.x):
            wr.writerow([repr(t), repr(float(xk))] + [repr(float(v)) for v in u[:, k]])


def species_summary(u_hist: np.ndarray, clipped_mass: float, outflow: np.ndarray) -> dict:
    """Max/min per species over a stack of profiles, clipped mass, boundary outflow."""
    return {
        "max": u_hist.max(axis=(0, 2)).tolist(),
        "min": u_hist.min(axis=(0, 2)).tolist(),
        "clipped_mass": clipped_mass,
        "boundary_outflow": np.asarray(outflow).tolist(),
    }


def write_summary_json(path: str | Path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2), encoding="utf-8")
