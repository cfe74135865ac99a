"""Model ingredients: deterioration kernels, toxicity, jump kernel, sources.

Everything here is a pure function of validated, immutable parameter objects.
Constructors and :func:`validate_model` run the standing hypotheses as
runtime checks (positivity of constants, vanishing of the deterioration terms
at ``a = 1``, sampled monotonicity, normalisation of the jump kernel).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._numerics import hinge_sum, prefix_sums, row_searchsorted
from .errors import DomainError, HypothesisError
from .measure import ParticleMeasure

logger = logging.getLogger(__name__)

G_KINDS = ("paper-default", "zero", "custom-table")
S_KINDS = ("paper-default", "zero", "affine-test")
P_KINDS = ("paper-example",)

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def _check_unit(name: str, v) -> None:
    arr = np.asarray(v, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError(f"{name} outside [0, 1]")


@dataclass
class ModelParams:
    """Scalar constants of the coupled model.

    ``d``, ``sigma`` and ``gamma`` hold one entry per diffusing species
    ``m = 1..N-1``; ``a_coag`` is the full N x N coagulation matrix, which is
    symmetrised on construction.
    """

    n_species: int
    eps: float
    d: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    a_coag: np.ndarray
    c_f: float = 1.0
    c_s: float = 1.0
    c_g: float = 1.0
    mu0: float = 0.1
    u_bar: float = 0.15

    def __post_init__(self):
        self.n_species = int(self.n_species)
        n = self.n_species
        if n < 2:
            raise HypothesisError("H1", f"need at least two species, got N={n}")
        self.d = np.asarray(self.d, dtype=float).reshape(-1)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(-1)
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(-1)
        for name in ("d", "sigma", "gamma"):
            if getattr(self, name).size != n - 1:
                raise HypothesisError("H1", f"{name} must have N-1={n - 1} entries")
        a = np.asarray(self.a_coag, dtype=float)
        if a.shape != (n, n):
            raise HypothesisError("H1", f"a_coag must be {n}x{n}, got {a.shape}")
        if not np.array_equal(a, a.T):
            logger.warning("coagulation matrix is not symmetric; replacing by (a + a^T)/2")
            a = 0.5 * (a + a.T)
        self.a_coag = a
        for name in ("eps", "c_f", "c_s", "c_g", "mu0", "u_bar"):
            setattr(self, name, float(getattr(self, name)))

    def validate(self, allow_degenerate_rates: bool = False) -> None:
        """Check H1.

        With ``allow_degenerate_rates`` the clearance rates, coagulation
        coefficients, ``c_f`` and ``mu0`` may vanish; this is used only by the
        closed-form verification scenarios.
        """
        n = self.n_species
        quoted = "are positive constants"

        def positive(name, value, strict):
            arr = np.asarray(value, dtype=float)
            if not np.all(np.isfinite(arr)):
                raise HypothesisError("H1", f"{name} must be finite")
            bad = arr <= 0.0 if strict else arr < 0.0
            if np.any(bad):
                first = int(np.flatnonzero(np.ravel(bad))[0])
                where = name
                if arr.ndim:
                    where += "[" + ",".join(str(i + 1) for i in np.unravel_index(first, arr.shape)) + "]"
                req = "positive" if strict else "nonnegative"
                raise HypothesisError("H1", f"{where} = {float(np.ravel(arr)[first])!r} must be {req} ('{quoted}')")

        strict = not allow_degenerate_rates
        positive("eps", self.eps, True)
        positive("d", self.d, True)
        positive("gamma", self.gamma, True)
        positive("sigma", self.sigma, strict)
        positive("c_f", self.c_f, strict)
        positive("mu0", self.mu0, strict)
        positive("a_coag", self.a_coag[: n - 1, :], strict)
        positive("a_coag", self.a_coag, False)
        positive("c_s", self.c_s, False)
        positive("c_g", self.c_g, False)
        positive("u_bar", self.u_bar, True)

    def to_dict(self) -> dict:
        return {
            "N": self.n_species,
            "eps": self.eps,
            "d": self.d.tolist(),
            "sigma": self.sigma.tolist(),
            "gamma": self.gamma.tolist(),
            "a_coag": self.a_coag.tolist(),
            "C_F": self.c_f,
            "C_S": self.c_s,
            "C_G": self.c_g,
            "mu0": self.mu0,
            "U_bar": self.u_bar,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        return cls(
            n_species=data["N"],
            eps=data["eps"],
            d=data["d"],
            sigma=data["sigma"],
            gamma=data["gamma"],
            a_coag=data["a_coag"],
            c_f=data.get("C_F", 1.0),
            c_s=data.get("C_S", 1.0),
            c_g=data.get("C_G", 1.0),
            mu0=data.get("mu0", 0.1),
            u_bar=data.get("U_bar", 0.15),
        )


# ---------------------------------------------------------------------------
# deterioration kernel G_x(a, b)


@dataclass(frozen=True)
class TableKernel:
    """Bilinear interpolant of G values tabulated on an (a, b) grid."""

    a_grid: np.ndarray
    b_grid: np.ndarray
    values: np.ndarray  # shape (len(a_grid), len(b_grid))

    def __post_init__(self):
        if self.a_grid[0] != 0.0 or self.a_grid[-1] != 1.0 or self.b_grid[0] != 0.0 or self.b_grid[-1] != 1.0:
            raise HypothesisError("H4", "custom G table must span [0, 1]^2")

    def __call__(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        a, b = np.broadcast_arrays(a, b)
        ia = np.clip(np.searchsorted(self.a_grid, a, side="right") - 1, 0, self.a_grid.size - 2)
        ib = np.clip(np.searchsorted(self.b_grid, b, side="right") - 1, 0, self.b_grid.size - 2)
        a0, a1 = self.a_grid[ia], self.a_grid[ia + 1]
        b0, b1 = self.b_grid[ib], self.b_grid[ib + 1]
        ta = (a - a0) / (a1 - a0)
        tb = (b - b0) / (b1 - b0)
        v = self.values
        return ((1 - ta) * (1 - tb) * v[ia, ib] + ta * (1 - tb) * v[ia + 1, ib]
                + (1 - ta) * tb * v[ia, ib + 1] + ta * tb * v[ia + 1, ib + 1])

    def d_a(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        a, b = np.broadcast_arrays(a, b)
        ia = np.clip(np.searchsorted(self.a_grid, a, side="right") - 1, 0, self.a_grid.size - 2)
        ib = np.clip(np.searchsorted(self.b_grid, b, side="right") - 1, 0, self.b_grid.size - 2)
        b0, b1 = self.b_grid[ib], self.b_grid[ib + 1]
        tb = (b - b0) / (b1 - b0)
        v = self.values
        da = self.a_grid[ia + 1] - self.a_grid[ia]
        return ((1 - tb) * (v[ia + 1, ib] - v[ia, ib]) + tb * (v[ia + 1, ib + 1] - v[ia, ib + 1])) / da

    @classmethod
    def from_csv(cls, path: str | Path) -> "TableKernel":
        """Read ``a, b, value`` rows covering a full rectangular grid."""
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [(float(r["a"]), float(r["b"]), float(r["value"])) for r in csv.DictReader(fh)]
        a_grid = np.unique([r[0] for r in rows])
        b_grid = np.unique([r[1] for r in rows])
        values = np.full((a_grid.size, b_grid.size), np.nan)
        for a, b, v in rows:
            values[np.searchsorted(a_grid, a), np.searchsorted(b_grid, b)] = v
        if np.any(np.isnan(values)):
            raise HypothesisError("H4", f"{path}: table does not cover a full (a, b) grid")
        return cls(a_grid, b_grid, values)


@dataclass(frozen=True)
class GKernel:
    kind: str = "paper-default"
    c_g: float = 1.0
    tables: tuple = ()
    table_paths: tuple = ()

    def __post_init__(self):
        if self.kind not in G_KINDS:
            raise HypothesisError("H4", f"unknown G kind {self.kind!r}")
        if self.kind == "custom-table" and not self.tables:
            raise HypothesisError("H4", "custom-table G needs at least one table")

    def table(self, node: int | None) -> TableKernel:
        if len(self.tables) == 1 or node is None:
            return self.tables[0]
        return self.tables[node]

    def __call__(self, a, b, node: int | None = None):
        if self.kind == "paper-default":
            return self.c_g * np.maximum(np.asarray(b, dtype=float) - np.asarray(a, dtype=float), 0.0)
        if self.kind == "zero":
            return np.zeros(np.broadcast(np.asarray(a), np.asarray(b)).shape)
        return self.table(node)(a, b)

    def d_a(self, a, b, node: int | None = None):
        if self.kind == "paper-default":
            return np.where(np.asarray(b) > np.asarray(a), -self.c_g, 0.0)
        if self.kind == "zero":
            return np.zeros(np.broadcast(np.asarray(a), np.asarray(b)).shape)
        return self.table(node).d_a(a, b)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "custom-table":
            out["tables"] = list(self.table_paths)
        return out


# ---------------------------------------------------------------------------
# toxicity term S(x, a, u)


@dataclass(frozen=True)
class SKernel:
    kind: str = "paper-default"
    c_s: float = 1.0
    u_bar: float = 0.15
    c: float = 1.0  # slope of the affine-test kind

    def __post_init__(self):
        if self.kind not in S_KINDS:
            raise HypothesisError("H5", f"unknown S kind {self.kind!r}")

    def excess(self, u) -> np.ndarray:
        """``(sum_m m |u_m| - U_bar)^+`` for u of shape (N-1, ...)."""
        u = np.abs(np.asarray(u, dtype=float))
        m = np.arange(1, u.shape[0] + 1).reshape((-1,) + (1,) * (u.ndim - 1))
        return np.maximum((m * u).sum(axis=0) - self.u_bar, 0.0)

    def rate(self, u) -> np.ndarray:
        """Coefficient ``r`` in ``S = r (1 - a)``; every shipped kind is of this form."""
        if self.kind == "paper-default":
            return self.c_s * self.excess(u)
        u = np.asarray(u, dtype=float)
        shape = u.shape[1:]
        if self.kind == "zero":
            return np.zeros(shape)
        return np.full(shape, self.c)

    def __call__(self, a, u):
        return self.rate(u) * (1.0 - np.asarray(a, dtype=float))

    def d_a(self, a, u):
        return -self.rate(u) * np.ones_like(np.asarray(a, dtype=float))

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "affine-test":
            out["c"] = self.c
        return out


@dataclass(frozen=True)
class KernelChoice:
    G: GKernel
    S: SKernel

    def validate(self, n_species: int, rng: np.random.Generator | None = None,
                 samples: int = 100) -> None:
        """Sampled checks of H4 and H5.

        ``G(1, b) = 0``, ``-C <= dG/da <= 0``, ``|dG/db| <= C``, ``S(x, 1, u) = 0``
        and ``dS/da <= 0`` on a compact box of concentrations.
        """
        rng = rng or np.random.default_rng(12345)
        b = np.linspace(0.0, 1.0, 101)
        nodes = range(len(self.G.tables)) if self.G.kind == "custom-table" else [None]
        for node in nodes:
            g1 = self.G(np.ones_like(b), b, node)
            if np.max(np.abs(g1)) > 1e-12:
                raise HypothesisError("H4", "G(1, b) must vanish for all b ('G_x(1,b)= 0')")
            a0 = rng.uniform(0.0, 1.0 - 1e-3, samples)
            bb = rng.uniform(0.0, 1.0, samples)
            h = 1e-4
            slope_a = (self.G(a0 + h, bb, node) - self.G(a0, bb, node)) / h
            if np.any(slope_a > 1e-6):
                raise HypothesisError("H4", "G must be nonincreasing in a")
            bound = max(self.G.c_g if self.G.kind == "paper-default" else float(np.max(-slope_a)), 0.0)
            if np.any(slope_a < -bound - 1e-6):
                raise HypothesisError("H4", "dG/da below -C")
            if np.any(np.asarray(self.G(a0, bb, node)) < -1e-12):
                raise HypothesisError("H4", "G must be nonnegative")
        u = rng.uniform(0.0, 2.0, size=(n_species - 1, samples))
        s1 = self.S(np.ones(samples), u)
        if np.max(np.abs(s1)) > 1e-12:
            raise HypothesisError("H5", "S(x, 1, u) must vanish ('S(x,1,u_1,...,u_{N-1})=0')")
        a0 = rng.uniform(0.0, 1.0 - 1e-3, samples)
        slope = (self.S(a0 + 1e-4, u) - self.S(a0, u)) / 1e-4
        if np.any(slope > 1e-6):
            raise HypothesisError("H5", "S must be nonincreasing in a")
        if np.any(self.S(a0, u) < 0.0):
            raise HypothesisError("H5", "S must be nonnegative")

    def to_dict(self) -> dict:
        return {"G": self.G.to_dict(), "S": self.S.to_dict()}


# ---------------------------------------------------------------------------
# jump kernel P(t, b, a)


@dataclass(frozen=True)
class ExampleJumpKernel:
    """``P(b, a) = 2 / (1 - b)`` on ``b <= a <= (1 + b) / 2``, clamped near b = 1.

    For ``b > b_max = 1 - delta`` the row keeps the height ``2 / delta`` of the
    ``b_max`` row, starts at ``b`` and is cut at 1, so it stays bounded and
    vanishes below ``b``.  Rows with ``b > 1 - delta / 2`` then carry mass
    below one; that residue is reported by :meth:`row_mass`.
    """

    delta: float = 1e-3

    @property
    def b_max(self) -> float:
        return 1.0 - self.delta

    def segments(self, b):
        """Start, length and height of the uniform row supported from ``b``."""
        b = np.asarray(b, dtype=float)
        clamped = b > self.b_max
        height = np.where(clamped, 2.0 / self.delta, 2.0 / np.maximum(1.0 - b, self.delta))
        length = np.where(clamped, np.minimum(0.5 * self.delta, 1.0 - b), 0.5 * (1.0 - b))
        return b, length, height

    def density(self, t, b, a):
        start, length, height = self.segments(b)
        a = np.asarray(a, dtype=float)
        inside = (a >= start) & (a <= start + length) & (length > 0.0)
        return np.where(inside, height, 0.0)

    def antiderivative(self, t, b, a):
        """``int_0^a P(t, b, s) ds``."""
        start, length, height = self.segments(b)
        return height * np.clip(np.asarray(a, dtype=float) - start, 0.0, length)

    def row_mass(self, t, b):
        _, length, height = self.segments(b)
        return height * length

    def mixture_cumulative(self, t, b: np.ndarray, w: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Row-wise ``sum_i w_i int_0^a P(t, b_i, s) ds`` for sorted ``b`` rows."""
        start, length, height = self.segments(b)
        end = start + length
        wh = w * height
        # Both start and end are nondecreasing along a row, so the rows
        # started below ``a`` and the rows finished below ``a`` are prefixes.
        i_s = row_searchsorted(start, a)
        i_e = row_searchsorted(end, a)
        full = prefix_sums(wh * length)
        s_wh = prefix_sums(wh)
        s_whs = prefix_sums(wh * start)
        take = lambda arr, idx: np.take_along_axis(arr, idx, axis=1)  # noqa: E731
        partial = a * (take(s_wh, i_s) - take(s_wh, i_e)) - (take(s_whs, i_s) - take(s_whs, i_e))
        return take(full, i_e) + np.maximum(partial, 0.0)

    def expectation(self, t, b: np.ndarray, func: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """``int func(a) P(t, b, a) da`` for each ``b`` (8-point Gauss on the support)."""
        start, length, height = self.segments(b)
        half = 0.5 * length[..., None]
        nodes = start[..., None] + half * (1.0 + _GL_NODES)
        vals = np.asarray(func(nodes), dtype=float)
        return height * (half[..., 0] * (vals * _GL_WEIGHTS).sum(axis=-1))

    def lipschitz_estimate(self, n: int = 400, b_limit: float = 0.9) -> float:
        """Largest neighbour difference quotient of P on a uniform grid with b <= b_limit.

        The example kernel jumps at the ends of its support, so this number
        scales with ``n``; it is a recorded diagnostic, not a sharp constant.
        """
        b = np.linspace(0.0, b_limit, n + 1)
        a = np.linspace(0.0, 1.0, n + 1)
        bb, aa = np.meshgrid(b, a, indexing="ij")
        p = self.density(0.0, bb, aa)
        qa = np.abs(np.diff(p, axis=1)) / np.diff(a)[None, :]
        qb = np.abs(np.diff(p, axis=0)) / np.diff(b)[:, None]
        return float(max(qa.max(), qb.max()))

    def to_dict(self) -> dict:
        return {"kind": "paper-example", "delta": self.delta}


@dataclass(frozen=True)
class JumpSpec:
    """Jump frequency, seeding region and post-jump kernel."""

    eta_times: tuple = (0.0,)
    eta_values: tuple = (0.0,)
    chi_boxes: tuple = ()
    kernel: ExampleJumpKernel = field(default_factory=ExampleJumpKernel)

    def __post_init__(self):
        times = np.asarray(self.eta_times, dtype=float)
        vals = np.asarray(self.eta_values, dtype=float)
        if times.size != vals.size or times.size == 0:
            raise HypothesisError("H3", "eta needs matching non-empty times and values")
        if times[0] != 0.0 or np.any(np.diff(times) <= 0.0):
            raise HypothesisError("H3", "eta breakpoints must start at 0 and increase")
        if np.any(vals < 0.0) or not np.all(np.isfinite(vals)):
            raise HypothesisError("H3", "eta must be nonnegative ('the function eta ... is nonnegative')")
        for box in self.chi_boxes:
            if len(box) != 4 or box[0] > box[1] or box[2] > box[3]:
                raise HypothesisError("H3", f"bad seeding box {box!r}; expected (x_lo, x_hi, t_lo, t_hi)")

    @property
    def P_lipschitz(self) -> float:
        return self.kernel.lipschitz_estimate()

    def eta(self, t: float) -> float:
        i = np.searchsorted(self.eta_times, t, side="right") - 1
        return float(self.eta_values[max(i, 0)])

    def chi(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape, dtype=bool)
        for x_lo, x_hi, t_lo, t_hi in self.chi_boxes:
            if t_lo <= t <= t_hi:
                out |= (x >= x_lo) & (x <= x_hi)
        return out

    def eta_chi(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.eta(t) * self.chi(x, t).astype(float)

    def validate(self, samples: Sequence[float] | None = None) -> None:
        """H6: rows integrate to one and vanish below ``b``."""
        b = np.linspace(0.0, self.kernel.b_max, 201) if samples is None else np.asarray(samples)
        mass = self.kernel.row_mass(0.0, b)
        bad = np.flatnonzero(np.abs(mass - 1.0) > 1e-10)
        if bad.size:
            raise HypothesisError("H6", f"normalization failed for b={b[bad[0]]:.4g} (mass {mass[bad[0]]:.12g})")
        for bi in b[:: max(1, b.size // 20)]:
            a = np.linspace(0.0, bi, 50, endpoint=False)
            a = a[a < bi]
            if np.any(self.kernel.density(0.0, np.full_like(a, bi), a) != 0.0):
                raise HypothesisError("H6", f"P(t, b, a) must vanish for a < b (b={bi:.4g})")
        tail = np.linspace(self.kernel.b_max, 1.0, 11)
        residue = float(np.max(np.abs(self.kernel.row_mass(0.0, tail) - 1.0)))
        if residue > 0.0:
            logger.info("jump kernel rows above b=%.6g lose up to %.3g of their mass (clamp residue)",
                        1.0 - 0.5 * self.kernel.delta, residue)

    def to_dict(self) -> dict:
        return {
            "eta": {"times": list(self.eta_times), "values": list(self.eta_values)},
            "chi_boxes": [list(b) for b in self.chi_boxes],
            "P": self.kernel.to_dict(),
        }


# ---------------------------------------------------------------------------
# pointwise operations


def eval_G(kernels: KernelChoice, x: int | None, a, b):
    _check_unit("a", a)
    _check_unit("b", b)
    return kernels.G(a, b, x)


def eval_S(kernels: KernelChoice, x: int | None, a, u):
    _check_unit("a", a)
    return kernels.S(a, np.asarray(u, dtype=float))


def eval_P(jump: JumpSpec, t, b, a):
    _check_unit("a", a)
    _check_unit("b", b)
    return jump.kernel.density(t, b, a)


def eval_F(params: ModelParams, g: ParticleMeasure, A_slice: Callable[[np.ndarray], np.ndarray]) -> float:
    """Monomer production ``C_F int (mu0 + A(y)) (1 - A(y)) dg(y)``."""
    pos = np.asarray(A_slice(g.positions), dtype=float)
    return float(params.c_f * np.dot(g.weights, (params.mu0 + pos) * (1.0 - pos)))


def velocity(kernels: KernelChoice, x: int | None, a, t: float, g: ParticleMeasure,
             A_slice: Callable[[np.ndarray], np.ndarray], u) -> np.ndarray:
    """Deterioration rate at health state(s) ``a`` of node ``x``."""
    _check_unit("a", a)
    a = np.asarray(a, dtype=float)
    b = np.asarray(A_slice(g.positions), dtype=float)
    peer = (g.weights * kernels.G(a[..., None], b, x)).sum(axis=-1)
    return peer + kernels.S(a, np.asarray(u, dtype=float))


def production(params: ModelParams, positions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Batched monomer source: rows are spatial nodes."""
    return params.c_f * np.einsum("kn,kn->k", weights, (params.mu0 + positions) * (1.0 - positions))


def velocity_field(kernels: KernelChoice, query: np.ndarray, positions: np.ndarray,
                   weights: np.ndarray, u: np.ndarray, with_derivative: bool = False):
    """Batched deterioration rate.

    ``query`` (K, m) are the health states where v is needed, ``positions`` and
    ``weights`` (K, n) the atoms of f at each node (rows sorted), ``u`` the
    diffusing species (N-1, K).  Returns v, and dv/da when requested.
    """
    G = kernels.G
    if G.kind == "paper-default":
        tot_w = weights.sum(axis=1, keepdims=True)
        tot_wc = (weights * positions).sum(axis=1, keepdims=True)
        below, w_below = hinge_sum(positions, weights, query, return_count=True)
        # sum w (c - a)^+ = sum w (c - a) + sum w (a - c)^+
        peer = G.c_g * np.maximum(tot_wc - query * tot_w + below, 0.0)
        d_peer = -G.c_g * (tot_w - w_below)
    elif G.kind == "zero":
        peer = np.zeros_like(query)
        d_peer = np.zeros_like(query)
    else:
        peer = np.empty_like(query)
        d_peer = np.empty_like(query)
        for k in range(query.shape[0]):
            qa = query[k][:, None]
            peer[k] = (weights[k] * G(qa, positions[k], k)).sum(axis=1)
            d_peer[k] = (weights[k] * G.d_a(qa, positions[k], k)).sum(axis=1)
    rate = kernels.S.rate(u)[:, None]
    v = peer + rate * (1.0 - query)
    if with_derivative:
        return v, d_peer - rate
    return v
