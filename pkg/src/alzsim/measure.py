"""Probability measures on [0, 1] stored as weighted particle lists.

A :class:`ParticleMeasure` is a finite sum of weighted atoms.  Atoms carry a
*kind*: ``grid-cell`` atoms stand for mass spread over a small cell (their
``cell_width`` is the cell size in the coordinate they were created in) while
``point-atom`` atoms are genuine Dirac masses.  The kind only matters to the
transport solver; every metric operation treats atoms as points.

The production Wasserstein-1 distance uses the closed form on the line,

    W1(mu, nu) = int_0^1 |F_mu(s) - F_nu(s)| ds,

evaluated exactly on the merged breakpoints.  The coupling linear program is
kept as an independent oracle (:func:`wasserstein_lp_oracle`).
"""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import CapacityError, ContractViolation, DomainError, MeasureError

logger = logging.getLogger(__name__)

CELL = "grid-cell"
POINT = "point-atom"
KINDS = (CELL, POINT)

MASS_TOL = 1e-12
WEIGHT_FLOOR = 1e-15
ORACLE_MAX_ATOMS = 64
LP_CROSSCHECK_MAX_ATOMS = 8


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ParticleMeasure:
    """Weighted atoms on [0, 1] in canonical (sorted, merged) form.

    Use :meth:`from_atoms` (or the helpers :meth:`dirac`, :meth:`uniform_grid`)
    rather than the raw constructor; it sorts, merges co-located atoms of the
    same kind and prunes negligible weights.
    """

    positions: np.ndarray
    weights: np.ndarray
    is_cell: np.ndarray
    cell_widths: np.ndarray

    @classmethod
    def from_atoms(
        cls,
        positions: Sequence[float] | np.ndarray,
        weights: Sequence[float] | np.ndarray,
        kinds: Sequence[str] | np.ndarray | None = None,
        cell_widths: Sequence[float] | np.ndarray | None = None,
        *,
        normalize: bool = False,
    ) -> "ParticleMeasure":
        x = np.asarray(positions, dtype=float).ravel()
        w = np.asarray(weights, dtype=float).ravel()
        if x.shape != w.shape:
            raise MeasureError("positions and weights differ in length")
        if kinds is None:
            cell = np.zeros(x.size, dtype=bool)
        else:
            kinds = np.asarray(kinds)
            if kinds.dtype == bool:
                cell = kinds.astype(bool).ravel()
            else:
                bad = set(kinds.tolist()) - set(KINDS)
                if bad:
                    raise MeasureError(f"unknown atom kind(s): {sorted(bad)}")
                cell = kinds.ravel() == CELL
        if cell.shape != x.shape:
            raise MeasureError("kinds and positions differ in length")
        if cell_widths is None:
            widths = np.zeros(x.size)
        else:
            widths = np.asarray(cell_widths, dtype=float).ravel()
            if widths.shape != x.shape:
                raise MeasureError("cell_widths and positions differ in length")
        widths = np.where(cell, widths, 0.0)

        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w))):
            raise MeasureError("non-finite position or weight")
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise MeasureError("atom position outside [0, 1]")
        if np.any(w < 0.0):
            raise MeasureError("negative atom weight")
        if np.any(widths < 0.0):
            raise MeasureError("negative cell width")

        # Points sort before cells at equal positions; merge same (position, kind).
        order = np.lexsort((cell, x))
        x, w, cell, widths = x[order], w[order], cell[order], widths[order]
        if x.size > 1:
            new_group = np.ones(x.size, dtype=bool)
            new_group[1:] = (x[1:] != x[:-1]) | (cell[1:] != cell[:-1])
            group = np.cumsum(new_group) - 1
            ng = group[-1] + 1
            w = np.bincount(group, weights=w, minlength=ng)
            widths = np.bincount(group, weights=widths, minlength=ng)
            x = x[new_group]
            cell = cell[new_group]

        total = w.sum()
        keep = w >= WEIGHT_FLOOR
        if not np.all(keep):
            kept = w[keep].sum()
            pruned = total - kept
            if kept > 0.0:
                w = w * np.where(keep, total / kept, 0.0)
            logger.debug("pruned %d atoms carrying mass %.3e", int((~keep).sum()), pruned)
            x, w, cell, widths = x[keep], w[keep], cell[keep], widths[keep]
            total = w.sum()
        if normalize:
            if total <= 0.0:
                raise MeasureError("cannot normalize a measure of zero mass")
            w = w / total
        if x.size == 0:
            raise MeasureError("measure has no atoms")
        return cls(_frozen(x), _frozen(w), _frozen(cell), _frozen(widths))

    @classmethod
    def dirac(cls, position: float) -> "ParticleMeasure":
        return cls.from_atoms([position], [1.0], [POINT])

    @classmethod
    def uniform_grid(cls, n_cells: int) -> "ParticleMeasure":
        """Lebesgue measure on [0, 1] discretised as ``n_cells`` equal cells."""
        h = 1.0 / n_cells
        mids = (np.arange(n_cells) + 0.5) * h
        return cls.from_atoms(mids, np.full(n_cells, h), [CELL] * n_cells,
                              np.full(n_cells, h))

    def __len__(self) -> int:
        return int(self.positions.size)

    @property
    def kinds(self) -> list[str]:
        return [CELL if c else POINT for c in self.is_cell]

    @property
    def is_probability(self) -> bool:
        return abs(self.weights.sum() - 1.0) <= MASS_TOL

    def require_probability(self) -> "ParticleMeasure":
        mass = float(self.weights.sum())
        if abs(mass - 1.0) > MASS_TOL:
            raise MeasureError(f"total mass {mass!r} differs from 1 by more than {MASS_TOL}")
        return self

    def equals(self, other: "ParticleMeasure") -> bool:
        return (
            len(self) == len(other)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.is_cell, other.is_cell)
        )

    def to_csv(self, path: str | Path) -> None:
        write_measure_csv(self, path)


def total_mass(mu: ParticleMeasure) -> float:
    return float(mu.weights.sum())


def cdf(mu: ParticleMeasure, s: float) -> float:
    """Right-continuous distribution function ``mu([0, s])``."""
    if not 0.0 <= s <= 1.0:
        raise DomainError(f"cdf argument {s!r} outside [0, 1]")
    k = np.searchsorted(mu.positions, s, side="right")
    return float(mu.weights[:k].sum())


def _cdf_on(mu: ParticleMeasure, points: np.ndarray) -> np.ndarray:
    cum = np.concatenate(([0.0], np.cumsum(mu.weights)))
    return cum[np.searchsorted(mu.positions, points, side="right")]


def wasserstein1(mu: ParticleMeasure, nu: ParticleMeasure) -> float:
    """Exact W1 distance through the CDF-difference integral."""
    mu.require_probability()
    nu.require_probability()
    breaks = np.union1d(mu.positions, nu.positions)
    if breaks.size < 2:
        return 0.0
    diff = np.abs(_cdf_on(mu, breaks[:-1]) - _cdf_on(nu, breaks[:-1]))
    return float(np.dot(diff, np.diff(breaks)))


def _sorted_merge_cost(x: np.ndarray, a: np.ndarray, y: np.ndarray, b: np.ndarray) -> float:
    # north-west corner rule on sorted supports; optimal for |x - y| on the line
    i = j = 0
    ra, rb = float(a[0]), float(b[0])
    cost = 0.0
    while True:
        m = min(ra, rb)
        cost += m * abs(x[i] - y[j])
        ra -= m
        rb -= m
        if ra <= 0.0:
            i += 1
            if i == x.size:
                break
            ra = float(a[i])
        if rb <= 0.0:
            j += 1
            if j == y.size:
                break
            rb = float(b[j])
    return cost


def transport_lp(mu: ParticleMeasure, nu: ParticleMeasure) -> float:
    """Solve the discrete Kantorovich problem with a generic LP solver."""
    from scipy.optimize import linprog

    n, m = len(mu), len(nu)
    cost = np.abs(mu.positions[:, None] - nu.positions[None, :]).ravel()
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate((mu.weights, nu.weights))
    res = linprog(cost, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise MeasureError(f"transport LP failed: {res.message}")
    return float(res.fun)


def wasserstein_lp_oracle(mu: ParticleMeasure, nu: ParticleMeasure) -> float:
    """Brute-force W1 over the coupling polytope, for verification only.

    The optimal plan is built by the sorted north-west-corner rule.  For inputs
    with at most eight atoms each, a generic LP is solved as well and the two
    values must agree.
    """
    mu.require_probability()
    nu.require_probability()
    if len(mu) > ORACLE_MAX_ATOMS or len(nu) > ORACLE_MAX_ATOMS:
        raise CapacityError(
            f"oracle handles at most {ORACLE_MAX_ATOMS} atoms per measure "
            f"(got {len(mu)} and {len(nu)})"
        )
    value = _sorted_merge_cost(mu.positions, mu.weights, nu.positions, nu.weights)
    if len(mu) <= LP_CROSSCHECK_MAX_ATOMS and len(nu) <= LP_CROSSCHECK_MAX_ATOMS:
        lp = transport_lp(mu, nu)
        if abs(lp - value) > 1e-8:
            raise MeasureError(f"sorted-merge plan {value!r} disagrees with LP {lp!r}")
    return value


def push_forward(mu: ParticleMeasure, phi: Callable[[np.ndarray], np.ndarray]) -> ParticleMeasure:
    """Image measure ``phi_# mu`` for a nondecreasing map of [0, 1] into itself.

    Cell widths are carried along by mapping the cell edges.
    """
    x = mu.positions
    y = np.asarray(phi(x), dtype=float)
    if y.shape != x.shape:
        raise ContractViolation("map must act elementwise on an array of positions")
    if np.any(y < 0.0) or np.any(y > 1.0) or not np.all(np.isfinite(y)):
        raise DomainError("push-forward map leaves [0, 1]")
    if np.any(np.diff(y) < 0.0):
        raise ContractViolation("push-forward map is not nondecreasing on the support")
    widths = mu.cell_widths
    if np.any(mu.is_cell):
        lo = np.clip(x - 0.5 * widths, 0.0, 1.0)
        hi = np.clip(x + 0.5 * widths, 0.0, 1.0)
        widths = np.where(mu.is_cell, np.asarray(phi(hi)) - np.asarray(phi(lo)), 0.0)
        widths = np.maximum(widths, 0.0)
    return ParticleMeasure.from_atoms(y, mu.weights, mu.is_cell, widths)


def pair(mu: ParticleMeasure, h: Callable[[np.ndarray], np.ndarray]) -> float:
    """Integral of a bounded test function against the measure."""
    vals = np.broadcast_to(np.asarray(h(mu.positions), dtype=float), mu.positions.shape)
    return float(np.dot(mu.weights, vals))


@dataclass(frozen=True)
class LipschitzTestFunction:
    """A potential on [0, 1] with a declared Lipschitz bound."""

    func: Callable[[np.ndarray], np.ndarray]
    lipschitz: float

    def __call__(self, a):
        return self.func(np.asarray(a, dtype=float))

    @classmethod
    def piecewise_linear(cls, knots: Sequence[float], values: Sequence[float]) -> "LipschitzTestFunction":
        """Linear interpolant of ``values`` at ``knots`` (constant outside)."""
        k = np.asarray(knots, dtype=float)
        v = np.asarray(values, dtype=float)
        if k.size == 1:
            c = float(v[0])
            return cls(lambda a: np.full(np.shape(a), c), 0.0)
        dk = np.diff(k)
        if np.any(dk <= 0.0):
            raise ContractViolation("knots must be strictly increasing")
        bound = float(np.max(np.abs(np.diff(v) / dk)))
        return cls(lambda a: np.interp(a, k, v), bound)

    @classmethod
    def constant(cls, c: float) -> "LipschitzTestFunction":
        return cls(lambda a: np.full(np.shape(a), float(c)), 0.0)

    def check(self, grid: np.ndarray | None = None) -> bool:
        """Finite-difference slopes on ``grid`` respect the declared bound."""
        if grid is None:
            grid = np.linspace(0.0, 1.0, 1001)
        vals = np.asarray(self(grid), dtype=float)
        slopes = np.abs(np.diff(vals) / np.diff(grid))
        return bool(np.all(slopes <= self.lipschitz + 1e-9))


def duality_lower_bound(mu: ParticleMeasure, nu: ParticleMeasure,
                        phi: LipschitzTestFunction) -> float:
    """``int phi d(mu - nu)``; never exceeds W1 when ``phi`` is 1-Lipschitz."""
    if phi.lipschitz > 1.0 + 1e-12:
        raise ContractViolation(f"potential has Lipschitz bound {phi.lipschitz} > 1")
    return pair(mu, phi) - pair(nu, phi)


def random_piecewise_linear(rng: np.random.Generator, n_knots: int = 8,
                            bound: float = 1.0) -> LipschitzTestFunction:
    """Random potential with knots in [0, 1] and slopes drawn in [-bound, bound]."""
    inner = np.sort(rng.uniform(0.0, 1.0, size=max(n_knots - 2, 0)))
    knots = np.unique(np.concatenate(([0.0], inner, [1.0])))
    slopes = rng.uniform(-bound, bound, size=knots.size - 1)
    values = np.concatenate(([rng.normal()], np.diff(knots) * slopes)).cumsum()
    return LipschitzTestFunction.piecewise_linear(knots, values)


def sign_pattern_potentials(knots: Iterable[float], count: int,
                            rng: np.random.Generator) -> list[LipschitzTestFunction]:
    """Distinct slope +-1 potentials broken at ``knots``.

    When the family of sign patterns has at most ``count`` members it is
    enumerated completely; otherwise ``count`` distinct patterns are drawn.
    """
    k = np.unique(np.concatenate(([0.0], np.asarray(list(knots), dtype=float), [1.0])))
    n_int = k.size - 1
    if n_int == 0:
        return [LipschitzTestFunction.constant(0.0)]
    dk = np.diff(k)
    if 2 ** n_int <= count:
        patterns = [np.array(p) for p in itertools.product((-1.0, 1.0), repeat=n_int)]
    else:
        seen: set[tuple] = set()
        patterns = []
        while len(patterns) < count:
            p = tuple(rng.choice((-1.0, 1.0), size=n_int))
            if p not in seen:
                seen.add(p)
                patterns.append(np.array(p))
    out = []
    for p in patterns:
        values = np.concatenate(([0.0], np.cumsum(p * dk)))
        out.append(LipschitzTestFunction.piecewise_linear(k, values))
    return out


CSV_COLUMNS = ("position", "weight", "kind", "cell_width")


def write_measure_csv(mu: ParticleMeasure, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for x, w, k, cw in zip(mu.positions, mu.weights, mu.kinds, mu.cell_widths):
            writer.writerow((repr(float(x)), repr(float(w)), k, repr(float(cw))))


def read_measure_csv(path: str | Path, *, require_probability: bool = True) -> ParticleMeasure:
    """Load a measure written by :func:`write_measure_csv` and re-validate it."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"position", "weight", "kind"} - set(reader.fieldnames or ())
        if missing:
            raise MeasureError(f"{path}: missing columns {sorted(missing)}")
        rows = list(reader)
    try:
        x = [float(r["position"]) for r in rows]
        w = [float(r["weight"]) for r in rows]
        cw = [float(r.get("cell_width") or 0.0) for r in rows]
    except ValueError as exc:
        raise MeasureError(f"{path}: {exc}") from exc
    kinds = [r["kind"] for r in rows]
    mu = ParticleMeasure.from_atoms(x, w, kinds, cw)
    if require_probability:
        mu.require_probability()
    return mu
