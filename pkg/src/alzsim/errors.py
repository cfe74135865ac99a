"""Exception hierarchy shared by all solver modules."""
from __future__ import annotations


class AlzsimError(Exception):
    """Base class for every error raised by this package."""


class DomainError(AlzsimError, ValueError):
    """An argument lies outside the interval an operation is defined on."""


class MeasureError(AlzsimError, ValueError):
    """A particle list does not describe a valid (probability) measure."""


class CapacityError(AlzsimError):
    """Input is larger than a brute-force oracle is allowed to handle."""


class ContractViolation(AlzsimError, ValueError):
    """A caller-supplied object breaks a declared contract."""


class HypothesisError(AlzsimError, ValueError):
    """Model data violate one of the standing hypotheses H1-H6."""

    def __init__(self, hypothesis: str, message: str):
        self.hypothesis = hypothesis
        super().__init__(f"{hypothesis}: {message}")


class StepSizeError(AlzsimError):
    """A time step is too large for a stability or monotonicity requirement."""


class DegenerateFieldError(AlzsimError):
    """A characteristic field lost strict monotonicity."""


class ShapeError(AlzsimError, ValueError):
    """Trajectories or states live on incompatible meshes."""


class ConvergenceError(AlzsimError):
    """Fixed-point iteration stopped without reaching its tolerance."""

    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)


class BoundViolation(AlzsimError):
    """A monitored a priori estimate failed at runtime.

    Carries enough context to name the violated estimate.
    """

    def __init__(self, estimate: str, species: int, node: int, t: float,
                 value: float, bound: float):
        self.estimate = estimate
        self.species = species
        self.node = node
        self.t = t
        self.value = value
        self.bound = bound
        super().__init__(
            f"{estimate} violated for species u_{species} at node {node}, "
            f"t={t:.6g}: value {value:.6g} > bound {bound:.6g}"
        )

    def as_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "species": self.species,
            "node": self.node,
            "t": self.t,
            "value": self.value,
            "bound": self.bound,
        }


class SolverError(AlzsimError):
    """A component failure during time marching, tagged with its step."""

    def __init__(self, message: str, step: int | None = None,
                 iterate: int | None = None, state_dump: dict | None = None):
        self.step = step
        self.iterate = iterate
        self.state_dump = state_dump or {}
        tags = []
        if iterate is not None:
            tags.append(f"iterate {iterate}")
        if step is not None:
            tags.append(f"step {step}")
        prefix = f"[{', '.join(tags)}] " if tags else ""
        super().__init__(prefix + message)
