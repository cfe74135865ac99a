"""Run configuration: JSON documents, scenario presets and model assembly."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coupling import ModelData
from .errors import AlzsimError, HypothesisError
from .kernels import ExampleJumpKernel, GKernel, JumpSpec, KernelChoice, ModelParams, SKernel, TableKernel
from .measure import POINT, ParticleMeasure
from .smoluchowski import NEUMANN, ROBIN, SpatialGrid
from .transport import LabelLayout

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ("march", "picard", "cross-validate", "refine-study")


class ConfigError(AlzsimError, ValueError):
    """The configuration document cannot be parsed or is incomplete."""


def _base(name: str) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "scenario": name,
        "allow_degenerate_rates": False,
        "params": {
            "N": 3, "eps": 0.1, "d": [1.0, 0.5], "sigma": [1.0, 1.0], "gamma": [1.0, 1.0],
            "a_coag": [[1.0] * 3 for _ in range(3)],
            "C_F": 1.0, "C_S": 1.0, "C_G": 1.0, "mu0": 0.1, "U_bar": 0.05,
        },
        "kernels": {"G": {"kind": "paper-default"}, "S": {"kind": "paper-default"}},
        "jump": {
            "eta": {"times": [0.0], "values": [1.0]},
            "chi_boxes": [],
            "P": {"kind": "paper-example", "delta": 1e-3},
        },
        "grid": {"K": 101, "X_len": 1.0, "left": NEUMANN, "right": ROBIN, "M": 201},
        "initial": {"f0": {"atoms": [[0.0, 1.0]]}, "u0": [0.0, 0.0, 0.0]},
        "run": {
            "T": 1.0, "dt": 1e-3, "mode": "march", "snapshot_stride": 10, "out": f"runs/{name}",
            "tau": 0.05, "tol": 1e-8, "max_iter": 30, "levels": 3, "window": None,
        },
    }


def preset(name: str) -> dict:
    """Named scenario bundles.

    ``healthy``: every node starts at full health and nothing seeds damage.
    ``seeded``: jumps switched on in the box 0.4 <= x <= 0.6.
    ``decoupled``: no deterioration, no jumps, no coagulation; u_1 solves a
    linear ODE.  ``affine-test``: toxicity ``c (1 - a)`` only.
    ``riccati-test``: two species, pure coagulation from u_1 = 1.
    """
    cfg = _base(name)
    if name == "healthy":
        pass
    elif name == "seeded":
        cfg["jump"]["chi_boxes"] = [[0.4, 0.6, 0.0, cfg["run"]["T"]]]
    elif name == "decoupled":
        cfg["allow_degenerate_rates"] = True
        cfg["params"].update(N=2, eps=1.0, d=[1.0], sigma=[1.0], gamma=[1.0], a_coag=[[0.0, 0.0], [0.0, 0.0]])
        cfg["kernels"] = {"G": {"kind": "zero"}, "S": {"kind": "zero"}}
        cfg["jump"]["eta"] = {"times": [0.0], "values": [0.0]}
        cfg["grid"].update(K=11, M=21, left=NEUMANN, right=NEUMANN)
        cfg["initial"]["u0"] = [0.2, 0.0]
        cfg["run"]["snapshot_stride"] = 1
    elif name == "affine-test":
        cfg["kernels"] = {"G": {"kind": "zero"}, "S": {"kind": "affine-test", "c": 1.0}}
        cfg["jump"]["eta"] = {"times": [0.0], "values": [0.0]}
        cfg["grid"].update(K=5)
        cfg["run"]["snapshot_stride"] = 1
    elif name == "riccati-test":
        cfg["allow_degenerate_rates"] = True
        cfg["params"].update(N=2, eps=1.0, d=[1.0], sigma=[0.0], gamma=[1.0], a_coag=[[1.0, 0.0], [0.0, 0.0]],
                             C_F=0.0)
        cfg["kernels"] = {"G": {"kind": "zero"}, "S": {"kind": "zero"}}
        cfg["jump"]["eta"] = {"times": [0.0], "values": [0.0]}
        cfg["grid"].update(K=5, M=21, left=NEUMANN, right=NEUMANN)
        cfg["initial"]["u0"] = [1.0, 0.0]
        cfg["run"]["snapshot_stride"] = 1
    else:
        raise ConfigError(f"unknown scenario preset {name!r}; choose from {PRESETS}")
    return cfg


PRESETS = ("healthy", "seeded", "decoupled", "affine-test", "riccati-test")


@dataclass
class RunConfig:
    raw: dict
    data: ModelData
    path: Path | None = None

    @property
    def run(self) -> dict:
        return self.raw["run"]

    @property
    def scenario(self) -> str:
        return self.raw.get("scenario", "custom")

    @property
    def allow_degenerate_rates(self) -> bool:
        return bool(self.raw.get("allow_degenerate_rates", False))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def dumps(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **run_updates) -> "RunConfig":
        raw = self.to_dict()
        raw["run"].update({k: v for k, v in run_updates.items() if v is not None})
        return from_dict(raw, self.path)


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"missing field {where}.{key}")
    return d[key]


def build_kernels(raw: dict, params: ModelParams, base_dir: Path | None) -> KernelChoice:
    gk = raw.get("G", {"kind": "paper-default"})
    sk = raw.get("S", {"kind": "paper-default"})
    tables, paths = (), ()
    if gk.get("kind") == "custom-table":
        paths = tuple(gk.get("tables", []))
        resolve = (lambda p: (base_dir / p) if base_dir and not Path(p).is_absolute() else Path(p))
        tables = tuple(TableKernel.from_csv(resolve(p)) for p in paths)
    G = GKernel(gk.get("kind", "paper-default"), params.c_g, tables, paths)
    S = SKernel(sk.get("kind", "paper-default"), params.c_s, params.u_bar, float(sk.get("c", 1.0)))
    return KernelChoice(G, S)


def build_jump(raw: dict) -> JumpSpec:
    eta = raw.get("eta", {"times": [0.0], "values": [0.0]})
    P = raw.get("P", {"kind": "paper-example", "delta": 1e-3})
    if P.get("kind", "paper-example") != "paper-example":
        raise HypothesisError("H6", f"unknown jump kernel kind {P.get('kind')!r}")
    return JumpSpec(
        eta_times=tuple(float(t) for t in eta["times"]),
        eta_values=tuple(float(v) for v in eta["values"]),
        chi_boxes=tuple(tuple(float(c) for c in box) for box in raw.get("chi_boxes", [])),
        kernel=ExampleJumpKernel(float(P.get("delta", 1e-3))),
    )


def build_initial(raw: dict, layout: LabelLayout, K: int, N: int) -> tuple[np.ndarray, np.ndarray]:
    f0 = raw.get("f0", {"atoms": [[0.0, 1.0]]})
    if f0.get("uniform"):
        w = layout.uniform_weights()
    else:
        atoms = np.asarray(f0["atoms"], dtype=float).reshape(-1, 2)
        mu = ParticleMeasure.from_atoms(atoms[:, 0], atoms[:, 1], [POINT] * len(atoms))
        try:
            mu.require_probability()
        except Exception as exc:
            raise HypothesisError("H2", f"initial measure is not a probability measure: {exc}") from exc
        w = layout.weights_from_measure(mu)
    g0 = np.tile(w, (K, 1))
    u0 = np.asarray(raw.get("u0", [0.0] * N), dtype=float)
    if u0.ndim == 1:
        if u0.size != N:
            raise ConfigError(f"initial.u0 needs {N} entries")
        u0 = np.repeat(u0[:, None], K, axis=1)
    if u0.shape != (N, K):
        raise ConfigError(f"initial.u0 must be {N} constants or an {N}x{K} array")
    if np.any(u0 < 0.0):
        raise HypothesisError("H2", "initial concentrations must be nonnegative")
    return g0, u0


def _point_positions(raw_initial: dict) -> list[float]:
    f0 = raw_initial.get("f0", {"atoms": [[0.0, 1.0]]})
    if f0.get("uniform"):
        return []
    return [float(a[0]) for a in f0["atoms"]]


def from_dict(raw: dict, path: Path | None = None) -> RunConfig:
    """Validate a configuration document and assemble the model."""
    raw = copy.deepcopy(raw)
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {raw.get('schema_version')!r}")
    for section in ("params", "grid", "initial", "run"):
        _require(raw, section, "config")
    raw.setdefault("kernels", {"G": {"kind": "paper-default"}, "S": {"kind": "paper-default"}})
    raw.setdefault("jump", {})
    allow = bool(raw.get("allow_degenerate_rates", False))
    params = ModelParams.from_dict(raw["params"])
    raw["params"] = params.to_dict()  # records the symmetrised matrix
    params.validate(allow)
    if allow:
        logger.warning("degenerate rates allowed: zero clearance/coagulation/production accepted")
    base_dir = path.parent if path else None
    kernels = build_kernels(raw["kernels"], params, base_dir)
    kernels.validate(params.n_species)
    jump = build_jump(raw["jump"])
    jump.validate()
    gr = raw["grid"]
    grid = SpatialGrid(int(_require(gr, "K", "grid")), float(gr.get("X_len", 1.0)),
                       gr.get("left", NEUMANN), gr.get("right", NEUMANN))
    layout = LabelLayout.build(int(gr.get("M", 201)), _point_positions(raw["initial"]))
    g0, u0 = build_initial(raw["initial"], layout, grid.K, params.n_species)
    run = raw["run"]
    mode = run.get("mode", "march")
    if mode not in MODES:
        raise ConfigError(f"run.mode must be one of {MODES}, got {mode!r}")
    _require(run, "dt", "run")
    _require(run, "T", "run")
    if mode in ("picard", "cross-validate"):
        _require(run, "tau", "run")
    if mode == "refine-study" and int(run.get("levels", 3)) < 3:
        raise ConfigError("refine-study needs levels >= 3")
    data = ModelData(params, kernels, jump, grid, layout, g0, u0)
    return RunConfig(raw, data, path)


def load_config(path: str | Path) -> RunConfig:
    """Read a JSON document (or ``preset:<name>``) and validate it."""
    text_path = str(path)
    if text_path.startswith("preset:"):
        return from_dict(preset(text_path.split(":", 1)[1]))
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return from_dict(raw, path)
