"""Game-instance data model: time grids, matrix-valued coefficient paths,
the full game specification, and validation of the standing assumptions.

All coefficients are deterministic functions of time, represented by their
values at the nodes of a uniform grid with linear interpolation in between.
The leader-observed disturbance f1 is restricted to a deterministic path,
which keeps every backward equation in the pipeline an ODE.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class SpecError(ValueError):
    """Malformed or inconsistent game specification."""


class RegularityError(RuntimeError):
    """A regularity condition failed at some grid node."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class BlowUpError(RuntimeError):
    """A backward integration produced a non-finite value."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < t_1 < ... < t_N = T."""

    horizon: float
    steps: int
    nodes: np.ndarray = field(repr=False)

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def __len__(self):
        return self.steps + 1

    def locate(self, t: float):
        """Return (k, w) with t = (1-w)*t_k + w*t_{k+1}, 0 <= w < 1.

        Exact node values snap to w = 0 so stored samples are returned
        bit-exactly.
        """
        if t < 0.0 or t > self.horizon * (1.0 + 1e-12):
            raise SpecError(f"time {t} outside [0, {self.horizon}]")
        u = t / self.dt
        k = min(max(int(np.floor(u)), 0), self.steps)
        if k < self.steps and t == self.nodes[k + 1]:
            return k + 1, 0.0
        if t == self.nodes[k]:
            return k, 0.0
        if k == self.steps:
            return k, 0.0
        return k, u - k


def make_grid(T: float, N: int) -> TimeGrid:
    if not np.isfinite(T) or T <= 0:
        raise SpecError("horizon must be positive")
    if int(N) != N or N < 1:
        raise SpecError("step count must be a positive integer")
    N = int(N)
    nodes = np.linspace(0.0, float(T), N + 1)
    return TimeGrid(horizon=float(T), steps=N, nodes=nodes)


class MatrixPath:
    """A matrix-valued function of time sampled at grid nodes.

    Samples are stored as an array of shape (N+1, rows, cols); evaluation
    between nodes is entrywise linear interpolation, and node values are
    returned bit-exactly.
    """

    __slots__ = ("grid", "samples")

    def __init__(self, grid: TimeGrid, samples: np.ndarray):
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 3 or samples.shape[0] != len(grid):
            raise SpecError(
                f"path samples must have shape (N+1, rows, cols), got {samples.shape}"
            )
        self.grid = grid
        self.samples = samples

    @property
    def rows(self) -> int:
        return self.samples.shape[1]

    @property
    def cols(self) -> int:
        return self.samples.shape[2]

    @property
    def shape(self):
        return self.samples.shape[1:]

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "MatrixPath":
        value = np.atleast_2d(np.asarray(value, dtype=float))
        return cls(grid, np.broadcast_to(value, (len(grid),) + value.shape).copy())

    @classmethod
    def zeros(cls, grid: TimeGrid, rows: int, cols: int) -> "MatrixPath":
        return cls(grid, np.zeros((len(grid), rows, cols)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn) -> "MatrixPath":
        samples = np.stack([np.atleast_2d(np.asarray(fn(t), dtype=float)) for t in grid.nodes])
        return cls(grid, samples)

    def node(self, k: int) -> np.ndarray:
        return self.samples[k]

    def at(self, t: float) -> np.ndarray:
        k, w = self.grid.locate(t)
        if w == 0.0:
            return self.samples[k]
        return (1.0 - w) * self.samples[k] + w * self.samples[k + 1]

    def __call__(self, t: float) -> np.ndarray:
        return self.at(t)


def sample(path: MatrixPath, t: float) -> np.ndarray:
    """Evaluate a path at time t (linear interpolation, exact at nodes)."""
    return path.at(t)


# Matrix-valued fields of a game spec, with expected (rows, cols) as functions
# of the dimensions (n, m1, m2).
_MATRIX_SHAPES = {
    "A": lambda n, m1, m2: (n, n),
    "C": lambda n, m1, m2: (n, n),
    "B1": lambda n, m1, m2: (n, m1),
    "D1": lambda n, m1, m2: (n, m1),
    "B2": lambda n, m1, m2: (n, m2),
    "D2": lambda n, m1, m2: (n, m2),
    "sigma": lambda n, m1, m2: (n, 1),
    "f1": lambda n, m1, m2: (n, 1),
    "Q": lambda n, m1, m2: (n, n),
    "R1": lambda n, m1, m2: (m1, m1),
    "R2": lambda n, m1, m2: (m2, m2),
    "R0": lambda n, m1, m2: (n, n),
    "R0hat": lambda n, m1, m2: (n, n),
}

_SYMMETRIC_FIELDS = ("Q", "R1", "R2", "R0", "R0hat")
_SYMMETRY_RTOL = 1e-12


@dataclass(frozen=True)
class GameSpec:
    """One leader-follower game instance.

    State dimension n, follower control dimension m1, leader control
    dimension m2.  All coefficient paths live on the same grid; G is the
    constant terminal state weight; alpha and gamma are the attenuation
    parameters of the follower-side and leader-side disturbance penalties.
    """

    n: int
    m1: int
    m2: int
    grid: TimeGrid
    A: MatrixPath
    C: MatrixPath
    B1: MatrixPath
    D1: MatrixPath
    B2: MatrixPath
    D2: MatrixPath
    sigma: MatrixPath
    f1: MatrixPath
    Q: MatrixPath
    R1: MatrixPath
    R2: MatrixPath
    R0: MatrixPath
    R0hat: MatrixPath
    G: np.ndarray
    alpha: float
    gamma: float
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "G", np.atleast_2d(np.asarray(self.G, dtype=float)))
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float).reshape(self.n, 1))
        for name in _MATRIX_SHAPES:
            path = getattr(self, name)
            want = _MATRIX_SHAPES[name](self.n, self.m1, self.m2)
            if path.shape != want:
                raise SpecError(f"{name} has shape {path.shape}, expected {want}")
            if path.grid is not self.grid and not np.array_equal(path.grid.nodes, self.grid.nodes):
                raise SpecError(f"{name} does not live on the spec grid")
        if self.G.shape != (self.n, self.n):
            raise SpecError(f"G has shape {self.G.shape}, expected {(self.n, self.n)}")


def build_spec(n, m1, m2, T, N, alpha, gamma, xi, G, **paths) -> GameSpec:
    """Assemble a GameSpec from constants, callables or MatrixPath values.

    Each coefficient may be given as a scalar/array constant, a callable
    t -> matrix, or an existing MatrixPath.  Unspecified sigma and f1
    default to zero paths.
    """
    grid = make_grid(T, N)

    def as_path(name, value):
        want = _MATRIX_SHAPES[name](n, m1, m2)
        if value is None:
            return MatrixPath.zeros(grid, *want)
        if isinstance(value, MatrixPath):
            return value
        if callable(value):
            return MatrixPath.from_function(grid, lambda t: np.reshape(value(t), want))
        arr = np.asarray(value, dtype=float)
        if arr.size != want[0] * want[1]:
            raise SpecError(f"{name} has {arr.size} entries, expected shape {want}")
        return MatrixPath.constant(grid, arr.reshape(want))

    kwargs = {name: as_path(name, paths.get(name)) for name in _MATRIX_SHAPES}
    unknown = set(paths) - set(_MATRIX_SHAPES)
    if unknown:
        raise SpecError(f"unknown coefficient names: {sorted(unknown)}")
    return GameSpec(
        n=n, m1=m1, m2=m2, grid=grid, G=np.asarray(G, dtype=float).reshape(n, n),
        alpha=float(alpha), gamma=float(gamma), xi=xi, **kwargs,
    )


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    node: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def lines(self):
        out = []
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            loc = "" if c.node is None else f" @node {c.node}"
            detail = f" ({c.detail})" if c.detail else ""
            out.append(f"{status:4s}  {c.name}{loc}{detail}")
        return out


def _first_asymmetric_node(path: MatrixPath):
    for k in range(len(path.grid)):
        m = path.samples[k]
        denom = np.linalg.norm(m)
        gap = np.linalg.norm(m - m.T)
        if gap > _SYMMETRY_RTOL * max(denom, 1e-300) and gap > 0.0:
            return k, gap, denom
    return None


def _min_eig_over_nodes(path: MatrixPath):
    worst = np.inf
    worst_node = 0
    for k in range(len(path.grid)):
        m = path.samples[k]
        lam = np.linalg.eigvalsh(0.5 * (m + m.T)).min()
        if lam < worst:
            worst, worst_node = lam, k
    return worst, worst_node


def validate_spec(spec: GameSpec, delta: float = 1e-8) -> ValidationReport:
    """Run the decidable standing-assumption checks on a spec.

    Covers finiteness, dimension consistency (already enforced on
    construction), symmetry of the weight matrices, strong positivity of
    R0 and R0hat (minimum eigenvalue >= delta at every node) and
    positivity of the attenuation parameters.  The functional-positivity
    assumptions that quantify over all disturbance processes are not
    decidable here; the montecarlo module probes them by sampling.
    """
    checks = []

    def add(name, passed, detail="", node=None):
        checks.append(CheckResult(name, bool(passed), detail, node))

    add("horizon_positive", spec.grid.horizon > 0, f"T={spec.grid.horizon}")
    add("alpha_positive", spec.alpha > 0, f"alpha={spec.alpha}")
    add("gamma_positive", spec.gamma > 0, f"gamma={spec.gamma}")

    for name in _MATRIX_SHAPES:
        path = getattr(spec, name)
        finite = np.isfinite(path.samples).all()
        add(f"{name}_finite", finite)

    add("G_finite", np.isfinite(spec.G).all())
    add("xi_finite", np.isfinite(spec.xi).all())

    for name in _SYMMETRIC_FIELDS:
        bad = _first_asymmetric_node(getattr(spec, name))
        if bad is None:
            add(f"{name}_symmetric", True)
        else:
            k, gap, denom = bad
            add(f"{name}_symmetric", False, f"|M-M^T|={gap:.3e} vs |M|={denom:.3e}", k)
    g_gap = np.linalg.norm(spec.G - spec.G.T)
    add("G_symmetric", g_gap <= _SYMMETRY_RTOL * max(np.linalg.norm(spec.G), 1e-300) or g_gap == 0.0)

    for name in ("R0", "R0hat"):
        lam, node = _min_eig_over_nodes(getattr(spec, name))
        add(
            f"{name}_strongly_positive",
            lam >= delta,
            f"min eigenvalue {lam:.6e} vs delta {delta:.1e}",
            None if lam >= delta else node,
        )

    return ValidationReport(checks=tuple(checks))


# ---------------------------------------------------------------------------
# JSON spec files


def _path_to_json(path: MatrixPath):
    first = path.samples[0]
    if np.array_equal(path.samples, np.broadcast_to(first, path.samples.shape)):
        return {"constant": first.tolist()}
    return {
        "nodes": [
            {"t": float(t), "value": path.samples[k].tolist()}
            for k, t in enumerate(path.grid.nodes)
        ]
    }


def _path_from_json(grid: TimeGrid, obj, shape, name):
    if "constant" in obj:
        value = np.asarray(obj["constant"], dtype=float)
        return MatrixPath.constant(grid, value.reshape(shape))
    if "nodes" not in obj:
        raise SpecError(f"matrix {name!r} must have a 'constant' or 'nodes' entry")
    entries = sorted(obj["nodes"], key=lambda e: e["t"])
    ts = np.array([float(e["t"]) for e in entries])
    vals = np.stack([np.asarray(e["value"], dtype=float).reshape(shape) for e in entries])
    if len(entries) == 1:
        return MatrixPath.constant(grid, vals[0])

    def interp(t):
        t = np.clip(t, ts[0], ts[-1])
        j = np.searchsorted(ts, t, side="right") - 1
        j = min(max(j, 0), len(ts) - 2)
        w = (t - ts[j]) / (ts[j + 1] - ts[j])
        return (1.0 - w) * vals[j] + w * vals[j + 1]

    return MatrixPath.from_function(grid, interp)


def load_spec(path_or_file) -> GameSpec:
    """Parse a game specification from a JSON file path or file object."""
    if hasattr(path_or_file, "read"):
        doc = json.load(path_or_file)
    else:
        with open(path_or_file) as fh:
            doc = json.load(fh)
    return spec_from_dict(doc)


def spec_from_dict(doc: dict) -> GameSpec:
    try:
        n, m1, m2 = int(doc["n"]), int(doc["m1"]), int(doc["m2"])
        T, N = float(doc["T"]), int(doc["N"])
        alpha, gamma = float(doc["alpha"]), float(doc["gamma"])
        xi = np.asarray(doc["xi"], dtype=float)
        matrices = doc["matrices"]
    except KeyError as exc:
        raise SpecError(f"spec file missing required field {exc}") from exc
    grid = make_grid(T, N)
    if "G" not in matrices:
        raise SpecError("spec file missing matrix 'G'")
    gobj = matrices["G"]
    if "constant" not in gobj:
        raise SpecError("terminal weight G must be given as a constant matrix")
    G = np.asarray(gobj["constant"], dtype=float).reshape(n, n)

    paths = {}
    for name in _MATRIX_SHAPES:
        shape = _MATRIX_SHAPES[name](n, m1, m2)
        if name in matrices:
            paths[name] = _path_from_json(grid, matrices[name], shape, name)
        elif name in ("sigma", "f1"):
            paths[name] = MatrixPath.zeros(grid, *shape)
        else:
            raise SpecError(f"spec file missing matrix {name!r}")
    unknown = set(matrices) - set(_MATRIX_SHAPES) - {"G"}
    if unknown:
        raise SpecError(f"spec file has unknown matrices: {sorted(unknown)}")

    return GameSpec(
        n=n, m1=m1, m2=m2, grid=grid, G=G, alpha=alpha, gamma=gamma, xi=xi,
        **paths,
    )


def spec_to_dict(spec: GameSpec) -> dict:
    matrices = {name: _path_to_json(getattr(spec, name)) for name in _MATRIX_SHAPES}
    matrices["G"] = {"constant": spec.G.tolist()}
    return {
        "n": spec.n,
        "m1": spec.m1,
        "m2": spec.m2,
        "T": spec.grid.horizon,
        "N": spec.grid.steps,
        "alpha": spec.alpha,
        "gamma": spec.gamma,
        "xi": spec.xi[:, 0].tolist(),
        "matrices": matrices,
    }


def dump_spec(spec: GameSpec, path_or_file):
    """Write a spec as JSON; a spec written here re-parses identically."""
    doc = spec_to_dict(spec)
    if hasattr(path_or_file, "write"):
        json.dump(doc, path_or_file, indent=2)
    else:
        with open(path_or_file, "w") as fh:
            json.dump(doc, fh, indent=2)
