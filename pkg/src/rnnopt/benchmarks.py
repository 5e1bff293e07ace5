"""Test objectives: the four analytic black-box benchmarks with random
instance perturbations, a particle/repeller control problem, and a loader
for tabular (precomputed-grid) objectives."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .policy import SearchSpace


class TabularFormatError(ValueError):
    """Malformed tabular objective file; message carries the line number."""


# --- analytic benchmarks (standard published forms, minimisation) ----------


def branin(x1: float, x2: float) -> float:
    b = 5.1 / (4 * math.pi**2)
    c = 5 / math.pi
    t = 1 / (8 * math.pi)
    return (x2 - b * x1**2 + c * x1 - 6) ** 2 + 10 * (1 - t) * math.cos(x1) + 10


def goldstein_price(x1: float, x2: float) -> float:
    a = 1 + (x1 + x2 + 1) ** 2 * (
        19 - 14 * x1 + 3 * x1**2 - 14 * x2 + 6 * x1 * x2 + 3 * x2**2
    )
    b = 30 + (2 * x1 - 3 * x2) ** 2 * (
        18 - 32 * x1 + 12 * x1**2 + 48 * x2 - 36 * x1 * x2 + 27 * x2**2
    )
    return a * b


_HARTMANN_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])

_HARTMANN3_A = np.array(
    [[3.0, 10.0, 30.0], [0.1, 10.0, 35.0], [3.0, 10.0, 30.0], [0.1, 10.0, 35.0]]
)
_HARTMANN3_P = 1e-4 * np.array(
    [
        [3689.0, 1170.0, 2673.0],
        [4699.0, 4387.0, 7470.0],
        [1091.0, 8732.0, 5547.0],
        [381.0, 5743.0, 8828.0],
    ]
)

_HARTMANN6_A = np.array(
    [
        [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
        [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
        [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
        [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
    ]
)
_HARTMANN6_P = 1e-4 * np.array(
    [
        [1312.0, 1696.0, 5569.0, 124.0, 8283.0, 5886.0],
        [2329.0, 4135.0, 8307.0, 3736.0, 1004.0, 9991.0],
        [2348.0, 1451.0, 3522.0, 2883.0, 3047.0, 6650.0],
        [4047.0, 8828.0, 8732.0, 5743.0, 1091.0, 381.0],
    ]
)


def _hartmann(x: np.ndarray, a_mat: np.ndarray, p_mat: np.ndarray) -> float:
    inner = np.sum(a_mat * (x[None, :] - p_mat) ** 2, axis=1)
    return float(-np.dot(_HARTMANN_ALPHA, np.exp(-inner)))


@dataclass(frozen=True)
class AnalyticBenchmark:
    name: str
    dim: int
    lower: np.ndarray
    upper: np.ndarray
    fn: object

    def __call__(self, x_native) -> float:
        return float(self.fn(np.asarray(x_native, dtype=float)))


BENCHMARKS = {
    "branin": AnalyticBenchmark(
        "branin", 2, np.array([-5.0, 0.0]), np.array([10.0, 15.0]),
        lambda x: branin(x[0], x[1]),
    ),
    "goldstein_price": AnalyticBenchmark(
        "goldstein_price", 2, np.array([-2.0, -2.0]), np.array([2.0, 2.0]),
        lambda x: goldstein_price(x[0], x[1]),
    ),
    "hartmann3": AnalyticBenchmark(
        "hartmann3", 3, np.zeros(3), np.ones(3),
        lambda x: _hartmann(x, _HARTMANN3_A, _HARTMANN3_P),
    ),
    "hartmann6": AnalyticBenchmark(
        "hartmann6", 6, np.zeros(6), np.ones(6),
        lambda x: _hartmann(x, _HARTMANN6_A, _HARTMANN6_P),
    ),
}


@dataclass(frozen=True)
class PerturbedInstance:
    """A benchmark viewed through a random input-domain transformation.

    Unit-box coordinates are permuted, optionally flipped (u -> 1-u), then
    scaled/translated inside the affine map to the native domain:
    native_j = lower_j + width_j * (scale_j * u_j + shift_j).
    """

    base: AnalyticBenchmark
    shift: np.ndarray        # per-dim translation in (-0.1, 0.1), unit scale
    scale: np.ndarray        # per-dim scaling in (0.9, 1.1)
    flip: np.ndarray         # boolean mask
    permutation: np.ndarray  # x[j] supplies base coordinate permutation[j]

    def __post_init__(self):
        if not ((self.shift > -0.1) & (self.shift < 0.1)).all():
            raise ValueError("translations must lie in (-0.1, 0.1)")
        if not ((self.scale > 0.9) & (self.scale < 1.1)).all():
            raise ValueError("scalings must lie in (0.9, 1.1)")
        if sorted(self.permutation.tolist()) != list(range(self.base.dim)):
            raise ValueError("invalid dimension permutation")

    @classmethod
    def identity(cls, base: AnalyticBenchmark) -> "PerturbedInstance":
        d = base.dim
        return cls(base, np.zeros(d), np.ones(d), np.zeros(d, bool), np.arange(d))

    @classmethod
    def sample(cls, base: AnalyticBenchmark, seed) -> "PerturbedInstance":
        rng = seeding.rng(seed, seeding.PERTURB)
        d = base.dim
        return cls(
            base,
            rng.uniform(-0.1, 0.1, d),
            rng.uniform(0.9, 1.1, d),
            rng.random(d) < 0.5,
            rng.permutation(d),
        )

    def space(self) -> SearchSpace:
        return SearchSpace.unit(self.base.dim)

    def __call__(self, x_unit) -> float:
        u = np.asarray(x_unit, dtype=float)[self.permutation]
        u = np.where(self.flip, 1.0 - u, u)
        width = self.base.upper - self.base.lower
        native = self.base.lower + width * (self.scale * u + self.shift)
        return self.base(native)


def eval_benchmark(instance: PerturbedInstance, x_unit) -> float:
    return instance(x_unit)


# --- repeller control problem ----------------------------------------------


@dataclass(frozen=True)
class RepellerConfig:
    """Particle falling under gravity through a planar reward field.

    Two repellers (2d location + strength each, six parameters in the unit
    box) push the particle away with force strength/distance; the objective
    is the negated discounted sum of a Gaussian-mixture reward along the
    simulated path.
    """

    start_pos: tuple = (0.0, 0.0)
    start_vel: tuple = (1.0, 0.0)
    gravity: float = -9.8
    dt: float = 0.05
    n_steps: int = 100
    discount: float = 0.99
    min_dist: float = 0.05   # singularity floor on particle-repeller distance
    n_repellers: int = 2
    # Reward mixture: (x, y, spatial sigma, weight) per component.
    reward_components: tuple = (
        (4.0, -20.0, 3.0, 1.0),
        (-6.0, -55.0, 5.0, 2.0),
        (8.0, -100.0, 6.0, 3.0),
    )
    # Physical ranges the unit-box parameters map onto.
    loc_x_range: tuple = (-10.0, 10.0)
    loc_y_range: tuple = (-110.0, 0.0)
    strength_range: tuple = (0.0, 60.0)

    def space(self) -> SearchSpace:
        return SearchSpace.unit(3 * self.n_repellers)

    def mirrored(self) -> "RepellerConfig":
        """The same world reflected in x (symmetry checks)."""
        return RepellerConfig(
            start_pos=(-self.start_pos[0], self.start_pos[1]),
            start_vel=(-self.start_vel[0], self.start_vel[1]),
            gravity=self.gravity,
            dt=self.dt,
            n_steps=self.n_steps,
            discount=self.discount,
            min_dist=self.min_dist,
            n_repellers=self.n_repellers,
            reward_components=tuple(
                (-cx, cy, s, w) for cx, cy, s, w in self.reward_components
            ),
            loc_x_range=(-self.loc_x_range[1], -self.loc_x_range[0]),
            loc_y_range=self.loc_y_range,
            strength_range=self.strength_range,
        )


def _reward(config: RepellerConfig, pos: np.ndarray) -> float:
    total = 0.0
    for cx, cy, sigma, weight in config.reward_components:
        dx = pos[0] - cx
        dy = pos[1] - cy
        total += weight * math.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
    return total


def _run_repellers(params, config: RepellerConfig):
    params = np.asarray(params, dtype=float)
    if params.shape != (3 * config.n_repellers,):
        raise ValueError(f"expected {3 * config.n_repellers} parameters")
    if ((params < 0) | (params > 1)).any():
        raise ValueError("repeller parameters must lie in the unit box")
    reps = []
    for k in range(config.n_repellers):
        ux, uy, us = params[3 * k : 3 * k + 3]
        lx = config.loc_x_range[0] + ux * (config.loc_x_range[1] - config.loc_x_range[0])
        ly = config.loc_y_range[0] + uy * (config.loc_y_range[1] - config.loc_y_range[0])
        st = config.strength_range[0] + us * (config.strength_range[1] - config.strength_range[0])
        reps.append((lx, ly, st))

    pos = np.array(config.start_pos, dtype=float)
    vel = np.array(config.start_vel, dtype=float)
    positions = np.empty((config.n_steps, 2))
    total = 0.0
    gamma = 1.0
    for i in range(config.n_steps):
        acc = np.array([0.0, config.gravity])
        for lx, ly, st in reps:
            delta = pos - np.array([lx, ly])
            dist = max(float(np.hypot(delta[0], delta[1])), config.min_dist)
            acc += st * delta / (dist * dist)
        pos = pos + config.dt * vel
        vel = vel + config.dt * acc
        positions[i] = pos
        total += gamma * _reward(config, pos)
        gamma *= config.discount
    return -total, positions


def simulate_repellers(params, config: RepellerConfig = RepellerConfig()) -> float:
    """Loss (negated discounted reward) of a repeller placement.

    `params` lie in the unit box, three per repeller: x location, y location,
    strength. Dynamics are explicit Euler with the force singularity floored
    at `min_dist`.
    """
    return _run_repellers(params, config)[0]


def repeller_path(params, config: RepellerConfig = RepellerConfig()) -> np.ndarray:
    """Simulated particle positions (diagnostics and tests)."""
    return _run_repellers(params, config)[1]


# --- tabular (precomputed grid) objectives ----------------------------------


@dataclass
class TabularObjective:
    """Complete factorial grid of parameter settings with objective values.

    Queries are rounded per dimension to the nearest grid value (midpoint
    ties go to the smaller coordinate) and looked up exactly.
    """

    names: list[str]
    grids: list[np.ndarray]          # sorted unique values per dimension
    values: dict = field(repr=False, default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.grids)

    def space(self) -> SearchSpace:
        lower = np.array([g[0] for g in self.grids])
        upper = np.array([g[-1] if g[-1] > g[0] else g[0] + 1.0 for g in self.grids])
        return SearchSpace(lower, upper, np.zeros(self.dim, bool))

    def round_to_grid(self, x) -> tuple:
        out = []
        for xi, grid in zip(np.asarray(x, dtype=float), self.grids):
            k = int(np.searchsorted(grid, xi))
            if k == 0:
                out.append(grid[0])
            elif k == len(grid):
                out.append(grid[-1])
            else:
                lo, hi = grid[k - 1], grid[k]
                # strict < keeps the tie on the smaller coordinate
                out.append(hi if hi - xi < xi - lo else lo)
        return tuple(out)

    def __call__(self, x) -> float:
        return self.values[self.round_to_grid(x)]


def eval_tabular(objective: TabularObjective, x) -> float:
    return objective(x)


def load_tabular(path) -> TabularObjective:
    """Read a comma-separated complete grid: header, then one row per
    parameter combination with the objective in the last column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TabularFormatError(f"{path}:1: empty file") from None
        if len(header) < 2:
            raise TabularFormatError(f"{path}:1: need at least one parameter column")
        names = [h.strip() for h in header[:-1]]
        arity = len(header)
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != arity:
                raise TabularFormatError(
                    f"{path}:{lineno}: expected {arity} columns, found {len(row)}"
                )
            try:
                nums = [float(v) for v in row]
            except ValueError as exc:
                raise TabularFormatError(f"{path}:{lineno}: {exc}") from None
            key = tuple(nums[:-1])
            if key in rows:
                raise TabularFormatError(f"{path}:{lineno}: duplicate setting {key}")
            rows[key] = nums[-1]
    if not rows:
        raise TabularFormatError(f"{path}:2: no data rows")
    grids = [np.array(sorted({k[j] for k in rows})) for j in range(len(names))]
    expected = int(np.prod([len(g) for g in grids]))
    if expected != len(rows):
        for combo in itertools.product(*grids):
            if tuple(combo) not in rows:
                raise TabularFormatError(
                    f"{path}: incomplete grid, missing combination {tuple(combo)}"
                )
    return TabularObjective(names, grids, rows)
