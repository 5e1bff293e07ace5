"""Episode records shared by every optimizer (learned, random, GP-EI)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class ObjectiveError(RuntimeError):
    """The black-box objective raised; carries step (and worker) context."""


@dataclass
class TrajectoryStep:
    step: int            # 1-based issue index
    x: np.ndarray        # raw continuous proposal (feeds the next policy input)
    x_eval: np.ndarray   # proposal after integer rounding, as evaluated
    y: float
    o: int               # fresh-slot flag the policy received for this proposal
    wall_ns: int = 0     # proposal time only, objective excluded
    worker_id: int | None = None
    complete_idx: int | None = None
    sim_time: float | None = None


@dataclass
class Trajectory:
    dim: int
    seed: object = None
    steps: list[TrajectoryStep] = field(default_factory=list)
    parallel: bool = False

    def __len__(self):
        return len(self.steps)

    def ys(self) -> np.ndarray:
        return np.array([s.y for s in self.steps])

    def xs(self) -> np.ndarray:
        return np.array([s.x for s in self.steps])

    def min_observed(self) -> np.ndarray:
        """m_t = min_{i<=t} y_i over issue order; non-increasing."""
        return np.minimum.accumulate(self.ys())

    def wall_ns(self) -> np.ndarray:
        return np.array([s.wall_ns for s in self.steps], dtype=np.int64)

    def header(self) -> list[str]:
        cols = (
            ["step"]
            + [f"x_{i + 1}" for i in range(self.dim)]
            + ["y", "min_so_far", "wall_ns"]
        )
        if self.parallel:
            cols += ["worker_id", "issue_idx", "complete_idx", "sim_time"]
        return cols

    def rows(self, timing: bool = False):
        mins = self.min_observed()
        for s, m in zip(self.steps, mins):
            row = (
                [s.step]
                + [repr(float(c)) for c in s.x]
                + [repr(float(s.y)), repr(float(m)), s.wall_ns if timing else 0]
            )
            if self.parallel:
                row += [s.worker_id, s.step, s.complete_idx, repr(float(s.sim_time))]
            yield row

    def write_csv(self, path, timing: bool = False) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in self.rows(timing=timing):
                w.writerow(row)
