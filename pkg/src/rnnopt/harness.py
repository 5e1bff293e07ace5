"""Experiment harness: runs optimizers head-to-head on shared objective
instances (paired design), aggregates min-observed curves with normal 95%
confidence intervals, and times per-proposal costs.

Wall-clock fields are measured internally but written as zero unless timing
output is requested, so result CSVs are byte-identical across re-runs."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
from dataclasses import dataclass, field

import numpy as np

from . import __version__, seeding
from .baselines import gp_ei_optimize, random_search
from .benchmarks import (
    BENCHMARKS,
    PerturbedInstance,
    RepellerConfig,
    load_tabular,
    simulate_repellers,
)
from .gp import GpSampleFunction, Kernel
from .parallel import run_parallel
from .policy import SearchSpace, load_checkpoint, propose_eval
from .trajectory import Trajectory

GP_FAMILIES = {"gp1": 1, "gp2": 2, "gp3": 3, "gp6": 6}


# --- optimizer adapters ------------------------------------------------------


class RandomSearchOptimizer:
    name = "random"

    def run(self, objective, space, budget, seed) -> Trajectory:
        return random_search(space, objective, budget, seed)


class GpEiOptimizer:
    """Fixed-prior GP-EI; slow per proposal, capped to fewer functions."""

    def __init__(self, kernel: Kernel, n_init: int = 2, name: str = "gp_ei"):
        self.kernel = kernel
        self.n_init = n_init
        self.name = name

    def run(self, objective, space, budget, seed) -> Trajectory:
        return gp_ei_optimize(space, objective, budget, self.kernel,
                              n_init=self.n_init, seed=seed)


class PolicyOptimizer:
    """A trained (or untrained) LSTM policy as a sequential optimizer."""

    def __init__(self, policy, name: str = "rnn", feed: str = "raw"):
        self.policy = policy
        self.name = name
        self.feed = feed

    @classmethod
    def from_checkpoint(cls, path, name=None, feed=None) -> "PolicyOptimizer":
        policy, meta = load_checkpoint(path)
        return cls(
            policy,
            name=name or f"rnn_{meta.get('loss') or 'policy'}",
            feed=feed or meta.get("feed", "raw"),
        )

    def run(self, objective, space, budget, seed) -> Trajectory:
        if space.dim != self.policy.dim:
            raise ValueError(
                f"policy expects dimension {self.policy.dim}, objective has {space.dim}"
            )
        return propose_eval(self.policy, budget, objective, seed=seed, feed=self.feed)


class ParallelPolicyOptimizer:
    """The same policy run through the N-worker simulated-evaluation loop."""

    def __init__(self, policy, n_workers: int, jitter: float = 0.5,
                 name: str | None = None, feed: str = "raw"):
        self.policy = policy
        self.n_workers = n_workers
        self.jitter = jitter
        self.name = name or f"rnn_parallel{n_workers}"
        self.feed = feed

    def run(self, objective, space, budget, seed) -> Trajectory:
        return run_parallel(self.policy, objective, self.n_workers, budget,
                            self.jitter, seed, feed=self.feed)


# --- objective families ------------------------------------------------------


@dataclass
class ObjectiveFamily:
    """A seeded sequence of objective instances sharing one search space."""

    name: str
    space: SearchSpace
    make: object  # (master_seed, index) -> objective callable

    def instance(self, master_seed, index):
        return self.make(master_seed, index)


def _perturbed_unit_box(fn, dim, seed):
    """Translation/scale/flip/permutation of a unit-box objective, clipped
    back into the box (used for the repeller transfer instances)."""
    rng = seeding.rng(seed, seeding.PERTURB)
    shift = rng.uniform(-0.1, 0.1, dim)
    scale = rng.uniform(0.9, 1.1, dim)
    flip = rng.random(dim) < 0.5
    perm = rng.permutation(dim)

    def wrapped(u):
        v = np.asarray(u, dtype=float)[perm]
        v = np.where(flip, 1.0 - v, v)
        return fn(np.clip(scale * v + shift, 0.0, 1.0))

    return wrapped


def objective_family(spec: str, kernel: Kernel | None = None,
                     tabular_path=None) -> ObjectiveFamily:
    """Resolve a family name: gp1/gp2/gp3/gp6, the analytic benchmarks,
    repeller, or tabular:<path>."""
    if spec in GP_FAMILIES:
        dim = GP_FAMILIES[spec]
        kern = kernel or Kernel(0.3, 1.0, 0.0)

        def make_gp(master, index):
            return GpSampleFunction(kern, dim, seed=seeding.stream(master, index, seeding.FUNC))

        return ObjectiveFamily(spec, SearchSpace.unit(dim), make_gp)
    if spec in BENCHMARKS:
        bench = BENCHMARKS[spec]

        def make_bench(master, index):
            return PerturbedInstance.sample(bench, seed=(int(master), int(index)))

        return ObjectiveFamily(spec, SearchSpace.unit(bench.dim), make_bench)
    if spec == "repeller":
        cfg = RepellerConfig()

        def make_rep(master, index):
            return _perturbed_unit_box(
                lambda u: simulate_repellers(u, cfg), cfg.space().dim,
                (int(master), int(index)),
            )

        return ObjectiveFamily(spec, cfg.space(), make_rep)
    if spec == "tabular" or spec.startswith("tabular:"):
        path = tabular_path or spec.split(":", 1)[1]
        obj = load_tabular(path)

        def make_tab(master, index):
            return obj

        return ObjectiveFamily("tabular", obj.space(), make_tab)
    raise ValueError(f"unknown objective family '{spec}'")


# --- run records and aggregation ---------------------------------------------


@dataclass
class RunRecord:
    optimizer: str
    objective_id: str
    seed: object
    min_curve: np.ndarray
    wall_ns: np.ndarray

    def __post_init__(self):
        if (np.diff(self.min_curve) > 0).any():
            raise ValueError("min-observed curve must be non-increasing")


@dataclass
class AggregateCurve:
    optimizer: str
    n: int
    mean: np.ndarray
    ci_half: np.ndarray | None  # 1.96 * stderr; None when n < 2


def aggregate(records: list[RunRecord], optimizer: str) -> AggregateCurve:
    curves = np.array([r.min_curve for r in records])
    n = curves.shape[0]
    mean = curves.mean(axis=0)
    ci = None
    if n >= 2:
        ci = 1.96 * curves.std(axis=0, ddof=1) / math.sqrt(n)
    return AggregateCurve(optimizer, n, mean, ci)


@dataclass
class CompareResult:
    family: str
    budget: int
    seed: object
    records: dict = field(default_factory=dict)    # name -> list[RunRecord]
    curves: dict = field(default_factory=dict)     # name -> n x T min curves
    aggregates: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)   # (optimizer, index, message)

    def final_values(self, name) -> np.ndarray:
        return self.curves[name][:, -1]

    def paired_delta(self, a: str, b: str):
        """mean(final_a - final_b) and its 1.96*stderr over shared functions."""
        ca, cb = self.curves[a], self.curves[b]
        n = min(len(ca), len(cb))
        delta = ca[:n, -1] - cb[:n, -1]
        se = delta.std(ddof=1) / math.sqrt(n) if n >= 2 else float("nan")
        return float(delta.mean()), 1.96 * se, n


def compare(optimizers, family: ObjectiveFamily, n_functions: int, budget: int,
            seed, function_limits: dict | None = None) -> CompareResult:
    """Run every optimizer on the same objective instances.

    Instances are created once per index and queried by the optimizers in
    list order, so lazily-materialised objectives (GP draws) stay one
    consistent function across optimizers. `function_limits` caps how many
    instances a named optimizer sees (the slow GP-EI baseline runs fewer);
    paired statistics use the shared prefix.
    """
    limits = function_limits or {}
    result = CompareResult(family.name, budget, seed)
    for opt in optimizers:
        result.records[opt.name] = []
    for index in range(n_functions):
        objective = family.instance(seed, index)
        for opt in optimizers:
            if index >= limits.get(opt.name, n_functions):
                continue
            run_seed = seeding.stream(seed, index)
            try:
                traj = opt.run(objective, family.space, budget, run_seed)
            except Exception as exc:  # noqa: BLE001 - recorded, excluded
                result.failures.append((opt.name, index, str(exc)))
                continue
            result.records[opt.name].append(RunRecord(
                optimizer=opt.name,
                objective_id=f"{family.name}[{index}]",
                seed=run_seed,
                min_curve=traj.min_observed(),
                wall_ns=traj.wall_ns(),
            ))
    for opt in optimizers:
        recs = result.records[opt.name]
        if recs:
            result.curves[opt.name] = np.array([r.min_curve for r in recs])
            result.aggregates[opt.name] = aggregate(recs, opt.name)
    return result


# --- timing ------------------------------------------------------------------


def time_proposals(optimizer, family: ObjectiveFamily, budget: int,
                   repeats: int, seed=0, warmup: int = 1):
    """Per-step median proposal wall-clock (ns) over `repeats` episodes.

    The objective callback is excluded from the clock (the drivers time the
    proposal work only). Returns a list of (step, median_ns)."""
    if repeats < 3:
        raise ValueError("repeats must be at least 3")
    walls = []
    for rep in range(warmup + repeats):
        objective = family.instance(seed, rep)
        traj = optimizer.run(objective, family.space, budget,
                             seeding.stream(seed, rep))
        if rep >= warmup:
            walls.append(traj.wall_ns())
    med = np.median(np.array(walls), axis=0)
    return [(t + 1, float(med[t])) for t in range(budget)]


# --- CSV and manifest plumbing ------------------------------------------------


def write_aggregate_csv(result: CompareResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["optimizer", "step", "mean", "ci_half", "n"])
        for name in sorted(result.aggregates):
            agg = result.aggregates[name]
            for t in range(len(agg.mean)):
                ci = "" if agg.ci_half is None else repr(float(agg.ci_half[t]))
                w.writerow([name, t + 1, repr(float(agg.mean[t])), ci, agg.n])


def read_aggregate_csv(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["optimizer"], []).append(
                (int(row["step"]), row["mean"], row["ci_half"], int(row["n"]))
            )
    return out


def write_paired_csv(result: CompareResult, path) -> None:
    names = sorted(result.curves)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["objective_index", "optimizer_a", "optimizer_b",
                    "final_a", "final_b", "delta"])
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                ca, cb = result.curves[a], result.curves[b]
                for idx in range(min(len(ca), len(cb))):
                    fa, fb = float(ca[idx, -1]), float(cb[idx, -1])
                    w.writerow([idx, a, b, repr(fa), repr(fb), repr(fa - fb)])


def write_runs_csv(result: CompareResult, path, timing: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["optimizer", "objective", "step", "min_so_far", "wall_ns"])
        for name in sorted(result.records):
            for rec in result.records[name]:
                for t, m in enumerate(rec.min_curve):
                    w.writerow([
                        name, rec.objective_id, t + 1, repr(float(m)),
                        int(rec.wall_ns[t]) if timing else 0,
                    ])


def write_failures_csv(result: CompareResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["optimizer", "objective_index", "error"])
        for name, index, message in result.failures:
            w.writerow([name, index, message])


def write_timing_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "median_ns"])
        for step, med in rows:
            w.writerow([step, repr(float(med))])


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(out_dir, command: str, config: dict, seed) -> str:
    doc = {
        "command": command,
        "config_hash": config_hash(config),
        "config": {k: str(v) for k, v in sorted(config.items())},
        "seed": seed,
        "versions": {
            "rnnopt": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
