"""Reference optimizers: uniform random search and sequential GP-EI.

GP-EI is the fixed-prior Bayesian-optimization stand-in: kernel
hyperparameters are given (ground-truth mode), the acquisition is maximised
over a seeded uniform candidate set refined by golden-section line searches.
Proposal cost grows with the number of observations (the usual cubic-flavour
GP scaling), which is exactly what the timing harness measures against the
constant-cost recurrent policy.
"""

from __future__ import annotations

import math
import time

import numpy as np

from . import seeding
from .gp import Kernel, Posterior, PosteriorCore, expected_improvement
from .policy import SearchSpace
from .trajectory import ObjectiveError, Trajectory, TrajectoryStep

N_CANDIDATES = 2048
N_REFINE_STARTS = 4
N_REFINE_SWEEPS = 20      # one golden-section line search each, coords cycled
GOLDEN_ITERS = 12
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0

_HALTON_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19)


def random_search(space: SearchSpace, objective, budget: int, seed) -> Trajectory:
    """budget i.i.d. uniform queries (integer dims uniform on their grid)."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    rng = seeding.rng(seed, seeding.SEARCH)
    traj = Trajectory(dim=space.dim, seed=seed)
    mask = space.integer_mask
    for t in range(1, budget + 1):
        tic = time.perf_counter_ns()
        x = space.lower + space.width * rng.uniform(size=space.dim)
        for j in np.flatnonzero(mask):
            x[j] = float(rng.integers(
                math.ceil(space.lower[j]), math.floor(space.upper[j]) + 1
            ))
        wall = time.perf_counter_ns() - tic
        try:
            y = float(objective(x))
        except Exception as exc:  # noqa: BLE001
            raise ObjectiveError(f"objective failed at step {t}: {exc}") from exc
        traj.steps.append(TrajectoryStep(step=t, x=x, x_eval=x, y=y, o=1, wall_ns=wall))
    return traj


def _halton(index: int, dim: int) -> np.ndarray:
    if dim > len(_HALTON_PRIMES):
        raise ValueError(f"quasi-random init supports up to {len(_HALTON_PRIMES)} dims")
    out = np.empty(dim)
    for j in range(dim):
        base = _HALTON_PRIMES[j]
        f, r, i = 1.0, 0.0, index
        while i > 0:
            f /= base
            r += f * (i % base)
            i //= base
        out[j] = r
    return out


def _ei_value(core: PosteriorCore, best: float, x) -> float:
    mean, quad = core.moments(x)
    var = core.kernel.signal_variance - quad
    return expected_improvement(Posterior(mean, var if var > 0.0 else 0.0), best)


def _golden_line(core, best, x, coord, lo, hi):
    """Golden-section maximisation of EI along one coordinate, in place."""
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    x[coord] = c
    fc = _ei_value(core, best, x)
    x[coord] = d
    fd = _ei_value(core, best, x)
    for _ in range(GOLDEN_ITERS):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            x[coord] = c
            fc = _ei_value(core, best, x)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            x[coord] = d
            fd = _ei_value(core, best, x)
    if fc > fd:
        x[coord] = c
        return fc
    x[coord] = d
    return fd


def propose_ei(core: PosteriorCore, best: float, space: SearchSpace, rng):
    """Maximise EI over N_CANDIDATES uniform points + golden-section refinement.

    Returns (x, ei_at_x, max_ei_over_candidates); the refined value is never
    below the candidate-set maximum.
    """
    cands = space.lower + space.width * rng.uniform(size=(N_CANDIDATES, space.dim))
    scores = np.array([_ei_value(core, best, list(c)) for c in cands])
    order = np.argsort(scores)[::-1]
    cand_best = float(scores[order[0]])
    best_x = list(cands[order[0]])
    best_val = cand_best
    for k in order[:N_REFINE_STARTS]:
        x = list(cands[k])
        val = float(scores[k])
        for sweep in range(N_REFINE_SWEEPS):
            j = sweep % space.dim
            val = _golden_line(core, best, x, j, space.lower[j], space.upper[j])
        if val > best_val:
            best_val = val
            best_x = list(x)
    return np.array(best_x), best_val, cand_best


def gp_ei_optimize(space: SearchSpace, objective, budget: int, kernel: Kernel,
                   n_init: int = 2, seed=0) -> Trajectory:
    """Sequential GP-EI with fixed kernel hyperparameters.

    The first n_init queries come from a seeded-rotation Halton sequence;
    afterwards each proposal maximises expected improvement under the GP
    posterior of all (rounded) evaluations so far.
    """
    if not budget >= n_init >= 1:
        raise ValueError("need budget >= n_init >= 1")
    rng = seeding.rng(seed, seeding.SEARCH)
    shift = rng.uniform(size=space.dim)
    core = PosteriorCore(kernel)
    traj = Trajectory(dim=space.dim, seed=seed)
    best = math.inf
    for t in range(1, budget + 1):
        tic = time.perf_counter_ns()
        if t <= n_init:
            u = (_halton(t, space.dim) + shift) % 1.0
            x = space.lower + space.width * u
        else:
            x, _, _ = propose_ei(core, best, space, rng)
        x_eval = space.round_integers(x)
        wall = time.perf_counter_ns() - tic
        try:
            y = float(objective(x_eval))
        except Exception as exc:  # noqa: BLE001
            raise ObjectiveError(f"objective failed at step {t}: {exc}") from exc
        traj.steps.append(
            TrajectoryStep(step=t, x=x_eval, x_eval=x_eval, y=y, o=1, wall_ns=wall)
        )
        tic = time.perf_counter_ns()
        core.add(tuple(x_eval), y)
        best = min(best, y)
        traj.steps[-1].wall_ns += time.perf_counter_ns() - tic
    return traj
