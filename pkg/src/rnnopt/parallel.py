"""Simulated N-worker asynchronous evaluation.

The policy input gains a binary flag o: the first N proposals of an episode
are made with o=0 and dummy observation inputs (nothing has completed yet);
afterwards each completed evaluation is fed back with o=1 and yields one new
proposal. Each query gets a simulated runtime Uniform(1-eta, 1+eta), so
completions can overtake issue order. Time is a deterministic event queue;
N=1 with eta=0 reproduces the sequential optimizer exactly.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, replace

import numpy as np

from . import seeding
from .policy import LstmPolicy, feed_value
from .trajectory import ObjectiveError, Trajectory, TrajectoryStep


@dataclass(frozen=True)
class RuntimeJitter:
    """Half-width eta of the simulated runtime distribution U(1-eta, 1+eta)."""

    half_width: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.half_width < 1.0:
            raise ValueError("jitter half-width must lie in [0, 1)")

    def draw(self, rng) -> float:
        return float(rng.uniform(1.0 - self.half_width, 1.0 + self.half_width))


def run_parallel(policy: LstmPolicy, objective, n_workers: int, budget: int,
                 jitter, seed, feed: str = "raw") -> Trajectory:
    """Run the policy with n_workers simulated evaluation slots.

    Exactly `budget` queries are issued and completed; the trajectory records
    issue order, completion order, worker ids and simulated times.
    """
    if not 1 <= n_workers <= budget:
        raise ValueError("need 1 <= n_workers <= budget")
    if not isinstance(jitter, RuntimeJitter):
        jitter = RuntimeJitter(float(jitter))
    space = policy.space
    rng = np.random.default_rng(seeding.stream(0, *_ids(seed), seeding.RUNTIME))

    state = policy.initial_state()
    traj = Trajectory(dim=space.dim, seed=seed, parallel=True)
    pending: list[tuple[float, int, int]] = []  # (finish time, issue idx, worker)
    completed_values: list[float] = []
    issued = 0

    def issue(x_prev, y_fed, o_prev, worker, now):
        nonlocal state, issued
        tic = time.perf_counter_ns()
        new_state, x = policy.step(state, x_prev, y_fed, o_prev)
        x_eval = space.round_integers(x)
        wall = time.perf_counter_ns() - tic
        state = new_state
        try:
            y = float(objective(x_eval))
        except Exception as exc:  # noqa: BLE001
            raise ObjectiveError(
                f"objective failed at step {issued + 1} on worker {worker}: {exc}"
            ) from exc
        traj.steps.append(TrajectoryStep(
            step=issued + 1, x=x, x_eval=x_eval, y=y, o=int(o_prev),
            wall_ns=wall, worker_id=worker,
        ))
        heapq.heappush(pending, (now + jitter.draw(rng), issued, worker))
        issued += 1

    # Fresh-slot phase: N proposals from dummy inputs, o = 0.
    for worker in range(n_workers):
        issue(np.zeros(space.dim), 0.0, 0.0, worker, 0.0)

    rank = 0
    while rank < budget:
        now, idx, worker = heapq.heappop(pending)
        rank += 1
        step = traj.steps[idx]
        step.complete_idx = rank
        step.sim_time = now
        completed_values.append(step.y)
        if issued < budget:
            tic = time.perf_counter_ns()
            y_fed = feed_value(step.y, completed_values, feed)
            extra = time.perf_counter_ns() - tic
            issue(step.x, y_fed, 1.0, worker, now)
            traj.steps[issued - 1].wall_ns += extra
    return traj


def _ids(seed) -> tuple[int, ...]:
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def unroll_parallel(taped, sampler, budget: int, kind, n_workers: int,
                    eta: float, runtime_rng, feed: str = "raw"):
    """Taped counterpart of run_parallel for meta-training.

    Function values are drawn (and the GP extended) in issue order but fed
    back to the policy in completion order; the loss runs over all `budget`
    values in issue order.
    """
    from . import autodiff as ad
    from .gp import expected_improvement
    from .training import LossKind, loss_from_values

    if not 1 <= n_workers <= budget:
        raise ValueError("need 1 <= n_workers <= budget")
    jitter = RuntimeJitter(eta)
    tape = taped.tape
    d = taped.policy.dim
    sh, sc = taped.initial_state()
    zero_x = tape.leaves(np.zeros(d))
    zero_y = tape.leaf(0.0)
    o0 = tape.leaf(0.0)
    o1 = tape.leaf(1.0)

    pending: list[tuple[float, int, int]] = []
    xs_by_idx: list[list] = []
    ys: list = []
    y_vals: list[float] = []
    ei_terms: list = []
    completed: list = []  # y Vars in completion order
    issued = 0
    best = 0.0  # EI incumbent before any observation: the prior mean

    def issue(x_prev, y_fed, o_prev, worker, now):
        nonlocal sh, sc, issued, best
        sh, sc, xs = taped.step(sh, sc, x_prev + [y_fed, o_prev])
        if kind is LossKind.EI:
            post, y = sampler.posterior_then_sample(xs)
            ei_terms.append(expected_improvement(post, best))
            best = y if not ys else ad.minimum(best, y)
        else:
            y = sampler.sample_next(xs)
        xs_by_idx.append(xs)
        ys.append(y)
        y_vals.append(ad.value_of(y))
        heapq.heappush(pending, (jitter.draw(runtime_rng) + now, issued, worker))
        issued += 1

    for worker in range(n_workers):
        issue(zero_x, zero_y, o0, worker, 0.0)
    rank = 0
    while rank < budget:
        now, idx, worker = heapq.heappop(pending)
        rank += 1
        completed.append(ys[idx])
        if issued < budget:
            y_fed = feed_value(ys[idx], completed, feed)
            issue(xs_by_idx[idx], y_fed, o1, worker, now)
    loss = loss_from_values(kind, ys, ei_terms if kind is LossKind.EI else None)
    if not isinstance(loss, ad.Var):
        loss = tape.leaf(loss)
    return loss


def train_parallel(config, n_workers: int, jitter, policy=None):
    """Meta-train with run_parallel episode semantics on GP samples."""
    from .training import train

    eta = jitter.half_width if isinstance(jitter, RuntimeJitter) else float(jitter)
    cfg = replace(config, parallel_workers=n_workers, parallel_jitter=eta)
    return train(cfg, policy=policy)
