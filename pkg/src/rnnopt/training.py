"""Meta-training: unroll policy + GP sample on the tape, backpropagate one of
the four episode losses through time, average over a batch of fresh
functions, clip, and apply Adam under a horizon curriculum."""

from __future__ import annotations

import enum
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import seeding
from .autodiff import AutodiffError, Tape
from .gp import GpSampleFunction, Kernel, TapedHistoryGpSample, expected_improvement
from .policy import LstmPolicy, SearchSpace, TapedLstm, feed_value, save_checkpoint


class LossKind(enum.Enum):
    FINAL = "final"   # value of the last query
    SUM = "sum"       # summed values (expected cumulative regret up to a constant)
    EI = "ei"         # negated summed expected improvement of each query
    OI = "oi"         # summed observed improvement, clipped at zero

    @classmethod
    def parse(cls, name: str) -> "LossKind":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(
                f"unknown loss '{name}'; expected one of "
                f"{[k.value for k in cls]}"
            ) from None


class TrainingDiverged(RuntimeError):
    """Loss or gradient went non-finite; carries the last-good checkpoint."""

    def __init__(self, message: str, checkpoint_path: str):
        super().__init__(f"{message}; last good checkpoint at {checkpoint_path}")
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 1
    hidden: int = 32
    loss: LossKind = LossKind.SUM
    kernel: Kernel = field(default_factory=Kernel)
    batch_size: int = 32
    curriculum: tuple = ((10, 300), (20, 300), (30, 400))  # (horizon, outer steps)
    adam_alpha: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    clip_norm: float = 5.0
    detach_history: bool = True
    feed: str = "raw"             # observation encoding fed back to the policy
    parallel_workers: int = 1     # simulated evaluation workers N inside episodes
    parallel_jitter: float = 0.5  # runtime half-width eta, used when N > 1
    processes: int = 1            # OS processes for batch rollouts
    checkpoint_every: int = 0     # 0 = only on divergence
    out_dir: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        horizons = [t for t, _ in self.curriculum]
        if not horizons:
            raise ValueError("curriculum must contain at least one stage")
        if any(b > a for a, b in zip(horizons[1:], horizons)):
            raise ValueError("curriculum horizons must be non-decreasing")
        if not 0 <= self.parallel_jitter < 1:
            raise ValueError("parallel_jitter must lie in [0, 1)")
        if self.parallel_workers < 1:
            raise ValueError("parallel_workers must be at least 1")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(state, params, grads, alpha=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard Adam with bias correction; mutates `state`, returns params."""
    if params.shape != grads.shape:
        raise ValueError("parameter and gradient shapes differ")
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * grads
    state.v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = state.m / (1 - beta1**state.step)
    v_hat = state.v / (1 - beta2**state.step)
    return params - alpha * m_hat / (np.sqrt(v_hat) + eps)


def loss_from_values(kind: LossKind, ys: list, ei_terms=None):
    """Assemble an episode loss from per-step values (Vars or floats).

    OI's first term is defined as zero (the running best starts at y_1).
    """
    if not ys:
        raise ValueError("empty trajectory")
    if kind is LossKind.FINAL:
        return ys[-1]
    if kind is LossKind.SUM:
        return ad.wsum(ys, [1.0] * len(ys))
    if kind is LossKind.OI:
        best = ys[0]
        terms = []
        for y in ys[1:]:
            terms.append(ad.minimum(ad.sub(y, best), 0.0))
            best = ad.minimum(best, y)
        if not terms:
            return ad.mul(ys[0], 0.0)
        return ad.wsum(terms, [1.0] * len(terms))
    if kind is LossKind.EI:
        if ei_terms is None or len(ei_terms) != len(ys):
            raise ValueError("EI loss needs one expected-improvement term per step")
        return ad.mul(ad.wsum(ei_terms, [1.0] * len(ei_terms)), -1.0)
    raise ValueError(f"unhandled loss kind {kind}")


def _unroll(taped: TapedLstm, sampler, T: int, kind: LossKind, feed: str = "raw"):
    """Unroll T steps of policy + GP sample on the tape; returns the loss Var."""
    tape = taped.tape
    policy = taped.policy
    d = policy.dim
    sh, sc = taped.initial_state()
    x_prev = tape.leaves(np.zeros(d))
    y_fed = tape.leaf(0.0)
    o_prev = tape.leaf(0.0)
    one = tape.leaf(1.0)
    ys, y_vals, ei_terms = [], [], []
    best = 0.0  # EI incumbent before any observation: the prior mean
    for t in range(T):
        sh, sc, xs = taped.step(sh, sc, x_prev + [y_fed, o_prev])
        if kind is LossKind.EI:
            post, y = sampler.posterior_then_sample(xs)
            ei_terms.append(expected_improvement(post, best))
            best = y if not ys else ad.minimum(best, y)
        else:
            y = sampler.sample_next(xs)
        ys.append(y)
        y_vals.append(ad.value_of(y))
        y_fed = feed_value(y, ys, feed)
        x_prev = xs
        o_prev = one
    loss = loss_from_values(kind, ys, ei_terms)
    if not isinstance(loss, ad.Var):
        loss = tape.leaf(loss)
    return loss


def rollout_loss(policy: LstmPolicy, kernel: Kernel, T: int, loss, seed,
                 detach_history: bool = True, feed: str = "raw"):
    """One fresh-function training episode; returns the scalar loss Var.

    The parameter gradient is `tape.backward(loss)[:policy.parameter_count()]`
    since the policy's parameters are the first leaves on the tape.
    """
    if T < 1:
        raise ValueError("horizon must be at least 1")
    kind = loss if isinstance(loss, LossKind) else LossKind.parse(loss)
    tape = Tape()
    taped = TapedLstm(policy, tape)
    fn_seed = (*_as_ids(seed), seeding.FUNC)
    if detach_history:
        sampler = GpSampleFunction(kernel, policy.dim, seed=fn_seed)
    else:
        sampler = TapedHistoryGpSample(kernel, policy.dim, seed=fn_seed)
    return _unroll(taped, sampler, T, kind, feed)


def _as_ids(seed) -> tuple[int, ...]:
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


# One rollout -> (loss value, flat parameter gradient). Module level so a
# fork-based process pool can run batches; results are identical regardless
# of process count since each task is seeded independently.
def _rollout_grad(args):
    (flat, space_args, hidden, kernel_args, T, kind_value, seed_ids, detach,
     n_sim, jitter, feed) = args
    space = SearchSpace(*[np.asarray(a) for a in space_args])
    policy = LstmPolicy.from_flat(space, hidden, np.asarray(flat))
    kernel = Kernel(*kernel_args)
    kind = LossKind(kind_value)
    tape = Tape()
    taped = TapedLstm(policy, tape)
    if detach:
        sampler = GpSampleFunction(kernel, policy.dim, seed=(*seed_ids, seeding.FUNC))
    else:
        sampler = TapedHistoryGpSample(kernel, policy.dim, seed=(*seed_ids, seeding.FUNC))
    if n_sim > 1:
        from .parallel import unroll_parallel

        loss = unroll_parallel(
            taped, sampler, T, kind, n_sim, jitter,
            np.random.default_rng((*seed_ids, seeding.RUNTIME)), feed,
        )
    else:
        loss = _unroll(taped, sampler, T, kind, feed)
    grad = taped.gradient(tape.backward(loss))
    return float(loss.v), grad


@dataclass
class TrainResult:
    policy: LstmPolicy
    history: list  # rows: (outer_step, horizon, mean_loss, grad_norm, wall_ms)
    checkpoint_paths: list


def train(config: TrainConfig, policy: LstmPolicy | None = None,
          progress=None) -> TrainResult:
    """Meta-train a policy per the config; returns it with the loss history.

    Each outer step averages gradients over `batch_size` independent fresh
    GP episodes (deterministic reduction order), clips the global norm and
    applies Adam. Non-finite losses abort with the last good checkpoint.
    """
    if policy is None:
        space = SearchSpace.unit(config.dim)
        policy = LstmPolicy.initialise(
            space, config.hidden, seeding.stream(config.seed, seeding.INIT)
        )
    params = policy.flat_parameters()
    adam = AdamState.zeros(params.size)
    history: list[tuple] = []
    checkpoints: list[str] = []

    space_args = (
        policy.space.lower.tolist(),
        policy.space.upper.tolist(),
        policy.space.integer_mask.tolist(),
    )
    kernel_args = (
        config.kernel.length_scale,
        config.kernel.signal_variance,
        config.kernel.noise_variance,
    )

    pool = None
    if config.processes > 1:
        import multiprocessing as mp

        pool = mp.get_context("fork").Pool(config.processes)

    def save(tag: str, current: np.ndarray) -> str:
        out_dir = config.out_dir or tempfile.mkdtemp(prefix="rnnopt-")
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"checkpoint_{tag}.json")
        save_checkpoint(
            policy.with_flat_parameters(current), path,
            kernel=config.kernel, loss=config.loss.value, feed=config.feed,
        )
        return path

    last_good = params.copy()
    outer = 0
    try:
        for horizon, steps in config.curriculum:
            for _ in range(steps):
                tic = time.perf_counter()
                tasks = [
                    (
                        params, space_args, config.hidden, kernel_args, horizon,
                        config.loss.value,
                        seeding.stream(config.seed, outer, b),
                        config.detach_history,
                        config.parallel_workers, config.parallel_jitter,
                        config.feed,
                    )
                    for b in range(config.batch_size)
                ]
                try:
                    if pool is None:
                        results = [_rollout_grad(t) for t in tasks]
                    else:
                        results = pool.map(_rollout_grad, tasks)
                except AutodiffError as exc:
                    path = save("last_good", last_good)
                    raise TrainingDiverged(f"outer step {outer}: {exc}", path) from exc
                losses = np.array([r[0] for r in results])
                grad = np.mean([r[1] for r in results], axis=0)
                if not (np.isfinite(losses).all() and np.isfinite(grad).all()):
                    path = save("last_good", last_good)
                    raise TrainingDiverged(f"non-finite loss at outer step {outer}", path)
                norm = float(np.linalg.norm(grad))
                if config.clip_norm > 0 and norm > config.clip_norm:
                    grad = grad * (config.clip_norm / norm)
                last_good = params
                params = adam_step(
                    adam, params, grad,
                    config.adam_alpha, config.adam_beta1, config.adam_beta2,
                    config.adam_eps,
                )
                wall_ms = (time.perf_counter() - tic) * 1e3
                history.append((outer, horizon, float(losses.mean()), norm, wall_ms))
                outer += 1
                if config.checkpoint_every and outer % config.checkpoint_every == 0:
                    checkpoints.append(save(f"{outer:06d}", params))
                if progress is not None:
                    progress(outer, horizon, float(losses.mean()))
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    return TrainResult(policy.with_flat_parameters(params), history, checkpoints)


def write_history_csv(history, path, timing: bool = False) -> None:
    """Training-curve CSV: outer_step, horizon, mean_loss, grad_norm, wall_ms."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["outer_step", "horizon", "mean_loss", "grad_norm", "wall_ms"])
        for outer, horizon, mean_loss, grad_norm, wall_ms in history:
            w.writerow([
                outer, horizon, repr(float(mean_loss)), repr(float(grad_norm)),
                repr(float(wall_ms)) if timing else 0,
            ])
