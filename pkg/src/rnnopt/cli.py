"""Command-line interface: train, optimize, compare, time, check.

Configs are plain-text key=value files ('#' starts a comment). Every run
writes a manifest (config hash, seed, versions) next to its CSVs. Result
CSVs are deterministic for a given config and master seed; measured wall
times only appear in `time` output or with --timing."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import harness, seeding
from .gp import GpSampleFunction, Kernel
from .policy import load_checkpoint, propose_eval, save_checkpoint
from .training import LossKind, TrainConfig, train, write_history_csv


def parse_config(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _as_bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _curriculum(v: str):
    stages = []
    for part in v.split(","):
        horizon, steps = part.split(":")
        stages.append((int(horizon), int(steps)))
    return tuple(stages)


def _kernel_from(cfg: dict, noise_key_default: float = 1e-6) -> Kernel:
    return Kernel(
        length_scale=float(cfg.get("kernel_length_scale", 0.3)),
        signal_variance=float(cfg.get("kernel_signal_variance", 1.0)),
        noise_variance=float(cfg.get("kernel_noise_variance", noise_key_default)),
    )


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        dim=int(cfg.get("dim", 1)),
        hidden=int(cfg.get("hidden", 32)),
        loss=LossKind.parse(cfg.get("loss", "sum")),
        kernel=_kernel_from(cfg),
        batch_size=int(cfg.get("batch_size", 32)),
        curriculum=_curriculum(cfg.get("curriculum", "10:300,20:300,30:400")),
        adam_alpha=float(cfg.get("adam_alpha", 1e-3)),
        adam_beta1=float(cfg.get("adam_beta1", 0.9)),
        adam_beta2=float(cfg.get("adam_beta2", 0.999)),
        adam_eps=float(cfg.get("adam_eps", 1e-8)),
        seed=int(cfg.get("seed", 0)),
        clip_norm=float(cfg.get("clip_norm", 5.0)),
        detach_history=_as_bool(cfg.get("detach_history", "false")),
        feed=cfg.get("feed", "raw"),
        parallel_workers=int(cfg.get("parallel_workers", 1)),
        parallel_jitter=float(cfg.get("parallel_jitter", 0.5)),
        processes=int(cfg.get("processes", 1)),
        checkpoint_every=int(cfg.get("checkpoint_every", 0)),
    )


def _optimizer_from_spec(spec: str, cfg: dict):
    kernel = _kernel_from(cfg)
    if spec == "random":
        return harness.RandomSearchOptimizer()
    if spec == "gp_ei":
        return harness.GpEiOptimizer(kernel, n_init=int(cfg.get("gp_ei_init", 2)))
    if spec.startswith("rnn_parallel:"):
        _, path, n = spec.split(":", 2)
        policy, meta = load_checkpoint(path)
        return harness.ParallelPolicyOptimizer(
            policy, int(n), float(cfg.get("parallel_jitter", 0.5)),
            feed=meta.get("feed", "raw"),
        )
    if spec.startswith("rnn:"):
        return harness.PolicyOptimizer.from_checkpoint(spec.split(":", 1)[1])
    raise ValueError(f"unknown optimizer spec '{spec}'")


def _family_from(cfg: dict) -> harness.ObjectiveFamily:
    spec = cfg.get("objective", "gp1")
    kernel = None
    if spec in harness.GP_FAMILIES:
        kernel = Kernel(
            length_scale=float(cfg.get("kernel_length_scale", 0.3)),
            signal_variance=float(cfg.get("kernel_signal_variance", 1.0)),
            noise_variance=float(cfg.get("objective_noise_variance", 0.0)),
        )
    return harness.objective_family(spec, kernel=kernel,
                                    tabular_path=cfg.get("tabular_path"))


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    config = _train_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    config = __import__("dataclasses").replace(config, out_dir=args.out)

    def progress(outer, horizon, loss):
        if args.verbose and outer % 25 == 0:
            print(f"outer {outer}: T={horizon} loss={loss:.4f}", flush=True)

    result = train(config, progress=progress)
    ck = os.path.join(args.out, "checkpoint.json")
    save_checkpoint(result.policy, ck, kernel=config.kernel,
                    loss=config.loss.value, feed=config.feed)
    write_history_csv(result.history, os.path.join(args.out, "training.csv"),
                      timing=args.timing)
    harness.write_manifest(args.out, "train", cfg, config.seed)
    print(f"checkpoint: {ck}")
    return 0


def cmd_optimize(args) -> int:
    cfg = parse_config(args.config) if args.config else {}
    policy, meta = load_checkpoint(args.checkpoint)
    family = _family_from({**cfg, "objective": args.objective})
    objective = family.instance(args.seed, args.index)
    if args.parallel > 1:
        opt = harness.ParallelPolicyOptimizer(
            policy, args.parallel, args.jitter, feed=meta.get("feed", "raw"))
    else:
        opt = harness.PolicyOptimizer(policy, feed=meta.get("feed", "raw"))
    traj = opt.run(objective, family.space, args.steps,
                   seeding.stream(args.seed, args.index))
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "trajectory.csv")
    traj.write_csv(out, timing=args.timing)
    harness.write_manifest(
        args.out, "optimize",
        {"checkpoint": args.checkpoint, "objective": args.objective,
         "steps": args.steps, "index": args.index, "parallel": args.parallel,
         "jitter": args.jitter, **cfg},
        args.seed,
    )
    print(f"trajectory: {out}")
    return 0


def cmd_compare(args) -> int:
    cfg = parse_config(args.config)
    family = _family_from(cfg)
    specs = [s.strip() for s in cfg.get("optimizers", "random,gp_ei").split(",")]
    optimizers = [_optimizer_from_spec(s, cfg) for s in specs]
    n_functions = int(cfg.get("n_functions", 200))
    limits = {}
    if "gp_ei_functions" in cfg:
        limits["gp_ei"] = int(cfg["gp_ei_functions"])
    seed = int(cfg.get("seed", 0))
    budget = int(cfg.get("budget", 30))
    result = harness.compare(optimizers, family, n_functions, budget, seed,
                             function_limits=limits)
    os.makedirs(args.out, exist_ok=True)
    harness.write_aggregate_csv(result, os.path.join(args.out, "aggregate.csv"))
    harness.write_paired_csv(result, os.path.join(args.out, "paired.csv"))
    harness.write_runs_csv(result, os.path.join(args.out, "runs.csv"),
                           timing=args.timing)
    if result.failures:
        harness.write_failures_csv(result, os.path.join(args.out, "failures.csv"))
        print(f"{len(result.failures)} run(s) failed and were excluded", file=sys.stderr)
    harness.write_manifest(args.out, "compare", cfg, seed)
    for name in sorted(result.aggregates):
        agg = result.aggregates[name]
        ci = f" +- {agg.ci_half[-1]:.4f}" if agg.ci_half is not None else ""
        print(f"{name}: mean min@{budget} = {agg.mean[-1]:.4f}{ci} (n={agg.n})")
    return 0


def cmd_time(args) -> int:
    cfg = parse_config(args.config)
    family = _family_from(cfg)
    opt = _optimizer_from_spec(cfg.get("optimizer", "random"), cfg)
    seed = int(cfg.get("seed", 0))
    rows = harness.time_proposals(
        opt, family, int(cfg.get("budget", 100)), int(cfg.get("repeats", 3)),
        seed=seed,
    )
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "timing.csv")
    harness.write_timing_csv(rows, out)
    harness.write_manifest(args.out, "time", cfg, seed)
    print(f"timing: {out}")
    return 0


def cmd_check(args) -> int:
    """Fast self-check suite: core oracles and protocol invariants."""
    import math

    from . import autodiff as ad
    from .autodiff import Tape
    from .benchmarks import BENCHMARKS, PerturbedInstance
    from .parallel import run_parallel
    from .policy import LstmPolicy, SearchSpace
    from .training import rollout_loss

    checks = []

    def check(name, fn):
        try:
            fn()
            checks.append((name, True, ""))
        except Exception as exc:  # noqa: BLE001
            checks.append((name, False, str(exc)))

    def gradient_check():
        tape = Tape()
        xs = tape.leaves([0.4, -0.7, 1.1])
        root = ad.sigmoid(ad.mul(xs[0], xs[1]) + ad.tanh(xs[2]) + ad.erf(xs[0]))
        adj = tape.backward(root)
        for i, x0 in enumerate([0.4, -0.7, 1.1]):
            vals = []
            for h in (1e-5, -1e-5):
                pt = [0.4, -0.7, 1.1]
                pt[i] += h
                vals.append(ad.sigmoid(pt[0] * pt[1] + math.tanh(pt[2]) + math.erf(pt[0])))
            fd = (vals[0] - vals[1]) / 2e-5
            assert abs(adj[xs[i].i] - fd) <= 1e-6 * max(abs(fd), 1e-3)

    def sampler_check():
        kern = Kernel(0.3, 1.0, 0.0)
        pts = [(0.1,), (0.4,), (0.65,), (0.9,)]
        z = np.random.default_rng(0).standard_normal(4)
        f = GpSampleFunction(kern, 1, seed=0)
        inc = [f.sample_next(p, z=zi) for p, zi in zip(pts, z)]
        from .gp import kernel_eval

        gram = np.array([[kernel_eval(kern, a, b) for b in pts] for a in pts])
        gram += f.chol.jitter * np.eye(4)
        joint = np.linalg.cholesky(gram) @ z
        assert np.allclose(inc, joint, atol=1e-8)

    def ei_check():
        from .gp import Posterior, expected_improvement

        got = expected_improvement(Posterior(0.0, 1.0), 0.0)
        assert abs(got - 1.0 / math.sqrt(2 * math.pi)) < 1e-9

    def rollout_gradient_check():
        policy = LstmPolicy.initialise(SearchSpace.unit(1), 4, 3)
        loss = rollout_loss(policy, Kernel(0.3, 1.0, 1e-6), 3, "sum", seed=1,
                            detach_history=False)
        grad = loss.t.backward(loss)[: policy.parameter_count()]
        flat = policy.flat_parameters()
        for k in (0, 7, 40):
            h = 1e-5
            hi, lo = flat.copy(), flat.copy()
            hi[k] += h
            lo[k] -= h
            fhi = rollout_loss(policy.with_flat_parameters(hi), Kernel(0.3, 1.0, 1e-6),
                               3, "sum", seed=1, detach_history=False)
            flo = rollout_loss(policy.with_flat_parameters(lo), Kernel(0.3, 1.0, 1e-6),
                               3, "sum", seed=1, detach_history=False)
            fd = (fhi.v - flo.v) / (2 * h)
            assert abs(grad[k] - fd) <= 1e-4 * max(abs(fd), 1e-3)

    def parallel_check():
        policy = LstmPolicy.initialise(SearchSpace.unit(1), 8, 5)
        f = GpSampleFunction(Kernel(0.3, 1.0, 0.0), 1, seed=2)
        seq = propose_eval(policy, 10, f, seed=0)
        f2 = GpSampleFunction(Kernel(0.3, 1.0, 0.0), 1, seed=2)
        par = run_parallel(policy, f2, 1, 10, 0.0, seed=0)
        assert np.array_equal(seq.xs(), par.xs())
        tri = run_parallel(
            policy, GpSampleFunction(Kernel(0.3, 1.0, 0.0), 1, seed=3), 3, 10, 0.5, 0)
        assert sum(1 for s in tri.steps if s.o == 0) == 3

    def benchmark_check():
        inst = PerturbedInstance.identity(BENCHMARKS["branin"])
        u = (np.array([math.pi, 2.275]) - inst.base.lower) / (
            inst.base.upper - inst.base.lower)
        assert abs(inst(u) - 0.397887) < 1e-5
        gp_inst = PerturbedInstance.identity(BENCHMARKS["goldstein_price"])
        assert abs(gp_inst(np.array([0.5, 0.25])) - 3.0) < 1e-9

    check("autodiff_finite_differences", gradient_check)
    check("gp_incremental_vs_joint", sampler_check)
    check("expected_improvement_closed_form", ei_check)
    check("rollout_gradient_full_history", rollout_gradient_check)
    check("parallel_protocol", parallel_check)
    check("benchmark_identity_minima", benchmark_check)

    if args.out:
        import csv

        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "check.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["check", "passed"])
            for name, ok, _ in checks:
                w.writerow([name, int(ok)])
        harness.write_manifest(args.out, "check", {}, 0)
    failed = 0
    for name, ok, msg in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}{': ' + msg if msg else ''}")
        failed += 0 if ok else 1
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rnnopt",
        description="Meta-trained recurrent black-box optimizers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train a policy from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true",
                   help="write measured wall times into the training CSV")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("optimize", help="run a checkpoint on an objective")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--objective", required=True)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--index", type=int, default=0,
                   help="objective instance index within the family")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--jitter", type=float, default=0.5)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true")
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("compare", help="paired optimizer comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("time", help="per-proposal timing table")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_time)

    p = sub.add_parser("check", help="run the built-in oracle/invariant checks")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_check)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
