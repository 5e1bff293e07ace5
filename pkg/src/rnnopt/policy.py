"""LSTM query policy: consumes (x_prev, y_prev, o_prev), emits the next query.

One policy instance holds the search space it proposes into plus the gate
parameters. Inference (`step`, `propose_eval`) is plain numpy with no tape;
`TapedLstm` runs the identical arithmetic on an autodiff tape for BPTT and
must agree with inference to 1e-12.

Observed values are standardised per episode before being fed back (running
mean/std over the episode, clipped to +-10): the policy is trained on unit
GP samples but deployed on objectives of arbitrary scale.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Var
from .gp import Kernel
from .trajectory import ObjectiveError, Trajectory, TrajectoryStep

CHECKPOINT_FORMAT = "rnnopt-checkpoint"
CHECKPOINT_VERSION = 1

FEED_CLIP = 10.0
_GATES = ("input", "forget", "candidate", "output")


@dataclass(frozen=True)
class SearchSpace:
    lower: np.ndarray
    upper: np.ndarray
    integer_mask: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        mask = np.asarray(self.integer_mask, dtype=bool)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "integer_mask", mask)
        if lower.ndim != 1 or lower.size < 1:
            raise ValueError("search space needs at least one dimension")
        if lower.shape != upper.shape or lower.shape != mask.shape:
            raise ValueError("bounds and integer mask must share one shape")
        if not (lower < upper).all():
            raise ValueError("lower bounds must be strictly below upper bounds")

    @classmethod
    def unit(cls, dim: int, integer_mask=None) -> "SearchSpace":
        mask = np.zeros(dim, bool) if integer_mask is None else integer_mask
        return cls(np.zeros(dim), np.ones(dim), mask)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def round_integers(self, x: np.ndarray) -> np.ndarray:
        """Snap integer dimensions to the nearest in-bounds integer."""
        if not self.integer_mask.any():
            return x
        out = x.copy()
        m = self.integer_mask
        out[m] = np.clip(
            np.rint(x[m]), np.ceil(self.lower[m]), np.floor(self.upper[m])
        )
        return out


def feed_value(y_new, values, mode: str = "raw"):
    """Observation input for the next policy step.

    mode "raw" feeds the value itself (clipped to +-10): the policy is
    trained on unit-scale GP draws and keeps their absolute calibration,
    which is what lets it judge when the incumbent is already good. mode
    "standard" feeds (y - mean)/std over the episode so far: scale-free, for
    deployment on objectives with arbitrary output ranges. The std needs two
    points, so the first observation feeds as 0 there; a numerically flat
    history falls back to unit scale.

    `values` are the observations so far including the newest (floats at
    inference, Vars during training, in which case the statistics stay on
    the tape and the whole rollout is differentiable).
    """
    if mode == "raw":
        v = y_new
    elif mode == "standard":
        n = len(values)
        m = ad.wsum(values, [1.0 / n] * n)
        v = ad.sub(y_new, m)
        if n >= 2:
            diffs = [ad.sub(val, m) for val in values]
            var = ad.mul(ad.dot(diffs, diffs), 1.0 / n)
            if ad.value_of(var) >= 1e-24:
                v = ad.div(v, ad.sqrt(var))
    else:
        raise ValueError(f"unknown feed mode '{mode}'")
    return ad.minimum(ad.maximum(v, -FEED_CLIP), FEED_CLIP)


@dataclass
class PolicyState:
    h: np.ndarray
    c: np.ndarray


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_gates(z: np.ndarray, hidden: int) -> None:
    if np.isfinite(z).all():
        return
    bad = int(np.flatnonzero(~np.isfinite(z))[0])
    raise NonFiniteError(f"non-finite pre-activation in {_GATES[bad // hidden]} gate")


class LstmPolicy:
    """Single-layer LSTM with a sigmoid read-out into the search space.

    Gate rows of `w`/`b` are ordered input, forget, candidate, output; the
    input vector is [x (d), y (1), o (1), h (hidden)].
    """

    def __init__(self, space: SearchSpace, hidden: int, w, b, w_out, b_out):
        d = space.dim
        self.space = space
        self.hidden = hidden
        self.w = np.asarray(w, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.w_out = np.asarray(w_out, dtype=float)
        self.b_out = np.asarray(b_out, dtype=float)
        if self.w.shape != (4 * hidden, d + 2 + hidden):
            raise ValueError(f"gate weights must be (4H, d+2+H), got {self.w.shape}")
        if self.b.shape != (4 * hidden,) or self.w_out.shape != (d, hidden) or self.b_out.shape != (d,):
            raise ValueError("parameter shapes do not match d/hidden")
        for name, arr in self.named_parameters():
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite values in parameter '{name}'")

    @classmethod
    def initialise(cls, space: SearchSpace, hidden: int, seed) -> "LstmPolicy":
        """Uniform(-0.05, 0.05) parameters with the forget-gate bias at +1."""
        rng = np.random.default_rng(seed)
        d = space.dim
        w = rng.uniform(-0.05, 0.05, (4 * hidden, d + 2 + hidden))
        b = rng.uniform(-0.05, 0.05, 4 * hidden)
        b[hidden : 2 * hidden] += 1.0
        w_out = rng.uniform(-0.05, 0.05, (d, hidden))
        b_out = rng.uniform(-0.05, 0.05, d)
        return cls(space, hidden, w, b, w_out, b_out)

    @classmethod
    def from_flat(cls, space: SearchSpace, hidden: int, flat: np.ndarray) -> "LstmPolicy":
        d = space.dim
        shapes = [(4 * hidden, d + 2 + hidden), (4 * hidden,), (d, hidden), (d,)]
        arrs = []
        k = 0
        for shape in shapes:
            size = int(np.prod(shape))
            arrs.append(np.asarray(flat[k : k + size], dtype=float).reshape(shape))
            k += size
        if k != len(flat):
            raise ValueError(f"flat vector has {len(flat)} entries, expected {k}")
        return cls(space, hidden, *arrs)

    @property
    def dim(self) -> int:
        return self.space.dim

    def named_parameters(self):
        return [
            ("w", self.w),
            ("b", self.b),
            ("w_out", self.w_out),
            ("b_out", self.b_out),
        ]

    def parameter_count(self) -> int:
        return sum(arr.size for _, arr in self.named_parameters())

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.named_parameters()])

    def with_flat_parameters(self, flat: np.ndarray) -> "LstmPolicy":
        return LstmPolicy.from_flat(self.space, self.hidden, flat)

    def initial_state(self) -> PolicyState:
        return PolicyState(np.zeros(self.hidden), np.zeros(self.hidden))

    def step(self, state: PolicyState, x_prev, y_prev: float, o_prev: float):
        """One inference step; returns (new state, next query in the box)."""
        h = self.hidden
        inp = np.concatenate([np.asarray(x_prev, float), [y_prev, o_prev], state.h])
        z = self.w @ inp + self.b
        _check_gates(z, h)
        gi = _sigmoid_np(z[:h])
        gf = _sigmoid_np(z[h : 2 * h])
        gc = np.tanh(z[2 * h : 3 * h])
        go = _sigmoid_np(z[3 * h :])
        c = gf * state.c + gi * gc
        hh = go * np.tanh(c)
        u = _sigmoid_np(self.w_out @ hh + self.b_out)
        x = self.space.lower + self.space.width * u
        return PolicyState(hh, c), x


def propose_eval(policy: LstmPolicy, budget: int, objective, seed=None,
                 feed: str = "raw") -> Trajectory:
    """Run the policy as a sequential derivative-free optimizer for `budget`
    queries. The first step uses the dummy inputs (x=0, y=0, o=0); integer
    dimensions are rounded before evaluation while the raw proposal feeds
    the next step. `feed` picks the observation encoding (see feed_value)."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    space = policy.space
    state = policy.initial_state()
    x_prev = np.zeros(space.dim)
    y_fed = 0.0
    o_prev = 0.0
    values: list[float] = []
    traj = Trajectory(dim=space.dim, seed=seed)
    for t in range(1, budget + 1):
        tic = time.perf_counter_ns()
        state, x = policy.step(state, x_prev, y_fed, o_prev)
        x_eval = space.round_integers(x)
        wall = time.perf_counter_ns() - tic
        try:
            y = float(objective(x_eval))
        except Exception as exc:  # noqa: BLE001 - context then re-raise
            raise ObjectiveError(f"objective failed at step {t}: {exc}") from exc
        values.append(y)
        tic = time.perf_counter_ns()
        y_fed = feed_value(y, values, feed)
        wall += time.perf_counter_ns() - tic
        traj.steps.append(
            TrajectoryStep(step=t, x=x, x_eval=x_eval, y=y, o=int(o_prev), wall_ns=wall)
        )
        x_prev = x
        o_prev = 1.0
    return traj


class TapedLstm:
    """The policy's arithmetic on an autodiff tape (training mode).

    Parameters are lifted to contiguous leaf Vars once per tape; each gate
    pre-activation is one fused affine node whose value comes from the same
    numpy matvec inference uses.
    """

    def __init__(self, policy: LstmPolicy, tape: Tape):
        self.policy = policy
        self.tape = tape
        self.hidden = policy.hidden
        flat = policy.flat_parameters()
        self.first_id = len(tape)
        for v in flat:
            tape.leaf(v)
        self.n_params = flat.size

        d = policy.dim
        h = policy.hidden
        width = d + 2 + h
        base = self.first_id
        self._w_start = base
        base += 4 * h * width
        self._b_start = base
        base += 4 * h
        self._wout_ids = [tuple(range(base + r * h, base + (r + 1) * h)) for r in range(d)]
        self._wout_vals = [tuple(row) for row in policy.w_out]
        base += d * h
        self._bout_ids = tuple(range(base, base + d))

    def gradient(self, adjoints: np.ndarray) -> np.ndarray:
        """Slice the flat parameter gradient out of a backward result."""
        return np.asarray(adjoints[self.first_id : self.first_id + self.n_params])

    def initial_state(self):
        zeros_h = self.tape.leaves(np.zeros(self.hidden))
        zeros_c = self.tape.leaves(np.zeros(self.hidden))
        return zeros_h, zeros_c

    def step(self, state_h: list[Var], state_c: list[Var], inp: list[Var]):
        """Returns (h', c', x_next) as Var lists; x_next lies inside the box.

        The gate bank, cell update and hidden output are recorded as tape
        blocks: each scalar stays an addressable node, but values and adjoint
        propagation run vectorised (gradients accumulate into the contiguous
        parameter leaves with one outer product per step).
        """
        h = self.hidden
        policy = self.policy
        tape = self.tape
        d = policy.dim
        h_start = state_h[0].i
        c_start = state_c[0].i
        if state_h[-1].i - h_start != h - 1 or state_c[-1].i - c_start != h - 1:
            raise ValueError("policy state Vars must be contiguous on the tape")
        inp_vals = np.fromiter((v.v for v in inp), float, count=d + 2)
        h_vals = np.fromiter((v.v for v in state_h), float, count=h)
        full_vals = np.concatenate([inp_vals, h_vals])
        z = policy.w @ full_vals + policy.b
        _check_gates(z, h)
        full_idx = np.concatenate([
            np.fromiter((v.i for v in inp), np.int64, count=d + 2),
            np.arange(h_start, h_start + h, dtype=np.int64),
        ])
        w = policy.w
        w_start = self._w_start
        b_start = self._b_start

        def back_gates(adj, acc, _w=w, _vals=full_vals, _idx=full_idx,
                       _ws=w_start, _bs=b_start):
            acc[_ws : _ws + _w.size] += (adj[:, None] * _vals[None, :]).ravel()
            acc[_bs : _bs + adj.size] += adj
            np.add.at(acc, _idx, _w.T @ adj)

        z_start = tape.block("gate_bank", z, back_gates)

        c_vals = np.fromiter((v.v for v in state_c), float, count=h)
        si = _sigmoid_np(z[:h])
        sf = _sigmoid_np(z[h : 2 * h])
        g = np.tanh(z[2 * h : 3 * h])
        so = _sigmoid_np(z[3 * h :])
        c2_vals = sf * c_vals + si * g
        # c' = sigm(z_f) c + sigm(z_i) tanh(z_g)
        p_f = sf * (1.0 - sf) * c_vals
        p_c = sf
        p_i = si * (1.0 - si) * g
        p_g = si * (1.0 - g * g)

        def back_cell(adj, acc, zs=z_start, cs=c_start, n=h,
                      pf=p_f, pc=p_c, pi=p_i, pg=p_g):
            acc[zs + n : zs + 2 * n] += adj * pf
            acc[cs : cs + n] += adj * pc
            acc[zs : zs + n] += adj * pi
            acc[zs + 2 * n : zs + 3 * n] += adj * pg

        c2_start = tape.block("lstm_cell", c2_vals, back_cell)

        tanh_c2 = np.tanh(c2_vals)
        h2_vals = so * tanh_c2
        # h' = sigm(z_o) tanh(c')
        p_o = so * (1.0 - so) * tanh_c2
        p_c2 = so * (1.0 - tanh_c2 * tanh_c2)

        def back_out(adj, acc, zs=z_start, cs=c2_start, n=h, po=p_o, pc2=p_c2):
            acc[zs + 3 * n : zs + 4 * n] += adj * po
            acc[cs : cs + n] += adj * pc2

        h2_start = tape.block("lstm_out", h2_vals, back_out)
        c2_list = c2_vals.tolist()
        h2_list = h2_vals.tolist()
        c2 = [Var(tape, c2_start + k, c2_list[k]) for k in range(h)]
        h2 = [Var(tape, h2_start + k, h2_list[k]) for k in range(h)]

        zo = policy.w_out @ h2_vals + policy.b_out
        if not np.isfinite(zo).all():
            raise NonFiniteError("non-finite pre-activation in output projection")
        u_vec = _sigmoid_np(zo)
        x_vals = policy.space.lower + policy.space.width * u_vec
        h_ids = tuple(range(h2_start, h2_start + h))
        hvalst = tuple(h2_list)
        node = tape.node
        xs = []
        for j in range(d):
            pre = node(
                "affine",
                zo[j],
                self._wout_ids[j] + h_ids + (self._bout_ids[j],),
                hvalst + self._wout_vals[j] + (1.0,),
            )
            # x = lower + width * sigm(pre), one fused squash node
            xs.append(node(
                "box_squash",
                x_vals[j],
                (pre.i,),
                (policy.space.width[j] * u_vec[j] * (1.0 - u_vec[j]),),
            ))
        return h2, c2, xs


# ---------------------------------------------------------------------------
# Checkpoints: one self-describing JSON text document; floats use shortest
# round-trip repr, so loading reproduces inference bit for bit.


def save_checkpoint(
    policy: LstmPolicy, path, kernel: Kernel | None = None, loss: str | None = None,
    feed: str = "raw",
) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "d": policy.dim,
        "hidden": policy.hidden,
        "lower": policy.space.lower.tolist(),
        "upper": policy.space.upper.tolist(),
        "integer_mask": [bool(v) for v in policy.space.integer_mask],
        "kernel": None
        if kernel is None
        else {
            "length_scale": kernel.length_scale,
            "signal_variance": kernel.signal_variance,
            "noise_variance": kernel.noise_variance,
        },
        "loss": loss,
        "feed": feed,
        "tensors": [
            {"name": name, "shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in policy.named_parameters()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path) -> tuple[LstmPolicy, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} document")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    space = SearchSpace(
        np.array(doc["lower"]), np.array(doc["upper"]), np.array(doc["integer_mask"])
    )
    tensors = {
        t["name"]: np.array(t["data"], dtype=float).reshape(t["shape"])
        for t in doc["tensors"]
    }
    policy = LstmPolicy(
        space, doc["hidden"], tensors["w"], tensors["b"], tensors["w_out"], tensors["b_out"]
    )
    meta = {
        "kernel": doc.get("kernel"),
        "loss": doc.get("loss"),
        "feed": doc.get("feed", "raw"),
    }
    return policy, meta
