"""Reverse-mode autodiff on a scalar tape.

Every differentiable quantity in this package is a `Var`: a scalar value
plus a node id on a `Tape`. Recording is eager (local partials are computed
at construction), so a backward pass is a single reverse sweep over the
node list. Besides the usual unary/binary primitives there are two fused
linear forms, `dot` and `wsum`, which keep tapes short for LSTM cells and
GP solves; both are still scalar-valued nodes and differentiate exactly.

All op functions accept plain floats as well and then run untaped, so the
same formula code serves both training (taped) and inference (numeric).
"""

from __future__ import annotations

import math

import numpy as np

_INV_SQRT_PI_2 = 2.0 / math.sqrt(math.pi)  # erf'(x) = (2/sqrt(pi)) exp(-x^2)


class AutodiffError(Exception):
    pass


class DomainError(AutodiffError):
    """Primitive applied outside its domain (log(-1), sqrt(-2), x/0, ...)."""


class NonFiniteError(AutodiffError):
    """A node value or adjoint came out NaN/Inf; carries the op kind."""


class Var:
    __slots__ = ("t", "i", "v")

    def __init__(self, tape: "Tape", index: int, value: float):
        self.t = tape
        self.i = index
        self.v = value

    def __repr__(self):
        return f"Var(#{self.i}, {self.v!r})"

    # Arithmetic sugar; mixed Var/float operands are fine.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)


class Tape:
    """Append-only record of scalar operations.

    Node i stores the ids of its operands (`args[i]`) and the local partial
    derivatives with respect to them (`pars[i]`); topological order is by
    construction. Single-owner while recording; the adjoint array returned
    by `backward` is read-only and safe to share.

    Regular groups of scalar nodes (an LSTM gate bank, for instance) can be
    recorded as a *block*: every member is still an individually addressable
    scalar node, but values and adjoint propagation for the whole group are
    handled with vectorised numpy instead of per-node tuples.
    """

    __slots__ = ("vals", "ops", "args", "pars", "blocks")

    def __init__(self):
        self.vals: list[float] = []
        self.ops: list[str] = []
        self.args: list[tuple] = []
        self.pars: list[tuple] = []
        # (start, end, backward handler); ordered by construction
        self.blocks: list[tuple[int, int, object]] = []

    def __len__(self):
        return len(self.vals)

    def node(self, op: str, value: float, args: tuple, pars: tuple) -> Var:
        if not math.isfinite(value):
            raise NonFiniteError(f"non-finite value {value!r} from op '{op}'")
        i = len(self.vals)
        self.vals.append(value)
        self.ops.append(op)
        self.args.append(args)
        self.pars.append(pars)
        return Var(self, i, value)

    def leaf(self, value: float) -> Var:
        return self.node("leaf", float(value), (), ())

    def leaves(self, values) -> list[Var]:
        return [self.leaf(v) for v in values]

    def block(self, op: str, values: np.ndarray, backward_fn) -> int:
        """Record len(values) scalar nodes propagated as one group.

        `backward_fn(adjoints, acc)` receives the members' adjoint vector and
        the full accumulator and must add each member's contribution to its
        operands. Returns the id of the first member.
        """
        if not np.isfinite(values).all():
            raise NonFiniteError(f"non-finite value in block op '{op}'")
        start = len(self.vals)
        self.vals.extend(values.tolist())
        n = len(values)
        self.ops.extend([op] * n)
        empty = ()
        self.args.extend([empty] * n)
        self.pars.extend([empty] * n)
        self.blocks.append((start, start + n, backward_fn))
        return start

    def record(self, op: str, *operands) -> Var:
        """Record one named primitive; operands may be Vars or floats."""
        try:
            fn = _PRIMITIVES[op]
        except KeyError:
            raise ValueError(f"unknown primitive '{op}'") from None
        for o in operands:
            if isinstance(o, Var) and o.t is not self:
                raise AutodiffError("operand belongs to a different tape")
        out = fn(*operands)
        if not isinstance(out, Var):
            # All-constant operands: still record so the caller gets a Var.
            out = self.leaf(out)
        return out

    def backward(self, root: Var) -> np.ndarray:
        """Adjoints of every node with respect to `root` (d root / d node).

        Nodes not reachable from the root get adjoint 0. The result maps
        node id -> adjoint and is frozen (read-only numpy array).
        """
        if root.t is not self:
            raise AutodiffError("root is not on this tape")
        n = root.i + 1
        if not self.blocks:
            return self._backward_scalar(root, n)
        acc = np.zeros(n)
        acc[root.i] = 1.0
        args = self.args
        pars = self.pars
        blocks = [b for b in self.blocks if b[1] <= n]
        bi = len(blocks) - 1
        i = n - 1
        while i >= 0:
            if bi >= 0 and i == blocks[bi][1] - 1:
                start, end, fn = blocks[bi]
                bi -= 1
                adj = acc[start:end]
                if adj.any():
                    fn(adj, acc)
                i = start - 1
                continue
            a = acc[i]
            if a != 0.0:
                a = float(a)
                for j, p in zip(args[i], pars[i]):
                    acc[j] += a * p
            i -= 1
        return self._finish_backward(acc)

    def _backward_scalar(self, root: Var, n: int) -> np.ndarray:
        acc = [0.0] * n
        acc[root.i] = 1.0
        args = self.args
        pars = self.pars
        for i in range(n - 1, -1, -1):
            a = acc[i]
            if a == 0.0:
                continue
            for j, p in zip(args[i], pars[i]):
                acc[j] += a * p
        return self._finish_backward(np.asarray(acc))

    def _finish_backward(self, out: np.ndarray) -> np.ndarray:
        if not np.isfinite(out).all():
            bad = int(np.flatnonzero(~np.isfinite(out))[0])
            raise NonFiniteError(
                f"non-finite adjoint at node #{bad} (op '{self.ops[bad]}')"
            )
        out.flags.writeable = False
        return out


def detach(x):
    """Same value, no gradient: a fresh leaf (or the float itself)."""
    if isinstance(x, Var):
        return x.t.node("detach", x.v, (), ())
    return x


def value_of(x) -> float:
    return x.v if isinstance(x, Var) else float(x)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.t
    return None


# ---------------------------------------------------------------------------
# Primitives. Each works on Var or float operands; a Var anywhere means the
# result is recorded. Binary constant folding keeps constants off the tape.


def add(a, b):
    t = _tape_of(a, b)
    if t is None:
        return a + b
    if isinstance(a, Var):
        if isinstance(b, Var):
            return t.node("add", a.v + b.v, (a.i, b.i), (1.0, 1.0))
        return t.node("add", a.v + b, (a.i,), (1.0,))
    return t.node("add", a + b.v, (b.i,), (1.0,))


def sub(a, b):
    t = _tape_of(a, b)
    if t is None:
        return a - b
    if isinstance(a, Var):
        if isinstance(b, Var):
            return t.node("sub", a.v - b.v, (a.i, b.i), (1.0, -1.0))
        return t.node("sub", a.v - b, (a.i,), (1.0,))
    return t.node("sub", a - b.v, (b.i,), (-1.0,))


def mul(a, b):
    t = _tape_of(a, b)
    if t is None:
        return a * b
    if isinstance(a, Var):
        if isinstance(b, Var):
            return t.node("mul", a.v * b.v, (a.i, b.i), (b.v, a.v))
        return t.node("mul", a.v * b, (a.i,), (b,))
    return t.node("mul", a * b.v, (b.i,), (a,))


def neg(a):
    if isinstance(a, Var):
        return a.t.node("neg", -a.v, (a.i,), (-1.0,))
    return -a


def div(a, b):
    bv = value_of(b)
    if bv == 0.0:
        raise DomainError("division by zero")
    t = _tape_of(a, b)
    if t is None:
        return a / b
    av = value_of(a)
    val = av / bv
    if isinstance(a, Var):
        if isinstance(b, Var):
            return t.node("div", val, (a.i, b.i), (1.0 / bv, -val / bv))
        return t.node("div", val, (a.i,), (1.0 / bv,))
    return t.node("div", val, (b.i,), (-val / bv,))


def exp(a):
    av = value_of(a)
    try:
        v = math.exp(av)
    except OverflowError:
        raise NonFiniteError(f"non-finite value from op 'exp' at {av!r}") from None
    if isinstance(a, Var):
        return a.t.node("exp", v, (a.i,), (v,))
    return v


def log(a):
    av = value_of(a)
    if av <= 0.0:
        raise DomainError(f"log of non-positive value {av!r}")
    if isinstance(a, Var):
        return a.t.node("log", math.log(av), (a.i,), (1.0 / av,))
    return math.log(av)


def sqrt(a):
    av = value_of(a)
    if av < 0.0:
        raise DomainError(f"sqrt of negative value {av!r}")
    if isinstance(a, Var):
        v = math.sqrt(av)
        if av == 0.0:
            raise DomainError("sqrt at zero has no finite derivative")
        return a.t.node("sqrt", v, (a.i,), (0.5 / v,))
    return math.sqrt(av)


def tanh(a):
    if isinstance(a, Var):
        v = math.tanh(a.v)
        return a.t.node("tanh", v, (a.i,), (1.0 - v * v,))
    return math.tanh(a)


def _sigmoid_f(x: float) -> float:
    # Stable in both tails.
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def sigmoid(a):
    if isinstance(a, Var):
        v = _sigmoid_f(a.v)
        return a.t.node("sigmoid", v, (a.i,), (v * (1.0 - v),))
    return _sigmoid_f(a)


def erf(a):
    """Error function; value via math.erf, derivative (2/sqrt(pi)) e^{-x^2}."""
    if isinstance(a, Var):
        x = a.v
        return a.t.node("erf", math.erf(x), (a.i,), (_INV_SQRT_PI_2 * math.exp(-x * x),))
    return math.erf(a)


def power(a, p):
    """a**p for a constant real exponent p."""
    if isinstance(p, Var):
        raise AutodiffError("exponent must be a constant; use exp(p*log(a))")
    av = value_of(a)
    pf = float(p)
    if av < 0.0 and pf != int(pf):
        raise DomainError(f"pow of negative base {av!r} with non-integer exponent")
    if av == 0.0 and pf < 1.0:
        raise DomainError(f"pow at zero with exponent {pf} has no finite derivative")
    try:
        v = av**pf
    except OverflowError:
        raise NonFiniteError(f"non-finite value from op 'pow' at {av!r}**{pf!r}") from None
    if isinstance(a, Var):
        return a.t.node("pow", v, (a.i,), (pf * av ** (pf - 1.0),))
    return v


def maximum(a, b):
    """max(a, b); at a tie the derivative goes to the first operand."""
    t = _tape_of(a, b)
    av = value_of(a)
    bv = value_of(b)
    if t is None:
        return av if av >= bv else bv
    first = av >= bv
    val = av if first else bv
    if isinstance(a, Var):
        if isinstance(b, Var):
            return t.node("max", val, (a.i, b.i), (1.0, 0.0) if first else (0.0, 1.0))
        return t.node("max", val, (a.i,), (1.0,) if first else (0.0,))
    return t.node("max", val, (b.i,), (0.0,) if first else (1.0,))


def minimum(a, b):
    """min(a, b); at a tie the derivative goes to the first operand."""
    t = _tape_of(a, b)
    av = value_of(a)
    bv = value_of(b)
    if t is None:
        return av if av <= bv else bv
    first = av <= bv
    val = av if first else bv
    if isinstance(a, Var):
        if isinstance(b, Var):
            return t.node("min", val, (a.i, b.i), (1.0, 0.0) if first else (0.0, 1.0))
        return t.node("min", val, (a.i,), (1.0,) if first else (0.0,))
    return t.node("min", val, (b.i,), (0.0,) if first else (1.0,))


def dot(xs, ys):
    """Fused pairwise-product sum over two equal-length Var sequences."""
    if len(xs) != len(ys):
        raise AutodiffError("dot operands differ in length")
    if not xs:
        return 0.0
    if not isinstance(xs[0], Var):
        return float(sum(x * value_of(y) for x, y in zip(xs, ys)))
    t = xs[0].t
    xv = tuple(x.v for x in xs)
    yv = tuple(y.v for y in ys)
    val = float(np.dot(xv, yv))
    args = tuple(x.i for x in xs) + tuple(y.i for y in ys)
    return t.node("dot", val, args, yv + xv)


def wsum(xs, coeffs, const: float = 0.0):
    """const + sum_i coeffs[i]*xs[i] with constant coefficients.

    Plain-float entries are folded into the constant term.
    """
    if len(xs) != len(coeffs):
        raise AutodiffError("wsum operands differ in length")
    t = _tape_of(*xs)
    if t is None:
        return const + float(sum(c * value_of(x) for x, c in zip(xs, coeffs)))
    if all(type(x) is Var for x in xs):
        xv = tuple(x.v for x in xs)
        cs = tuple(float(c) for c in coeffs)
        val = const + float(np.dot(xv, cs))
        return t.node("wsum", val, tuple(x.i for x in xs), cs)
    args, pars, val = [], [], const
    for x, c in zip(xs, coeffs):
        if isinstance(x, Var):
            args.append(x.i)
            pars.append(float(c))
            val += c * x.v
        else:
            val += c * x
    return t.node("wsum", float(val), tuple(args), tuple(pars))


# Compositions used all over the GP code.

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def norm_cdf(z):
    """Standard normal CDF via erf."""
    return mul(add(erf(div(z, _SQRT2)), 1.0), 0.5)


def norm_pdf(z):
    """Standard normal density."""
    return mul(exp(mul(mul(z, z), -0.5)), _INV_SQRT_2PI)


_PRIMITIVES = {
    "add": add,
    "mul": mul,
    "neg": neg,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "sqrt": sqrt,
    "div": div,
    "pow": power,
    "erf": erf,
    "max": maximum,
    "min": minimum,
}
