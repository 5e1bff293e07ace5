"""Squared-exponential GP prior: incremental function sampling, posterior
mean/variance, and analytic expected improvement.

Training functions are drawn lazily: each query point is sampled from the
Gaussian conditional given everything sampled so far (chain rule), which
costs O(t^2) per step via a rank-one Cholesky append and O(T^3) per episode.
The same formulas run on plain floats (inference, baselines) or on autodiff
Vars (meta-training), in which case only the current query point carries
gradient -- past queries and values are held as detached constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var, value_of

# Escalation schedule for the diagonal stabiliser, tried in order.
JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)

# Below this posterior standard deviation EI switches to its exact limit.
EI_S_FLOOR = 1e-10


class CholeskyError(Exception):
    """Gram matrix not positive definite after the whole jitter ladder."""


@dataclass(frozen=True)
class Kernel:
    """Squared-exponential kernel k(x,x') = sv * exp(-|x-x'|^2 / (2 ls^2)).

    `noise_variance` is the observation-noise term added to the Gram
    diagonal only; `kernel_eval` itself is noiseless.
    """

    length_scale: float = 0.3
    signal_variance: float = 1.0
    noise_variance: float = 1e-6

    def __post_init__(self):
        if not self.length_scale > 0:
            raise ValueError(f"length_scale must be positive, got {self.length_scale}")
        if not self.signal_variance > 0:
            raise ValueError(f"signal_variance must be positive, got {self.signal_variance}")
        if self.noise_variance < 0:
            raise ValueError(f"noise_variance must be non-negative, got {self.noise_variance}")


def kernel_eval(kernel: Kernel, x, y):
    """Evaluate the kernel between two points (sequences of Var or float)."""
    if len(x) != len(y):
        raise ValueError(f"dimension mismatch: {len(x)} vs {len(y)}")
    scale = -0.5 / (kernel.length_scale * kernel.length_scale)
    if isinstance(x[0], Var) or (len(y) and isinstance(y[0], Var)):
        diffs = [ad.sub(a, b) for a, b in zip(x, y)]
        ssq = ad.dot(diffs, diffs)
        return ad.mul(ad.exp(ad.mul(ssq, scale)), kernel.signal_variance)
    ssq = 0.0
    for a, b in zip(x, y):
        d = a - b
        ssq += d * d
    return kernel.signal_variance * math.exp(scale * ssq)


def _nearest_pair(points):
    best = (math.inf, 0, 1)
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            d = math.dist(points[i], points[j])
            if d < best[0]:
                best = (d, i, j)
    return best


class GramChol:
    """Lower-triangular factor of K(X,X) + (noise+jitter) I, grown row by row.

    Rows are plain-float lists so triangular solves stay allocation-light in
    the per-candidate loops of the GP-EI baseline.
    """

    def __init__(self, kernel: Kernel):
        self.kernel = kernel
        self.points: list[tuple[float, ...]] = []
        self.rows: list[list[float]] = []
        self.jitter = JITTER_LADDER[0]

    def __len__(self):
        return len(self.points)

    def _diag(self) -> float:
        return self.kernel.signal_variance + self.kernel.noise_variance + self.jitter

    def append(self, point) -> None:
        pt = tuple(float(c) for c in point)
        k = [kernel_eval(self.kernel, pt, q) for q in self.points]
        w = self.solve_lower(k)
        d = self._diag() - sum(wi * wi for wi in w)
        if d > 0.0:
            self.points.append(pt)
            self.rows.append(w + [math.sqrt(d)])
            return
        # Escalate jitter and refactor from scratch until the ladder runs out.
        points = self.points + [pt]
        for jitter in JITTER_LADDER:
            if jitter <= self.jitter:
                continue
            if self._refactor(points, jitter):
                return
        dist, i, j = _nearest_pair(points)
        raise CholeskyError(
            f"Gram matrix not positive definite after jitter {JITTER_LADDER[-1]:g}; "
            f"nearest points #{i}={points[i]} and #{j}={points[j]} (distance {dist:.3e})"
        )

    def _refactor(self, points, jitter) -> bool:
        n = len(points)
        gram = np.empty((n, n))
        for i in range(n):
            for j in range(i + 1):
                gram[i, j] = gram[j, i] = kernel_eval(self.kernel, points[i], points[j])
        gram[np.diag_indices(n)] += self.kernel.noise_variance + jitter
        try:
            lower = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            return False
        self.jitter = jitter
        self.points = list(points)
        self.rows = [list(lower[i, : i + 1]) for i in range(n)]
        return True

    def solve_lower(self, b: list[float]) -> list[float]:
        """Forward substitution L v = b on plain floats."""
        v = []
        for i, row in enumerate(self.rows[: len(b)]):
            s = b[i]
            for j in range(i):
                s -= row[j] * v[j]
            v.append(s / row[i])
        return v

    def solve_upper(self, b: list[float]) -> list[float]:
        """Back substitution L^T v = b on plain floats."""
        n = len(b)
        v = [0.0] * n
        for i in range(n - 1, -1, -1):
            s = b[i]
            for j in range(i + 1, n):
                s -= self.rows[j][i] * v[j]
            v[i] = s / self.rows[i][i]
        return v

    def gram(self) -> np.ndarray:
        """Recompute K + (noise+jitter) I densely (consistency checks)."""
        n = len(self.points)
        g = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                g[i, j] = kernel_eval(self.kernel, self.points[i], self.points[j])
        g[np.diag_indices(n)] += self.kernel.noise_variance + self.jitter
        return g

    def lower(self) -> np.ndarray:
        n = len(self.rows)
        out = np.zeros((n, n))
        for i, row in enumerate(self.rows):
            out[i, : i + 1] = row
        return out


@dataclass
class Posterior:
    """GP posterior of the latent function at one point; fields may be Vars."""

    mean: object
    variance: object


class PosteriorCore:
    """Shared conditional-moment math over a GramChol.

    alpha = G^{-1} y is refreshed on append; `moments(x)` works on float or
    Var coordinates and returns (mean, quadratic form k^T G^{-1} k).
    """

    def __init__(self, kernel: Kernel):
        self.kernel = kernel
        self.chol = GramChol(kernel)
        self.values: list[float] = []
        self.alpha: list[float] = []

    def add(self, point, value: float) -> None:
        self.chol.append(point)
        self.values.append(float(value))
        self.alpha = self.chol.solve_upper(self.chol.solve_lower(list(self.values)))

    def moments(self, x):
        if not self.values:
            return 0.0, 0.0
        taped = isinstance(x[0], Var)
        k = [kernel_eval(self.kernel, x, q) for q in self.chol.points]
        if not taped:
            mean = sum(a * ki for a, ki in zip(self.alpha, k))
            v = self.chol.solve_lower(k)
            return mean, sum(vi * vi for vi in v)
        mean = ad.wsum(k, self.alpha)
        v: list[Var] = []
        for i, row in enumerate(self.chol.rows):
            inv = 1.0 / row[i]
            coeffs = [inv] + [-row[j] * inv for j in range(i)]
            v.append(ad.wsum([k[i]] + v[:i], coeffs))
        return mean, ad.dot(v, v)


class GpSampleFunction:
    """A lazily materialised draw from the GP prior.

    Each new query extends a consistent joint realisation; query/value pairs
    are memoised so the object behaves as one fixed function no matter who
    queries it or in which order. With zero observation noise, re-querying a
    stored point returns the stored value exactly.
    """

    def __init__(self, kernel: Kernel, dim: int, seed):
        self.kernel = kernel
        self.dim = dim
        self._core = PosteriorCore(kernel)
        self._rng = np.random.default_rng(seed)

    @property
    def queries(self):
        return self._core.chol.points

    @property
    def values(self):
        return self._core.values

    @property
    def chol(self):
        return self._core.chol

    def _find_exact(self, pt):
        for i, q in enumerate(self.queries):
            if q == pt:
                return i
        return None

    def sample_next(self, x, z=None):
        """Sample f at x given everything sampled so far and memoise it.

        x may be a float sequence or a list of Vars (training mode; gradient
        flows to x only, history is treated as constant). z overrides the
        function's own normal stream, for equivalence tests.
        """
        _, y = self.posterior_then_sample(x, z)
        return y

    def posterior_then_sample(self, x, z=None):
        """Latent posterior at x given the data so far, then the draw at x.

        The posterior is the pre-observation one (used by the EI training
        loss); the sample shares its conditional moments.
        """
        if len(x) != self.dim:
            raise ValueError(f"point has dimension {len(x)}, function has {self.dim}")
        taped = isinstance(x[0], Var)
        pt = tuple(value_of(c) for c in x)
        if self.kernel.noise_variance == 0.0 and not taped:
            hit = self._find_exact(pt)
            if hit is not None:
                mean, quad = self._core.moments(x)
                post = Posterior(mean, max(self.kernel.signal_variance - quad, 0.0))
                return post, self.values[hit]
        if z is None:
            z = float(self._rng.standard_normal())
        mean, quad = self._core.moments(x)
        post = Posterior(mean, ad.maximum(ad.sub(self.kernel.signal_variance, quad), 0.0))
        total = self.kernel.signal_variance + self.kernel.noise_variance
        s2 = ad.maximum(ad.sub(total, quad), 1e-18)
        y = ad.add(mean, ad.mul(ad.sqrt(s2), z))
        if taped and not isinstance(y, Var):
            # First query: prior moments carry no x dependence, but callers
            # still thread y through the tape.
            y = x[0].t.leaf(y)
        self._core.add(pt, value_of(y))
        return post, y

    def __call__(self, x) -> float:
        """Numeric objective interface (memoised draw at x)."""
        return float(value_of(self.sample_next([float(c) for c in x])))


class TapedHistoryGpSample:
    """Incremental GP sampling with the full history on the tape.

    Unlike GpSampleFunction's training mode, the Cholesky rows and stored
    values here are Vars, so gradients flow through every past query and
    value inside the conditional moments. O(T^3) tape nodes per episode;
    enabled by the detach_history=False training flag.
    """

    def __init__(self, kernel: Kernel, dim: int, seed):
        self.kernel = kernel
        self.dim = dim
        self._rng = np.random.default_rng(seed)
        self.queries: list[list[Var]] = []
        self.rows: list[list[Var]] = []   # lower-triangular factor, Vars
        self.solved: list[Var] = []       # L^{-1} y, extended per append
        self.jitter = JITTER_LADDER[0]

    def posterior_then_sample(self, x: list[Var], z=None):
        if len(x) != self.dim:
            raise ValueError(f"point has dimension {len(x)}, function has {self.dim}")
        if z is None:
            z = float(self._rng.standard_normal())
        kern = self.kernel
        k = [kernel_eval(kern, x, q) for q in self.queries]
        w: list[Var] = []
        for i, row in enumerate(self.rows):
            num = ad.sub(k[i], ad.dot(row[:i], w[:i])) if i else k[i]
            w.append(ad.div(num, row[i]))
        mean = ad.dot(w, self.solved) if w else 0.0
        quad = ad.dot(w, w) if w else 0.0
        post = Posterior(mean, ad.maximum(ad.sub(kern.signal_variance, quad), 0.0))
        total = kern.signal_variance + kern.noise_variance
        s2 = ad.maximum(ad.sub(total, quad), 1e-18)
        y = ad.add(mean, ad.mul(ad.sqrt(s2), z))
        if not isinstance(y, Var):
            y = x[0].t.leaf(y)

        diag2 = ad.sub(total + self.jitter, quad)
        if value_of(diag2) <= 0.0:
            raise CholeskyError(
                f"taped Gram not positive definite at query {len(self.queries)}"
            )
        diag = ad.sqrt(diag2)
        u = ad.div(ad.sub(y, mean) if w else y, diag)
        self.queries.append(list(x))
        self.rows.append(w + [diag])
        self.solved.append(u)
        return post, y

    def sample_next(self, x, z=None):
        return self.posterior_then_sample(x, z)[1]


def posterior_at(kernel: Kernel, data, x) -> Posterior:
    """Standard GP regression posterior at x given (queries, values).

    Observation noise enters through the Gram diagonal; the variance
    returned is that of the latent function (no noise term added back).
    """
    queries, values = data
    core = PosteriorCore(kernel)
    for q, v in zip(queries, values):
        core.add(q, v)
    return posterior_from_core(core, x)


def posterior_from_core(core: PosteriorCore, x) -> Posterior:
    mean, quad = core.moments(x)
    var = ad.maximum(ad.sub(core.kernel.signal_variance, quad), 0.0)
    return Posterior(mean, var)


def expected_improvement(posterior: Posterior, best):
    """EI = s*(g*Phi(g) + phi(g)), g = (best - mean)/s, minimisation form.

    Falls back to the exact degenerate limit max(best - mean, 0) when the
    posterior standard deviation drops below EI_S_FLOOR.
    """
    s2 = posterior.variance
    mean = posterior.mean
    if value_of(s2) <= EI_S_FLOOR * EI_S_FLOOR:
        return ad.maximum(ad.sub(best, mean), 0.0)
    s = ad.sqrt(s2)
    g = ad.div(ad.sub(best, mean), s)
    raw = ad.mul(s, ad.add(ad.mul(g, ad.norm_cdf(g)), ad.norm_pdf(g)))
    return ad.maximum(raw, 0.0)
