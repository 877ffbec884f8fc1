"""Monotone operators, stochastic oracles and the restricted gap."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

KINDS = ("affine-skew", "affine-general", "diagonal-strongly-monotone", "custom")


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class Operator:
    """Monotone map ``A: R^d -> R^d``.

    Affine operators ``A(x) = M x + b`` keep ``matrix``/``offset`` so the gap
    can be maximized exactly.
    """

    dimension: int
    apply: Callable[[np.ndarray], np.ndarray]
    kind: str = "custom"
    cocoercivity: float | None = None
    solution: np.ndarray | None = None
    matrix: np.ndarray | None = None
    offset: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.dimension < 1:
            raise ValueError("dimension must be positive")

    @classmethod
    def affine(cls, matrix, offset=None, kind="affine-general", cocoercivity=None, solution=None) -> "Operator":
        M = np.array(matrix, dtype=np.float64)
        b = np.zeros(M.shape[0]) if offset is None else np.array(offset, dtype=np.float64)
        M.setflags(write=False)
        b.setflags(write=False)
        return cls(M.shape[0], lambda x: M @ x + b, kind, cocoercivity,
                   None if solution is None else np.asarray(solution, dtype=np.float64), M, b)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dimension,):
            raise ValueError(f"expected a point of dimension {self.dimension}, got shape {x.shape}")
        out = np.asarray(self.apply(x), dtype=np.float64)
        if not np.isfinite(out).all():
            raise ValueError("operator returned non-finite values")
        return out


def check_monotone(op: Operator, pairs: int = 1000, seed=0, radius: float = 1.0) -> dict:
    """Sample pairs in a ball and report the worst monotonicity/co-coercivity slack."""
    rng = _as_rng(seed)
    d = op.dimension
    center = op.solution if op.solution is not None else np.zeros(d)
    worst_mono = math.inf
    worst_coco = math.inf
    worst_vi = math.inf
    for _ in range(pairs):
        x, y = (center + radius * _ball_point(rng, d) for _ in range(2))
        ax, ay = op(x), op(y)
        inner = float(np.dot(ax - ay, x - y))
        worst_mono = min(worst_mono, inner)
        if op.cocoercivity is not None:
            worst_coco = min(worst_coco, inner - op.cocoercivity * float(np.dot(ax - ay, ax - ay)))
        if op.solution is not None:
            worst_vi = min(worst_vi, float(np.dot(op(op.solution), x - op.solution)))
    return {"monotone": worst_mono, "cocoercive": worst_coco, "solution": worst_vi}


def _ball_point(rng, d):
    z = rng.standard_normal(d)
    return z / np.linalg.norm(z) * rng.random() ** (1.0 / d)


# --------------------------------------------------------------------------
# Noise models
# --------------------------------------------------------------------------


class NoNoise:
    kind = "none"

    def sample(self, ax, x, rng):
        return ax


@dataclass(frozen=True)
class AbsoluteNoise:
    """Gaussian noise with ``E||U||^2 = sigma^2``."""

    sigma: float
    kind = "absolute"

    def sample(self, ax, x, rng):
        if self.sigma == 0:
            return ax
        return ax + self.sigma / math.sqrt(ax.size) * rng.standard_normal(ax.size)


@dataclass(frozen=True)
class RelativeNoise:
    """Gaussian noise with ``E||U||^2 = c ||A(x)||^2``; vanishes where ``A(x) = 0``."""

    c: float
    kind = "relative"

    def sample(self, ax, x, rng):
        scale = math.sqrt(self.c) * float(np.linalg.norm(ax)) / math.sqrt(ax.size)
        if scale == 0:
            return ax
        return ax + scale * rng.standard_normal(ax.size)


class CoordinateSampling:
    """Random coordinate descent: ``d * A_i(x) e_i`` for a uniform ``i``."""

    kind = "relative"

    def sample(self, ax, x, rng, coordinate=None):
        i = int(rng.integers(ax.size)) if coordinate is None else coordinate
        g = np.zeros_like(ax)
        g[i] = ax.size * ax[i]
        return g


@dataclass(frozen=True)
class PlayerSampling:
    """Random player updating: one player's block scaled by ``1/p_i``."""

    blocks: tuple
    probabilities: tuple
    kind = "relative"

    def sample(self, ax, x, rng, player=None):
        i = int(rng.choice(len(self.blocks), p=self.probabilities)) if player is None else player
        g = np.zeros_like(ax)
        lo, hi = self.blocks[i]
        g[lo:hi] = ax[lo:hi] / self.probabilities[i]
        return g


@dataclass
class NoisyOracle:
    """``g(x; w) = A(x) + U(x; w)`` clipped to norm ``bound``.

    Clipping events are counted in ``clip_events``; the counter is the only
    mutable state and each caller should own its RNG stream.
    """

    operator: Operator
    noise: object = field(default_factory=NoNoise)
    bound: float = math.inf
    stream_id: int = 0
    clip_events: int = 0

    def __post_init__(self):
        if not self.bound > 0:
            raise ValueError("almost-sure bound M must be positive")

    def __call__(self, x, seed=None) -> np.ndarray:
        return evaluate_oracle(self, x, seed)


def evaluate_oracle(oracle: NoisyOracle, x, seed=None) -> np.ndarray:
    ax = oracle.operator(x)
    g = oracle.noise.sample(ax, np.asarray(x, dtype=np.float64), _as_rng(seed))
    if not np.isfinite(g).all():
        raise ValueError("oracle produced non-finite values")
    n = math.sqrt(float(g @ g))
    if n > oracle.bound:
        oracle.clip_events += 1
        g = g * (oracle.bound / n)
    return g


# --------------------------------------------------------------------------
# Restricted gap
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TestDomain:
    """Euclidean ball; with ``center = X_0`` its ``radius**2`` is ``D^2``."""

    __test__ = False

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=np.float64))
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ValueError("test domain radius must be positive and finite")
        if not np.all(np.isfinite(c)):
            raise ValueError("test domain center must be finite")
        object.__setattr__(self, "center", c)

    @property
    def diameter_sq(self) -> float:
        return self.radius**2

    def project(self, x):
        diff = x - self.center
        n = np.linalg.norm(diff)
        return x if n <= self.radius else self.center + diff * (self.radius / n)

    def contains(self, x, tol=1e-12) -> bool:
        return float(np.linalg.norm(np.asarray(x) - self.center)) <= self.radius * (1 + tol)


def _gap_objective(op, x_hat, x):
    return float(np.dot(op(x), x_hat - x))


def _skew_gap(op: Operator, x_hat, dom: TestDomain) -> float:
    # <Mx + b, x_hat - x> = <x, M^T x_hat - b> + <b, x_hat> when M is skew
    M, b = op.matrix, op.offset
    w = M.T @ x_hat - b
    return float(np.dot(dom.center, w) + dom.radius * np.linalg.norm(w) + np.dot(b, x_hat))


def _affine_gap(op: Operator, x_hat, dom: TestDomain) -> float:
    """Maximize the concave quadratic ``<Mx + b, x_hat - x>`` over the ball.

    Writing ``x = c + y`` this is ``min_y y^T H y - h^T y`` s.t. ``||y|| <= D``
    with ``H`` the symmetric part of ``M``; solved through the eigenbasis of
    ``H`` and a scalar root find on the multiplier.
    """
    M, b, c, D = op.matrix, op.offset, dom.center, dom.radius
    H = 0.5 * (M + M.T)
    g = M.T @ x_hat - b
    h = g - 2.0 * H @ c
    lam, Q = np.linalg.eigh(H)
    if lam.min() < -1e-10 * max(1.0, abs(lam).max()):
        raise ValueError("affine operator is not monotone")
    lam = np.maximum(lam, 0.0)
    hh = Q.T @ h
    tol = 1e-12 * max(1.0, lam.max())
    null = lam <= tol
    y = None
    if not np.any(np.abs(hh[null]) > 1e-12 * max(1.0, np.linalg.norm(hh))):
        yy = np.where(null, 0.0, hh / (2.0 * np.where(null, 1.0, lam)))
        if np.linalg.norm(yy) <= D:
            y = Q @ yy
    if y is None:
        def excess(mu):
            return np.linalg.norm(hh / (2.0 * (lam + mu))) - D

        hi = np.linalg.norm(hh) / (2.0 * D) + 1e-300
        lo = hi * 1e-16
        while excess(lo) < 0 and lo > 1e-300:
            lo *= 1e-4
        mu = brentq(excess, lo, hi, xtol=1e-15, rtol=1e-15) if excess(lo) > 0 else lo
        y = Q @ (hh / (2.0 * (lam + mu)))
        y *= D / max(np.linalg.norm(y), D)
    return _gap_objective(op, x_hat, c + y)


def _pga_gap(op: Operator, x_hat, dom: TestDomain, starts=16, steps=500, seed=0) -> float:
    """Multi-start projected gradient ascent with finite-difference Jacobians."""
    rng = _as_rng(seed)
    d = op.dimension
    eps = 1e-6 * max(1.0, dom.radius)

    def grad(x):
        ax = op(x)
        r = x_hat - x
        jt = np.empty(d)
        for i in range(d):
            e = np.zeros(d)
            e[i] = eps
            jt[i] = np.dot((op(x + e) - op(x - e)) / (2 * eps), r)
        return jt - ax

    best = -math.inf
    for k in range(starts):
        x = dom.center.copy() if k == 0 else dom.center + dom.radius * _ball_point(rng, d)
        fx = _gap_objective(op, x_hat, x)
        step = 0.1 * dom.radius
        for _ in range(steps):
            gx = grad(x)
            gn = np.linalg.norm(gx)
            if gn == 0 or step < 1e-14 * dom.radius:
                break
            cand = dom.project(x + step * gx / gn)
            fc = _gap_objective(op, x_hat, cand)
            if fc > fx:
                x, fx = cand, fc
                step *= 1.2
            else:
                step *= 0.5
        best = max(best, fx)
    return best


def gap_with_method(op: Operator, candidate, domain: TestDomain) -> tuple[float, str]:
    """Restricted gap ``sup_{x in C} <A(x), x_hat - x>`` and the method used."""
    x_hat = np.asarray(candidate, dtype=np.float64)
    if x_hat.shape != (op.dimension,):
        raise ValueError(f"candidate has shape {x_hat.shape}, operator dimension is {op.dimension}")
    if domain.center.shape != (op.dimension,):
        raise ValueError("test domain dimension does not match operator")
    if op.matrix is not None and op.kind == "affine-skew":
        return _skew_gap(op, x_hat, domain), "exact-linear"
    if op.matrix is not None:
        return _affine_gap(op, x_hat, domain), "exact-quadratic"
    return _pga_gap(op, x_hat, domain), "pga-16"


def restricted_gap(op: Operator, candidate, domain: TestDomain) -> float:
    return gap_with_method(op, candidate, domain)[0]


# --------------------------------------------------------------------------
# Problem suite
# --------------------------------------------------------------------------


def bilinear_skew(d: int, seed=0, solution=None, scale: float = 1.0) -> Operator:
    """``A(x) = M (x - x*)`` with ``M`` a random skew-symmetric matrix of spectral norm ``scale``.

    ``d = 2`` gives the rotation ``A(x, y) = (y, -x)`` (shifted by ``x*``).
    """
    if d < 2 or d % 2:
        raise ValueError("skew-bilinear problems need an even dimension >= 2")
    if d == 2:
        M = np.array([[0.0, 1.0], [-1.0, 0.0]])
    else:
        G = _as_rng(seed).standard_normal((d, d))
        M = G - G.T
        M *= scale / np.linalg.norm(M, 2)
    xs = np.zeros(d) if solution is None else np.asarray(solution, dtype=np.float64)
    return Operator.affine(M, -M @ xs, kind="affine-skew", solution=xs)


def diagonal_monotone(eigenvalues: Sequence[float], solution=None) -> Operator:
    """``A(x) = diag(lam) (x - x*)``; co-coercive with ``beta = 1 / max(lam)``."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if np.any(lam < 0):
        raise ValueError("diagonal problem needs nonnegative eigenvalues to be monotone")
    xs = np.zeros(lam.size) if solution is None else np.asarray(solution, dtype=np.float64)
    beta = 1.0 / lam.max() if lam.max() > 0 else None
    return Operator.affine(np.diag(lam), -lam * xs, kind="diagonal-strongly-monotone" if lam.min() > 0 else "affine-general",
                           cocoercivity=beta, solution=xs)


def quadratic_gradient(H, b=None) -> Operator:
    """Gradient of ``f(x) = 1/2 x^T H x - b^T x`` for symmetric PSD ``H``."""
    H = np.asarray(H, dtype=np.float64)
    if not np.allclose(H, H.T):
        raise ValueError("quadratic form must be symmetric")
    ev = np.linalg.eigvalsh(H)
    if ev.min() < -1e-12:
        raise ValueError("quadratic form must be positive semidefinite (convex)")
    b = np.zeros(H.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    xs = np.linalg.lstsq(H, b, rcond=None)[0]
    return Operator.affine(H, -b, kind="affine-general", cocoercivity=1.0 / ev.max() if ev.max() > 0 else None,
                           solution=xs)


def make_problem(spec: dict) -> tuple[Operator, NoisyOracle]:
    """Build an operator and oracle from a problem spec mapping.

    Recognized ``type`` values: ``bilinear-skew``, ``diagonal-monotone``,
    ``rcd`` and ``random-player``.  ``noise`` is ``{"kind": "absolute", "sigma": ..}``,
    ``{"kind": "relative", "c": ..}`` or ``{"kind": "none"}``; the last two
    problem types carry their own sampling noise.
    """
    spec = dict(spec)
    kind = spec.get("type")
    d = spec.get("d")
    solution = spec.get("solution")
    bound = float(spec.get("bound", math.inf))
    if kind == "bilinear-skew":
        op = bilinear_skew(int(d), seed=spec.get("matrix_seed", 0), solution=solution, scale=spec.get("scale", 1.0))
    elif kind == "diagonal-monotone":
        if "eigenvalues" in spec:
            lam = spec["eigenvalues"]
        else:
            lo, hi = spec.get("eigenvalue_range", (1.0, 1.0))
            if lo < 0:
                raise ValueError("diagonal-monotone eigenvalue range must be nonnegative")
            lam = np.linspace(lo, hi, int(d))
        op = diagonal_monotone(lam, solution=solution)
    elif kind == "rcd":
        H = spec.get("hessian")
        H = np.eye(int(d)) if H is None else np.asarray(H, dtype=np.float64)
        op = quadratic_gradient(H, spec.get("linear"))
        return op, NoisyOracle(op, CoordinateSampling(), bound, spec.get("stream_id", 0))
    elif kind == "random-player":
        dims = [int(x) for x in spec["player_dims"]]
        probs = np.asarray(spec.get("probabilities", [1.0 / len(dims)] * len(dims)), dtype=np.float64)
        if np.any(probs <= 0) or abs(probs.sum() - 1) > 1e-9 or probs.size != len(dims):
            raise ValueError("player probabilities must be positive and sum to 1")
        edges = np.concatenate([[0], np.cumsum(dims)])
        blocks = tuple((int(edges[i]), int(edges[i + 1])) for i in range(len(dims)))
        n = int(edges[-1])
        H = spec.get("hessian")
        H = np.eye(n) if H is None else np.asarray(H, dtype=np.float64)
        op = quadratic_gradient(H, spec.get("linear"))
        noise = PlayerSampling(blocks, tuple(float(p) for p in probs))
        return op, NoisyOracle(op, noise, bound, spec.get("stream_id", 0))
    else:
        raise ValueError(f"unknown problem type {kind!r}")
    return op, NoisyOracle(op, make_noise(spec.get("noise", {"kind": "none"})), bound, spec.get("stream_id", 0))


def make_noise(spec: dict):
    kind = spec.get("kind", "none")
    if kind == "none":
        return NoNoise()
    if kind == "absolute":
        sigma = float(spec["sigma"])
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        return AbsoluteNoise(sigma)
    if kind == "relative":
        c = float(spec["c"])
        if c < 0:
            raise ValueError("relative noise constant must be nonnegative")
        return RelativeNoise(c)
    raise ValueError(f"unknown noise kind {kind!r}")
