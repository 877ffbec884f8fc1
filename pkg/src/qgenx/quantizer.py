"""Random unbiased quantization with adaptive levels.

A vector ``v`` is represented by ``(||v||_q, sign(v), u)`` with normalized
magnitudes ``u_i = |v_i| / ||v||_q`` in ``[0, 1]``.  Each ``u_i`` is randomly
rounded to one of its two neighbouring levels so that the reconstruction is
unbiased.  Levels are re-optimized against a weighted mixture of the empirical
distributions of normalized coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

MIN_LEVEL_GAP = 1e-6


class StaleScheduleError(ValueError):
    """A quantized vector was produced under a different level schedule."""


def lq_norm(v: np.ndarray, q: float) -> float:
    """L^q norm for q in {1, 2, ..., inf}."""
    v = np.asarray(v, dtype=np.float64)
    if math.isinf(q):
        return float(np.max(np.abs(v))) if v.size else 0.0
    if q == 2:
        return math.sqrt(float(v @ v)) if v.ndim == 1 else float(np.linalg.norm(v))
    if q == 1:
        return float(np.abs(v).sum())
    return float(np.sum(np.abs(v) ** q) ** (1.0 / q))


def _check_q(q) -> float:
    q = float(q)
    if not (math.isinf(q) or (q >= 1 and q == int(q))):
        raise ValueError(f"norm order must be a positive integer or inf, got {q}")
    return q


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class LevelSchedule:
    """Quantization levels ``0 = l_0 < l_1 < ... < l_s < l_{s+1} = 1``."""

    levels: np.ndarray
    q: float = 2.0
    version: int = 0

    def __post_init__(self):
        lv = np.array(self.levels, dtype=np.float64)
        if lv.ndim != 1 or lv.size < 3:
            raise ValueError("need at least one interior level (s >= 1)")
        if lv[0] != 0.0 or lv[-1] != 1.0:
            raise ValueError("levels must start at 0 and end at 1")
        if not np.all(np.diff(lv) > 0):
            raise ValueError("levels must be strictly increasing")
        lv.setflags(write=False)
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "q", _check_q(self.q))

    @property
    def s(self) -> int:
        return self.levels.size - 2

    @classmethod
    def uniform(cls, s: int, q: float = 2.0, version: int = 0) -> "LevelSchedule":
        return cls(np.arange(s + 2) / (s + 1), q=q, version=version)

    @classmethod
    def from_interior(cls, interior: Sequence[float], q: float = 2.0, version: int = 0) -> "LevelSchedule":
        return cls(np.concatenate([[0.0], np.asarray(interior, dtype=np.float64), [1.0]]), q=q, version=version)

    def with_levels(self, levels: np.ndarray) -> "LevelSchedule":
        """New schedule with bumped version; schedules are never mutated."""
        return LevelSchedule(levels, q=self.q, version=self.version + 1)


@dataclass(eq=False)
class QuantizedVector:
    """``(norm, signs, level indices)``; index-0 coordinates carry sign +1."""

    norm: float
    signs: np.ndarray
    indices: np.ndarray
    version: int = 0

    def __post_init__(self):
        self.norm = float(self.norm)
        if not math.isfinite(self.norm) or self.norm < 0:
            raise ValueError(f"norm must be finite and nonnegative, got {self.norm}")
        idx = np.asarray(self.indices, dtype=np.int64)
        sg = np.asarray(self.signs, dtype=np.int8)
        if idx.shape != sg.shape or idx.ndim != 1:
            raise ValueError("signs and indices must be 1-d arrays of equal length")
        if idx.size and idx.min() < 0:
            raise ValueError("level indices must be nonnegative")
        if not (np.abs(sg) == 1).all():
            raise ValueError("signs must be +1 or -1")
        if self.norm == 0.0 and idx.any():
            raise ValueError("a zero-norm vector must have all indices 0")
        self.indices = idx
        self.signs = np.where(idx == 0, 1, sg).astype(np.int8)

    @property
    def d(self) -> int:
        return self.indices.size

    def __eq__(self, other):
        if not isinstance(other, QuantizedVector):
            return NotImplemented
        return (
            self.norm == other.norm
            and self.version == other.version
            and np.array_equal(self.signs, other.signs)
            and np.array_equal(self.indices, other.indices)
        )

    def __repr__(self):
        return (
            f"QuantizedVector(norm={self.norm!r}, signs={self.signs.tolist()}, "
            f"indices={self.indices.tolist()}, version={self.version})"
        )


def normalize(v: np.ndarray, q: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Split ``v`` into ``(||v||_q, signs, u)``."""
    v = np.asarray(v, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("input vector has non-finite entries")
    norm = lq_norm(v, q)
    signs = np.where(v < 0, -1, 1).astype(np.int8)
    if norm == 0.0:
        return 0.0, signs, np.zeros_like(v)
    u = np.minimum(np.abs(v) / norm, 1.0)
    return norm, signs, u


def stochastic_round(u: np.ndarray, levels: np.ndarray, draws: np.ndarray) -> np.ndarray:
    """Round each ``u`` to the level below or above; ``draw < rho`` picks the upper one.

    ``draws`` broadcasts against ``u`` so a 2-d array of draws yields many
    independent roundings of the same coordinates.
    """
    levels = np.asarray(levels)
    # u >= 0 = levels[0], so only the top needs clamping (u == 1 rounds from below)
    lower = np.minimum(np.searchsorted(levels, u, side="right") - 1, levels.size - 2)
    lo = levels[lower]
    rho = (u - lo) / (levels[lower + 1] - lo)
    return lower + (draws < rho)


def quantize(v: np.ndarray, schedule: LevelSchedule, seed=None) -> QuantizedVector:
    norm, signs, u = normalize(v, schedule.q)
    if norm == 0.0:
        return QuantizedVector(0.0, np.ones(u.size, dtype=np.int8), np.zeros(u.size, dtype=np.int64), schedule.version)
    draws = _as_rng(seed).random(u.size)
    return QuantizedVector(norm, signs, stochastic_round(u, schedule.levels, draws), schedule.version)


def reconstruct(qv: QuantizedVector, schedule: LevelSchedule) -> np.ndarray:
    if qv.version != schedule.version:
        raise StaleScheduleError(
            f"quantized with schedule version {qv.version}, decoding with version {schedule.version}"
        )
    if qv.indices.size and qv.indices.max() > schedule.s + 1:
        raise ValueError("level index out of range for schedule")
    return qv.norm * qv.signs * schedule.levels[qv.indices]


def sample_reconstructions(v: np.ndarray, schedule: LevelSchedule, n: int, seed=None) -> np.ndarray:
    """``n`` independent draws of ``reconstruct(quantize(v))`` as an ``(n, d)`` array."""
    norm, signs, u = normalize(v, schedule.q)
    if norm == 0.0:
        return np.zeros((n, u.size))
    draws = _as_rng(seed).random((n, u.size))
    return norm * signs * schedule.levels[stochastic_round(u, schedule.levels, draws)]


def coordinate_variance(u: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Per-coordinate rounding variance ``(l_{tau+1} - u)(u - l_tau)``."""
    levels = np.asarray(levels)
    lower = np.minimum(np.searchsorted(levels, u, side="right") - 1, levels.size - 2)
    return (levels[lower + 1] - u) * (u - levels[lower])


def expected_variance(v: np.ndarray, schedule: LevelSchedule) -> float:
    """Exact ``E||Q(v) - v||_2^2``."""
    norm, _, u = normalize(v, schedule.q)
    if norm == 0.0:
        return 0.0
    return norm**2 * float(np.sum(coordinate_variance(u, schedule.levels)))


@dataclass(frozen=True)
class VarianceBoundReport:
    eps_q: float
    level_ratio: float
    d_threshold: float
    regime: str
    p_star: float
    k_p: float


def k_p_constant(p: float) -> float:
    """Constant with ``u(l_1 - u) <= K_p l_1^(2-p) u^p`` on ``[0, l_1]``."""
    if not 0 <= p < 1:
        raise ValueError("p must lie in [0, 1)")
    return (1.0 / (2.0 - p)) * ((1.0 - p) / (2.0 - p)) ** (1.0 - p)


def variance_bound(schedule: LevelSchedule, d: int) -> VarianceBoundReport:
    """Worst-case multiplicative variance ``eps_Q`` for dimension ``d``."""
    if d < 1:
        raise ValueError("dimension must be positive")
    lv = schedule.levels
    l1 = lv[1]
    ratio = float(np.max(lv[2:] / lv[1:-1]))
    m = 2.0 if math.isinf(schedule.q) else min(schedule.q, 2.0)
    d_th = (2.0 / l1) ** m
    small = 0.25 * l1**2 * d ** (2.0 / m)
    large = l1 * d ** (1.0 / m) - 1.0
    if d < d_th:
        tail = small
    elif d > d_th:
        tail = large
    else:
        tail = max(small, large)
    eps = (ratio + 1.0 / ratio) / 4.0 + tail - 0.5
    delta = l1 * d ** (1.0 / m)
    p_star = (delta - 2.0) / (delta - 1.0) if delta >= 2.0 else 0.0
    return VarianceBoundReport(
        eps_q=float(max(eps, 0.0)),
        level_ratio=ratio,
        d_threshold=float(d_th),
        regime="small-d" if d <= d_th else "large-d",
        p_star=float(p_star),
        k_p=float(k_p_constant(p_star)),
    )


# --------------------------------------------------------------------------
# Distribution of normalized coordinates
# --------------------------------------------------------------------------


@dataclass
class CdfStatistics:
    """Mergeable sufficient statistics of normalized coordinates.

    Every sample contributes with weight ``||g||_q^2``; a coordinate carries
    ``1/d`` of its sample's weight.  Statistics from several workers add up to
    the statistics of the pooled samples.
    """

    q: float
    bins: int
    bin_mass: np.ndarray
    bin_m1: np.ndarray
    log_mass: float = 0.0
    log_m1: float = 0.0
    log_m2: float = 0.0
    zero_mass: float = 0.0
    norms: list = field(default_factory=list)

    @classmethod
    def empty(cls, q: float, bins: int) -> "CdfStatistics":
        return cls(q=q, bins=bins, bin_mass=np.zeros(bins), bin_m1=np.zeros(bins))

    def add(self, g: np.ndarray) -> None:
        norm, _, u = normalize(g, self.q)
        self.norms.append(norm)
        if norm == 0.0:
            return
        w = norm**2 / u.size
        b = np.minimum((u * self.bins).astype(np.int64), self.bins - 1)
        self.bin_mass += w * np.bincount(b, minlength=self.bins)
        self.bin_m1 += w * np.bincount(b, weights=u, minlength=self.bins)
        pos = u > 0
        lu = np.log(u[pos])
        self.log_mass += w * pos.sum()
        self.log_m1 += w * lu.sum()
        self.log_m2 += w * (lu**2).sum()
        self.zero_mass += w * (~pos).sum()

    def __add__(self, other: "CdfStatistics") -> "CdfStatistics":
        if (self.q, self.bins) != (other.q, other.bins):
            raise ValueError("cannot merge statistics with different q or bin count")
        return CdfStatistics(
            q=self.q,
            bins=self.bins,
            bin_mass=self.bin_mass + other.bin_mass,
            bin_m1=self.bin_m1 + other.bin_m1,
            log_mass=self.log_mass + other.log_mass,
            log_m1=self.log_m1 + other.log_m1,
            log_m2=self.log_m2 + other.log_m2,
            zero_mass=self.zero_mass + other.zero_mass,
            norms=self.norms + other.norms,
        )

    @property
    def total_weight(self) -> float:
        return float(sum(n * n for n in self.norms))


class CoordinateCDF:
    """Mixture CDF of normalized coordinates on ``[0, 1]``.

    Either a set of weighted atoms (the histogram representation keeps one atom
    per nonempty bin, placed at the bin's mean) or a parametric family.  All
    level computations only need the partial moments
    ``int_a^b u^k dF`` for ``k = 0, 1, 2``.
    """

    def __init__(self, representation, *, atoms=None, weights=None, family=None, params=None,
                 lambdas=None, sample_norms=None):
        self.representation = representation
        self.family = family
        self.params = dict(params or {})
        self.lambdas = np.asarray(lambdas if lambdas is not None else [1.0], dtype=np.float64)
        self.sample_norms = np.asarray(sample_norms if sample_norms is not None else [], dtype=np.float64)
        if representation == "histogram":
            x = np.asarray(atoms, dtype=np.float64)
            w = np.asarray(weights, dtype=np.float64)
            keep = w > 0
            x, w = x[keep], w[keep]
            if x.size == 0:
                raise ValueError("empty distribution")
            if np.any(x < 0) or np.any(x > 1):
                raise ValueError("atoms must lie in [0, 1]")
            order = np.argsort(x, kind="stable")
            self.atoms = x[order]
            self.weights = w[order] / w.sum()
            self._c0 = np.concatenate([[0.0], np.cumsum(self.weights)])
            self._c1 = np.concatenate([[0.0], np.cumsum(self.weights * self.atoms)])
            self._c2 = np.concatenate([[0.0], np.cumsum(self.weights * self.atoms**2)])
        elif representation == "parametric":
            if family not in ("uniform", "lognormal"):
                raise ValueError(f"unknown parametric family {family!r}")
        else:
            raise ValueError(f"unknown representation {representation!r}")

    # constructors -----------------------------------------------------------
    @classmethod
    def from_atoms(cls, atoms, weights=None) -> "CoordinateCDF":
        atoms = np.atleast_1d(np.asarray(atoms, dtype=np.float64))
        if weights is None:
            weights = np.ones_like(atoms)
        return cls("histogram", atoms=atoms, weights=weights)

    @classmethod
    def uniform(cls) -> "CoordinateCDF":
        return cls("parametric", family="uniform")

    @classmethod
    def lognormal(cls, mu: float, sigma: float, zero_mass: float = 0.0) -> "CoordinateCDF":
        """Log-normal truncated to ``(0, 1]`` plus an optional atom at 0."""
        if sigma < 0 or not 0 <= zero_mass < 1:
            raise ValueError("invalid log-normal parameters")
        return cls("parametric", family="lognormal", params={"mu": mu, "sigma": sigma, "zero_mass": zero_mass})

    @classmethod
    def from_statistics(cls, stats: CdfStatistics, representation: str = "histogram") -> "CoordinateCDF":
        total = stats.total_weight
        if total <= 0:
            raise ValueError("all samples are zero vectors; cannot estimate a distribution")
        norms = np.asarray(stats.norms)
        lambdas = norms**2 / total
        if representation == "histogram":
            nz = stats.bin_mass > 0
            means = np.divide(stats.bin_m1, stats.bin_mass, out=np.zeros(stats.bins), where=nz)
            return cls("histogram", atoms=means[nz], weights=stats.bin_mass[nz],
                       lambdas=lambdas, sample_norms=norms)
        if representation == "parametric":
            mass = stats.log_mass + stats.zero_mass
            if stats.log_mass > 0:
                mu = stats.log_m1 / stats.log_mass
                var = max(stats.log_m2 / stats.log_mass - mu * mu, 0.0)
            else:
                mu, var = 0.0, 0.0
            cdf = cls.lognormal(mu, math.sqrt(var), stats.zero_mass / mass)
            cdf.lambdas, cdf.sample_norms = lambdas, norms
            return cdf
        raise ValueError(f"unknown representation {representation!r}")

    # moments ----------------------------------------------------------------
    def partial_moments(self, a: float, b: float, closed: bool = False) -> tuple[float, float, float]:
        """``(int u^0, int u^1, int u^2) dF`` over ``[a, b)``, or ``[a, b]`` if ``closed``."""
        if b < a:
            return 0.0, 0.0, 0.0
        if self.representation == "histogram":
            i = np.searchsorted(self.atoms, a, side="left")
            j = np.searchsorted(self.atoms, b, side="right" if closed else "left")
            return (self._c0[j] - self._c0[i], self._c1[j] - self._c1[i], self._c2[j] - self._c2[i])
        if self.family == "uniform":
            a, b = max(a, 0.0), min(b, 1.0)
            if b <= a:
                return 0.0, 0.0, 0.0
            return b - a, (b * b - a * a) / 2.0, (b**3 - a**3) / 3.0
        return self._lognormal_moments(a, b, closed)

    def _lognormal_moments(self, a, b, closed):
        mu, sigma, z0 = self.params["mu"], self.params["sigma"], self.params["zero_mass"]
        out = [0.0, 0.0, 0.0]
        if a <= 0.0 and (0.0 < b or (closed and b >= 0.0)):
            out[0] += z0
        lo, hi = max(a, 0.0), min(b, 1.0)
        if sigma < 1e-12:
            x = min(math.exp(mu), 1.0)
            if lo <= x < hi or (closed and x == hi):
                for k in range(3):
                    out[k] += (1 - z0) * x**k
            return tuple(out)
        if hi <= lo:
            return tuple(out)
        norm = ndtr((0.0 - mu) / sigma)
        la = -np.inf if lo <= 0 else math.log(lo)
        lb = math.log(hi)
        for k in range(3):
            shift = mu + k * sigma * sigma
            mass = ndtr((lb - shift) / sigma) - ndtr((la - shift) / sigma)
            out[k] += (1 - z0) * math.exp(k * mu + 0.5 * k * k * sigma * sigma) * mass / norm
        return tuple(out)

    def cdf(self, u: float) -> float:
        """``F(u) = P(U <= u)``."""
        return self.partial_moments(0.0, u, closed=True)[0]

    def sample(self, n: int, seed=None) -> np.ndarray:
        """Draw ``n`` normalized coordinates from this distribution."""
        rng = _as_rng(seed)
        if self.representation == "histogram":
            return rng.choice(self.atoms, size=n, p=self.weights)
        if self.family == "uniform":
            return rng.random(n)
        mu, sigma, z0 = self.params["mu"], self.params["sigma"], self.params["zero_mass"]
        # inverse-CDF sampling of the truncated normal in log space
        from scipy.special import ndtri

        top = ndtr((0.0 - mu) / sigma) if sigma > 0 else 1.0
        x = np.exp(mu + sigma * ndtri(rng.random(n) * top)) if sigma > 0 else np.full(n, min(math.exp(mu), 1.0))
        return np.where(rng.random(n) < z0, 0.0, np.minimum(x, 1.0))


def estimate_cdf(samples, q: float = 2.0, bins: int = 1024, representation: str = "histogram") -> CoordinateCDF:
    """Mixture of per-sample coordinate distributions weighted by ``||g_j||_q^2``."""
    stats = CdfStatistics.empty(_check_q(q), bins)
    for g in samples:
        stats.add(g)
    return CoordinateCDF.from_statistics(stats, representation)


# --------------------------------------------------------------------------
# Level optimization
# --------------------------------------------------------------------------


def _interval_moments(cdf: CoordinateCDF, levels: np.ndarray):
    s1 = levels.size - 1
    return [cdf.partial_moments(levels[j], levels[j + 1], closed=(j == s1 - 1)) for j in range(s1)]


def quantization_objective(cdf: CoordinateCDF, levels) -> float:
    """``sum_j int_{l_j}^{l_{j+1}} (l_{j+1} - u)(u - l_j) dF(u)``."""
    levels = np.asarray(levels, dtype=np.float64)
    total = 0.0
    for j, (m0, m1, m2) in enumerate(_interval_moments(cdf, levels)):
        a, b = levels[j], levels[j + 1]
        total += -m2 + (a + b) * m1 - a * b * m0
    return total


def _level_gradient(cdf: CoordinateCDF, a: float, x: float, b: float) -> float:
    """Derivative of the objective w.r.t. a level at ``x`` between neighbours ``a`` and ``b``."""
    m0l, m1l, _ = cdf.partial_moments(a, x)
    m0r, m1r, _ = cdf.partial_moments(x, b, closed=(b == 1.0))
    return (m1l - a * m0l) - (b * m0r - m1r)


def clamp_levels(levels: np.ndarray, min_gap: float = MIN_LEVEL_GAP) -> np.ndarray:
    """Enforce ``l_{j+1} - l_j >= min_gap`` with endpoints pinned at 0 and 1."""
    lv = np.array(levels, dtype=np.float64)
    n = lv.size
    lv[0], lv[-1] = 0.0, 1.0
    for j in range(1, n - 1):
        lv[j] = min(max(lv[j], lv[j - 1] + min_gap), 1.0 - (n - 1 - j) * min_gap)
    for j in range(n - 2, 0, -1):
        lv[j] = min(lv[j], lv[j + 1] - min_gap)
    return lv


def _bisect_level(cdf, a, b, tol=1e-10):
    lo, hi = a, b
    if _level_gradient(cdf, a, lo, b) >= 0:
        return lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _level_gradient(cdf, a, mid, b) >= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def optimize_levels(cdf: CoordinateCDF, s: int, method: str = "coordinate", q: float = 2.0,
                    init: LevelSchedule | None = None, version: int | None = None) -> LevelSchedule:
    """Levels minimizing the expected rounding variance under ``cdf``.

    ``coordinate`` moves one level at a time to the root of its first-order
    condition; ``gradient`` runs projected gradient steps with step halving.
    The result never has a larger objective than the starting levels.
    """
    if s < 1:
        raise ValueError("s must be at least 1")
    start = init.levels if init is not None else LevelSchedule.uniform(s).levels
    if start.size != s + 2:
        raise ValueError("initial schedule has the wrong number of levels")
    if version is None:
        version = init.version + 1 if init is not None else 0
    start_obj = quantization_objective(cdf, start)
    lv = start.copy()
    obj = start_obj

    if method == "coordinate":
        for _ in range(100):
            prev = obj
            for j in range(1, s + 1):
                cand = lv.copy()
                cand[j] = _bisect_level(cdf, lv[j - 1], lv[j + 1])
                if cand[j] <= lv[j - 1] or cand[j] >= lv[j + 1]:
                    continue
                c_obj = quantization_objective(cdf, cand)
                if c_obj < obj:
                    lv, obj = cand, c_obj
            if prev - obj < 1e-8:
                break
    elif method == "gradient":
        step = 1.0
        for _ in range(500):
            grad = np.zeros_like(lv)
            for j in range(1, s + 1):
                grad[j] = _level_gradient(cdf, lv[j - 1], lv[j], lv[j + 1])
            if not np.any(grad):
                break
            while step > 1e-12:
                cand = clamp_levels(np.sort(np.clip(lv - step * grad, 0.0, 1.0)))
                c_obj = quantization_objective(cdf, cand)
                if c_obj < obj:
                    lv, obj = cand, c_obj
                    step *= 1.5
                    break
                step *= 0.5
    else:
        raise ValueError(f"unknown method {method!r}")

    final = clamp_levels(lv)
    if quantization_objective(cdf, final) > start_obj:
        final = clamp_levels(start)
    return LevelSchedule(final, q=q, version=version)


def level_weights(cdf: CoordinateCDF, schedule: LevelSchedule) -> np.ndarray:
    """Probability that a coordinate drawn from ``cdf`` is rounded to each level."""
    lv = schedule.levels
    p = np.zeros(lv.size)
    for j, (m0, m1, _) in enumerate(_interval_moments(cdf, lv)):
        a, b = lv[j], lv[j + 1]
        up = (m1 - a * m0) / (b - a)
        p[j + 1] += up
        p[j] += m0 - up
    return np.clip(p, 0.0, None)
