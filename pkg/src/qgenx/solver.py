"""Generalized extra-gradient recursion in dual-averaging form.

    X_{t+1/2} = X_t - (gamma_t / K) sum_k V_{k,t}
    Y_{t+1}   = Y_t - (1 / K) sum_k V_{k,t+1/2}
    X_{t+1}   = gamma_{t+1} Y_{t+1}

with ``gamma_t = K (1 + S_t)^{-1/2}`` and ``S_t`` the running sum of
``||V_{k,i} - V_{k,i+1/2}||^2`` over workers and past iterations.

The solver only consumes dual vectors.  Which vectors play the role of
``V_{k,t}`` selects the method:

* ``DA``    - ``V_{k,t} = 0`` (dual averaging)
* ``DE``    - a fresh oracle query at ``X_t`` (dual extrapolation)
* ``OptDA`` - the previous half-step query, ``0`` at ``t = 1`` (optimistic DA)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

VARIANTS = ("DA", "DE", "OptDA")


def adaptive_stepsize(S: float, K: int) -> float:
    if S < 0:
        raise ValueError("accumulator must be nonnegative")
    if K < 1:
        raise ValueError("K must be positive")
    return K / math.sqrt(1.0 + S)


@dataclass(frozen=True)
class SolverState:
    x: np.ndarray
    y: np.ndarray
    x_half: np.ndarray
    prev_half: tuple
    S: float
    gamma: float
    t: int
    variant: str
    K: int

    @classmethod
    def initial(cls, d: int, K: int = 1, variant: str = "DE") -> "SolverState":
        """``Y_1 = 0`` so ``X_1 = 0``; translate problems to move the solution off the origin."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        zero = np.zeros(d)
        return cls(zero, zero, zero, tuple(zero for _ in range(K)), 0.0, adaptive_stepsize(0.0, K), 1, variant, K)

    @property
    def d(self) -> int:
        return self.x.size

    def leading_vectors(self) -> list[np.ndarray]:
        """``V_{k,t}`` the DA/OptDA variants supply without an oracle call."""
        if self.variant == "DA":
            return [np.zeros(self.d) for _ in range(self.K)]
        if self.variant == "OptDA":
            return list(self.prev_half)
        raise ValueError("DE queries the oracle at X_t for its leading vectors")


def _check(vectors, K, d, name):
    if len(vectors) != K:
        raise ValueError(f"{name}: expected {K} worker vectors, got {len(vectors)}")
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.shape != (K, d):
        raise ValueError(f"{name}: expected shape {(K, d)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite dual vectors")
    return arr


def extrapolate(state: SolverState, leading) -> np.ndarray:
    """``X_{t+1/2}`` from the leading vectors ``V_{k,t}``."""
    v = _check(leading, state.K, state.d, "V_t")
    return state.x - (state.gamma / state.K) * v.sum(axis=0)


def step(state: SolverState, leading, trailing) -> SolverState:
    """One full iteration given ``V_{k,t}`` (``leading``) and ``V_{k,t+1/2}`` (``trailing``)."""
    v = _check(leading, state.K, state.d, "V_t")
    w = _check(trailing, state.K, state.d, "V_t+1/2")
    x_half = state.x - (state.gamma / state.K) * v.sum(axis=0)
    y = state.y - w.sum(axis=0) / state.K
    S = state.S + float(np.sum((v - w) ** 2))
    gamma = adaptive_stepsize(S, state.K)
    x = gamma * y
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x_half))):
        raise FloatingPointError(f"non-finite iterate at t={state.t}")
    return replace(state, x=x, y=y, x_half=x_half, prev_half=tuple(w), S=S, gamma=gamma, t=state.t + 1)


@dataclass
class Trajectory:
    """Recorded half-step iterates plus a running ergodic sum."""

    half_steps: list = field(default_factory=list)
    gaps: dict = field(default_factory=dict)
    bits: list = field(default_factory=list)
    keep_iterates: bool = True
    _sum: np.ndarray | None = None
    count: int = 0

    def record(self, x_half: np.ndarray, bits: int = 0) -> None:
        if self.keep_iterates:
            self.half_steps.append(np.array(x_half))
        self._sum = np.array(x_half, dtype=np.float64) if self._sum is None else self._sum + x_half
        self.count += 1
        self.bits.append(int(bits))

    def running_average(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("empty trajectory")
        return self._sum / self.count


def ergodic_average(trajectory) -> np.ndarray:
    """Mean of the recorded ``X_{t+1/2}``; accepts a Trajectory or a sequence of points."""
    pts = trajectory.half_steps if isinstance(trajectory, Trajectory) else list(trajectory)
    if not pts:
        raise ValueError("empty trajectory")
    return np.mean(np.asarray(pts, dtype=np.float64), axis=0)
