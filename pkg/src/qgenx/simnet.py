"""Deterministic synchronous K-worker simulation over an in-process byte bus.

Wire message (big-endian)::

    0x51 | scheme:u8 | schedule version:u16 | table hash:u32 | d:uleb128 | payload

``scheme`` is 0 = Elias omega, 1 = Huffman, 2 = binary32 passthrough.  For the
coded schemes the payload is the codec bitstream; for passthrough it is the
raw vector as ``d`` binary32 values.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .codec import Codebook, CodecError, TruncatedStreamError
from .quantizer import (
    CdfStatistics,
    CoordinateCDF,
    LevelSchedule,
    QuantizedVector,
    expected_variance,
    level_weights,
    optimize_levels,
    quantize,
    reconstruct,
    variance_bound,
)
from .solver import SolverState, Trajectory, extrapolate, step
from .vi import NoisyOracle, TestDomain, make_problem, restricted_gap

MAGIC = 0x51
SCHEME_IDS = {"elias": 0, "huffman": 1, "fp32": 2}
SCHEME_NAMES = {v: k for k, v in SCHEME_IDS.items()}
HEADER_FIXED_BYTES = 8

# phases of one round; each (worker, t, phase) owns an RNG stream
ORACLE_T, QUANT_T, ORACLE_HALF, QUANT_HALF = range(4)


class WireError(CodecError):
    pass


class BadMagicError(WireError):
    pass


class SchemeMismatchError(WireError):
    pass


class VersionMismatchError(WireError):
    pass


class TableHashMismatchError(WireError):
    pass


class RoundAbortedError(RuntimeError):
    """A synchronous round failed on the bus; ``iteration`` names the round."""

    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"round {iteration} aborted: {type(cause).__name__}: {cause}")
        self.iteration = iteration


def write_varint(n: int) -> bytes:
    if n < 0:
        raise ValueError("varint must be nonnegative")
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def read_varint(data: bytes, pos: int) -> tuple[int, int]:
    n = shift = 0
    while True:
        if pos >= len(data):
            raise TruncatedStreamError("truncated varint")
        b = data[pos]
        pos += 1
        n |= (b & 0x7F) << shift
        shift += 7
        if not b & 0x80:
            return n, pos


@dataclass(frozen=True)
class WireMessage:
    scheme: int
    version: int
    table_hash: int
    d: int
    payload: bytes

    def to_bytes(self) -> bytes:
        if not 0 <= self.version < 1 << 16:
            raise ValueError("schedule version does not fit 16 bits")
        return (
            bytes([MAGIC, self.scheme])
            + self.version.to_bytes(2, "big")
            + self.table_hash.to_bytes(4, "big")
            + write_varint(self.d)
            + self.payload
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "WireMessage":
        if len(data) < 1:
            raise TruncatedStreamError("empty message")
        if data[0] != MAGIC:
            raise BadMagicError(f"bad magic byte 0x{data[0]:02x}")
        if len(data) < HEADER_FIXED_BYTES:
            raise TruncatedStreamError("truncated header")
        if data[1] not in SCHEME_NAMES:
            raise SchemeMismatchError(f"unknown scheme id {data[1]}")
        d, pos = read_varint(data, HEADER_FIXED_BYTES)
        return cls(data[1], int.from_bytes(data[2:4], "big"), int.from_bytes(data[4:8], "big"), d, bytes(data[pos:]))

    @property
    def header_bits(self) -> int:
        return 8 * (HEADER_FIXED_BYTES + len(write_varint(self.d)))


def serialize_message(qv, codebook: Codebook, schedule: LevelSchedule | None) -> bytes:
    """Frame a quantized vector (or, for passthrough, a raw vector)."""
    version = schedule.version if schedule is not None else 0
    if codebook.scheme == "fp32":
        v = np.asarray(qv, dtype=np.float64)
        return WireMessage(SCHEME_IDS["fp32"], version, 0, v.size, codec.encode_fp32(v)).to_bytes()
    if schedule is not None and qv.version != schedule.version:
        raise VersionMismatchError("quantized vector does not match the schedule version")
    payload = codec.encode(qv, codebook)
    return WireMessage(SCHEME_IDS[codebook.scheme], version, codebook.table_hash, qv.d, payload).to_bytes()


def parse_message(data: bytes, codebook: Codebook, schedule: LevelSchedule | None):
    msg = WireMessage.from_bytes(data)
    if SCHEME_NAMES[msg.scheme] != codebook.scheme:
        raise SchemeMismatchError(f"message scheme {SCHEME_NAMES[msg.scheme]!r}, receiver expects {codebook.scheme!r}")
    version = schedule.version if schedule is not None else 0
    if msg.version != version % (1 << 16):
        raise VersionMismatchError(f"message schedule version {msg.version}, receiver has {version}")
    if msg.table_hash != codebook.table_hash:
        raise TableHashMismatchError(
            f"table hash 0x{msg.table_hash:08x} does not match local codebook 0x{codebook.table_hash:08x}"
        )
    if codebook.scheme == "fp32":
        return codec.decode_fp32(msg.payload, msg.d)
    return codec.decode(msg.payload, msg.d, codebook, version)


def payload_padding(qv: QuantizedVector, codebook: Codebook) -> int:
    return -codec.encoded_bits(qv, codebook) % 8


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------


@dataclass
class RoundMetrics:
    t: int
    bits_sent: list
    padding_bits: list
    var_empirical: float
    clip_events: int
    schedule_version: int
    eps_q: float
    variance_bound_violations: int = 0
    gap: float | None = None

    @property
    def bits_total(self) -> int:
        return int(sum(self.bits_sent))


def default_checkpoints(T: int) -> list[int]:
    """``10^2, 10^2.5, 10^3, ...`` up to ``T``, always ending at ``T``."""
    cps = []
    k = 2.0
    while round(10**k) <= T:
        cps.append(int(round(10**k)))
        k += 0.5
    if not cps or cps[-1] != T:
        cps.append(T)
    return cps


def build_codebook(scheme: str, schedule: LevelSchedule, cdf: CoordinateCDF | None) -> Codebook:
    if scheme == "fp32":
        return Codebook.passthrough()
    if scheme == "elias":
        return Codebook.elias(schedule.s + 2)
    if scheme == "huffman":
        w = level_weights(cdf if cdf is not None else CoordinateCDF.uniform(), schedule)
        return codec.build_huffman(w / w.sum())
    raise ValueError(f"unknown codec scheme {scheme!r}")


def _stream(seed: int, worker: int, t: int, phase: int) -> np.random.Generator:
    return np.random.default_rng([seed, worker, t, phase])


@dataclass
class Worker:
    worker_id: int
    oracle: NoisyOracle
    window: deque = field(default_factory=lambda: deque(maxlen=64))


class Simulation:
    """Runs the synchronous protocol for one seed.

    All traffic crosses the bus as bytes: every worker's message is serialized,
    then parsed and decoded against the receivers' codebook, which is rebuilt
    identically everywhere from the shared statistics.
    """

    def __init__(self, config, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.operator, base = make_problem(config.problem)
        self.d = self.operator.dimension
        self.workers = [
            Worker(k, NoisyOracle(self.operator, base.noise, base.bound, k), deque(maxlen=config.window))
            for k in range(config.K)
        ]
        self.quantized = config.scheme != "fp32"
        self.schedule = LevelSchedule.uniform(config.s, q=config.q) if self.quantized else None
        self.cdf = None
        self.codebook = build_codebook(config.scheme, self.schedule, None)
        self.eps_q = variance_bound(self.schedule, self.d).eps_q if self.quantized else 0.0
        radius = config.domain_radius
        if radius is None:
            xs = self.operator.solution
            radius = 2.0 * max(1.0, float(np.linalg.norm(xs)) if xs is not None else 1.0)
        self.domain = TestDomain(np.zeros(self.d), radius)
        self.codebook_violations = 0
        self._check_codebook()

    # -- level adaptation ----------------------------------------------------
    def _check_codebook(self):
        cb = self.codebook
        if cb.scheme != "huffman":
            return
        h = codec.entropy_bits(cb.weights)
        length = cb.expected_length()
        if not (h - 1e-9 <= length <= h + 1 + 1e-9):
            self.codebook_violations += 1

    def update_levels(self):
        stats = None
        for w in self.workers:
            local = CdfStatistics.empty(self.config.q, self.config.bins)
            for g in w.window:
                local.add(g)
            stats = local if stats is None else stats + local
        if stats is None or stats.total_weight == 0:
            return
        self.cdf = CoordinateCDF.from_statistics(stats, self.config.cdf)
        self.schedule = optimize_levels(self.cdf, self.config.s, self.config.level_method, q=self.config.q,
                                        init=self.schedule)
        self.codebook = build_codebook(self.config.scheme, self.schedule, self.cdf)
        self.eps_q = variance_bound(self.schedule, self.d).eps_q
        self._check_codebook()

    # -- one broadcast phase -------------------------------------------------
    def broadcast(self, x, t: int, oracle_phase: int, quant_phase: int, acc: dict) -> list[np.ndarray]:
        messages = []
        originals = []
        for w in self.workers:
            g = w.oracle(x, _stream(self.seed, w.worker_id, t, oracle_phase))
            originals.append(g)
            if self.quantized:
                w.window.append(g)
                qv = quantize(g, self.schedule, _stream(self.seed, w.worker_id, t, quant_phase))
                data = serialize_message(qv, self.codebook, self.schedule)
                acc["padding"][w.worker_id] += payload_padding(qv, self.codebook)
                if expected_variance(g, self.schedule) > self.eps_q * float(np.dot(g, g)) * (1 + 1e-9) + 1e-300:
                    acc["violations"] += 1
            else:
                data = serialize_message(g, self.codebook, None)
            acc["bits"][w.worker_id] += 8 * len(data)
            messages.append(data)
        decoded = []
        for data in messages:
            out = parse_message(data, self.codebook, self.schedule)
            decoded.append(reconstruct(out, self.schedule) if self.quantized else out)
        for g, v in zip(originals, decoded):
            acc["var"].append(float(np.sum((v - g) ** 2)))
        return decoded

    def _round(self, state, t, acc):
        if self.config.variant == "DE":
            leading = self.broadcast(state.x, t, ORACLE_T, QUANT_T, acc)
        else:
            leading = state.leading_vectors()
        x_half = extrapolate(state, leading)
        trailing = self.broadcast(x_half, t, ORACLE_HALF, QUANT_HALF, acc)
        return step(state, leading, trailing)

    def run(self):
        cfg = self.config
        state = SolverState.initial(self.d, cfg.K, cfg.variant)
        traj = Trajectory(keep_iterates=cfg.keep_iterates)
        metrics = []
        checkpoints = set(cfg.checkpoints or default_checkpoints(cfg.T))
        updates = set(cfg.update_steps)
        for t in range(1, cfg.T + 1):
            if self.quantized and t in updates:
                self.update_levels()
            acc = {"bits": [0] * cfg.K, "padding": [0] * cfg.K, "var": [], "violations": 0}
            clips_before = sum(w.oracle.clip_events for w in self.workers)
            try:
                state = self._round(state, t, acc)
            except CodecError as exc:
                raise RoundAbortedError(t, exc) from exc
            except (ValueError, FloatingPointError) as exc:
                raise FloatingPointError(f"iteration {t}: {exc}") from exc
            traj.record(state.x_half, sum(acc["bits"]))
            m = RoundMetrics(
                t=t,
                bits_sent=acc["bits"],
                padding_bits=acc["padding"],
                var_empirical=float(np.mean(acc["var"])),
                clip_events=sum(w.oracle.clip_events for w in self.workers) - clips_before,
                schedule_version=self.schedule.version if self.schedule is not None else 0,
                eps_q=self.eps_q,
                variance_bound_violations=acc["violations"],
            )
            if t in checkpoints:
                m.gap = restricted_gap(self.operator, traj.running_average(), self.domain)
                traj.gaps[t] = m.gap
            metrics.append(m)
        self.final_state = state
        return traj, metrics


def run(config, seed: int | None = None):
    """Execute ``config.T`` synchronous rounds; returns ``(Trajectory, [RoundMetrics])``."""
    sim = Simulation(config, config.seeds[0] if seed is None else seed)
    return sim.run()
