"""Lossless coding of quantized vectors.

Payload layout: the norm as big-endian IEEE-754 binary32, then for every
coordinate the codeword of its level index followed by one sign bit
(``0`` = positive) when the index is nonzero.  The stream is zero-padded to a
byte boundary.
"""
from __future__ import annotations

import heapq
import math
import struct
import zlib
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .quantizer import QuantizedVector

NORM_BITS = 32
HUFFMAN_ZERO_WEIGHT = 1e-12


class CodecError(ValueError):
    """Base class for malformed-stream errors."""


class TruncatedStreamError(CodecError):
    pass


class UnknownCodewordError(CodecError):
    pass


class PaddingError(CodecError):
    """Nonzero padding bits or trailing bytes after the payload."""


class BitWriter:
    """Accumulates bits MSB-first; ``getvalue`` pads with zeros to whole bytes."""

    def __init__(self):
        self._chunks: list[str] = []
        self.nbits = 0

    def write(self, bits: str) -> None:
        self._chunks.append(bits)
        self.nbits += len(bits)

    def write_uint(self, value: int, width: int) -> None:
        self.write(format(value, f"0{width}b") if width else "")

    @property
    def padding(self) -> int:
        return -self.nbits % 8

    def getvalue(self) -> bytes:
        bits = "".join(self._chunks) + "0" * self.padding
        if not bits:
            return b""
        return int(bits, 2).to_bytes(len(bits) // 8, "big")


class BitReader:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self._bits = "".join(format(b, "08b") for b in self.data)
        self.pos = 0

    @property
    def remaining(self) -> int:
        return len(self._bits) - self.pos

    def read(self, n: int) -> str:
        if self.pos + n > len(self._bits):
            raise TruncatedStreamError(f"needed {n} bits at offset {self.pos}, stream has {len(self._bits)}")
        out = self._bits[self.pos:self.pos + n]
        self.pos += n
        return out

    def read_bit(self) -> str:
        if self.pos >= len(self._bits):
            raise TruncatedStreamError(f"stream ended at bit {self.pos}")
        b = self._bits[self.pos]
        self.pos += 1
        return b

    def read_uint(self, width: int) -> int:
        return int(self.read(width), 2) if width else 0

    def finish(self) -> int:
        """Check that only zero padding (less than a byte) remains; return its length."""
        rest = self._bits[self.pos:]
        if len(rest) >= 8:
            raise PaddingError(f"{len(rest)} unread bits after payload")
        if "1" in rest:
            raise PaddingError("nonzero padding bits")
        self.pos = len(self._bits)
        return len(rest)


# --------------------------------------------------------------------------
# Elias omega
# --------------------------------------------------------------------------


def elias_omega_encode(n: int) -> str:
    if n < 1:
        raise ValueError("Elias omega codes positive integers only")
    code = "0"
    while n > 1:
        b = format(n, "b")
        code = b + code
        n = len(b) - 1
    return code


def elias_omega_read(reader: BitReader) -> int:
    n = 1
    while reader.read_bit() == "1":
        n = int("1" + reader.read(n), 2)
    return n


def elias_omega_decode(bits: str) -> int:
    """Decode a single codeword given as a string of '0'/'1' characters."""
    n, pos = 1, 0
    while True:
        if pos >= len(bits):
            raise TruncatedStreamError("truncated Elias omega codeword")
        if bits[pos] == "0":
            pos += 1
            break
        if pos + 1 + n > len(bits):
            raise TruncatedStreamError("truncated Elias omega codeword")
        n, pos = int("1" + bits[pos + 1:pos + 1 + n], 2), pos + 1 + n
    if pos != len(bits):
        raise CodecError("trailing bits after Elias omega codeword")
    return n


# --------------------------------------------------------------------------
# Codebooks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Codebook:
    """Prefix code over level indices ``0..n_symbols-1``.

    ``scheme`` is ``"elias"`` (index ``i`` coded as omega(``i + 1``)),
    ``"huffman"`` or ``"fp32"`` (raw passthrough, no symbol code).
    """

    scheme: str
    n_symbols: int
    codewords: tuple = ()
    weights: tuple = ()

    def __post_init__(self):
        if self.scheme not in ("elias", "huffman", "fp32"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "elias" and not self.codewords:
            object.__setattr__(self, "codewords", tuple(elias_omega_encode(i + 1) for i in range(self.n_symbols)))
        if self.scheme != "fp32" and len(self.codewords) != self.n_symbols:
            raise ValueError("codeword table does not cover all symbols")
        object.__setattr__(self, "_lookup", {c: i for i, c in enumerate(self.codewords)})
        object.__setattr__(self, "_lengths", np.array([len(c) for c in self.codewords], dtype=np.int64))
        object.__setattr__(self, "_maxlen", max((len(c) for c in self.codewords), default=0))

    @classmethod
    def elias(cls, n_symbols: int) -> "Codebook":
        return cls("elias", n_symbols)

    @classmethod
    def passthrough(cls) -> "Codebook":
        return cls("fp32", 0)

    @property
    def lengths(self) -> np.ndarray:
        return self._lengths.copy()

    @property
    def table_hash(self) -> int:
        """CRC-32 of the scheme name and codeword table; 0 for passthrough."""
        if self.scheme == "fp32":
            return 0
        return zlib.crc32(f"{self.scheme}|{','.join(self.codewords)}".encode("ascii"))

    def expected_length(self, weights=None) -> float:
        w = np.asarray(weights if weights is not None else self.weights, dtype=np.float64)
        return float(np.dot(w, self.lengths))

    def is_prefix_free(self) -> bool:
        words = sorted(self.codewords)
        return all(not b.startswith(a) for a, b in zip(words, words[1:]))

    def read_symbol(self, reader: BitReader) -> int:
        if self.scheme == "elias":
            n = elias_omega_read(reader)
            if n > self.n_symbols:
                raise UnknownCodewordError(f"decoded level index {n - 1} outside alphabet of {self.n_symbols}")
            return n - 1
        word = ""
        while len(word) < self._maxlen:
            word += reader.read_bit()
            sym = self._lookup.get(word)
            if sym is not None:
                return sym
        raise UnknownCodewordError(f"bits {word!r} match no codeword")


def build_huffman(weights: Sequence[float]) -> Codebook:
    """Optimal prefix code; merge ties go to the lower symbol index first.

    The first node popped in a merge becomes the ``0`` branch.  Zero weights
    are replaced by a tiny positive weight so every symbol gets a codeword.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size < 2:
        raise ValueError("Huffman coding needs at least 2 symbols")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative and sum to 1")
    heap = [(max(x, HUFFMAN_ZERO_WEIGHT), i, (i,)) for i, x in enumerate(w)]
    heapq.heapify(heap)
    codes = [""] * w.size
    while len(heap) > 1:
        w0, k0, syms0 = heapq.heappop(heap)
        w1, k1, syms1 = heapq.heappop(heap)
        for sym in syms0:
            codes[sym] = "0" + codes[sym]
        for sym in syms1:
            codes[sym] = "1" + codes[sym]
        heapq.heappush(heap, (w0 + w1, min(k0, k1), syms0 + syms1))
    return Codebook("huffman", w.size, tuple(codes), tuple(float(x) for x in w))


def entropy_bits(weights) -> float:
    p = np.asarray(weights, dtype=np.float64)
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


# --------------------------------------------------------------------------
# Vector payloads
# --------------------------------------------------------------------------


def _norm_bits(norm: float) -> str:
    try:
        packed = struct.pack(">f", norm)
    except OverflowError as exc:
        raise CodecError(f"norm {norm} does not fit binary32") from exc
    return format(int.from_bytes(packed, "big"), "032b")


def write_vector(writer: BitWriter, qv: QuantizedVector, codebook: Codebook) -> None:
    if codebook.scheme == "fp32":
        raise ValueError("passthrough codebooks carry raw vectors, not quantized ones")
    if qv.d and int(qv.indices.max()) >= codebook.n_symbols:
        raise ValueError(f"level index {int(qv.indices.max())} outside codebook of {codebook.n_symbols} symbols")
    writer.write(_norm_bits(qv.norm))
    cw = codebook.codewords
    signs = qv.signs
    writer.write("".join(
        cw[i] if i == 0 else cw[i] + ("1" if signs[k] < 0 else "0")
        for k, i in enumerate(qv.indices.tolist())
    ))


def read_vector(reader: BitReader, d: int, codebook: Codebook, version: int = 0) -> QuantizedVector:
    norm = struct.unpack(">f", reader.read_uint(NORM_BITS).to_bytes(4, "big"))[0]
    if not math.isfinite(norm) or norm < 0:
        raise CodecError(f"decoded invalid norm {norm}")
    indices = np.zeros(d, dtype=np.int64)
    signs = np.ones(d, dtype=np.int8)
    for k in range(d):
        sym = codebook.read_symbol(reader)
        indices[k] = sym
        if sym != 0 and reader.read_bit() == "1":
            signs[k] = -1
    if norm == 0.0 and np.any(indices):
        raise CodecError("zero norm with nonzero level indices")
    return QuantizedVector(norm, signs, indices, version)


def encode(qv: QuantizedVector, codebook: Codebook) -> bytes:
    w = BitWriter()
    write_vector(w, qv, codebook)
    return w.getvalue()


def encoded_bits(qv: QuantizedVector, codebook: Codebook) -> int:
    """Exact payload length in bits before padding."""
    lengths = codebook._lengths
    nz = qv.indices != 0
    return NORM_BITS + int(lengths[qv.indices].sum()) + int(nz.sum())


def decode(data: bytes, d: int, codebook: Codebook, version: int = 0) -> QuantizedVector:
    reader = BitReader(data)
    qv = read_vector(reader, d, codebook, version)
    reader.finish()
    return qv


def encode_fp32(v: np.ndarray) -> bytes:
    return np.asarray(v, dtype=">f4").tobytes()


def decode_fp32(data: bytes, d: int) -> np.ndarray:
    if len(data) < 4 * d:
        raise TruncatedStreamError(f"need {4 * d} bytes for {d} binary32 values, got {len(data)}")
    if len(data) > 4 * d:
        raise PaddingError(f"{len(data) - 4 * d} trailing bytes after binary32 payload")
    return np.frombuffer(data, dtype=">f4").astype(np.float64)


class CodeLengthStats(NamedTuple):
    entropy: float
    bound: float
    empirical_mean: float | None


def code_length_stats(weights, d: int, messages: Sequence[bytes] | None = None) -> CodeLengthStats:
    """Entropy of the level distribution, the expected-length bound
    ``32 + (1 - p_0) d + (H + 1) d`` and, when given, the mean measured
    message length in bits.
    """
    p = np.asarray(weights, dtype=np.float64)
    h = entropy_bits(p)
    bound = NORM_BITS + (1.0 - p[0]) * d + (h + 1.0) * d
    mean = None
    if messages:
        mean = float(np.mean([8 * len(m) for m in messages]))
    return CodeLengthStats(h, bound, mean)
