"""Golden vectors for the codec payload and wire framing."""
from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .codec import Codebook, encode
from .quantizer import LevelSchedule, QuantizedVector
from .simnet import serialize_message

GOLDEN_HUFFMAN = Codebook("huffman", 3, ("00", "01", "1"))


def _cases():
    sch = LevelSchedule([0.0, 0.5, 1.0], version=1)
    qv = QuantizedVector(5.0, [1, 1], [1, 2], version=1)
    elias = Codebook.elias(5)
    return {
        "codec_huffman": encode(qv, GOLDEN_HUFFMAN),
        "codec_zero_elias": encode(QuantizedVector(0.0, [1, 1, 1], [0, 0, 0]), elias),
        "codec_elias_signed": encode(QuantizedVector(1.0, [-1, 1, 1], [2, 0, 3]), elias),
        "wire_huffman_v1": serialize_message(qv, GOLDEN_HUFFMAN, sch),
        "wire_fp32": serialize_message(np.array([1.0, -2.0]), Codebook.passthrough(), None),
    }


def compute() -> dict[str, str]:
    return {k: v.hex() for k, v in _cases().items()}


def load() -> dict[str, str]:
    return json.loads(resources.files("qgenx").joinpath("data/golden.json").read_text())


def verify() -> list[tuple[str, bool, str, str]]:
    """``(name, ok, expected_hex, actual_hex)`` for every stored vector."""
    stored = load()
    actual = compute()
    return [(k, actual.get(k) == v, v, actual.get(k, "")) for k, v in stored.items()]
