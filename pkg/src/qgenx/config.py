"""Run configuration and its TOML schema.

Example::

    [problem]
    type = "bilinear-skew"     # bilinear-skew | diagonal-monotone | rcd | random-player
    d = 2
    solution = [1.0, 0.5]
    bound = 100.0              # almost-sure oracle bound M (clipping)

    [noise]
    kind = "absolute"          # none | absolute | relative
    sigma = 0.5

    [run]
    K = 1
    T = 10000
    variant = "DE"             # DA | DE | OptDA
    seeds = [0, 1, 2]
    checkpoints = [100, 316, 1000]   # optional, default 10^2, 10^2.5, ...
    domain_radius = 2.0              # optional test-domain radius D

    [quantization]
    scheme = "huffman"         # elias | huffman | fp32
    s = 15
    q = 2                      # 1, 2 or "inf"
    update_steps = [100, 1000] # iterations at which levels are re-optimized
    window = 64
    bins = 1024
    cdf = "histogram"          # histogram | parametric
    method = "coordinate"      # coordinate | gradient

    [output]
    path = "results/run.csv"

    [tradeoff]                 # optional bound-derived projection
    epsilon = 0.01
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .solver import VARIANTS


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class RunConfig:
    problem: dict
    K: int = 1
    T: int = 100
    variant: str = "DE"
    scheme: str = "huffman"
    s: int = 15
    q: float = 2.0
    update_steps: tuple = ()
    checkpoints: tuple | None = None
    seeds: tuple = tuple(range(10))
    domain_radius: float | None = None
    output: str | None = None
    window: int = 64
    bins: int = 1024
    cdf: str = "histogram"
    level_method: str = "coordinate"
    keep_iterates: bool = False
    tradeoff_epsilon: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(f"{name}: {msg}")

        need(isinstance(self.problem, dict) and "type" in self.problem, "problem.type", "missing problem type")
        need(isinstance(self.K, int) and self.K >= 1, "run.K", "must be a positive integer")
        need(isinstance(self.T, int) and self.T >= 1, "run.T", "must be a positive integer")
        need(self.variant in VARIANTS, "run.variant", f"must be one of {VARIANTS}")
        need(self.scheme in ("elias", "huffman", "fp32"), "quantization.scheme", "must be elias, huffman or fp32")
        need(isinstance(self.s, int) and self.s >= 1, "quantization.s", "must be a positive integer")
        need(math.isinf(self.q) or (self.q >= 1 and self.q == int(self.q)), "quantization.q",
             "must be a positive integer or 'inf'")
        need(self.window >= 1, "quantization.window", "must be positive")
        need(self.bins >= 1, "quantization.bins", "must be positive")
        need(self.cdf in ("histogram", "parametric"), "quantization.cdf", "must be histogram or parametric")
        need(self.level_method in ("coordinate", "gradient"), "quantization.method", "must be coordinate or gradient")
        need(len(self.seeds) >= 1, "run.seeds", "need at least one seed")
        need(all(isinstance(s, int) and s >= 0 for s in self.seeds), "run.seeds", "must be nonnegative integers")
        if self.checkpoints is not None:
            need(all(1 <= c <= self.T for c in self.checkpoints), "run.checkpoints", "must lie in [1, T]")
        need(all(1 <= u <= self.T for u in self.update_steps), "quantization.update_steps", "must lie in [1, T]")
        if self.domain_radius is not None:
            need(self.domain_radius > 0, "run.domain_radius", "must be positive")
        noise = self.problem.get("noise", {"kind": "none"})
        need(noise.get("kind", "none") in ("none", "absolute", "relative"), "noise.kind",
             "must be none, absolute or relative")


def _parse_q(value) -> float:
    if isinstance(value, str):
        if value.lower() in ("inf", "infinity"):
            return math.inf
        raise ConfigError(f"quantization.q: cannot parse {value!r}")
    return float(value)


def config_from_dict(doc: dict, base_dir: Path | None = None) -> RunConfig:
    known = {"problem", "noise", "run", "quantization", "output", "tradeoff"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown section")
    if "problem" not in doc:
        raise ConfigError("problem: missing section")
    problem = dict(doc["problem"])
    if "noise" in doc:
        problem["noise"] = dict(doc["noise"])
    run = doc.get("run", {})
    qz = doc.get("quantization", {})
    out = doc.get("output", {})
    try:
        output = out.get("path")
        if output is not None and base_dir is not None and not Path(output).is_absolute():
            output = str(base_dir / output)
        return RunConfig(
            problem=problem,
            K=run.get("K", 1),
            T=run.get("T", 100),
            variant=run.get("variant", "DE"),
            scheme=qz.get("scheme", "huffman"),
            s=qz.get("s", 15),
            q=_parse_q(qz.get("q", 2)),
            update_steps=tuple(qz.get("update_steps", ())),
            checkpoints=tuple(run["checkpoints"]) if "checkpoints" in run else None,
            seeds=tuple(run.get("seeds", range(10))),
            domain_radius=run.get("domain_radius"),
            output=output,
            window=qz.get("window", 64),
            bins=qz.get("bins", 1024),
            cdf=qz.get("cdf", "histogram"),
            level_method=qz.get("method", "coordinate"),
            tradeoff_epsilon=doc.get("tradeoff", {}).get("epsilon"),
        )
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc, base_dir=path.parent)
