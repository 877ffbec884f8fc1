"""Quantized generalized extra-gradient for monotone variational inequalities."""
from .codec import Codebook, build_huffman, code_length_stats, decode, elias_omega_decode, elias_omega_encode, encode
from .quantizer import (
    CoordinateCDF,
    LevelSchedule,
    QuantizedVector,
    estimate_cdf,
    expected_variance,
    level_weights,
    optimize_levels,
    quantize,
    reconstruct,
    variance_bound,
)
from .solver import SolverState, Trajectory, adaptive_stepsize, ergodic_average, step
from .vi import NoisyOracle, Operator, TestDomain, evaluate_oracle, make_problem, restricted_gap

__version__ = "0.1.0"
