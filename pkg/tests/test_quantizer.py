import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qgenx.quantizer import (
    CdfStatistics,
    CoordinateCDF,
    LevelSchedule,
    QuantizedVector,
    StaleScheduleError,
    estimate_cdf,
    expected_variance,
    k_p_constant,
    level_weights,
    optimize_levels,
    quantization_objective,
    quantize,
    reconstruct,
    sample_reconstructions,
    stochastic_round,
    variance_bound,
)

HALF = LevelSchedule([0.0, 0.5, 1.0])


def enumerate_outcomes(v, schedule):
    """All 2^d rounding outcomes of ``v`` with their probabilities."""
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v) if schedule.q == 2 else np.abs(v).max() if math.isinf(schedule.q) else np.abs(v).sum()
    u = np.abs(v) / norm
    lv = schedule.levels
    per_coord = []
    for ui in u:
        j = max(k for k in range(len(lv) - 1) if lv[k] <= ui)
        j = min(j, len(lv) - 2)
        rho = (ui - lv[j]) / (lv[j + 1] - lv[j])
        per_coord.append([(lv[j], 1 - rho), (lv[j + 1], rho)])
    for combo in itertools.product(*per_coord):
        p = math.prod(c[1] for c in combo)
        yield p, norm * np.sign(v) * np.array([c[0] for c in combo])


# --- schedules ----------------------------------------------------------------

def test_schedule_validation():
    with pytest.raises(ValueError):
        LevelSchedule([0.0, 0.6, 0.5, 1.0])
    with pytest.raises(ValueError):
        LevelSchedule([0.1, 0.5, 1.0])
    with pytest.raises(ValueError):
        LevelSchedule([0.0, 0.5, 0.9])
    assert LevelSchedule.uniform(3).levels.tolist() == [0, 0.25, 0.5, 0.75, 1.0]
    assert HALF.with_levels([0, 0.4, 1]).version == HALF.version + 1


# --- quantize / reconstruct ----------------------------------------------------

def test_zero_vector_consumes_no_randomness():
    rng = np.random.default_rng(3)
    before = rng.bit_generator.state
    qv = quantize(np.zeros(2), HALF, rng)
    assert qv.norm == 0 and qv.indices.tolist() == [0, 0]
    assert rng.bit_generator.state == before
    assert reconstruct(qv, HALF).tolist() == [0.0, 0.0]


def test_hand_executed_rounding():
    # u = (0.6, 0.8), rho = (0.2, 0.6); draw 0.9 stays low, draw 0.1 goes up
    idx = stochastic_round(np.array([0.6, 0.8]), HALF.levels, np.array([0.9, 0.1]))
    assert idx.tolist() == [1, 2]
    qv = QuantizedVector(5.0, [1, 1], idx)
    np.testing.assert_allclose(reconstruct(qv, HALF), [2.5, 5.0])


def test_reconstruct_examples():
    assert reconstruct(QuantizedVector(5.0, [1, 1], [1, 2]), HALF).tolist() == [2.5, 5.0]
    assert reconstruct(QuantizedVector(1.0, [-1], [2]), HALF).tolist() == [-1.0]
    assert reconstruct(QuantizedVector(0.0, [1, -1, 1], [0, 0, 0]), HALF).tolist() == [0.0, 0.0, 0.0]


def test_stale_schedule_rejected():
    qv = quantize(np.array([3.0, 4.0]), HALF, 0)
    with pytest.raises(StaleScheduleError):
        reconstruct(qv, HALF.with_levels([0, 0.3, 1]))


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        quantize(np.array([1.0, np.nan]), HALF, 0)


def test_exact_mean_by_enumeration():
    mean = sum(p * r for p, r in enumerate_outcomes([3.0, 4.0], HALF))
    np.testing.assert_allclose(mean, [3.0, 4.0], atol=1e-12)


def test_monte_carlo_mean_of_3_4():
    recs = sample_reconstructions(np.array([3.0, 4.0]), HALF, 100_000, seed=1)
    assert np.all(np.abs(recs.mean(axis=0) - [3.0, 4.0]) < 0.05)


def test_quantize_matches_batched_sampler_stream():
    v = np.array([0.3, -1.2, 2.0])
    rng = np.random.default_rng(9)
    one = reconstruct(quantize(v, HALF, rng), HALF)
    batch = sample_reconstructions(v, HALF, 1, seed=9)[0]
    np.testing.assert_array_equal(one, batch)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3, allow_subnormal=False)),
       st.sampled_from([1.0, 2.0, math.inf]), st.integers(0, 2**31))
def test_reconstruction_is_on_grid_and_sign_consistent(v, q, seed):
    sch = LevelSchedule.uniform(3, q=q)
    qv = quantize(v, sch, seed)
    r = reconstruct(qv, sch)
    assert np.all(np.isfinite(r))
    assert np.all(r * v >= 0)
    if qv.norm > 0:
        u = np.abs(v) / qv.norm
        lo = np.floor(u * 4 + 1e-12) / 4
        assert np.all(np.abs(np.abs(r) / qv.norm - lo) <= 0.25 + 1e-9)


# --- variance ---------------------------------------------------------------

def test_expected_variance_by_enumeration():
    v = np.array([3.0, 4.0])
    exact = sum(p * np.sum((r - v) ** 2) for p, r in enumerate_outcomes(v, HALF))
    assert expected_variance(v, HALF) == pytest.approx(2.5)
    assert exact == pytest.approx(2.5)


def test_on_grid_vector_has_zero_variance():
    assert expected_variance(np.array([0.0, 0.0, 1.0]), HALF) == 0.0
    v = np.array([1.0, 1.0, 1.0, 1.0])  # u = 0.5 everywhere
    assert expected_variance(v, HALF) == 0.0


def test_monte_carlo_variance_of_3_4():
    v = np.array([3.0, 4.0])
    recs = sample_reconstructions(v, HALF, 100_000, seed=2)
    emp = np.mean(np.sum((recs - v) ** 2, axis=1))
    assert abs(emp / 2.5 - 1) < 0.02


@pytest.mark.parametrize("q", [1.0, 2.0, math.inf])
def test_enumeration_variance_general(q, rng):
    sch = LevelSchedule.from_interior(np.sort(rng.uniform(0.05, 0.95, 2)), q=q)
    v = rng.normal(size=4)
    exact = sum(p * np.sum((r - v) ** 2) for p, r in enumerate_outcomes(v, sch))
    mean = sum(p * r for p, r in enumerate_outcomes(v, sch))
    assert expected_variance(v, sch) == pytest.approx(exact, rel=1e-10)
    np.testing.assert_allclose(mean, v, atol=1e-12)


# --- bound -------------------------------------------------------------------

def test_bound_hand_points():
    r4 = variance_bound(HALF, 4)
    assert (r4.level_ratio, r4.d_threshold, r4.regime) == (2.0, 16.0, "small-d")
    assert r4.eps_q == pytest.approx(0.375)
    r64 = variance_bound(HALF, 64)
    assert r64.regime == "large-d"
    assert r64.eps_q == pytest.approx(3.125)


def test_bound_at_threshold_takes_larger_branch():
    r = variance_bound(HALF, 16)
    small = 0.625 + 0.25 * 0.25 * 16 - 0.5
    large = 0.625 + (0.5 * 4 - 1) - 0.5
    assert r.eps_q == pytest.approx(max(small, large))


def test_bound_diagnostics():
    assert variance_bound(HALF, 4).p_star == 0.0
    r = variance_bound(HALF, 64)  # delta = 4
    assert r.p_star == pytest.approx(2 / 3)
    assert r.k_p == pytest.approx(k_p_constant(2 / 3))
    assert r.k_p * 4 ** (2 - r.p_star) == pytest.approx(4 - 1)
    assert k_p_constant(0.0) == pytest.approx(0.25)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.sampled_from([1.0, 2.0, math.inf]), st.integers(1, 7), st.integers(0, 2**31))
def test_variance_never_exceeds_bound(d, q, s, seed):
    rng = np.random.default_rng(seed)
    sch = LevelSchedule.from_interior(np.sort(rng.uniform(0.01, 0.99, s)), q=q)
    v = rng.standard_cauchy(d)
    bound = variance_bound(sch, d).eps_q
    assert bound >= 0
    assert expected_variance(v, sch) <= bound * float(v @ v) * (1 + 1e-9)


# --- CDF estimation ------------------------------------------------------------

def test_lambda_weights():
    stats = CdfStatistics.empty(2.0, 16)
    stats.add(np.array([1.0, 0.0]))
    stats.add(np.array([0.0, 2.0]))
    lam = np.array(stats.norms) ** 2 / np.sum(np.array(stats.norms) ** 2)
    np.testing.assert_allclose(lam, [0.2, 0.8])


def test_point_mass_cdf_is_step():
    cdf = estimate_cdf([np.full(4, 0.5)], q=math.inf)
    assert cdf.cdf(0.49) == 0.0
    assert cdf.cdf(1.0) == pytest.approx(1.0)
    assert cdf.cdf(0.0) == 0.0


def test_single_sample_cdf_is_its_empirical_cdf():
    g = np.array([0.1, 0.4, 0.7, 1.0])
    cdf = estimate_cdf([g], q=math.inf, bins=1024)
    for x, expect in [(0.05, 0), (0.2, 0.25), (0.5, 0.5), (0.8, 0.75), (1.0, 1.0)]:
        assert cdf.cdf(x) == pytest.approx(expect)


def test_all_zero_samples_rejected():
    with pytest.raises(ValueError):
        estimate_cdf([np.zeros(3), np.zeros(3)])


@settings(max_examples=40, deadline=None)
@given(st.lists(arrays(np.float64, 5, elements=st.one_of(st.just(0.0), st.floats(1e-6, 10), st.floats(-10, -1e-6))),
                min_size=1, max_size=6))
def test_cdf_is_monotone_and_normalized(samples):
    if all(not np.any(s) for s in samples):
        return
    cdf = estimate_cdf(samples, bins=32)
    grid = np.linspace(0, 1, 41)
    vals = [cdf.cdf(x) for x in grid]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(1.0)


def test_parametric_lognormal_fit_recovers_parameters():
    rng = np.random.default_rng(0)
    stats = CdfStatistics.empty(math.inf, 64)
    for _ in range(200):
        stats.add(np.exp(rng.normal(-2.0, 0.5, 50)))
    cdf = CoordinateCDF.from_statistics(stats, "parametric")
    assert cdf.family == "lognormal"
    assert cdf.cdf(1.0) == pytest.approx(1.0)


# --- level optimization --------------------------------------------------------

@pytest.mark.parametrize("method", ["coordinate", "gradient"])
def test_uniform_cdf_s1_optimum_is_half(method):
    sch = optimize_levels(CoordinateCDF.uniform(), 1, method)
    assert sch.levels[1] == pytest.approx(0.5, abs=1e-6)


def test_uniform_objective_matches_grid_search():
    cdf = CoordinateCDF.uniform()
    grid = np.arange(1, 1000) / 1000
    objs = [quantization_objective(cdf, [0, g, 1]) for g in grid]
    best = grid[int(np.argmin(objs))]
    opt = optimize_levels(cdf, 1).levels[1]
    assert abs(best - opt) <= 1e-3
    assert quantization_objective(cdf, [0, opt, 1]) <= min(objs) + 1e-12


def test_point_mass_optimum_hits_the_mass():
    sch = optimize_levels(CoordinateCDF.from_atoms([0.3]), 1)
    assert sch.levels[1] == pytest.approx(0.3, abs=1e-6)
    assert quantization_objective(CoordinateCDF.from_atoms([0.3]), sch.levels) == pytest.approx(0.0, abs=1e-9)


def test_degenerate_cdf_keeps_strict_ordering():
    sch = optimize_levels(CoordinateCDF.from_atoms([0.0]), 4)
    assert np.all(np.diff(sch.levels) >= 1e-6 - 1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.sampled_from(["coordinate", "gradient"]))
def test_optimization_never_worsens_objective(seed, s, method):
    rng = np.random.default_rng(seed)
    cdf = CoordinateCDF.from_atoms(rng.beta(0.5, 2.0, 40), rng.uniform(0.1, 1, 40))
    start = LevelSchedule.from_interior(np.sort(rng.uniform(0.02, 0.98, s)))
    out = optimize_levels(cdf, s, method, init=start)
    assert quantization_objective(cdf, out.levels) <= quantization_objective(cdf, start.levels) + 1e-12
    assert np.all(np.diff(out.levels) > 0)


def test_adaptation_beats_uniform_on_lognormal():
    cdf = CoordinateCDF.lognormal(-2.5, 0.8)
    uni = LevelSchedule.uniform(3)
    opt = optimize_levels(cdf, 3)
    assert quantization_objective(cdf, opt.levels) < quantization_objective(cdf, uni.levels)


# --- level weights -------------------------------------------------------------

def test_uniform_weights_closed_form():
    np.testing.assert_allclose(level_weights(CoordinateCDF.uniform(), HALF), [0.25, 0.5, 0.25], atol=1e-12)


def test_point_mass_on_level_weight():
    w = level_weights(CoordinateCDF.from_atoms([0.5]), HALF)
    np.testing.assert_allclose(w, [0, 1, 0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 7))
def test_weights_sum_to_one(seed, s):
    rng = np.random.default_rng(seed)
    cdf = CoordinateCDF.from_atoms(rng.uniform(0, 1, 30), rng.uniform(0, 1, 30))
    sch = LevelSchedule.from_interior(np.sort(rng.uniform(0.01, 0.99, s)))
    w = level_weights(cdf, sch)
    assert abs(w.sum() - 1) <= 1e-9 and np.all(w >= -1e-15)


def test_weights_match_rounding_frequencies():
    rng = np.random.default_rng(4)
    u = rng.uniform(0, 1, 1_000_000)
    idx = stochastic_round(u, HALF.levels, rng.uniform(size=u.size))
    freq = np.bincount(idx, minlength=3) / u.size
    np.testing.assert_allclose(freq, [0.25, 0.5, 0.25], atol=0.005)


def test_sparsity_matches_zero_weight():
    rng = np.random.default_rng(5)
    d, n = 1000, 400
    counts = [np.count_nonzero(stochastic_round(rng.uniform(size=d), HALF.levels, rng.uniform(size=d)))
              for _ in range(n)]
    se = np.std(counts, ddof=1) / math.sqrt(n)
    assert abs(np.mean(counts) - 750) <= 3 * se
