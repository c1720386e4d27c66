import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nikodym_lab.errors import InsufficientDataError
from nikodym_lab.metric import Flat, PerturbationProfile, build_perturbed
from nikodym_lab.nikodym_maximal import Region
from nikodym_lab.scaling_lab import (
    BREAKDOWN,
    INCONCLUSIVE,
    NO_BREAKDOWN,
    ExponentFit,
    GridRule,
    SweepRecord,
    breakdown_verdict,
    default_q,
    dual_exponent,
    fit_exponent,
    ratio_sweep,
)


def fake_fit(slope, stderr=0.01):
    return ExponentFit(slope, 0.0, stderr, 4, 0.0)


def test_exact_power_law_fit():
    deltas = 2.0 ** -np.arange(4, 8)
    fit = fit_exponent([(d, 3 * d ** -0.4) for d in deltas])
    assert fit.slope == pytest.approx(-0.4, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3), abs=1e-12)
    assert fit.residual_max <= 1e-10
    assert fit.n_points == 4


@given(st.floats(-2.0, 1.0), st.floats(0.1, 10.0))
@settings(max_examples=30, deadline=None)
def test_noise_free_fits_are_exact(slope, c0):
    deltas = 2.0 ** -np.arange(2, 9)
    fit = fit_exponent([(d, c0 * d ** slope) for d in deltas])
    assert fit.slope == pytest.approx(slope, abs=1e-10)
    assert fit.residual_max <= 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_noisy_power_law_recovers_slope(seed):
    rng = np.random.default_rng(seed)
    deltas = 2.0 ** -np.arange(1, 8)
    ratios = 2 * deltas ** -0.7 * (1 + 0.05 * rng.uniform(-1, 1, deltas.size))
    assert fit_exponent(list(zip(deltas, ratios))).slope == pytest.approx(-0.7, abs=0.05)


def test_fit_skips_failed_records():
    recs = [SweepRecord(d, 1.0, 1.0, d ** -0.5, 64, "flat") for d in (0.5, 0.25, 0.125, 0.0625)]
    recs.append(SweepRecord(0.03125, math.nan, math.nan, math.nan, 64, "flat", error="boom"))
    fit = fit_exponent(recs)
    assert fit.n_points == 4
    assert fit.slope == pytest.approx(-0.5, abs=1e-12)


def test_too_few_points():
    with pytest.raises(InsufficientDataError):
        fit_exponent([(0.5, 1.0), (0.25, 2.0), (0.125, 4.0)])
    assert fit_exponent([(0.5, 1.0), (0.25, 2.0), (0.125, 4.0)], min_points=3).n_points == 3


def test_nonpositive_ratio_rejected():
    with pytest.raises(ValueError):
        fit_exponent([(0.5, 1.0), (0.25, 0.0), (0.125, 4.0), (0.0625, 8.0)])


def test_conjugate_and_default_q():
    assert dual_exponent(2.5) == pytest.approx(5 / 3)
    assert dual_exponent(1) == math.inf
    assert default_q(2.5, 3) == pytest.approx(10 / 3)


def test_3d_verdict_at_five_halves():
    rep = breakdown_verdict(fake_fit(-0.4), 2.5, 3)
    assert rep.trivial_exponent == pytest.approx(-0.2)
    assert rep.predicted_exponent == pytest.approx(-0.4)
    assert rep.threshold_p == 2
    assert rep.verdict == BREAKDOWN


def test_3d_verdict_at_threshold():
    rep = breakdown_verdict(fake_fit(-0.5), 2.0, 3)
    assert rep.trivial_exponent == pytest.approx(rep.predicted_exponent)
    assert rep.verdict == NO_BREAKDOWN


def test_5d_arithmetic():
    rep = breakdown_verdict(fake_fit(-2 / 3.5), 3.5, 5)
    assert rep.trivial_exponent == pytest.approx(1 - 5 / 3.5)
    assert rep.predicted_exponent == pytest.approx(-2 / 3.5)
    assert rep.trivial_exponent - rep.predicted_exponent == pytest.approx(1 / 7)
    assert rep.threshold_p == 3
    assert rep.verdict == BREAKDOWN


def test_even_dimension_prediction():
    rep = breakdown_verdict(fake_fit(-0.1), 3.0, 4)
    assert rep.predicted_exponent == pytest.approx(-1 / 3)
    assert rep.parity == "even"


def test_noisy_fit_is_inconclusive():
    assert breakdown_verdict(fake_fit(-3.0, stderr=0.25), 2.5, 3).verdict == INCONCLUSIVE
    assert breakdown_verdict(fake_fit(-3.0, stderr=math.nan), 2.5, 3).verdict == INCONCLUSIVE


def test_margin_includes_stderr():
    # slope -0.33 sits 0.13 under -0.2: enough at stderr 0.01, not at 0.05
    assert breakdown_verdict(fake_fit(-0.33, 0.01), 2.5, 3).verdict == BREAKDOWN
    assert breakdown_verdict(fake_fit(-0.33, 0.05), 2.5, 3).verdict == NO_BREAKDOWN


def test_parity_mismatch_rejected():
    with pytest.raises(ValueError):
        breakdown_verdict(fake_fit(-0.4), 2.5, 3, parity="even")


@given(st.floats(-1.5, 0.5), st.floats(0.0, 0.15), st.floats(2.0, 6.0), st.floats(0.0, 4.0),
       st.sampled_from([3, 4, 5]))
@settings(max_examples=200, deadline=None)
def test_raising_p_never_undoes_breakdown(slope, stderr, p, dp, d_total):
    fit = fake_fit(slope, stderr)
    if breakdown_verdict(fit, p, d_total).verdict == BREAKDOWN:
        assert breakdown_verdict(fit, p + dp, d_total).verdict == BREAKDOWN


@pytest.mark.parametrize("delta,n", [(0.5, 64), (0.25, 64), (0.0625, 128), (1 / 32, 256),
                                     (1 / 64, 256), (1 / 128, 256)])
def test_default_grid_rule(delta, n):
    assert GridRule().resolution(delta) == n


def test_grid_rule_keeps_four_cells_in_range():
    rule = GridRule()
    for delta in 2.0 ** -np.arange(4, 7):
        assert delta * rule.resolution(delta) >= 4


@pytest.fixture(scope="module")
def small_sweeps():
    region = Region((0.12, 0, 0.06), 0.05, 3)
    rule = GridRule(floor=32, cells_per_delta=4, cap=64)
    deltas = [0.25, 0.125, 0.0625]
    flat = ratio_sweep(Flat(3), 2.5, None, deltas, region, grid_rule=rule)
    pert = build_perturbed(Flat(3), PerturbationProfile(0.95, 0.005))
    return flat, ratio_sweep(pert, 2.5, None, deltas, region, grid_rule=rule)


def test_sweep_records_error_and_continues(small_sweeps):
    flat, _ = small_sweeps
    assert not flat[0].ok and math.isnan(flat[0].ratio)
    assert all(r.ok for r in flat[1:])


def test_flat_ratios_increase_as_delta_shrinks(small_sweeps):
    flat, _ = small_sweeps
    ratios = [r.ratio for r in flat[1:]]
    assert all(np.isfinite(ratios)) and ratios[1] > ratios[0] > 0


def test_perturbed_ratios_dominate_flat(small_sweeps):
    flat, pert = small_sweeps
    for f, g in zip(flat[1:], pert[1:]):
        assert g.ratio >= f.ratio
        assert g.numerator / g.denominator == pytest.approx(g.ratio, rel=1e-14)


def test_sweep_rejects_unordered_deltas():
    with pytest.raises(ValueError):
        ratio_sweep(Flat(3), 2.5, None, [0.0625, 0.125], Region((0, 0, 0), 0.05, 3))
    with pytest.raises(ValueError):
        ratio_sweep(Flat(3), 2.5, None, [], Region((0, 0, 0), 0.05, 3))
