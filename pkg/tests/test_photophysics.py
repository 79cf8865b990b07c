import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import decay_model_counts
from qelab.errors import DegenerateDataError, InvalidInputError
from qelab.photophysics import (DecayHistogram, SaturationCurve, SaturationParams,
                                build_decay_histogram, eval_saturation, fit_lifetime,
                                fit_saturation, saturation_jacobian, signal_rate)
from qelab.stream import TimestampStream

REFERENCE = SaturationParams(9.1e6, 209.0)


def test_eval_examples():
    assert eval_saturation(REFERENCE, 0.0) == 0.0
    assert eval_saturation(REFERENCE, 209.0) == pytest.approx(9.1e6 / 2, rel=1e-15)
    assert eval_saturation(REFERENCE, 120.0) == pytest.approx(9.1e6 * 120 / 329, rel=1e-15)
    assert round(eval_saturation(REFERENCE, 120.0) / 1e6, 2) == 3.32
    with pytest.raises(InvalidInputError):
        eval_saturation(REFERENCE, -1.0)


def test_params_validation():
    with pytest.raises(InvalidInputError):
        SaturationParams(0.0, 209.0)
    with pytest.raises(InvalidInputError):
        SaturationParams(1e6, 209.0, c_sh=-0.1)


def random_params(rng):
    """A draw from the box R_inf x P_sat x c_sh x P_sh x c_bg."""
    return SaturationParams(10 ** rng.uniform(3, 8), 10 ** rng.uniform(1, 4), rng.uniform(0, 10),
                            10 ** rng.uniform(1, 4), rng.uniform(0, 1e5))


def test_jacobian_matches_central_differences():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = random_params(rng)
        P = np.array([10 ** rng.uniform(0, 4)])
        J = saturation_jacobian(p, P)[0]
        x = p.as_array()
        for i in range(5):
            h = 1e-6 * x[i] if x[i] else 1e-6
            up, dn = x.copy(), x.copy()
            up[i] += h
            dn[i] -= h
            fd = (eval_saturation(SaturationParams(*up), P) - eval_saturation(SaturationParams(*dn), P)) / (2 * h)
            assert J[i] == pytest.approx(fd[0], rel=1e-6, abs=1e-9 * abs(eval_saturation(p, P)[0]) / max(x[i], 1e-300))


def test_monotone_without_shelving():
    P = np.linspace(0, 5000, 2001)
    assert np.all(np.diff(eval_saturation(SaturationParams(1e6, 200.0, 0.0, 500.0, 10.0), P)) > 0)


def test_signal_term_peaks_at_p_star():
    p = SaturationParams(9.1e6, 209.0, 0.3, 500.0, 2000.0)
    p_star = np.sqrt(p.p_sat_uw * p.p_sh_uw / p.c_sh)
    h = 1e-3 * p_star
    d = (signal_rate(p, p_star + h) - signal_rate(p, p_star - h)) / (2 * h)
    assert abs(d) < 1e-6 * signal_rate(p, p_star) / p_star
    assert signal_rate(p, p_star) > signal_rate(p, 0.5 * p_star)
    assert signal_rate(p, p_star) > signal_rate(p, 2 * p_star)


def test_fit_noiseless_reference_like():
    true = SaturationParams(9.1e6, 209.0, 0.3, 500.0, 2000.0)
    P = np.geomspace(10, 3500, 20)
    y = eval_saturation(true, P)
    fit = fit_saturation(SaturationCurve(P, y, 0.01 * y))
    got = fit.params
    assert got.p_sh_uw == 500.0
    for name in ("r_inf_cps", "p_sat_uw", "c_sh", "c_bg_cps_per_uw"):
        assert getattr(got, name) == pytest.approx(getattr(true, name), rel=1e-4)
    assert fit.cost <= fit.initial_cost


def test_fit_nested_model_shrinks_to_zero():
    true = SaturationParams(2e6, 150.0)
    P = np.geomspace(10, 3000, 20)
    y = eval_saturation(true, P)
    fit = fit_saturation(SaturationCurve(P, y, np.sqrt(y)))
    assert fit.params.c_sh <= 1e-3
    assert fit.params.c_bg_cps_per_uw * P[-1] <= 1e-3 * true.r_inf_cps


def test_fit_randomized_box_noiseless():
    rng = np.random.default_rng(2)
    P = np.geomspace(10, 3500, 20)
    for _ in range(10):  # the full 100-draw sweep runs in the acceptance suite
        true = random_params(rng)
        y = eval_saturation(true, P)
        fit = fit_saturation(SaturationCurve(P, y, 0.01 * y))
        assert fit.params.r_inf_cps == pytest.approx(true.r_inf_cps, rel=1e-4)
        assert fit.params.p_sat_uw == pytest.approx(true.p_sat_uw, rel=1e-4)


def test_fit_errors():
    P = np.geomspace(10, 50, 8)
    with pytest.raises(InvalidInputError):
        fit_saturation(SaturationCurve(P, P * 10, np.ones(8)))
    P = np.geomspace(10, 1000, 8)
    with pytest.raises(DegenerateDataError):
        fit_saturation(SaturationCurve(P, np.full(8, 5.0), np.ones(8)))
    with pytest.raises(InvalidInputError):
        SaturationCurve(P[:5], P[:5], np.ones(5))


def test_stderr_shrinks_with_noise():
    true = SaturationParams(9.1e6, 209.0, 0.0, 500.0, 0.0)
    P = np.geomspace(10, 3500, 30)
    y = eval_saturation(true, P)
    rng = np.random.default_rng(0)
    wide = fit_saturation(SaturationCurve(P, y * (1 + 0.02 * rng.standard_normal(P.size)), 0.02 * y))
    narrow = fit_saturation(SaturationCurve(P, y * (1 + 0.002 * rng.standard_normal(P.size)), 0.002 * y))
    assert narrow.stderr["p_sat_uw"] < wide.stderr["p_sat_uw"]
    assert 0 < wide.stderr["r_inf_cps"] < 0.1 * true.r_inf_cps


def exponential_histogram(tau_ns=5.87, amp=1e4, n=200, w=128, offset=0.0, lead=0):
    t = np.arange(n) * w * 1e-3
    counts = np.concatenate([np.zeros(lead), amp * np.exp(-t / tau_ns) + offset])
    return DecayHistogram(w, counts)


def test_lifetime_noiseless_exact():
    fit = fit_lifetime(exponential_histogram())
    assert fit.tau_ns == pytest.approx(5.87, rel=1e-6)
    assert fit.fit_window[0] < fit.fit_window[1]
    assert fit.offset < 1e-6


def test_lifetime_with_offset_and_rise():
    fit = fit_lifetime(exponential_histogram(offset=50.0, lead=5))
    assert fit.tau_ns == pytest.approx(5.87, rel=1e-6)
    assert fit.offset == pytest.approx(50.0, rel=1e-5)


def test_lifetime_bin_integrated_model():
    # counts integrated over each bin are still exponential in the bin index
    edges = np.arange(201) * 128.0
    fit = fit_lifetime(DecayHistogram(128, decay_model_counts(5870.0, 1.0, edges)))
    assert fit.tau_ns == pytest.approx(5.87, rel=1e-6)


def test_lifetime_constant_is_degenerate():
    with pytest.raises(DegenerateDataError):
        fit_lifetime(DecayHistogram(128, np.full(200, 30)))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 1000.0), st.integers(0, 10**6))
def test_lifetime_scale_invariant(s, seed):
    rng = np.random.default_rng(seed)
    base = rng.poisson(exponential_histogram(amp=2000, offset=5).counts).astype(float) + 2.0
    a = fit_lifetime(DecayHistogram(128, base))
    b = fit_lifetime(DecayHistogram(128, base * s))
    assert b.tau_ns == pytest.approx(a.tau_ns, rel=1e-6)


def test_decay_histogram_examples():
    trig = np.arange(0, 100_000, 10_000)
    s = TimestampStream.from_channels({2: trig, 0: trig[1:4]}, 100_000)
    h = build_decay_histogram(s, 2, 100)
    assert h.counts[0] == 3 and h.counts.sum() == 3
    s = TimestampStream.from_channels({2: trig, 0: [30_000 + 10_000 - 1, 20_000 + 5_000]}, 100_000)
    h = build_decay_histogram(s, 2, 1000)
    assert h.counts[5] == 1 and h.counts[9] == 1
    s = TimestampStream.from_channels({2: np.arange(0, 400_000, 40_000), 1: [10_000]}, 400_000)
    assert build_decay_histogram(s, 2, 1000).counts[10] == 1


def test_decay_histogram_needs_trigger():
    s = TimestampStream.from_channels({0: [5, 6, 7]}, 10)
    with pytest.raises(InvalidInputError):
        build_decay_histogram(s, 2, 10)
    s = TimestampStream.from_channels({2: [0, 100, 250], 0: [5]}, 300)
    with pytest.raises(InvalidInputError):
        build_decay_histogram(s, 2, 10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_decay_histogram_conserves_photons(seed):
    rng = np.random.default_rng(seed)
    period = 25_641
    trig = np.rint(np.arange(50) * period + 1000).astype(np.int64)
    photons = np.sort(rng.integers(0, trig[-1] + 3 * period, 400))
    s = TimestampStream.from_channels({2: trig, 0: photons}, int(trig[-1] + 3 * period))
    h = build_decay_histogram(s, 2, 128)
    assert h.counts.sum() + h.n_discarded == np.count_nonzero(photons >= trig[0])
