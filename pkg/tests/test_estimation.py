import json
import math
from dataclasses import replace

import numpy as np
import pytest

from cwqkd.errors import InsufficientDataError, NoPeakError
from cwqkd.estimation import (EstimatedParameters, estimate_all, estimate_dark_counts,
                              estimate_deadtime, estimate_delay, estimate_epol_eta_brightness,
                              estimate_jitter, fit_peak, isolate_true_coincidences)
from cwqkd.model import (JitterModel, LinkParameters, OperatingPoint, rate_breakdown,
                         secure_key_rate)
from cwqkd.simulator import Histogram, SimulationConfig, build_histogram, generate_tag_streams
from cwqkd.tagstream import TagStream

REF = LinkParameters(eta_a=0.1, eta_b=0.1, dc_a=250.0, dc_b=250.0, e_pol=0.01,
                     jitter=JitterModel.constant(100e-12))


def gaussian_histogram(fwhm, width, counts, floor=5.0, center=0.0, seed=0, span=2e-9):
    """Multinomial draw of a Gaussian peak on a constant floor."""
    rng = np.random.default_rng(seed)
    edges = np.arange(center - span / 2, center + span / 2 + width / 2, width)
    sigma = fwhm / 2.3548200450309493
    from scipy.stats import norm
    p = np.diff(norm.cdf(edges, center, sigma))
    c = rng.multinomial(counts, p / p.sum()) + rng.poisson(floor, edges.size - 1)
    return Histogram(edges, c, 1.0)


@pytest.fixture(scope="module")
def acquisition():
    op = OperatingPoint(1e6, 300e-12, 12.345e-9)
    a, b, _ = generate_tag_streams(SimulationConfig(REF, op, 20.0, seed=31))
    return a, b, op


class TestDelayAndJitter:
    def test_delay_recovered(self, acquisition):
        a, b, op = acquisition
        h = build_histogram(a, b, 20e-12, (11e-9, 14e-9))
        assert estimate_delay(h) == pytest.approx(op.t_d, abs=20e-12)

    def test_symmetric_peak(self):
        h = gaussian_histogram(100e-12, 10e-12, 20_000)
        assert abs(estimate_delay(h)) <= 10e-12

    def test_flat_histogram(self):
        h = Histogram(np.linspace(0, 1e-9, 101), np.full(100, 50), 1.0)
        with pytest.raises(NoPeakError):
            estimate_delay(h)
        with pytest.raises(NoPeakError):
            estimate_jitter(h)

    def test_empty_histogram(self):
        with pytest.raises(NoPeakError):
            estimate_delay(Histogram(np.linspace(0, 1e-9, 11), np.zeros(10), 1.0))

    def test_jitter_recovered(self, acquisition):
        a, b, op = acquisition
        h = build_histogram(a, b, 10e-12, (op.t_d - 1e-9, op.t_d + 1e-9))
        assert h.counts.max() * 10 > 1e4
        fwhm, lower = estimate_jitter(h)
        assert fwhm == pytest.approx(100e-12, rel=0.1) and not lower

    def test_resolution_limit(self):
        h = gaussian_histogram(5e-12, 50e-12, 20_000, span=4e-9)
        fwhm, lower = estimate_jitter(h)
        assert lower

    def test_converges_as_bins_shrink(self):
        errs = []
        for w in (40e-12, 20e-12, 5e-12):
            h = gaussian_histogram(100e-12, w, 400_000, floor=0.0, seed=2)
            errs.append(abs(estimate_jitter(h)[0] - 100e-12))
        assert errs[0] > errs[1] > errs[2] or errs[2] < 1e-13
        assert errs[2] < 1e-12

    def test_translation_invariant(self, acquisition):
        a, b, op = acquisition
        shift = 7_777_777
        h1 = build_histogram(a, b, 20e-12, (11e-9, 14e-9))
        h2 = build_histogram(a.shifted(shift), b.shifted(shift), 20e-12, (11e-9, 14e-9))
        assert np.array_equal(h1.counts, h2.counts)
        assert fit_peak(h1) == fit_peak(h2)


class TestDarkCounts:
    def test_rate(self):
        T = 100.0
        a, _, _ = generate_tag_streams(SimulationConfig(REF, OperatingPoint(0.0, 1e-9), T,
                                                        seed=4))
        dc = estimate_dark_counts(a)
        assert abs(dc.total - 250.0) < 3 * math.sqrt(250 * T) / T
        assert sum(dc.per_detector.values()) == pytest.approx(dc.total)

    def test_empty(self):
        assert estimate_dark_counts(TagStream([], [], 10.0)).total == 0.0


class TestIsolation:
    def test_true_and_accidental(self, acquisition):
        a, b, op = acquisition
        iso = isolate_true_coincidences(a, b, 300e-12, op.t_d, 100e-12)
        rb = rate_breakdown(REF, op, accidentals="poisson")
        T = a.duration
        assert abs(iso.cc_true - rb.eta_window * rb.cc_true * T) < 3 * iso.cc_true_err
        lam = rb.cc_acc * T
        assert abs(iso.cc_acc - lam) < 3 * math.sqrt(lam / iso.n_shifts)

    def test_no_accidentals_when_quiet(self):
        p = replace(REF, dc_a=0.0, dc_b=0.0)
        op = OperatingPoint(1e4, 300e-12, 1e-9)
        a, b, _ = generate_tag_streams(SimulationConfig(p, op, 5.0, seed=6))
        iso = isolate_true_coincidences(a, b, 300e-12, 1e-9, 100e-12)
        assert iso.cc_acc <= 1.0

    def test_window_too_small(self, acquisition):
        a, b, op = acquisition
        with pytest.raises(ValueError):
            isolate_true_coincidences(a, b, 200e-12, op.t_d, 100e-12)

    def test_short_acquisition(self):
        a = TagStream([0], [0], 1e-9)
        with pytest.raises(InsufficientDataError):
            isolate_true_coincidences(a, a, 300e-12, 0.0, 100e-12)


class TestEfficiencies:
    def test_lossless_noiseless(self):
        p = LinkParameters(eta_a=1.0, eta_b=1.0, jitter=JitterModel.constant(20e-12))
        op = OperatingPoint(2e4, 100e-12)
        a, b, _ = generate_tag_streams(SimulationConfig(p, op, 2.0, seed=9))
        iso = isolate_true_coincidences(a, b, 100e-12, 0.0, 20e-12)
        est = estimate_epol_eta_brightness(a, b, iso, 0.0, 0.0, 100e-12, 20e-12)
        assert est["eta_a"][0] == pytest.approx(1.0, abs=1e-3)
        assert est["brightness"][0] == pytest.approx(a.rate(), rel=1e-3)

    def test_no_signal(self):
        a = TagStream([0], [0], 1.0)
        iso = isolate_true_coincidences(a, a, 300e-12, 0.0, 100e-12)
        with pytest.raises(ZeroDivisionError):
            estimate_epol_eta_brightness(a, a, iso, 1.0, 1.0)

    def test_deadtime_bias_flagged(self):
        T_dead = 50e-9
        d = 2
        b = 0.2 * d / (0.5 * T_dead)
        p = LinkParameters(eta_a=0.5, eta_b=0.5, jitter=JitterModel.constant(100e-12),
                           deadtime=T_dead)
        op = OperatingPoint(b, 300e-12)
        a, bb, _ = generate_tag_streams(SimulationConfig(p, op, 0.2, seed=17, deadtime=True))
        est = estimate_all(a, bb, search_range=20e-9, deadtime_bin=2e-9)
        assert est["brightness"] < 0.95 * b
        assert "brightness-biased-by-deadtime" in est.flags
        assert est["deadtime"] == pytest.approx(T_dead, abs=2e-9)


class TestDeadtimeEstimate:
    @pytest.mark.parametrize("rate", [1e4, 1e6])
    def test_gap_rate_invariant(self, rate):
        p = LinkParameters(eta_a=1.0, eta_b=1.0, deadtime=25e-9)
        dur = min(5.0, 2e6 / rate)
        a, _, _ = generate_tag_streams(SimulationConfig(p, OperatingPoint(rate, 1e-9), dur,
                                                        seed=2, deadtime=True))
        est = estimate_deadtime(a, bin_width=1e-9)
        assert est.value == pytest.approx(25e-9, abs=1e-9)

    def test_no_deadtime(self):
        p = LinkParameters(eta_a=1.0, eta_b=1.0)
        a, _, _ = generate_tag_streams(SimulationConfig(p, OperatingPoint(1e6, 1e-9), 1.0,
                                                        seed=2))
        est = estimate_deadtime(a, bin_width=1e-9)
        assert est.value == 0.0 and est.below_resolution and est.uncertainty == 1e-9

    def test_insufficient(self):
        with pytest.raises(InsufficientDataError):
            estimate_deadtime(TagStream([0, 0], [0, 10**9], 1.0))


@pytest.fixture(scope="module")
def roundtrip():
    op = OperatingPoint(1e6, 300e-12, 12e-9)
    a, b, _ = generate_tag_streams(SimulationConfig(REF, op, 30.0, seed=41))
    da, db, _ = generate_tag_streams(SimulationConfig(REF, replace(op, brightness=0.0),
                                                      30.0, seed=42))
    return estimate_all(a, b, da, db), op


class TestPipeline:
    def test_values(self, roundtrip):
        est, op = roundtrip
        assert est["brightness"] == pytest.approx(1e6, rel=0.05)
        assert est["eta_a"] == pytest.approx(0.1, rel=0.05)
        assert est["e_pol"] == pytest.approx(0.01, rel=0.1)
        assert est["t_d"] == pytest.approx(12e-9, abs=10e-12)
        assert est["t_delta"] == pytest.approx(100e-12, rel=0.1)
        assert est["deadtime"] == 0.0
        assert "stray-light-unobservable" in est.flags

    def test_key_rate_reprediction(self, roundtrip):
        est, op = roundtrip
        truth = secure_key_rate(REF, OperatingPoint(1e6, 300e-12))
        again = secure_key_rate(est.to_link_parameters(), est.to_operating_point(300e-12))
        assert again == pytest.approx(truth, rel=0.1)

    def test_json(self, roundtrip):
        est, _ = roundtrip
        doc = json.loads(est.to_json())
        assert doc["schema_version"] == 1
        # the document feeds straight back into the link schema
        link = LinkParameters.from_dict(doc)
        assert link.eta_a == pytest.approx(est["eta_a"])
        assert OperatingPoint.from_dict(doc).t_d == pytest.approx(est["t_d"])
        again = EstimatedParameters.from_dict(doc)
        assert again.values == pytest.approx(est.values)
        assert all(u >= 0 for u in est.uncertainties.values())

    def test_without_dark_run(self, acquisition):
        a, b, _ = acquisition
        est = estimate_all(a, b)
        assert "dark-counts-assumed-zero" in est.flags
