"""Recover link parameters from time-tag data alone.

The pipeline locates the coincidence peak in the delay histogram, reads
its width, measures accidentals with an off-peak window, derives heralding
efficiencies and brightness from singles and coincidences, and reads the
detector deadtime from the gap in each detector's autocorrelation.
Uncertainties are Poisson (sqrt N) propagated linearly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit

from .errors import InsufficientDataError, NoPeakError, SchemaError
from .model import (FWHM_PER_SIGMA, SCHEMA_VERSION, JitterModel, LinkParameters,
                    OperatingPoint, coincidence_window_efficiency, heralding_from_rates)
from .simulator import Histogram, build_autocorrelation, build_histogram, count_coincidences

PEAK_TO_FLOOR_MIN = 5.0
OFF_PEAK_SHIFT = 10.0  # in units of t_delta
DEADTIME_BIAS_LIMIT = 0.02
STRAY_LIGHT_CAVEAT = "stray-light-unobservable"

PARAMETERS = ("t_d", "t_delta", "dc_a", "dc_b", "e_pol", "eta_a", "eta_b", "brightness",
              "deadtime")


def _floor(h):
    """Median of the outer halves of the histogram as a first floor guess."""
    c = h.counts
    q = max(1, c.size // 4)
    return float(np.median(np.concatenate([c[:q], c[-q:]])))


def _peak_check(h):
    if h.counts.size < 3 or h.total == 0:
        raise NoPeakError("histogram is empty")
    floor = _floor(h)
    peak = float(h.counts.max())
    # a floor of zero still needs a few counts so single strays are not peaks
    if peak < PEAK_TO_FLOOR_MIN * max(floor, 1.0):
        raise NoPeakError(f"peak/floor = {peak / max(floor, 1.0):.2f} < {PEAK_TO_FLOOR_MIN}")
    return floor, peak


def _gauss(x, amp, mu, sigma, floor):
    return floor + amp * np.exp(-0.5 * ((x - mu) / sigma) ** 2)


@dataclass(frozen=True)
class PeakFit:
    """Gaussian fit to a coincidence peak; times in seconds."""

    center: float
    center_err: float
    fwhm: float
    fwhm_err: float
    floor: float
    amplitude: float
    centroid: float
    lower_bound: bool


def fit_peak(h):
    """Centroid above half maximum, refined by a least-squares Gaussian.

    Raises NoPeakError when the peak is under five times the floor.
    """
    floor0, peak = _peak_check(h)
    x, c = h.centers, h.counts.astype(float)
    half = floor0 + 0.5 * (peak - floor0)
    k = int(np.argmax(c))
    lo, hi = k, k
    while lo > 0 and c[lo - 1] > half:
        lo -= 1
    while hi < c.size - 1 and c[hi + 1] > half:
        hi += 1
    w = c[lo:hi + 1] - floor0
    centroid = float(np.sum(x[lo:hi + 1] * w) / np.sum(w))
    width0 = max((hi - lo + 1) * h.bin_width, h.bin_width)

    # floor from bins well away from the peak, then fit a window around it
    far = np.abs(x - centroid) >= 5 * width0
    floor = float(np.median(c[far])) if np.count_nonzero(far) >= 5 else floor0
    sel = np.abs(x - centroid) <= 4 * width0
    if np.count_nonzero(sel) < 4:
        sel = np.ones_like(c, dtype=bool)
    sigma0 = max(width0 / FWHM_PER_SIGMA, h.bin_width / 2)
    p0 = (peak - floor, centroid, sigma0, floor)
    err = np.sqrt(np.maximum(c[sel], 1.0))
    try:
        popt, pcov = curve_fit(_gauss, x[sel], c[sel], p0=p0, sigma=err,
                               absolute_sigma=True, maxfev=5000)
        perr = np.sqrt(np.abs(np.diag(pcov)))
        center, sigma = float(popt[1]), abs(float(popt[2]))
        amp, floor = float(popt[0]), float(popt[3])
        center_err, fwhm_err = float(perr[1]), float(perr[2]) * FWHM_PER_SIGMA
        if not (np.isfinite(center) and abs(center - centroid) < 2 * width0):
            raise RuntimeError
    except (RuntimeError, ValueError):
        center, sigma, amp = centroid, sigma0, peak - floor
        center_err, fwhm_err = h.bin_width, h.bin_width
    fwhm = sigma * FWHM_PER_SIGMA
    return PeakFit(center, center_err, fwhm, fwhm_err, floor, amp, centroid,
                   lower_bound=fwhm < 2 * h.bin_width)


def estimate_delay(h):
    """Delay ``t_d`` (s) at the coincidence peak."""
    return fit_peak(h).center


def estimate_jitter(h):
    """Peak FWHM ``t_delta`` (s) after removing the accidental floor.

    Returns ``(fwhm, lower_bound)``; ``lower_bound`` is set when the peak is
    narrower than two bins and the value only bounds the true width.
    """
    p = fit_peak(h)
    return p.fwhm, p.lower_bound


@dataclass(frozen=True)
class DarkCounts:
    total: float
    total_err: float
    per_detector: dict


def estimate_dark_counts(stream):
    """Tag rate of a source-off acquisition, per party and per detector."""
    if stream.duration <= 0 or len(stream) == 0:
        return DarkCounts(0.0, 0.0, {ch: 0.0 for ch in stream.channels})
    n = len(stream)
    per = {ch: stream.rate(ch) for ch in sorted(stream.channels)}
    return DarkCounts(n / stream.duration, math.sqrt(n) / stream.duration, per)


@dataclass(frozen=True)
class IsolatedRates:
    """Counts (not rates) on- and off-peak at one window, plus their rates."""

    cc_measured: float
    cc_acc: float
    cc_true: float
    cc_true_err: float
    err_measured: float
    err_acc: float
    sifted_measured: float
    sifted_acc: float
    duration: float
    n_shifts: int

    @property
    def rates(self):
        return {"cc_measured": self.cc_measured / self.duration,
                "cc_acc": self.cc_acc / self.duration,
                "cc_true": self.cc_true / self.duration}


def isolate_true_coincidences(alice, bob, t_cc, t_d, t_delta, n_shifts=4, seed=0,
                              bell_correlated=True):
    """Separate true coincidences from accidentals.

    Accidentals are counted with the same window moved ``+-k * 10 t_delta``
    off the peak (``k = 1..n_shifts/2`` on each side) and averaged.

    Args:
        alice, bob: sorted tag streams.
        t_cc: coincidence window; must be at least ``3 * t_delta``.
        t_d: peak delay.
        t_delta: peak FWHM.
        n_shifts: number of off-peak windows, split evenly across both sides.
    """
    if t_cc < 3 * t_delta * (1 - 1e-9):
        raise ValueError("t_cc must be >= 3 * t_delta to capture the whole peak")
    step = max(OFF_PEAK_SHIFT * t_delta, 2 * t_cc)
    per_side = max(1, n_shifts // 2)
    if alice.duration <= 2 * per_side * step:
        raise InsufficientDataError("acquisition too short for the off-peak region")
    on = count_coincidences(alice, bob, t_cc, t_d, seed=seed, bell_correlated=bell_correlated)
    acc, acc_err, acc_sift = [], [], []
    for k in range(1, per_side + 1):
        for sign in (-1, 1):
            off = count_coincidences(alice, bob, t_cc, t_d + sign * k * step,
                                     seed=seed + k, bell_correlated=bell_correlated)
            acc.append(off.cc_measured)
            acc_err.append(off.cc_err)
            acc_sift.append(off.cc_sifted)
    m = len(acc)
    cc_acc = float(np.mean(acc))
    cc_true = on.cc_measured - cc_acc
    var = on.cc_measured + np.sum(acc) / m**2
    return IsolatedRates(
        cc_measured=float(on.cc_measured), cc_acc=cc_acc, cc_true=cc_true,
        cc_true_err=float(math.sqrt(var)), err_measured=float(on.cc_err),
        err_acc=float(np.mean(acc_err)), sifted_measured=float(on.cc_sifted),
        sifted_acc=float(np.mean(acc_sift)), duration=alice.duration, n_shifts=m,
    )


def estimate_epol_eta_brightness(alice, bob, iso, dc_a, dc_b, t_cc=None, t_delta=None):
    """Polarization error, heralding efficiencies and brightness.

    Args:
        alice, bob: the source-on streams.
        iso: output of :func:`isolate_true_coincidences`.
        dc_a, dc_b: dark-count rates (cps) of each party.
        t_cc, t_delta: when both are given the counted true coincidences are
            divided by the window efficiency.

    Returns:
        dict of value and uncertainty pairs for ``e_pol``, ``eta_a``,
        ``eta_b`` and ``brightness``.
    """
    T = iso.duration
    eff = 1.0
    if t_cc is not None and t_delta is not None:
        eff = float(coincidence_window_efficiency(t_cc, t_delta))
    cc_t = iso.cc_true / T / eff
    s_t_a = alice.rate() - dc_a
    s_t_b = bob.rate() - dc_b
    if cc_t <= 0:
        raise ZeroDivisionError("no true coincidences above the accidental floor")
    if s_t_a <= 0 or s_t_b <= 0:
        raise ZeroDivisionError("singles do not exceed the dark-count rate")
    eta_a, eta_b, _ = heralding_from_rates(cc_t, s_t_a, s_t_b)

    sift_t = iso.sifted_measured - iso.sifted_acc
    err_t = iso.err_measured - iso.err_acc
    e_pol = min(max(err_t / sift_t, 0.0), 0.5) if sift_t > 0 else float("nan")
    e_err = math.sqrt(max(e_pol * (1 - e_pol), 1.0 / max(sift_t, 1.0)) / max(sift_t, 1.0))

    rel_cc = iso.cc_true_err / max(iso.cc_true, 1.0)
    rel_sa = math.sqrt(len(alice)) / T / s_t_a
    rel_sb = math.sqrt(len(bob)) / T / s_t_b
    b = s_t_a * s_t_b / cc_t
    return {
        "e_pol": (e_pol, e_err),
        "eta_a": (float(eta_a), float(eta_a) * math.hypot(rel_cc, rel_sb)),
        "eta_b": (float(eta_b), float(eta_b) * math.hypot(rel_cc, rel_sa)),
        "brightness": (b, b * math.sqrt(rel_cc**2 + rel_sa**2 + rel_sb**2)),
    }


@dataclass(frozen=True)
class DeadtimeEstimate:
    value: float
    uncertainty: float
    below_resolution: bool
    per_detector: dict


def estimate_deadtime(stream, bin_width=1e-9, max_delay=None, min_counts=100):
    """Deadtime from the empty gap at short delays of each detector's autocorrelation.

    The gap is the left edge of the first occupied bin, so the result is
    resolved to ``bin_width``. A gap shorter than one bin is reported as 0
    with ``bin_width`` as the upper bound. Without ``max_delay`` the delay
    range of each detector is sized to collect about ``20 * min_counts``
    pairs, between 200 and 10^5 bins.
    """
    per = {}
    for ch in sorted(np.unique(stream.channel).tolist()):
        span = max_delay
        if span is None:
            n = int(np.count_nonzero(stream.channel == ch))
            r = n / stream.duration if stream.duration > 0 else 0.0
            span = 20 * min_counts / (n * r) if n and r else 0.0
            span = min(max(span, 200 * bin_width), 1e5 * bin_width)
        h = build_autocorrelation(stream, bin_width, span, channel=ch)
        if h.total < min_counts:
            continue
        first = int(np.argmax(h.counts > 0))
        per[ch] = float(h.edges[first])
    if not per:
        raise InsufficientDataError(
            f"fewer than {min_counts} autocorrelation counts on every detector")
    value = min(per.values())
    return DeadtimeEstimate(value, bin_width, value < bin_width, per)


@dataclass
class EstimatedParameters:
    """Estimates with symmetric uncertainties and caveat flags."""

    values: dict
    uncertainties: dict
    flags: list = field(default_factory=list)
    detectors_per_party: int = 2
    t_cc: float | None = None

    def __post_init__(self):
        for k, v in self.uncertainties.items():
            if v < 0 or not np.isfinite(v):
                raise ValueError(f"uncertainty of {k} must be finite and >= 0")

    def __getitem__(self, name):
        return self.values[name]

    def to_link_parameters(self, **kw):
        v = self.values
        return LinkParameters(
            eta_a=min(v["eta_a"], 1.0), eta_b=min(v["eta_b"], 1.0),
            dc_a=max(v["dc_a"], 0.0), dc_b=max(v["dc_b"], 0.0),
            e_pol=min(max(v["e_pol"], 0.0), 0.5),
            jitter=JitterModel.constant(v["t_delta"]), deadtime=v.get("deadtime", 0.0),
            detectors_per_party=self.detectors_per_party, **kw)

    def to_operating_point(self, t_cc=None):
        t_cc = t_cc or self.t_cc or 3 * self.values["t_delta"]
        return OperatingPoint(self.values["brightness"], t_cc, self.values["t_d"])

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "link": self.to_link_parameters().to_dict(),
            "operating_point": self.to_operating_point().to_dict(),
            "estimates": {k: {"value": self.values[k], "uncertainty": self.uncertainties[k]}
                          for k in self.values},
            "flags": list(self.flags),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d):
        try:
            est = d["estimates"]
            values = {k: float(e["value"]) for k, e in est.items()}
            unc = {k: float(e["uncertainty"]) for k, e in est.items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError("estimates", f"malformed estimates ({exc})") from None
        link = d.get("link", {})
        return cls(values, unc, list(d.get("flags", [])),
                   int(link.get("detectors_per_party", 2)),
                   d.get("operating_point", {}).get("t_cc"))


def estimate_all(alice, bob, dark_alice=None, dark_bob=None, *, search_range=100e-9,
                 coarse_bin=100e-12, fine_bin=10e-12, t_cc=None, deadtime_bin=1e-9,
                 seed=0, bell_correlated=True):
    """Run the whole estimation pipeline on one acquisition.

    Args:
        alice, bob: source-on streams.
        dark_alice, dark_bob: optional source-off streams of the same
            detectors. Without them dark counts are taken as zero and the
            ``dark-counts-assumed-zero`` flag is raised.
        search_range: half-width of the delay search around zero.
        coarse_bin, fine_bin: bin widths for locating and for fitting the peak.
        t_cc: window used for coincidence counting; default ``3 * t_delta``.
        deadtime_bin: resolution of the deadtime estimate.
    """
    flags = [STRAY_LIGHT_CAVEAT]
    coarse = build_histogram(alice, bob, coarse_bin, (-search_range, search_range))
    t_d0 = estimate_delay(coarse)
    fine_half = max(50 * coarse_bin, 20 * fine_bin)
    fine = build_histogram(alice, bob, fine_bin, (t_d0 - fine_half, t_d0 + fine_half))
    pk = fit_peak(fine)
    if pk.lower_bound:
        flags.append("t_delta-lower-bound")
    t_delta = pk.fwhm
    window = t_cc if t_cc is not None else 3 * t_delta

    vals, unc = {"t_d": pk.center, "t_delta": t_delta}, {"t_d": pk.center_err,
                                                         "t_delta": pk.fwhm_err}
    for name, s in (("dc_a", dark_alice), ("dc_b", dark_bob)):
        if s is None:
            vals[name], unc[name] = 0.0, 0.0
            if "dark-counts-assumed-zero" not in flags:
                flags.append("dark-counts-assumed-zero")
        else:
            dc = estimate_dark_counts(s)
            vals[name], unc[name] = dc.total, dc.total_err

    iso = isolate_true_coincidences(alice, bob, window, pk.center, t_delta, seed=seed,
                                    bell_correlated=bell_correlated)
    rest = estimate_epol_eta_brightness(alice, bob, iso, vals["dc_a"], vals["dc_b"], window,
                                        t_delta)
    for k, (v, u) in rest.items():
        vals[k], unc[k] = v, u

    dead = []
    for s in (alice, bob):
        try:
            dead.append(estimate_deadtime(s, deadtime_bin))
        except InsufficientDataError:
            pass
    if dead:
        d = max(dead, key=lambda e: e.value)
        vals["deadtime"], unc["deadtime"] = d.value, d.uncertainty
    else:
        vals["deadtime"], unc["deadtime"] = 0.0, 0.0
        flags.append("deadtime-unresolved")

    n_det = max(len(alice.channels), 1)
    load = max(vals["brightness"] * vals["eta_a"], vals["brightness"] * vals["eta_b"])
    if load * vals["deadtime"] / n_det > DEADTIME_BIAS_LIMIT:
        flags.append("brightness-biased-by-deadtime")
    return EstimatedParameters(vals, unc, flags, n_det, window)
