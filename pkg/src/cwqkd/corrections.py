"""Refinements of the basic rate model.

* detector deadtime as a brightness-dependent efficiency,
* exact per-window probabilities for true and accidental coincidences
  (Poisson pair emission summed to convergence),
* banks of non-identical detectors,
* key rates with basis-dependent error rates.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import SchemaError, TruncationError
from .model import (
    SCHEMA_VERSION,
    RateBreakdown,
    binary_entropy,
    coincidence_window_efficiency,
    key_rate_from_qber,
)

SERIES_TOL = 1e-12
SERIES_CAP = 10_000


# ---------------------------------------------------------------------------
# Deadtime
# ---------------------------------------------------------------------------

def deadtime_efficiency(brightness, eta_i, deadtime, d=1):
    """Non-paralyzable deadtime efficiency ``1 / (1 + B*eta_i*T/d)``.

    ``d`` identical detectors share the arm's count rate.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    x = np.asarray(brightness, dtype=float) * eta_i * deadtime / d
    return (1.0 / (1.0 + x))[()]


def accidental_rate_with_deadtime(s_m_a, s_m_b, t_cc, eta_t_a, eta_t_b):
    """Accidental rate when photons hitting dead detectors still count toward mu."""
    eta_t_a = np.asarray(eta_t_a, dtype=float)
    eta_t_b = np.asarray(eta_t_b, dtype=float)
    if np.any(eta_t_a <= 0) or np.any(eta_t_b <= 0):
        raise ValueError("deadtime efficiency must be > 0")
    return (np.asarray(s_m_a, dtype=float) * s_m_b * t_cc / (eta_t_a * eta_t_b))[()]


# ---------------------------------------------------------------------------
# Exact per-window probabilities
# ---------------------------------------------------------------------------

def dark_click_probability(dc, t_cc):
    """Probability of at least one dark click in a window, ``1 - exp(-DC*t_cc)``."""
    return (-np.expm1(-np.asarray(dc, dtype=float) * t_cc))[()]


def series_order(mu, tol=SERIES_TOL, cap=SERIES_CAP):
    """Smallest n with Poisson(mu) upper-tail mass ``P(N > n) < tol``."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    if mu == 0:
        return 0
    guess = min(cap, int(mu + 20.0 * math.sqrt(mu) + 40))
    for top in (guess, cap):
        ns = np.arange(top + 1)
        ok = np.nonzero(stats.poisson.sf(ns, mu) < tol)[0]
        if ok.size:
            return int(ok[0])
    raise TruncationError(f"Poisson tail for mu={mu} not below {tol} by n={cap}")


def _check_probs(**kw):
    for name, v in kw.items():
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")


def _log1m(x):
    with np.errstate(divide="ignore"):
        return np.log1p(-x)


def true_coincidence_probability_exact(mu, eta_a, eta_b, p_dc_a=0.0, p_dc_b=0.0,
                                       n_max=None, passive_basis=False):
    """Probability per window of a valid (undisturbed) true coincidence.

    ``mu = B*t_cc`` is the mean number of pairs per window. A pair counts if
    it is the first one detected in both arms with all earlier pairs lost in
    both arms, and no later photon or dark click lands in another detector
    of the same party (probability 1/2 per extra click, 3/4 with passive
    basis choice over four detectors).
    """
    _check_probs(eta_a=eta_a, eta_b=eta_b, p_dc_a=p_dc_a, p_dc_b=p_dc_b)
    if mu < 0:
        raise ValueError("mu must be >= 0")
    if n_max is None:
        n_max = series_order(mu)
    if mu == 0 or eta_a == 0 or eta_b == 0 or n_max < 1:
        return 0.0
    c = 0.75 if passive_basis else 0.5
    n = np.arange(1, n_max + 1, dtype=float)
    w = stats.poisson.pmf(n, mu)
    # inner sum over i is geometric: b^(n-1) * (1 - r^n) / (1 - r), r = a/b
    log_a = _log1m(eta_a) + _log1m(eta_b)
    log_b = _log1m(c * eta_a) + _log1m(c * eta_b)
    log_r = log_a - log_b
    with np.errstate(invalid="ignore"):
        if np.isfinite(log_r):
            if log_r == 0.0:
                geo = n
            else:
                geo = np.expm1(n * log_r) / np.expm1(log_r)
        else:
            geo = np.ones_like(n)
    s = np.exp((n - 1) * log_b) * geo
    dark = (1.0 - c * p_dc_a) * (1.0 - c * p_dc_b)
    return float(np.sum(w * s) * eta_a * eta_b * dark)


def _no_click_log(n, eta, p_dc):
    # log P(no click | n photons) = n*log(1-eta) + log(1-p_dc), with 0*log(0) = 0
    with np.errstate(invalid="ignore"):
        lp = np.where(n > 0, n * _log1m(eta), 0.0)
    return lp + _log1m(p_dc)


def two_party_click_probability(mu, eta_a, eta_b, p_dc_a=0.0, p_dc_b=0.0, n_max=None):
    """Probability that both parties register at least one click in a window."""
    _check_probs(eta_a=eta_a, eta_b=eta_b, p_dc_a=p_dc_a, p_dc_b=p_dc_b)
    if n_max is None:
        n_max = series_order(mu)
    n = np.arange(0, n_max + 1, dtype=float)
    w = stats.poisson.pmf(n, mu) if mu > 0 else (n == 0).astype(float)
    click_a = -np.expm1(_no_click_log(n, eta_a, p_dc_a))
    click_b = -np.expm1(_no_click_log(n, eta_b, p_dc_b))
    return float(np.sum(w * click_a * click_b))


def accidental_probability_exact(mu, eta_a, eta_b, p_dc_a=0.0, p_dc_b=0.0,
                                 n_max=None, passive_basis=False):
    """Probability per window of a two-party click that is not a valid true pair.

    Algebraically this is one minus vacuum, one-sided and true-coincidence
    events; it is evaluated as ``P(both parties click) - P^{CC^t}`` with each
    conditional click probability formed through ``expm1`` so that tiny
    probabilities (1e-14 and below) keep full relative precision.
    """
    if n_max is None:
        # the result can sit far below the absolute tail tolerance, so the
        # tolerance is scaled by the independent-click value that bounds it
        scale = -math.expm1(-(mu * eta_a + p_dc_a)) * -math.expm1(-(mu * eta_b + p_dc_b))
        n_max = series_order(mu, tol=SERIES_TOL * min(1.0, max(scale, 1e-290)))
    both = two_party_click_probability(mu, eta_a, eta_b, p_dc_a, p_dc_b, n_max)
    cct = true_coincidence_probability_exact(mu, eta_a, eta_b, p_dc_a, p_dc_b,
                                             n_max, passive_basis)
    return max(both - cct, 0.0)


# ---------------------------------------------------------------------------
# Non-identical detectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectorSpec:
    """One detector: heralding share eta, dark-count rate, jitter FWHM."""

    eta: float
    dc: float = 0.0
    jitter_fwhm: float = 70.7e-12

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise SchemaError("eta", "must lie in [0, 1]")
        if self.dc < 0:
            raise SchemaError("dc", "must be >= 0")
        if not self.jitter_fwhm > 0:
            raise SchemaError("jitter_fwhm", "must be > 0")

    def to_dict(self):
        return {"eta": self.eta, "dc": self.dc, "jitter_fwhm": self.jitter_fwhm}


@dataclass(frozen=True)
class DetectorBank:
    """Per-detector description of both receivers.

    ``e_pol_matrix[j][k]`` weights the true coincidences of combination
    (Alice j, Bob k) that enter the error count. For a correlated Bell state
    only ``j != k`` entries are used, for an anticorrelated one only ``j == k``.
    ``t_delta_override`` optionally replaces the composed pair jitter.
    """

    alice: tuple
    bob: tuple
    e_pol_matrix: np.ndarray
    bell_correlated: bool = True
    dispersion_fwhm: float = 0.0
    t_delta_override: np.ndarray | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "alice", tuple(self.alice))
        object.__setattr__(self, "bob", tuple(self.bob))
        if not self.alice or not self.bob:
            raise SchemaError("alice" if not self.alice else "bob", "detector bank is empty")
        m = np.asarray(self.e_pol_matrix, dtype=float)
        if m.shape != (len(self.alice), len(self.bob)):
            raise SchemaError("e_pol_matrix", f"expected shape {(len(self.alice), len(self.bob))}")
        if np.any((m < 0) | (m > 0.5)):
            raise SchemaError("e_pol_matrix", "entries must lie in [0, 0.5]")
        object.__setattr__(self, "e_pol_matrix", m)
        if self.t_delta_override is not None:
            o = np.asarray(self.t_delta_override, dtype=float)
            if o.shape != m.shape or np.any(o <= 0):
                raise SchemaError("t_delta_override", "must be a positive n_A x n_B matrix")
            object.__setattr__(self, "t_delta_override", o)

    @property
    def n_a(self):
        return len(self.alice)

    @property
    def n_b(self):
        return len(self.bob)

    def pair_jitter(self):
        """FWHM matrix t_delta_jk: quadrature sum of both jitters and dispersion."""
        if self.t_delta_override is not None:
            return self.t_delta_override
        fa = np.array([d.jitter_fwhm for d in self.alice])[:, None]
        fb = np.array([d.jitter_fwhm for d in self.bob])[None, :]
        return np.sqrt(fa**2 + fb**2 + self.dispersion_fwhm**2)

    def error_mask(self):
        eye = np.eye(self.n_a, self.n_b, dtype=bool)
        return ~eye if self.bell_correlated else eye

    @classmethod
    def identical(cls, params, n=None, brightness=0.0):
        """Bank of ``n`` identical detectors per party matching ``params``.

        With ``n == 2`` the bank reproduces the party-total model exactly: each
        off-diagonal error weight is ``2*e_pol`` because only half of the
        product-form true coincidences fall on wrong combinations.
        """
        n = params.detectors_per_party if n is None else n
        if n < 2:
            raise ValueError("need at least two detectors per party")
        f = float(params.t_delta(brightness)) / math.sqrt(2.0)
        alice = [DetectorSpec(params.eta_a / n, params.dc_a / n, f) for _ in range(n)]
        bob = [DetectorSpec(params.eta_b / n, params.dc_b / n, f) for _ in range(n)]
        w = params.e_pol * n / (n - 1)
        if w > 0.5:
            raise ValueError("e_pol too large to spread over the wrong combinations")
        m = np.full((n, n), w)
        np.fill_diagonal(m, 0.0)
        return cls(alice, bob, m)

    def to_dict(self):
        d = {
            "alice": [x.to_dict() for x in self.alice],
            "bob": [x.to_dict() for x in self.bob],
            "e_pol_matrix": self.e_pol_matrix.tolist(),
            "bell_correlated": self.bell_correlated,
            "dispersion_fwhm": self.dispersion_fwhm,
        }
        if self.t_delta_override is not None:
            d["t_delta_override"] = self.t_delta_override.tolist()
        return d

    def to_json(self, **kw):
        return json.dumps({"schema_version": SCHEMA_VERSION, **self.to_dict()}, **kw)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise SchemaError("bank", "expected a JSON object")
        known = {"alice", "bob", "e_pol_matrix", "bell_correlated", "dispersion_fwhm",
                 "t_delta_override", "schema_version"}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(sorted(unknown)[0], "unknown field")
        for req in ("alice", "bob", "e_pol_matrix"):
            if req not in d:
                raise SchemaError(req, "missing required field")

        def det(x, where):
            if not isinstance(x, dict) or "eta" not in x:
                raise SchemaError(where, "detector record needs at least 'eta'")
            extra = set(x) - {"eta", "dc", "jitter_fwhm"}
            if extra:
                raise SchemaError(f"{where}.{sorted(extra)[0]}", "unknown field")
            return DetectorSpec(**{k: float(v) for k, v in x.items()})

        alice = [det(x, f"alice[{i}]") for i, x in enumerate(d["alice"])]
        bob = [det(x, f"bob[{i}]") for i, x in enumerate(d["bob"])]
        return cls(alice, bob, np.asarray(d["e_pol_matrix"], dtype=float),
                   bool(d.get("bell_correlated", True)),
                   float(d.get("dispersion_fwhm", 0.0)),
                   d.get("t_delta_override"))

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError("<document>", f"malformed JSON ({exc})") from None
        return cls.from_dict(d)


def bank_rate_report(bank, op, q_sift=0.5, f_ec=1.1):
    """Rate breakdown for a bank of non-identical detectors at ``op``.

    Sums per-combination true and accidental coincidences; errors collect
    the wrong combinations (``j != k`` for correlated states) including
    their full accidental rate.
    """
    b = float(op.brightness)
    t_cc = float(op.t_cc)
    eta_a = np.array([d.eta for d in bank.alice])
    eta_b = np.array([d.eta for d in bank.bob])
    dc_a = np.array([d.dc for d in bank.alice])
    dc_b = np.array([d.dc for d in bank.bob])

    s_a = b * eta_a + dc_a
    s_b = b * eta_b + dc_b
    cct = b * np.outer(eta_a, eta_b)
    acc = np.outer(s_a, s_b) * t_cc
    win = coincidence_window_efficiency(t_cc, bank.pair_jitter())
    signal = win * cct

    mask = bank.error_mask()
    cc_true = cct.sum()
    cc_m = signal.sum() + acc.sum()
    cc_err = (signal * bank.e_pol_matrix)[mask].sum() + acc[mask].sum()
    if cc_m > 0:
        e = min(cc_err / cc_m, 0.5)
    else:
        e = float("nan")
    eta_window = signal.sum() / cc_true if cc_true > 0 else float(np.mean(win))
    key = key_rate_from_qber(cc_m, e, q=q_sift, f=f_ec)
    return RateBreakdown(
        s_m_a=float(s_a.sum()), s_m_b=float(s_b.sum()), cc_true=float(cc_true),
        eta_window=float(eta_window), cc_acc=float(acc.sum()), cc_measured=float(cc_m),
        cc_err=float(cc_err), qber=float(e), key_rate=float(key),
    )


# ---------------------------------------------------------------------------
# Basis-dependent key rates
# ---------------------------------------------------------------------------

BASIS_KEY_MODES = ("two-basis-sum", "efficient", "averaged-bound")


def basis_dependent_key_rates(cc_m, e_hv, e_da, p_hv=0.5, f_ec=1.1, mode="two-basis-sum"):
    """Key rate when the two bases show different QBERs.

    ``two-basis-sum``: key from HV rounds (prob p^2) plus DA rounds (prob
    (1-p)^2), each basis using its own QBER as bit error and the other as
    phase error. ``efficient``: p -> 1. ``averaged-bound``: the symmetric
    formula at the mean error with ``q = p^2 + (1-p)^2``. Each key term is
    clamped at zero.
    """
    for name, v in (("e_hv", e_hv), ("e_da", e_da)):
        if not 0.0 <= v <= 0.5:
            raise ValueError(f"{name} must lie in [0, 0.5]")
    if not 0.0 <= p_hv <= 1.0:
        raise ValueError("p_hv must lie in [0, 1]")
    h_hv, h_da = binary_entropy(e_hv), binary_entropy(e_da)
    if mode == "two-basis-sum":
        r_hv = p_hv**2 * cc_m * (1.0 - h_da - f_ec * h_hv)
        r_da = (1.0 - p_hv) ** 2 * cc_m * (1.0 - h_hv - f_ec * h_da)
        return float(max(r_hv, 0.0) + max(r_da, 0.0))
    if mode == "efficient":
        return float(max(cc_m * (1.0 - h_da - f_ec * h_hv), 0.0))
    if mode == "averaged-bound":
        q = p_hv**2 + (1.0 - p_hv) ** 2
        return float(key_rate_from_qber(cc_m, 0.5 * (e_hv + e_da), q=q, f=f_ec))
    raise ValueError(f"unknown mode {mode!r}")
