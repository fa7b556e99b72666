"""Closed-form rate model for CW-pumped entanglement-based QKD.

Everything is in SI units: seconds for times, counts per second (cps) for
rates. The functions broadcast over numpy arrays so that the optimizer can
evaluate whole grids of operating points in one call.

Typical use::

    >>> link = LinkParameters(eta_a=0.1, eta_b=0.1, dc_a=250, dc_b=250,
    ...                       e_pol=0.01, jitter=JitterModel(t_delta_0=100e-12))
    >>> rb = rate_breakdown(link, OperatingPoint(brightness=1e6, t_cc=300e-12))
    >>> round(float(rb.key_rate), 1)
    4140.9
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import special

from .errors import NoSignalError, SchemaError

SCHEMA_VERSION = 1

SQRT_LN2 = math.sqrt(math.log(2.0))
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

ACCIDENTAL_MODES = ("linearized", "poisson")
BASIS_MODES = ("symmetric", "general")


# ---------------------------------------------------------------------------
# Parameter types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JitterModel:
    """Timing imprecision t_delta (FWHM, seconds) as a function of brightness.

    ``kind="constant"`` ignores ``slope``; ``kind="linear-in-brightness"``
    evaluates ``t_delta_0 + slope * B``. Coefficients of the linear model
    have no defaults worth trusting and must come from a fit of measured data.
    """

    kind: str = "constant"
    t_delta_0: float = 100e-12
    slope: float = 0.0

    def __post_init__(self):
        if self.kind == "linear":
            object.__setattr__(self, "kind", "linear-in-brightness")
        if self.kind not in ("constant", "linear-in-brightness"):
            raise SchemaError("jitter.kind", f"unknown jitter model {self.kind!r}")
        if not self.t_delta_0 > 0:
            raise SchemaError("jitter.t_delta_0", "must be > 0")

    def __call__(self, brightness=0.0):
        if self.kind == "constant":
            return np.broadcast_to(np.float64(self.t_delta_0), np.shape(brightness))[()]
        t = self.t_delta_0 + self.slope * np.asarray(brightness, dtype=float)
        if np.any(t <= 0):
            raise ValueError("jitter model evaluates to t_delta <= 0")
        return t[()]

    @classmethod
    def constant(cls, t_delta):
        return cls("constant", float(t_delta), 0.0)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, (int, float)) and not isinstance(d, bool):
            return cls.constant(d)
        if not isinstance(d, dict):
            raise SchemaError("jitter", "expected an object or a number")
        unknown = set(d) - {"kind", "t_delta_0", "slope"}
        if unknown:
            raise SchemaError(f"jitter.{sorted(unknown)[0]}", "unknown field")
        kw = {}
        for name in ("t_delta_0", "slope"):
            if name in d:
                kw[name] = _as_float(d[name], f"jitter.{name}")
        if "kind" in d:
            if not isinstance(d["kind"], str):
                raise SchemaError("jitter.kind", "expected a string")
            kw["kind"] = d["kind"]
        return cls(**kw)


@dataclass(frozen=True)
class LinkParameters:
    """Fixed physical parameters of a link.

    ``dc_a``/``dc_b`` are per-receiver totals, i.e. already summed over the
    ``detectors_per_party`` detectors. ``e_pol`` is the combined polarization
    error (see :func:`combined_polarization_error` to compose it from the two
    arms).
    """

    eta_a: float
    eta_b: float
    dc_a: float = 0.0
    dc_b: float = 0.0
    e_pol: float = 0.0
    jitter: JitterModel = field(default_factory=JitterModel)
    deadtime: float = 0.0
    detectors_per_party: int = 2
    q_sift: float = 0.5
    f_ec: float = 1.1

    def __post_init__(self):
        if isinstance(self.jitter, (int, float)):
            object.__setattr__(self, "jitter", JitterModel.constant(self.jitter))
        for name in ("eta_a", "eta_b"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SchemaError(name, f"must lie in [0, 1], got {v}")
        for name in ("dc_a", "dc_b", "deadtime"):
            if getattr(self, name) < 0:
                raise SchemaError(name, "must be >= 0")
        if not 0.0 <= self.e_pol <= 0.5:
            raise SchemaError("e_pol", f"must lie in [0, 0.5], got {self.e_pol}")
        if int(self.detectors_per_party) != self.detectors_per_party or self.detectors_per_party < 1:
            raise SchemaError("detectors_per_party", "must be a positive integer")
        if not 0.0 < self.q_sift <= 1.0:
            raise SchemaError("q_sift", "must lie in (0, 1]")
        if not self.f_ec >= 1.0:
            raise SchemaError("f_ec", "must be >= 1")

    def t_delta(self, brightness=0.0):
        return self.jitter(brightness)

    def with_loss_db(self, loss_a_db, loss_b_db, intrinsic_a=1.0, intrinsic_b=1.0):
        """Copy with ``eta_i = intrinsic_i * 10**(-loss_i/10)``."""
        return replace(
            self,
            eta_a=intrinsic_a * 10.0 ** (-loss_a_db / 10.0),
            eta_b=intrinsic_b * 10.0 ** (-loss_b_db / 10.0),
        )

    def to_dict(self):
        d = asdict(self)
        d["jitter"] = self.jitter.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise SchemaError("link", "expected a JSON object")
        if "link" in d and isinstance(d["link"], dict):
            d = d["link"]
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names - {"schema_version"}
        if unknown:
            raise SchemaError(sorted(unknown)[0], "unknown field")
        for req in ("eta_a", "eta_b"):
            if req not in d:
                raise SchemaError(req, "missing required field")
        kw = {}
        for name in names:
            if name not in d:
                continue
            if name == "jitter":
                kw[name] = JitterModel.from_dict(d[name])
            elif name == "detectors_per_party":
                v = d[name]
                if isinstance(v, bool) or not isinstance(v, int):
                    raise SchemaError(name, "expected an integer")
                kw[name] = v
            else:
                kw[name] = _as_float(d[name], name)
        return cls(**kw)

    def to_json(self, **kw):
        return json.dumps({"schema_version": SCHEMA_VERSION, **self.to_dict()}, **kw)

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError("<document>", f"malformed JSON ({exc})") from None
        return cls.from_dict(d)


@dataclass(frozen=True)
class OperatingPoint:
    """The free variables: brightness B (pairs/s), window t_cc and delay t_d (s)."""

    brightness: float
    t_cc: float
    t_d: float = 0.0

    def __post_init__(self):
        if np.any(np.asarray(self.brightness) < 0):
            raise SchemaError("brightness", "must be >= 0")
        if np.any(np.asarray(self.t_cc) <= 0):
            raise SchemaError("t_cc", "must be > 0")

    def to_dict(self):
        return {k: float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise SchemaError("op", "expected a JSON object")
        if "operating_point" in d and isinstance(d["operating_point"], dict):
            d = d["operating_point"]
        names = {"brightness", "t_cc", "t_d"}
        unknown = set(d) - names - {"schema_version"}
        if unknown:
            raise SchemaError(sorted(unknown)[0], "unknown field")
        for req in ("brightness", "t_cc"):
            if req not in d:
                raise SchemaError(req, "missing required field")
        return cls(**{k: _as_float(d[k], k) for k in names if k in d})

    def to_json(self, **kw):
        return json.dumps({"schema_version": SCHEMA_VERSION, **self.to_dict()}, **kw)

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError("<document>", f"malformed JSON ({exc})") from None
        return cls.from_dict(d)


@dataclass(frozen=True)
class RateBreakdown:
    """All intermediate rates for one (or an array of) operating point(s).

    ``qber`` is NaN where nothing is measured; ``no_signal`` flags those points.
    """

    s_m_a: np.ndarray
    s_m_b: np.ndarray
    cc_true: np.ndarray
    eta_window: np.ndarray
    cc_acc: np.ndarray
    cc_measured: np.ndarray
    cc_err: np.ndarray
    qber: np.ndarray
    key_rate: np.ndarray

    @property
    def no_signal(self):
        return np.asarray(self.cc_measured) <= 0

    @property
    def visibility(self):
        return 1.0 - 2.0 * np.asarray(self.qber)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = np.asarray(getattr(self, f.name), dtype=float)
            if v.ndim == 0:
                out[f.name] = None if math.isnan(v) else float(v)
            else:
                out[f.name] = [None if math.isnan(x) else float(x) for x in v.ravel()]
        out["no_signal"] = bool(np.all(self.no_signal)) if np.ndim(self.cc_measured) == 0 else [
            bool(x) for x in np.ravel(self.no_signal)]
        return out


def _as_float(v, name):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(name, f"expected a number, got {type(v).__name__}")
    if not math.isfinite(v):
        raise SchemaError(name, "must be finite")
    return float(v)


# ---------------------------------------------------------------------------
# Elementary relations
# ---------------------------------------------------------------------------

def _effective_etas(params, brightness, deadtime_correction):
    eta_a, eta_b = params.eta_a, params.eta_b
    if not deadtime_correction:
        return eta_a, eta_b, 1.0, 1.0
    from .corrections import deadtime_efficiency

    d = params.detectors_per_party
    eta_t_a = deadtime_efficiency(brightness, eta_a, params.deadtime, d)
    eta_t_b = deadtime_efficiency(brightness, eta_b, params.deadtime, d)
    return eta_a * eta_t_a, eta_b * eta_t_b, eta_t_a, eta_t_b


def singles_rates(params, op, deadtime_correction=False):
    """Measured single-count rates ``S^m_i = B*eta_i + DC_i``.

    With ``deadtime_correction`` each eta_i is first multiplied by the
    detector deadtime efficiency.
    """
    b = np.asarray(op.brightness, dtype=float)
    eta_a, eta_b, _, _ = _effective_etas(params, b, deadtime_correction)
    return (b * eta_a + params.dc_a)[()], (b * eta_b + params.dc_b)[()]


def true_coincidence_rate(params, op, deadtime_correction=False):
    b = np.asarray(op.brightness, dtype=float)
    eta_a, eta_b, _, _ = _effective_etas(params, b, deadtime_correction)
    return (b * eta_a * eta_b)[()]


def heralding_from_rates(cc_true, s_t_a, s_t_b):
    """Heralding efficiencies from true coincidences and noise-free singles.

    Returns ``(eta_a, eta_b, eta)`` with ``eta = sqrt(eta_a*eta_b)``.
    """
    if s_t_a == 0 or s_t_b == 0:
        raise ZeroDivisionError("singles rate is zero; heralding efficiency undefined")
    eta_a = cc_true / s_t_b
    eta_b = cc_true / s_t_a
    return eta_a, eta_b, math.sqrt(eta_a * eta_b)


def combined_polarization_error(e_a, e_b):
    """Probability that exactly one of the two arms flips the outcome."""
    for name, v in (("e_a", e_a), ("e_b", e_b)):
        if not 0.0 <= v <= 0.5:
            raise ValueError(f"{name} must lie in [0, 0.5], got {v}")
    return e_a * (1.0 - e_b) + e_b * (1.0 - e_a)


def split_polarization_error(e_pol):
    """Per-arm error ``e`` such that two equal arms compose to ``e_pol``."""
    if not 0.0 <= e_pol <= 0.5:
        raise ValueError(f"e_pol must lie in [0, 0.5], got {e_pol}")
    return 0.5 * (1.0 - math.sqrt(1.0 - 2.0 * e_pol))


def accidental_probability(s_m_a, s_m_b, t_cc, mode="poisson"):
    """Probability of an accidental two-party click per coincidence window.

    ``mode="poisson"``: ``(1-exp(-mu_a))(1-exp(-mu_b))`` with ``mu_i = S^m_i t_cc``.
    ``mode="linearized"``: ``mu_a * mu_b``.
    """
    mu_a = np.asarray(s_m_a, dtype=float) * t_cc
    mu_b = np.asarray(s_m_b, dtype=float) * t_cc
    if mode == "poisson":
        return (-np.expm1(-mu_a) * -np.expm1(-mu_b))[()]
    if mode == "linearized":
        return (mu_a * mu_b)[()]
    raise ValueError(f"unknown accidental mode {mode!r}")


def accidental_rate(s_m_a, s_m_b, t_cc):
    return (np.asarray(s_m_a, dtype=float) * s_m_b * t_cc)[()]


def g2_density(t, t_delta, t_d=0.0):
    """Normalized Gaussian correlation peak with FWHM ``t_delta`` at ``t_d``."""
    if not np.all(np.asarray(t_delta) > 0):
        raise ValueError("t_delta must be > 0")
    t = np.asarray(t, dtype=float)
    peak = 2.0 / t_delta * math.sqrt(math.log(2.0) / math.pi)
    return (peak * np.exp(-4.0 * math.log(2.0) / t_delta**2 * (t - t_d) ** 2))[()]


def coincidence_window_efficiency(t_cc, t_delta):
    """Fraction of the correlation peak inside a window of full width ``t_cc``."""
    return special.erf(SQRT_LN2 * np.asarray(t_cc, dtype=float) / t_delta)[()]


def binary_entropy(x):
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise ValueError("binary entropy argument must lie in [0, 1]")
    return ((special.entr(x) + special.entr(1.0 - x)) / math.log(2.0))[()]


def visibility(qber):
    return 1.0 - 2.0 * qber


def key_rate_from_qber(cc_measured, e_bit, e_ph=None, q=0.5, f=1.1):
    """``q*CC^m*[1 - f*H2(E_bit) - H2(E_ph)]`` clamped at zero.

    NaN error rates (no signal) give zero key.
    """
    e_bit = np.asarray(e_bit, dtype=float)
    e_ph = e_bit if e_ph is None else np.asarray(e_ph, dtype=float)
    bad = np.isnan(e_bit) | np.isnan(e_ph)
    hb = binary_entropy(np.where(bad, 0.5, e_bit))
    hp = binary_entropy(np.where(bad, 0.5, e_ph))
    raw = q * np.asarray(cc_measured, dtype=float) * (1.0 - f * hb - hp)
    return np.where(bad, 0.0, np.maximum(raw, 0.0))[()]


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

def rate_breakdown(params, op, accidentals="linearized", deadtime_correction=False):
    """Evaluate the full model at one or many operating points.

    ``op.brightness`` and ``op.t_cc`` may be arrays; they broadcast. The
    jitter model is evaluated at the brightness of each point.
    """
    if accidentals not in ACCIDENTAL_MODES:
        raise ValueError(f"unknown accidental mode {accidentals!r}")
    b = np.asarray(op.brightness, dtype=float)
    t_cc = np.asarray(op.t_cc, dtype=float)
    eta_a, eta_b, eta_t_a, eta_t_b = _effective_etas(params, b, deadtime_correction)

    s_m_a = b * eta_a + params.dc_a
    s_m_b = b * eta_b + params.dc_b
    cc_true = b * eta_a * eta_b
    t_delta = params.t_delta(b)
    eta_window = coincidence_window_efficiency(t_cc, t_delta)
    if accidentals == "linearized":
        cc_acc = s_m_a * s_m_b * t_cc
    else:
        cc_acc = accidental_probability(s_m_a, s_m_b, t_cc, "poisson") / t_cc
    if deadtime_correction:
        cc_acc = cc_acc / (eta_t_a * eta_t_b)

    signal = eta_window * cc_true
    cc_measured = signal + cc_acc
    cc_err = signal * params.e_pol + 0.5 * cc_acc
    with np.errstate(invalid="ignore", divide="ignore"):
        qber = np.where(cc_measured > 0, cc_err / np.where(cc_measured > 0, cc_measured, 1.0), np.nan)
    qber = np.minimum(qber, 0.5)
    key = key_rate_from_qber(cc_measured, qber, q=params.q_sift, f=params.f_ec)

    shape = np.broadcast(b, t_cc).shape
    def out(x):
        return np.broadcast_to(np.asarray(x, dtype=float), shape)[()]

    return RateBreakdown(
        s_m_a=out(s_m_a), s_m_b=out(s_m_b), cc_true=out(cc_true),
        eta_window=out(eta_window), cc_acc=out(cc_acc), cc_measured=out(cc_measured),
        cc_err=out(cc_err), qber=out(qber), key_rate=out(key),
    )


def measured_and_error_rates(params, op, **kw):
    rb = rate_breakdown(params, op, **kw)
    return rb.cc_measured, rb.cc_err


def qber(params, op, **kw):
    """QBER ``E = CC^err / CC^m``; raises :class:`NoSignalError` if CC^m == 0."""
    rb = rate_breakdown(params, op, **kw)
    if np.any(rb.no_signal):
        raise NoSignalError("no coincidences measured; QBER undefined")
    return rb.qber


def secure_key_rate(params, op, basis_mode="symmetric", e_bit=None, e_ph=None, **kw):
    """Asymptotic secure key rate in bits/s, clamped at zero.

    ``basis_mode="symmetric"`` uses the model QBER for both bit and phase
    error; with the default ``q_sift=1/2`` and ``f_ec=1.1`` it is
    ``CC^m/2 * (1 - 2.1*H2(E))``. ``basis_mode="general"`` takes explicit
    ``e_bit``/``e_ph`` (either defaults to the model QBER when omitted).
    """
    rb = rate_breakdown(params, op, **kw)
    if basis_mode == "symmetric":
        return rb.key_rate
    if basis_mode != "general":
        raise ValueError(f"unknown basis mode {basis_mode!r}")
    e_bit = rb.qber if e_bit is None else e_bit
    e_ph = rb.qber if e_ph is None else e_ph
    return key_rate_from_qber(rb.cc_measured, e_bit, e_ph, q=params.q_sift, f=params.f_ec)
