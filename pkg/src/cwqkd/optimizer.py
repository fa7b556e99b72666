"""Joint maximization of the secure key rate over brightness and window.

The objective is not proven unimodal, so every optimization starts from a
dense logarithmic grid and then refines the best grid cell coordinate by
coordinate with golden-section searches in log space.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SchemaError, ZeroKeyError
from .model import (
    SCHEMA_VERSION,
    JitterModel,
    LinkParameters,
    OperatingPoint,
    coincidence_window_efficiency,
    rate_breakdown,
    true_coincidence_rate,
)

__all__ = [
    "JitterModel", "Bounds", "Optimum", "SweepSpec", "SweepPoint",
    "golden_section_max", "optimize_operating_point", "sweep_loss_curve",
    "masking_threshold", "sweep_to_csv", "sweep_to_json", "noisy_link_template", "with_jitter",
]

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
SWEEP_COLUMNS = ("loss_db", "b_opt", "tcc_opt", "qber", "key_rate")


@dataclass(frozen=True)
class Bounds:
    """Search box. ``t_cc=None`` means ``[t_delta/10, 10*t_delta]``."""

    brightness: tuple = (1e3, 1e10)
    t_cc: tuple | None = None

    def resolve(self, params):
        b_lo, b_hi = map(float, self.brightness)
        if not 0 < b_lo < b_hi:
            raise ValueError("brightness bounds must be positive and ordered")
        if self.t_cc is None:
            td = np.asarray(params.t_delta(np.array([b_lo, b_hi])), dtype=float)
            t_lo, t_hi = float(td.min()) / 10.0, float(td.max()) * 10.0
        else:
            t_lo, t_hi = map(float, self.t_cc)
        if not 0 < t_lo < t_hi:
            raise ValueError("t_cc bounds must be positive and ordered")
        return (b_lo, b_hi), (t_lo, t_hi)

    def to_dict(self):
        return {"brightness": list(self.brightness),
                "t_cc": None if self.t_cc is None else list(self.t_cc)}


@dataclass
class Optimum:
    op: OperatingPoint
    key_rate: float
    qber: float
    iterations: int = 0
    bracket_widths: tuple = (0.0, 0.0)
    gradient: tuple = (0.0, 0.0)
    at_bound: tuple = (False, False)
    grid_best: float = 0.0
    evaluations: int = 0
    zero_key: bool = False

    def to_dict(self):
        return {
            "operating_point": self.op.to_dict(),
            "key_rate": float(self.key_rate),
            "qber": None if math.isnan(self.qber) else float(self.qber),
            "zero_key": bool(self.zero_key),
            "diagnostics": {
                "iterations": int(self.iterations),
                "bracket_widths": [float(v) for v in self.bracket_widths],
                "normalized_gradient": [float(v) for v in self.gradient],
                "at_bound": [bool(v) for v in self.at_bound],
                "grid_best_key_rate": float(self.grid_best),
                "evaluations": int(self.evaluations),
            },
        }


def golden_section_max(f, lo, hi, tol):
    """Maximize a unimodal ``f`` on ``[lo, hi]`` until the bracket is < ``tol``.

    Returns ``(x_best, f_best, bracket_width)``; ``x_best`` is the best point
    actually evaluated, never an interpolated guess.
    """
    a, b = lo, hi
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    best = max((fc, c), (fd, d))
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
            best = max(best, (fc, c))
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
            best = max(best, (fd, d))
    return best[1], best[0], b - a


class _Objective:
    """Key rate as a function of (log B, log t_cc), with an evaluation counter."""

    def __init__(self, params, accidentals, deadtime_correction):
        self.params = params
        self.kw = {"accidentals": accidentals, "deadtime_correction": deadtime_correction}
        self.calls = 0

    def grid(self, log_b, log_t):
        lb, lt = np.meshgrid(log_b, log_t, indexing="ij")
        rb = rate_breakdown(self.params, OperatingPoint(np.exp(lb), np.exp(lt)), **self.kw)
        self.calls += lb.size
        return rb

    def __call__(self, log_b, log_t):
        self.calls += 1
        op = OperatingPoint(math.exp(log_b), math.exp(log_t))
        return float(rate_breakdown(self.params, op, **self.kw).key_rate)


def _finite_gradient(obj, x, bounds_log, h=1e-3):
    """Central differences of ln R with respect to ln B and ln t_cc."""
    r0 = obj(*x)
    g = []
    for i in range(2):
        lo, hi = bounds_log[i]
        xp, xm = list(x), list(x)
        xp[i] = min(x[i] + h, hi)
        xm[i] = max(x[i] - h, lo)
        if r0 <= 0 or xp[i] == xm[i]:
            g.append(0.0)
            continue
        g.append((obj(*xp) - obj(*xm)) / ((xp[i] - xm[i]) * r0))
    return tuple(g)


def _zero_key_point(params, rb, log_b, log_t):
    q = np.where(np.isnan(rb.qber), np.inf, rb.qber)
    i, j = np.unravel_index(np.argmin(q), q.shape)
    op = OperatingPoint(float(np.exp(log_b[i])), float(np.exp(log_t[j])))
    return Optimum(op=op, key_rate=0.0, qber=float(rb.qber[i, j]), zero_key=True)


def optimize_operating_point(params, bounds=None, grid=(40, 40), rel_tol=1e-4,
                             accidentals="linearized", deadtime_correction=False,
                             max_cycles=200, _grid_box=None):
    """Find (B, t_cc) maximizing the key rate for ``params``.

    A ``grid[0] x grid[1]`` log grid is scanned first; the best cell is then
    refined by alternating golden-section searches until both relative
    bracket widths drop below ``rel_tol`` and a full cycle moves neither
    coordinate by more than ``rel_tol``. Raises :class:`ZeroKeyError` (with
    the lowest-QBER grid point attached) when no grid point gives key.
    """
    bounds = bounds or Bounds()
    (b_lo, b_hi), (t_lo, t_hi) = bounds.resolve(params)
    box = [(math.log(b_lo), math.log(b_hi)), (math.log(t_lo), math.log(t_hi))]
    gbox = _grid_box or box
    obj = _Objective(params, accidentals, deadtime_correction)

    log_b = np.linspace(*gbox[0], grid[0])
    log_t = np.linspace(*gbox[1], grid[1])
    rb = obj.grid(log_b, log_t)
    keys = np.asarray(rb.key_rate)
    if not np.any(keys > 0):
        best = _zero_key_point(params, rb, log_b, log_t)
        best.evaluations = obj.calls
        raise ZeroKeyError("no operating point in the search box yields key", best=best)
    i, j = np.unravel_index(np.argmax(keys), keys.shape)
    grid_best = float(keys[i, j])
    x = [float(log_b[i]), float(log_t[j])]
    f_best = grid_best

    axes = (log_b, log_t)
    idx = (i, j)
    brackets = []
    for k in range(2):
        a = axes[k][max(idx[k] - 1, 0)]
        b = axes[k][min(idx[k] + 1, len(axes[k]) - 1)]
        brackets.append([max(a, box[k][0]), min(b, box[k][1])])

    # log-space widths; relative width of a bracket [x e^-w/2, x e^w/2] is ~w
    tol = rel_tol / 10.0
    widths = [0.0, 0.0]
    cycles = 0
    while cycles < max_cycles:
        cycles += 1
        moved = 0.0
        for k in range(2):
            lo, hi = brackets[k]
            if k == 0:
                xk, fk, w = golden_section_max(lambda v: obj(v, x[1]), lo, hi, tol)
            else:
                xk, fk, w = golden_section_max(lambda v: obj(x[0], v), lo, hi, tol)
            widths[k] = w
            if fk > f_best:
                moved = max(moved, abs(xk - x[k]))
                x[k], f_best = xk, fk
        if moved < rel_tol:
            break
        for k in range(2):
            half = max(4.0 * moved, 20.0 * tol)
            brackets[k] = [max(x[k] - half, box[k][0]), min(x[k] + half, box[k][1])]

    op = OperatingPoint(math.exp(x[0]), math.exp(x[1]))
    final = rate_breakdown(params, op, accidentals=accidentals,
                           deadtime_correction=deadtime_correction)
    edge = 10 * tol
    at_bound = tuple(bool(x[k] - box[k][0] < edge or box[k][1] - x[k] < edge) for k in range(2))
    return Optimum(
        op=op,
        key_rate=float(final.key_rate),
        qber=float(final.qber),
        iterations=cycles,
        bracket_widths=tuple(math.expm1(w) for w in widths),
        gradient=_finite_gradient(obj, x, box),
        at_bound=at_bound,
        grid_best=grid_best,
        evaluations=obj.calls,
    )


def masking_threshold(params, op, factor=10.0):
    """True when the dark-count accidental floor masks the true coincidences.

    The floor is ``DC_a * DC_b * t_cc``; the signal is masked when the
    in-window true coincidences do not exceed ``factor`` times it.
    """
    floor = params.dc_a * params.dc_b * op.t_cc
    if floor <= 0:
        return False
    t_delta = float(params.t_delta(op.brightness))
    signal = coincidence_window_efficiency(op.t_cc, t_delta) * true_coincidence_rate(params, op)
    return bool(signal <= factor * floor)


# ---------------------------------------------------------------------------
# Loss sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    """Loss sweep definition.

    Each grid value is a total link loss in dB; ``alice_fraction`` of it is
    assigned to Alice's arm. ``eta_i = intrinsic_eta_i * 10**(-loss_i/10)``.
    """

    loss_db: tuple
    template: LinkParameters
    alice_fraction: float = 0.5
    intrinsic_eta_a: float = 1.0
    intrinsic_eta_b: float = 1.0
    bounds: Bounds = field(default_factory=Bounds)
    grid: tuple = (40, 40)
    warm_start: bool = True
    accidentals: str = "linearized"
    deadtime_correction: bool = False

    def __post_init__(self):
        object.__setattr__(self, "loss_db", tuple(float(x) for x in self.loss_db))
        if not self.loss_db:
            raise SchemaError("loss_db", "loss grid is empty")
        if not 0.0 <= self.alice_fraction <= 1.0:
            raise SchemaError("alice_fraction", "must lie in [0, 1]")

    def link_at(self, loss_db):
        la = self.alice_fraction * loss_db
        return self.template.with_loss_db(la, loss_db - la, self.intrinsic_eta_a, self.intrinsic_eta_b)

    def to_dict(self):
        return {
            "loss_db": list(self.loss_db),
            "template": self.template.to_dict(),
            "alice_fraction": self.alice_fraction,
            "intrinsic_eta_a": self.intrinsic_eta_a,
            "intrinsic_eta_b": self.intrinsic_eta_b,
            "bounds": self.bounds.to_dict(),
            "grid": list(self.grid),
            "warm_start": self.warm_start,
            "accidentals": self.accidentals,
            "deadtime_correction": self.deadtime_correction,
        }

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise SchemaError("sweep", "expected a JSON object")
        known = {"loss_db", "template", "alice_fraction", "intrinsic_eta_a", "intrinsic_eta_b",
                 "bounds", "grid", "warm_start", "accidentals", "deadtime_correction",
                 "schema_version"}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(sorted(unknown)[0], "unknown field")
        for req in ("loss_db", "template"):
            if req not in d:
                raise SchemaError(req, "missing required field")
        kw = dict(d)
        kw.pop("schema_version", None)
        kw["template"] = LinkParameters.from_dict(d["template"])
        loss = d["loss_db"]
        if isinstance(loss, dict):
            try:
                loss = np.arange(loss["start"], loss["stop"] + 0.5 * loss["step"], loss["step"])
            except KeyError as exc:
                raise SchemaError(f"loss_db.{exc.args[0]}", "missing range key") from None
        kw["loss_db"] = tuple(loss)
        if "bounds" in d:
            bd = d["bounds"] or {}
            kw["bounds"] = Bounds(tuple(bd.get("brightness", (1e3, 1e10))),
                                  None if bd.get("t_cc") is None else tuple(bd["t_cc"]))
        if "grid" in d:
            kw["grid"] = tuple(int(v) for v in d["grid"])
        return cls(**kw)

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError("<document>", f"malformed JSON ({exc})") from None
        return cls.from_dict(d)


@dataclass
class SweepPoint:
    loss_db: float
    optimum: Optimum

    def row(self):
        o = self.optimum
        return (self.loss_db, o.op.brightness, o.op.t_cc, o.qber, o.key_rate)


def _warm_box(prev, box, span_b=math.log(30.0), span_t=math.log(3.0)):
    lb, lt = math.log(prev.op.brightness), math.log(prev.op.t_cc)
    return [
        (max(lb - span_b, box[0][0]), min(lb + span_b, box[0][1])),
        (max(lt - span_t, box[1][0]), min(lt + span_t, box[1][1])),
    ]


def _optimize_point(spec, params, prev):
    kw = {"accidentals": spec.accidentals, "deadtime_correction": spec.deadtime_correction}
    if spec.warm_start and prev is not None and not prev.zero_key:
        (b_lo, b_hi), (t_lo, t_hi) = spec.bounds.resolve(params)
        box = [(math.log(b_lo), math.log(b_hi)), (math.log(t_lo), math.log(t_hi))]
        wbox = _warm_box(prev, box)
        try:
            opt = optimize_operating_point(params, spec.bounds, grid=(15, 15),
                                           _grid_box=wbox, **kw)
        except ZeroKeyError:
            opt = None
        if opt is not None:
            x = (math.log(opt.op.brightness), math.log(opt.op.t_cc))
            inside = all(
                (x[k] - wbox[k][0] > 1e-3 or wbox[k][0] == box[k][0])
                and (wbox[k][1] - x[k] > 1e-3 or wbox[k][1] == box[k][1])
                for k in range(2)
            )
            if inside:
                return opt
    try:
        return optimize_operating_point(params, spec.bounds, grid=spec.grid, **kw)
    except ZeroKeyError as exc:
        return exc.best


def sweep_loss_curve(spec):
    """Optimize every loss point of ``spec``; zero-key points are kept as zeros.

    With ``warm_start`` each point first searches a local box around the
    previous optimum and falls back to the full grid if the local optimum
    sits on the local box edge or no key is found.
    """
    out = []
    prev = None
    for loss in spec.loss_db:
        opt = _optimize_point(spec, spec.link_at(loss), prev)
        out.append(SweepPoint(loss, opt))
        prev = opt
    return out


def sweep_to_csv(points):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for p in points:
        w.writerow([repr(float(v)) for v in p.row()])
    return buf.getvalue()


def sweep_to_json(points, spec=None, **kw):
    doc = {
        "schema_version": SCHEMA_VERSION,
        "columns": list(SWEEP_COLUMNS),
        "points": [{"loss_db": p.loss_db, **p.optimum.to_dict()} for p in points],
    }
    if spec is not None:
        doc["spec"] = spec.to_dict()
    return json.dumps(doc, **kw)


def noisy_link_template(t_delta=100e-12, dc_per_detector=250.0, detectors=4, e_pol=0.01):
    """Unit-efficiency template with ``detectors`` noisy detectors per party."""
    dc = dc_per_detector * detectors
    return LinkParameters(eta_a=1.0, eta_b=1.0, dc_a=dc, dc_b=dc, e_pol=e_pol,
                          jitter=JitterModel.constant(t_delta), detectors_per_party=detectors)


def with_jitter(params, t_delta):
    return replace(params, jitter=JitterModel.constant(t_delta))
