"""Command-line interface: ``cwqkd {predict,optimize,sweep,simulate,estimate,verify}``.

Exit codes: 0 success, 1 usage error, 2 schema error, 3 verification failure.
Every JSON document written carries ``schema_version`` and the ``seed``.
Sweep CSV columns are ``loss_db,b_opt,tcc_opt,qber,key_rate``; predict CSV
columns follow :data:`BREAKDOWN_COLUMNS`.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CWQKDError, SchemaError, ZeroKeyError
from .estimation import estimate_all
from .model import (ACCIDENTAL_MODES, SCHEMA_VERSION, JitterModel, LinkParameters,
                    OperatingPoint, rate_breakdown, secure_key_rate)
from .optimizer import (Bounds, SweepSpec, optimize_operating_point, sweep_loss_curve,
                        sweep_to_csv, sweep_to_json)
from .simulator import SimulationConfig, count_coincidences, generate_tag_streams
from .tagstream import TagStream

EXIT_OK, EXIT_USAGE, EXIT_SCHEMA, EXIT_VERIFY = 0, 1, 2, 3
VERIFY_LIMIT = 5.0
BREAKDOWN_COLUMNS = ("s_m_a", "s_m_b", "cc_true", "eta_window", "cc_acc", "cc_measured",
                     "cc_err", "qber", "key_rate")

DEFAULT_VERIFY_LINK = LinkParameters(eta_a=0.1, eta_b=0.1, dc_a=250.0, dc_b=250.0, e_pol=0.01,
                                     jitter=JitterModel.constant(100e-12))
DEFAULT_VERIFY_OP = OperatingPoint(1e6, 300e-12)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_json(path, what):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {what} file {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("<document>", f"{path}: malformed JSON ({exc})") from None


def _link(args, required=True, default=None):
    if args.link is None:
        if required and default is None:
            raise UsageError("--link is required")
        link = default
    else:
        link = LinkParameters.from_dict(_read_json(args.link, "link"))
    if getattr(args, "loss_db", None) and link is not None:
        la, lb = args.loss_db
        # the link's efficiencies act as the intrinsic ones at zero loss
        link = link.with_loss_db(la, lb, link.eta_a, link.eta_b)
    return link


def _op(args, default=None):
    if args.op is None:
        if default is None:
            raise UsageError("--op is required")
        op = default
    else:
        op = OperatingPoint.from_dict(_read_json(args.op, "operating point"))
    over = {k: getattr(args, k) for k in ("brightness", "t_cc", "t_d")
            if getattr(args, k, None) is not None}
    return replace(op, **over) if over else op


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if not math.isfinite(x) else x
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _document(command, args, body):
    return _jsonable({"schema_version": SCHEMA_VERSION, "command": command,
                      "seed": args.seed, **body})


def _emit(args, text):
    if args.out:
        Path(args.out).write_text(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _emit_json(args, command, body):
    _emit(args, json.dumps(_document(command, args, body), indent=2))


# -- commands -----------------------------------------------------------------

def cmd_predict(args):
    link, op = _link(args), _op(args)
    kw = {"accidentals": args.accidentals, "deadtime_correction": args.deadtime_correction}
    rb = rate_breakdown(link, op, **kw)
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("schema_version", "seed") + BREAKDOWN_COLUMNS)
        d = rb.to_dict()
        w.writerow([SCHEMA_VERSION, args.seed] + ["" if d[c] is None else repr(d[c])
                                                   for c in BREAKDOWN_COLUMNS])
        _emit(args, buf.getvalue())
    else:
        _emit_json(args, "predict", {
            "link": link.to_dict(), "operating_point": op.to_dict(),
            "breakdown": rb.to_dict(), "no_signal": bool(rb.no_signal),
            "options": kw,
        })
    return EXIT_OK


def _bounds(args):
    b = (args.b_min, args.b_max)
    t = None if args.tcc_min is None and args.tcc_max is None else (args.tcc_min, args.tcc_max)
    if t is not None and None in t:
        raise UsageError("--tcc-min and --tcc-max must be given together")
    return Bounds(b, t)


def cmd_optimize(args):
    link = _link(args)
    kw = {"accidentals": args.accidentals, "deadtime_correction": args.deadtime_correction}
    try:
        opt = optimize_operating_point(link, _bounds(args), **kw)
    except ZeroKeyError as exc:
        opt = exc.best
    _emit_json(args, "optimize", {"link": link.to_dict(), "optimum": opt.to_dict(),
                                   "options": kw})
    return EXIT_OK


def cmd_sweep(args):
    if args.sweep:
        spec = SweepSpec.from_dict(_read_json(args.sweep, "sweep"))
    else:
        link = _link(args)
        if args.loss_range is None:
            raise UsageError("give --sweep <json> or --loss-range START STOP STEP")
        start, stop, step = args.loss_range
        if step <= 0 or stop < start:
            raise UsageError("--loss-range needs STOP >= START and STEP > 0")
        spec = SweepSpec(np.arange(start, stop + 0.5 * step, step), link,
                         alice_fraction=args.alice_fraction,
                         intrinsic_eta_a=link.eta_a, intrinsic_eta_b=link.eta_b,
                         bounds=_bounds(args), accidentals=args.accidentals,
                         deadtime_correction=args.deadtime_correction)
    points = sweep_loss_curve(spec)
    if args.format == "csv":
        _emit(args, f"# schema_version={SCHEMA_VERSION} seed={args.seed}\n" + sweep_to_csv(points))
    else:
        doc = json.loads(sweep_to_json(points, spec))
        _emit_json(args, "sweep", doc)
    return EXIT_OK


def _sim_paths(prefix):
    prefix = Path(prefix)
    return {k: prefix.with_name(f"{prefix.name}_{k}.bin")
            for k in ("alice", "bob", "dark_alice", "dark_bob")}


def cmd_simulate(args):
    link, op = _link(args), _op(args)
    if not args.out:
        raise UsageError("simulate needs --out <prefix>")
    paths = _sim_paths(args.out)
    cfg = SimulationConfig(link, op, args.duration, seed=args.seed, deadtime=args.deadtime,
                           workers=args.workers)
    alice, bob, truth = generate_tag_streams(cfg)
    written = {}
    for name, s in (("alice", alice), ("bob", bob)):
        s.save(paths[name])
        written[name] = str(paths[name])
    if args.dark_duration:
        dcfg = replace(cfg, op=replace(op, brightness=0.0), duration=args.dark_duration,
                       seed=args.seed + 1)
        da, db, _ = generate_tag_streams(dcfg)
        for name, s in (("dark_alice", da), ("dark_bob", db)):
            s.save(paths[name])
            written[name] = str(paths[name])
    manifest = Path(args.out).with_name(Path(args.out).name + "_manifest.json")
    doc = _document("simulate", args, {
        "link": link.to_dict(), "operating_point": op.to_dict(), "duration": args.duration,
        "deadtime": args.deadtime, "files": written,
        "counts": {"alice": len(alice), "bob": len(bob)},
    })
    manifest.write_text(json.dumps(doc, indent=2) + "\n")
    sys.stdout.write(json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


def _load_stream(path):
    try:
        return TagStream.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read tag file {path}: {exc.strerror}") from None


def cmd_estimate(args):
    a, b = _load_stream(args.alice), _load_stream(args.bob)
    da = _load_stream(args.dark_alice) if args.dark_alice else None
    db = _load_stream(args.dark_bob) if args.dark_bob else None
    est = estimate_all(a, b, da, db, t_cc=args.t_cc, seed=args.seed)
    doc = est.to_dict()
    doc.pop("schema_version")
    link = est.to_link_parameters()
    doc["predicted_key_rate"] = float(secure_key_rate(link, est.to_operating_point()))
    _emit_json(args, "estimate", doc)
    return EXIT_OK


def verify_report(link, op, duration, seed, workers=1):
    """Simulate, count and compare with the analytic model.

    Returns a list of ``(quantity, simulated, predicted, sigma, z)`` rows;
    ``z`` is the deviation in units of the Poisson ``sigma`` of the
    prediction.
    """
    cfg = SimulationConfig(link, op, duration, seed=seed, workers=workers)
    alice, bob, truth = generate_tag_streams(cfg)
    cc = count_coincidences(alice, bob, op.t_cc, op.t_d, seed=seed)
    is_true = cc.true_mask(truth)
    rb = rate_breakdown(link, op, accidentals="poisson")
    T = duration
    sifted_frac = 1.0 / (link.detectors_per_party // 2)
    rows = []

    def add(name, n_sim, rate_pred):
        lam = rate_pred * T
        sigma = math.sqrt(lam) if lam > 0 else 1.0
        rows.append((name, n_sim / T, float(rate_pred), sigma / T, (n_sim - lam) / sigma))

    add("s_m_a", len(alice), rb.s_m_a)
    add("s_m_b", len(bob), rb.s_m_b)
    add("cc_measured", cc.cc_measured, rb.cc_measured)
    add("cc_acc", int((~is_true).sum()), rb.cc_acc)
    add("cc_true_windowed", int(is_true.sum()), rb.eta_window * rb.cc_true)
    add("cc_err", cc.cc_err, rb.cc_err * sifted_frac)
    n = cc.cc_sifted
    e_pred = float(rb.qber)
    if n > 0 and math.isfinite(e_pred):
        s = math.sqrt(e_pred * (1 - e_pred) / n) or 1.0 / n
        rows.append(("qber", cc.qber, e_pred, s, (cc.qber - e_pred) / s))
    return rows


def cmd_verify(args):
    link = _link(args, default=DEFAULT_VERIFY_LINK)
    op = _op(args, default=DEFAULT_VERIFY_OP)
    rows = verify_report(link, op, args.duration, args.seed, args.workers)
    worst = max(abs(r[4]) for r in rows)
    ok = worst <= VERIFY_LIMIT
    for name, sim, pred, sigma, z in rows:
        sys.stderr.write(f"{name:18s} sim={sim:.6g} model={pred:.6g} sigma={sigma:.3g} "
                         f"z={z:+.2f}\n")
    _emit_json(args, "verify", {
        "link": link.to_dict(), "operating_point": op.to_dict(), "duration": args.duration,
        "limit_sigma": VERIFY_LIMIT, "passed": ok, "max_abs_sigma": worst,
        "quantities": [{"name": n, "simulated": s, "predicted": p, "sigma": sg, "z": z}
                       for n, s, p, sg, z in rows],
    })
    return EXIT_OK if ok else EXIT_VERIFY


# -- parser -------------------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--link", help="LinkParameters JSON file")
    common.add_argument("--op", help="OperatingPoint JSON file")
    common.add_argument("--out", help="output path (stdout when omitted)")
    common.add_argument("--seed", type=int, default=0, help="RNG seed (echoed in output)")
    common.add_argument("--duration", type=float, default=10.0, help="acquisition time in s")
    common.add_argument("--format", choices=("json", "csv"), default="json")
    common.add_argument("--loss-db", nargs=2, type=float, metavar=("A", "B"),
                        help="arm losses in dB applied on top of the link efficiencies")
    common.add_argument("--brightness", type=float, help="override brightness")
    common.add_argument("--t-cc", dest="t_cc", type=float, help="override coincidence window")
    common.add_argument("--t-d", dest="t_d", type=float, help="override delay")
    common.add_argument("--accidentals", choices=ACCIDENTAL_MODES, default="linearized")
    common.add_argument("--deadtime-correction", action="store_true")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="cwqkd", description="Key-rate model, optimizer and time-tag tools for "
                "continuous-wave entanglement-based QKD.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("predict", parents=[common], help="rate breakdown at one operating point")

    bounds = _Parser(add_help=False)
    bounds.add_argument("--b-min", type=float, default=1e3)
    bounds.add_argument("--b-max", type=float, default=1e10)
    bounds.add_argument("--tcc-min", type=float)
    bounds.add_argument("--tcc-max", type=float)
    sub.add_parser("optimize", parents=[common, bounds], help="maximize key rate over B, t_cc")
    sw = sub.add_parser("sweep", parents=[common, bounds], help="optimized key rate vs loss")
    sw.add_argument("--sweep", help="SweepSpec JSON file")
    sw.add_argument("--loss-range", nargs=3, type=float, metavar=("START", "STOP", "STEP"))
    sw.add_argument("--alice-fraction", type=float, default=0.5)
    sim = sub.add_parser("simulate", parents=[common], help="write simulated tag files")
    sim.add_argument("--deadtime", action="store_true", help="apply detector deadtime")
    sim.add_argument("--dark-duration", type=float, default=0.0,
                     help="also write source-off acquisitions of this length")
    est = sub.add_parser("estimate", parents=[common], help="estimate parameters from tags")
    est.add_argument("--alice", required=True)
    est.add_argument("--bob", required=True)
    est.add_argument("--dark-alice")
    est.add_argument("--dark-bob")
    sub.add_parser("verify", parents=[common], help="simulate and compare with the model")
    return p


COMMANDS = {"predict": cmd_predict, "optimize": cmd_optimize, "sweep": cmd_sweep,
            "simulate": cmd_simulate, "estimate": cmd_estimate, "verify": cmd_verify}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"cwqkd: usage error: {exc}\n")
        return EXIT_USAGE
    except SchemaError as exc:
        sys.stderr.write(f"cwqkd: schema error: {exc}\n")
        return EXIT_SCHEMA
    except (CWQKDError, ValueError, ZeroDivisionError) as exc:
        sys.stderr.write(f"cwqkd: error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
