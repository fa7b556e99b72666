"""Acceptance criteria.

Each test prints one ``PASS``/``FAIL`` line with the measured figure of merit
and then asserts it, so ``pytest -v -s tests/test_acceptance.py`` doubles as
a report. Runtime budgets are part of the criteria and are checked too.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.stats import qmc

from cwqkd.cli import verify_report
from cwqkd.corrections import (DetectorBank, accidental_probability_exact, bank_rate_report,
                               basis_dependent_key_rates, dark_click_probability,
                               deadtime_efficiency)
from cwqkd.estimation import estimate_all, estimate_deadtime
from cwqkd.model import (JitterModel, LinkParameters, OperatingPoint, accidental_probability,
                         key_rate_from_qber, rate_breakdown, secure_key_rate)
from cwqkd.optimizer import (SweepSpec, noisy_link_template, optimize_operating_point,
                             sweep_loss_curve, with_jitter)
from cwqkd.simulator import SimulationConfig, generate_tag_streams


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail, elapsed=None, budget=None):
        if budget is not None:
            ok = ok and elapsed <= budget
            detail += f"; {elapsed:.1f} s of {budget:.0f} s"
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail
    return emit


def test_01_zero_crossing(report):
    # bisect the library's clamped rate, then cross-check against a direct root
    lo, hi = 0.05, 0.2
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if key_rate_from_qber(1.0, mid) > 0 else (lo, mid)
    oracle = brentq(lambda e: 1.0 - 2.1 * _h2(e), 0.05, 0.2, xtol=1e-14)
    assert abs(lo - oracle) < 1e-12
    report(1, abs(lo - 0.1019) <= 0.0005, f"key rate crosses zero at E = {lo:.6f}")


def _h2(e):
    return -e * math.log2(e) - (1 - e) * math.log2(1 - e)


ORACLE_SETS = [
    # loss_a dB, loss_b dB, e_pol, DC per party, brightness
    (20.0, 20.0, 0.005, 0.0, 1e7),
    (25.0, 25.0, 0.01, 250.0, 1e7),
    (30.0, 30.0, 0.03, 250.0, 1e8),
    (40.0, 30.0, 0.01, 0.0, 1e8),
    (40.0, 40.0, 0.005, 250.0, 1e8),
]


def test_02_oracle_agreement(report):
    t0 = time.perf_counter()
    worst = 0.0
    for i, (la, lb, e, dc, b) in enumerate(ORACLE_SETS):
        link = LinkParameters(eta_a=1.0, eta_b=1.0, dc_a=dc, dc_b=dc, e_pol=e,
                              jitter=JitterModel.constant(100e-12)).with_loss_db(la, lb)
        op = OperatingPoint(b, 300e-12)
        rb = rate_breakdown(link, op, accidentals="poisson")
        assert max(rb.s_m_a, rb.s_m_b) * op.t_cc < 0.1
        rows = {r[0]: r for r in verify_report(link, op, 10.0, seed=100 + i)}
        worst = max(worst, *(abs(rows[k][4]) for k in ("cc_measured", "cc_acc", "qber")))
    elapsed = time.perf_counter() - t0
    report(2, worst < 3.0, f"max |z| of CC^m, CC^acc, E over 5 sets = {worst:.2f}",
           elapsed, 60.0)


def test_03_exact_vs_approximate_accidentals(report):
    t0 = time.perf_counter()
    # bound: broad domain of pair number, efficiencies and dark click rates
    s = qmc.Sobol(5, seed=5).random(1024)
    lo, hi = np.array([-6, -4, -4, -9, -9]), np.array([0.5, 0, 0, -2, -2])
    excess = -np.inf
    for mu, ea, eb, da, db in 10 ** (lo + s * (hi - lo)):
        pa, pb = dark_click_probability(da, 1.0), dark_click_probability(db, 1.0)
        ex = accidental_probability_exact(mu, ea, eb, pa, pb)
        eq = accidental_probability(mu * ea + da, mu * eb + db, 1.0)
        excess = max(excess, (ex - eq) / eq)
    # agreement: small per-party clicks and efficiencies
    s = qmc.Sobol(5, seed=6).random(1024)
    lo, hi = np.array([-6, -5, -5, -9, -9]), np.array([-2, -2, -2, -3, -3])
    rel = 0.0
    for mu, ea, eb, da, db in 10 ** (lo + s * (hi - lo)):
        pa, pb = dark_click_probability(da, 1.0), dark_click_probability(db, 1.0)
        assert mu * ea + da <= 1e-2 and mu * eb + db <= 1e-2
        ex = accidental_probability_exact(mu, ea, eb, pa, pb)
        eq = accidental_probability(mu * ea + da, mu * eb + db, 1.0)
        rel = max(rel, abs(ex - eq) / eq)
    elapsed = time.perf_counter() - t0
    report(3, excess <= 1e-9 and rel < 0.01,
           f"max (exact-approx)/approx = {excess:.2e}; restricted-region max rel diff = {rel:.4f}",
           elapsed, 10.0)


def test_04_no_distance_limit_without_dark_counts(report):
    t0 = time.perf_counter()
    losses = np.arange(40.0, 121.0, 2.0)
    quiet = replace(noisy_link_template(), dc_a=0.0, dc_b=0.0)
    clean = [p.optimum.key_rate for p in sweep_loss_curve(SweepSpec(losses, quiet))]
    noisy_losses = np.arange(40.0, 161.0, 2.0)
    noisy = [p.optimum.key_rate for p in sweep_loss_curve(SweepSpec(noisy_losses,
                                                                    noisy_link_template()))]
    zero = [i for i, k in enumerate(noisy) if k == 0.0]
    stays = bool(zero) and all(k == 0.0 for k in noisy[zero[0]:])
    elapsed = time.perf_counter() - t0
    limit = noisy_losses[zero[0]] if zero else float("nan")
    report(4, min(clean) > 0 and stays,
           f"DC=0 min key over 40-120 dB = {min(clean):.3e}/s; "
           f"DC=250x4 first zero at {limit:.0f} dB and zero beyond", elapsed, 120.0)


def test_05_jitter_ordering(report):
    t0 = time.perf_counter()
    losses = np.arange(40.0, 131.0, 2.0)
    curves = []
    for t_delta in (10e-12, 100e-12, 1e-9):
        link = with_jitter(noisy_link_template(), t_delta)
        curves.append(np.array([p.optimum.key_rate
                                for p in sweep_loss_curve(SweepSpec(losses, link))]))
    ordered = bool(np.all(curves[0] >= curves[1]) and np.all(curves[1] >= curves[2]))
    ranges = [losses[c > 0].max() for c in curves]
    elapsed = time.perf_counter() - t0
    report(5, ordered, "pointwise ordered 10 ps >= 100 ps >= 1 ns; last positive loss "
           + ", ".join(f"{r:.0f}" for r in ranges) + " dB", elapsed, 120.0)


def test_06_symmetric_split_preferred(report):
    t0 = time.perf_counter()
    base = noisy_link_template()
    sym = optimize_operating_point(base.with_loss_db(30.0, 30.0)).key_rate
    asym = optimize_operating_point(base.with_loss_db(40.0, 20.0)).key_rate
    elapsed = time.perf_counter() - t0
    report(6, sym >= asym, f"30/30 key {sym:.4e}/s vs 40/20 key {asym:.4e}/s", elapsed, 20.0)


def test_07_estimation_roundtrip(report):
    t0 = time.perf_counter()
    truth = LinkParameters(eta_a=0.1, eta_b=0.1, dc_a=250.0, dc_b=250.0, e_pol=0.01,
                           jitter=JitterModel.constant(100e-12))
    op = OperatingPoint(1e6, 300e-12, 12e-9)
    T = 100.0
    a, b, _ = generate_tag_streams(SimulationConfig(truth, op, T, seed=2024))
    da, db, _ = generate_tag_streams(SimulationConfig(truth, replace(op, brightness=0.0), T,
                                                      seed=2025))
    fine_bin = 10e-12
    est = estimate_all(a, b, da, db, fine_bin=fine_bin)
    v, u = est.values, est.uncertainties
    checks = {
        "B": abs(v["brightness"] / 1e6 - 1) <= 0.05,
        "eta_a": abs(v["eta_a"] / 0.1 - 1) <= 0.05,
        "eta_b": abs(v["eta_b"] / 0.1 - 1) <= 0.05,
        "e_pol": abs(v["e_pol"] / 0.01 - 1) <= 0.05,
        "t_D": abs(v["t_d"] - 12e-9) <= fine_bin,
        "t_delta": abs(v["t_delta"] / 100e-12 - 1) <= 0.10,
        "DC_a": abs(v["dc_a"] - 250.0) <= 3 * math.sqrt(250.0 / T),
        "DC_b": abs(v["dc_b"] - 250.0) <= 3 * math.sqrt(250.0 / T),
    }
    r_true = secure_key_rate(truth, OperatingPoint(1e6, 300e-12))
    r_est = secure_key_rate(est.to_link_parameters(), est.to_operating_point(300e-12))
    checks["R^s"] = abs(r_est / r_true - 1) <= 0.10
    elapsed = time.perf_counter() - t0
    failed = [k for k, ok in checks.items() if not ok]
    detail = (f"B {v['brightness']:.4g}, eta {v['eta_a']:.4f}/{v['eta_b']:.4f}, "
              f"e_pol {v['e_pol']:.4f}, t_D {v['t_d'] * 1e9:.4f} ns, "
              f"t_delta {v['t_delta'] * 1e12:.1f} ps, DC {v['dc_a']:.1f}/{v['dc_b']:.1f}, "
              f"R^s {r_est:.4g} vs {r_true:.4g}" + (f"; off: {failed}" if failed else ""))
    assert all(x >= 0 for x in u.values())
    report(7, not failed, detail, elapsed, 60.0)


def test_08_deadtime(report):
    t0 = time.perf_counter()
    T_dead, d, eta, bin_width = 25e-9, 2, 0.5, 1e-9
    link = LinkParameters(eta_a=eta, eta_b=eta, jitter=JitterModel.constant(100e-12),
                          deadtime=T_dead)
    worst_z, worst_dt = 0.0, 0.0
    for i, x in enumerate((0.001, 0.01, 0.1, 0.3, 0.5)):
        b = x * d / (eta * T_dead)
        dur = min(2.0, 4e6 / b)
        a, _, _ = generate_tag_streams(SimulationConfig(link, OperatingPoint(b, 1e-9), dur,
                                                        seed=300 + i, deadtime=True))
        lam = b * eta / d * deadtime_efficiency(b, eta, T_dead, d) * dur
        for ch in (0, 1):
            n = int(np.sum(a.channel == ch))
            worst_z = max(worst_z, abs(n - lam) / math.sqrt(lam))
        worst_dt = max(worst_dt, abs(estimate_deadtime(a, bin_width=bin_width).value - T_dead))
    elapsed = time.perf_counter() - t0
    report(8, worst_z < 3 and worst_dt <= bin_width,
           f"max |z| per-detector rate = {worst_z:.2f}; max deadtime error = "
           f"{worst_dt * 1e9:.2f} ns", elapsed, 60.0)


def test_09_averaged_bound_below_two_basis_sum(report):
    grid = np.linspace(0.0, 0.1, 41)
    worst, diag = -np.inf, 0.0
    for e_hv in grid:
        for e_da in grid:
            avg = basis_dependent_key_rates(1.0, e_hv, e_da, mode="averaged-bound")
            two = basis_dependent_key_rates(1.0, e_hv, e_da, mode="two-basis-sum")
            worst = max(worst, avg - two)
            if e_hv == e_da:
                diag = max(diag, abs(avg - two))
    report(9, worst <= 1e-15 and diag <= 1e-15,
           f"max(averaged - two-basis) = {worst:.2e}; diagonal mismatch = {diag:.2e}")


def _random_link(rng):
    return LinkParameters(
        eta_a=10 ** rng.uniform(-5, 0), eta_b=10 ** rng.uniform(-5, 0),
        dc_a=10 ** rng.uniform(0, 5), dc_b=10 ** rng.uniform(0, 5),
        e_pol=rng.uniform(0, 0.25), jitter=JitterModel.constant(10 ** rng.uniform(-11, -9)),
    ), OperatingPoint(10 ** rng.uniform(3, 10), 10 ** rng.uniform(-11, -8))


def test_10_bank_degeneracy(report):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        p, op = _random_link(rng)
        a = bank_rate_report(DetectorBank.identical(p), op)
        b = rate_breakdown(p, op)
        for name in ("s_m_a", "s_m_b", "cc_true", "cc_acc", "cc_measured", "cc_err", "qber",
                     "key_rate"):
            x, y = float(getattr(a, name)), float(getattr(b, name))
            worst = max(worst, abs(x - y) / abs(y) if y else abs(x))
    report(10, worst <= 1e-12, f"max relative difference over 100 sets = {worst:.2e}")
