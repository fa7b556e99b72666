"""Predict and optimize a single link.

Start from a 60 dB link with four noisy detectors per party, look at the
rate breakdown at a hand-picked operating point, then let the optimizer
choose brightness and coincidence window.
"""
import numpy as np

from cwqkd import OperatingPoint, rate_breakdown
from cwqkd.optimizer import noisy_link_template, optimize_operating_point

link = noisy_link_template().with_loss_db(30.0, 30.0)
print("heralding efficiencies:", link.eta_a, link.eta_b)

# a guess: 100 MHz pairs and a 300 ps window
guess = OperatingPoint(1e8, 300e-12)
rb = rate_breakdown(link, guess)
for name in ("s_m_a", "cc_true", "cc_acc", "cc_measured", "qber", "key_rate"):
    print(f"{name:12s} {float(getattr(rb, name)):.4g}")

# brightness trades true pairs (linear in B) against accidentals (quadratic)
for b in np.logspace(7, 10, 7):
    r = rate_breakdown(link, OperatingPoint(b, 300e-12))
    print(f"B={b:9.3g}  E={float(r.qber):.4f}  key={float(r.key_rate):9.3g} /s")

best = optimize_operating_point(link)
print()
print(f"optimum: B={best.op.brightness:.4g} /s, t_cc={best.op.t_cc * 1e12:.1f} ps, "
      f"E={best.qber:.4f}, key={best.key_rate:.4g} /s")
print(f"{best.iterations} refinement steps, on a bound (B, t_cc): {best.at_bound}")
