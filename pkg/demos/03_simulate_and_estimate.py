"""From time tags back to link parameters.

Simulate a short acquisition, look at the delay histogram, count
coincidences the way a time tagger would, then recover the link
parameters and re-predict the key rate.
"""
from dataclasses import replace

from cwqkd import JitterModel, LinkParameters, OperatingPoint, secure_key_rate
from cwqkd.estimation import estimate_all
from cwqkd.simulator import (SimulationConfig, build_histogram, count_coincidences,
                             generate_tag_streams)

truth = LinkParameters(eta_a=0.1, eta_b=0.1, dc_a=250.0, dc_b=250.0, e_pol=0.01,
                       jitter=JitterModel.constant(100e-12))
op = OperatingPoint(1e6, 300e-12, t_d=12e-9)

alice, bob, gt = generate_tag_streams(SimulationConfig(truth, op, 20.0, seed=1))
dark_a, dark_b, _ = generate_tag_streams(
    SimulationConfig(truth, replace(op, brightness=0.0), 20.0, seed=2))
print(f"{len(alice)} Alice tags, {len(bob)} Bob tags")

# coarse look at the delay histogram around the peak
h = build_histogram(alice, bob, 100e-12, (11e-9, 13e-9))
for c, n in zip(h.centers, h.counts):
    print(f"{c * 1e9:7.2f} ns {'#' * int(60 * n / h.counts.max())}")

cc = count_coincidences(alice, bob, op.t_cc, op.t_d)
print(f"measured {cc.cc_measured}, sifted {cc.cc_sifted}, QBER {cc.qber:.4f}")

est = estimate_all(alice, bob, dark_a, dark_b)
for k in ("brightness", "eta_a", "eta_b", "e_pol", "t_d", "t_delta", "dc_a", "dc_b"):
    print(f"{k:10s} {est.values[k]:.5g} +- {est.uncertainties[k]:.2g}")
print("flags:", ", ".join(est.flags))

r_true = secure_key_rate(truth, OperatingPoint(1e6, 300e-12))
r_est = secure_key_rate(est.to_link_parameters(), est.to_operating_point(300e-12))
print(f"key rate from truth {r_true:.1f} /s, from estimates {r_est:.1f} /s")
