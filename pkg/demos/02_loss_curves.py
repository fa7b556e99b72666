"""Key rate against total link loss.

Three things show up in the sweeps below: without dark counts there is no
loss at which the key vanishes, detector noise sets a hard limit, and a
sharper timing resolution buys both rate and reach.
"""
from dataclasses import replace

import numpy as np

from cwqkd.optimizer import SweepSpec, noisy_link_template, sweep_loss_curve, with_jitter

losses = np.arange(40.0, 131.0, 10.0)
noisy = noisy_link_template()
quiet = replace(noisy, dc_a=0.0, dc_b=0.0)

curves = {"no dark counts": quiet}
for t_delta in (10e-12, 100e-12, 1e-9):
    curves[f"t_delta={t_delta * 1e12:g} ps"] = with_jitter(noisy, t_delta)

print("loss dB " + "".join(f"{k:>20s}" for k in curves))
rates = {k: [p.optimum.key_rate for p in sweep_loss_curve(SweepSpec(losses, v))]
         for k, v in curves.items()}
for i, loss in enumerate(losses):
    print(f"{loss:7.0f} " + "".join(f"{rates[k][i]:20.4g}" for k in curves))

# splitting the same 60 dB unevenly costs key
for frac in (0.5, 0.6, 2 / 3, 0.75):
    pt = sweep_loss_curve(SweepSpec([60.0], noisy, alice_fraction=frac))[0]
    print(f"Alice share {frac:.2f}: key {pt.optimum.key_rate:.4g} /s")
