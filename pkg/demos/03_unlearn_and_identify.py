"""Unlearn a backdoored model, then flag outlier classifier neurons with the MAD rule.

Run: python3 demos/03_unlearn_and_identify.py
"""
from dataclasses import replace

import numpy as np

from backdoor_lab import aggregate_delta, identify_suspicious, make_rng, sample_defense_set
from backdoor_lab.errors import NonConvergenceError
from backdoor_lab.harness import ExperimentConfig, build_fixture, run_attack
from backdoor_lab.unlearn import unlearn

# The rule on a hand-made vector: median 1.025, MAD 0.1, so a deviation above 0.35 is flagged.
report = identify_suspicious(np.array([5.0, 1.0, 1.1, 0.9, 1.0, 1.2, 3.0, 0.95, 1.05, 0.8]))
print(f"toy: median {report.center:.3f}, MAD {report.dispersion:.3f}, flagged {report.flagged}")

cfg = ExperimentConfig()
fixture = build_fixture(cfg, seed=0)
model, _ = run_attack(cfg, fixture)
dd = sample_defense_set(fixture.train_clean, cfg.defense.fraction, make_rng(0, "defense"))
try:
    pre, post, epochs, _ = unlearn(model, dd, replace(cfg.unlearn, seed=0))
except NonConvergenceError as exc:
    print(f"unlearning did not converge: {exc}")
else:
    delta = aggregate_delta(pre, post)
    report = identify_suspicious(delta, epochs_used=epochs)
    print(f"unlearned in {epochs} epochs; per-neuron change {np.round(delta, 3)}")
    print(f"flagged {report.flagged} (backdoor target is {cfg.attack.target})")
