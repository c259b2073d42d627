"""Full defense with each relearning regulariser and with random neuron choice.

Run: python3 demos/04_relearn_ablations.py
"""
from dataclasses import replace

from backdoor_lab.harness import ExperimentConfig, build_fixture, defend_seed, run_attack

cfg = ExperimentConfig()
fixture = build_fixture(cfg, seed=1)
model, report = run_attack(cfg, fixture)
print(f"backdoored: C-ACC {report.clean_accuracy:.4f}, ASR {report.attack_success_rate:.4f}")

variants = {
    "cosine": cfg,
    "inner_product": cfg.with_value("relearn.regularizer", "inner_product"),
    "none": cfg.with_value("relearn.regularizer", "none"),
    "random-1": replace(cfg, identify=replace(cfg.identify, random_neurons=1)),
}
for name, c in variants.items():
    res, _ = defend_seed(c, model, fixture)
    print(f"{name:14s} status {res.status:20s} flagged {res.flagged} "
          f"C-ACC {res.c_acc_after:.4f} ASR {res.asr_after:.4f}")
