"""A small poisoning-rate sweep and a checkpoint round trip.

Run: python3 demos/05_sweep_and_checkpoints.py
"""
import os
import tempfile

import numpy as np

from backdoor_lab import load_model, save_model
from backdoor_lab.harness import ExperimentConfig, SweepSpec, build_fixture, run_attack, run_sweep

base = ExperimentConfig().with_value("run.seeds", "0,1")
spec = SweepSpec("poison_rate", (0.1, 0.01), base)
rows = run_sweep(spec)
for value, results in rows:
    asr = np.mean([r.asr_after for r in results])
    print(f"poison_rate {value}: mean defended ASR {asr:.4f}")

fixture = build_fixture(base, seed=0)
model, _ = run_attack(base, fixture)
with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "model.ulrl")
    save_model(model, path)
    again = load_model(path)
    same = all(np.array_equal(a, b) for a, b in zip(model.params(), again.params()))
    print(f"checkpoint {os.path.getsize(path)} bytes, parameters identical after reload: {same}")
