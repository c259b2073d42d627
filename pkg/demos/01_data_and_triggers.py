"""Synthetic data, the three triggers and dirty-label poisoning.

Run: python3 demos/01_data_and_triggers.py
"""
import numpy as np

from backdoor_lab import PoisonPlan, apply_trigger, gen_synthetic, make_rng, make_trigger, poison_dataset

rng = make_rng(0, "data")
ds = gen_synthetic(4, 100, 3, 8, 8, 0.8, 0.15, rng)
print(f"{len(ds)} images of shape {ds.image_shape}, class counts {ds.class_counts()}")

# Each trigger maps a raw image to a triggered one, clipped to [0, 1].
for kind in ("patch", "blended", "sinusoidal"):
    spec = make_trigger(kind, ds.image_shape)
    x = ds.images[0]
    t = apply_trigger(x, spec)
    print(f"{kind:10s} mean |change| {np.abs(t - x).mean():.4f}, range [{t.min():.2f}, {t.max():.2f}]")

# Poison 10% of the training set towards class 0.
spec = make_trigger("patch", ds.image_shape)
poisoned = poison_dataset(ds, spec, PoisonPlan(0.1, 0), make_rng(0, "poison"))
print(f"poisoned {int(poisoned.poison_mask.sum())} samples, all relabelled to "
      f"{set(poisoned.labels[poisoned.poison_mask].tolist())}")
