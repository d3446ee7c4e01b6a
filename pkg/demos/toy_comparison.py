"""Train the sparse-glyph classifier in both tokenizer modes and compare.

The default is a reduced budget that finishes in about a minute on one
core; it shows the mechanics, but accuracies stay near chance at that size.
``--full`` runs the acceptance budget (2000/500 samples, 20 epochs,
three seeds), which takes several minutes.

    python3 demos/toy_comparison.py [--full]
"""
import argparse
from dataclasses import replace

import numpy as np

from dartok.toytrain import ToyConfig, compare_modes

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
args = parser.parse_args()

cfg = ToyConfig()
epochs = None
if not args.full:
    cfg = replace(cfg, n_train=400, n_test=200)
    epochs = 8

res = compare_modes(cfg, epochs=epochs)
for mode in ("dart", "uniform"):
    accs = ", ".join(f"{a:.3f}" for a in res["test_accuracy"][mode])
    print(f"{mode:>8s}: test accuracy per seed [{accs}], mean {res['mean_accuracy'][mode]:.3f}")

per_seed = np.split(res["density_ratios"], len(res["seeds"]))
for seed, d in zip(res["seeds"], per_seed):
    print(f"seed {seed}: median glyph density {np.median(d):.2f}x, >=2x on {np.mean(d >= 2):.0%}")
print(f"wall time {res['seconds']:.0f}s")
