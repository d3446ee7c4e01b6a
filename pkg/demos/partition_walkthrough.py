"""Walk one synthetic image through scoring, partitioning and tokenization.

Writes ``walkthrough_overlay.ppm`` next to this script and prints how the
cell sizes track the busy part of the image.

    python3 demos/partition_walkthrough.py
"""
import os

import numpy as np

from dartok import (
    ProjectionWeights,
    TokenizerConfig,
    init_posembed,
    normalize_scores,
    partition_scores,
    score_pixel_energy,
    tokenize,
)
from dartok.cli import render_overlay
from dartok.imageio import write_pnm
from dartok.partition import cell_masses, scale_partition

rng = np.random.default_rng(0)

# flat grey canvas with a noisy patch in the lower right
img = np.full((128, 128, 3), 0.5)
img[72:120, 64:120] = rng.uniform(size=(48, 56, 3))

raw = score_pixel_energy(img, (32, 32))
scores = normalize_scores(raw)
part = partition_scores(scores, 6, 6)

masses = cell_masses(scores, part)
print(f"cell masses: min {masses.min():.6f} max {masses.max():.6f} (target {1 / 36:.6f})")

px = scale_partition(part, img.shape[:2])
areas = px.areas().reshape(6, 6)
print("cell areas in pixels, top row vs bottom row:")
print("  top   ", np.round(areas[0]).astype(int))
print("  bottom", np.round(areas[-1]).astype(int))

cfg = TokenizerConfig(rows=6, cols=6, patch=8, dim=32, input_size=(128, 128))
batch = tokenize(img, cfg, ProjectionWeights.init(cfg, rng), init_posembed(cfg, rng), raw_scores=raw)
print(f"tokens: {batch.tokens.shape}")

out = os.path.join(os.path.dirname(os.path.abspath(__file__)), "walkthrough_overlay.ppm")
write_pnm(out, render_overlay(img, px, scores, alpha=0.35))
print(f"overlay written to {out}")
