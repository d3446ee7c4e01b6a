"""Release acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured numbers
and the line is repeated in the terminal summary.
"""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_scores
from dartok.gradcheck import central_diff, end_to_end_gradients, entry_rel_error, near_kink, norm_rel_error
from dartok.partition import (
    cell_masses,
    column_bounds_concatenated,
    partition_irregular,
    partition_regular,
    partition_video,
    uniform_partition,
)
from dartok.quantile import quantile_jacobian, uniform_quantiles
from dartok.resample import resample_patches, resize_image, stitch_regular
from dartok.tokenize import (
    ProjectionWeights,
    TokenizerConfig,
    count_cost,
    init_posembed,
    tokenize,
    tokenize_uniform_baseline,
)


def report(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_quantile_gradients():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst, done, skipped = 0.0, 0, 0
    while done < 200:
        n = int(rng.integers(2, 41))
        K = int(rng.integers(2, n + 1))
        m = rng.uniform(0.05, 5.0, n)
        if near_kink(uniform_quantiles(m, K).points):
            skipped += 1
            continue
        fd = central_diff(lambda: uniform_quantiles(m, K).points, m)
        worst = max(worst, entry_rel_error(quantile_jacobian(m, K).matrix, fd))
        done += 1
    dt = time.perf_counter() - t0
    report("quantile gradients", worst <= 1e-5 and dt < 5,
           f"max rel err {worst:.2e} over 200 dists ({skipped} near-kink skipped), {dt:.2f}s")


@pytest.mark.parametrize("mode", ["irregular", "regular"])
def test_mass_conservation(mode):
    rng = np.random.default_rng(2)
    part_fn = partition_irregular if mode == "irregular" else partition_regular
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        hs, ws = rng.integers(8, 33, 2)
        R, C = rng.integers(2, 9, 2)
        s = random_scores(rng, (hs, ws))
        m = cell_masses(s, part_fn(s, R, C))
        worst = max(worst, float(np.max(np.abs(m * R * C - 1))))
    dt = time.perf_counter() - t0
    report(f"mass conservation ({mode})", worst <= 1e-9 and dt < 5,
           f"max rel cell-mass deviation {worst:.2e} over 100 maps, {dt:.2f}s")


def test_degeneracy():
    t0 = time.perf_counter()
    worst = 0.0
    for R, C, p in [(2, 2, 4), (14, 14, 16)]:
        rng = np.random.default_rng(R)
        cfg = TokenizerConfig(rows=R, cols=C, patch=p, dim=16, input_size=(R * p, C * p))
        img = rng.uniform(size=cfg.input_size + (3,))
        proj, pe = ProjectionWeights.init(cfg, rng), init_posembed(cfg, rng)
        a = tokenize(img, cfg, proj, pe, raw_scores=np.ones(cfg.score_grid)).tokens
        b = tokenize_uniform_baseline(img, cfg, proj, pe).tokens
        worst = max(worst, float(np.max(np.abs(a - b))))
    dt = time.perf_counter() - t0
    report("degeneracy", worst <= 1e-6 and dt < 10,
           f"max token deviation {worst:.2e} for (2,2,4) and (14,14,16), {dt:.2f}s")


def test_formulation_equivalence():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        hs, ws = rng.integers(6, 30, 2)
        R, C = rng.integers(2, 8, 2)
        s = random_scores(rng, (hs, ws))
        p = partition_irregular(s, R, C)
        worst = max(worst, float(np.max(np.abs(column_bounds_concatenated(s, p.y, C) - p.x))))
    report("formulation equivalence", worst <= 1e-12, f"max bound difference {worst:.2e} over 50 maps")


def test_end_to_end_gradcheck():
    t0 = time.perf_counter()
    errs = {k: norm_rel_error(a, fd) for k, (a, fd) in end_to_end_gradients(0).items() if fd is not None}
    dt = time.perf_counter() - t0
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    report("end-to-end gradcheck", worst <= 1e-3 and dt < 60,
           f"max rel err {worst:.2e} ({name}) over {len(errs)} leaves, {dt:.2f}s")


def test_resolution_decoupling():
    rng = np.random.default_rng(5)
    counts, costs = [], []
    for size in (224, 448):
        cfg = TokenizerConfig(input_size=(size, size), dim=16)
        img = rng.uniform(size=(size, size, 3))
        b = tokenize(img, cfg, ProjectionWeights.init(cfg, rng), init_posembed(cfg, rng))
        counts.append(b.tokens.shape[0])
        costs.append(count_cost(cfg, 1.0).projection)
    ok = counts[0] == counts[1] and costs[0] == costs[1]
    report("resolution decoupling", ok, f"tokens {counts}, projection MACs {costs} at 224/448")


def test_toy_experiment(toy_comparison):
    r = toy_comparison
    acc = r["mean_accuracy"]
    frac = r["density_fraction_2x"]
    acc_ok = acc["dart"] >= acc["uniform"]
    dens_ok = frac >= 0.70
    time_ok = r["seconds"] <= 600
    report(
        "toy experiment",
        acc_ok and dens_ok and time_ok,
        f"accuracy dart {acc['dart']:.3f} vs uniform {acc['uniform']:.3f} "
        f"({'ok' if acc_ok else 'low'}); >=2x glyph density on {frac:.1%} of test images "
        f"(need 70%, median {np.median(r['density_ratios']):.2f}x); {r['seconds']:.0f}s",
    )


def test_video_symmetry():
    rng = np.random.default_rng(6)
    worst, equal = 0.0, True
    for T, R in [(2, 8), (3, 6), (4, 12)]:
        frame = random_scores(rng, (7, 9))
        s = np.vstack([frame] * T) / T
        part, counts = partition_video(s, T, R, 5)
        per = R // T
        worst = max(worst, float(np.max(np.abs(part.y[per:] - part.y[:-per] - 7))))
        for r in range(R - per):
            worst = max(worst, float(np.max(np.abs(part.x[r + per] - part.x[r]))))
        equal &= len(set(counts.tolist())) == 1
    report("video symmetry", worst <= 1e-6 and equal,
           f"max period deviation {worst:.2e}, equal per-frame counts {equal}")


def test_stitch_back():
    rng = np.random.default_rng(7)
    worst = 0.0
    for (H, W), (R, C), p in [((32, 32), (4, 4), 8), ((48, 32), (3, 4), 16)]:
        img = rng.uniform(size=(H, W, 3))
        part = uniform_partition(R, C, (H, W), mode="regular")
        patches, _ = resample_patches(img, part.rects(), p)
        out = stitch_regular(patches, part)
        target = resize_image(img, (R * p, C * p))
        worst = max(worst, float(np.max(np.abs(out - target))))
    report("regular-grid stitch-back", worst <= 1e-6, f"max pixel deviation {worst:.2e}")
