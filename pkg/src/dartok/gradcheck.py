"""Finite-difference checks for every backward pass in the package.

:func:`gradcheck_all` runs the per-stage suites (tolerance 1e-5) and the
end-to-end tokenizer suite (tolerance 1e-3) and returns a report with one
line per checked leaf.
"""
from dataclasses import dataclass, field

import numpy as np

from .partition import partition_with_vjp
from .quantile import quantile_jacobian, uniform_quantiles
from .resample import resample_patches
from .scoremap import LearnableScorer, normalize_scores, normalize_scores_vjp
from .tokenize import ProjectionWeights, TokenizerConfig, init_posembed, tokenize

__all__ = [
    "STEP",
    "central_diff",
    "entry_rel_error",
    "norm_rel_error",
    "near_kink",
    "CheckResult",
    "GradcheckReport",
    "gradcheck_all",
]

STEP = 1e-6
# FD at h=1e-6 in float64 carries ~1e-8 absolute roundoff; entrywise errors
# are measured relative to max(|fd|, ENTRY_FLOOR) so sub-noise entries are
# compared absolutely
ENTRY_FLOOR = 1e-2
# normwise errors use max(|a|, |fd|, NORM_FLOOR); leaves whose true gradient is
# identically zero (the scorer's output bias) still carry ~1e-8 of FD roundoff
NORM_FLOOR = 1e-4


def central_diff(f, x, h=STEP):
    """Central differences of ``f() -> array`` w.r.t. every entry of ``x``.

    ``x`` is perturbed in place and restored. Returns an array of shape
    ``f().shape + x.shape``.
    """
    base = np.asarray(f(), dtype=np.float64)
    out = np.empty(base.shape + x.shape)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        hi = np.asarray(f(), dtype=np.float64)
        x[idx] = old - h
        lo = np.asarray(f(), dtype=np.float64)
        x[idx] = old
        out[(Ellipsis,) + idx] = (hi - lo) / (2 * h)
    return out


def entry_rel_error(analytic, fd, floor=ENTRY_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(fd, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - f) / np.maximum(np.abs(f), floor)))


def norm_rel_error(analytic, fd, floor=NORM_FLOOR):
    a = np.ravel(analytic)
    f = np.ravel(fd)
    denom = max(np.linalg.norm(a), np.linalg.norm(f), floor)
    return float(np.linalg.norm(a - f) / denom)


def near_kink(values, tol=1e-4, offset=0.0):
    """True if any value lies within ``tol`` of ``offset + integer``."""
    v = np.asarray(values, dtype=np.float64) - offset
    return bool(np.any(np.abs(v - np.round(v)) < tol))


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self):
        return bool(self.max_rel_error <= self.tol)

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name:<32s} max rel err {self.max_rel_error:.3e} (tol {self.tol:g})"


@dataclass
class GradcheckReport:
    seed: int
    results: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def lines(self):
        return [r.line() for r in self.results]

    def to_dict(self):
        return {
            "seed": self.seed,
            "passed": self.passed,
            "checks": [
                {"name": r.name, "max_rel_error": r.max_rel_error, "tol": r.tol, "passed": r.passed}
                for r in self.results
            ],
        }


def _check_quantile(rng):
    worst = 0.0
    done = 0
    while done < 20:
        n = int(rng.integers(2, 33))
        K = int(rng.integers(2, n + 1))
        m = rng.uniform(0.1, 10.0, n)
        if near_kink(uniform_quantiles(m, K).points):
            continue
        jac = quantile_jacobian(m, K).matrix
        fd = central_diff(lambda: uniform_quantiles(m, K).points, m)
        worst = max(worst, entry_rel_error(jac, fd))
        done += 1
    return worst


def _check_normalize(rng):
    raw = np.clip(rng.normal(size=(5, 6)), -8, 8)
    u = rng.normal(size=raw.shape)
    a = normalize_scores_vjp(raw, u)
    fd = central_diff(lambda: np.sum(u * normalize_scores(raw)), raw)
    return norm_rel_error(a, fd)


def _check_partition(rng, mode):
    while True:
        s = rng.uniform(0.2, 1.0, (8, 8))
        s /= s.sum()
        part, vjp = partition_with_vjp(s, 3, 4, mode)
        if not (near_kink(part.y[1:-1]) or near_kink(part.x[:, 1:-1])):
            break
    uy = rng.normal(size=part.y.shape)
    ux = rng.normal(size=part.x.shape)
    uy[[0, -1]] = 0.0
    ux[:, [0, -1]] = 0.0
    a = vjp(uy, ux)

    def f():
        p, _ = partition_with_vjp(s, 3, 4, mode)
        return np.sum(uy * p.y) + np.sum(ux * p.x)

    return norm_rel_error(a, central_diff(f, s))


def _check_resample(rng):
    p = 4
    while True:
        img = rng.uniform(size=(8, 8, 2))
        x0, y0 = rng.uniform(0.2, 3.5, 2)
        x1, y1 = x0 + rng.uniform(1.5, 4.0), y0 + rng.uniform(1.5, 4.0)
        rect = np.array([[x0, x1, y0, y1]])
        t = (np.arange(p) + 0.5) / p
        pts = np.concatenate([x0 + t * (x1 - x0), y0 + t * (y1 - y0)])
        if not near_kink(pts, offset=0.5):
            break
    g = rng.normal(size=(1, p, p, 2))
    _, vjp = resample_patches(img, rect, p)
    drect, dimg = vjp(g)
    f = lambda: np.sum(g * resample_patches(img, rect, p)[0])
    return norm_rel_error(drect, central_diff(f, rect)), norm_rel_error(dimg, central_diff(f, img))


def _check_scorer(rng):
    img = rng.uniform(size=(8, 8, 3))
    sc = LearnableScorer(rng=rng)
    u = rng.normal(size=(4, 4))
    _, back = sc.score_with_grad(img, (4, 4))
    grads, dpix = back(u)
    worst = 0.0
    for name, arr in sc.params.items():
        fd = central_diff(lambda: np.sum(u * sc(img, (4, 4))), arr)
        worst = max(worst, norm_rel_error(grads[name], fd))
    pix = norm_rel_error(dpix, central_diff(lambda: np.sum(u * sc(img, (4, 4))), img))
    return worst, pix


def small_config():
    """The 32x32 / R=C=4 / p=4 / D=8 end-to-end configuration."""
    return TokenizerConfig(rows=4, cols=4, patch=4, dim=8, input_size=(32, 32))


def end_to_end_gradients(seed, upstream_scale=1.0):
    """Analytic and finite-difference gradients of ``sum(G * tokens)``.

    Returns ``{leaf: (analytic, fd)}`` for the raw score map, scorer
    weights, projection and positional embeddings.
    """
    rng = np.random.default_rng(seed)
    cfg = small_config()
    img = rng.uniform(size=(32, 32, 3))
    proj = ProjectionWeights.init(cfg, rng)
    pe = init_posembed(cfg, rng, scale=1.0)
    scorer = LearnableScorer(rng=rng)
    G = upstream_scale * rng.normal(size=(cfg.seqlen, cfg.dim))
    raw = np.clip(rng.normal(size=cfg.score_grid), -3, 3)

    def loss(with_raw):
        b = tokenize(img, cfg, proj, pe, scorer=scorer, raw_scores=raw if with_raw else None)
        return np.sum(G * b.tokens)

    out = {}
    b = tokenize(img, cfg, proj, pe, raw_scores=raw)
    g = b.tape.backward(G)
    out["raw_scores"] = (g.raw_scores, central_diff(lambda: loss(True), raw))
    out["normalized_scores"] = (g.scores, None)

    b = tokenize(img, cfg, proj, pe, scorer=scorer)
    g = b.tape.backward(G)
    for name, arr in scorer.params.items():
        out["scorer." + name] = (g.scorer[name], central_diff(lambda: loss(False), arr))
    out["proj.W"] = (g.proj_W, central_diff(lambda: loss(False), proj.W))
    out["proj.b"] = (g.proj_b, central_diff(lambda: loss(False), proj.b))
    out["pos_embed"] = (g.pos_embed, central_diff(lambda: loss(False), pe))
    return out


def gradcheck_all(seed=0):
    """Run every finite-difference suite; report per leaf."""
    rng = np.random.default_rng(seed)
    rep = GradcheckReport(seed=seed)
    stage_tol, e2e_tol = 1e-5, 1e-3
    rep.results.append(CheckResult("quantile.jacobian", _check_quantile(rng), stage_tol))
    rep.results.append(CheckResult("scoremap.normalize", _check_normalize(rng), stage_tol))
    rep.results.append(CheckResult("partition.irregular", _check_partition(rng, "irregular"), stage_tol))
    rep.results.append(CheckResult("partition.regular", _check_partition(rng, "regular"), stage_tol))
    r_rect, r_img = _check_resample(rng)
    rep.results.append(CheckResult("resample.rect", r_rect, stage_tol))
    rep.results.append(CheckResult("resample.pixels", r_img, stage_tol))
    s_w, s_pix = _check_scorer(rng)
    rep.results.append(CheckResult("scorer.weights", s_w, stage_tol))
    rep.results.append(CheckResult("scorer.pixels", s_pix, stage_tol))

    for name, (a, fd) in end_to_end_gradients(seed).items():
        if fd is not None:
            rep.results.append(CheckResult("e2e." + name, norm_rel_error(a, fd), e2e_tol))

    # zero upstream must give exactly zero gradients
    cfg = small_config()
    zr = np.random.default_rng(seed + 1)
    b = tokenize(zr.uniform(size=(32, 32, 3)), cfg, ProjectionWeights.init(cfg, zr),
                 init_posembed(cfg, zr), scorer=LearnableScorer(rng=zr))
    g = b.tape.backward(np.zeros_like(b.tokens))
    leaves = [g.proj_W, g.proj_b, g.pos_embed, g.raw_scores, g.image, *g.scorer.values()]
    worst = max(float(np.max(np.abs(x))) for x in leaves)
    rep.results.append(CheckResult("e2e.zero_upstream", worst, 0.0))
    return rep
