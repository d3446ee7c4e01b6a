"""Quantile partitioning of a score map into R rows x C cells.

Rows are cut first from the y-marginal of the score map; each row's own
x-marginal (a fractional-overlap weighting of the score rows it spans) then
sets that row's column boundaries. Every cell ends up holding ``1 / (R C)``
of the total score mass, and a uniform score map gives back the fixed grid.

Bounds live in score-grid units: ``y`` runs over ``[0, Hs]`` and every row
of ``x`` over ``[0, Ws]``. :func:`scale_partition` maps them to pixels.
"""
import json
import math
from dataclasses import dataclass

import numpy as np

from .quantile import PiecewiseDistribution, quantile_vjp, uniform_quantiles

__all__ = [
    "Partition",
    "overlap_weights",
    "row_marginal",
    "partition_irregular",
    "partition_regular",
    "partition_scores",
    "partition_with_vjp",
    "partition_video",
    "column_bounds_concatenated",
    "scale_partition",
    "uniform_partition",
    "cell_masses",
    "default_grid",
]

MODES = ("irregular", "regular")


@dataclass
class Partition:
    """Row bounds ``y`` (R+1,) and per-row column bounds ``x`` (R, C+1)."""

    y: np.ndarray
    x: np.ndarray
    mode: str = "irregular"
    space: tuple = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.size - 1:
            raise ValueError(f"x must have shape (R, C+1) with R={self.y.size - 1}, got {self.x.shape}")
        if self.mode not in MODES:
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.space is None:
            self.space = (float(self.y[-1]), float(self.x[0, -1]))
        self.space = (float(self.space[0]), float(self.space[1]))

    @property
    def rows(self):
        return self.y.size - 1

    @property
    def cols(self):
        return self.x.shape[1] - 1

    @property
    def seqlen(self):
        return self.rows * self.cols

    def rects(self):
        """Cell rectangles ``(x0, x1, y0, y1)`` in row-major token order."""
        R, C = self.rows, self.cols
        out = np.empty((R, C, 4))
        out[:, :, 0] = self.x[:, :-1]
        out[:, :, 1] = self.x[:, 1:]
        out[:, :, 2] = self.y[:-1, None]
        out[:, :, 3] = self.y[1:, None]
        return out.reshape(R * C, 4)

    def areas(self):
        r = self.rects()
        return (r[:, 1] - r[:, 0]) * (r[:, 3] - r[:, 2])

    def to_dict(self):
        return {
            "mode": self.mode,
            "grid": {"rows": self.rows, "cols": self.cols},
            "space": {"h": self.space[0], "w": self.space[1]},
            "y": [float(v) for v in self.y],
            "x": [[float(v) for v in row] for row in self.x],
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict())
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d):
        p = cls(
            y=d["y"],
            x=d["x"],
            mode=d.get("mode", "irregular"),
            space=(d["space"]["h"], d["space"]["w"]),
        )
        if (p.rows, p.cols) != (d["grid"]["rows"], d["grid"]["cols"]):
            raise ValueError("grid header does not match bound arrays")
        return p

    @classmethod
    def from_json(cls, text_or_path):
        text = text_or_path
        if not text_or_path.lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


def default_grid(seqlen):
    """Square R = C factorization; non-square token counts need explicit R, C."""
    r = math.isqrt(seqlen)
    if r * r != seqlen:
        raise ValueError(f"seqlen={seqlen} is not a perfect square; give rows and cols explicitly")
    return r, r


def overlap_weights(a, b, n):
    """Length of ``[a, b]`` intersected with each unit interval ``[i, i+1]``."""
    i = np.arange(n)
    return np.clip(np.minimum(b, i + 1.0) - np.maximum(a, i), 0.0, None)


def _overlap_grad(v, n):
    # d/dv of overlap_weights w.r.t. an endpoint at v: indicator of the unit
    # interval containing v, right-continuous at integer points
    g = np.zeros(n)
    idx = int(np.floor(v))
    if 0 <= idx < n:
        g[idx] = 1.0
    return g


def row_marginal(scores, y0, y1):
    """x-marginal of the horizontal band ``[y0, y1]`` of the score map."""
    return overlap_weights(y0, y1, scores.shape[0]) @ scores


def _check_scores(scores):
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError(f"score map must be 2D, got shape {s.shape}")
    if not np.all(np.isfinite(s)) or np.any(s < 0) or not s.sum() > 0:
        raise ValueError("score map must be finite, nonnegative and carry positive mass")
    return s


def _check_grid(rows, cols):
    if int(rows) != rows or int(cols) != cols or rows < 1 or cols < 1:
        raise ValueError(f"rows and cols must be positive integers, got {rows!r}, {cols!r}")
    return int(rows), int(cols)


def _bounds(dist, K, n):
    return np.concatenate([[0.0], uniform_quantiles(dist, K).points, [float(n)]])


def partition_irregular(scores, rows, cols):
    return partition_with_vjp(scores, rows, cols, "irregular")[0]


def partition_regular(scores, rows, cols):
    """Row bounds as in the irregular mode; one shared set of column bounds
    from the full x-marginal."""
    return partition_with_vjp(scores, rows, cols, "regular")[0]


def partition_scores(scores, rows, cols, mode="irregular"):
    return partition_with_vjp(scores, rows, cols, mode)[0]


def partition_with_vjp(scores, rows, cols, mode="irregular"):
    """Partition plus a reverse-mode closure.

    The closure takes upstream gradients ``(dy, dx)`` shaped like
    ``Partition.y`` and ``Partition.x`` and returns d/d(scores). Outer bounds
    are constants and their upstream entries are ignored.
    """
    s = _check_scores(scores)
    R, C = _check_grid(rows, cols)
    if mode not in MODES:
        raise ValueError(f"unknown partition mode {mode!r}")
    hs, ws = s.shape

    y_dist = PiecewiseDistribution(s.sum(axis=1))
    y = _bounds(y_dist, R, hs)

    if mode == "regular":
        x_dist = PiecewiseDistribution(s.sum(axis=0))
        shared = _bounds(x_dist, C, ws)
        x = np.tile(shared, (R, 1))
        row_dists = None
    else:
        row_dists = []
        x = np.empty((R, C + 1))
        for r in range(R):
            dist = PiecewiseDistribution(row_marginal(s, y[r], y[r + 1]))
            row_dists.append(dist)
            x[r] = _bounds(dist, C, ws)

    part = Partition(y=y, x=x, mode=mode, space=(hs, ws))

    def vjp(dy, dx):
        dy = np.asarray(dy, dtype=np.float64).copy()
        dx = np.asarray(dx, dtype=np.float64)
        grad = np.zeros_like(s)
        if mode == "regular":
            if C > 1:
                dmx = quantile_vjp(x_dist, C, dx[:, 1:-1].sum(axis=0))
                grad += dmx[None, :]
        else:
            for r in range(R):
                if C == 1:
                    continue
                dm = quantile_vjp(row_dists[r], C, dx[r, 1:-1])
                w = overlap_weights(y[r], y[r + 1], hs)
                grad += np.outer(w, dm)
                dw = s @ dm
                dy[r + 1] += dw @ _overlap_grad(y[r + 1], hs)
                dy[r] -= dw @ _overlap_grad(y[r], hs)
        if R > 1:
            dmy = quantile_vjp(y_dist, R, dy[1:-1])
            grad += dmy[:, None]
        return grad

    return part, vjp


def column_bounds_concatenated(scores, y, cols):
    """Column bounds from one quantile pass over all rows laid end to end.

    The R row marginals are concatenated into a single axis of length
    ``R * Ws``; its ``R * C`` uniform quantiles, shifted back into each
    row's own frame, are the column bounds. Serves as an independent check
    on the per-row computation.
    """
    s = _check_scores(scores)
    y = np.asarray(y, dtype=np.float64)
    R = y.size - 1
    ws = s.shape[1]
    long_axis = np.concatenate([row_marginal(s, y[r], y[r + 1]) for r in range(R)])
    q = uniform_quantiles(long_axis, R * cols).points
    x = np.empty((R, cols + 1))
    x[:, 0] = 0.0
    x[:, -1] = ws
    for r in range(R):
        for c in range(1, cols):
            x[r, c] = q[r * cols + c - 1] - r * ws
    return x


def partition_video(scores, frames, rows, cols):
    """Partition a vertically stacked frame map.

    Returns the partition and the number of row bands assigned to each frame
    by row centre. Bands may straddle frame boundaries.
    """
    if int(frames) != frames or frames < 1:
        raise ValueError(f"frame count must be a positive integer, got {frames!r}")
    s = _check_scores(scores)
    if s.shape[0] % frames:
        raise ValueError(f"score height {s.shape[0]} is not divisible by {frames} frames")
    part = partition_irregular(s, rows, cols)
    frame_h = s.shape[0] // frames
    centers = 0.5 * (part.y[:-1] + part.y[1:])
    owner = np.minimum((centers // frame_h).astype(int), frames - 1)
    counts = np.bincount(owner, minlength=frames)
    return part, counts


def scale_partition(part, to):
    """Rescale bounds from ``part.space`` to an ``(H, W)`` target."""
    H, W = float(to[0]), float(to[1])
    if not (H > 0 and W > 0):
        raise ValueError(f"target dims must be positive, got {to!r}")
    hs, ws = part.space
    return Partition(
        y=part.y * (H / hs),
        x=part.x * (W / ws),
        mode=part.mode,
        space=(H, W),
    )


def uniform_partition(rows, cols, space, mode="irregular"):
    """The fixed grid: equal-height rows, equal-width columns."""
    R, C = _check_grid(rows, cols)
    h, w = float(space[0]), float(space[1])
    y = np.arange(R + 1) * (h / R)
    x = np.tile(np.arange(C + 1) * (w / C), (R, 1))
    y[-1] = h
    x[:, -1] = w
    return Partition(y=y, x=x, mode=mode, space=(h, w))


def cell_masses(scores, part):
    """Score mass inside each partition cell, row-major, shape ``(R*C,)``.

    Integrates the piecewise-constant density through its summed-area
    table, which is bilinear inside each score cell.
    """
    s = _check_scores(scores)
    hs, ws = s.shape
    sat = np.zeros((hs + 1, ws + 1))
    sat[1:, 1:] = np.cumsum(np.cumsum(s, axis=0), axis=1)

    def integral(yv, xv):
        i = np.clip(np.floor(yv).astype(int), 0, hs - 1)
        j = np.clip(np.floor(xv).astype(int), 0, ws - 1)
        fy = yv - i
        fx = xv - j
        return (
            (1 - fy) * (1 - fx) * sat[i, j]
            + (1 - fy) * fx * sat[i, j + 1]
            + fy * (1 - fx) * sat[i + 1, j]
            + fy * fx * sat[i + 1, j + 1]
        )

    r = part.rects()
    x0, x1, y0, y1 = r.T
    return integral(y1, x1) - integral(y0, x1) - integral(y1, x0) + integral(y0, x0)
