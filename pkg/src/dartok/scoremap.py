"""Region scores: scorers that produce raw per-cell scores and the
normalization that turns them into a strictly positive 2D distribution.

Scorers work on an image of shape ``(H, W, Ch)`` pooled into an
``(Hs, Ws)`` grid of cells. Three are provided:

* :func:`score_pixel_energy` - mean luminance gradient magnitude per cell,
  no parameters.
* :class:`LearnableScorer` - a shared two-layer perceptron on per-cell
  pooled statistics, with an exact backward pass.
* :func:`score_temporal` - frame stacks, stacking per-frame score blocks
  vertically into one tall map.
"""
import struct

import numpy as np

__all__ = [
    "STD_FLOOR",
    "floor_eps",
    "normalize_scores",
    "normalize_scores_vjp",
    "cell_features",
    "cell_features_vjp",
    "standardize_features",
    "score_pixel_energy",
    "LearnableScorer",
    "score_temporal",
    "read_scores_csv",
    "write_scores_csv",
    "read_scores_bin",
    "write_scores_bin",
]

STD_FLOOR = 1e-6
# pixel std is computed as sqrt(var + VAR_EPS) so it stays differentiable on
# flat cells
VAR_EPS = 1e-8
LUMA = np.array([0.299, 0.587, 0.114])
SCORE_MAGIC = b"DARTSCR1"


def floor_eps(shape):
    """Additive floor that keeps every normalized cell strictly positive."""
    return 1e-6 / (shape[0] * shape[1])


def _check_raw(raw):
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] < 1 or raw.shape[1] < 1:
        raise ValueError(f"raw score map must be a non-empty 2D array, got shape {raw.shape}")
    finite = np.isfinite(raw)
    if not finite.all():
        i, j = np.argwhere(~finite)[0]
        raise ValueError(f"non-finite raw score {raw[i, j]!r} at cell ({i}, {j})")
    return raw


def _normalize_forward(raw):
    mean = raw.mean()
    centered = raw - mean
    std = np.sqrt(np.mean(centered**2))
    floored = std < STD_FLOOR
    denom = STD_FLOOR if floored else std
    z = centered / denom
    sig = 1.0 / (1.0 + np.exp(-z))
    g = sig + floor_eps(raw.shape)
    total = g.sum()
    return g / total, (z, sig, g, total, denom, floored)


def normalize_scores(raw):
    """Map a raw score grid to a probability distribution over its cells.

    Per-sample standardization (std floored at ``STD_FLOOR``), logistic
    sigmoid, a small additive floor, then division by the sum.

    >>> normalize_scores(np.full((2, 2), 5.0))
    array([[0.25, 0.25],
           [0.25, 0.25]])
    """
    out, _ = _normalize_forward(_check_raw(raw))
    return out


def normalize_scores_vjp(raw, upstream):
    """Gradient of ``<upstream, normalize_scores(raw)>`` w.r.t. ``raw``."""
    raw = _check_raw(raw)
    out, (z, sig, g, total, denom, floored) = _normalize_forward(raw)
    u = np.asarray(upstream, dtype=np.float64)
    dg = (u - np.sum(u * out)) / total
    dz = dg * sig * (1.0 - sig)
    dz_mean = dz.mean()
    if floored:
        return (dz - dz_mean) / denom
    return (dz - dz_mean - z * np.mean(dz * z)) / denom


def _block_view(image, grid):
    H, W = image.shape[:2]
    gh, gw = grid
    if H < gh or W < gw:
        raise ValueError(f"image {H}x{W} is smaller than the {gh}x{gw} score grid")
    if H % gh or W % gw:
        raise ValueError(
            f"image {H}x{W} does not divide into a {gh}x{gw} grid; resize it first"
        )
    bh, bw = H // gh, W // gw
    return image.reshape(gh, bh, gw, bw, -1), bh, bw


def _as_image(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ValueError(f"image must be HxW or HxWxCh, got shape {image.shape}")
    return image


def cell_features(image, grid):
    """Per-cell channel means followed by channel standard deviations.

    Returns an array of shape ``(Hs, Ws, 2 * Ch)``.
    """
    image = _as_image(image)
    blocks, bh, bw = _block_view(image, grid)
    gh, gw = grid
    # contiguous (cell, channel, pixel) layout keeps the reductions fast
    cells = blocks.transpose(0, 2, 4, 1, 3).reshape(gh, gw, image.shape[2], bh * bw)
    mean = cells.mean(axis=-1)
    var = cells.var(axis=-1)
    std = np.sqrt(var + VAR_EPS)
    return np.concatenate([mean, std], axis=-1)


def cell_features_vjp(image, grid, upstream):
    """Gradient of ``<upstream, cell_features(image, grid)>`` w.r.t. pixels."""
    image = _as_image(image)
    blocks, bh, bw = _block_view(image, grid)
    ch = image.shape[2]
    n = bh * bw
    mean = blocks.mean(axis=(1, 3), keepdims=True)
    std = np.sqrt(blocks.var(axis=(1, 3), keepdims=True) + VAR_EPS)
    u = np.asarray(upstream, dtype=np.float64)
    u_mean = u[..., :ch][:, None, :, None, :]
    u_std = u[..., ch:][:, None, :, None, :]
    d = u_mean / n + u_std * (blocks - mean) / (n * std)
    return d.reshape(image.shape)


def standardize_features(feats):
    """Z-score every feature across all cells of one map.

    Returns ``(z, sd)`` with ``sd = sqrt(var + VAR_EPS)`` per feature, so a
    constant feature maps to zeros.
    """
    flat = feats.reshape(-1, feats.shape[-1])
    sd = np.sqrt(flat.var(axis=0) + VAR_EPS)
    return ((flat - flat.mean(axis=0)) / sd).reshape(feats.shape), sd


def score_pixel_energy(image, grid):
    """Mean gradient magnitude of luminance, pooled per cell.

    Central differences in the interior, one-sided at the borders
    (``np.gradient``).
    """
    image = _as_image(image)
    if image.shape[2] == 3:
        luma = image @ LUMA
    else:
        luma = image.mean(axis=2)
    if luma.shape[0] < grid[0] or luma.shape[1] < grid[1]:
        raise ValueError(
            f"image {luma.shape[0]}x{luma.shape[1]} is smaller than the "
            f"{grid[0]}x{grid[1]} score grid"
        )
    gy = np.gradient(luma, axis=0) if luma.shape[0] > 1 else np.zeros_like(luma)
    gx = np.gradient(luma, axis=1) if luma.shape[1] > 1 else np.zeros_like(luma)
    mag = np.hypot(gx, gy)
    blocks, _, _ = _block_view(mag[:, :, None], grid)
    return blocks.mean(axis=(1, 3, 4))


class LearnableScorer:
    """Shared two-layer perceptron applied to every cell's pooled statistics.

    ``score = w2 . tanh(W1 @ z + b1) + b2`` where ``z`` is the cell's
    per-channel means and standard deviations (6 features for RGB),
    standardized across the cells of the map so that the weights see
    contrast rather than absolute intensity. For
    frame stacks the per-cell temporal difference features are appended,
    doubling the input width.

    Parameters
    ----------
    n_features : int
        Input width per cell.
    hidden : int
        Hidden width.
    params : dict, optional
        Initial ``W1 (hidden, n_features)``, ``b1``, ``w2 (hidden,)``, ``b2 ()``.
    rng : numpy.random.Generator, optional
        Used for the default initialization when ``params`` is not given.
    """

    PARAM_NAMES = ("W1", "b1", "w2", "b2")

    def __init__(self, n_features=6, hidden=16, params=None, rng=None):
        self.n_features = int(n_features)
        self.hidden = int(hidden)
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            params = {
                "W1": rng.normal(0.0, 1.0 / np.sqrt(self.n_features), (self.hidden, self.n_features)),
                "b1": np.zeros(self.hidden),
                "w2": rng.normal(0.0, 1.0 / np.sqrt(self.hidden), self.hidden),
                "b2": np.zeros(()),
            }
        self.params = {k: np.asarray(params[k], dtype=np.float64).copy() for k in self.PARAM_NAMES}
        self._check_shapes()

    def _check_shapes(self):
        expected = {
            "W1": (self.hidden, self.n_features),
            "b1": (self.hidden,),
            "w2": (self.hidden,),
            "b2": (),
        }
        for name, shape in expected.items():
            got = self.params[name].shape
            if got != shape:
                raise ValueError(f"scorer weight {name}: expected shape {shape}, got {got}")

    @classmethod
    def zeros(cls, n_features=6, hidden=16):
        return cls(n_features, hidden, params={
            "W1": np.zeros((hidden, n_features)),
            "b1": np.zeros(hidden),
            "w2": np.zeros(hidden),
            "b2": np.zeros(()),
        })

    def _check_features(self, feats):
        if feats.shape[-1] != self.n_features:
            raise ValueError(
                f"scorer expects {self.n_features} features per cell, got {feats.shape[-1]}"
            )

    def forward_features(self, feats):
        """Raw scores for a ``(..., n_features)`` feature array.

        Returns ``(raw, cache)``; the cache feeds :meth:`backward_features`.
        """
        self._check_features(feats)
        p = self.params
        z, sd = standardize_features(feats)
        hid = np.tanh(z @ p["W1"].T + p["b1"])
        return hid @ p["w2"] + p["b2"], (z, sd, hid)

    def backward_features(self, cache, upstream):
        """Return ``(param_grads, feature_grads)`` for a raw-map upstream."""
        z, sd, hid = cache
        p = self.params
        u = np.asarray(upstream, dtype=np.float64)
        dpre = u[..., None] * p["w2"] * (1.0 - hid**2)
        flat_z = z.reshape(-1, self.n_features)
        flat_d = dpre.reshape(-1, self.hidden)
        grads = {
            "W1": flat_d.T @ flat_z,
            "b1": flat_d.sum(axis=0),
            "w2": (u[..., None] * hid).reshape(-1, self.hidden).sum(axis=0),
            "b2": np.asarray(u.sum()),
        }
        dz = (dpre @ p["W1"]).reshape(-1, self.n_features)
        dfeat = (dz - dz.mean(axis=0) - flat_z * (dz * flat_z).mean(axis=0)) / sd
        return grads, dfeat.reshape(z.shape)

    def __call__(self, image, grid):
        raw, _ = self.forward_features(cell_features(image, grid))
        return raw

    def score_with_grad(self, image, grid):
        """Forward pass plus a closure mapping raw-map upstream to gradients.

        The closure returns ``(param_grads, pixel_grads)``; pixel gradients
        are skipped (None) with ``need_pixels=False``.
        """
        image = _as_image(image)
        feats = cell_features(image, grid)
        raw, cache = self.forward_features(feats)

        def backward(upstream, need_pixels=True):
            grads, dfeat = self.backward_features(cache, upstream)
            if not need_pixels:
                return grads, None
            return grads, cell_features_vjp(image, grid, dfeat)

        return raw, backward

    def copy(self):
        return LearnableScorer(self.n_features, self.hidden, params=self.params)


def _temporal_features(frames, grid):
    feats = np.stack([cell_features(f, grid) for f in frames])
    diff = np.zeros_like(feats)
    diff[1:] = np.abs(feats[1:] - feats[:-1])
    return feats, diff


def score_temporal(frames, grid, scorer=None):
    """Score a frame stack; returns a map of shape ``(F * Hs, Ws)``.

    Each cell sees its own pooled statistics together with the absolute
    change of those statistics from the previous frame (zero for frame 0).
    Without a learnable scorer the raw score is the cell's pixel energy plus
    the summed temporal change.
    """
    if len(frames) == 0:
        raise ValueError("empty frame stack")
    frames = [_as_image(f) for f in frames]
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise ValueError(f"frame {i} has shape {f.shape}, expected {shape}")
    feats, diff = _temporal_features(frames, grid)
    if scorer is None:
        energy = np.stack([score_pixel_energy(f, grid) for f in frames])
        raw = energy + diff.sum(axis=-1)
    else:
        raw, _ = scorer.forward_features(np.concatenate([feats, diff], axis=-1))
    return raw.reshape(len(frames) * grid[0], grid[1])


def write_scores_csv(path, scores):
    scores = np.asarray(scores, dtype=np.float64)
    with open(path, "w") as fh:
        for row in scores:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_scores_csv(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: ragged or empty score CSV")
    return _check_raw(np.array(rows))


def write_scores_bin(path, scores):
    scores = np.asarray(scores, dtype=np.float64)
    h, w = scores.shape
    with open(path, "wb") as fh:
        fh.write(SCORE_MAGIC + struct.pack("<II", h, w))
        fh.write(scores.astype("<f8").tobytes())


def read_scores_bin(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:8] != SCORE_MAGIC:
            raise ValueError(f"{path}: not a DARTSCR1 score file")
        h, w = struct.unpack("<II", head[8:])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != h * w:
        raise ValueError(f"{path}: expected {h * w} values, found {data.size}")
    return data.reshape(h, w).astype(np.float64)
