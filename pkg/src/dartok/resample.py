"""Bilinear resampling of rectangles to fixed-size patches.

Conventions: pixel ``i`` covers ``[i, i+1)`` and its value sits at the
centre ``i + 0.5``. A rectangle resampled to ``p x p`` is sampled at the
centres of a ``p x p`` subdivision of the rectangle, and points outside the
image take the nearest border value. With these conventions a rectangle
that covers exactly a ``p x p`` pixel block reproduces those pixels bit for
bit.

Every sampler returns its output together with a vector-Jacobian closure
giving gradients w.r.t. the rectangle coordinates and the sampled array.
"""
import json
import struct

import numpy as np

__all__ = [
    "as_image",
    "sample_grid",
    "resample_patches",
    "resample_patch",
    "resize_image",
    "resample_posembed",
    "stitch_regular",
    "write_patch_dump",
    "read_patch_dump",
]

PATCH_MAGIC = b"DARTPAT1"


def as_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be HxW or HxWxCh, got shape {img.shape}")
    return img


def _taps(coords, n):
    f = coords - 0.5
    i0 = np.floor(f)
    frac = f - i0
    i0 = i0.astype(np.intp)
    lo = np.clip(i0, 0, n - 1)
    hi = np.clip(i0 + 1, 0, n - 1)
    return lo, hi, frac


def sample_grid(img, xs, ys):
    """Sample ``img`` on separable grids.

    Parameters
    ----------
    img : ndarray (H, W, Ch)
    xs : ndarray (N, pw)
        Horizontal sample coordinates, one row per grid.
    ys : ndarray (N, ph)

    Returns
    -------
    out : ndarray (N, ph, pw, Ch)
    vjp : callable
        ``vjp(g, need_img=True) -> (dxs, dys, dimg)``; ``dimg`` is None
        when not requested.
    """
    img = as_image(img)
    H, W, ch = img.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    xlo, xhi, ax = _taps(xs, W)
    ylo, yhi, ay = _taps(ys, H)

    Y0, Y1 = ylo[:, :, None], yhi[:, :, None]
    X0, X1 = xlo[:, None, :], xhi[:, None, :]
    i00 = img[Y0, X0]
    i01 = img[Y0, X1]
    i10 = img[Y1, X0]
    i11 = img[Y1, X1]
    wx = ax[:, None, :, None]
    wy = ay[:, :, None, None]
    out = (
        (1 - wy) * (1 - wx) * i00
        + (1 - wy) * wx * i01
        + wy * (1 - wx) * i10
        + wy * wx * i11
    )

    def vjp(g, need_img=True):
        g = np.asarray(g, dtype=np.float64)
        dxs = np.sum(g * ((1 - wy) * (i01 - i00) + wy * (i11 - i10)), axis=(1, 3))
        dys = np.sum(g * ((1 - wx) * (i10 - i00) + wx * (i11 - i01)), axis=(2, 3))
        if not need_img:
            return dxs, dys, None
        corners = (
            (Y0, X0, (1 - wy) * (1 - wx)),
            (Y0, X1, (1 - wy) * wx),
            (Y1, X0, wy * (1 - wx)),
            (Y1, X1, wy * wx),
        )
        # one scatter-add over (corner, sample, channel) into flat (pixel, channel)
        idx = np.concatenate([
            np.broadcast_to(yy * W + xx, g.shape[:3]).ravel() for yy, xx, _ in corners
        ])
        idx = (idx[:, None] * ch + np.arange(ch)).ravel()
        contrib = np.concatenate([(g * w).ravel() for _, _, w in corners])
        dimg = np.bincount(idx, weights=contrib, minlength=H * W * ch)
        return dxs, dys, dimg.reshape(H, W, ch)

    return out, vjp


def _check_rects(rects):
    rects = np.asarray(rects, dtype=np.float64).reshape(-1, 4)
    bad = (rects[:, 0] >= rects[:, 1]) | (rects[:, 2] >= rects[:, 3])
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise ValueError(f"degenerate rectangle {k}: (x0, x1, y0, y1) = {tuple(rects[k])}")
    return rects


def _centers(lo, hi, n):
    t = (np.arange(n) + 0.5) / n
    return lo[:, None] + t[None, :] * (hi - lo)[:, None], t


def resample_patches(img, rects, p):
    """Resample each rectangle ``(x0, x1, y0, y1)`` to ``p x p``.

    ``p`` may be an int or a ``(ph, pw)`` pair. Returns patches of shape
    ``(N, ph, pw, Ch)`` and ``vjp(g, need_img=True) -> (drects (N, 4), dimg)``.
    """
    rects = _check_rects(rects)
    ph, pw = (p, p) if np.isscalar(p) else p
    if ph < 1 or pw < 1:
        raise ValueError(f"patch size must be positive, got {p!r}")
    xs, tx = _centers(rects[:, 0], rects[:, 1], pw)
    ys, ty = _centers(rects[:, 2], rects[:, 3], ph)
    out, grid_vjp = sample_grid(img, xs, ys)

    def vjp(g, need_img=True):
        dxs, dys, dimg = grid_vjp(g, need_img)
        drects = np.stack(
            [
                dxs @ (1 - tx),
                dxs @ tx,
                dys @ (1 - ty),
                dys @ ty,
            ],
            axis=1,
        )
        return drects, dimg

    return out, vjp


def resample_patch(img, rect, p):
    """Single-rectangle convenience wrapper; returns ``(p, p, Ch)``."""
    out, _ = resample_patches(img, [rect], p)
    return out[0]


def resize_image(img, size):
    """Bilinear resize with the same sampling kernel as the patch resampler."""
    img = as_image(img)
    H, W = int(size[0]), int(size[1])
    if img.shape[:2] == (H, W):
        return img.copy()
    rect = [0.0, float(img.shape[1]), 0.0, float(img.shape[0])]
    out, _ = resample_patches(img, [rect], (H, W))
    return out[0]


def _mean_interp_weights(lo, hi, q, n):
    """Averaged 1D bilinear weights over ``q`` evenly spaced sample centres.

    Returns ``A (N, n)`` with ``A[k] = mean_a w(c_ka)`` and its derivatives
    w.r.t. the interval ends ``lo`` and ``hi``.
    """
    c, t = _centers(lo, hi, q)
    i0, i1, frac = _taps(c, n)
    N = len(lo)
    rows = np.repeat(np.arange(N), q)
    A = np.zeros((N, n))
    np.add.at(A, (rows, i0.ravel()), (1 - frac).ravel() / q)
    np.add.at(A, (rows, i1.ravel()), frac.ravel() / q)
    # d w(c) / dc = e_hi - e_lo; zero where both taps clamp to one pixel
    step = np.zeros((N, q, n))
    np.add.at(step, (rows, np.tile(np.arange(q), N), i1.ravel()), 1.0 / q)
    np.add.at(step, (rows, np.tile(np.arange(q), N), i0.ravel()), -1.0 / q)
    dlo = np.einsum("a,nai->ni", 1 - t, step)
    dhi = np.einsum("a,nai->ni", t, step)
    return A, dlo, dhi


def resample_posembed(pe, rects, q=4):
    """Per-rectangle positional embedding from a ``(Gy, Gx, D)`` grid.

    ``rects`` are in grid units. Each embedding is the mean of the grid
    bilinearly sampled at the ``q x q`` cell centres of the rectangle.
    Bilinear weights are separable and the sample set is a product grid,
    so the mean factors as ``ay^T PE ax`` with averaged 1D weight vectors.
    Returns ``(N, D)`` and ``vjp(g, need_grid=True) -> (drects, dpe)``.
    """
    pe = np.asarray(pe, dtype=np.float64)
    if pe.ndim != 3:
        raise ValueError(f"positional grid must be (Gy, Gx, D), got shape {pe.shape}")
    rects = _check_rects(rects)
    if q < 1:
        raise ValueError(f"sample count must be positive, got {q}")
    gy, gx, _ = pe.shape
    Ax, dAx0, dAx1 = _mean_interp_weights(rects[:, 0], rects[:, 1], q, gx)
    Ay, dAy0, dAy1 = _mean_interp_weights(rects[:, 2], rects[:, 3], q, gy)
    rowmix = np.einsum("ny,yxd->nxd", Ay, pe)
    emb = np.einsum("nxd,nx->nd", rowmix, Ax)

    def vjp(g, need_grid=True):
        g = np.asarray(g, dtype=np.float64)
        px = np.einsum("nxd,nd->nx", rowmix, g)
        colmix = np.einsum("yxd,nx->nyd", pe, Ax)
        py = np.einsum("nyd,nd->ny", colmix, g)
        drects = np.stack([
            np.sum(px * dAx0, axis=1),
            np.sum(px * dAx1, axis=1),
            np.sum(py * dAy0, axis=1),
            np.sum(py * dAy1, axis=1),
        ], axis=1)
        if not need_grid:
            return drects, None
        return drects, np.einsum("ny,nd,nx->yxd", Ay, g, Ax)

    return emb, vjp


def stitch_regular(patches, part):
    """Reassemble regular-grid patches into one ``(R p) x (C p)`` image."""
    if part.mode != "regular":
        raise ValueError("stitching requires regular grid")
    patches = np.asarray(patches)
    R, C = part.rows, part.cols
    n, ph, pw, ch = patches.shape
    if n != R * C:
        raise ValueError(f"expected {R * C} patches, got {n}")
    return patches.reshape(R, C, ph, pw, ch).transpose(0, 2, 1, 3, 4).reshape(R * ph, C * pw, ch)


def write_patch_dump(path, patches, rects, meta=None):
    """Write patches as float32 with a ``DARTPAT1`` header plus a JSON
    sidecar (``<path>.json``) holding the source rectangles."""
    patches = np.asarray(patches)
    seqlen, ph, pw, ch = patches.shape
    if ph != pw:
        raise ValueError("patch dumps hold square patches only")
    with open(path, "wb") as fh:
        fh.write(PATCH_MAGIC + struct.pack("<III", seqlen, ph, ch))
        fh.write(patches.astype("<f4").tobytes())
    side = {"seqlen": seqlen, "p": ph, "channels": ch, "rects": np.asarray(rects).tolist()}
    if meta:
        side.update(meta)
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh)


def read_patch_dump(path):
    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) != 20 or head[:8] != PATCH_MAGIC:
            raise ValueError(f"{path}: not a DARTPAT1 patch dump")
        seqlen, p, ch = struct.unpack("<III", head[8:])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != seqlen * p * p * ch:
        raise ValueError(f"{path}: payload size mismatch")
    with open(str(path) + ".json") as fh:
        side = json.load(fh)
    return data.reshape(seqlen, p, p, ch), np.array(side["rects"])
