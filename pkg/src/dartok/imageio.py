"""Binary PPM (P6) / PGM (P5) reading and writing.

Images are exchanged as float arrays in ``[0, 1]`` of shape ``(H, W, 3)``
for PPM and ``(H, W, 1)`` for PGM. Both 8-bit and 16-bit (big-endian)
samples are read; writing is always 8-bit.
"""
import numpy as np

__all__ = ["read_pnm", "write_pnm", "to_rgb"]


def _tokens(data):
    """Yield header tokens and the offset just past each, skipping comments."""
    pos = 0
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < n and not data[pos:pos + 1].isspace():
                pos += 1
            yield data[start:pos], pos


def read_pnm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    toks = _tokens(data)
    try:
        magic, _ = next(toks)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"{path}: unsupported format {magic!r}; only binary P5/P6")
        width = int(next(toks)[0])
        height = int(next(toks)[0])
        maxval_tok, end = next(toks)
        maxval = int(maxval_tok)
    except StopIteration:
        raise ValueError(f"{path}: truncated header") from None
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad maxval {maxval}")
    ch = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * ch
    # exactly one whitespace byte separates the header from the raster
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=end + 1)
    return raster.reshape(height, width, ch).astype(np.float64) / maxval


def to_rgb(img):
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def write_pnm(path, img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, ch = img.shape
    if ch not in (1, 3):
        raise ValueError(f"can only write 1- or 3-channel images, got {ch}")
    raster = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    magic = b"P6" if ch == 3 else b"P5"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(raster.tobytes())
