"""Adaptive tokenizer: scores -> partition -> resampled patches -> tokens.

:func:`tokenize` is shaped like a conventional fixed-grid patch embedding:
an image goes in and ``(R * C, D)`` tokens come out, whatever the input
resolution. :func:`tokenize_uniform_baseline` runs the identical
resampling and projection path on the fixed grid and is the control arm.

Each call records a :class:`GradTape`. ``batch.tape.backward(dtokens)``
returns the gradients of every stage, from the projection weights back to
the raw score map and the scorer weights.
"""
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import scoremap
from .partition import (
    Partition,
    partition_with_vjp,
    uniform_partition,
)
from .resample import as_image, resample_patches, resample_posembed, resize_image

__all__ = [
    "TokenizerConfig",
    "ProjectionWeights",
    "init_posembed",
    "TokenBatch",
    "TokenGrads",
    "GradTape",
    "tokenize",
    "tokenize_uniform_baseline",
    "CostRecord",
    "count_cost",
    "write_token_dump",
    "read_token_dump",
]

TOKEN_MAGIC = b"DARTTOK1"


@dataclass
class TokenizerConfig:
    rows: int = 14
    cols: int = 14
    patch: int = 16
    dim: int = 192
    mode: str = "irregular"
    input_size: tuple = (448, 448)
    score_grid: tuple = None
    pos_grid: tuple = None
    pos_samples: int = 4
    channels: int = 3

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.score_grid is None:
            self.score_grid = (max(1, self.input_size[0] // 4), max(1, self.input_size[1] // 4))
        self.score_grid = tuple(int(v) for v in self.score_grid)
        if self.pos_grid is None:
            self.pos_grid = (self.rows, self.cols)
        self.pos_grid = tuple(int(v) for v in self.pos_grid)
        for name in ("rows", "cols", "patch", "dim", "pos_samples", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"config.{name} must be >= 1")
        if self.mode not in ("irregular", "regular"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def seqlen(self):
        return self.rows * self.cols

    @property
    def patch_len(self):
        return self.patch * self.patch * self.channels

    def to_dict(self):
        return asdict(self)


@dataclass
class ProjectionWeights:
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, cfg, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = cfg.patch_len
        return cls(
            W=rng.normal(0.0, 1.0 / np.sqrt(fan_in), (cfg.dim, fan_in)),
            b=np.zeros(cfg.dim),
        )

    def check(self, cfg):
        if self.W.shape != (cfg.dim, cfg.patch_len) or self.b.shape != (cfg.dim,):
            raise ValueError(
                f"projection shapes W{self.W.shape}, b{self.b.shape} do not match "
                f"D={cfg.dim}, p*p*Ch={cfg.patch_len}"
            )


def init_posembed(cfg, rng=None, scale=0.02):
    rng = np.random.default_rng(0) if rng is None else rng
    return rng.normal(0.0, scale, (*cfg.pos_grid, cfg.dim))


@dataclass
class TokenGrads:
    proj_W: np.ndarray
    proj_b: np.ndarray
    pos_embed: np.ndarray
    rects: np.ndarray
    bounds_y: np.ndarray
    bounds_x: np.ndarray
    scores: np.ndarray = None
    raw_scores: np.ndarray = None
    scorer: dict = None
    image: np.ndarray = None


class GradTape:
    """Reverse-derivative records for the tokenizer's fixed stages.

    Stages, in forward order: ``scorer`` (raw map), ``normalize``,
    ``partition``, ``resample``, ``posembed``, ``project``. Missing stages
    (fixed scores, fixed grid) are simply absent.
    """

    def __init__(self):
        self.stages = {}

    def record(self, name, vjp):
        self.stages[name] = vjp

    def __contains__(self, name):
        return name in self.stages

    def backward(self, dtokens, image_grad=True):
        """Propagate ``dtokens`` through every recorded stage.

        ``image_grad=False`` skips the gradient w.r.t. the (resized) input
        image, which training does not need.
        """
        st = self.stages
        dtokens = np.asarray(dtokens, dtype=np.float64)
        dW, db, dpatches = st["project"](dtokens)
        drects, dimg = st["resample"](dpatches, image_grad)
        dpe_rects, dpe = st["posembed"](dtokens)
        dy, dx = st["rects"](drects, dpe_rects)
        grads = TokenGrads(
            proj_W=dW, proj_b=db, pos_embed=dpe, rects=drects,
            bounds_y=dy, bounds_x=dx, image=dimg,
        )
        if "partition" not in st:
            return grads
        grads.scores = st["partition"](dy, dx)
        grads.raw_scores = st["normalize"](grads.scores)
        if "scorer" in st:
            grads.scorer, dpix = st["scorer"](grads.raw_scores, image_grad)
            if image_grad:
                grads.image = grads.image + dpix
        return grads


@dataclass
class TokenBatch:
    tokens: np.ndarray
    patches: np.ndarray
    rects: np.ndarray
    partition: Partition
    scores: np.ndarray = None
    raw_scores: np.ndarray = None
    tape: GradTape = field(default=None, repr=False)

    @property
    def seqlen(self):
        return self.tokens.shape[0]


def _raw_scores(img, cfg, scorer, tape):
    if scorer is None or (isinstance(scorer, str) and scorer == "energy"):
        return scoremap.score_pixel_energy(img, cfg.score_grid)
    if isinstance(scorer, scoremap.LearnableScorer):
        raw, vjp = scorer.score_with_grad(img, cfg.score_grid)
        tape.record("scorer", vjp)
        return raw
    if callable(scorer):
        return np.asarray(scorer(img, cfg.score_grid), dtype=np.float64)
    raise TypeError(f"unsupported scorer {scorer!r}")


def _run(img, cfg, proj, pe, part, tape):
    """Shared resample / project / position-embed path on a fixed partition."""
    proj.check(cfg)
    H, W = cfg.input_size
    hs, ws = part.space
    sx, sy = W / ws, H / hs
    gy, gx = pe.shape[0] / hs, pe.shape[1] / ws
    if pe.shape[2] != cfg.dim:
        raise ValueError(f"positional grid depth {pe.shape[2]} != D={cfg.dim}")

    rects = part.rects()
    img_rects = rects * np.array([sx, sx, sy, sy])
    pe_rects = rects * np.array([gx, gx, gy, gy])

    patches, rvjp = resample_patches(img, img_rects, cfg.patch)
    flat = patches.reshape(len(rects), -1)
    emb, pevjp = resample_posembed(pe, pe_rects, cfg.pos_samples)
    tokens = flat @ proj.W.T + proj.b + emb

    R, C = part.rows, part.cols

    def project_vjp(g):
        return g.T @ flat, g.sum(axis=0), (g @ proj.W).reshape(patches.shape)

    def rects_vjp(d_img_rects, d_pe_rects):
        d = d_img_rects * np.array([sx, sx, sy, sy]) + d_pe_rects * np.array([gx, gx, gy, gy])
        d = d.reshape(R, C, 4)
        dx = np.zeros((R, C + 1))
        dx[:, :-1] += d[:, :, 0]
        dx[:, 1:] += d[:, :, 1]
        dy = np.zeros(R + 1)
        dy[:-1] += d[:, :, 2].sum(axis=1)
        dy[1:] += d[:, :, 3].sum(axis=1)
        return dy, dx

    tape.record("project", project_vjp)
    tape.record("resample", rvjp)
    tape.record("posembed", pevjp)
    tape.record("rects", rects_vjp)
    return tokens, patches, img_rects


def _prepare(img, cfg):
    img = as_image(img)
    if img.shape[2] != cfg.channels:
        raise ValueError(f"image has {img.shape[2]} channels, config expects {cfg.channels}")
    return resize_image(img, cfg.input_size)


def tokenize(img, cfg, proj, pe, scorer=None, raw_scores=None):
    """Adaptive tokenization of one image.

    Parameters
    ----------
    img : ndarray (h, w, Ch)
        Any resolution; resized to ``cfg.input_size`` first.
    cfg : TokenizerConfig
    proj : ProjectionWeights
    pe : ndarray (Gy, Gx, D)
        Positional embeddings laid out spatially.
    scorer : LearnableScorer, "energy", callable or None
        Produces the raw score map; ignored when ``raw_scores`` is given.
    raw_scores : ndarray, optional
        Externally supplied raw score map (any grid shape).
    """
    tape = GradTape()
    stage = "resize"
    try:
        img = _prepare(img, cfg)
        stage = "score"
        if raw_scores is not None:
            raw = scoremap._check_raw(raw_scores)
        else:
            raw = _raw_scores(img, cfg, scorer, tape)
        stage = "normalize"
        scores = scoremap.normalize_scores(raw)
        tape.record("normalize", lambda g: scoremap.normalize_scores_vjp(raw, g))
        stage = "partition"
        part, pvjp = partition_with_vjp(scores, cfg.rows, cfg.cols, cfg.mode)
        tape.record("partition", pvjp)
        stage = "resample"
        tokens, patches, rects = _run(img, cfg, proj, pe, part, tape)
    except (ValueError, TypeError) as exc:
        raise type(exc)(f"[{stage}] {exc}") from exc
    return TokenBatch(
        tokens=tokens, patches=patches, rects=rects, partition=part,
        scores=scores, raw_scores=raw, tape=tape,
    )


def tokenize_uniform_baseline(img, cfg, proj, pe):
    """Fixed-grid tokenization through the same resampling path."""
    img = _prepare(img, cfg)
    part = uniform_partition(cfg.rows, cfg.cols, cfg.score_grid, mode=cfg.mode)
    tape = GradTape()
    tokens, patches, rects = _run(img, cfg, proj, pe, part, tape)
    return TokenBatch(tokens=tokens, patches=patches, rects=rects, partition=part, tape=tape)


@dataclass
class CostRecord:
    """Multiply-add counts for one image.

    ``resize`` = H*W*4*Ch (four taps per output value), ``resample`` =
    seqlen*p*p*4*Ch, ``posembed`` = seqlen*q*q*4*D, ``projection`` =
    seqlen*D*p*p*Ch, ``backbone`` = seqlen * per-token cost. None of these
    depend on the input resolution, only on the configured target size.
    """

    input_size: tuple
    seqlen: int
    resize: int
    resample: int
    posembed: int
    projection: int
    tokenizer: int
    backbone: float
    tokenizer_share: float


def count_cost(cfg, backbone_per_token_flops, input_size=None):
    input_size = cfg.input_size if input_size is None else tuple(input_size)
    H, W = cfg.input_size
    ch, p, D, q = cfg.channels, cfg.patch, cfg.dim, cfg.pos_samples
    n = cfg.seqlen
    resize = H * W * 4 * ch
    resample = n * p * p * 4 * ch
    posembed = n * q * q * 4 * D
    projection = n * D * p * p * ch
    tok = resize + resample + posembed + projection
    backbone = n * float(backbone_per_token_flops)
    total = tok + backbone
    return CostRecord(
        input_size=input_size, seqlen=n, resize=resize, resample=resample,
        posembed=posembed, projection=projection, tokenizer=tok,
        backbone=backbone, tokenizer_share=tok / total if total else 0.0,
    )


def write_token_dump(path, batch, cfg, extra=None):
    """``DARTTOK1`` | u32 header length | JSON header | float32 tokens."""
    header = {
        "seqlen": int(batch.tokens.shape[0]),
        "dim": int(batch.tokens.shape[1]),
        "dtype": "<f4",
        "config": cfg.to_dict(),
        "rects": batch.rects.tolist(),
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC + struct.pack("<I", len(blob)) + blob)
        fh.write(np.ascontiguousarray(batch.tokens, dtype="<f4").tobytes())


def read_token_dump(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != TOKEN_MAGIC:
        raise ValueError(f"{path}: not a DARTTOK1 token dump")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    tokens = np.frombuffer(data[12 + hlen:], dtype="<f4")
    return header, tokens.reshape(header["seqlen"], header["dim"])
