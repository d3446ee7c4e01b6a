"""Desk-scale end-to-end training on a sparse-glyph classification task.

Each sample is a noisy canvas with one small glyph somewhere on it; the
label is the glyph's class. The model is the adaptive tokenizer followed by
a token-pooling + affine + softmax head, trained with SGD + momentum on
cross-entropy. In ``dart`` mode the classification loss also reaches the
scorer through the partition boundaries; ``uniform`` mode uses the fixed
grid and never touches the scorer.
"""
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .partition import cell_masses, Partition
from .scoremap import LearnableScorer
from .tokenize import (
    ProjectionWeights,
    TokenizerConfig,
    init_posembed,
    tokenize,
    tokenize_uniform_baseline,
)

log = logging.getLogger(__name__)

__all__ = [
    "ToyConfig",
    "Dataset",
    "make_glyphs",
    "gen_dataset",
    "Model",
    "TrainResult",
    "train",
    "compare_modes",
    "glyph_density_ratio",
    "save_checkpoint",
    "load_checkpoint",
    "write_metrics",
]

CKPT_MAGIC = b"DARTCKP1"


@dataclass
class ToyConfig:
    canvas: int = 80
    glyph: int = 14
    n_classes: int = 10
    n_train: int = 2000
    n_test: int = 500
    rows: int = 4
    cols: int = 4
    patch: int = 8
    dim: int = 64
    scorer_hidden: int = 16
    pos_samples: int = 4
    epochs: int = 20
    batch: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    noise: float = 0.3
    block: int = 2
    pool: str = "max"
    # optional separate step size for the scorer leaves; None uses lr
    scorer_lr: float = None

    def tokenizer(self):
        return TokenizerConfig(
            rows=self.rows,
            cols=self.cols,
            patch=self.patch,
            dim=self.dim,
            input_size=(self.canvas, self.canvas),
            pos_samples=self.pos_samples,
        )


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray  # ink bounding box per image: (y0, y1, x0, x1) in pixels

    def __len__(self):
        return len(self.labels)


def make_glyphs(n_classes, size, block=2, seed=1234):
    """Procedural binary glyphs: a one-pixel frame around a random pattern.

    The interior is a square pattern of ``block x block`` pixel blocks.
    Patterns are redrawn until they are distinct and every 2x2 window of
    blocks holds ink, so any 4x4 pixel window inside the glyph touches ink.
    """
    inner = (size - 2) // block
    if block * inner + 2 != size or inner < 2:
        raise ValueError(f"glyph size {size} does not fit a frame plus {block}-pixel blocks")
    rng = np.random.default_rng(seed)
    glyphs, seen = [], set()
    while len(glyphs) < n_classes:
        pat = rng.random((inner, inner)) < 0.5
        windows = pat[:-1, :-1] | pat[1:, :-1] | pat[:-1, 1:] | pat[1:, 1:]
        key = pat.tobytes()
        if not windows.all() or key in seen:
            continue
        seen.add(key)
        g = np.ones((size, size), dtype=bool)
        g[1:-1, 1:-1] = np.kron(pat, np.ones((block, block), dtype=bool))
        glyphs.append(g)
    return np.stack(glyphs)


def _render(rng, glyphs, labels, cfg):
    n = len(labels)
    S, g = cfg.canvas, cfg.glyph
    images = rng.uniform(0.0, cfg.noise, (n, S, S, 3))
    boxes = np.empty((n, 4), dtype=np.int64)
    for k in range(n):
        y, x = rng.integers(0, S - g + 1, size=2)
        mask = glyphs[labels[k]]
        images[k, y:y + g, x:x + g][mask] = 1.0
        ys, xs = np.nonzero(mask)
        boxes[k] = (y + ys.min(), y + ys.max() + 1, x + xs.min(), x + xs.max() + 1)
    return images, boxes


def gen_dataset(seed, n_train, n_test, cfg=None):
    """Deterministic train/test split with round-robin (balanced) labels."""
    cfg = ToyConfig() if cfg is None else cfg
    if n_train < 1 or n_test < 1:
        raise ValueError("dataset sizes must be >= 1")
    if cfg.glyph**2 > 0.12 * cfg.canvas**2:
        raise ValueError("glyph would cover more than 12% of the canvas")
    glyphs = make_glyphs(cfg.n_classes, cfg.glyph, cfg.block)
    rng = np.random.default_rng(seed)
    out = []
    for n in (n_train, n_test):
        labels = rng.permutation(np.arange(n) % cfg.n_classes)
        images, boxes = _render(rng, glyphs, labels, cfg)
        out.append(Dataset(images, labels, boxes))
    return out[0], out[1]


def _softmax_xent(logits, label):
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    return -math.log(max(p[label], 1e-300)), p


class Model:
    """Tokenizer leaves plus the classification head."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.tok_cfg = cfg.tokenizer()
        rng = np.random.default_rng(seed)
        self.scorer = LearnableScorer(6, cfg.scorer_hidden, rng=rng)
        proj = ProjectionWeights.init(self.tok_cfg, rng)
        self.params = {
            "proj_W": proj.W,
            "proj_b": proj.b,
            "pos_embed": init_posembed(self.tok_cfg, rng),
            "head_W": rng.normal(0.0, 1e-3, (cfg.n_classes, cfg.dim)),
            "head_b": np.zeros(cfg.n_classes),
        }
        for k, v in self.scorer.params.items():
            self.params["scorer_" + k] = v

    def leaves(self):
        return self.params

    def _tokens(self, image, mode):
        proj = ProjectionWeights(self.params["proj_W"], self.params["proj_b"])
        pe = self.params["pos_embed"]
        if mode == "dart":
            return tokenize(image, self.tok_cfg, proj, pe, scorer=self.scorer)
        return tokenize_uniform_baseline(image, self.tok_cfg, proj, pe)

    def forward(self, image, mode):
        batch = self._tokens(image, mode)
        if self.cfg.pool == "max":
            pooled = batch.tokens.max(axis=0)
        else:
            pooled = batch.tokens.mean(axis=0)
        logits = self.params["head_W"] @ pooled + self.params["head_b"]
        return logits, pooled, batch

    def loss_and_grad(self, image, label, mode, train_scorer=True):
        logits, pooled, batch = self.forward(image, mode)
        loss, prob = _softmax_xent(logits, label)
        dlogits = prob.copy()
        dlogits[label] -= 1.0
        grads = {
            "head_W": np.outer(dlogits, pooled),
            "head_b": dlogits,
        }
        dpooled = self.params["head_W"].T @ dlogits
        if self.cfg.pool == "max":
            winner = batch.tokens.argmax(axis=0)
            dtokens = np.zeros_like(batch.tokens)
            dtokens[winner, np.arange(batch.tokens.shape[1])] = dpooled
        else:
            dtokens = np.broadcast_to(dpooled / batch.seqlen, batch.tokens.shape)
        tg = batch.tape.backward(dtokens, image_grad=False)
        grads["proj_W"] = tg.proj_W
        grads["proj_b"] = tg.proj_b
        grads["pos_embed"] = tg.pos_embed
        if mode == "dart" and train_scorer and tg.scorer is not None:
            for k, v in tg.scorer.items():
                grads["scorer_" + k] = v
        return loss, int(np.argmax(logits)), grads, batch

    def predict(self, image, mode):
        logits, _, batch = self.forward(image, mode)
        return int(np.argmax(logits)), batch

    def state(self):
        return {k: v.copy() for k, v in self.params.items()}

    def load_state(self, state):
        for k, v in state.items():
            self.params[k][...] = v


@dataclass
class TrainResult:
    mode: str
    seed: int
    history: list = field(default_factory=list)
    diverged: bool = False
    state: dict = field(default=None, repr=False)
    density_ratios: np.ndarray = field(default=None, repr=False)

    def final(self, split):
        rows = [h for h in self.history if h["split"] == split]
        return rows[-1] if rows else None


def glyph_density_ratio(scores, box, canvas):
    """Mean normalized score density inside a pixel box, relative to the
    uniform density. ``box`` is ``(y0, y1, x0, x1)`` in canvas pixels."""
    hs, ws = scores.shape
    y0, y1, x0, x1 = box
    sy, sx = hs / canvas, ws / canvas
    rect = Partition(y=[y0 * sy, y1 * sy], x=[[x0 * sx, x1 * sx]], space=(hs, ws))
    mass = cell_masses(scores, rect)[0]
    area = (y1 - y0) * sy * (x1 - x0) * sx
    return (mass / area) * (hs * ws / scores.sum())


def _evaluate(model, data, mode, with_density=False):
    total, correct = 0.0, 0
    ratios = []
    for k in range(len(data)):
        loss, pred, _, batch = _eval_one(model, data.images[k], data.labels[k], mode)
        total += loss
        correct += pred == data.labels[k]
        if with_density and batch.scores is not None:
            ratios.append(glyph_density_ratio(batch.scores, data.boxes[k], model.cfg.canvas))
    n = len(data)
    return total / n, correct / n, np.array(ratios)


def _eval_one(model, image, label, mode):
    logits, _, batch = model.forward(image, mode)
    loss, _ = _softmax_xent(logits, label)
    return loss, int(np.argmax(logits)), None, batch


def train(cfg=None, mode="dart", epochs=None, seed=0, data=None, log_every=None):
    """Train one model; returns a :class:`TrainResult`.

    History rows are ``{"epoch", "split", "loss", "accuracy"}``; epoch 0 is
    the untrained model. Training stops early, keeping the last finite
    state, if the loss becomes non-finite.
    """
    cfg = ToyConfig() if cfg is None else cfg
    if mode not in ("dart", "uniform"):
        raise ValueError(f"mode must be 'dart' or 'uniform', got {mode!r}")
    epochs = cfg.epochs if epochs is None else epochs
    if data is None:
        data = gen_dataset(seed, cfg.n_train, cfg.n_test, cfg)
    train_set, test_set = data
    model = Model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 7919)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    result = TrainResult(mode=mode, seed=seed)

    def record(epoch, split, loss, acc):
        result.history.append({"epoch": epoch, "split": split, "loss": float(loss), "accuracy": float(acc)})

    for split, ds in (("train", train_set), ("test", test_set)):
        loss, acc, _ = _evaluate(model, ds, mode)
        record(0, split, loss, acc)

    last_good = model.state()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_set))
        ep_loss, ep_correct = 0.0, 0
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            acc_grads = {k: np.zeros_like(v) for k, v in model.params.items()}
            for k in idx:
                loss, pred, grads, _ = model.loss_and_grad(
                    train_set.images[k], train_set.labels[k], mode
                )
                ep_loss += loss
                ep_correct += pred == train_set.labels[k]
                for name, g in grads.items():
                    acc_grads[name] += g
            if not math.isfinite(ep_loss):
                log.warning("%s seed %d: non-finite loss at epoch %d, stopping", mode, seed, epoch)
                model.load_state(last_good)
                result.diverged = True
                break
            for name, p in model.params.items():
                lr = cfg.scorer_lr if cfg.scorer_lr is not None and name.startswith("scorer_") else cfg.lr
                v = velocity[name]
                v *= cfg.momentum
                v -= lr * acc_grads[name] / len(idx)
                p += v
            last_good = model.state()
        if result.diverged:
            break
        record(epoch, "train", ep_loss / len(order), ep_correct / len(order))
        loss, acc, ratios = _evaluate(model, test_set, mode, with_density=mode == "dart")
        record(epoch, "test", loss, acc)
        log.info("%s seed %d epoch %d: train loss %.4f, test acc %.3f%s",
                 mode, seed, epoch, ep_loss / len(order), acc,
                 f", glyph density x{np.median(ratios):.2f}" if len(ratios) else "")

    if mode == "dart":
        _, _, ratios = _evaluate(model, test_set, mode, with_density=True)
        result.density_ratios = ratios
    result.state = model.state()
    return result


def compare_modes(cfg=None, seeds=(0, 1, 2), epochs=None):
    """Train both modes on the same per-seed datasets.

    Returns a summary dict with per-seed final test accuracies, their
    means, the dart-mode glyph density ratios pooled over seeds, and the
    wall time in seconds.
    """
    cfg = ToyConfig() if cfg is None else cfg
    t0 = time.perf_counter()
    acc = {"dart": [], "uniform": []}
    ratios = []
    runs = []
    for seed in seeds:
        data = gen_dataset(seed, cfg.n_train, cfg.n_test, cfg)
        for mode in ("dart", "uniform"):
            res = train(cfg, mode, epochs=epochs, seed=seed, data=data)
            acc[mode].append(res.final("test")["accuracy"])
            if mode == "dart":
                ratios.append(res.density_ratios)
            runs.append(res)
    ratios = np.concatenate(ratios)
    return {
        "seeds": list(seeds),
        "test_accuracy": acc,
        "mean_accuracy": {m: float(np.mean(v)) for m, v in acc.items()},
        "density_ratios": ratios,
        "density_fraction_2x": float(np.mean(ratios >= 2.0)),
        "seconds": time.perf_counter() - t0,
        "runs": runs,
    }


def write_metrics(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "split", "loss", "accuracy"])
        w.writeheader()
        for row in result.history:
            if row["epoch"] > 0:
                w.writerow(row)


def save_checkpoint(path, state, meta=None):
    """Single blob (``DARTCKP1`` + float64 arrays) and a JSON manifest at
    ``<path>.json`` listing names, shapes and byte offsets."""
    manifest = {"arrays": [], "meta": meta or {}}
    offset = len(CKPT_MAGIC)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        for name in sorted(state):
            arr = np.asarray(state[name], dtype="<f8", order="C")  # ascontiguousarray promotes 0-d
            fh.write(arr.tobytes())
            manifest["arrays"].append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    with open(str(path) + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a DARTCKP1 checkpoint")
    with open(str(path) + ".json") as fh:
        manifest = json.load(fh)
    state = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=entry["offset"])
        state[entry["name"]] = arr.reshape(shape).copy()
    return state, manifest["meta"]
