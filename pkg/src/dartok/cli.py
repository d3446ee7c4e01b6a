"""Command-line entry point: ``dartok <command> [flags]``.

Commands: ``partition``, ``tokenize``, ``gradcheck``, ``train``, ``video``
and ``cost``. Every command first prints its effective configuration as
one JSON line. Exit codes: 0 ok, 2 I/O error, 3 configuration error,
4 failed check.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import scoremap
from .imageio import read_pnm, to_rgb, write_pnm
from .partition import partition_scores, partition_video, scale_partition
from .resample import resize_image
from .tokenize import (
    ProjectionWeights,
    TokenizerConfig,
    count_cost,
    init_posembed,
    tokenize,
    tokenize_uniform_baseline,
    write_token_dump,
)

EXIT_OK = 0
EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_CHECK = 4

IMAGE_EXTS = (".ppm", ".pgm", ".pnm")


class ConfigError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; that code is reserved for I/O."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _echo(command, cfg):
    print(json.dumps({"command": command, "config": cfg}, sort_keys=True, default=list))


def _read_image(path):
    try:
        return to_rgb(read_pnm(path))
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc


def _load_checkpoint(path):
    from .toytrain import load_checkpoint

    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc


def _scorer_from_checkpoint(path):
    state, _ = _load_checkpoint(path)
    try:
        params = {k: state["scorer_" + k] for k in scoremap.LearnableScorer.PARAM_NAMES}
    except KeyError as exc:
        raise InputError(f"{path}: checkpoint has no scorer weights ({exc})") from exc
    hidden, n_features = params["W1"].shape
    return scoremap.LearnableScorer(n_features, hidden, params=params)


def _read_score_file(path):
    try:
        if path.endswith(".csv"):
            return scoremap.read_scores_csv(path)
        return scoremap.read_scores_bin(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read score file {path}: {exc}") from exc


def _parse_scorer(spec):
    """``energy`` | ``file:PATH`` | ``learned:CKPT`` -> (kind, argument)."""
    if spec == "energy":
        return "energy", None
    kind, sep, arg = spec.partition(":")
    if sep and kind in ("file", "learned") and arg:
        return kind, arg
    raise ConfigError(f"--scorer must be energy, file:PATH or learned:CKPT, got {spec!r}")


def _score_grid(h, w, cell=4):
    return max(1, h // cell), max(1, w // cell)


def _raw_scores(img, kind, arg):
    """Raw score map for an image at its native size, plus the grid used."""
    h, w = img.shape[:2]
    if kind == "file":
        raw = _read_score_file(arg)
        return raw, raw.shape
    grid = _score_grid(h, w)
    # scorers pool whole cells, so score a copy cropped/resized to a multiple
    work = resize_image(img, (grid[0] * (h // grid[0]), grid[1] * (w // grid[1])))
    if kind == "learned":
        return _scorer_from_checkpoint(arg)(work, grid), grid
    return scoremap.score_pixel_energy(work, grid), grid


def render_overlay(img, part, scores=None, alpha=0.0, color=(1.0, 0.0, 0.0)):
    """Draw 1-px cell boundaries (and optionally a score heatmap) on a copy.

    ``part`` must be in the image's pixel space. The result has the same
    height and width as ``img``.
    """
    out = to_rgb(np.asarray(img, dtype=np.float64)).copy()
    H, W = out.shape[:2]
    if scores is not None and alpha > 0:
        s = np.asarray(scores, dtype=np.float64)
        iy = np.minimum((np.arange(H) * s.shape[0]) // H, s.shape[0] - 1)
        ix = np.minimum((np.arange(W) * s.shape[1]) // W, s.shape[1] - 1)
        heat = s[np.ix_(iy, ix)]
        span = heat.max() - heat.min()
        heat = (heat - heat.min()) / span if span > 0 else np.zeros_like(heat)
        tint = np.stack([heat, np.zeros_like(heat), 1.0 - heat], axis=-1)
        out = (1 - alpha) * out + alpha * tint

    def px(v, n):
        # bounds that should be integral come out of the quantile solve a few ulps low
        return int(np.clip(np.floor(v + 1e-6), 0, n - 1))

    col = np.asarray(color)
    for r in range(part.rows):
        top, bottom = px(part.y[r], H), px(part.y[r + 1], H)
        out[top, :] = col
        out[bottom, :] = col
        for xb in part.x[r]:
            out[top:bottom + 1, px(xb, W)] = col
    return out


def cmd_partition(args):
    kind, arg = _parse_scorer(args.scorer)
    img = _read_image(args.image)
    H, W = img.shape[:2]
    raw, grid = _raw_scores(img, kind, arg)
    _echo("partition", {
        "image": args.image, "size": [H, W], "scorer": args.scorer, "score_grid": list(grid),
        "rows": args.rows, "cols": args.cols, "mode": args.mode, "out": args.out,
        "overlay": args.overlay, "alpha": args.alpha,
    })
    try:
        scores = scoremap.normalize_scores(raw)
        part = partition_scores(scores, args.rows, args.cols, args.mode)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    part = scale_partition(part, (H, W))
    try:
        part.to_json(args.out)
        if args.overlay:
            write_pnm(args.overlay, render_overlay(img, part, scores, args.alpha))
    except OSError as exc:
        raise InputError(f"cannot write output: {exc}") from exc
    print(f"wrote {part.seqlen} cells to {args.out}")
    return EXIT_OK


def cmd_tokenize(args):
    kind, arg = _parse_scorer(args.scorer)
    img = _read_image(args.image)
    try:
        cfg = TokenizerConfig(
            rows=args.rows, cols=args.cols, patch=args.patch, dim=args.dim, mode=args.mode,
            input_size=tuple(args.input_size), channels=img.shape[2],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _echo("tokenize", {**cfg.to_dict(), "image": args.image, "scorer": args.scorer,
                       "baseline": args.baseline, "seed": args.seed, "out": args.out})
    rng = np.random.default_rng(args.seed)
    proj = ProjectionWeights.init(cfg, rng)
    pe = init_posembed(cfg, rng)
    try:
        if args.baseline:
            batch = tokenize_uniform_baseline(img, cfg, proj, pe)
        elif kind == "file":
            batch = tokenize(img, cfg, proj, pe, raw_scores=_read_score_file(arg))
        elif kind == "learned":
            batch = tokenize(img, cfg, proj, pe, scorer=_scorer_from_checkpoint(arg))
        else:
            batch = tokenize(img, cfg, proj, pe, scorer="energy")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        write_token_dump(args.out, batch, cfg, extra={"seed": args.seed, "baseline": args.baseline})
    except OSError as exc:
        raise InputError(f"cannot write {args.out}: {exc}") from exc
    print(f"wrote {batch.seqlen} tokens of dim {cfg.dim} to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import gradcheck_all

    _echo("gradcheck", {"seed": args.seed})
    report = gradcheck_all(args.seed)
    for line in report.lines():
        print(line)
    print("all checks passed" if report.passed else "gradient check FAILED")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_train(args):
    from dataclasses import asdict, replace

    from .toytrain import ToyConfig, save_checkpoint, train, write_metrics

    try:
        cfg = ToyConfig()
        overrides = {k: getattr(args, k) for k in ("n_train", "n_test", "lr", "batch")
                     if getattr(args, k) is not None}
        cfg = replace(cfg, **overrides)
        if args.epochs < 0:
            raise ValueError("--epochs must be >= 0")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _echo("train", {**asdict(cfg), "mode": args.mode, "epochs": args.epochs,
                    "seed": args.seed, "out": args.out})
    result = train(cfg, args.mode, epochs=args.epochs, seed=args.seed,
                   log_every=1 if args.verbose else None)
    try:
        os.makedirs(args.out, exist_ok=True)
        write_metrics(os.path.join(args.out, "metrics.csv"), result)
        save_checkpoint(os.path.join(args.out, "checkpoint.bin"), result.state,
                        meta={"mode": args.mode, "seed": args.seed, "epochs": args.epochs})
        summary = {
            "mode": args.mode, "seed": args.seed, "epochs": args.epochs,
            "diverged": result.diverged,
            "final_train": result.final("train"), "final_test": result.final("test"),
        }
        if result.density_ratios is not None:
            d = result.density_ratios
            summary["glyph_density_median"] = float(np.median(d))
            summary["glyph_density_fraction_2x"] = float(np.mean(d >= 2.0))
        with open(os.path.join(args.out, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=1)
    except OSError as exc:
        raise InputError(f"cannot write to {args.out}: {exc}") from exc
    print(json.dumps(summary))
    return EXIT_CHECK if result.diverged else EXIT_OK


def _read_frames(folder):
    try:
        names = sorted(n for n in os.listdir(folder) if n.lower().endswith(IMAGE_EXTS))
    except OSError as exc:
        raise InputError(f"cannot list {folder}: {exc}") from exc
    if not names:
        raise InputError(f"{folder}: no .ppm/.pgm frames found")
    frames = [_read_image(os.path.join(folder, n)) for n in names]
    if len({f.shape for f in frames}) != 1:
        raise ConfigError("all frames must share one size")
    return frames, names


def cmd_video(args):
    frames, names = _read_frames(args.frames)
    H, W = frames[0].shape[:2]
    grid = _score_grid(H, W)
    _echo("video", {"frames": args.frames, "count": len(frames), "size": [H, W],
                    "score_grid": list(grid), "rows": args.rows, "cols": args.cols,
                    "out": args.out})
    work = [resize_image(f, (grid[0] * (H // grid[0]), grid[1] * (W // grid[1]))) for f in frames]
    try:
        raw = scoremap.score_temporal(np.stack(work), grid)
        part, counts = partition_video(scoremap.normalize_scores(raw), len(frames),
                                       args.rows, args.cols)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    result = {"frames": names, "tokens_per_frame": [int(c) * args.cols for c in counts],
              "partition": part.to_dict()}
    if args.out:
        try:
            with open(args.out, "w") as fh:
                json.dump(result, fh)
        except OSError as exc:
            raise InputError(f"cannot write {args.out}: {exc}") from exc
    print(json.dumps({"tokens_per_frame": result["tokens_per_frame"]}))
    return EXIT_OK


def cmd_cost(args):
    if args.seqlen < 1 or args.per_token < 0:
        raise ConfigError("--seqlen must be >= 1 and --per-token >= 0")
    rows, cols = args.rows, args.cols
    if rows is None or cols is None:
        side = int(round(args.seqlen ** 0.5))
        rows, cols = (side, side) if side * side == args.seqlen else (args.seqlen, 1)
    if rows * cols != args.seqlen:
        raise ConfigError(f"--rows x --cols = {rows * cols} does not equal --seqlen {args.seqlen}")
    try:
        cfg = TokenizerConfig(rows=rows, cols=cols, patch=args.patch, dim=args.dim,
                              input_size=tuple(args.input_size))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _echo("cost", {**cfg.to_dict(), "seqlen": args.seqlen, "per_token": args.per_token,
                   "compare": args.compare})
    rec = count_cost(cfg, args.per_token)
    out = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(rec).items()}
    if args.compare is not None:
        other = args.compare * float(args.per_token)
        out["backbone_ratio"] = rec.backbone / other if other else float("inf")
    print(json.dumps(out))
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="dartok", description="Adaptive region tokenizer tools.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("partition", help="partition an image and optionally draw an overlay")
    p.add_argument("--image", required=True)
    p.add_argument("--scorer", default="energy", help="energy | file:PATH | learned:CKPT")
    p.add_argument("--rows", type=int, default=14)
    p.add_argument("--cols", type=int, default=14)
    p.add_argument("--mode", choices=["irregular", "regular"], default="irregular")
    p.add_argument("--out", required=True, help="partition JSON")
    p.add_argument("--overlay", help="PPM with cell boundaries drawn on the image")
    p.add_argument("--alpha", type=float, default=0.0, help="score heatmap blend in the overlay")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("tokenize", help="tokenize an image into a DARTTOK1 dump")
    p.add_argument("--image", required=True)
    p.add_argument("--scorer", default="energy", help="energy | file:PATH | learned:CKPT")
    p.add_argument("--rows", type=int, default=14)
    p.add_argument("--cols", type=int, default=14)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--dim", type=int, default=192)
    p.add_argument("--mode", choices=["irregular", "regular"], default="irregular")
    p.add_argument("--input-size", type=int, nargs=2, default=[448, 448], metavar=("H", "W"))
    p.add_argument("--seed", type=int, default=0, help="seed for projection / pos-embed init")
    p.add_argument("--baseline", action="store_true", help="fixed-grid tokenizer instead")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on the synthetic sparse-glyph task")
    p.add_argument("--mode", choices=["dart", "uniform"], default="dart")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("video", help="partition a stack of frames jointly")
    p.add_argument("--frames", required=True, help="directory of same-size PPM/PGM frames")
    p.add_argument("--rows", type=int, default=16)
    p.add_argument("--cols", type=int, default=8)
    p.add_argument("--out", help="JSON with the joint partition and per-frame token counts")
    p.set_defaults(func=cmd_video)

    p = sub.add_parser("cost", help="multiply-add accounting for one image")
    p.add_argument("--seqlen", type=int, required=True)
    p.add_argument("--per-token", type=float, required=True, help="backbone cost per token")
    p.add_argument("--compare", type=int, help="report backbone ratio against this seqlen")
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--dim", type=int, default=192)
    p.add_argument("--input-size", type=int, nargs=2, default=[448, 448], metavar=("H", "W"))
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"dartok: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"dartok: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
