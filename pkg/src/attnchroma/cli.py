"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 non-finite
numerics.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import data as D
from . import evaluate as E
from . import model as M
from . import train as T
from .errors import FormatError, NonFiniteError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "ATTNCHROMA_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _block_size(value: str) -> int:
    n = int(value)
    if n not in M.BLOCK_SIZES:
        raise argparse.ArgumentTypeError(f"block size {n} not supported; allowed sizes are {', '.join(map(str, M.BLOCK_SIZES))}")
    return n


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def cmd_extract(args) -> int:
    images = D.list_images(args.images)
    if not images:
        raise FormatError(f"no PNG/PPM images found in {args.images}")

    def one(item):
        k, path = item
        try:
            return D.extract_from_image(path, k, args.block_size, args.per_image, args.seed, args.pyramid)
        except ShapeError:
            return []

    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        per_image = list(pool.map(one, enumerate(images)))
    samples = [s for group in per_image for s in group]
    if not samples:
        raise FormatError(f"none of the {len(images)} images yields a {args.block_size}x{args.block_size} block")
    D.save_dataset(args.out, samples, args.block_size, args.seed)
    manifest = D.DatasetManifest(
        args.block_size, len(samples), args.seed, args.per_image, [p.name for p in images], [len(g) for g in per_image]
    )
    D.write_manifest(D.manifest_path(args.out), manifest)
    print(f"{len(samples)} samples from {sum(1 for g in per_image if g)} images -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    train_set, n, _ = D.load_dataset(args.dataset)
    val_set, n_val, _ = D.load_dataset(args.val)
    if n != n_val:
        raise ShapeError(f"block size mismatch: dataset has {n}, validation set has {n_val}")
    if not train_set:
        raise FormatError(f"{args.dataset} holds no samples")
    state = None
    if args.resume:
        weights, state = T.load_checkpoint(args.resume)
        if weights.config.n != n:
            raise ShapeError(f"checkpoint block size {weights.config.n} does not match dataset block size {n}")
    else:
        weights = M.init_weights(M.BlockSizeConfig.preset(n, head_conv=not args.no_head_conv), args.seed)
    cfg = T.TrainConfig(
        lr=args.lr, batch_size=args.batch_size, max_steps=args.steps, val_interval=args.val_interval, seed=args.seed
    )
    curve = args.curve or str(args.out) + ".loss.csv"
    result = T.train(weights, train_set, cfg, val_samples=val_set, state=state, checkpoint=args.out, curve_csv=curve)
    print(f"final train_mse {result.final_train_mse:.6g}  best val_mse {result.best_val:.6g}  steps {result.state.t}")
    print(f"checkpoint -> {args.out}  loss curve -> {curve}")
    return EXIT_OK


def _model_labels(models: list[M.ModelWeights]) -> list[str]:
    labels = []
    for w in models:
        base = "nn" if w.config.head_conv else "nn_nohead"
        label, k = base, 2
        while label in labels:
            label, k = f"{base}_{k}", k + 1
        labels.append(label)
    return labels


def cmd_eval(args) -> int:
    samples, n, _ = D.load_dataset(args.dataset)
    paths = [args.model] + list(args.model2 or [])
    models = [M.load_weights(p) for p in paths]
    for p, w in zip(paths, models):
        if w.config.n != n:
            raise ShapeError(f"model {p} has block size {w.config.n}, dataset {args.dataset} has {n}")
    labels = _model_labels(models)
    names = labels + list(E.CLASSICAL_MODES)
    bits = {m: (args.nn_bits if m in labels else args.classical_bits) for m in names}
    report = E.evaluate_model(dict(zip(labels, models)), samples, args.lam, bits)
    E.write_report_csv(args.out, report)
    print(report.summary())
    return EXIT_OK


def cmd_visualize(args) -> int:
    samples, n, _ = D.load_dataset(args.dataset)
    w = M.load_weights(args.model)
    if w.config.n != n:
        raise ShapeError(f"model block size {w.config.n} does not match dataset block size {n}")
    if not 0 <= args.index < len(samples):
        raise UsageError(f"index {args.index} out of range for {len(samples)} samples")
    sample = samples[args.index]
    pred, attn = M.model_forward(sample, w)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    E.export_attention_map(attn, out / "attention.pgm")
    E.write_pgm(out / "predicted.pgm", E.block_to_gray(pred))
    E.write_pgm(out / "target.pgm", E.block_to_gray(sample.target))
    print(f"attention {attn.probs.shape[0]}x{attn.probs.shape[1]}, PSNR {E.psnr(pred, sample.target):.2f} dB -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="attnchroma", description="Chroma intra prediction with a boundary-attention network.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    x = sub.add_parser("extract", help="extract N x N patches from an image directory")
    x.add_argument("--images", required=True, type=Path)
    x.add_argument("--out", required=True, type=Path)
    x.add_argument("--block-size", required=True, type=_block_size)
    x.add_argument("--per-image", type=int, default=16)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--pyramid", action="store_true", help="draw a random 1/1..1/4 bilinear scale per image")
    x.add_argument("--threads", type=int, default=_default_threads())
    x.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", help="train one block-size model")
    t.add_argument("--dataset", required=True, type=Path)
    t.add_argument("--val", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--steps", type=int, default=200_000)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--val-interval", type=int, default=1000)
    t.add_argument("--no-head-conv", action="store_true", help="drop the 3x3 head layer")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--curve", type=Path, help="loss CSV path (default: OUT.loss.csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR per mode and RD mode competition")
    e.add_argument("--model", required=True, type=Path)
    e.add_argument("--model2", action="append", type=Path, help="additional model (repeatable)")
    e.add_argument("--dataset", required=True, type=Path)
    e.add_argument("--lambda", dest="lam", required=True, type=float)
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("--nn-bits", type=float, default=E.DEFAULT_NN_BITS)
    e.add_argument("--classical-bits", type=float, default=E.DEFAULT_CLASSICAL_BITS)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="export the attention map of one sample")
    v.add_argument("--model", required=True, type=Path)
    v.add_argument("--dataset", required=True, type=Path)
    v.add_argument("--index", required=True, type=int)
    v.add_argument("--out", required=True, type=Path)
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"attnchroma: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"attnchroma: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ShapeError, OSError, ValueError) as exc:
        print(f"attnchroma: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
