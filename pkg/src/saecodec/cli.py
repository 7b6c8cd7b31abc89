"""Command-line front end: ``saecodec {train,encode,decode,truncate,eval,curve,info}``.

Exit codes: 0 success, 1 usage, 2 data error, 3 model error.  Diagnostics
go to stderr, summaries to stdout.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import (
    CodecError, DecodeError, ImageIOError, InvalidArgumentError, MetricError, ModelError,
    PreconditionError, UnsupportedError)
from .imageio import list_images, read_image, write_image
from .metrics import MIN_SIDE, ms_ssim, psnr, rd_curve, write_curve_csv
from .network import ScalableModel, init_layer, load_model, model_from_bytes, save_model
from .pipeline import LayeredBitstream, read_stream, sae_decode, sae_encode, stream_bpp, truncate, write_stream

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3

log = logging.getLogger("saecodec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_model(path) -> ScalableModel:
    try:
        return load_model(path)
    except OSError as exc:
        raise ModelError(f"cannot read model {path}: {exc.strerror or exc}") from exc


def _read_stream(path, model=None) -> LayeredBitstream:
    try:
        return read_stream(path, model)
    except OSError as exc:
        raise DecodeError(f"cannot read stream {path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    from .training import (
        center_crops, ingest_dataset, load_checkpoint, load_config, new_trainer_state, save_checkpoint,
        train_layer)

    try:
        cfg = load_config(args.config)
    except OSError as exc:
        raise ImageIOError(f"cannot read config {args.config}: {exc.strerror or exc}") from exc
    if args.seed is not None:
        cfg.seed = args.seed
    i = args.layer
    model_path = Path(args.model)

    if args.resume:
        model, ck_layer, state = load_checkpoint(args.resume)
        if ck_layer != i:
            raise UsageError(f"checkpoint is for layer {ck_layer}, not --layer {i}")
    else:
        trained = _load_model(model_path).layers if model_path.exists() else []
        if i > len(trained):
            raise ModelError(f"cannot train layer {i}: {model_path} holds only {len(trained)} trained layer(s)")
        if i >= len(cfg.feature_maps) or i >= len(cfg.lambdas):
            raise UsageError(f"config defines {min(len(cfg.feature_maps), len(cfg.lambdas))} layers, no layer {i}")
        if i < len(trained):
            log.warning("retraining layer %d discards %d layer(s) above it", i, len(trained) - i - 1)
        fresh = init_layer(int(cfg.feature_maps[i]), float(cfg.lambdas[i]), i, np.random.default_rng([cfg.seed, i]))
        model = ScalableModel(trained[:i] + [fresh])
        state = new_trainer_state(cfg, i)

    if not cfg.dataset:
        raise UsageError("config lists no dataset paths")
    data = ingest_dataset(cfg.dataset, cfg.crop, cfg.seed, cfg.batch_size)
    validation = None
    if cfg.validation:
        imgs = [read_image(p) for p in _expand(cfg.validation)]
        imgs = [im for im in imgs if min(im.shape[:2]) >= cfg.crop]
        validation = center_crops(imgs, cfg.crop) if imgs else None

    limit = args.iterations if args.iterations is not None else (cfg.max_iterations or None)
    cap = cfg.epochs * data.batches_per_epoch
    limit = cap if limit is None else min(limit, cap)
    ckpt = Path(args.checkpoint) if args.checkpoint else model_path.with_suffix(".ckpt.npz")
    while state.iteration < limit:
        stop = min(limit, state.iteration + args.checkpoint_every)
        report = train_layer(model, i, data, cfg, validation, state=state, max_iterations=stop)
        save_checkpoint(ckpt, model, i, state)
        if report.stop_reason == "validation loss stable":
            break
    report = state.report
    if report.stop_reason != "validation loss stable":
        report.stop_reason = "epoch cap" if state.iteration >= cap else "iteration limit"

    save_model(model, model_path)
    report_path = Path(args.report) if args.report else model_path.with_name(f"{model_path.stem}.layer{i}.csv")
    report.to_csv(report_path)
    last = report.iterations[-1] if report.iterations else (0, float("nan"), float("nan"), float("nan"))
    print(f"layer {i}: {state.iteration} iterations ({report.stop_reason}); "
          f"last loss {last[1]:.4f}, bpp {last[2]:.4f}, distortion {last[3]:.4f}")
    print(f"model -> {model_path}  report -> {report_path}  checkpoint -> {ckpt}")
    return EXIT_OK


def _expand(paths):
    out = []
    for p in map(Path, paths):
        out.extend(list_images(p) if p.is_dir() else [p])
    return out


def cmd_encode(args) -> int:
    image = read_image(args.image)
    model = _load_model(args.model)
    k = model.num_layers if args.layers is None else args.layers
    if not 1 <= k <= model.num_layers:
        raise UsageError(f"--layers must be in [1, {model.num_layers}]")
    stream = sae_encode(image, model, k)
    write_stream(stream, args.output)
    bpp = stream_bpp(stream)
    for i, (b, c) in enumerate(zip(bpp, np.cumsum(bpp))):
        print(f"layer {i}: {len(stream.payloads[i].data)} bytes  {b:.6f} bpp  cumulative {c:.6f} bpp")
    print(f"wrote {args.output} ({len(stream.to_bytes())} bytes, {stream.width}x{stream.height})")
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load_model(args.model)
    stream = _read_stream(args.stream, model)
    k = stream.num_layers if args.layers is None else args.layers
    if not 1 <= k <= stream.num_layers:
        raise UsageError(f"--layers must be in [1, {stream.num_layers}]")
    image = sae_decode(stream, model, k)
    write_image(image, args.output)
    print(f"decoded {k} of {stream.num_layers} layer(s) -> {args.output} ({stream.width}x{stream.height})")
    return EXIT_OK


def cmd_truncate(args) -> int:
    stream = _read_stream(args.stream)
    if not 1 <= args.k <= stream.num_layers:
        raise UsageError(f"k must be in [1, {stream.num_layers}]")
    out = truncate(stream, args.k)
    write_stream(out, args.output)
    print(f"kept {args.k} of {stream.num_layers} layer(s): {len(out.to_bytes())} bytes -> {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ref = read_image(args.reference)
    rec = read_image(args.reconstruction)
    if ref.shape != rec.shape:
        raise InvalidArgumentError(f"image sizes differ: {ref.shape[:2]} vs {rec.shape[:2]}")
    if args.stream:
        s = _read_stream(args.stream)
        print(f"bpp: {float(np.sum(stream_bpp(s))):.6f}")
    print(f"psnr_db: {psnr(ref, rec):.4f}")
    if min(ref.shape[:2]) >= MIN_SIDE:
        print(f"ms_ssim: {ms_ssim(ref, rec):.6f}")
    else:
        print(f"ms_ssim: nan (needs both sides >= {MIN_SIDE})")
    return EXIT_OK


def cmd_curve(args) -> int:
    model = _load_model(args.model)
    paths = list_images(args.images)
    if not paths:
        raise ImageIOError(f"no .png/.ppm images in {args.images}")
    points = rd_curve(model, (read_image(p) for p in paths), args.layers)
    write_curve_csv(points, args.output)
    for i, p in enumerate(points):
        print(f"layer {i}: {p.bpp:.6f} bpp  {p.psnr_db:.4f} dB  ms-ssim {p.ms_ssim:.6f}")
    print(f"{len(paths)} image(s) -> {args.output}")
    return EXIT_OK


def cmd_info(args) -> int:
    try:
        buf = Path(args.file).read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read {args.file}: {exc.strerror or exc}") from exc
    if buf[:4] == b"SAEM":
        model = model_from_bytes(buf)
        print(f"model {model.identifier():016x}: {model.num_layers} layer(s), version {model.version}")
        for layer in model.layers:
            n = sum(a.size for a in layer.ae_params().values())
            print(f"  layer {layer.layer_index}: {layer.feature_maps} feature maps, lambda {layer.lambda_rate:g}, "
                  f"{n} autoencoder parameters")
        return EXIT_OK
    s = LayeredBitstream.from_bytes(buf)
    print(f"stream v{s.version}: {s.width}x{s.height} (padded {s.padded_width}x{s.padded_height}), "
          f"{s.num_layers} layer(s), model {s.model_id:016x}")
    for i, (p, b) in enumerate(zip(s.payloads, stream_bpp(s))):
        print(f"  layer {i}: {len(p.data)} bytes  {b:.6f} bpp")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="saecodec", description="Scalable learned image codec.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one layer with the layers below it frozen")
    t.add_argument("config", help="key = value training config")
    t.add_argument("--layer", type=int, required=True)
    t.add_argument("--model", required=True, help="model file to extend (created for layer 0)")
    t.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint written by an earlier run")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int, help="stop after this many iterations in total")
    t.add_argument("--checkpoint", help="checkpoint path (default: <model>.ckpt.npz)")
    t.add_argument("--checkpoint-every", type=int, default=1000)
    t.add_argument("--report", help="training CSV path (default: <model>.layer<i>.csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="encode an image into a layered stream")
    e.add_argument("image")
    e.add_argument("model")
    e.add_argument("-o", "--output", required=True)
    e.add_argument("--layers", type=int)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decode the first k layers of a stream")
    d.add_argument("stream")
    d.add_argument("model")
    d.add_argument("-o", "--output", required=True)
    d.add_argument("--layers", type=int)
    d.set_defaults(func=cmd_decode)

    tr = sub.add_parser("truncate", help="drop enhance layers from a stream without decoding")
    tr.add_argument("stream")
    tr.add_argument("k", type=int)
    tr.add_argument("-o", "--output", required=True)
    tr.set_defaults(func=cmd_truncate)

    ev = sub.add_parser("eval", help="PSNR / MS-SSIM of a reconstruction")
    ev.add_argument("reference")
    ev.add_argument("reconstruction")
    ev.add_argument("--stream", help="also report the stream's bpp")
    ev.set_defaults(func=cmd_eval)

    c = sub.add_parser("curve", help="per-layer R-D points averaged over a directory of images")
    c.add_argument("model")
    c.add_argument("images")
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--layers", type=int)
    c.set_defaults(func=cmd_curve)

    i = sub.add_parser("info", help="describe a model or stream file")
    i.add_argument("file")
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"saecodec {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelError as exc:
        print(f"saecodec {args.command}: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (ImageIOError, DecodeError, InvalidArgumentError, PreconditionError, MetricError,
            UnsupportedError, CodecError) as exc:
        print(f"saecodec {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"saecodec {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
