"""Command line front end: sstu segment|simulate|forge|train|eval|timing."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import datasets, metrics, model, pipeline, training
from .datasets import AugmentConfig, ChromaConfig


def _cmd_segment(args):
    cfg = pipeline.PipelineConfig(
        model_path=args.model, input_dir=args.input, output_dir=args.out,
        camera_config=args.camera_config, virtual_dir=args.virtual,
        threshold=args.threshold, capture_latency_ms=args.capture_latency,
        fps=args.fps, parallel_eyes=not args.no_parallel_eyes)
    records, consistencies = pipeline.run_segmentation(cfg, log=_warn)
    done = [r for r in records if r.processed]
    print(f"processed {len(done)}/{len(records)} stereo frames -> {args.out}")
    if consistencies:
        print(f"mean stereo consistency (IoU): {np.mean(consistencies):.4f}")
    if done:
        print(pipeline.timing_report(records, args.capture_latency).format_text())
    return 0


def _cmd_simulate(args):
    stats = pipeline.simulate_stream(args.fps, args.inference_ms, args.duration)
    print(f"frames arrived:   {stats.total}")
    print(f"frames processed: {stats.processed}")
    print(f"frames dropped:   {stats.dropped}")
    print(f"processed ratio:  {stats.ratio:.4f}")
    return 0


def _cmd_forge(args):
    rng = np.random.default_rng(args.seed)
    if args.toy:
        ds = datasets.synth_blobs(args.train_count, args.val_count, rng,
                                  variant=args.variant)
        datasets.save_samples(args.out, "train", ds.train)
        datasets.save_samples(args.out, "val", ds.val)
        print(f"wrote {len(ds.train)} train / {len(ds.val)} val synthetic samples "
              f"to {args.out}")
        return 0
    if not args.foreground or not args.background:
        raise ValueError("forge needs --foreground and --background dirs "
                         "(or --toy for the synthetic set)")
    cfg = ChromaConfig(min_saturation=args.min_saturation, min_value=args.min_value)
    fgs = datasets.load_loose_images(args.foreground)
    bgs = datasets.load_loose_images(args.background)
    samples = []
    for i, (fg_img, fg_meta) in enumerate(fgs):
        bg_img, _ = bgs[datasets.pair_background(fg_meta, [m for _, m in bgs], i)]
        mask = datasets.chroma_key(fg_img, cfg)
        samples.append(datasets.Sample(
            datasets.composite(fg_img, mask, bg_img).astype(np.float32),
            mask, origin="ego", meta=fg_meta))
    split = max(1, int(len(samples) * (1.0 - args.val_fraction)))
    datasets.save_samples(args.out, "train", samples[:split])
    datasets.save_samples(args.out, "val", samples[split:])
    print(f"forged {split} train / {len(samples) - split} val samples to {args.out}")
    return 0


def _cmd_train(args):
    cfg = training.TrainConfig(
        batch_size=args.batch_size, learning_rate=args.learning_rate,
        epochs=args.epochs, seed=args.seed,
        stop_at_val_miou=args.stop_at_miou)
    if args.toy:
        rng = np.random.default_rng(args.seed)
        ds = datasets.synth_blobs(args.train_count, args.val_count, rng,
                                  variant="exo")
        arch = model.ArchConfig(input_size=64, base_channels=args.base_channels)
        bundle = model.build(arch, seed=args.seed)
        trained, _ = training.train_base(bundle, ds.train, cfg,
                                         val_set=ds.val, log=print)
        report = metrics.evaluate_set(lambda im: model.infer(trained, im), ds.val)
        print(f"final val miou {report.miou:.4f}")
    else:
        if not args.data or not args.model:
            raise ValueError("train needs --data and --model (or --toy)")
        origin = "ego" if args.mode == "ego" else "exo"
        train_set = datasets.load_samples(args.data, "train", origin=origin)
        val_set = datasets.load_samples(args.data, "val", origin=origin)
        if args.exo_data:
            # balanced mixture: all --data samples + an equal random exo subset
            exo_set = datasets.load_samples(args.exo_data, "train", origin="exo")
            train_set = datasets.balanced_sampler(
                train_set, exo_set, np.random.default_rng(args.seed))
        bundle = model.load_weights(args.model)
        aug = AugmentConfig() if args.augment else None
        if args.mode == "base":
            trained, _ = training.train_base(bundle, train_set, cfg, aug,
                                             val_set, log=print)
        elif args.mode in ("f1", "f2"):
            trained, _ = training.finetune(bundle, train_set, args.mode, cfg,
                                           aug, val_set, log=print)
        elif args.mode == "ego":
            if bundle.arch.decoders == 1:
                bundle = model.expand_to_dual(bundle, seed=args.seed)
            trained, _ = training.train_ego_decoder(bundle, train_set, cfg,
                                                    aug, val_set, log=print)
        else:
            raise ValueError(f"unknown training mode {args.mode!r}")
    model.save_weights(trained, args.out)
    print(f"saved bundle tagged {trained.tag!r} to {args.out}")
    return 0


def _predict_fn(bundle):
    return lambda image: model.infer(bundle, image)


def _cmd_eval(args):
    if args.pred:
        # directory-vs-directory mode: compare precomputed masks
        pred_names = sorted(n for n in os.listdir(args.pred) if n.endswith(".png"))
        pairs = []
        for name in pred_names:
            gt_path = os.path.join(args.gt, name)
            if not os.path.exists(gt_path):
                raise ValueError(f"ground truth for {name} not found in {args.gt}")
            pairs.append((os.path.splitext(name)[0],
                          datasets.load_mask(os.path.join(args.pred, name)),
                          datasets.load_mask(gt_path)))
        report = metrics.evaluate_masks(pairs)
        print(report.to_csv(), end="")
        if args.out:
            with open(args.out, "w") as f:
                f.write(report.to_csv())
        return 0

    if not args.model or not args.data:
        raise ValueError("eval needs --model and --data (or --pred/--gt dirs)")
    rows = []
    dataset_names = []
    for data_root in args.data:
        dataset_names.append(os.path.basename(os.path.normpath(data_root)))
    for model_path in args.model:
        bundle = model.load_weights(model_path)
        size = bundle.arch.input_size
        row = [bundle.tag]
        for data_root in args.data:
            samples = datasets.load_samples(data_root, args.split)
            for s in samples:
                if s.image.shape[1] != size:
                    raise ValueError(
                        f"{data_root}: sample size {s.image.shape[1]} does not match "
                        f"model input {size}")
            report = metrics.evaluate_set(_predict_fn(bundle), samples,
                                          args.threshold)
            row.append(report.miou)
            csv_name = f"eval_{bundle.tag}_{os.path.basename(os.path.normpath(data_root))}.csv"
            if args.out:
                os.makedirs(args.out, exist_ok=True)
                with open(os.path.join(args.out, csv_name), "w") as f:
                    f.write(report.to_csv())
        rows.append(row)

    # Table-style mIoU summary: rows = bundle tags, columns = dataset names
    width = max(len(r[0]) for r in rows) + 2
    print("mIoU".ljust(width) + "".join(n.rjust(14) for n in dataset_names))
    for row in rows:
        print(row[0].ljust(width) + "".join(f"{v:14.4f}" for v in row[1:]))
    return 0


def _cmd_timing(args):
    records = []
    with open(args.input) as f:
        header = f.readline().strip()
        if header != pipeline.TIMING_CSV_HEADER:
            raise ValueError(f"{args.input}: unexpected timing CSV header")
        for line in f:
            v = line.strip().split(",")
            if len(v) != 8:
                continue
            records.append(pipeline.FrameRecord(
                index=int(v[0]), arrival_ms=float(v[1]), prep_ms=float(v[2]),
                inference_ms=float(v[3]), composite_ms=float(v[4]),
                processed=v[7] == "0"))
    print(pipeline.timing_report(records, args.capture_latency).format_text())
    return 0


def _warn(msg):
    print(msg, file=sys.stderr)


def build_parser():
    p = argparse.ArgumentParser(prog="sstu",
                                description="Body segmentation and video "
                                            "see-through compositing pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    seg = sub.add_parser("segment", help="segment + composite a stereo frame dir")
    seg.add_argument("--model", required=True)
    seg.add_argument("--in", dest="input", required=True)
    seg.add_argument("--out", required=True)
    seg.add_argument("--camera-config")
    seg.add_argument("--virtual", help="dir of <n>_V.png virtual layers")
    seg.add_argument("--threshold", type=float, default=0.5)
    seg.add_argument("--fps", type=float, default=60.0)
    seg.add_argument("--capture-latency", type=float, default=37.0)
    seg.add_argument("--no-parallel-eyes", action="store_true")
    seg.set_defaults(fn=_cmd_segment)

    sim = sub.add_parser("simulate", help="frame-drop model of the stream")
    sim.add_argument("--fps", type=float, default=60.0)
    sim.add_argument("--inference-ms", type=float, required=True)
    sim.add_argument("--duration", type=float, default=1.0, help="seconds")
    sim.set_defaults(fn=_cmd_simulate)

    forge = sub.add_parser("forge", help="build a dataset (chroma key or synthetic)")
    forge.add_argument("--out", required=True)
    forge.add_argument("--toy", action="store_true")
    forge.add_argument("--variant", choices=("ego", "exo"), default="ego")
    forge.add_argument("--train-count", type=int, default=200)
    forge.add_argument("--val-count", type=int, default=40)
    forge.add_argument("--foreground", help="green-screen capture dir")
    forge.add_argument("--background", help="background plate dir")
    forge.add_argument("--min-saturation", type=float, default=0.3)
    forge.add_argument("--min-value", type=float, default=0.15)
    forge.add_argument("--val-fraction", type=float, default=0.1)
    forge.add_argument("--seed", type=int, default=0)
    forge.set_defaults(fn=_cmd_forge)

    tr = sub.add_parser("train", help="train or fine-tune a bundle")
    tr.add_argument("--toy", action="store_true", help="synthetic blob experiment")
    tr.add_argument("--model", help="input bundle (ignored with --toy)")
    tr.add_argument("--data", help="dataset root with train/ and val/")
    tr.add_argument("--exo-data", help="exocentric dataset root for balancing")
    tr.add_argument("--out", required=True, help="output bundle path")
    tr.add_argument("--mode", choices=("base", "f1", "f2", "ego"), default="base")
    tr.add_argument("--epochs", type=int, default=30)
    tr.add_argument("--batch-size", type=int, default=12)
    tr.add_argument("--learning-rate", type=float, default=1e-3)
    tr.add_argument("--base-channels", type=int, default=8)
    tr.add_argument("--train-count", type=int, default=200)
    tr.add_argument("--val-count", type=int, default=40)
    tr.add_argument("--stop-at-miou", type=float, default=None)
    tr.add_argument("--augment", action="store_true")
    tr.add_argument("--seed", type=int, default=0)
    tr.set_defaults(fn=_cmd_train)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--model", action="append", help="bundle path (repeatable)")
    ev.add_argument("--data", action="append", help="dataset root (repeatable)")
    ev.add_argument("--split", default="val")
    ev.add_argument("--pred", help="dir of predicted masks (skips the model)")
    ev.add_argument("--gt", help="dir of ground-truth masks for --pred")
    ev.add_argument("--threshold", type=float, default=0.5)
    ev.add_argument("--out", help="CSV output path (dir in model mode)")
    ev.set_defaults(fn=_cmd_eval)

    tm = sub.add_parser("timing", help="summarize a timing CSV")
    tm.add_argument("--in", dest="input", required=True)
    tm.add_argument("--capture-latency", type=float, default=37.0)
    tm.set_defaults(fn=_cmd_timing)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # one-line reason, nonzero exit
        print(f"sstu {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
