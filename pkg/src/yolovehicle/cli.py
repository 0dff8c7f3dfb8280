"""Command-line entry point: detect, dehaze, train-toy, eval, bench,
serve-edge, serve-cloud.

Exit codes: 0 success, 1 runtime failure (one-line diagnostic on stderr),
2 usage error. All output files are written atomically (temp + rename).
Passing --seed makes the primary output files byte-identical across runs:
weights are derived from the seed where applicable and per-line timing
fields are zeroed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

from . import config as cfgmod
from . import detection as det
from . import edgecloud as ec
from . import metrics as mx
from . import model as md
from .dehaze import dehaze_forward
from .ppm import image_to_ppm_bytes, read_ppm


def atomic_write(path, data) -> None:
    """Writes bytes or text to path via a temp file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".yv-tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _add_common(p, *names):
    if "config" in names:
        p.add_argument("--config", help="key=value config file")
    if "weights" in names:
        p.add_argument("--weights", help="weights archive path")
    if "seed" in names:
        p.add_argument("--seed", type=int,
                       help="fix all RNG streams; output becomes reproducible")
    if "thresh" in names:
        p.add_argument("--obj-thresh", dest="obj_thresh", type=float,
                       help="objectness threshold (default 0.5)")
        p.add_argument("--nms-iou", dest="nms_iou", type=float,
                       help="NMS IoU threshold (default 0.5)")
    if "policy" in names:
        p.add_argument("--mode", choices=["always_edge", "always_cloud",
                                          "adaptive"],
                       help="offload policy (default adaptive)")
        p.add_argument("--tau", type=float,
                       help="haze threshold for adaptive routing (default 0.6)")
    if "cloud" in names:
        p.add_argument("--cloud", help="cloud node address host:port")
        p.add_argument("--timeout-ms", dest="timeout_ms", type=float,
                       help="cloud request timeout (default 1000)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="yolovehicle",
        description="Text-prompted vehicle detection with dehazing and "
                    "edge-cloud offloading.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="detect vehicles in one PPM image")
    p.add_argument("--image", required=True, help="input image (PPM P6)")
    p.add_argument("--text", help="comma-separated phrases (default "
                                  "'car, truck, bus')")
    p.add_argument("--output", default="detections.jsonl",
                   help="JSON-lines output path (default detections.jsonl)")
    p.add_argument("--pro", action="store_true",
                   help="run the dehazing front-end before detection")
    _add_common(p, "config", "weights", "seed", "thresh")

    p = sub.add_parser("dehaze", help="dehaze one PPM image")
    p.add_argument("--image", required=True, help="input image (PPM P6)")
    p.add_argument("--output", default="dehazed.ppm",
                   help="output image path (default dehazed.ppm)")
    _add_common(p, "config", "weights", "seed")

    p = sub.add_parser("train-toy",
                       help="overfit the detector on synthetic scenes")
    p.add_argument("--steps", type=int, default=200,
                   help="gradient steps, at most 1000 (default 200)")
    p.add_argument("--lr", type=float, default=0.01,
                   help="learning rate (default 0.01)")
    p.add_argument("--save", help="write the trained weights archive here")
    _add_common(p, "config", "seed")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--preds", required=True, help="predictions (JSON-lines)")
    p.add_argument("--gts", required=True, help="ground truth (JSON-lines)")
    p.add_argument("--output", default="eval.json",
                   help="report path (default eval.json)")
    _add_common(p, "config")

    p = sub.add_parser("bench", help="measure throughput over an image set")
    p.add_argument("--input-dir", dest="input_dir", required=True,
                   help="directory of PPM images")
    p.add_argument("--repetitions", type=int, default=1,
                   help="passes over the image set (default 1)")
    p.add_argument("--output", default="bench.json",
                   help="report path (default bench.json)")
    p.add_argument("--detections", help="also write detections (JSON-lines)")
    _add_common(p, "config", "weights", "seed", "thresh", "policy", "cloud")

    p = sub.add_parser("serve-edge", help="run the edge node over an image set")
    p.add_argument("--input-dir", dest="input_dir", required=True,
                   help="directory of PPM images")
    p.add_argument("--output", default="detections.jsonl",
                   help="JSON-lines output path (default detections.jsonl)")
    p.add_argument("--stats", help="also write a JSON stats report here")
    _add_common(p, "config", "weights", "seed", "thresh", "policy", "cloud")

    p = sub.add_parser("serve-cloud", help="run the cloud detection server")
    p.add_argument("--listen", default="127.0.0.1:5956",
                   help="listen address (default 127.0.0.1:5956)")
    p.add_argument("--text", help="detection phrases served to all clients")
    _add_common(p, "config", "weights", "seed", "thresh")

    return parser


def effective_config(args) -> dict:
    file_values = cfgmod.load_config(args.config) if getattr(args, "config", None) else {}
    flags = {k: getattr(args, k) for k in cfgmod.SCHEMA
             if getattr(args, k, None) is not None}
    return cfgmod.merge(file_values, flags)


def _load_bundle(cfg, args):
    """Weights from the archive; a fixed seed with no archive requested
    means a reproducible freshly initialized model."""
    path = cfg["weights"]
    explicit = getattr(args, "weights", None) is not None
    if os.path.exists(path):
        return md.load_bundle(path)
    if not explicit and args.seed is not None:
        return md.init_bundle(args.seed)
    raise FileNotFoundError(f"weights archive not found: {path}")


def _ppm_paths(input_dir):
    if not os.path.isdir(input_dir):
        raise FileNotFoundError(f"input directory not found: {input_dir}")
    paths = sorted(os.path.join(input_dir, n) for n in os.listdir(input_dir)
                   if n.endswith(".ppm"))
    if not paths:
        raise FileNotFoundError(f"no .ppm images in {input_dir}")
    return paths


def cmd_detect(args) -> int:
    cfg = effective_config(args)
    bundle = _load_bundle(cfg, args)
    image = read_ppm(args.image)
    dets, ms = md.detect_frame(image, cfg["text"], bundle,
                               dehaze_first=args.pro,
                               obj_thresh=cfg["obj_thresh"],
                               nms_iou=cfg["nms_iou"])
    out_ms = 0.0 if args.seed is not None else ms
    atomic_write(args.output, det.detections_to_jsonl(dets, 0, out_ms))
    print(f"{len(dets)} detections -> {args.output}")
    return 0


def cmd_dehaze(args) -> int:
    cfg = effective_config(args)
    bundle = _load_bundle(cfg, args)
    restored = dehaze_forward(read_ppm(args.image), bundle.gen)
    atomic_write(args.output, image_to_ppm_bytes(restored))
    print(f"dehazed image -> {args.output}")
    return 0


def cmd_train_toy(args) -> int:
    cfg = effective_config(args)
    seed = args.seed if args.seed is not None else cfg["seed"]
    weights = det.DetectLossWeights(lambda_cls=cfg["lambda1"],
                                    lambda_bbox=cfg["lambda2"],
                                    lambda_dfl=cfg["lambda3"])
    _, bundle = md.train_toy(seed=seed, steps=args.steps, lr=args.lr,
                             weights=weights, text=cfg["text"],
                             log=print)
    if args.save:
        md.save_bundle(args.save, bundle)
        print(f"weights ({os.path.getsize(args.save)} bytes) -> {args.save}",
              file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    with open(args.preds, encoding="utf-8") as fh:
        preds = det.jsonl_to_detections(fh.read())
    with open(args.gts, encoding="utf-8") as fh:
        gts = det.jsonl_to_detections(fh.read())
    results = mx.map_at(preds, gts, thresholds=(0.5, 0.75))
    report = {}
    for thr, r in results.items():
        report[f"map@{int(thr * 100)}"] = r.map
        report[f"ap@{int(thr * 100)}"] = {str(k): v for k, v in r.ap.items()}
        report[f"counts@{int(thr * 100)}"] = {
            str(k): {"tp": r.tp[k], "fp": r.fp[k], "fn": r.fn[k],
                     "tn": None}
            for k in sorted(r.tp)}
    atomic_write(args.output, json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"mAP@50 {report['map@50']:.4f} mAP@75 {report['map@75']:.4f} "
          f"-> {args.output}")
    return 0


def _edge_kwargs(args, cfg):
    policy = ec.OffloadPolicy(cfg["mode"], cfg["tau"])
    kwargs = {"obj_thresh": cfg["obj_thresh"], "nms_iou": cfg["nms_iou"],
              "text": cfg["text"], "timing_in_output": args.seed is None}
    if policy.mode != "always_edge":
        if not cfg["cloud"]:
            raise ValueError(f"policy {policy.mode!r} requires --cloud")
        kwargs["cloud_addr"] = cfg["cloud"]
        kwargs["timeout_ms"] = cfg["timeout_ms"]
    return policy, kwargs


def cmd_bench(args) -> int:
    cfg = effective_config(args)
    bundle = _load_bundle(cfg, args)
    policy, kwargs = _edge_kwargs(args, cfg)
    lines = []
    _, _, report = ec.run_bench(_ppm_paths(args.input_dir), policy, bundle,
                                repetitions=args.repetitions,
                                emit=lines.append, **kwargs)
    if os.path.exists(cfg["weights"]):
        report["model_size_bytes"] = os.path.getsize(cfg["weights"])
    if args.detections:
        atomic_write(args.detections, "".join(lines))
    atomic_write(args.output, json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"{report['frames']} frames, {report['fps']:.2f} fps, "
          f"mean {report['mean_frame_ms']:.2f} ms -> {args.output}")
    return 0


def cmd_serve_edge(args) -> int:
    cfg = effective_config(args)
    bundle = _load_bundle(cfg, args)
    policy, kwargs = _edge_kwargs(args, cfg)
    paths = _ppm_paths(args.input_dir)
    frames = [(i, read_ppm(p)) for i, p in enumerate(paths)]
    lines = []
    stats, _ = ec.edge_serve(frames, policy, bundle, emit=lines.append,
                             **kwargs)
    atomic_write(args.output, "".join(lines))
    if args.stats:
        report = {"frames": stats.frames, "edge": stats.edge,
                  "cloud": stats.cloud, "degraded": stats.degraded,
                  "haze_scores": stats.haze_scores}
        atomic_write(args.stats, json.dumps(report, indent=2) + "\n")
    print(f"{stats.frames} frames (edge {stats.edge}, cloud {stats.cloud}, "
          f"degraded {stats.degraded}) -> {args.output}")
    return 0


def cmd_serve_cloud(args) -> int:
    cfg = effective_config(args)
    bundle = _load_bundle(cfg, args)
    ec.cloud_serve(args.listen, bundle, text=cfg["text"],
                   obj_thresh=cfg["obj_thresh"], nms_iou=cfg["nms_iou"])
    return 0


COMMANDS = {
    "detect": cmd_detect,
    "dehaze": cmd_dehaze,
    "train-toy": cmd_train_toy,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "serve-edge": cmd_serve_edge,
    "serve-cloud": cmd_serve_cloud,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        return 1
    except Exception as e:
        print(f"yolovehicle: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
