"""Command-line entry point.

One JSON configuration file drives every subcommand; unknown keys anywhere
in the file are rejected before any work starts. Every subcommand is a pure
function of (config, seed): reruns produce identical artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import arch as A
from . import data as D
from . import evaluate as E
from . import graph as G
from . import rf as RF
from . import tensor as T
from . import train as TR
from .gradcheck import grad_check


class ConfigError(ValueError):
    pass


def _from_keys(cls, obj: dict, where: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - fields
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    fixed = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
    try:
        return cls(**fixed)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    protocol: str = "coco"
    conf_threshold: float = 0.01
    nms_threshold: float = 0.45
    max_per_image: int = 200
    overlay_score_floor: float = 0.6

    def __post_init__(self):
        if self.protocol not in ("coco", "voc"):
            raise ValueError(f"protocol must be coco or voc, got {self.protocol!r}")


@dataclasses.dataclass
class RunConfig:
    arch: A.ArchConfig
    train: TR.TrainConfig
    eval: EvalConfig
    synthetic: TR.SyntheticSpec | None
    annotations: str | None
    images_dir: str | None
    output: str
    variant: str = "fused"

    @staticmethod
    def parse(doc: dict, base_dir: str = ".") -> "RunConfig":
        known = {"arch", "train", "eval", "data", "output", "variant"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"config: unknown keys {sorted(unknown)}")
        arch = _from_keys(A.ArchConfig, doc.get("arch", {}), "arch")
        train = _from_keys(TR.TrainConfig, doc.get("train", {}), "train")
        ev = _from_keys(EvalConfig, doc.get("eval", {}), "eval")
        data = doc.get("data", {})
        dkeys = set(data) - {"synthetic", "annotations", "images_dir"}
        if dkeys:
            raise ConfigError(f"data: unknown keys {sorted(dkeys)}")
        synth = None
        if "synthetic" in data:
            synth = _from_keys(TR.SyntheticSpec, data["synthetic"], "data.synthetic")
        annotations = data.get("annotations")
        images_dir = data.get("images_dir")
        if annotations is not None:
            annotations = os.path.join(base_dir, annotations)
            images_dir = os.path.join(base_dir, images_dir or ".")
        variant = doc.get("variant", "fused")
        if variant not in A.ABLATION_VARIANTS:
            raise ConfigError(f"variant: unknown {variant!r}; "
                              f"choose from {sorted(A.ABLATION_VARIANTS)}")
        output = doc.get("output", "runs")
        if not os.path.isabs(output):
            output = os.path.join(base_dir, output)
        return RunConfig(arch, train, ev, synth, annotations, images_dir,
                         output, variant)


def load_config(path: str, seed: int | None, width_mult: float | None) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path}: invalid JSON ({e})") from e
    cfg = RunConfig.parse(doc, base_dir=os.path.dirname(os.path.abspath(path)))
    if seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=seed)
        if cfg.synthetic is not None:
            cfg.synthetic = dataclasses.replace(cfg.synthetic, seed=seed)
    if width_mult is not None:
        cfg.arch = dataclasses.replace(cfg.arch, width_mult=width_mult)
    return cfg


def _build(cfg: RunConfig) -> G.NetworkGraph:
    return A.build_ablation(cfg.variant, cfg.arch)


def _training_samples(cfg: RunConfig):
    """(samples, dataset) where samples are in-memory training triples and
    dataset is the record view used by evaluation."""
    if cfg.synthetic is not None:
        synth = TR.generate_synthetic(cfg.synthetic)
        samples = synth.samples
        size = cfg.arch.input_size
        if cfg.synthetic.image_size != size:
            samples = [(D.resize_bilinear(img, (size, size)), boxes, labels)
                       for img, boxes, labels in samples]
        return samples, synth.to_dataset(), synth
    if cfg.annotations is None:
        raise ConfigError("data: need either synthetic or annotations/images_dir")
    with open(cfg.annotations, "r", encoding="utf-8") as fh:
        dataset = D.parse_coco_subset(fh.read())
    samples = []
    size = cfg.arch.input_size
    for im in dataset.images:
        img = D.load_input(os.path.join(cfg.images_dir, im.file_name), size,
                           cfg.arch.in_channels)
        anns = dataset.anns_for(im.id)
        boxes = np.array([[a.bbox[0] / im.width, a.bbox[1] / im.height,
                           (a.bbox[0] + a.bbox[2]) / im.width,
                           (a.bbox[1] + a.bbox[3]) / im.height] for a in anns],
                         dtype=np.float64).reshape(-1, 4)
        labels = np.array([a.category_id for a in anns], dtype=np.int64)
        samples.append((img, boxes, labels))
    return samples, dataset, None


def cmd_synth(cfg: RunConfig) -> int:
    if cfg.synthetic is None:
        raise ConfigError("synth needs data.synthetic in the config")
    synth = TR.generate_synthetic(cfg.synthetic)
    out = os.path.join(cfg.output, "synth")
    synth.write(out)
    print(f"wrote {cfg.synthetic.num_images} images to {out} "
          f"(small-object fraction {synth.small_object_fraction():.3f})")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    graph = _build(cfg)
    samples, _, _ = _training_samples(cfg)
    params = G.init_params(graph, cfg.train.seed,
                           (1, cfg.arch.in_channels, cfg.arch.input_size,
                            cfg.arch.input_size))
    params, history = TR.train(graph, params, samples, cfg.train)
    os.makedirs(cfg.output, exist_ok=True)
    ckpt = os.path.join(cfg.output, "checkpoint.sfck")
    G.save_checkpoint(graph, params, ckpt)
    log = os.path.join(cfg.output, "loss_log.txt")
    with open(log, "w", encoding="utf-8") as fh:
        for step, epoch, lr, loss in history:
            fh.write(f"{step} {epoch} {lr!r} {loss!r}\n")
    print(f"trained {len(history)} steps; checkpoint {ckpt}; loss log {log}")
    return 0


def _detect_dataset(cfg: RunConfig, graph: G.NetworkGraph, params: dict):
    samples, dataset, synth = _training_samples(cfg)
    anchors = A.anchors_for(graph)
    records = []
    for (img, _, _), rec in zip(samples, dataset.images):
        size = cfg.arch.input_size
        if img.shape[1] != size or img.shape[2] != size:
            img = D.resize_bilinear(img, (size, size))
        dets = E.detect(graph, params, img, cfg.eval.conf_threshold,
                        cfg.eval.nms_threshold, cfg.eval.max_per_image, anchors)
        records.extend(E.detections_to_records(dets, rec.id, rec.width,
                                               rec.height))
    return records, dataset


def _load_checkpoint_arg(cfg: RunConfig, path: str | None):
    ckpt = path or os.path.join(cfg.output, "checkpoint.sfck")
    if not os.path.exists(ckpt):
        raise ConfigError(f"checkpoint not found: {ckpt}")
    return G.load_checkpoint(ckpt)


def cmd_eval(cfg: RunConfig, checkpoint: str | None) -> int:
    graph, params = _load_checkpoint_arg(cfg, checkpoint)
    records, dataset = _detect_dataset(cfg, graph, params)
    os.makedirs(cfg.output, exist_ok=True)
    D.write_detections(records, os.path.join(cfg.output, "detections.json"))
    if cfg.eval.protocol == "voc":
        per_class, mean = E.voc_ap(dataset, records)
        text = "".join(f"{n:<16} {ap:7.3f}\n" for n, ap in sorted(per_class.items()))
        text += f"{'mAP':<16} {mean:7.3f}\n"
        payload = {"per_class_AP50": per_class, "mAP": mean}
    else:
        report = E.coco_eval(dataset, records)
        text = report.to_text()
        payload = report.to_dict()
    with open(os.path.join(cfg.output, "eval_report.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(text)
    with open(os.path.join(cfg.output, "eval_report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(payload, fh, separators=(",", ":"), sort_keys=True)
    sys.stdout.write(text)
    return 0


def cmd_detect(cfg: RunConfig, checkpoint: str | None, overlay: bool) -> int:
    graph, params = _load_checkpoint_arg(cfg, checkpoint)
    records, dataset = _detect_dataset(cfg, graph, params)
    os.makedirs(cfg.output, exist_ok=True)
    out = os.path.join(cfg.output, "detections.json")
    D.write_detections(records, out)
    print(f"wrote {len(records)} detections to {out}")
    if overlay:
        names = {c.id: c.name for c in dataset.categories}
        for im in dataset.images:
            recs = [r for r in records if r["image_id"] == im.id]
            svg = D.render_overlay(im.file_name, (im.width, im.height), recs,
                                   cfg.eval.overlay_score_floor, names)
            path = os.path.join(cfg.output, f"overlay_{im.id:05d}.svg")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(svg)
        print(f"wrote {len(dataset.images)} overlays to {cfg.output}")
    return 0


def cmd_rf_report(cfg: RunConfig) -> int:
    graph = _build(cfg)
    taps = list(graph.taps)
    shallow_tap = None
    if cfg.variant != "baseline":
        shallow_tap = "dil_bn1" if "dilated" in cfg.variant else "dil_bn2"
        taps = ["relu4_3", shallow_tap] + taps
    else:
        taps = ["relu4_3"] + taps
    text = RF.report_text(graph, taps)
    os.makedirs(cfg.output, exist_ok=True)
    with open(os.path.join(cfg.output, "rf_report.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(text)
    with open(os.path.join(cfg.output, "graph.json"), "w",
              encoding="utf-8") as fh:
        json.dump(graph.to_dict(), fh, separators=(",", ":"))
    params = G.init_params(graph, cfg.train.seed,
                           (1, cfg.arch.in_channels, cfg.arch.input_size,
                            cfg.arch.input_size))
    est = RF.estimate_erf(graph, params, graph.taps[0], seed=cfg.train.seed,
                          n_samples=8)
    D.write_pgm(os.path.join(cfg.output, "erf_mask.pgm"),
                est.mask.astype(np.float64))
    D.write_pgm(os.path.join(cfg.output, "erf_magnitude.pgm"),
                est.mean_abs_grad)
    # qualitative activation mosaic of the first prediction source (and the
    # shallow branch, when present) on one sample input
    if cfg.synthetic is not None:
        sample = TR.generate_synthetic(
            dataclasses.replace(cfg.synthetic, num_images=1)).images[0][None]
    else:
        sample = np.random.default_rng(cfg.train.seed).uniform(
            0, 1, size=(1, cfg.arch.in_channels, cfg.arch.input_size,
                        cfg.arch.input_size))
    for tap in filter(None, [graph.taps[0], shallow_tap]):
        mosaic = A.dump_feature_map(graph, params, sample, tap)
        D.write_pgm(os.path.join(cfg.output, f"feature_maps_{tap}.pgm"), mosaic)
    sys.stdout.write(text)
    print(f"erf diameter {est.diameter}px at tap {graph.taps[0]}; artifacts "
          f"in {cfg.output}")
    return 0


def cmd_anchors(cfg: RunConfig) -> int:
    graph = _build(cfg)
    anchors = A.anchors_for(graph)
    slices = anchors.tap_slices
    for i, box in enumerate(anchors.boxes_center):
        tap = next(t for t, (s, e) in enumerate(slices) if s <= i < e)
        print(f"{i} {tap} {box[0]:.6f} {box[1]:.6f} {box[2]:.6f} {box[3]:.6f}")
    return 0


def cmd_gradcheck(seed: int) -> int:
    """Finite-difference sweep over every differentiable kernel."""
    rng = np.random.default_rng(seed)
    failures = 0

    def report(name: str, err: float, tol: float):
        nonlocal failures
        ok = err <= tol
        failures += 0 if ok else 1
        print(f"{name:<24} max rel err {err:.3e}  tol {tol:.0e}  "
              f"{'ok' if ok else 'FAIL'}")

    def conv_case():
        x = rng.standard_normal((1, 2, 6, 6))
        par = T.ConvParams(rng.standard_normal((3, 2, 3, 3)),
                           rng.standard_normal(3), 2, 1, 1)
        w = rng.standard_normal(T.conv2d(x, par).shape)

        def f(v):
            return (float((T.conv2d(v, par) * w).sum()),
                    T.conv2d_backward(v, par, w)[0])
        return grad_check(f, x)

    def conv_kernel_case():
        x = rng.standard_normal((1, 2, 6, 6))
        k = rng.standard_normal((3, 2, 3, 3))
        par0 = T.ConvParams(k, None, 1, 2, 2)
        w = rng.standard_normal(T.conv2d(x, par0).shape)

        def f(v):
            par = T.ConvParams(v, None, 1, 2, 2)
            return (float((T.conv2d(x, par) * w).sum()),
                    T.conv2d_backward(x, par, w)[1])
        return grad_check(f, k)

    def deconv_case():
        x = rng.standard_normal((1, 3, 4, 4))
        par = T.ConvParams(rng.standard_normal((3, 2, 2, 2)),
                           rng.standard_normal(2), 2, 0, 1)
        w = rng.standard_normal(T.conv2d_transpose(x, par).shape)

        def f(v):
            return (float((T.conv2d_transpose(v, par) * w).sum()),
                    T.conv2d_transpose_backward(v, par, w)[0])
        return grad_check(f, x)

    def pool_case():
        x = rng.standard_normal((1, 2, 6, 6))
        out, _ = T.max_pool2d(x, 2, 2)
        w = rng.standard_normal(out.shape)

        def f(v):
            o, am = T.max_pool2d(v, 2, 2)
            return float((o * w).sum()), T.max_pool2d_backward(v, am, w)
        return grad_check(f, x)

    def relu_case():
        x = rng.standard_normal((1, 2, 5, 5)) + 0.1
        w = rng.standard_normal(x.shape)

        def f(v):
            return float((T.relu(v) * w).sum()), T.relu_backward(v, w)
        return grad_check(f, x)

    def bn_case():
        x = rng.standard_normal((2, 3, 4, 4))
        gamma = rng.standard_normal(3) + 1.0
        beta = rng.standard_normal(3)
        w = rng.standard_normal(x.shape)

        def f(v):
            out, cache, _, _ = T.batch_norm(v, gamma, beta, np.zeros(3),
                                            np.ones(3), "train")
            return float((out * w).sum()), T.batch_norm_backward(cache, w)[0]
        return grad_check(f, x)

    def l2_case():
        x = rng.standard_normal((1, 3, 4, 4))
        scale = np.full(3, 10.0)
        w = rng.standard_normal(x.shape)

        def f(v):
            return (float((T.l2_normalize(v, scale) * w).sum()),
                    T.l2_normalize_backward(v, scale, w)[0])
        return grad_check(f, x)

    report("conv2d/input", conv_case(), 1e-5)
    report("conv2d/kernel", conv_kernel_case(), 1e-5)
    report("conv2d_transpose/input", deconv_case(), 1e-5)
    report("max_pool2d/input", pool_case(), 1e-5)
    report("relu/input", relu_case(), 1e-5)
    report("batch_norm/input", bn_case(), 1e-4)
    report("l2_normalize/input", l2_case(), 1e-5)
    print("gradcheck:", "all ok" if failures == 0 else f"{failures} failures")
    return 0 if failures == 0 else 1


CONFIG_HELP = """\
config file keys (JSON; unknown keys are rejected):
  arch:  input_size, in_channels, num_classes, width_mult, shallow_branch,
         context_source, context_branch, fusion_branch_channels,
         post_fusion_relu, l2_normalize_fused
  train: batch_size, base_lr, warmup_start_lr, warmup_epochs, decay_epochs,
         total_epochs, momentum, weight_decay, seed, augment, crop_prob,
         iou_threshold, neg_pos_ratio
  eval:  protocol (coco|voc), conf_threshold, nms_threshold, max_per_image,
         overlay_score_floor
  data:  synthetic {image_size, channels, num_images, max_objects,
         small_fraction, noise_level, background, brightness, seed}
         OR annotations (COCO-style JSON path) + images_dir
  output: artifact directory
  variant: baseline | plain_conv5 | plain_fc7 | dilated_fc7 | fused
"""


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ssdfuse",
        description="Single-shot detector with dilated/deconvolution feature "
                    "fusion. All behavior comes from one JSON config file.",
        epilog=CONFIG_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", default=None, help="path to the JSON run config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override training/synthetic seed")
    parser.add_argument("--width-mult", type=float, default=None,
                        help="override arch.width_mult")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="emit the synthetic dataset (images + annotations)")
    sub.add_parser("train", help="train from scratch; writes checkpoint + loss log")
    p_eval = sub.add_parser("eval", help="run detection over the dataset and score it")
    p_eval.add_argument("--checkpoint", default=None)
    p_det = sub.add_parser("detect", help="write detections (and overlays) for the dataset")
    p_det.add_argument("--checkpoint", default=None)
    p_det.add_argument("--overlay", action="store_true")
    sub.add_parser("rf-report", help="receptive-field table and ERF mask")
    sub.add_parser("anchors", help="dump the default-box set as text")
    sub.add_parser("gradcheck", help="finite-difference check of every kernel")
    args = parser.parse_args(argv)

    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed if args.seed is not None else 0)
        if args.config is None:
            raise ConfigError(f"{args.command} requires --config")
        cfg = load_config(args.config, args.seed, args.width_mult)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "detect":
            return cmd_detect(cfg, args.checkpoint, args.overlay)
        if args.command == "rf-report":
            return cmd_rf_report(cfg)
        if args.command == "anchors":
            return cmd_anchors(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
