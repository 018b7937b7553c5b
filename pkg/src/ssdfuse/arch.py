"""Builders for the reduced-VGG single-shot detector and its feature-fusion
variant.

The baseline follows the SSD-300 layout: VGG-16 through conv5_3 with the
fully connected layers replaced by two convolutions (fc6 dilated, fc7 1x1),
extra downsampling blocks conv8-conv11, and six prediction taps at spatial
extents 38/19/10/5/3/1 for a 300 input.

The fused variant replaces the first prediction source with the channel
concatenation of a shallow branch (convolutions over conv4_3, optionally
dilated to widen the receptive field at constant resolution) and a context
branch (a 2x2 stride-2 transposed convolution plus 3x3 convolution that
doubles a deeper map to conv4_3's extent). Every other tap is untouched, so
the default-box layout is identical across variants.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import boxes as B
from . import graph as G

SHALLOW_BRANCHES = ("none", "plain_conv", "dilated_conv_single", "dilation_module")
CONTEXT_SOURCES = ("conv5_3", "fc_7")
CONTEXT_BRANCHES = ("none", "deconv_module")

# Table-row ablation variants: (shallow_branch, context_source)
ABLATION_VARIANTS = {
    "baseline": ("none", "fc_7"),
    "plain_conv5": ("plain_conv", "conv5_3"),
    "plain_fc7": ("plain_conv", "fc_7"),
    "dilated_fc7": ("dilated_conv_single", "fc_7"),
    "fused": ("dilation_module", "fc_7"),
}


@dataclass(frozen=True)
class ArchConfig:
    input_size: int = 300
    in_channels: int = 3
    num_classes: int = 20  # foreground classes, background excluded
    width_mult: float = 1.0
    shallow_branch: str = "dilation_module"
    context_source: str = "fc_7"
    context_branch: str = "deconv_module"
    fusion_branch_channels: int = 256  # per branch, before width_mult
    post_fusion_relu: bool = True
    l2_normalize_fused: bool = False

    def __post_init__(self):
        if not (0 < self.width_mult <= 1):
            raise ValueError(f"width_mult must be in (0, 1], got {self.width_mult}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.input_size < 64:
            raise ValueError("input_size must be >= 64")
        if self.shallow_branch not in SHALLOW_BRANCHES:
            raise ValueError(f"unknown shallow_branch {self.shallow_branch!r}")
        if self.context_source not in CONTEXT_SOURCES:
            raise ValueError(f"unknown context_source {self.context_source!r}")
        if self.context_branch not in CONTEXT_BRANCHES:
            raise ValueError(f"unknown context_branch {self.context_branch!r}")
        if self.fusion_branch_channels < 1:
            raise ValueError("fusion_branch_channels must be >= 1")

    def scaled(self, channels: int) -> int:
        return max(1, round(channels * self.width_mult))


# VGG-16 trunk plan: (block, [channels per conv]); pools between blocks
_VGG_BLOCKS = ((1, (64, 64)), (2, (128, 128)), (3, (256, 256, 256)),
               (4, (512, 512, 512)), (5, (512, 512, 512)))


def _trunk_layers(cfg: ArchConfig) -> list[G.LayerSpec]:
    layers = [G.LayerSpec("image", "input")]
    prev = "image"
    for block, widths in _VGG_BLOCKS:
        for j, w in enumerate(widths, start=1):
            name = f"conv{block}_{j}"
            layers.append(G.LayerSpec(name, "conv", (prev,),
                                      out_channels=cfg.scaled(w), kernel=3, padding=1))
            layers.append(G.LayerSpec(f"relu{block}_{j}", "relu", (name,)))
            prev = f"relu{block}_{j}"
        if block < 5:
            # ceil-mode pooling keeps the odd 75 -> 38 halving intact
            layers.append(G.LayerSpec(f"pool{block}", "max_pool", (prev,),
                                      kernel=2, stride=2, ceil_mode=True))
            prev = f"pool{block}"
    layers.append(G.LayerSpec("pool5", "max_pool", (prev,), kernel=3, stride=1,
                              padding=1))
    layers.append(G.LayerSpec("fc6", "conv", ("pool5",),
                              out_channels=cfg.scaled(1024), kernel=3, padding=6,
                              dilation=6))
    layers.append(G.LayerSpec("relu_fc6", "relu", ("fc6",)))
    layers.append(G.LayerSpec("fc7", "conv", ("relu_fc6",),
                              out_channels=cfg.scaled(1024), kernel=1))
    layers.append(G.LayerSpec("relu_fc7", "relu", ("fc7",)))
    return layers


# extra feature blocks: (name, squeeze_ch, out_ch, stride, padding)
_EXTRA_BLOCKS = (("conv8", 256, 512, 2, 1), ("conv9", 128, 256, 2, 1),
                 ("conv10", 128, 256, 1, 0), ("conv11", 128, 256, 1, 0))


def _extra_layers(cfg: ArchConfig) -> list[G.LayerSpec]:
    layers = []
    prev = "relu_fc7"
    for name, squeeze, out, stride, pad in _EXTRA_BLOCKS:
        layers.append(G.LayerSpec(f"{name}_1", "conv", (prev,),
                                  out_channels=cfg.scaled(squeeze), kernel=1))
        layers.append(G.LayerSpec(f"relu{name[4:]}_1", "relu", (f"{name}_1",)))
        layers.append(G.LayerSpec(f"{name}_2", "conv", (f"relu{name[4:]}_1",),
                                  out_channels=cfg.scaled(out), kernel=3,
                                  stride=stride, padding=pad))
        layers.append(G.LayerSpec(f"relu{name[4:]}_2", "relu", (f"{name}_2",)))
        prev = f"relu{name[4:]}_2"
    return layers


def _head_layers(cfg: ArchConfig, sources: list[str]) -> list[G.LayerSpec]:
    layers = []
    for i, src in enumerate(sources):
        k = B.BOXES_PER_CELL[i]
        layers.append(G.LayerSpec(f"conf{i}", "conv", (src,),
                                  out_channels=k * (cfg.num_classes + 1),
                                  kernel=3, padding=1))
        layers.append(G.LayerSpec(f"loc{i}", "conv", (src,),
                                  out_channels=k * 4, kernel=3, padding=1))
    return layers


def _finish(cfg: ArchConfig, layers: list[G.LayerSpec],
            sources: list[str]) -> G.NetworkGraph:
    layers = layers + _head_layers(cfg, sources)
    graph = G.NetworkGraph(layers, taps=list(sources), meta={
        "input_size": cfg.input_size,
        "in_channels": cfg.in_channels,
        "num_classes": cfg.num_classes,
        "boxes_per_cell": list(B.BOXES_PER_CELL),
        "num_taps": len(sources),
    })
    # fail fast on any geometry the kernels would reject
    G.infer_shapes(graph, (1, cfg.in_channels, cfg.input_size, cfg.input_size))
    return graph


def build_ssd_baseline(config: ArchConfig) -> G.NetworkGraph:
    """Reduced VGG-16 detector with six prediction taps and an L2-norm on
    the first (conv4_3) tap."""
    layers = _trunk_layers(config) + _extra_layers(config)
    idx = next(i for i, l in enumerate(layers) if l.name == "relu4_3")
    layers.insert(idx + 1, G.LayerSpec("l2norm4_3", "l2_norm", ("relu4_3",)))
    sources = ["l2norm4_3", "relu_fc7", "relu8_2", "relu9_2", "relu10_2",
               "relu11_2"]
    return _finish(config, layers, sources)


def _shallow_layers(cfg: ArchConfig, width: int) -> tuple[list[G.LayerSpec], str]:
    kind = cfg.shallow_branch
    if kind == "dilation_module":
        layers = [
            G.LayerSpec("dil_conv1", "conv", ("relu4_3",), out_channels=width,
                        kernel=3, padding=1, bias=False),
            G.LayerSpec("dil_bn1", "batch_norm", ("dil_conv1",)),
            G.LayerSpec("dil_conv2", "conv", ("dil_bn1",), out_channels=width,
                        kernel=3, padding=2, dilation=2, bias=False),
            G.LayerSpec("dil_bn2", "batch_norm", ("dil_conv2",)),
        ]
        return layers, "dil_bn2"
    if kind == "plain_conv":
        layers = [
            G.LayerSpec("dil_conv1", "conv", ("relu4_3",), out_channels=width,
                        kernel=3, padding=1, bias=False),
            G.LayerSpec("dil_bn1", "batch_norm", ("dil_conv1",)),
            G.LayerSpec("dil_conv2", "conv", ("dil_bn1",), out_channels=width,
                        kernel=3, padding=1, bias=False),
            G.LayerSpec("dil_bn2", "batch_norm", ("dil_conv2",)),
        ]
        return layers, "dil_bn2"
    if kind == "dilated_conv_single":
        layers = [
            G.LayerSpec("dil_conv1", "conv", ("relu4_3",), out_channels=width,
                        kernel=3, padding=2, dilation=2, bias=False),
            G.LayerSpec("dil_bn1", "batch_norm", ("dil_conv1",)),
        ]
        return layers, "dil_bn1"
    raise ValueError(f"no shallow branch for {kind!r}")


def build_fused(config: ArchConfig) -> G.NetworkGraph:
    """Feature-fusion detector: the first prediction source becomes the
    channel concatenation of the shallow and context branches.

    Raises if the two branch extents disagree at the concatenation, which
    happens exactly when the config omits the upsampling context branch.
    """
    if config.shallow_branch == "none":
        return build_ssd_baseline(config)
    layers = _trunk_layers(config) + _extra_layers(config)
    width = config.scaled(config.fusion_branch_channels)
    shallow, shallow_out = _shallow_layers(config, width)
    layers += shallow
    ctx_src = "relu5_3" if config.context_source == "conv5_3" else "relu_fc7"
    if config.context_branch == "deconv_module":
        layers += [
            G.LayerSpec("ctx_deconv", "conv_transpose", (ctx_src,),
                        out_channels=width, kernel=2, stride=2),
            G.LayerSpec("ctx_conv", "conv", ("ctx_deconv",), out_channels=width,
                        kernel=3, padding=1, bias=False),
            G.LayerSpec("ctx_bn", "batch_norm", ("ctx_conv",)),
        ]
        ctx_out = "ctx_bn"
    else:
        ctx_out = ctx_src  # used as-is; concat rejects mismatched extents
    layers.append(G.LayerSpec("fuse_cat", "concat", (shallow_out, ctx_out)))
    fused = "fuse_cat"
    if config.post_fusion_relu:
        layers.append(G.LayerSpec("fuse_relu", "relu", ("fuse_cat",)))
        fused = "fuse_relu"
    if config.l2_normalize_fused:
        layers.append(G.LayerSpec("fuse_l2norm", "l2_norm", (fused,)))
        fused = "fuse_l2norm"
    sources = [fused, "relu_fc7", "relu8_2", "relu9_2", "relu10_2", "relu11_2"]
    return _finish(config, layers, sources)


def build_ablation(variant: str, config: ArchConfig) -> G.NetworkGraph:
    """Build one of the named fusion ablation rows; 'baseline' is the plain
    detector, 'fused' the full dilation + upsampled-context variant."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; "
                         f"choose from {sorted(ABLATION_VARIANTS)}")
    shallow, source = ABLATION_VARIANTS[variant]
    cfg = replace(config, shallow_branch=shallow, context_source=source,
                  context_branch="deconv_module")
    if shallow == "none":
        return build_ssd_baseline(cfg)
    return build_fused(cfg)


def tap_shapes(graph: G.NetworkGraph) -> list[tuple[int, int]]:
    m = graph.meta
    shapes = G.infer_shapes(
        graph, (1, m["in_channels"], m["input_size"], m["input_size"]))
    return [shapes[t][2:] for t in graph.taps]


def anchors_for(graph: G.NetworkGraph) -> B.AnchorSet:
    """Default boxes implied by a detector graph's tap extents. Graphs with
    fewer taps use a truncated scale ladder; the extra square then takes the
    next rung."""
    sizes = tap_shapes(graph)
    ladder = B.ANCHOR_SCALES + (B.EXTRA_SCALE_BEYOND_LAST,)
    n = len(sizes)
    return B.generate_default_boxes(
        sizes, scales=ladder[:n],
        boxes_per_cell=tuple(graph.meta["boxes_per_cell"]),
        extra_scale_beyond_last=ladder[n])


def head_names(graph: G.NetworkGraph) -> list[tuple[str, str]]:
    n = graph.meta["num_taps"]
    return [(f"conf{i}", f"loc{i}") for i in range(n)]


def assemble_predictions(graph: G.NetworkGraph, outputs: dict[str, np.ndarray]):
    """Flatten per-tap head maps into (B, A, C+1) logits and (B, A, 4)
    offsets, ordered to match the anchor set (tap, row, column, aspect)."""
    ncls = graph.meta["num_classes"] + 1
    confs, locs = [], []
    for i, (cname, lname) in enumerate(head_names(graph)):
        k = graph.meta["boxes_per_cell"][i]
        c = outputs[cname]
        l = outputs[lname]
        b, _, h, w = c.shape
        confs.append(c.reshape(b, k, ncls, h, w).transpose(0, 3, 4, 1, 2)
                     .reshape(b, h * w * k, ncls))
        locs.append(l.reshape(b, k, 4, h, w).transpose(0, 3, 4, 1, 2)
                    .reshape(b, h * w * k, 4))
    return np.concatenate(confs, axis=1), np.concatenate(locs, axis=1)


def scatter_prediction_grads(graph: G.NetworkGraph, outputs: dict[str, np.ndarray],
                             grad_conf: np.ndarray, grad_loc: np.ndarray):
    """Inverse of assemble_predictions: split flat gradients back into
    per-head tensors keyed by layer name."""
    ncls = graph.meta["num_classes"] + 1
    tap_grads: dict[str, np.ndarray] = {}
    off = 0
    for i, (cname, lname) in enumerate(head_names(graph)):
        k = graph.meta["boxes_per_cell"][i]
        b, _, h, w = outputs[cname].shape
        n = h * w * k
        gc = grad_conf[:, off:off + n].reshape(b, h, w, k, ncls)
        gl = grad_loc[:, off:off + n].reshape(b, h, w, k, 4)
        tap_grads[cname] = np.ascontiguousarray(
            gc.transpose(0, 3, 4, 1, 2).reshape(b, k * ncls, h, w))
        tap_grads[lname] = np.ascontiguousarray(
            gl.transpose(0, 3, 4, 1, 2).reshape(b, k * 4, h, w))
        off += n
    return tap_grads


def dump_feature_map(graph: G.NetworkGraph, params: dict, x: np.ndarray,
                     tap: str) -> np.ndarray:
    """Per-channel min-max normalized tiles of a tap's activation, laid out
    as a near-square uint8 mosaic (one tile per channel, 1px separators).
    Constant channels render mid-gray."""
    out = G.forward(graph, params, x, mode="infer", outputs=[tap])[tap]
    fm = out[0]
    c, h, w = fm.shape
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    mosaic = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1), dtype=np.uint8)
    for idx in range(c):
        tile = fm[idx]
        lo, hi = tile.min(), tile.max()
        if hi > lo:
            norm = (tile - lo) / (hi - lo) * 255.0
        else:
            norm = np.full_like(tile, 128.0)
        r, col = divmod(idx, cols)
        mosaic[r * (h + 1):r * (h + 1) + h,
               col * (w + 1):col * (w + 1) + w] = np.round(norm).astype(np.uint8)
    return mosaic
