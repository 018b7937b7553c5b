"""Receptive-field analysis: the theoretical recurrence over layer chains
and a gradient-based empirical estimate.

For a conv/pool layer with kernel k, stride s, dilation d, walking from the
input: trf <- trf + (k-1)*d*jump, then jump <- jump*s. A transposed
convolution divides the jump by its stride instead. Elementwise layers are
neutral. At a concatenation, branch statistics merge by taking the widest
field (the unit depends on the union of both branches' input regions).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graph as G


@dataclass(frozen=True)
class LayerRF:
    trf_size: float      # input pixels spanned by one unit
    jump: float          # input pixels between adjacent units
    center_offset: float # input-pixel coordinate of unit 0's center


@dataclass(frozen=True)
class RFReport:
    tap: str
    layers: dict[str, LayerRF]
    input_size: int
    tap_extent: int
    grid_scale: float          # input pixels per prediction cell
    trf_to_grid_ratio: float

    @property
    def trf_size(self) -> float:
        return self.layers[self.tap].trf_size

    @property
    def jump(self) -> float:
        return self.layers[self.tap].jump


def _propagate(graph: G.NetworkGraph) -> dict[str, LayerRF]:
    stats: dict[str, LayerRF] = {}
    for l in graph.layers:
        if l.kind == "input":
            stats[l.name] = LayerRF(1.0, 1.0, 0.0)
            continue
        ins = [stats[u] for u in l.inputs]
        if l.kind in ("conv", "max_pool"):
            p = ins[0]
            d = l.dilation if l.kind == "conv" else 1
            trf = p.trf_size + (l.kernel - 1) * d * p.jump
            center = p.center_offset + ((l.kernel - 1) * d / 2 - l.padding) * p.jump
            stats[l.name] = LayerRF(trf, p.jump * l.stride, center)
        elif l.kind == "conv_transpose":
            p = ins[0]
            jump = p.jump / l.stride
            trf = p.trf_size + (l.kernel - 1) * jump
            center = p.center_offset + ((l.kernel - 1) / 2 - l.padding) * jump
            stats[l.name] = LayerRF(trf, jump, center)
        elif l.kind == "concat":
            jumps = {round(i.jump, 9) for i in ins}
            if len(jumps) > 1:
                raise ValueError(f"layer {l.name!r}: branches disagree on jump {jumps}")
            widest = max(ins, key=lambda i: i.trf_size)
            stats[l.name] = widest
        else:  # relu, batch_norm, l2_norm: field-neutral
            stats[l.name] = ins[0]
    return stats


def compute_trf(graph: G.NetworkGraph, tap: str, input_size: int | None = None):
    """Theoretical receptive field of every layer on the way to ``tap``."""
    names = {l.name for l in graph.layers}
    if tap not in names:
        raise ValueError(f"tap {tap!r} is not a layer of this graph")
    if input_size is None:
        input_size = int(graph.meta.get("input_size", 300))
    stats = _propagate(graph)
    in_ch = int(graph.meta.get("in_channels", 3))
    shapes = G.infer_shapes(graph, (1, in_ch, input_size, input_size))
    extent = shapes[tap][2]
    theta = input_size / extent
    return RFReport(tap=tap, layers=stats, input_size=input_size,
                    tap_extent=extent, grid_scale=theta,
                    trf_to_grid_ratio=stats[tap].trf_size / theta)


def trf_gain(graph_a: G.NetworkGraph, graph_b: G.NetworkGraph, tap: str,
             tap_b: str | None = None) -> float:
    """TRF(tap_b in graph_b) / TRF(tap in graph_a); tap_b defaults to tap,
    for comparing the same layer across two graphs."""
    ra = compute_trf(graph_a, tap)
    rb = compute_trf(graph_b, tap_b if tap_b is not None else tap)
    return rb.trf_size / ra.trf_size


def trf_support(graph: G.NetworkGraph, tap: str, unit_hw: tuple[int, int],
                input_size: int | None = None) -> tuple[int, int, int, int]:
    """Input-pixel bounding box (h0, h1, w0, w1), inclusive, of the pixels a
    tap unit can depend on, clipped to the image."""
    rep = compute_trf(graph, tap, input_size)
    st = rep.layers[tap]
    size = rep.input_size
    half = (st.trf_size - 1) / 2
    uh, uw = unit_hw
    ch = st.center_offset + uh * st.jump
    cw = st.center_offset + uw * st.jump
    h0 = max(0, int(np.floor(ch - half)))
    h1 = min(size - 1, int(np.ceil(ch + half)))
    w0 = max(0, int(np.floor(cw - half)))
    w1 = min(size - 1, int(np.ceil(cw + half)))
    return h0, h1, w0, w1


@dataclass(frozen=True)
class ERFEstimate:
    mean_abs_grad: np.ndarray  # (H, W), peak-normalized
    mask: np.ndarray           # (H, W) bool, >= threshold of peak
    diameter: int              # max bounding extent of the mask
    center_unit: tuple[int, int]
    trf_box: tuple[int, int, int, int]


def estimate_erf(graph: G.NetworkGraph, params: dict, tap: str,
                 threshold: float = 0.02, n_samples: int = 32,
                 seed: int = 0, input_size: int | None = None) -> ERFEstimate:
    """Empirical receptive field of the center tap unit.

    Averages |d(center unit)/d(input)| over ``n_samples`` standard-normal
    inputs (inference mode), sums absolute values across input channels,
    normalizes the map to peak 1, and thresholds. The seed gradient is 1 at
    every channel of the center spatial position.
    """
    if input_size is None:
        input_size = int(graph.meta.get("input_size", 300))
    in_ch = int(graph.meta.get("in_channels", 3))
    shapes = G.infer_shapes(graph, (1, in_ch, input_size, input_size))
    _, c, th, tw = shapes[tap]
    if th < 1 or tw < 1:
        raise ValueError(f"tap {tap!r} has empty spatial extent")
    unit = (th // 2, tw // 2)
    rng = np.random.default_rng(seed)
    accum = np.zeros((input_size, input_size))
    for _ in range(n_samples):
        x = rng.standard_normal((1, in_ch, input_size, input_size))
        outs, cache = G.forward(graph, params, x, mode="infer", outputs=[tap],
                                keep_cache=True)
        g = np.zeros_like(outs[tap])
        g[0, :, unit[0], unit[1]] = 1.0
        _, input_grad = G.backward(graph, params, cache, {tap: g})
        accum += np.abs(input_grad[0]).sum(axis=0)
    accum /= n_samples
    peak = accum.max()
    if peak > 0:
        accum = accum / peak
    mask = accum >= threshold
    if mask.any():
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        diameter = int(max(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1))
    else:
        diameter = 0
    return ERFEstimate(accum, mask, diameter, unit,
                       trf_support(graph, tap, unit, input_size))


def report_text(graph: G.NetworkGraph, taps: list[str],
                input_size: int | None = None) -> str:
    """Plain-text receptive-field table for the given taps."""
    lines = [f"{'tap':<12} {'extent':>6} {'trf':>8} {'jump':>8} "
             f"{'grid':>8} {'trf/grid':>9}"]
    for tap in taps:
        rep = compute_trf(graph, tap, input_size)
        lines.append(f"{tap:<12} {rep.tap_extent:>6d} {rep.trf_size:>8.1f} "
                     f"{rep.jump:>8.2f} {rep.grid_scale:>8.2f} "
                     f"{rep.trf_to_grid_ratio:>9.2f}")
    return "\n".join(lines) + "\n"
