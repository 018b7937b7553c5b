"""Layer-graph representation and execution.

A NetworkGraph is a topologically ordered list of LayerSpecs plus named
taps (the layers whose outputs are read by downstream consumers). Forward
and backward walk the list in order / reverse order, so gradient
accumulation at fan-out nodes happens in a fixed, reproducible order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

LAYER_KINDS = ("input", "conv", "conv_transpose", "max_pool", "relu",
               "batch_norm", "l2_norm", "concat")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    # conv/conv_transpose/max_pool geometry; unused fields stay at defaults
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    bias: bool = True
    ceil_mode: bool = False

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "inputs": list(self.inputs)}
        if self.kind in ("conv", "conv_transpose"):
            d.update(out_channels=self.out_channels, kernel=self.kernel,
                     stride=self.stride, padding=self.padding,
                     dilation=self.dilation, bias=self.bias)
        elif self.kind == "max_pool":
            d.update(kernel=self.kernel, stride=self.stride,
                     padding=self.padding, ceil_mode=self.ceil_mode)
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        known = {"name", "kind", "inputs", "out_channels", "kernel", "stride",
                 "padding", "dilation", "bias", "ceil_mode"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"layer {d.get('name')!r}: unknown fields {sorted(extra)}")
        kw = dict(d)
        kw["inputs"] = tuple(kw.get("inputs", ()))
        return LayerSpec(**kw)


@dataclass
class NetworkGraph:
    layers: list[LayerSpec]
    taps: list[str] = field(default_factory=list)
    # free-form JSON-serializable annotations (input geometry, class count,
    # head layout); carried through checkpoints so a graph is self-describing
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [l.name for l in self.layers]
        seen: set[str] = set()
        for l in self.layers:
            if l.kind not in LAYER_KINDS:
                raise ValueError(f"layer {l.name!r}: unknown kind {l.kind!r}")
            if l.name in seen:
                raise ValueError(f"duplicate layer name {l.name!r}")
            if l.kind == "input":
                if l.inputs:
                    raise ValueError(f"input layer {l.name!r} cannot have inputs")
            else:
                if not l.inputs:
                    raise ValueError(f"layer {l.name!r} has no inputs")
                for up in l.inputs:
                    if up not in seen:
                        raise ValueError(
                            f"layer {l.name!r}: input {up!r} not defined upstream"
                            " (graph must be listed in topological order)")
            seen.add(l.name)
        for t in self.taps:
            if t not in seen:
                raise ValueError(f"tap {t!r} does not name a layer")

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    @property
    def input_name(self) -> str:
        for l in self.layers:
            if l.kind == "input":
                return l.name
        raise ValueError("graph has no input layer")

    def to_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.layers],
                "taps": list(self.taps), "meta": dict(self.meta)}

    @staticmethod
    def from_dict(d: dict) -> "NetworkGraph":
        return NetworkGraph([LayerSpec.from_dict(x) for x in d["layers"]],
                            list(d.get("taps", [])), dict(d.get("meta", {})))


def param_names(layer: LayerSpec) -> list[str]:
    """Parameter/buffer entries a layer owns, in creation order."""
    if layer.kind in ("conv", "conv_transpose"):
        names = [f"{layer.name}.kernel"]
        if layer.bias:
            names.append(f"{layer.name}.bias")
        return names
    if layer.kind == "batch_norm":
        return [f"{layer.name}.gamma", f"{layer.name}.beta",
                f"{layer.name}.running_mean", f"{layer.name}.running_var"]
    if layer.kind == "l2_norm":
        return [f"{layer.name}.scale"]
    return []


def is_buffer(name: str) -> bool:
    """Buffers (batch-norm running stats) are state, not trainable params."""
    return name.endswith(".running_mean") or name.endswith(".running_var")


def is_kernel_param(name: str) -> bool:
    return name.endswith(".kernel")


def infer_shapes(graph: NetworkGraph, input_dims: tuple[int, int, int, int]) -> dict[str, tuple]:
    """Shape-check the whole graph; returns {layer: (B, C, H, W)}."""
    B, C, H, W = input_dims
    if min(input_dims) < 1:
        raise ValueError(f"input dims must all be >= 1, got {input_dims}")
    shapes: dict[str, tuple] = {}
    for l in graph.layers:
        try:
            shapes[l.name] = _layer_shape(l, [shapes[u] for u in l.inputs], input_dims)
        except ValueError as e:
            raise ValueError(f"layer {l.name!r}: {e}") from e
    return shapes


def _layer_shape(l: LayerSpec, ins: list[tuple], input_dims) -> tuple:
    if l.kind == "input":
        return tuple(input_dims)
    if l.kind == "conv":
        B, C, H, W = ins[0]
        oh = T.conv_output_extent(H, l.kernel, l.stride, l.padding, l.dilation)
        ow = T.conv_output_extent(W, l.kernel, l.stride, l.padding, l.dilation)
        if oh < 1 or ow < 1:
            raise ValueError(f"non-positive conv output extent {oh}x{ow}")
        return (B, l.out_channels, oh, ow)
    if l.kind == "conv_transpose":
        B, C, H, W = ins[0]
        oh = T.conv_transpose_output_extent(H, l.kernel, l.stride, l.padding)
        ow = T.conv_transpose_output_extent(W, l.kernel, l.stride, l.padding)
        if oh < 1 or ow < 1:
            raise ValueError(f"non-positive deconv output extent {oh}x{ow}")
        return (B, l.out_channels, oh, ow)
    if l.kind == "max_pool":
        B, C, H, W = ins[0]
        oh = T.pool_output_extent(H, l.kernel, l.stride, l.padding, l.ceil_mode)
        ow = T.pool_output_extent(W, l.kernel, l.stride, l.padding, l.ceil_mode)
        if oh < 1 or ow < 1:
            raise ValueError(f"non-positive pool output extent {oh}x{ow}")
        return (B, C, oh, ow)
    if l.kind == "concat":
        B, C0, H, W = ins[0]
        total = 0
        for s in ins:
            if s[0] != B or s[2:] != (H, W):
                raise ValueError(f"concat batch/spatial mismatch {ins[0]} vs {s}")
            total += s[1]
        return (B, total, H, W)
    # relu, batch_norm, l2_norm keep their input shape
    return ins[0]


def channels_in(graph: NetworkGraph, layer: LayerSpec,
                shapes: dict[str, tuple]) -> int:
    return shapes[layer.inputs[0]][1]


def init_params(graph: NetworkGraph, seed: int,
                input_dims: tuple[int, int, int, int],
                l2_norm_scale: float = 20.0) -> dict[str, np.ndarray]:
    """Xavier-uniform conv/deconv kernels, zero biases, identity batch-norm,
    constant L2-norm scale. Draws happen in layer order from one seeded
    generator, so a (graph, seed) pair fully determines the result."""
    shapes = infer_shapes(graph, input_dims)
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for l in graph.layers:
        if l.kind == "conv":
            cin = channels_in(graph, l, shapes)
            shape = (l.out_channels, cin, l.kernel, l.kernel)
            params[f"{l.name}.kernel"] = _xavier(rng, shape)
            if l.bias:
                params[f"{l.name}.bias"] = np.zeros(l.out_channels)
        elif l.kind == "conv_transpose":
            cin = channels_in(graph, l, shapes)
            shape = (cin, l.out_channels, l.kernel, l.kernel)
            params[f"{l.name}.kernel"] = _xavier(rng, shape)
            if l.bias:
                params[f"{l.name}.bias"] = np.zeros(l.out_channels)
        elif l.kind == "batch_norm":
            c = shapes[l.inputs[0]][1]
            params[f"{l.name}.gamma"] = np.ones(c)
            params[f"{l.name}.beta"] = np.zeros(c)
            params[f"{l.name}.running_mean"] = np.zeros(c)
            params[f"{l.name}.running_var"] = np.ones(c)
        elif l.kind == "l2_norm":
            c = shapes[l.inputs[0]][1]
            params[f"{l.name}.scale"] = np.full(c, l2_norm_scale)
    return params


def xavier_fans(shape: tuple) -> tuple[int, int]:
    """(fan_in, fan_out) of a rank-4 kernel: axis 1 times the receptive
    field, axis 0 times the receptive field. Transpose kernels, stored
    (in, out, kh, kw), use the same rule, so their in/out roles swap."""
    a, b, kh, kw = shape
    rf = kh * kw
    return b * rf, a * rf


def _xavier(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in, fan_out = xavier_fans(shape)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _conv_params(l: LayerSpec, params: dict) -> T.ConvParams:
    return T.ConvParams(params[f"{l.name}.kernel"],
                        params.get(f"{l.name}.bias") if l.bias else None,
                        l.stride, l.padding, l.dilation)


def forward(graph: NetworkGraph, params: dict, x: np.ndarray, mode: str = "infer",
            outputs: list[str] | None = None, keep_cache: bool = False):
    """Run the graph; returns {tap: tensor} (and the cache if requested).

    Train mode updates batch-norm running stats in ``params`` in place; the
    caller owns exclusive access during training.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    x = T.as_tensor4(x)
    wanted = list(outputs) if outputs is not None else list(graph.taps)
    acts: dict[str, np.ndarray] = {}
    aux: dict[str, object] = {}
    for l in graph.layers:
        ins = [acts[u] for u in l.inputs]
        if l.kind == "input":
            out = x
        elif l.kind == "conv":
            out = T.conv2d(ins[0], _conv_params(l, params))
        elif l.kind == "conv_transpose":
            out = T.conv2d_transpose(ins[0], _conv_params(l, params))
        elif l.kind == "max_pool":
            out, argmax = T.max_pool2d(ins[0], l.kernel, l.stride, l.padding, l.ceil_mode)
            aux[l.name] = argmax
        elif l.kind == "relu":
            out = T.relu(ins[0])
        elif l.kind == "batch_norm":
            out, cache, new_rm, new_rv = T.batch_norm(
                ins[0], params[f"{l.name}.gamma"], params[f"{l.name}.beta"],
                params[f"{l.name}.running_mean"], params[f"{l.name}.running_var"],
                mode)
            if mode == "train":
                params[f"{l.name}.running_mean"] = new_rm
                params[f"{l.name}.running_var"] = new_rv
            aux[l.name] = cache
        elif l.kind == "l2_norm":
            out = T.l2_normalize(ins[0], params[f"{l.name}.scale"])
        elif l.kind == "concat":
            out = T.concat_channels(ins)
        acts[l.name] = out
    result = {name: acts[name] for name in wanted}
    if keep_cache:
        return result, {"acts": acts, "aux": aux}
    return result


def backward(graph: NetworkGraph, params: dict, cache: dict,
             tap_grads: dict[str, np.ndarray], need_input_grad: bool = True):
    """Backpropagate tap gradients; returns (param_grads, input_grad).

    param_grads covers every trainable parameter (zero arrays where no tap
    gradient reaches); fan-in contributions accumulate in reverse layer
    order. With ``need_input_grad=False`` the image gradient is skipped
    (input_grad is None), saving the widest adjoint pass.
    """
    acts, aux = cache["acts"], cache["aux"]
    input_name = graph.input_name
    grads: dict[str, np.ndarray] = {}
    for name, g in tap_grads.items():
        if name not in acts:
            raise ValueError(f"tap gradient for unknown layer {name!r}")
        if g.shape != acts[name].shape:
            raise ValueError(f"tap grad for {name!r} has shape {g.shape}, "
                             f"activation is {acts[name].shape}")
        grads[name] = grads.get(name, 0) + np.asarray(g, dtype=np.float64)
    pgrads = {k: np.zeros_like(v) for k, v in params.items() if not is_buffer(k)}
    input_grad = None

    def send(name: str, g: np.ndarray):
        if name in grads:
            grads[name] = grads[name] + g
        else:
            grads[name] = g

    for l in reversed(graph.layers):
        if l.name not in grads:
            continue
        g = grads.pop(l.name)
        ins = [acts[u] for u in l.inputs]
        if l.kind == "input":
            input_grad = g if input_grad is None else input_grad + g
        elif l.kind == "conv":
            want = need_input_grad or l.inputs[0] != input_name
            gi, gk, gb = T.conv2d_backward(ins[0], _conv_params(l, params), g,
                                           want_input=want)
            pgrads[f"{l.name}.kernel"] += gk
            if l.bias:
                pgrads[f"{l.name}.bias"] += gb
            if want:
                send(l.inputs[0], gi)
        elif l.kind == "conv_transpose":
            gi, gk, gb = T.conv2d_transpose_backward(ins[0], _conv_params(l, params), g)
            pgrads[f"{l.name}.kernel"] += gk
            if l.bias:
                pgrads[f"{l.name}.bias"] += gb
            send(l.inputs[0], gi)
        elif l.kind == "max_pool":
            send(l.inputs[0], T.max_pool2d_backward(ins[0], aux[l.name], g))
        elif l.kind == "relu":
            send(l.inputs[0], T.relu_backward(ins[0], g))
        elif l.kind == "batch_norm":
            gi, ggamma, gbeta = T.batch_norm_backward(aux[l.name], g)
            pgrads[f"{l.name}.gamma"] += ggamma
            pgrads[f"{l.name}.beta"] += gbeta
            send(l.inputs[0], gi)
        elif l.kind == "l2_norm":
            gi, gscale = T.l2_normalize_backward(ins[0], params[f"{l.name}.scale"], g)
            pgrads[f"{l.name}.scale"] += gscale
            send(l.inputs[0], gi)
        elif l.kind == "concat":
            for up, gi in zip(l.inputs, T.concat_channels_backward(ins, g)):
                send(up, gi)
    return pgrads, input_grad


CHECKPOINT_SCHEMA = 1


def save_checkpoint(graph: NetworkGraph, params: dict, path, dtype: str = "f8") -> None:
    """Single-file checkpoint: one UTF-8 JSON manifest line, then a raw
    little-endian float payload. dtype is "f8" (default) or "f4"."""
    if dtype not in ("f8", "f4"):
        raise ValueError(f"unsupported checkpoint dtype {dtype!r}")
    np_dtype = np.dtype("<" + dtype)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np_dtype)
        blobs.append(arr.tobytes())
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "bytes": len(blobs[-1])})
        offset += len(blobs[-1])
    manifest = {"schema": CHECKPOINT_SCHEMA, "graph": graph.to_dict(),
                "params": entries, "payload_bytes": offset}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (graph, params) with float64 values."""
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    manifest = json.loads(header.decode("utf-8"))
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema')!r}")
    if manifest["payload_bytes"] != len(payload):
        raise ValueError(f"payload is {len(payload)} bytes, manifest says "
                         f"{manifest['payload_bytes']}")
    graph = NetworkGraph.from_dict(manifest["graph"])
    params: dict[str, np.ndarray] = {}
    for e in manifest["params"]:
        raw = payload[e["offset"]:e["offset"] + e["bytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype("<" + e["dtype"])).reshape(e["shape"])
        params[e["name"]] = arr.astype(np.float64)
    expected = set()
    for l in graph.layers:
        expected.update(param_names(l))
    missing = expected - set(params)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
    return graph, params
