"""Dense rank-4 tensor kernels: forward and backward passes on CPU.

Tensors are numpy float64 arrays in (batch, channel, height, width) layout,
row-major. Convolution here means cross-correlation (no kernel flip), the
convention of every modern detector. All kernels are pure functions and
deterministic: outputs are bitwise identical across runs and thread counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import corr2d_dw, corr2d_s1, pool2d_max, pool2d_scatter


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def as_tensor4(x) -> np.ndarray:
    """Validate/convert to a contiguous float64 (B, C, H, W) array."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 4:
        raise ValueError(f"expected a rank-4 (B, C, H, W) tensor, got rank {a.ndim}")
    if min(a.shape) < 1:
        raise ValueError(f"all tensor dims must be >= 1, got {a.shape}")
    return a


@dataclass
class ConvParams:
    """Convolution filter bank plus its geometry.

    kernel is (out_ch, in_ch, kh, kw). For conv2d_transpose the same layout
    is read as (in_ch, out_ch, kh, kw): a transpose op is the adjoint of the
    conv2d that shares its params, so the kernel keeps the conv orientation.
    """

    kernel: np.ndarray
    bias: np.ndarray | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)

    def __post_init__(self):
        self.kernel = np.ascontiguousarray(self.kernel, dtype=np.float64)
        if self.kernel.ndim != 4:
            raise ValueError("kernel must be rank 4 (out_ch, in_ch, kh, kw)")
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        self.dilation = _pair(self.dilation)
        if min(self.stride) < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if min(self.padding) < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if min(self.dilation) < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def effective_kernel(self) -> tuple[int, int]:
        kh, kw = self.kernel.shape[2], self.kernel.shape[3]
        return ((kh - 1) * self.dilation[0] + 1, (kw - 1) * self.dilation[1] + 1)


def conv_output_extent(size: int, k: int, s: int, p: int, d: int) -> int:
    """floor((size + 2p - ((k-1)*d + 1)) / s) + 1"""
    return (size + 2 * p - ((k - 1) * d + 1)) // s + 1


def _pad_hw(x: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    B, C, H, W = x.shape
    out = np.full((B, C, H + 2 * ph, W + 2 * pw), value) if value else \
        np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    out[:, :, ph:ph + H, pw:pw + W] = x
    return out


def _stuff(x: np.ndarray, sh: int, sw: int) -> np.ndarray:
    """Insert stride-1 zeros between elements along H and W."""
    if sh == 1 and sw == 1:
        return x
    B, C, H, W = x.shape
    out = np.zeros((B, C, (H - 1) * sh + 1, (W - 1) * sw + 1))
    out[:, :, ::sh, ::sw] = x
    return out


def _corr(x_pad: np.ndarray, w: np.ndarray, dh: int, dw: int,
          sh: int = 1, sw: int = 1) -> np.ndarray:
    """Cross-correlate a pre-padded input; stride applied by subsampling."""
    B, I, H, W = x_pad.shape
    O, _, kh, kw = w.shape
    oh = H - (kh - 1) * dh
    ow = W - (kw - 1) * dw
    out = np.zeros((B, O, oh, ow))
    corr2d_s1(np.ascontiguousarray(x_pad), np.ascontiguousarray(w), dh, dw, out)
    if sh != 1 or sw != 1:
        out = np.ascontiguousarray(out[:, :, ::sh, ::sw])
    return out


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """2-D cross-correlation with stride, padding and dilation, plus bias."""
    x = as_tensor4(x)
    O, I, kh, kw = params.kernel.shape
    if x.shape[1] != I:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {I}")
    (sh, sw), (ph, pw), (dh, dw) = params.stride, params.padding, params.dilation
    oh = conv_output_extent(x.shape[2], kh, sh, ph, dh)
    ow = conv_output_extent(x.shape[3], kw, sw, pw, dw)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d: non-positive output extent {oh}x{ow} for input "
            f"{x.shape[2]}x{x.shape[3]}, k=({kh},{kw}), s=({sh},{sw}), "
            f"p=({ph},{pw}), d=({dh},{dw})")
    out = _corr(_pad_hw(x, ph, pw), params.kernel, dh, dw, sh, sw)
    if params.bias is not None:
        out += params.bias[None, :, None, None]
    return out


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray,
                    want_input: bool = True):
    """Gradients of conv2d: (grad_input, grad_kernel, grad_bias).

    ``want_input=False`` skips the input-gradient pass (grad_input is None),
    for layers whose upstream never consumes it."""
    x = as_tensor4(x)
    grad_out = as_tensor4(grad_out)
    O, I, kh, kw = params.kernel.shape
    (sh, sw), (ph, pw), (dh, dw) = params.stride, params.padding, params.dilation
    oh = conv_output_extent(x.shape[2], kh, sh, ph, dh)
    ow = conv_output_extent(x.shape[3], kw, sw, pw, dw)
    if grad_out.shape != (x.shape[0], O, oh, ow):
        raise ValueError(
            f"conv2d_backward: grad_out shape {grad_out.shape} does not match "
            f"output shape {(x.shape[0], O, oh, ow)}")
    grad_bias = grad_out.sum(axis=(0, 2, 3)) if params.bias is not None else None

    # spread the output grad onto the full stride-1 dense grid (trailing
    # unsampled positions stay zero) so the adjoint sees every window slot
    kh_eff, kw_eff = params.effective_kernel
    dense_h = x.shape[2] + 2 * ph - kh_eff + 1
    dense_w = x.shape[3] + 2 * pw - kw_eff + 1
    gys = _stuff(grad_out, sh, sw)
    gys = np.pad(gys, ((0, 0), (0, 0),
                       (0, dense_h - gys.shape[2]), (0, dense_w - gys.shape[3])))
    x_pad = np.ascontiguousarray(_pad_hw(x, ph, pw))
    grad_kernel = np.zeros_like(params.kernel)
    corr2d_dw(x_pad, np.ascontiguousarray(gys), dh, dw, grad_kernel)

    grad_input = (_adjoint_corr(gys, params.kernel, ph, pw, dh, dw)
                  if want_input else None)
    return grad_input, grad_kernel, grad_bias


def _adjoint_corr(gy_dense: np.ndarray, kernel: np.ndarray,
                  ph: int, pw: int, dh: int, dw: int) -> np.ndarray:
    """Adjoint of a stride-1 dilated correlation on a padded input.

    Equals correlating the (already stride-stuffed) output gradient, padded
    by effective_k - 1 - p, with the spatially flipped kernel whose in/out
    channels are swapped.
    """
    kh, kw = kernel.shape[2], kernel.shape[3]
    qh = (kh - 1) * dh - ph
    qw = (kw - 1) * dw - pw
    wt = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    g = _pad_hw(gy_dense, max(qh, 0), max(qw, 0))
    out = _corr(g, wt, dh, dw)
    ch, cw = max(-qh, 0), max(-qw, 0)
    if ch or cw:
        out = out[:, :, ch:out.shape[2] - ch, cw:out.shape[3] - cw]
    return np.ascontiguousarray(out)


def conv_transpose_output_extent(size: int, k: int, s: int, p: int) -> int:
    return (size - 1) * s - 2 * p + k


def conv2d_transpose(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Transposed convolution: the adjoint (scatter) of conv2d.

    The kernel layout is that of the matching conv2d, read as
    (in_ch, out_ch, kh, kw); dilation must be 1.
    """
    x = as_tensor4(x)
    if params.dilation != (1, 1):
        raise ValueError("conv2d_transpose: dilation is fixed at 1")
    I, O, kh, kw = params.kernel.shape
    if x.shape[1] != I:
        raise ValueError(
            f"conv2d_transpose: input has {x.shape[1]} channels, kernel expects {I}")
    (sh, sw), (ph, pw) = params.stride, params.padding
    oh = conv_transpose_output_extent(x.shape[2], kh, sh, ph)
    ow = conv_transpose_output_extent(x.shape[3], kw, sw, pw)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d_transpose: non-positive output extent {oh}x{ow}")
    out = _adjoint_corr(_stuff(x, sh, sw), params.kernel, ph, pw, 1, 1)
    if params.bias is not None:
        out += params.bias[None, :, None, None]
    return out


def conv2d_transpose_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Gradients of conv2d_transpose: (grad_input, grad_kernel, grad_bias)."""
    x = as_tensor4(x)
    grad_out = as_tensor4(grad_out)
    I, O, kh, kw = params.kernel.shape
    (sh, sw), (ph, pw) = params.stride, params.padding
    oh = conv_transpose_output_extent(x.shape[2], kh, sh, ph)
    ow = conv_transpose_output_extent(x.shape[3], kw, sw, pw)
    if grad_out.shape != (x.shape[0], O, oh, ow):
        raise ValueError(
            f"conv2d_transpose_backward: grad_out shape {grad_out.shape} does "
            f"not match output shape {(x.shape[0], O, oh, ow)}")
    grad_bias = grad_out.sum(axis=(0, 2, 3)) if params.bias is not None else None
    # adjoint of the adjoint: a plain strided conv of the output gradient
    grad_input = _corr(_pad_hw(grad_out, ph, pw), params.kernel, 1, 1, sh, sw)
    # kernel gradient: same contraction as conv2d's with input/grad roles swapped
    grad_kernel = np.zeros_like(params.kernel)
    corr2d_dw(np.ascontiguousarray(_pad_hw(grad_out, ph, pw)),
              np.ascontiguousarray(_stuff(x, sh, sw)), 1, 1, grad_kernel)
    return grad_input, grad_kernel, grad_bias


def pool_output_extent(size: int, k: int, s: int, p: int, ceil_mode: bool) -> int:
    span = size + 2 * p - k
    out = -(-span // s) + 1 if ceil_mode else span // s + 1
    if ceil_mode and (out - 1) * s >= size + p:
        out -= 1  # last window would start entirely in the bottom/right padding
    return out


def max_pool2d(x: np.ndarray, k: int, s: int, p: int = 0, ceil_mode: bool = False):
    """Window max. Returns (output, argmax) where argmax holds, per output
    element, the flat h*W+w index of the winning input position. Ties go to
    the lowest linear index."""
    x = as_tensor4(x)
    if p >= k:
        raise ValueError(f"max_pool2d: padding {p} must be < kernel {k}")
    B, C, H, W = x.shape
    oh = pool_output_extent(H, k, s, p, ceil_mode)
    ow = pool_output_extent(W, k, s, p, ceil_mode)
    if oh < 1 or ow < 1:
        raise ValueError(f"max_pool2d: non-positive output extent {oh}x{ow}")
    # window span may exceed the padded input (ceil mode) or fall short of
    # it (floor mode with leftover rows); size the buffer for both
    need_h = max((oh - 1) * s + k, p + H)
    need_w = max((ow - 1) * s + k, p + W)
    xp = np.full((B, C, need_h, need_w), -np.inf)
    xp[:, :, p:p + H, p:p + W] = x
    out = np.empty((B, C, oh, ow))
    argmax = np.empty((B, C, oh, ow), dtype=np.int64)
    pool2d_max(xp, k, s, p, W, out, argmax)
    return out, argmax


def max_pool2d_backward(x: np.ndarray, argmax: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    grad_input = np.zeros_like(x)
    pool2d_scatter(argmax, np.ascontiguousarray(grad_out), grad_input)
    return grad_input


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0.0)


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               running_mean: np.ndarray, running_var: np.ndarray,
               mode: str, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Per-channel batch normalization over the (b, h, w) axes.

    Train mode normalizes by batch statistics (biased variance) and returns
    updated running stats blended with momentum; infer mode applies the
    provided running stats. Returns (out, cache, new_running_mean,
    new_running_var); cache feeds the backward pass.
    """
    x = as_tensor4(x)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm: gamma/beta must have {C} channels")
    if mode == "train":
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
        out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        new_rm = (1.0 - momentum) * running_mean + momentum * mu
        new_rv = (1.0 - momentum) * running_var + momentum * var
        cache = ("train", xhat, inv, gamma)
        return out, cache, new_rm, new_rv
    if mode == "infer":
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        cache = ("infer", xhat, inv, gamma)
        return out, cache, running_mean, running_var
    raise ValueError(f"batch_norm: unknown mode {mode!r}")


def batch_norm_backward(cache, grad_out: np.ndarray):
    """Returns (grad_input, grad_gamma, grad_beta)."""
    mode, xhat, inv, gamma = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    gxhat = grad_out * gamma[None, :, None, None]
    if mode == "infer":
        return gxhat * inv[None, :, None, None], grad_gamma, grad_beta
    n = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    sum_g = gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    grad_input = (inv[None, :, None, None] / n) * (n * gxhat - sum_g - xhat * sum_gx)
    return grad_input, grad_gamma, grad_beta


L2_NORM_GUARD = 1e-10


def l2_normalize(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Scale each position's channel vector to unit L2 norm, then apply a
    learnable per-channel scale. A small guard keeps all-zero vectors at
    zero instead of dividing by zero."""
    x = as_tensor4(x)
    if scale.shape != (x.shape[1],):
        raise ValueError(f"l2_normalize: scale must have {x.shape[1]} channels")
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x * scale[None, :, None, None] / (norm + L2_NORM_GUARD)


def l2_normalize_backward(x: np.ndarray, scale: np.ndarray, grad_out: np.ndarray):
    """Returns (grad_input, grad_scale)."""
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    g = 1.0 / (norm + L2_NORM_GUARD)
    sg = grad_out * scale[None, :, None, None]
    dot = (sg * x).sum(axis=1, keepdims=True)
    safe_norm = np.maximum(norm, L2_NORM_GUARD)
    grad_input = sg * g - x * (dot * g * g / safe_norm)
    grad_scale = (grad_out * x * g).sum(axis=(0, 2, 3))
    return grad_input, grad_scale


def concat_channels(inputs: list[np.ndarray]) -> np.ndarray:
    """Concatenate along the channel axis; batch and spatial dims must agree."""
    if not inputs:
        raise ValueError("concat_channels: need at least one input")
    tensors = [as_tensor4(t) for t in inputs]
    ref = tensors[0]
    for t in tensors[1:]:
        if t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise ValueError(
                f"concat_channels: batch/spatial mismatch {ref.shape} vs {t.shape}"
                " (upsample the coarser map so extents agree before fusing)")
    return np.concatenate(tensors, axis=1)


def concat_channels_backward(inputs: list[np.ndarray], grad_out: np.ndarray):
    grads = []
    off = 0
    for t in inputs:
        c = t.shape[1]
        grads.append(np.ascontiguousarray(grad_out[:, off:off + c]))
        off += c
    return grads


def softmax(x: np.ndarray, axis: int = 1) -> np.ndarray:
    """Stable softmax along an axis (max subtraction)."""
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def smooth_l1(x):
    """0.5*x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    return np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
