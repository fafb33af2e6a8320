"""Forward operators and their reverse-mode gradients.

Every operator takes Tensors, appends a tape node to its output, and honors
an `fp16` flag: when set, operands are quantized to emulated binary16 on the
way in, arithmetic accumulates in float32, and outputs whose values could
leave the binary16 grid are re-quantized on the way out. Value-preserving
operators (relu, max-pool, concat) keep their input dtype untouched.

Gradients always accumulate in float32 (float64 in FP64 shadow mode).
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import DimensionError, NumericError, ParameterError
from .tensor import FP16E, FP32, FP64, Tensor, quantize_fp16

# ---------------------------------------------------------------------------
# activation tracing (memory accounting hooks)

_TRACE = None


@contextlib.contextmanager
def record_activations():
    """Collect (op, element_count, dtype) for every operator output."""
    global _TRACE
    prev, _TRACE = _TRACE, []
    try:
        yield _TRACE
    finally:
        _TRACE = prev


def _note(op: str, out: Tensor) -> None:
    if _TRACE is not None:
        _TRACE.append((op, out.size, out.dtype))


# ---------------------------------------------------------------------------
# helpers

def _float_dtype(*tensors: Tensor) -> str:
    dt = FP32
    for t in tensors:
        if t.dtype == FP64:
            dt = FP64
        elif t.dtype not in (FP32, FP16E):
            raise ParameterError(f"operator requires float tensors, got {t.dtype}")
    return dt


def _operands(fp16: bool, *tensors: Tensor):
    """Casted numpy payloads plus the output dtype tag."""
    base = _float_dtype(*tensors)
    if fp16:
        if base == FP64:
            raise ParameterError("fp16 emulation cannot mix with FP64 shadow mode")
        return [quantize_fp16(t.data) for t in tensors], FP16E
    return [t.data for t in tensors], base


def _result(data, dtype, parents, op) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, dtype=dtype, requires_grad=rg, op=op,
                 parents=tuple(parents) if rg else ())
    _note(op, out)
    return out


def _require_finite(arr: np.ndarray, what: str) -> None:
    # A float64 sum is non-finite iff the array contains a NaN or infinity.
    if not np.isfinite(np.sum(arr, dtype=np.float64)):
        raise NumericError(f"non-finite values in {what}")


def _check_image(t: Tensor, what: str) -> None:
    if t.data.ndim != 4:
        raise DimensionError(f"{what} must be rank 4 (B,C,H,W), got dims {t.dims}")


# ---------------------------------------------------------------------------
# convolution

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """Unfold a padded (B,C,H,W) array into (B, C*kh*kw, Ho*Wo) patch columns."""
    b, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)
    return np.ascontiguousarray(win).reshape(b, c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, b: int, c: int, hp: int, wp: int,
            kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    c6 = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += c6[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0,
           fp16: bool = False) -> Tensor:
    """2D cross-correlation, w: (Cout, Cin, kh, kw), output floor-divided sizes."""
    _check_image(x, "conv2d input")
    if w.data.ndim != 4:
        raise DimensionError(f"conv2d weight must be rank 4, got {w.dims}")
    bs, cin, h, wd_ = x.dims
    cout, cin_w, kh, kw = w.dims
    if cin != cin_w:
        raise DimensionError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if b.dims != (cout,):
        raise DimensionError(f"conv2d: bias dims {b.dims} != ({cout},)")
    if kh < 1 or kw < 1 or stride < 1 or pad < 0:
        raise ParameterError("conv2d: kernel and stride must be >= 1, pad >= 0")
    if h + 2 * pad < kh or wd_ + 2 * pad < kw:
        raise DimensionError("conv2d: kernel larger than padded input")
    _require_finite(x.data, "conv2d input")

    (xd, wdat, bd), out_dtype = _operands(fp16, x, w, b)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    y = np.matmul(wdat.reshape(cout, -1), cols)
    y += bd.reshape(1, cout, 1)
    y = y.reshape(bs, cout, ho, wo)
    if fp16:
        y = quantize_fp16(y)

    out = _result(y, out_dtype, (x, w, b), "conv2d")
    if out.requires_grad:
        def _bw():
            g = out.grad.reshape(bs, cout, ho * wo)
            if b.requires_grad:
                b.accum_grad(g.sum(axis=(0, 2)))
            if w.requires_grad:
                gxp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
                cols_b, _, _ = _im2col(gxp.astype(g.dtype, copy=False), kh, kw, stride)
                gw = np.matmul(g, cols_b.transpose(0, 2, 1)).sum(axis=0)
                w.accum_grad(gw.reshape(w.dims))
            if x.requires_grad:
                gcols = np.matmul(wdat.reshape(cout, -1).T.astype(g.dtype, copy=False), g)
                gx = _col2im(gcols, bs, cin, h + 2 * pad, wd_ + 2 * pad,
                             kh, kw, stride, ho, wo)
                if pad:
                    gx = gx[:, :, pad:pad + h, pad:pad + wd_]
                x.accum_grad(gx)
        out._backward = _bw
    return out


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
                     fp16: bool = False) -> Tensor:
    """Adjoint of zero-padding conv2d; w: (Cin, Cout, kh, kw)."""
    _check_image(x, "conv_transpose2d input")
    if w.data.ndim != 4:
        raise DimensionError(f"conv_transpose2d weight must be rank 4, got {w.dims}")
    bs, cin, h, wd_ = x.dims
    cin_w, cout, kh, kw = w.dims
    if cin != cin_w:
        raise DimensionError(
            f"conv_transpose2d: input channels {cin} != weight channels {cin_w}")
    if b.dims != (cout,):
        raise DimensionError(f"conv_transpose2d: bias dims {b.dims} != ({cout},)")
    if stride < 1:
        raise ParameterError("conv_transpose2d: stride must be >= 1")
    _require_finite(x.data, "conv_transpose2d input")

    ho = (h - 1) * stride + kh
    wo = (wd_ - 1) * stride + kw
    (xd, wdat, bd), out_dtype = _operands(fp16, x, w, b)
    cols = np.matmul(wdat.reshape(cin, -1).T, xd.reshape(bs, cin, h * wd_))
    y = _col2im(cols, bs, cout, ho, wo, kh, kw, stride, h, wd_)
    y += bd.reshape(1, cout, 1, 1)
    if fp16:
        y = quantize_fp16(y)

    out = _result(y, out_dtype, (x, w, b), "conv_transpose2d")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if b.requires_grad:
                b.accum_grad(g.sum(axis=(0, 2, 3)))
            gcols, _, _ = _im2col(g, kh, kw, stride)
            if x.requires_grad:
                gx = np.matmul(wdat.reshape(cin, -1).astype(g.dtype, copy=False), gcols)
                x.accum_grad(gx.reshape(bs, cin, h, wd_))
            if w.requires_grad:
                xmat = xd.reshape(bs, cin, h * wd_).astype(g.dtype, copy=False)
                gw = np.matmul(xmat, gcols.transpose(0, 2, 1)).sum(axis=0)
                w.accum_grad(gw.reshape(w.dims))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# pooling

def maxpool2d(x: Tensor, k: int = 2, stride: int = 2):
    """Window maximum; returns (output, flat argmax indices per map).

    Ties go to the first element in row-major window scan order, so gradient
    routing is deterministic.
    """
    _check_image(x, "maxpool2d input")
    bs, c, h, w = x.dims
    if k < 1 or stride < 1:
        raise ParameterError("maxpool2d: k and stride must be >= 1")
    if h % stride or w % stride:
        raise DimensionError(f"maxpool2d: dims ({h},{w}) not divisible by stride {stride}")
    if k > h or k > w:
        raise DimensionError("maxpool2d: window larger than input")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1

    xd = x.data
    best = np.full((bs, c, ho, wo), -np.inf, dtype=xd.dtype)
    idx = np.zeros((bs, c, ho, wo), dtype=np.int64)
    rows = stride * np.arange(ho)[:, None]
    colx = stride * np.arange(wo)[None, :]
    for i in range(k):
        for j in range(k):
            cand = xd[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            flat = (rows + i) * w + (colx + j)
            take = cand > best
            best = np.where(take, cand, best)
            idx = np.where(take, flat, idx)

    out = _result(best, x.dtype, (x,), "maxpool2d")
    if out.requires_grad:
        def _bw():
            g = out.grad.reshape(bs * c, -1)
            flat_idx = idx.reshape(bs * c, -1)
            gx = np.zeros((bs * c, h * w), dtype=g.dtype)
            if stride >= k:
                gx[np.arange(bs * c)[:, None], flat_idx] = g
            else:
                np.add.at(gx, (np.arange(bs * c)[:, None], flat_idx), g)
            x.accum_grad(gx.reshape(bs, c, h, w))
        out._backward = _bw
    return out, idx


# ---------------------------------------------------------------------------
# batch norm

class RunningStats:
    """Per-channel running mean/var buffers, always FP32."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float,
                mode: str, running: RunningStats, momentum: float = 0.1) -> Tensor:
    """Channel-wise batch normalization; statistics accumulate in FP32 under
    every policy and the output stays unquantized (exempt from fp16)."""
    _check_image(x, "batchnorm2d input")
    bs, c, h, w = x.dims
    if gamma.dims != (c,) or beta.dims != (c,):
        raise DimensionError(f"batchnorm2d: gamma/beta dims must be ({c},)")
    if eps <= 0:
        raise ParameterError("batchnorm2d: eps must be > 0")
    if mode not in ("train", "eval"):
        raise ParameterError(f"batchnorm2d: mode must be train or eval, got {mode!r}")

    xd = x.data
    gd = gamma.data.astype(xd.dtype, copy=False)
    bd = beta.data.astype(xd.dtype, copy=False)
    if mode == "train":
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running.mean[...] = (1.0 - momentum) * running.mean + momentum * mu.astype(np.float32)
        running.var[...] = (1.0 - momentum) * running.var + momentum * var.astype(np.float32)
    else:
        mu = running.mean.astype(xd.dtype)
        var = running.var.astype(xd.dtype)
    std = np.sqrt(var + eps)
    xhat = (xd - mu.reshape(1, c, 1, 1)) / std.reshape(1, c, 1, 1)
    y = gd.reshape(1, c, 1, 1) * xhat + bd.reshape(1, c, 1, 1)

    out_dtype = FP64 if x.dtype == FP64 else FP32
    out = _result(y, out_dtype, (x, gamma, beta), "batchnorm2d")
    if out.requires_grad:
        def _bw():
            g = out.grad
            xhat_g = xhat.astype(g.dtype, copy=False)
            if beta.requires_grad:
                beta.accum_grad(g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                gamma.accum_grad((g * xhat_g).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                coef = (gd / std).astype(g.dtype).reshape(1, c, 1, 1)
                if mode == "train":
                    mg = g.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    mgx = (g * xhat_g).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    x.accum_grad(coef * (g - mg - xhat_g * mgx))
                else:
                    x.accum_grad(coef * g)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# elementwise

def relu(x: Tensor) -> Tensor:
    _float_dtype(x)
    out = _result(np.maximum(x.data, 0), x.dtype, (x,), "relu")
    if out.requires_grad:
        mask = x.data > 0
        def _bw():
            x.accum_grad(out.grad * mask)
        out._backward = _bw
    return out


def sigmoid(x: Tensor, fp16: bool = False) -> Tensor:
    (xd,), out_dtype = _operands(fp16, x)
    y = 1.0 / (1.0 + np.exp(-xd))
    if fp16:
        y = quantize_fp16(y)
    out = _result(y, out_dtype, (x,), "sigmoid")
    if out.requires_grad:
        def _bw():
            yg = y.astype(out.grad.dtype, copy=False)
            x.accum_grad(out.grad * yg * (1.0 - yg))
        out._backward = _bw
    return out


def add(a: Tensor, b: Tensor, fp16: bool = False) -> Tensor:
    if a.dims != b.dims:
        raise DimensionError(f"add: dims {a.dims} != {b.dims}")
    (ad, bd), out_dtype = _operands(fp16, a, b)
    y = ad + bd
    if fp16:
        y = quantize_fp16(y)
    out = _result(y, out_dtype, (a, b), "add")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a.accum_grad(out.grad)
            if b.requires_grad:
                b.accum_grad(out.grad)
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor, fp16: bool = False) -> Tensor:
    """Elementwise product; the only broadcast allowed is a single-channel
    attention map (B,1,H,W) expanding over the other operand's channels."""
    if a.dims != b.dims:
        ok = (len(a.dims) == 4 and len(b.dims) == 4
              and a.dims[0] == b.dims[0] and a.dims[2:] == b.dims[2:]
              and (a.dims[1] == 1 or b.dims[1] == 1))
        if not ok:
            raise DimensionError(f"mul: dims {a.dims} x {b.dims} not an allowed broadcast")
    (ad, bd), out_dtype = _operands(fp16, a, b)
    y = ad * bd
    if fp16:
        y = quantize_fp16(y)
    out = _result(y, out_dtype, (a, b), "mul")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                ga = g * bd.astype(g.dtype, copy=False)
                if a.dims != out.dims:
                    ga = ga.sum(axis=1, keepdims=True)
                a.accum_grad(ga)
            if b.requires_grad:
                gb = g * ad.astype(g.dtype, copy=False)
                if b.dims != out.dims:
                    gb = gb.sum(axis=1, keepdims=True)
                b.accum_grad(gb)
        out._backward = _bw
    return out


def scale(x: Tensor, factor: float, fp16: bool = False) -> Tensor:
    (xd,), out_dtype = _operands(fp16, x)
    y = xd * xd.dtype.type(factor)
    if fp16:
        y = quantize_fp16(y)
    out = _result(y, out_dtype, (x,), "scale")
    if out.requires_grad:
        def _bw():
            x.accum_grad(out.grad * factor)
        out._backward = _bw
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_image(a, "concat_channels a")
    _check_image(b, "concat_channels b")
    if a.dims[0] != b.dims[0] or a.dims[2:] != b.dims[2:]:
        raise DimensionError(f"concat_channels: dims {a.dims} vs {b.dims}")
    dt = _float_dtype(a, b)
    if a.dtype == b.dtype:
        dt = a.dtype
    ca = a.dims[1]
    out = _result(np.concatenate([a.data, b.data], axis=1), dt, (a, b), "concat")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a.accum_grad(out.grad[:, :ca])
            if b.requires_grad:
                b.accum_grad(out.grad[:, ca:])
        out._backward = _bw
    return out


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements, accumulated in FP32 at minimum."""
    if pred.dims != target.dims:
        raise DimensionError(f"mse_loss: dims {pred.dims} != {target.dims}")
    base = _float_dtype(pred, target)
    diff = pred.data - target.data
    n = diff.size
    loss = np.mean(np.square(diff))
    out = _result(np.asarray(loss), base, (pred, target), "mse_loss")
    if out.requires_grad:
        def _bw():
            g = out.grad * (2.0 / n) * diff.astype(out.grad.dtype, copy=False)
            if pred.requires_grad:
                pred.accum_grad(g)
            if target.requires_grad:
                target.accum_grad(-g)
        out._backward = _bw
    return out
