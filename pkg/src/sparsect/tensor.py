"""Dense tensor values, parameters, numeric policies, and the reverse-mode tape.

Tensors hold a numpy payload plus a dtype tag. FP16 is emulated: an FP16E
tensor stores float32 values that are exactly representable in IEEE binary16,
produced by round-to-nearest-even quantization at operator boundaries while
the arithmetic inside an operator runs in float32 (accumulation always at
least FP32). FP64 is a shadow precision used only by gradient tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, GraphError, ParameterError

FP32 = "fp32"
FP16E = "fp16e"
FP64 = "fp64"
U8 = "u8"

_NUMPY_OF = {FP32: np.float32, FP16E: np.float32, FP64: np.float64, U8: np.uint8}
_FLOAT_DTYPES = (FP32, FP16E, FP64)

MAX_RANK = 4


def quantize_fp16(arr: np.ndarray) -> np.ndarray:
    """Round to the nearest binary16 value (ties to even), widened to float32.

    Values beyond the binary16 range saturate to infinity, exactly as a real
    FP16 cast would; overflow detection happens at the loss-scaling check.
    """
    with np.errstate(over="ignore"):
        return np.asarray(arr, dtype=np.float16).astype(np.float32)


class Tensor:
    """Rank-<=4 numeric array with a dtype tag, optionally on the autodiff tape.

    `grad` accumulates in float32 (float64 for FP64 shadow tensors). `op` and
    `parents` record the tape node that produced this value; leaves have
    neither.
    """

    __slots__ = ("data", "dtype", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, dtype: str = FP32, requires_grad: bool = False,
                 op: str | None = None, parents: tuple = ()):
        if dtype not in _NUMPY_OF:
            raise ParameterError(f"unknown dtype tag {dtype!r}")
        arr = np.asarray(data, dtype=_NUMPY_OF[dtype])
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
        if dtype == FP16E:
            arr = quantize_fp16(arr)
        self.data = arr
        self.dtype = dtype
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self.parents = parents
        self._backward = None

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def grad_dtype(self):
        return np.float64 if self.dtype == FP64 else np.float32

    def accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=self.grad_dtype())
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def __repr__(self):
        return f"Tensor(dims={self.dims}, dtype={self.dtype}, op={self.op})"


def backward(loss: Tensor, scale: float = 1.0) -> None:
    """Reverse-mode sweep from a scalar loss.

    The incoming gradient is `scale` (loss scaling); parameter gradients are
    left scaled and must be divided by the same factor after accumulation.
    Never raises on non-finite gradients: overflow is detected by the caller
    via `grads_finite`.
    """
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad; nothing to differentiate")

    order = _topo_order(loss)
    loss.grad = np.full(loss.data.shape, scale, dtype=loss.grad_dtype())
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


@dataclass(frozen=True)
class PrecisionPolicy:
    """Numeric policy: O0 is pure FP32; O2 stores/multiplies in emulated FP16
    with FP32 accumulation, batch norm exempt, guarded by loss scaling."""

    level: str = "O0"
    loss_scale: float = 1024.0
    dynamic: bool = False
    bn_exempt: bool = True

    def __post_init__(self):
        if self.level not in ("O0", "O2"):
            raise ParameterError(f"opt level must be O0 or O2, got {self.level!r}")
        if self.loss_scale <= 0:
            raise ParameterError("loss_scale must be positive")
        if self.level == "O0":
            # O0 loss scaling is the identity.
            object.__setattr__(self, "loss_scale", 1.0)
            object.__setattr__(self, "dynamic", False)
        else:
            object.__setattr__(self, "bn_exempt", True)

    @property
    def is_o2(self) -> bool:
        return self.level == "O2"


O0 = PrecisionPolicy(level="O0")


class Parameter:
    """Trainable weight: FP32 master, policy-dependent compute copy, FP32 grad.

    Under O0 the compute copy aliases the master array (bitwise equal by
    construction); under O2 it is the binary16 quantization of the master,
    unless the parameter is marked `fp32_only` (batch-norm scale/shift).
    """

    __slots__ = ("name", "master", "compute", "grad", "fp32_only")

    def __init__(self, data, name: str = "", fp32_only: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.name = name
        self.fp32_only = fp32_only
        self.master = Tensor(arr, dtype=FP32)
        self.compute = Tensor(self.master.data, dtype=FP32, requires_grad=True)
        self.grad = None

    @property
    def dims(self):
        return self.master.dims

    @property
    def size(self):
        return self.master.size

    def set_master(self, arr: np.ndarray) -> None:
        if arr.shape != self.master.dims:
            raise DimensionError(
                f"parameter {self.name!r}: master shape {arr.shape} != {self.master.dims}")
        self.master.data[...] = np.asarray(arr, dtype=np.float32)

    def zero_grad(self) -> None:
        self.grad = None
        self.compute.zero_grad()


def apply_policy(param: Parameter, policy: PrecisionPolicy) -> None:
    """Refresh a parameter's compute copy from its master per the policy."""
    if policy.is_o2 and not (policy.bn_exempt and param.fp32_only):
        param.compute.data = quantize_fp16(param.master.data)
        param.compute.dtype = FP16E
    else:
        param.compute.data = param.master.data
        param.compute.dtype = FP32


def unscale_grads(params, scale: float) -> bool:
    """Move scaled tape gradients into `param.grad` divided by `scale`.

    Returns True when every gradient is finite; False signals overflow
    (gradients are still written so the caller can inspect them).
    """
    inv = 1.0 / float(scale)
    finite = True
    for p in params:
        g = p.compute.grad
        if g is None:
            g = np.zeros(p.master.dims, dtype=np.float32)
        g = g.astype(np.float32, copy=True) * np.float32(inv)
        p.grad = g
        if not np.isfinite(np.sum(g, dtype=np.float64)):
            finite = False
    return finite
