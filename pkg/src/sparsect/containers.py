"""Binary tensor container (TSR1), PGM export, and JSON sidecar helpers.

Container layout: magic `TSR1`, one dtype code byte (1 = FP32 little-endian,
2 = FP16 little-endian, 3 = U8), one rank byte, rank little-endian u32 dims,
then the row-major payload. Round-trips are bit-exact; FP16E tensors store
their 16-bit encodings, which is lossless because their values live on the
binary16 grid by construction.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError
from .tensor import FP16E, FP32, MAX_RANK, U8, Tensor

MAGIC = b"TSR1"

_CODE_OF = {FP32: 1, FP16E: 2, U8: 3}
_DTYPE_OF = {1: FP32, 2: FP16E, 3: U8}
_NP_OF = {1: np.dtype("<f4"), 2: np.dtype("<f2"), 3: np.dtype("u1")}


def write_tensor(path, tensor: Tensor) -> None:
    if tensor.dtype not in _CODE_OF:
        raise ParameterError(f"dtype {tensor.dtype} is not storable (shadow mode only)")
    code = _CODE_OF[tensor.dtype]
    dims = tensor.dims
    payload = np.ascontiguousarray(tensor.data).astype(_NP_OF[code])
    header = MAGIC + struct.pack("<BB", code, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims) if dims else b""
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes(order="C"))


def read_tensor(path) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a TSR1 container")
    code, rank = struct.unpack_from("<BB", raw, 4)
    if code not in _DTYPE_OF:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if rank > MAX_RANK:
        raise FormatError(f"{path}: rank {rank} exceeds {MAX_RANK}")
    offset = 6
    if len(raw) < offset + 4 * rank:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", raw, offset) if rank else ()
    offset += 4 * rank
    np_dtype = _NP_OF[code]
    expect = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = raw[offset:]
    if len(payload) != expect * np_dtype.itemsize:
        raise FormatError(f"{path}: payload length {len(payload)} != "
                          f"{expect * np_dtype.itemsize}")
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(dims)
    return Tensor(arr, dtype=_DTYPE_OF[code])


def quantize_u8(arr: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map [lo, hi] to 8-bit levels: clamp, scale to [0, 255], round half to even."""
    if hi <= lo:
        raise ParameterError(f"degenerate quantization scale [{lo}, {hi}]")
    unit = np.clip((np.asarray(arr, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return np.rint(unit * 255.0).astype(np.uint8)


def u8_to_unit(levels: np.ndarray) -> np.ndarray:
    return (np.asarray(levels, dtype=np.float32) / np.float32(255.0)).astype(np.float32)


def export_pgm(tensor: Tensor, path) -> None:
    """Binary PGM (P5, maxval 255) of a rank-2 or (1,1,H,W) tensor holding
    normalized values; quantization rounds half to even."""
    arr = tensor.data
    if arr.ndim == 4 and arr.shape[0] == 1 and arr.shape[1] == 1:
        arr = arr[0, 0]
    if arr.ndim != 2:
        raise ParameterError(f"PGM export needs rank-2 or (1,1,H,W), got {tensor.dims}")
    if tensor.dtype == U8:
        levels = arr.astype(np.uint8)
    else:
        levels = quantize_u8(arr, 0.0, 1.0)
    h, w = levels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(levels.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise FormatError(f"{path}: unsupported maxval {parts[2]!r}")
    data = parts[3][:w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
