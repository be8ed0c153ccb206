"""Checkpoint persistence: a little-endian binary container for dense,
FGF-parameterized and sparse-masked models.

Layout (all integers little-endian, arrays '<f4'):

    magic  b"FGFP1"
    u16    format version (1)
    str    model name          (str = u16 byte length + utf-8 bytes)
    str    architecture tag
    u64    seed, u32 epoch, u8 dtype code (0 = f32, 1 = f64)
    u16    metric count, then (str name, f8 value) sorted by name
    u8     input rank, u32 extents...
    u64    total logical params, u64 total stored params
    u16    layer count
    per layer:
        u64  payload byte length (from after this field to record end)
        str  layer id
        u8   layer tag (0 conv, 1 fc, 2 bn, 3 pool, 4 relu, 5 fgf_conv)
        u8   flags (bit 0: masked)
        u64  logical count, u64 stored count
        ...  tag-specific payload

Masked weight tensors store the keep-mask as packed bits followed by the
surviving values in flat-index order, so an s-sparse layer costs about
(1-s)*4 bytes per weight plus one mask bit. Saves are atomic (temp file
in the target directory, fsync, rename); loads re-validate structure,
parameter domains and the stored counts before returning a model.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from . import nn
from .errors import FormatError, IntegrityError
from .fgf import CaFgfParams, Fgf3dParams, FgfOrigParams

__all__ = ["save", "load", "MAGIC", "VERSION"]

MAGIC = b"FGFP1"
VERSION = 1

_TAG_CONV, _TAG_FC, _TAG_BN, _TAG_POOL, _TAG_RELU, _TAG_FGF = range(6)
_FLAG_MASKED = 1
_FGF_KIND_CODE = {"orig": 0, "ca": 1, "3d": 2}
_FGF_KIND_NAME = {v: k for k, v in _FGF_KIND_CODE.items()}
_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_NAME = {0: np.float32, 1: np.float64}


# --------------------------------------------------------------------------
# primitive writers / readers
# --------------------------------------------------------------------------


def _w_str(parts, s: str):
    raw = s.encode("utf-8")
    parts.append(struct.pack("<H", len(raw)))
    parts.append(raw)


def _w_f32s(parts, arr: np.ndarray):
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.path}: truncated at byte {self.pos}, need {n} more"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def f32s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()


# --------------------------------------------------------------------------
# weight tensors with optional masks
# --------------------------------------------------------------------------


def _write_weights(parts, values: np.ndarray, mask: np.ndarray | None):
    if mask is None:
        _w_f32s(parts, values)
        return
    if np.any((mask == 0) & (values != 0.0)):
        raise IntegrityError("nonzero weight under a zero mask bit")
    flat_mask = mask.reshape(-1).astype(np.uint8)
    parts.append(np.packbits(flat_mask).tobytes())
    kept = values.reshape(-1)[flat_mask != 0]
    parts.append(struct.pack("<Q", kept.size))
    _w_f32s(parts, kept)


def _read_weights(r: _Reader, shape, masked: bool):
    n = int(np.prod(shape))
    if not masked:
        return r.f32s(n).reshape(shape), None
    packed = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
    mask = np.unpackbits(packed, count=n).reshape(shape).astype(np.uint8)
    kept_count = r.u64()
    popcount = int(mask.sum())
    if kept_count != popcount:
        raise IntegrityError(
            f"{r.path}: mask popcount {popcount} != stored value count {kept_count}"
        )
    kept = r.f32s(kept_count)
    values = np.zeros(n, dtype=np.float32)
    values[mask.reshape(-1) != 0] = kept
    return values.reshape(shape), mask


# --------------------------------------------------------------------------
# layer records
# --------------------------------------------------------------------------


def _layer_record(layer) -> bytes:
    parts: list[bytes] = []
    _w_str(parts, layer.layer_id)
    masked = getattr(layer, "mask", None) is not None
    flags = _FLAG_MASKED if masked else 0

    if isinstance(layer, nn.FgfConvLayer):
        parts.append(struct.pack("<BB", _TAG_FGF, 0))
        parts.append(struct.pack("<QQ", layer.logical_params(), layer.stored_params()))
        parts.append(
            struct.pack(
                "<BIIIIII",
                _FGF_KIND_CODE[layer.fgf_kind],
                layer.out_ch, layer.in_ch, layer.kh, layer.kw,
                layer.stride, layer.pad,
            )
        )
        _w_f32s(parts, layer.filter_params.value)
    elif isinstance(layer, nn.ConvLayer):
        parts.append(struct.pack("<BB", _TAG_CONV, flags))
        parts.append(struct.pack("<QQ", layer.logical_params(), layer.stored_params()))
        parts.append(
            struct.pack(
                "<IIIIII",
                layer.out_ch, layer.in_ch, layer.kh, layer.kw,
                layer.stride, layer.pad,
            )
        )
        _write_weights(parts, layer.weight.value, layer.mask)
    elif isinstance(layer, nn.FcLayer):
        parts.append(struct.pack("<BB", _TAG_FC, flags))
        parts.append(struct.pack("<QQ", layer.logical_params(), layer.stored_params()))
        parts.append(struct.pack("<II", layer.in_features, layer.out_features))
        _write_weights(parts, layer.weight.value, layer.mask)
        _w_f32s(parts, layer.bias.value)
    elif isinstance(layer, nn.BatchNormLayer):
        parts.append(struct.pack("<BB", _TAG_BN, 0))
        parts.append(struct.pack("<QQ", layer.logical_params(), layer.stored_params()))
        parts.append(struct.pack("<I", layer.channels))
        parts.append(struct.pack("<ff", layer.momentum, layer.eps))
        for arr in (layer.gamma.value, layer.beta.value, layer.running_mean,
                    layer.running_var):
            _w_f32s(parts, arr)
    elif isinstance(layer, nn.MaxPoolLayer):
        parts.append(struct.pack("<BB", _TAG_POOL, 0))
        parts.append(struct.pack("<QQ", 0, 0))
        parts.append(struct.pack("<II", layer.size, layer.stride))
    elif isinstance(layer, nn.ReluLayer):
        parts.append(struct.pack("<BB", _TAG_RELU, 0))
        parts.append(struct.pack("<QQ", 0, 0))
    else:
        raise IntegrityError(f"cannot serialize layer type {type(layer).__name__}")

    payload = b"".join(parts)
    return struct.pack("<Q", len(payload)) + payload


def _read_layer(r: _Reader, dtype):
    record_len = r.u64()
    end = r.pos + record_len
    layer_id = r.string()
    tag = r.u8()
    flags = r.u8()
    logical = r.u64()
    stored = r.u64()
    masked = bool(flags & _FLAG_MASKED)

    if tag == _TAG_FGF:
        kind_code = r.u8()
        if kind_code not in _FGF_KIND_NAME:
            raise IntegrityError(f"{r.path}: unknown fgf kind code {kind_code}")
        kind = _FGF_KIND_NAME[kind_code]
        out_ch, in_ch, kh, kw, stride, pad = (r.u32() for _ in range(6))
        layer = nn.FgfConvLayer(layer_id, kind, out_ch, in_ch, kh, kw, stride, pad,
                                dtype=dtype)
        width = layer.params_per_filter(kind, in_ch)
        vals = r.f32s(out_ch * width).astype(dtype).reshape(out_ch, width)
        layer.filter_params.value = vals
        layer.filter_params.gradient = np.zeros_like(vals)
        for row in vals:
            try:
                layer.vec_to_params(row).validate()
            except ValueError as exc:
                raise IntegrityError(f"{r.path}: {layer_id}: {exc}") from exc
    elif tag == _TAG_CONV:
        out_ch, in_ch, kh, kw, stride, pad = (r.u32() for _ in range(6))
        layer = nn.ConvLayer(layer_id, out_ch, in_ch, kh, kw, stride, pad, dtype=dtype)
        w, mask = _read_weights(r, (out_ch, in_ch, kh, kw), masked)
        layer.weight.value = w.astype(dtype)
        layer.mask = mask
    elif tag == _TAG_FC:
        in_f, out_f = r.u32(), r.u32()
        layer = nn.FcLayer(layer_id, in_f, out_f, dtype=dtype)
        w, mask = _read_weights(r, (out_f, in_f), masked)
        layer.weight.value = w.astype(dtype)
        layer.mask = mask
        layer.bias.value = r.f32s(out_f).astype(dtype)
    elif tag == _TAG_BN:
        channels = r.u32()
        momentum, eps = struct.unpack("<ff", r.take(8))
        layer = nn.BatchNormLayer(layer_id, channels, momentum, eps, dtype=dtype)
        layer.gamma.value = r.f32s(channels).astype(dtype)
        layer.beta.value = r.f32s(channels).astype(dtype)
        layer.running_mean = r.f32s(channels).astype(dtype)
        layer.running_var = r.f32s(channels).astype(dtype)
    elif tag == _TAG_POOL:
        size, stride = r.u32(), r.u32()
        layer = nn.MaxPoolLayer(layer_id, size, stride)
    elif tag == _TAG_RELU:
        layer = nn.ReluLayer(layer_id)
    else:
        raise FormatError(f"{r.path}: unknown layer tag {tag}")

    if r.pos != end:
        raise FormatError(
            f"{r.path}: layer {layer_id!r} payload length mismatch "
            f"(at {r.pos}, record ends at {end})"
        )
    if layer.logical_params() != logical or layer.stored_params() != stored:
        raise IntegrityError(
            f"{r.path}: {layer_id}: recomputed counts "
            f"({layer.logical_params()}, {layer.stored_params()}) != stored "
            f"({logical}, {stored})"
        )
    for slot in layer.param_slots().values():
        if not np.all(np.isfinite(slot.value)):
            raise IntegrityError(f"{r.path}: {layer_id}: non-finite parameter values")
    return layer


# --------------------------------------------------------------------------
# save / load
# --------------------------------------------------------------------------


def _serialize(model: nn.Model) -> bytes:
    parts: list[bytes] = [MAGIC, struct.pack("<H", VERSION)]
    _w_str(parts, str(model.meta.get("name", "")))
    _w_str(parts, str(model.meta.get("arch", "")))
    parts.append(
        struct.pack(
            "<QIB",
            int(model.meta.get("seed", 0)),
            int(model.meta.get("epoch", 0)),
            _DTYPE_CODE[np.dtype(model.dtype)],
        )
    )
    metrics = {
        k: float(v)
        for k, v in model.meta.items()
        if isinstance(v, (int, float)) and k not in ("seed", "epoch")
    }
    parts.append(struct.pack("<H", len(metrics)))
    for key in sorted(metrics):
        _w_str(parts, key)
        parts.append(struct.pack("<d", metrics[key]))
    parts.append(struct.pack("<B", len(model.input_shape)))
    for extent in model.input_shape:
        parts.append(struct.pack("<I", extent))
    parts.append(
        struct.pack(
            "<QQ",
            nn.param_count(model, "logical"),
            nn.param_count(model, "stored"),
        )
    )
    parts.append(struct.pack("<H", len(model.layers)))
    for layer in model.layers:
        parts.append(_layer_record(layer))
    return b"".join(parts)


def save(model: nn.Model, path: str):
    """Atomically write a checkpoint: temp file in the same directory,
    fsync, rename. A failed save leaves any existing file untouched."""
    blob = _serialize(model)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".ckpt-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load(path: str) -> nn.Model:
    """Parse and re-validate a checkpoint; every invariant that save
    enforces is checked again on the way in."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    version = r.u16()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}, want {VERSION}")
    name = r.string()
    arch = r.string()
    seed, epoch, dtype_code = struct.unpack("<QIB", r.take(13))
    if dtype_code not in _DTYPE_NAME:
        raise FormatError(f"{path}: unknown dtype code {dtype_code}")
    dtype = _DTYPE_NAME[dtype_code]
    meta = {"name": name, "arch": arch, "seed": seed, "epoch": epoch}
    for _ in range(r.u16()):
        key = r.string()
        meta[key] = r.f64()
    rank = r.u8()
    input_shape = tuple(r.u32() for _ in range(rank))
    total_logical = r.u64()
    total_stored = r.u64()
    n_layers = r.u16()
    layers = [_read_layer(r, dtype) for _ in range(n_layers)]
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes")

    model = nn.Model(layers=layers, input_shape=input_shape, meta=meta, dtype=dtype)
    got_logical = nn.param_count(model, "logical")
    got_stored = nn.param_count(model, "stored")
    if (got_logical, got_stored) != (total_logical, total_stored):
        raise IntegrityError(
            f"{path}: header claims ({total_logical}, {total_stored}) params, "
            f"recomputed ({got_logical}, {got_stored})"
        )
    return model
