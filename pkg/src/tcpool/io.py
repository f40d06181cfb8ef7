"""Binary file formats: single tensors, feature clips, and checkpoints.

All integers and scalars are little-endian.  A tensor record is

    magic "TCPT" | version u32 | dtype u32 (1=float32, 2=float64)
    | ndim u32 | ndim dims as u64 | row-major payload

A clip file is a tensor record with ndim=3 and dims (frames, positions,
channels), optionally followed by a metadata block

    magic "META" | height u64 | width u64 | label i64

where height=width=0 means no spatial factorization is recorded and
label=-1 means unlabeled.  A checkpoint is

    magic "TCPK" | version u32 | header-length u32 | header bytes
    | tensor-count u32 | repeated (name-length u32 | name bytes
    | embedded tensor record)

with a UTF-8 ``key=value`` line per head-config field in the header.
Write-then-read round-trips are bit-exact; every malformed prefix raises
:class:`FormatError`.
"""

from __future__ import annotations

import dataclasses
import io as _stdio
import struct
from typing import BinaryIO

import numpy as np

from .head import HeadConfig, HeadParams, init_head
from .pooling import FeatureClip
from .tensor import DOUBLE, SINGLE, Tensor

__all__ = [
    "FormatError",
    "TENSOR_MAGIC",
    "CHECKPOINT_MAGIC",
    "FORMAT_VERSION",
    "write_tensor",
    "read_tensor",
    "write_clip",
    "read_clip",
    "save_checkpoint",
    "load_checkpoint",
    "parse_config_text",
    "config_to_text",
]

TENSOR_MAGIC = b"TCPT"
META_MAGIC = b"META"
CHECKPOINT_MAGIC = b"TCPK"
FORMAT_VERSION = 1
_MAX_NDIM = 8
_MAX_ELEMENTS = 1 << 30

_DTYPE_CODES = {np.dtype(SINGLE): 1, np.dtype(DOUBLE): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    """A file does not follow the binary format."""


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def _open(path_or_fh, mode: str):
    if hasattr(path_or_fh, "read") or hasattr(path_or_fh, "write"):
        return path_or_fh, False
    return open(path_or_fh, mode), True


# ---------------------------------------------------------------------------
# Tensor records


def _write_tensor_record(fh: BinaryIO, arr: np.ndarray) -> None:
    dtype = np.dtype(arr.dtype)
    code = _DTYPE_CODES.get(dtype)
    if code is None:
        raise TypeError(f"only float32/float64 tensors are serializable, got {dtype}")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<III", FORMAT_VERSION, code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
    fh.write(np.ascontiguousarray(arr).astype(_CODE_DTYPES[code], copy=False).tobytes())


def _read_tensor_record(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    version, code, ndim = struct.unpack("<III", _read_exact(fh, 12, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise FormatError(f"unknown dtype code {code}")
    if ndim > _MAX_NDIM:
        raise FormatError(f"ndim {ndim} exceeds limit {_MAX_NDIM}")
    dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "dims")) if ndim else ()
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_ELEMENTS:
        raise FormatError(f"element count {count} exceeds limit")
    payload = _read_exact(fh, count * dtype.itemsize, "payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path_or_fh, value) -> None:
    """Serialize one tensor (or numpy array) to a file or binary stream."""
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    fh, owned = _open(path_or_fh, "wb")
    try:
        _write_tensor_record(fh, arr)
    finally:
        if owned:
            fh.close()


def read_tensor(path_or_fh) -> Tensor:
    """Read one tensor; trailing bytes after the record are an error."""
    fh, owned = _open(path_or_fh, "rb")
    try:
        arr = _read_tensor_record(fh)
        if fh.read(1):
            raise FormatError("trailing bytes after tensor record")
        return Tensor(arr)
    finally:
        if owned:
            fh.close()


# ---------------------------------------------------------------------------
# Clip files


def write_clip(path_or_fh, clip, hw: tuple | None = None,
               label: int | None = None) -> None:
    """Serialize a clip; metadata is written when hw or a label is given."""
    if isinstance(clip, FeatureClip):
        arr = clip.stacked().data
        hw = clip.hw if hw is None else hw
    elif isinstance(clip, Tensor):
        arr = clip.data
    else:
        arr = np.asarray(clip)
    if arr.ndim != 3:
        raise FormatError(f"a clip must be (frames, positions, channels), got shape {arr.shape}")
    fh, owned = _open(path_or_fh, "wb")
    try:
        _write_tensor_record(fh, arr)
        if hw is not None or label is not None:
            h, w = (int(hw[0]), int(hw[1])) if hw is not None else (0, 0)
            fh.write(META_MAGIC)
            fh.write(struct.pack("<QQq", h, w, -1 if label is None else int(label)))
    finally:
        if owned:
            fh.close()


def read_clip(path_or_fh):
    """Read a clip file -> (FeatureClip, label or None)."""
    fh, owned = _open(path_or_fh, "rb")
    try:
        arr = _read_tensor_record(fh)
        if arr.ndim != 3:
            raise FormatError(f"a clip must have 3 dims, file has {arr.ndim}")
        hw = None
        label = None
        rest = fh.read()
        if rest:
            if len(rest) != 4 + 8 + 8 + 8 or rest[:4] != META_MAGIC:
                raise FormatError("malformed clip metadata block")
            h, w, raw_label = struct.unpack("<QQq", rest[4:])
            if h or w:
                if h * w != arr.shape[1]:
                    raise FormatError(f"metadata {h}x{w} does not match {arr.shape[1]} positions")
                hw = (h, w)
            label = None if raw_label < 0 else int(raw_label)
        return FeatureClip.from_array(arr, hw=hw), label
    finally:
        if owned:
            fh.close()


# ---------------------------------------------------------------------------
# Config text (checkpoint headers and the training config file)

_CONFIG_ALIASES = {
    "c": "channels",
    "d": "proj_dim",
    "l": "frames",
    "n": "positions",
    "kappa": "kernel_size",
    "k": "sqrt_iterations",
    "classes": "num_classes",
}


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().lower()
        out[_CONFIG_ALIASES.get(key, key)] = value.strip()
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise FormatError(f"expected a boolean, got {value!r}")
    if like is None or isinstance(like, int):
        if value.strip().lower() in ("none", ""):
            return None
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def head_config_from_mapping(mapping: dict[str, str]) -> HeadConfig:
    defaults = HeadConfig()
    kwargs = {}
    for f in dataclasses.fields(HeadConfig):
        if f.name in mapping:
            kwargs[f.name] = _coerce(mapping[f.name], getattr(defaults, f.name))
    return HeadConfig(**kwargs)


def config_to_text(cfg: HeadConfig) -> str:
    lines = []
    for f in dataclasses.fields(HeadConfig):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name}={'none' if value is None else value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Checkpoints


def _norm_buffers(params: HeadParams) -> dict[str, np.ndarray]:
    if params.tsa is None:
        return {}
    norm = params.tsa.norm
    return {
        "tsa.norm.running_mean": norm.running_mean,
        "tsa.norm.running_var": norm.running_var,
    }


def save_checkpoint(path_or_fh, params: HeadParams) -> None:
    """Write the config header plus every named tensor (parameters and
    normalization running statistics)."""
    header = config_to_text(params.config).encode("utf-8")
    tensors: list[tuple[str, np.ndarray]] = [
        (name, p.tensor.data) for name, p in params.named().items()
    ]
    tensors.extend(sorted(_norm_buffers(params).items()))
    fh, owned = _open(path_or_fh, "wb")
    try:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            _write_tensor_record(fh, arr)
    finally:
        if owned:
            fh.close()


def load_checkpoint(path_or_fh) -> HeadParams:
    """Rebuild a head from a checkpoint; shapes must match the config."""
    fh, owned = _open(path_or_fh, "rb")
    try:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version, header_len = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        header = _read_exact(fh, header_len, "config header").decode("utf-8")
        try:
            cfg = head_config_from_mapping(parse_config_text(header))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"bad config header: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        blobs: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            if name_len > 4096:
                raise FormatError("parameter name too long")
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            blobs[name] = _read_tensor_record(fh)
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint")
    finally:
        if owned:
            fh.close()

    params = init_head(cfg)
    buffers = _norm_buffers(params)
    named = params.named()
    for name, p in named.items():
        if name not in blobs:
            raise FormatError(f"checkpoint is missing parameter {name!r}")
        try:
            p.assign(blobs.pop(name).astype(p.tensor.dtype))
        except ValueError as exc:
            raise FormatError(f"parameter {name!r}: {exc}") from exc
    for name, buf in buffers.items():
        if name in blobs:
            arr = blobs.pop(name)
            if arr.shape != buf.shape:
                raise FormatError(f"buffer {name!r} has shape {arr.shape}, expected {buf.shape}")
            buf[...] = arr
    if blobs:
        raise FormatError(f"checkpoint has unexpected tensors: {sorted(blobs)[:3]}")
    return params
