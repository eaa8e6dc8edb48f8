"""Binary volume files (HVOL) and training checkpoints (HIVE).

All multi-byte fields are little-endian.

HVOL::

    magic "HVOL" | u16 version | u8 dtype (0 f32, 1 u8, 2 u16) | u32 D, H, W
    | f32 spacing x3 | payload (D*H*W values, C order)

HIVE checkpoint::

    magic "HIVE" | u16 version | u32 len + utf-8 config text
    | u32 count, then per parameter: u16 len + name, u32 dims x5, f32 data
    | u64 optimizer step, then per parameter f32 first and second moments
    | Philox state: u64 counter x4, u64 key x2, u64 buffer x4, u32 buffer_pos,
      u8 has_uint32, u32 uinteger
    | u32 epoch | f64 best validation JAC | u32 epochs since improvement
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HVOL_MAGIC = b"HVOL"
HVOL_VERSION = 1
HVOL_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<u2")}
_HVOL_HEADER = struct.Struct("<4sHB3I3f")

CKPT_MAGIC = b"HIVE"
CKPT_VERSION = 1


class FormatError(ValueError):
    """Malformed file; the message names the field and byte offset."""


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int, name: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.what}: truncated while reading {name} at offset {self.pos} "
                f"(need {n} bytes, {len(self.data) - self.pos} left)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, name: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size, name))

    def array(self, dtype, count: int, name: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, name), dtype=dt).copy()


# ---------------------------------------------------------------------------
# HVOL
# ---------------------------------------------------------------------------

def _dtype_code(arr: np.ndarray, dtype: str | None) -> int:
    if dtype is not None:
        codes = {"f32": 0, "u8": 1, "u16": 2}
        if dtype not in codes:
            raise ValueError(f"unknown HVOL dtype {dtype!r}")
        return codes[dtype]
    if arr.dtype == np.uint8 or arr.dtype == bool:
        return 1
    if np.issubdtype(arr.dtype, np.integer):
        return 2
    return 0


def encode_hvol(arr: np.ndarray, spacing=(1.0, 1.0, 1.0), dtype: str | None = None) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValueError(f"HVOL volumes are 3-D, got shape {arr.shape}")
    code = _dtype_code(arr, dtype)
    dt = HVOL_DTYPES[code]
    if code:
        info = np.iinfo(dt)
        if arr.size and (arr.min() < info.min or arr.max() > info.max):
            raise ValueError(f"values out of range for {dt}")
    header = _HVOL_HEADER.pack(HVOL_MAGIC, HVOL_VERSION, code, *arr.shape,
                               *(float(s) for s in spacing))
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_hvol(data: bytes, what: str = "HVOL"):
    r = _Reader(data, what)
    magic = r.take(4, "magic")
    if magic != HVOL_MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r} at offset 0")
    (version,) = r.unpack("H", "version")
    if version != HVOL_VERSION:
        raise FormatError(f"{what}: unsupported version {version} at offset 4")
    (code,) = r.unpack("B", "dtype")
    if code not in HVOL_DTYPES:
        raise FormatError(f"{what}: unknown dtype code {code} at offset 6")
    dims = r.unpack("3I", "dims")
    spacing = r.unpack("3f", "spacing")
    n = int(np.prod(dims))
    arr = r.array(HVOL_DTYPES[code], n, "payload").reshape(dims)
    if r.pos != len(data):
        raise FormatError(f"{what}: {len(data) - r.pos} trailing bytes after payload at offset {r.pos}")
    return arr, tuple(float(s) for s in spacing)


def write_hvol(path, arr, spacing=(1.0, 1.0, 1.0), dtype: str | None = None) -> None:
    Path(path).write_bytes(encode_hvol(arr, spacing, dtype))


def read_hvol(path):
    """Returns ``(array, spacing)``; float payloads come back as float64."""
    arr, spacing = decode_hvol(Path(path).read_bytes(), str(path))
    if arr.dtype.kind == "f":
        arr = arr.astype(np.float64)
    return arr, spacing


def import_raw(path, dims, dtype: str = "u8", spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Read a headerless C-order volume (e.g. a converted EM stack)."""
    dt = {"f32": "<f4", "u8": "u1", "u16": "<u2"}[dtype]
    data = np.fromfile(path, dtype=dt)
    if data.size != int(np.prod(dims)):
        raise FormatError(f"{path}: {data.size} values do not fill dims {tuple(dims)}")
    return data.reshape(dims)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config_text: str
    params: list[tuple[str, np.ndarray]]
    step: int = 0
    moments: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    rng_state: dict | None = None
    epoch: int = 0
    best_metric: float = -1.0
    stale_epochs: int = 0


def _pack_rng(state: dict | None) -> bytes:
    if state is None:
        state = np.random.Philox(0).state
    if state["bit_generator"] != "Philox":
        raise ValueError("only Philox generator states can be stored")
    s = state["state"]
    return (np.asarray(s["counter"], "<u8").tobytes() + np.asarray(s["key"], "<u8").tobytes()
            + np.asarray(state["buffer"], "<u8").tobytes()
            + struct.pack("<IBI", state["buffer_pos"], state["has_uint32"], state["uinteger"]))


def _unpack_rng(r: _Reader) -> dict:
    counter = r.array("<u8", 4, "rng counter")
    key = r.array("<u8", 2, "rng key")
    buffer = r.array("<u8", 4, "rng buffer")
    pos, has, uint = r.unpack("IBI", "rng flags")
    return {"bit_generator": "Philox",
            "state": {"counter": counter.astype(np.uint64), "key": key.astype(np.uint64)},
            "buffer": buffer.astype(np.uint64), "buffer_pos": pos,
            "has_uint32": has, "uinteger": uint}


def encode_checkpoint(ck: Checkpoint) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    cfg = ck.config_text.encode("utf-8")
    out.append(struct.pack("<I", len(cfg)) + cfg)
    out.append(struct.pack("<I", len(ck.params)))
    for name, arr in ck.params:
        nb = name.encode("utf-8")
        if arr.ndim > 5:
            raise ValueError(f"parameter {name} has more than 5 axes")
        dims = (1,) * (5 - arr.ndim) + tuple(arr.shape)
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<5I", *dims))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    out.append(struct.pack("<Q", ck.step))
    moments = ck.moments or [(np.zeros_like(a), np.zeros_like(a)) for _, a in ck.params]
    if len(moments) != len(ck.params):
        raise ValueError("optimizer moments do not match the parameter list")
    for m, v in moments:
        out.append(np.ascontiguousarray(m, "<f4").tobytes() + np.ascontiguousarray(v, "<f4").tobytes())
    out.append(_pack_rng(ck.rng_state))
    out.append(struct.pack("<IdI", ck.epoch, ck.best_metric, ck.stale_epochs))
    return b"".join(out)


def decode_checkpoint(data: bytes, what: str = "checkpoint") -> Checkpoint:
    r = _Reader(data, what)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r} at offset 0")
    (version,) = r.unpack("H", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"{what}: unsupported version {version} at offset 4")
    (n,) = r.unpack("I", "config length")
    try:
        text = r.take(n, "config text").decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{what}: config text is not utf-8 ({e})") from None
    (count,) = r.unpack("I", "parameter count")
    params = []
    for i in range(count):
        (ln,) = r.unpack("H", f"name length of parameter {i}")
        name = r.take(ln, f"name of parameter {i}").decode("utf-8", "replace")
        dims = r.unpack("5I", f"dims of {name}")
        arr = r.array("<f4", int(np.prod(dims)), f"data of {name}").reshape(dims)
        params.append((name, arr))
    (step,) = r.unpack("Q", "optimizer step")
    moments = []
    for name, arr in params:
        m = r.array("<f4", arr.size, f"first moment of {name}").reshape(arr.shape)
        v = r.array("<f4", arr.size, f"second moment of {name}").reshape(arr.shape)
        moments.append((m, v))
    rng_state = _unpack_rng(r)
    epoch, best, stale = r.unpack("IdI", "epoch record")
    if r.pos != len(data):
        raise FormatError(f"{what}: {len(data) - r.pos} trailing bytes at offset {r.pos}")
    return Checkpoint(text, params, step, moments, rng_state, epoch, best, stale)


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))


def assign_params(named_params, stored) -> None:
    """Copy stored (5-D padded) arrays into live parameters, checking names and shapes."""
    stored = list(stored)
    if len(stored) != len(named_params):
        raise FormatError(f"checkpoint holds {len(stored)} parameters, network expects "
                          f"{len(named_params)}")
    for (name, live), (sname, arr) in zip(named_params, stored):
        if name != sname:
            raise FormatError(f"parameter name mismatch: checkpoint {sname!r}, network {name!r}")
        if arr.size != live.size or arr.reshape(live.shape).shape != live.shape:
            raise FormatError(f"shape mismatch for {name}: checkpoint {arr.shape}, network {live.shape}")
        live[...] = arr.reshape(live.shape)
