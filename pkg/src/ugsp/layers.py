"""Parameter management, layer building blocks, and the checkpoint format.

Checkpoint layout (little-endian): magic "UGSPCKPT", version u32, count u32,
then per entry {name length u16, name bytes, rank u8, dims u32 x rank,
payload as 32-bit floats}. Optimizer state and model metadata ride along as
entries with reserved "_opt." / "_meta." name prefixes; loading a model
rejects any other unknown name.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, FormatError
from .sparse import FlopsLedger
from .tensor import Parameter, Tensor, conv2d, deconv, prelu

CKPT_MAGIC = b"UGSPCKPT"
CKPT_VERSION = 1


class ParamStore:
    """Ordered, uniquely named parameter registry for one model."""

    def __init__(self, seed: int, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, np.asarray(data, dtype=self.dtype))
        self.params[name] = p
        return p

    def uniform_fan_in(self, name: str, shape: tuple, fan_in: int) -> Parameter:
        bound = float(np.sqrt(6.0 / fan_in))
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple) -> Parameter:
        return self.add(name, np.zeros(shape))

    def full(self, name: str, shape: tuple, value: float) -> Parameter:
        return self.add(name, np.full(shape, value))

    def values(self):
        return self.params.values()


class Conv2d:
    """3x3 / 1x1 convolution layer; zero padding K//2, optional stride."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 k: int = 3, stride: int = 1, zero_init: bool = False):
        self.name = name
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.padding = k // 2
        if zero_init:
            self.w = store.zeros(f"{name}.weight", (c_out, c_in, k, k))
        else:
            self.w = store.uniform_fan_in(f"{name}.weight", (c_out, c_in, k, k),
                                          fan_in=c_in * k * k)
        self.b = store.zeros(f"{name}.bias", (c_out,))

    def __call__(self, x: Tensor, ledger: FlopsLedger | None = None,
                 gated: bool = False) -> Tensor:
        y = conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)
        if ledger is not None:
            n, _, oh, ow = y.data.shape
            ledger.record(self.name, self.k, self.c_in, self.c_out,
                          positions_dense=n * oh * ow, gated=gated)
        return y


class Deconv2d:
    """4x4 stride-2 transposed convolution; doubles the spatial extent."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 zero_init: bool = False):
        self.name = name
        self.c_in, self.c_out, self.k = c_in, c_out, 4
        if zero_init:
            self.w = store.zeros(f"{name}.weight", (c_in, c_out, 4, 4))
        else:
            self.w = store.uniform_fan_in(f"{name}.weight", (c_in, c_out, 4, 4),
                                          fan_in=c_in * 4)
        self.b = store.zeros(f"{name}.bias", (c_out,))

    def __call__(self, x: Tensor, ledger: FlopsLedger | None = None,
                 gated: bool = False) -> Tensor:
        y = deconv(x, self.w, self.b, stride=2, padding=1)
        if ledger is not None:
            n, _, h, w = x.data.shape
            ledger.record(self.name, self.k, self.c_in, self.c_out,
                          positions_dense=n * h * w, gated=gated)
        return y


class PReLU:
    """Per-channel PReLU; slope initialized at 0.25."""

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.name = name
        self.slope = store.full(f"{name}.slope", (channels,), 0.25)

    def __call__(self, x: Tensor) -> Tensor:
        return prelu(x, self.slope)


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

def write_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(entries)))
        for name, arr in entries.items():
            arr = np.asarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"checkpoint {path}: truncated at byte {off}")
        out = blob[off:off + n]
        off += n
        return out

    if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise FormatError(f"checkpoint {path}: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint {path}: unsupported version {version}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n_items = int(np.prod(dims)) if dims else 1
        payload = take(4 * n_items)
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        entries[name] = arr
    if off != len(blob):
        raise FormatError(f"checkpoint {path}: {len(blob) - off} trailing bytes")
    return entries


def save_model(path, store: ParamStore, meta: dict[str, float] | None = None,
               opt_state: dict[str, np.ndarray] | None = None) -> None:
    entries: dict[str, np.ndarray] = {}
    for k, v in (meta or {}).items():
        entries[f"_meta.{k}"] = np.asarray([float(v)], dtype=np.float32)
    for name, p in store.params.items():
        entries[name] = p.data
    for k, v in (opt_state or {}).items():
        entries[f"_opt.{k}"] = v
    write_checkpoint(path, entries)


def split_entries(entries: dict[str, np.ndarray]):
    """Partition raw checkpoint entries into (meta, params, opt_state)."""
    meta, params, opt = {}, {}, {}
    for name, arr in entries.items():
        if name.startswith("_meta."):
            meta[name[len("_meta."):]] = float(arr.reshape(-1)[0])
        elif name.startswith("_opt."):
            opt[name[len("_opt."):]] = arr
        else:
            params[name] = arr
    return meta, params, opt


def load_into_store(store: ParamStore, params: dict[str, np.ndarray]) -> None:
    for name in params:
        if name not in store.params:
            raise CheckpointError(f"unknown parameter name {name!r} in checkpoint")
    missing = [n for n in store.params if n not in params]
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {missing[:4]}...")
    for name, arr in params.items():
        p = store.params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
        p.data = arr.astype(store.dtype)
