"""Checkpoint container.

Layout (little-endian)::

    magic        8 bytes  b"ASPLCKPT"
    version      u32      currently 1
    header_len   u32
    header       header_len bytes of UTF-8 JSON:
                 {"kind": ..., "encoder": {...}, "adapters": {...} | null, "extra": {...}}
    n_params     u32
    n_params records:
        name_len u16, name (UTF-8), ndim u8, dims (ndim x u64),
        trainable u8, values (prod(dims) x f64, row-major)
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .encoder import AdapterConfig, EncoderConfig
from .params import ParameterStore

MAGIC = b"ASPLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, store: ParameterStore, config: EncoderConfig,
                    adapters: AdapterConfig | None, kind: str = "splade",
                    extra: dict | None = None) -> Path:
    header = {
        "kind": kind,
        "encoder": config.to_dict(),
        "adapters": None if adapters is None else adapters.to_dict(),
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", len(store)))
        for name in store.names():
            arr = store[name]
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(struct.pack("<B", int(store.trainable[name])))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Returns ``(store, encoder_config, adapter_config, header)``."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    header = json.loads(take(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    store = ParameterStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (tr,) = struct.unpack("<B", take(1))
        values = np.frombuffer(take(8 * math.prod(shape)), dtype="<f8").reshape(shape)
        store.add(name, values.astype(np.float64), trainable=bool(tr))
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    config = EncoderConfig(**header["encoder"])
    adapters = None if header["adapters"] is None else AdapterConfig.from_dict(header["adapters"])
    return store, config, adapters, header
