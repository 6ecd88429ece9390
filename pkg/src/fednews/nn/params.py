"""Named parameter containers and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic  b"FNCK"   u32 version
    u32 meta_len     meta_len bytes of UTF-8 JSON
    u32 n_records
    per record: u32 path_len, path (UTF-8), u32 ndim, ndim x u64 dims,
                prod(dims) x f64 payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .tensor import DimensionError, Tensor

MAGIC = b"FNCK"
VERSION = 1


class ParamStore(dict):
    """Map of parameter path -> float64 array.

    Shapes are fixed once a path is set; :meth:`assign` refuses to change them.
    """

    def __setitem__(self, key: str, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if key in self and self[key].shape != arr.shape:
            raise DimensionError(f"{key}: shape {arr.shape} != {self[key].shape}")
        super().__setitem__(key, arr)

    def assign(self, values: Mapping[str, np.ndarray]) -> None:
        for k, v in values.items():
            if k not in self:
                raise KeyError(k)
            self[k] = v

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.items()})

    def track(self) -> dict[str, Tensor]:
        """Leaf tensors that record gradients, one per path."""
        return {k: Tensor(v, requires_grad=True) for k, v in self.items()}

    def subset(self, prefix: str) -> "ParamStore":
        return ParamStore({k: v for k, v in self.items() if k.startswith(prefix)})

    def num_values(self) -> int:
        return int(sum(v.size for v in self.values()))

    def flatten(self) -> np.ndarray:
        return flatten(self, list(self))


def zeros_like(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}


def flatten(store: Mapping[str, np.ndarray], keys) -> np.ndarray:
    if not keys:
        return np.zeros(0)
    return np.concatenate([np.asarray(store[k], dtype=np.float64).ravel() for k in keys])


def unflatten(vec: np.ndarray, like: Mapping[str, np.ndarray], keys) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for k in keys:
        shape = np.shape(like[k])
        n = int(np.prod(shape, dtype=np.int64))
        out[k] = vec[pos:pos + n].reshape(shape)
        pos += n
    if pos != vec.size:
        raise DimensionError(f"flat vector has {vec.size} values, expected {pos}")
    return out


# -- initialisers -----------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# -- checkpoint IO ----------------------------------------------------------

def iter_records(store: Mapping[str, np.ndarray]) -> Iterator[bytes]:
    for path in sorted(store):
        arr = np.asarray(store[path], dtype="<f8")
        name = path.encode("utf-8")
        head = struct.pack("<I", len(name)) + name + struct.pack("<I", arr.ndim)
        head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        yield head + arr.tobytes()


def save_checkpoint(path, store: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)) + meta_bytes)
        fh.write(struct.pack("<I", len(store)))
        for rec in iter_records(store):
            fh.write(rec)


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    (meta_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        store[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
    return store, meta
