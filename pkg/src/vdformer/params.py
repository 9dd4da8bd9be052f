"""Parameter registry and binary checkpoint files.

Checkpoint layout: an 8-byte little-endian length, a UTF-8 JSON manifest
mapping each array name to its shape and byte offset, then one contiguous
payload of raw little-endian IEEE-754 float64 values. Round-trips are
bit-exact. The manifest also carries the run config and arbitrary metadata
(optimizer scalars, epoch counters) under separate keys.
"""

from __future__ import annotations

import json
import struct
from typing import Iterator, Optional

import numpy as np

from .errors import CheckpointMismatchError, ConfigError, VolumeFormatError
from .tensor import Parameter

_MAGIC = "vdformer-checkpoint-v1"


class ParameterStore:
    """Ordered, uniquely-named collection of trainable parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def register(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name: {name}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params.keys())

    def zero_grad(self) -> None:
        for p in self:
            p.grad = None

    def num_scalars(self) -> int:
        return sum(p.size for p in self)

    def arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy values in; every parameter must be present with its shape."""
        for name, p in self._params.items():
            if name not in arrays:
                raise CheckpointMismatchError(f"checkpoint missing parameter {name!r}")
            arr = arrays[name]
            if tuple(arr.shape) != p.shape:
                raise CheckpointMismatchError(
                    f"parameter {name!r} shape mismatch: "
                    f"model {p.shape}, checkpoint {tuple(arr.shape)}"
                )
            p.data = np.array(arr, dtype=np.float64)
        extra = [n for n in arrays if n not in self._params]
        if extra:
            raise CheckpointMismatchError(
                f"checkpoint holds unknown parameter {extra[0]!r}"
            )


def write_checkpoint(
    path,
    arrays: dict[str, np.ndarray],
    config: Optional[dict] = None,
    meta: Optional[dict] = None,
) -> None:
    entries = {}
    offset = 0
    chunks = []
    # payload laid out in sorted-name order so identical contents always
    # produce identical bytes regardless of dict construction order
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8", order="C")
        entries[name] = {"shape": list(a.shape), "offset": offset}
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = {
        "format": _MAGIC,
        "dtype": "f64le",
        "arrays": entries,
        "config": config,
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for chunk in chunks:
            f.write(chunk)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], Optional[dict], dict]:
    """Returns (arrays, config, meta)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise VolumeFormatError(f"checkpoint {path} is truncated")
    (mlen,) = struct.unpack("<Q", raw[:8])
    try:
        manifest = json.loads(raw[8 : 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"checkpoint {path} has a malformed manifest: {e}")
    if manifest.get("format") != _MAGIC:
        raise VolumeFormatError(f"checkpoint {path} has unknown format tag")
    payload = raw[8 + mlen :]
    arrays = {}
    for name, entry in manifest["arrays"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        buf = payload[start : start + count * 8]
        if len(buf) != count * 8:
            raise VolumeFormatError(f"checkpoint {path} payload truncated at {name!r}")
        arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return arrays, manifest.get("config"), manifest.get("meta", {})
