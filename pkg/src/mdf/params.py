"""Named parameters, deterministic RNG streams, checkpoint I/O."""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .autodiff import Tensor

_FORMAT = "mdf-checkpoint-v1"


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"rng key must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"rng key must be str or int, got {type(key).__name__}")


class RngStream:
    """Deterministic hierarchy of random streams.

    A stream is identified by a root seed plus a path of keys. Children are
    independent of the parent and of each other, and the same (seed, path)
    always yields the same draws regardless of creation order. String keys
    are hashed (crc32) so call sites can use readable names.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = _path

    def child(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


def glorot(gen: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=(fan_out, fan_in))


class ParameterStore:
    """Flat registry of named trainable tensors.

    Names must be unique; registration order is the serialization order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.ascontiguousarray(data, dtype=np.float64))
        self._params[name] = t
        return t

    def add_glorot(self, name: str, gen: np.random.Generator,
                   fan_out: int, fan_in: int) -> Tensor:
        return self.add(name, glorot(gen, fan_out, fan_in))

    def add_zeros(self, name: str, shape: tuple) -> Tensor:
        return self.add(name, np.zeros(shape))

    def get(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradients keyed by name; missing grads read as zeros."""
        out = {}
        for name, t in self._params.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def global_grad_norm(self) -> float:
        sq = 0.0
        for t in self._params.values():
            if t.grad is not None:
                sq += float((t.grad * t.grad).sum())
        return float(np.sqrt(sq))

    # ------------------------------------------------------------------
    # checkpointing: manifest.json describes the layout, params.bin is the
    # little-endian float64 payload in registration order.

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        offset = 0
        with open(directory / "params.bin", "wb") as f:
            for name, t in self._params.items():
                buf = np.ascontiguousarray(t.data, dtype="<f8")
                f.write(buf.tobytes())
                entries.append({"name": name, "shape": list(t.shape),
                                "offset": offset, "count": int(t.size)})
                offset += t.size
        manifest = {"format": _FORMAT, "dtype": "<f8",
                    "total_scalars": offset, "params": entries}
        with open(directory / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=1)

    def load(self, directory) -> None:
        """Fill existing parameters in place from a checkpoint directory.

        The manifest must describe exactly the registered names and shapes;
        anything else means the checkpoint belongs to a different model.
        """
        directory = Path(directory)
        with open(directory / "manifest.json") as f:
            manifest = json.load(f)
        if manifest.get("format") != _FORMAT:
            raise ValueError(f"unrecognized checkpoint format: {manifest.get('format')}")
        flat = np.fromfile(directory / "params.bin", dtype="<f8")
        if flat.size != manifest["total_scalars"]:
            raise ValueError("params.bin size does not match manifest")
        seen = set()
        for e in manifest["params"]:
            name = e["name"]
            if name not in self._params:
                raise KeyError(f"checkpoint has unknown parameter: {name}")
            t = self._params[name]
            if list(t.shape) != e["shape"]:
                raise ValueError(
                    f"shape mismatch for {name}: model {list(t.shape)}, "
                    f"checkpoint {e['shape']}")
            chunk = flat[e["offset"]:e["offset"] + e["count"]]
            t.data = chunk.reshape(t.shape).astype(np.float64).copy()
            seen.add(name)
        missing = set(self._params) - seen
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
