"""Named parameter store with partition tags and bit-exact checkpoints.

Checkpoint layout (a directory):
  manifest.json  {"format": 1, "id": ..., "entries": [{name, shape, precision, tag, offset, nbytes}]}
  values.bin     concatenated little-endian arrays in manifest order
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .autodiff import Tensor, precision_name

TAGS = ("pre", "peft", "g")


class CheckpointError(IOError):
    pass


class ParameterStore:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._tags: dict[str, str] = {}

    def add(self, name: str, value, tag: str, dtype=None) -> Tensor:
        if tag not in TAGS:
            raise ValueError(f"unknown partition tag {tag!r}")
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=False, name=name, dtype=dtype)
        self._params[name] = t
        self._tags[name] = tag
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tag(self, name: str) -> str:
        return self._tags[name]

    def names(self, tags: Iterable[str] | None = None) -> list[str]:
        if tags is None:
            return list(self._params)
        tags = set(tags)
        return [n for n in self._params if self._tags[n] in tags]

    def tensors(self, tags: Iterable[str] | None = None) -> list[Tensor]:
        return [self._params[n] for n in self.names(tags)]

    def set_trainable(self, tags: Iterable[str]) -> None:
        tags = set(tags)
        for n, t in self._params.items():
            t.requires_grad = self._tags[n] in tags
            t.grad = np.zeros_like(t.data) if t.requires_grad else None

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._params.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def astype(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)
            if t.grad is not None:
                t.grad = np.zeros_like(t.data)

    def snapshot(self, tags: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        return {n: self._params[n].data.copy() for n in self.names(tags)}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            self._params[n].data = arr.copy()

    def count(self, tags: Iterable[str] | None = None) -> int:
        return sum(self._params[n].data.size for n in self.names(tags))

    def partition(self) -> dict[str, list[str]]:
        return {tag: self.names([tag]) for tag in TAGS}

    def fingerprint(self, tags: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for n in self.names(tags):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._params[n].data).astype(self._params[n].data.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()[:16]


def save_checkpoint(store: ParameterStore, path, tags: Iterable[str] | None = None) -> dict:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in store.names(tags):
        arr = store[name].data
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "precision": precision_name(arr.dtype),
                "tag": store.tag(name),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": 1, "id": store.fingerprint(tags), "entries": entries}
    (path / "values.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "values.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    arrays = {}
    for e in manifest["entries"]:
        dt = np.dtype(e["precision"]).newbyteorder("<")
        chunk = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype=dt).astype(np.dtype(e["precision"])).reshape(e["shape"])
    return manifest, arrays


def load_checkpoint(store: ParameterStore, path, strict: bool = False) -> dict:
    """Copy checkpoint values into ``store``; entries must match name, shape and tag."""
    manifest, arrays = read_checkpoint(path)
    tags = {e["name"]: e["tag"] for e in manifest["entries"]}
    for name, arr in arrays.items():
        if name not in store:
            raise CheckpointError(f"checkpoint entry {name!r} not in model")
        if store[name].shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: {arr.shape} vs {store[name].shape}")
        if store.tag(name) != tags[name]:
            raise CheckpointError(f"partition tag mismatch for {name!r}")
        store[name].data = arr.copy()
    if strict and set(arrays) != set(store):
        missing = sorted(set(store) - set(arrays))
        raise CheckpointError(f"checkpoint lacks {len(missing)} parameters, e.g. {missing[:3]}")
    return manifest
