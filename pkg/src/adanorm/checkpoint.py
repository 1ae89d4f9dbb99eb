"""Versioned binary checkpoints: named float64 arrays behind a JSON header.

Layout: one JSON header line, then the raw bytes of every array in header
order (little-endian float64). The header carries the array manifest
(name, shape), the parameter tags, a config hash, and the iteration
counter. Writing the same state twice produces identical bytes — there
are no timestamps and the manifest is sorted by name.

Array names are namespaced; the loader rejects anything it does not
recognize, so a future writer cannot silently smuggle state past an old
reader:

    param.*      trainable parameters (tagged base/adaptive)
    buffer.*     normalization running statistics
    centroid.*   centroid bank entries
    adam.*       optimizer moments (optional)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .losses import CentroidBank
from .model import Network

VERSION = 1
_PREFIXES = ("param.", "buffer.", "centroid.", "adam.")
_HEADER_KEYS = {"version", "config_hash", "iteration", "arrays", "tags"}


@dataclass
class Checkpoint:
    config_hash: str
    iteration: int
    params: dict = field(default_factory=dict)      # name -> array
    tags: dict = field(default_factory=dict)        # name -> base|adaptive
    buffers: dict = field(default_factory=dict)
    centroids: dict = field(default_factory=dict)   # bank keys, sans prefix trim
    adam: dict = field(default_factory=dict)


def save_checkpoint(path, model: Network, bank: CentroidBank | None,
                    iteration: int, config_hash: str,
                    adam_arrays: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    tags: dict[str, str] = {}
    for name, p in model.params.items():
        arrays[f"param.{name}"] = p.data
        tags[name] = model.params.tag(name)
    for name, buf in model.buffers().items():
        arrays[f"buffer.{name}"] = buf
    if bank is not None:
        arrays.update(bank.state_arrays())
    if adam_arrays:
        for name, arr in adam_arrays.items():
            if not name.startswith("adam."):
                raise ValueError(f"optimizer array {name!r} must be adam.*")
            arrays[name] = arr

    manifest = [{"name": n, "shape": list(arrays[n].shape)}
                for n in sorted(arrays)]
    header = {"version": VERSION, "config_hash": config_hash,
              "iteration": int(iteration), "arrays": manifest, "tags": tags}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for entry in manifest:
            fh.write(np.ascontiguousarray(arrays[entry["name"]],
                                          dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        unknown = set(header) - _HEADER_KEYS
        if unknown:
            raise ValueError(f"checkpoint {path}: unknown header keys "
                             f"{sorted(unknown)}")
        if header.get("version") != VERSION:
            raise ValueError(f"checkpoint {path}: unsupported version "
                             f"{header.get('version')}")
        ck = Checkpoint(config_hash=header["config_hash"],
                        iteration=header["iteration"], tags=header["tags"])
        for entry in header["arrays"]:
            name, shape = entry["name"], tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"checkpoint {path}: truncated at {name}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            if name.startswith("param."):
                ck.params[name[len("param."):]] = arr
            elif name.startswith("buffer."):
                ck.buffers[name[len("buffer."):]] = arr
            elif name.startswith("centroid."):
                ck.centroids[name] = arr
            elif name.startswith("adam."):
                ck.adam[name] = arr
            else:
                raise ValueError(f"checkpoint {path}: unknown array "
                                 f"namespace for {name!r}")
        if fh.read(1):
            raise ValueError(f"checkpoint {path}: trailing bytes")
    return ck


def restore_model(model: Network, ck: Checkpoint, *,
                  expect_hash: str | None = None) -> None:
    """Load parameters and buffers into an already-constructed network."""
    if expect_hash is not None and ck.config_hash != expect_hash:
        raise ValueError(f"checkpoint was written for config {ck.config_hash}, "
                         f"expected {expect_hash}")
    have = {n for n, _ in model.params.items()}
    missing, extra = have - set(ck.params), set(ck.params) - have
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)}")
    for name, p in model.params.items():
        arr = ck.params[name]
        if arr.shape != p.data.shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != "
                             f"model shape {p.data.shape}")
        p.data[...] = arr
    model.load_buffers(ck.buffers)


def restore_bank(dim: int, gamma: float, ck: Checkpoint) -> CentroidBank:
    bank = CentroidBank(dim, gamma)
    bank.load_state_arrays(ck.centroids)
    return bank
