"""Versioned checkpoint archive.

Layout::

    b"CGNSCKPT"                      magic
    uint32 little-endian             header length in bytes
    header                           UTF-8 JSON
    payload                          little-endian float64 tensors, back to back

The header carries the format version, config hash, seed, iteration, the
effective config, and for every tensor its name, shape and byte offset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CGNSCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict
    config: dict
    config_hash: str
    seed: int
    iteration: int
    optimizer: dict = field(default_factory=dict)  # name -> array (moments etc.)
    extra: dict = field(default_factory=dict)  # JSON-able state (rng, counters)
    version: int = FORMAT_VERSION


def save_checkpoint(path, ckpt):
    tensors = [("param/" + k, v) for k, v in ckpt.params.items()]
    tensors += [("optim/" + k, v) for k, v in ckpt.optimizer.items()]
    index, offset, chunks = [], 0, []
    for name, arr in tensors:
        data = np.asarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format_version": ckpt.version,
        "config_hash": ckpt.config_hash,
        "seed": ckpt.seed,
        "iteration": ckpt.iteration,
        "config": ckpt.config,
        "extra": ckpt.extra,
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path, expected_hash=None, override_hash_check=False):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt header ({err})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version} is not supported "
            f"(this build reads version {FORMAT_VERSION})"
        )
    if expected_hash is not None and header["config_hash"] != expected_hash and not override_hash_check:
        raise CheckpointError(
            f"{path}: config hash {header['config_hash']} does not match {expected_hash}"
        )
    payload = memoryview(raw)[start + hlen :]
    params, optim = {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=entry["offset"]).reshape(shape)
        kind, name = entry["name"].split("/", 1)
        (params if kind == "param" else optim)[name] = arr.astype(np.float64)
    return Checkpoint(params, header["config"], header["config_hash"], header["seed"],
                      header["iteration"], optim, header.get("extra", {}), version)
