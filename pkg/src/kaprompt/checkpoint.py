"""Binary checkpoint of prompt pool, frozen backbone and classifier head.

Layout::

    8 bytes   magic  b"KAPCKPT\\x00"
    4 bytes   format version, uint32 little-endian
    8 bytes   header length N, uint64 little-endian
    N bytes   UTF-8 JSON header: meta, array table (name, shape, offset, count), data_bytes
    ...       float64 little-endian payload, arrays back to back

Every array's shape lives in the header, so a reader needs no config to parse
the file. Writes go to a temporary file that is renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kaprompt.backbone import ClassifierHead, FrozenBackbone
from kaprompt.errors import (CheckpointError, CheckpointShapeError, CheckpointTruncatedError,
                             CheckpointVersionError)
from kaprompt.prompt_pool import PromptPool, PromptSet

MAGIC = b"KAPCKPT\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    pool: PromptPool
    backbone: FrozenBackbone
    head: ClassifierHead
    meta: dict = field(default_factory=dict)


def _arrays(pool, backbone, head):
    yield from ((f"backbone/{k}", v) for k, v in sorted(backbone.params.items()))
    yield "head/weight", head.weight.data
    yield "head/bias", head.bias.data
    for s in pool.sets:
        yield f"pool/{s.domain_index}/prompts", s.prompts
        yield f"pool/{s.domain_index}/keys", s.keys


def save_checkpoint(path, pool: PromptPool, backbone: FrozenBackbone, head: ClassifierHead,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    table, blobs, offset = [], [], 0
    for name, arr in _arrays(pool, backbone, head):
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": "kaprompt-checkpoint",
        "version": VERSION,
        "backbone": backbone.config(),
        "head": {"dim": head.weight.shape[0], "n_classes": head.n_classes},
        "pool": {"n_prompts": pool.n_prompts, "prompt_length": pool.prompt_length, "dim": pool.dim,
                 "n_domains": pool.n_domains, "frozen": [s.frozen for s in pool.sets]},
        "meta": meta or {},
        "arrays": table,
        "data_bytes": offset,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected: dict | None = None) -> Checkpoint:
    """Read a checkpoint; ``expected`` may pin pool sizes, e.g. {"n_prompts": 10}."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointVersionError(f"{path}: unrecognised magic header {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this reader supports {VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointTruncatedError(f"{path}: header cut short")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    payload = raw[start:]
    if len(payload) < header["data_bytes"]:
        raise CheckpointTruncatedError(f"{path}: payload has {len(payload)} bytes, "
                                       f"header promises {header['data_bytes']}")

    arrays = {}
    for item in header["arrays"]:
        shape = tuple(item["shape"])
        if int(np.prod(shape, dtype=np.int64)) != item["count"]:
            raise CheckpointShapeError(f"{path}: array {item['name']} shape {shape} vs count {item['count']}")
        buf = payload[item["offset"]: item["offset"] + 8 * item["count"]]
        if len(buf) != 8 * item["count"]:
            raise CheckpointTruncatedError(f"{path}: array {item['name']} is cut short")
        arrays[item["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)

    pinfo = header["pool"]
    for key, want in (expected or {}).items():
        if key in pinfo and pinfo[key] != want:
            raise CheckpointShapeError(f"{path}: checkpoint has {key} = {pinfo[key]}, config expects {want}")

    try:
        backbone = FrozenBackbone(**header["backbone"], params={
            k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("backbone/")})
        head = ClassifierHead(header["head"]["dim"], header["head"]["n_classes"],
                              weight=arrays["head/weight"], bias=arrays["head/bias"])
        pool = PromptPool(pinfo["n_prompts"], pinfo["prompt_length"], pinfo["dim"])
        for d in range(1, pinfo["n_domains"] + 1):
            pool.add_set(PromptSet(d, arrays[f"pool/{d}/prompts"], arrays[f"pool/{d}/keys"],
                                   frozen=pinfo["frozen"][d - 1]))
    except KeyError as exc:
        raise CheckpointShapeError(f"{path}: missing array {exc}") from None
    except ValueError as exc:
        raise CheckpointShapeError(f"{path}: {exc}") from None
    return Checkpoint(pool=pool, backbone=backbone, head=head, meta=header["meta"])
