"""Checkpoint container and small JSON helpers.

Layout: 8-byte magic, uint32 format version, uint32 header length, UTF-8 JSON
header, then every tensor as raw little-endian float32 in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor, named_parameters

MAGIC = b"EPIGRADE"
VERSION = 1
KINDS = ("encoder", "fusion")


class FormatError(ValueError):
    pass


class KindError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict
    meta: dict = field(default_factory=dict)


def _unflatten(flat: dict[str, np.ndarray]):
    root: dict = {}
    for name, arr in flat.items():
        parts = name.split(".")
        node = root
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = Tensor(arr, requires_grad=True)

    def listify(node):
        if isinstance(node, dict):
            node = {k: listify(v) for k, v in node.items()}
            if node and all(k.isdigit() for k in node):
                return [node[str(i)] for i in range(len(node))]
        return node

    return listify(root)


def save_checkpoint(path: str | Path, kind: str, config: dict, params, meta: dict | None = None) -> None:
    if kind not in KINDS:
        raise KindError(f"unknown checkpoint kind {kind!r}")
    named = named_parameters(params)
    tensors, offset = [], 0
    for name, t in named.items():
        n = int(t.data.size)
        tensors.append({"name": name, "shape": list(t.data.shape), "offset": offset})
        offset += n * 4
    header = json.dumps({"kind": kind, "config": config, "meta": meta or {}, "tensors": tensors}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for t in named.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_header(path: str | Path) -> tuple[dict, int]:
    """Parse the header only; returns (header, payload start)."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 8)
        if len(head) < len(MAGIC) + 8 or head[: len(MAGIC)] != MAGIC:
            raise FormatError(f"{path}: not an epigrade checkpoint")
        version, hlen = struct.unpack("<II", head[len(MAGIC) :])
        if version != VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        try:
            header = json.loads(fh.read(hlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt header") from exc
    return header, len(MAGIC) + 8 + hlen


def list_parameters(path: str | Path) -> list[tuple[str, tuple[int, ...]]]:
    header, _ = read_header(path)
    return [(t["name"], tuple(t["shape"])) for t in header["tensors"]]


def load_checkpoint(path: str | Path, kind: str | None = None) -> Checkpoint:
    header, start = read_header(path)
    if kind is not None and header["kind"] != kind:
        raise KindError(f"{path}: expected a {kind} checkpoint, found {header['kind']}")
    payload = Path(path).read_bytes()[start:]
    flat = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        lo = t["offset"]
        if lo + 4 * n > len(payload):
            raise FormatError(f"{path}: truncated payload at {t['name']}")
        flat[t["name"]] = np.frombuffer(payload, dtype="<f4", count=n, offset=lo).astype(np.float32).reshape(t["shape"])
    return Checkpoint(header["kind"], header["config"], _unflatten(flat), header["meta"])


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_default))


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
