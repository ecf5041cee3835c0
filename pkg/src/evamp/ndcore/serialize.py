"""Single-file parameter container.

Layout: ``EVAMP01`` magic, u32 little-endian manifest length, JSON manifest
(names, shapes, offsets, free-form ``meta``), then the raw little-endian
float64 payload in manifest order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from evamp.errors import CorruptFileError, VersionError
from evamp.ndcore.tensor import Tensor

MAGIC_PREFIX = b"EVAMP"
FORMAT_VERSION = 1
MAGIC = MAGIC_PREFIX + b"%02d" % FORMAT_VERSION


def dumps_params(params: Mapping[str, Tensor | np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        arr = np.asarray(arr, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size * 8
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries, "payload_bytes": offset,
                "meta": meta or {}}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)


def loads_params(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < len(MAGIC) + 4 or not blob.startswith(MAGIC_PREFIX):
        raise CorruptFileError("not a parameter file (bad magic)")
    tag = blob[len(MAGIC_PREFIX):len(MAGIC)]
    if tag != MAGIC[len(MAGIC_PREFIX):]:
        raise VersionError(f"unsupported format version tag {tag!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<I", blob[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if start + hlen > len(blob):
        raise CorruptFileError("manifest length exceeds file size")
    try:
        manifest = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"manifest format_version {manifest.get('format_version')!r} != {FORMAT_VERSION}")
    payload = blob[start + hlen:]
    try:
        entries = manifest["tensors"]
        declared = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in entries) * 8
    except (KeyError, TypeError) as exc:
        raise CorruptFileError(f"malformed manifest: {exc}") from exc
    if declared != len(payload) or manifest.get("payload_bytes") != len(payload):
        raise CorruptFileError(f"manifest declares {declared} payload bytes, file has {len(payload)}")
    out: dict[str, np.ndarray] = {}
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["count"] != count or e["offset"] + count * 8 > len(payload):
            raise CorruptFileError(f"entry {e['name']!r} disagrees with its shape")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        out[e["name"]] = arr.reshape(tuple(e["shape"])).astype(np.float64)
    return out, manifest["meta"]


def save_params(params: Mapping[str, Tensor | np.ndarray], path, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps_params(params, meta))


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads_params(Path(path).read_bytes())
