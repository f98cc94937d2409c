"""Single-file tensor container used for checkpoints, anchors and dataset dumps.

Layout::

    AEGIS-CONTAINER 1\\n
    <manifest byte length as decimal>\\n
    <UTF-8 JSON manifest>
    <raw little-endian payload>

The manifest holds ``kind``, free-form ``meta`` and a ``tensors`` list of
``{"name", "dtype", "shape", "offset"}`` records; offsets are relative to the
start of the payload.  Floating data is ``<f8``; integer data ``<i8``.
"""
from __future__ import annotations

import hashlib
import json
import os
from collections import OrderedDict
from typing import Dict, Mapping, Tuple

import numpy as np

MAGIC = b"AEGIS-CONTAINER"
VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class ContainerError(ValueError):
    pass


def _encode(arr: np.ndarray) -> Tuple[str, np.ndarray]:
    a = np.asarray(arr)
    if np.issubdtype(a.dtype, np.integer) or a.dtype == bool:
        return "i8", np.ascontiguousarray(a, dtype=_DTYPES["i8"])
    return "f8", np.ascontiguousarray(a, dtype=_DTYPES["f8"])


def dumps(kind: str, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    records, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        code, a = _encode(arr)
        raw = a.tobytes(order="C")
        records.append({"name": name, "dtype": code, "shape": list(a.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"kind": kind, "meta": dict(meta or {}), "tensors": records},
                          sort_keys=True).encode("utf-8")
    head = MAGIC + b" " + str(VERSION).encode() + b"\n" + str(len(manifest)).encode() + b"\n"
    return head + manifest + b"".join(chunks)


def loads(blob: bytes, kind: str | None = None) -> Tuple[Dict, "OrderedDict[str, np.ndarray]"]:
    try:
        line1, rest = blob.split(b"\n", 1)
        magic, version = line1.rsplit(b" ", 1)
        if magic != MAGIC:
            raise ContainerError("not an AEGIS container (bad magic)")
        if int(version) != VERSION:
            raise ContainerError(f"unsupported container version {int(version)}")
        nbytes, rest = rest.split(b"\n", 1)
        n = int(nbytes)
        manifest = json.loads(rest[:n].decode("utf-8"))
        payload = rest[n:]
    except ContainerError:
        raise
    except Exception as exc:  # malformed header of any flavour
        raise ContainerError(f"corrupt container: {exc}") from exc
    if kind is not None and manifest.get("kind") != kind:
        raise ContainerError(f"expected container kind {kind!r}, found {manifest.get('kind')!r}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for rec in manifest["tensors"]:
        dt = _DTYPES[rec["dtype"]]
        count = int(np.prod(rec["shape"], dtype=np.int64))
        start, stop = rec["offset"], rec["offset"] + count * dt.itemsize
        if stop > len(payload):
            raise ContainerError(f"corrupt container: tensor {rec['name']!r} truncated")
        out[rec["name"]] = np.frombuffer(payload[start:stop], dtype=dt).reshape(rec["shape"]).copy()
    return manifest, out


def save(path, kind: str, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    blob = dumps(kind, tensors, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load(path, kind: str | None = None):
    with open(path, "rb") as fh:
        return loads(fh.read(), kind)
