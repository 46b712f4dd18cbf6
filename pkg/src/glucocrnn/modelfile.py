"""Single-file container: magic line, JSON header line, float64 LE blob."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"GLUCOCRNN-MODEL\n"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


def spec_hash(spec: dict) -> str:
    blob = json.dumps(spec, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_container(path, kind: str, spec: dict, arrays: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    layout = [[name, list(np.shape(a))] for name, a in arrays.items()]
    header = {"format_version": FORMAT_VERSION, "kind": kind, "spec": spec,
              "spec_hash": spec_hash(spec), "layout": layout, "meta": meta or {}}
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    header["blob_bytes"] = len(blob)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(blob)


def read_container(path, kind: str | None = None):
    """Returns ``(header, arrays)``; refuses bad magic, version, hash or size."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ModelFileError(f"{path}: not a model file")
    nl = data.find(b"\n", len(MAGIC))
    if nl < 0:
        raise ModelFileError(f"{path}: truncated header")
    try:
        header = json.loads(data[len(MAGIC):nl])
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported version {header.get('format_version')}")
    if kind is not None and header.get("kind") != kind:
        raise ModelFileError(f"{path}: holds a {header.get('kind')!r} model, not {kind!r}")
    if spec_hash(header["spec"]) != header["spec_hash"]:
        raise ModelFileError(f"{path}: spec hash mismatch")
    blob = data[nl + 1:]
    if len(blob) != header["blob_bytes"]:
        raise ModelFileError(f"{path}: expected {header['blob_bytes']} bytes of weights, found {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    arrays = {}
    pos = 0
    for name, shape in header["layout"]:
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    if pos != flat.size:
        raise ModelFileError(f"{path}: layout does not cover the weight blob")
    return header, arrays
