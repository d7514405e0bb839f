"""SGT1 binary tensor files and named-tensor bundles.

File layout: ``b"SGT1"``, little-endian ``u32`` rank, ``rank`` x ``u32`` dims,
then the float32 payload in row-major order.

A bundle is a directory (or ``.zip`` archive) holding SGT1 files plus a
``manifest.json``. The manifest is either ``{"tensors": [{"name", "dims",
"file"}, ...]}`` or a flat ``{name: file}`` mapping.
"""

from __future__ import annotations

import json
import os
import struct
import zipfile
from typing import Dict, Mapping

import numpy as np

MAGIC = b"SGT1"
MANIFEST = "manifest.json"


class FormatError(ValueError):
    """Raised for malformed SGT1 files or bundles."""


def encode(arr) -> bytes:
    arr = np.asarray(arr)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("bad magic: not an SGT1 tensor")
    (rank,) = struct.unpack_from("<I", buf, 4)
    head = 8 + 4 * rank
    if len(buf) < head:
        raise FormatError("truncated SGT1 header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != head + 4 * count:
        raise FormatError(f"SGT1 payload is {len(buf) - head} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", offset=head, count=count).astype(np.float32).reshape(dims)


def write(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def _file_name(name: str) -> str:
    return name.replace("/", "_") + ".sgt"


def save_bundle(tensors: Mapping[str, np.ndarray], path, extra: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    entries = []
    for name, arr in tensors.items():
        fname = _file_name(name)
        write(os.path.join(path, fname), arr)
        entries.append({"name": name, "dims": list(np.shape(arr)), "file": fname})
    manifest = {"format": "SGT1-bundle", "tensors": entries}
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1)


def read_manifest(path) -> dict:
    if zipfile.is_zipfile(path):
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read(MANIFEST))
    mpath = os.path.join(path, MANIFEST)
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"no {MANIFEST} in {path}")
    with open(mpath) as fh:
        return json.load(fh)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def load_bundle(path) -> Dict[str, np.ndarray]:
    """Read every tensor listed in a bundle manifest, checking declared dims."""
    manifest = read_manifest(path)
    if "tensors" in manifest:
        entries = [(e["name"], e["file"], e.get("dims")) for e in manifest["tensors"]]
    else:
        entries = [(k, v, None) for k, v in manifest.items() if isinstance(v, str)]
    is_zip = zipfile.is_zipfile(path)
    zf = zipfile.ZipFile(path) if is_zip else None
    out = {}
    try:
        for name, fname, dims in entries:
            try:
                raw = zf.read(fname) if zf else _read_bytes(os.path.join(path, fname))
            except (KeyError, FileNotFoundError) as exc:
                raise FormatError(f"missing tensor file for {name!r}: {fname}") from exc
            arr = decode(raw)
            if dims is not None and list(arr.shape) != list(dims):
                raise FormatError(f"{name}: file dims {arr.shape} disagree with manifest {dims}")
            out[name] = arr
    finally:
        if zf:
            zf.close()
    return out


def zip_bundle(src_dir, dest_zip) -> None:
    with zipfile.ZipFile(dest_zip, "w") as zf:
        for fname in sorted(os.listdir(src_dir)):
            zf.write(os.path.join(src_dir, fname), fname)


__all__ = ["FormatError", "encode", "decode", "read", "write", "save_bundle", "load_bundle",
           "read_manifest", "zip_bundle"]
