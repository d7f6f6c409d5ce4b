"""On-disk array store: ``manifest.json`` plus one raw blob per array.

Blobs are little-endian and row-major. Complex arrays are stored as
interleaved 32-bit (real, imag) pairs, real arrays as 32-bit floats and
integer arrays as 32-bit signed integers. Every blob carries a SHA-256
checksum that is verified on load.
"""
import hashlib
import json
import os
import re

import numpy as np

from .errors import CorruptStoreError, MissingArrayError, UnsupportedVersionError

__all__ = ["FORMAT_VERSION", "save", "load", "load_array", "config_hash"]

FORMAT_VERSION = 1
TOOL_VERSION = "0.1.0"
_DTYPES = {"complex64": "<c8", "float32": "<f4", "int32": "<i4"}
_NAME = re.compile(r"^[A-Za-z0-9_.\-]+$")


def _storage_dtype(arr):
    if np.iscomplexobj(arr):
        return "complex64"
    if arr.dtype.kind in "biu":
        return "int32"
    if arr.dtype.kind == "f":
        return "float32"
    raise TypeError(f"unsupported array dtype {arr.dtype}")


def config_hash(config):
    """Stable short hash of a JSON-serialisable config."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save(path, arrays, provenance=None):
    """Write ``arrays`` (name -> array) to directory ``path``.

    ``provenance`` is stored verbatim in the manifest (seed, config hash and
    tool version are filled in if missing). Existing blobs of the same name
    are overwritten.
    """
    os.makedirs(path, exist_ok=True)
    entries = {}
    offset = 0
    for name in sorted(arrays):
        if not _NAME.match(name):
            raise ValueError(f"invalid array name {name!r}")
        arr = np.asarray(arrays[name])
        kind = _storage_dtype(arr)
        if kind == "int32" and arr.size and (arr.max() > 2**31 - 1 or arr.min() < -(2**31)):
            raise ValueError(f"array {name!r} does not fit in int32")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        fname = f"{name}.bin"
        with open(os.path.join(path, fname), "wb") as f:
            f.write(data)
        entries[name] = {
            "dtype": kind,
            "shape": list(arr.shape),
            "file": fname,
            "offset": offset,
            "size": len(data),
            "sha256": hashlib.sha256(data).hexdigest(),
        }
        offset += len(data)
    prov = {"seed": None, "config_hash": None, "tool_version": TOOL_VERSION}
    prov.update(provenance or {})
    manifest = {"format_version": FORMAT_VERSION, "entries": entries, "provenance": prov}
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def _read_manifest(path):
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"no datastore manifest at {mpath}")
    with open(mpath, encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"datastore format version {manifest.get('format_version')!r} is not supported"
        )
    return manifest


def _read_entry(path, name, entry):
    kind = entry.get("dtype")
    if kind not in _DTYPES:
        raise CorruptStoreError(f"array {name!r} has unknown dtype {kind!r}")
    shape = tuple(entry["shape"])
    if any(s < 0 for s in shape):
        raise CorruptStoreError(f"array {name!r} has a negative dimension")
    with open(os.path.join(path, entry["file"]), "rb") as f:
        data = f.read()
    if len(data) != entry["size"] or hashlib.sha256(data).hexdigest() != entry["sha256"]:
        raise CorruptStoreError(f"checksum mismatch for array {name!r}")
    return np.frombuffer(data, dtype=_DTYPES[kind]).reshape(shape).copy()


def load(path, names=None):
    """Read a datastore; returns ``(arrays, manifest)``."""
    manifest = _read_manifest(path)
    entries = manifest["entries"]
    wanted = sorted(entries) if names is None else list(names)
    missing = [n for n in wanted if n not in entries]
    if missing:
        raise MissingArrayError(f"datastore {path} lacks array(s): {', '.join(missing)}")
    return {n: _read_entry(path, n, entries[n]) for n in wanted}, manifest


def load_array(path, name):
    arrays, _ = load(path, [name])
    return arrays[name]
