"""Binary tensor container used for model checkpoints and preprocessed image blobs.

Layout::

    b"CXRN"                     magic
    u16 LE                      format version
    u32 LE                      header length in bytes
    header                      UTF-8 JSON: {"kind", "config", "meta", "tensors": [...]}
    zero padding
    payloads                    little-endian float32, each starting on a 64-byte boundary

Each manifest entry is ``{"name", "shape", "offset", "length"}`` where
``offset`` is absolute within the file and ``length == 4 * prod(shape)``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict

import numpy as np

from .errors import (ManifestError, NotACheckpointError, TruncatedCheckpointError,
                     VersionMismatchError)

MAGIC = b"CXRN"
VERSION = 1
ALIGN = 64
_PREFIX = struct.Struct("<4sHI")
_LE_F32 = np.dtype("<f4")


def _align(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


def encode(tensors, kind="tensors", config=None, meta=None):
    """Serialize an ordered name -> array mapping; returns the file bytes."""
    arrays = [(name, np.ascontiguousarray(a, dtype=_LE_F32)) for name, a in tensors.items()]
    manifest = [{"name": n, "shape": list(a.shape), "offset": 0, "length": a.nbytes} for n, a in arrays]

    def header_bytes():
        doc = {"kind": kind, "config": config, "meta": meta or {}, "tensors": manifest}
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")

    # offsets change the header length, so iterate until the layout is stable
    while True:
        head = header_bytes()
        pos = _align(_PREFIX.size + len(head))
        changed = False
        for entry in manifest:
            if entry["offset"] != pos:
                entry["offset"], changed = pos, True
            pos = _align(pos + entry["length"])
        if not changed:
            break
    out = bytearray(_PREFIX.pack(MAGIC, VERSION, len(head)))
    out += head
    for entry, (_, a) in zip(manifest, arrays):
        out += b"\0" * (entry["offset"] - len(out))
        out += a.tobytes()
    return bytes(out)


def decode(blob):
    """Parse container bytes; returns ``(header_dict, OrderedDict name -> float32 array)``."""
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise NotACheckpointError()
    if len(blob) < _PREFIX.size:
        raise TruncatedCheckpointError(f"file is {len(blob)} bytes; prefix needs {_PREFIX.size}")
    _, version, hlen = _PREFIX.unpack_from(blob)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {VERSION}")
    end = _PREFIX.size + hlen
    if len(blob) < end:
        raise TruncatedCheckpointError(f"header declares {hlen} bytes but file ends at {len(blob)}")
    try:
        header = json.loads(blob[_PREFIX.size:end].decode("utf-8"))
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"unreadable header: {exc}") from None
    tensors = OrderedDict()
    last_end = end
    for entry in entries:
        try:
            name, shape = entry["name"], tuple(int(d) for d in entry["shape"])
            offset, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest entry {entry!r}: {exc}") from None
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if length != expected:
            raise ManifestError(f"{name}: shape {shape} needs {expected} bytes, manifest says {length}")
        if offset % ALIGN or offset < last_end:
            raise ManifestError(f"{name}: offset {offset} is misaligned or overlaps earlier data")
        if offset + length > len(blob):
            raise TruncatedCheckpointError(
                f"{name}: payload [{offset}, {offset + length}) runs past end of file ({len(blob)} bytes)")
        if name in tensors:
            raise ManifestError(f"duplicate tensor name {name!r}")
        arr = np.frombuffer(blob, dtype=_LE_F32, count=length // 4, offset=offset)
        tensors[name] = arr.astype(np.float32).reshape(shape)
        last_end = offset + length
    return header, tensors


def _atomic_write(path, data):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


# ------------------------------------------------------------------- models

def save_checkpoint(model, path, meta=None):
    _atomic_write(path, encode(model.state_dict(), "model", model.config.to_dict(), meta))


def load_checkpoint(path):
    """Rebuild a :class:`~cardionet.unet.Model` from ``path``, bit-exact."""
    from .unet import Model, UNetConfig

    header, tensors = decode(_read(path))
    if header.get("kind") != "model" or not isinstance(header.get("config"), dict):
        raise ManifestError("file holds tensors but no model config")
    model = Model(UNetConfig.from_dict(header["config"]), seed=0)
    try:
        model.load_state_dict(tensors)
    except Exception as exc:
        raise ManifestError(f"tensor set does not fit the stored config: {exc}") from None
    return model


def checkpoint_meta(path):
    header, _ = decode(_read(path))
    return header.get("meta", {})


# ------------------------------------------------------------- image blobs

def write_tensor_blob(path, tensors, meta=None):
    _atomic_write(path, encode(tensors, "tensors", None, meta))


def read_tensor_blob(path):
    """Returns ``(tensors, meta)``."""
    header, tensors = decode(_read(path))
    return tensors, header.get("meta", {})


def read_blob_meta(path):
    """Header ``meta`` of a blob without materializing payloads; None if unreadable."""
    try:
        with open(path, "rb") as fh:
            prefix = fh.read(_PREFIX.size)
            magic, version, hlen = _PREFIX.unpack(prefix)
            if magic != MAGIC or version != VERSION:
                return None
            return json.loads(fh.read(hlen).decode("utf-8")).get("meta", {})
    except (OSError, struct.error, ValueError):
        return None
