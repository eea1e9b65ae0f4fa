"""Bit-exact checkpoint container for parameter stores.

Layout: one line of UTF-8 JSON (format version, checksums, name-sorted
entry table with shapes / kinds / byte offsets, optional metadata), a
newline, then the concatenated little-endian float64 payloads. Loads are
all-or-nothing: any header tampering, truncation, or offset inconsistency
raises with a distinct message and yields no store.
"""

from __future__ import annotations

import json
import os
import zlib
from typing import Optional

import numpy as np

from .params import ParameterStore

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_save(store: ParameterStore, path, meta: Optional[dict] = None):
    entries = []
    offset = 0
    blobs = []
    for name, t in store.items():
        blob = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        kind = "buffer" if store.is_buffer(name) else "param"
        entries.append([name, list(t.data.shape), kind, offset])
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    meta = meta or {}
    payload_crc = zlib.crc32(payload)
    header = {
        "format_version": FORMAT_VERSION,
        "entries": entries,
        "meta": meta,
        "payload_bytes": len(payload),
        "payload_crc32": payload_crc,
        "header_crc32": zlib.crc32(
            _canonical([entries, meta, len(payload), payload_crc])
        ),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        f.write(payload)
    os.replace(tmp, path)


def _read_header(f) -> dict:
    line = f.readline()
    if not line.endswith(b"\n"):
        raise CheckpointError("malformed container: missing header line")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed header JSON: {e}") from e
    if not isinstance(header, dict):
        raise CheckpointError("malformed header: not an object")
    expected_keys = {
        "format_version",
        "entries",
        "meta",
        "payload_bytes",
        "payload_crc32",
        "header_crc32",
    }
    if set(header) != expected_keys:
        raise CheckpointError(
            f"malformed header: fields {sorted(header)} != {sorted(expected_keys)}"
        )
    version = header["format_version"]
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported format version {version!r}, expected {FORMAT_VERSION}"
        )
    expected_crc = zlib.crc32(
        _canonical(
            [
                header["entries"],
                header["meta"],
                header["payload_bytes"],
                header["payload_crc32"],
            ]
        )
    )
    if header["header_crc32"] != expected_crc:
        raise CheckpointError("header checksum mismatch (corrupted header)")
    return header


def checkpoint_load(path) -> ParameterStore:
    with open(path, "rb") as f:
        header = _read_header(f)
        payload = f.read()

    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"truncated payload: expected {header['payload_bytes']} bytes, "
            f"got {len(payload)}"
        )
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError("payload checksum mismatch (corrupted payload)")

    store = ParameterStore()
    offset = 0
    names = [e[0] for e in header["entries"]]
    if names != sorted(names):
        raise CheckpointError("entry table is not name-sorted")
    for name, shape, kind, stated_offset in header["entries"]:
        if stated_offset != offset:
            raise CheckpointError(
                f"offset inconsistency at {name!r}: stated {stated_offset}, "
                f"computed {offset}"
            )
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        data = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        store.add(name, data.reshape(shape).astype(np.float64), buffer=kind == "buffer")
        offset += nbytes
    if offset != header["payload_bytes"]:
        raise CheckpointError(
            f"offset inconsistency: entries cover {offset} bytes, "
            f"payload has {header['payload_bytes']}"
        )
    return store


def read_checkpoint_meta(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f).get("meta", {})
