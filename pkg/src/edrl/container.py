"""Binary container shared by dataset and checkpoint files.

Layout::

    b"EDRL" | uint64 LE header length | UTF-8 JSON header | blob section

The header lists every blob (name, shape, element count, byte offset), the
blob-section byte length and its CRC-32.  Blobs are little-endian float64.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"EDRL"
FORMAT_VERSION = 1


class DataFormatError(ValueError):
    """Base class for unreadable container files."""


class ChecksumError(DataFormatError):
    pass


class VersionError(DataFormatError):
    pass


class TruncatedError(DataFormatError):
    pass


def encode(kind: str, meta: dict, blobs: dict[str, np.ndarray], version: int = FORMAT_VERSION) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in blobs.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "count": int(a.size), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    section = b"".join(chunks)
    header = {
        "format_version": version,
        "kind": kind,
        "meta": meta,
        "blobs": entries,
        "blob_bytes": len(section),
        "crc32": zlib.crc32(section) & 0xFFFFFFFF,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hdr)) + hdr + section


def decode(buf: bytes, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise DataFormatError("not an EDRL container (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[4:12])
    if len(buf) < 12 + hlen:
        raise TruncatedError(f"header declares {hlen} bytes, file has {len(buf) - 12}")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"malformed header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"format version {version} is not supported (this build reads version {FORMAT_VERSION})")
    if kind is not None and header.get("kind") != kind:
        raise DataFormatError(f"expected a {kind!r} file, found {header.get('kind')!r}")
    section = buf[12 + hlen :]
    declared = header["blob_bytes"]
    if len(section) < declared:
        raise TruncatedError(f"blob section truncated: {len(section)} of {declared} bytes present")
    if len(section) > declared:
        raise DataFormatError(f"{len(section) - declared} trailing bytes after blob section")
    if zlib.crc32(section) & 0xFFFFFFFF != header["crc32"]:
        raise ChecksumError("checksum mismatch: blob section CRC-32 differs from the header")
    blobs = {}
    for e in header["blobs"]:
        n = e["count"]
        if n != int(np.prod(e["shape"], dtype=np.int64)):
            raise DataFormatError(f"blob {e['name']!r}: count {n} disagrees with shape {e['shape']}")
        start, stop = e["offset"], e["offset"] + 8 * n
        if stop > declared:
            raise TruncatedError(f"blob {e['name']!r} runs past the blob section")
        blobs[e["name"]] = np.frombuffer(section[start:stop], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return header["meta"], blobs


def write(path, kind: str, meta: dict, blobs: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(kind, meta, blobs))


def read(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), kind)
