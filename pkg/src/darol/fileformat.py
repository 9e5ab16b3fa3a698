"""Checksummed text container shared by datasets, checkpoints and reports.

Layout (UTF-8, ``\\n`` line endings)::

    DAROL <kind> v<version>
    <header: one line of canonical JSON>
    <row>                       # space-separated floats, 17 significant digits
    ...
    checksum <16 hex digits>    # BLAKE2b-64 of every preceding byte

Floats printed with ``%.17g`` round-trip exactly, so ``save(load(f))``
reproduces ``f`` byte for byte.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

__all__ = [
    "FORMAT_VERSION",
    "FormatError",
    "ChecksumError",
    "VersionError",
    "canonical_json",
    "config_hash",
    "dumps",
    "loads",
    "write",
    "read",
]


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(obj) -> str:
    return hashlib.blake2b(canonical_json(obj).encode(), digest_size=8).hexdigest()


def _checksum(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def _fmt_row(row):
    return " ".join("%.17g" % v for v in np.asarray(row, dtype=float).ravel())


def dumps(kind, header, rows) -> bytes:
    lines = [f"DAROL {kind} v{FORMAT_VERSION}", canonical_json(header)]
    lines.extend(_fmt_row(r) for r in rows)
    body = ("\n".join(lines) + "\n").encode("utf-8")
    return body + f"checksum {_checksum(body)}\n".encode("ascii")


def loads(data: bytes, kind=None):
    """Parse and verify; returns ``(kind, header, rows)`` with rows as 1-D arrays."""
    text = data.decode("utf-8")
    body, sep, tail = text.rstrip("\n").rpartition("\n")
    if not sep or not tail.startswith("checksum "):
        raise FormatError("missing checksum trailer")
    body += "\n"
    if _checksum(body.encode("utf-8")) != tail.split()[1]:
        raise ChecksumError("checksum mismatch: file is corrupted or was edited")
    lines = body.rstrip("\n").split("\n")
    magic = lines[0].split()
    if len(magic) != 3 or magic[0] != "DAROL":
        raise FormatError("not a DAROL file")
    if magic[2] != f"v{FORMAT_VERSION}":
        raise VersionError(f"format version {magic[2]} is not supported (expected v{FORMAT_VERSION})")
    if kind is not None and magic[1] != kind:
        raise FormatError(f"expected a {kind} file, got {magic[1]}")
    header = json.loads(lines[1])
    rows = [np.array([float(t) for t in ln.split()]) for ln in lines[2:]]
    return magic[1], header, rows


def write(path, kind, header, rows):
    data = dumps(kind, header, rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def read(path, kind=None):
    return loads(Path(path).read_bytes(), kind)
