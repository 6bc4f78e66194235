"""Vector files (fvecs/ivecs), projection files and index bundles.

Layouts are documented byte by byte in ``docs/FORMAT.md``. Everything is
little-endian. Both binary formats end in a CRC32 of all preceding bytes and
are written to a temporary file that is fsynced and then renamed into place.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    InconsistentDimensionError,
    StorageError,
    TruncatedFileError,
    VersionMismatchError,
    ZeroDimensionError,
)
from .graph import GraphIndex
from .lvq import LvqCodec, LvqStore, pack_codes, packed_width, unpack_codes
from .pipeline import FloatStore, LeanVecIndex
from .projection import ProjectionPair

_KINDS = {"fvecs": np.dtype("<f4"), "ivecs": np.dtype("<i4")}

INDEX_MAGIC = b"LVEC"
INDEX_VERSION = 1
PROJ_MAGIC = b"LVPJ"
PROJ_VERSION = 1

# magic, version, D, d, n, metric, b1, b2, secondary, flags, entry, max_degree, section count
_INDEX_HEADER = struct.Struct("<4sIIIQBBBBIQII")
_SECTION = struct.Struct("<4sQQ")
# magic, version, d, D, flags
_PROJ_HEADER = struct.Struct("<4sIIII")
_CRC = struct.Struct("<I")

FLAG_SHARED = 1
FLAG_ORTHONORMAL = 2
FLAG_HALF_SECONDARY = 4
_METRIC_CODES = {"inner_product": 0, "euclidean": 1}
_METRIC_NAMES = {v: k for k, v in _METRIC_CODES.items()}


def _kind(path, kind):
    kind = kind or Path(path).suffix.lstrip(".").lower()
    if kind not in _KINDS:
        raise StorageError(f"cannot tell the vector file kind of {str(path)!r}; use .fvecs or .ivecs")
    return _KINDS[kind]


def read_vecs(path, kind: str | None = None) -> np.ndarray:
    """Read an fvecs/ivecs file into an ``n x dim`` float32/int32 matrix."""
    dtype = _kind(path, kind)
    buf = Path(path).read_bytes()
    if not buf:
        return np.zeros((0, 0), dtype=dtype.newbyteorder("="))
    if len(buf) % 4:
        raise TruncatedFileError(f"{path}: length {len(buf)} is not a multiple of 4 bytes")
    words = np.frombuffer(buf, dtype="<i4")
    dim = int(words[0])
    if dim == 0:
        raise ZeroDimensionError(f"{path}: first record declares dimension 0")
    if dim < 0:
        raise InconsistentDimensionError(f"{path}: first record declares negative dimension {dim}")
    width = dim + 1
    if words.size % width == 0:
        rows = words.reshape(-1, width)
        bad = np.flatnonzero(rows[:, 0] != dim)
        if bad.size:
            raise InconsistentDimensionError(
                f"{path}: record {bad[0]} declares dimension {rows[bad[0], 0]}, expected {dim}")
        return np.frombuffer(buf, dtype=dtype).reshape(-1, width)[:, 1:].astype(dtype.newbyteorder("="))
    pos = 0
    record = 0
    while pos < words.size:
        if words[pos] != dim:
            raise InconsistentDimensionError(
                f"{path}: record {record} declares dimension {words[pos]}, expected {dim}")
        pos += width
        record += 1
    raise TruncatedFileError(f"{path}: last record is cut short ({len(buf)} bytes, records of {4 * width})")


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_vecs(path, matrix, kind: str | None = None) -> None:
    dtype = _kind(path, kind)
    m = np.asarray(matrix)
    if m.size == 0:
        _atomic_write(path, b"")
        return
    if m.ndim != 2:
        raise StorageError(f"write_vecs expects a 2-D matrix, got shape {m.shape}")
    rows = np.empty((m.shape[0], m.shape[1] + 1), dtype=dtype)
    rows[:, 0] = np.array(m.shape[1], dtype="<i4").view(dtype)
    rows[:, 1:] = m
    _atomic_write(path, rows.tobytes())


def _with_crc(body: bytes) -> bytes:
    return body + _CRC.pack(zlib.crc32(body))


def _read_checked(path, magic: bytes, version: int, header: struct.Struct) -> tuple[bytes, tuple]:
    buf = Path(path).read_bytes()
    if len(buf) < len(magic) or buf[: len(magic)] != magic:
        raise BadMagicError(f"{path}: not a {magic.decode()} file")
    if len(buf) < header.size + _CRC.size:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes is shorter than the fixed header")
    fields = header.unpack_from(buf, 0)
    if fields[1] != version:
        raise VersionMismatchError(fields[1], version)
    body, (crc,) = buf[: -_CRC.size], _CRC.unpack_from(buf, len(buf) - _CRC.size)
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch, the file is corrupted")
    return body, fields


def save_projection(pair: ProjectionPair, path) -> None:
    flags = (FLAG_SHARED if pair.shared else 0) | (FLAG_ORTHONORMAL if pair.orthonormal else 0)
    body = _PROJ_HEADER.pack(PROJ_MAGIC, PROJ_VERSION, pair.d, pair.D, flags)
    body += pair.a.astype("<f8").tobytes() + pair.b.astype("<f8").tobytes()
    _atomic_write(path, _with_crc(body))


def load_projection(path) -> ProjectionPair:
    body, (_, _, d, big_d, flags) = _read_checked(path, PROJ_MAGIC, PROJ_VERSION, _PROJ_HEADER)
    need = _PROJ_HEADER.size + 2 * d * big_d * 8
    if len(body) != need:
        raise TruncatedFileError(f"{path}: expected {need} bytes before the checksum, found {len(body)}")
    mats = np.frombuffer(body, dtype="<f8", offset=_PROJ_HEADER.size).reshape(2, d, big_d).astype(np.float64)
    a = mats[0]
    b = a if flags & FLAG_SHARED and np.array_equal(mats[0], mats[1]) else mats[1]
    return ProjectionPair(a, b, bool(flags & FLAG_ORTHONORMAL))


def _store_sections(prefix: str, store) -> list[tuple[bytes, bytes]]:
    if isinstance(store, FloatStore):
        return [((prefix + "F32").encode(), store.vectors.astype("<f4").tobytes())]
    out = [
        ((prefix + "MEA").encode(), store.codec.mean.astype("<f8").tobytes()),
        ((prefix + "LOD").encode(), np.column_stack([store.lo, store.delta]).astype("<f8").tobytes()),
        ((prefix + "CD1").encode(), pack_codes(store.codes1, store.codec.b1).tobytes()),
    ]
    if store.codes2 is not None:
        out.append(((prefix + "CD2").encode(), pack_codes(store.codes2, store.codec.b2).tobytes()))
    return out


def save_index(index: LeanVecIndex, path) -> None:
    proj = index.projection
    n = len(index)
    primary_b1 = 0 if isinstance(index.primary, FloatStore) else index.primary.codec.b1
    primary_b2 = 0 if isinstance(index.primary, FloatStore) else index.primary.codec.b2
    secondary = 0 if isinstance(index.secondary, FloatStore) else 1
    flags = (FLAG_SHARED if proj.shared else 0) | (FLAG_ORTHONORMAL if proj.orthonormal else 0)
    if isinstance(index.secondary, FloatStore) and index.secondary.half:
        flags |= FLAG_HALF_SECONDARY
    sections = [(b"PROJ", proj.a.astype("<f8").tobytes() + proj.b.astype("<f8").tobytes())]
    sections += _store_sections("P", index.primary)
    sections += _store_sections("S", index.secondary)
    sections.append((b"ADJC", index.graph.neighbors.astype("<i4").tobytes()))
    sections.append((b"DEGS", index.graph.degrees.astype("<i4").tobytes()))

    header = _INDEX_HEADER.pack(
        INDEX_MAGIC, INDEX_VERSION, proj.D, proj.d, n, _METRIC_CODES[index.metric],
        primary_b1, primary_b2, secondary, flags, index.graph.entry, index.graph.max_degree, len(sections),
    )
    offset = len(header) + _SECTION.size * len(sections)
    table = b""
    for tag, blob in sections:
        table += _SECTION.pack(tag, offset, len(blob))
        offset += len(blob)
    body = header + table + b"".join(blob for _, blob in sections)
    _atomic_write(path, _with_crc(body))


def _section(body: bytes, table: dict, tag: str, nbytes: int, path) -> bytes:
    if tag not in table:
        raise StorageError(f"{path}: missing section {tag!r}")
    offset, length = table[tag]
    if length != nbytes:
        raise StorageError(f"{path}: section {tag!r} has {length} bytes, header implies {nbytes}")
    return body[offset:offset + length]


def _load_store(body, table, prefix, n, dim, b1, b2, path):
    if b1 == 0:
        raw = _section(body, table, prefix + "F32", n * dim * 4, path)
        return FloatStore(np.frombuffer(raw, dtype="<f4").reshape(n, dim))
    mean = np.frombuffer(_section(body, table, prefix + "MEA", dim * 8, path), dtype="<f8")
    lod = np.frombuffer(_section(body, table, prefix + "LOD", n * 16, path), dtype="<f8").reshape(n, 2)
    codec = LvqCodec(dim, mean.astype(np.float64), b1, b2)
    c1 = np.frombuffer(_section(body, table, prefix + "CD1", n * packed_width(dim, b1), path), dtype=np.uint8)
    codes1 = unpack_codes(c1.reshape(n, packed_width(dim, b1)), b1, dim)
    codes2 = None
    if b2:
        c2 = np.frombuffer(_section(body, table, prefix + "CD2", n * packed_width(dim, b2), path), dtype=np.uint8)
        codes2 = unpack_codes(c2.reshape(n, packed_width(dim, b2)), b2, dim)
    return LvqStore(codec, codes1, codes2, lod[:, 0].copy(), lod[:, 1].copy())


def load_index(path) -> LeanVecIndex:
    body, fields = _read_checked(path, INDEX_MAGIC, INDEX_VERSION, _INDEX_HEADER)
    _, _, big_d, d, n, metric, b1, b2, secondary, flags, entry, max_degree, count = fields
    table_end = _INDEX_HEADER.size + count * _SECTION.size
    if table_end > len(body):
        raise TruncatedFileError(f"{path}: section table runs past the end of the file")
    if metric not in _METRIC_NAMES or secondary not in (0, 1) or b1 not in (0, 4, 8) or b2 not in (0, 8):
        raise StorageError(f"{path}: header holds unsupported metric/store codes")
    if not (1 <= d <= big_d) or n < 1 or not 0 <= entry < n:
        raise StorageError(f"{path}: header dimensions are inconsistent (D={big_d}, d={d}, n={n}, entry={entry})")
    table = {}
    for i in range(count):
        tag, offset, length = _SECTION.unpack_from(body, _INDEX_HEADER.size + i * _SECTION.size)
        if offset < table_end or offset + length > len(body):
            raise TruncatedFileError(f"{path}: section {tag!r} lies outside the file")
        table[tag.decode("ascii", "replace")] = (offset, length)
    # every size below is checked against the table before any array is built
    proj = np.frombuffer(_section(body, table, "PROJ", 2 * d * big_d * 8, path), dtype="<f8").reshape(2, d, big_d)
    a = proj[0].astype(np.float64)
    b = a if flags & FLAG_SHARED and np.array_equal(proj[0], proj[1]) else proj[1].astype(np.float64)
    projection = ProjectionPair(a, b, bool(flags & FLAG_ORTHONORMAL))
    primary = _load_store(body, table, "P", n, d, b1, b2, path)
    second = _load_store(body, table, "S", n, big_d, 0 if secondary == 0 else 8, 0, path)
    if flags & FLAG_HALF_SECONDARY and isinstance(second, FloatStore):
        second.half = True  # values were already rounded before saving
    nbrs = np.frombuffer(_section(body, table, "ADJC", n * max_degree * 4, path), dtype="<i4").reshape(n, max_degree)
    degs = np.frombuffer(_section(body, table, "DEGS", n * 4, path), dtype="<i4")
    if np.any(degs < 0) or np.any(degs > max_degree) or np.any(nbrs >= n) or np.any(nbrs < -1):
        raise StorageError(f"{path}: adjacency section is inconsistent")
    graph = GraphIndex(nbrs.astype(np.int32), degs.astype(np.int32), int(entry))
    return LeanVecIndex(projection, primary, second, graph, _METRIC_NAMES[metric])
