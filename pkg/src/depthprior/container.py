"""Binary container for model files.

Layout (all integers little-endian):

    8 bytes   magic "DPRIOR01" (6-byte family tag + 2-digit version)
    u32       number of table entries
    per entry:
        u16       name length, then UTF-8 name bytes
        u8        dtype code (0 = float64 LE, 1 = uint8)
        u8        ndim
        ndim*u64  shape
        u64       absolute byte offset of the tensor data
        u64       tensor byte count
    raw tensor data (in table order)
    u32       CRC32 of every preceding byte

Tensors are written in the order given, so identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import ModelFormatError

MAGIC_FAMILY = b"DPRIOR"
MAGIC = MAGIC_FAMILY + b"01"

_DTYPE_F64 = 0
_DTYPE_U8 = 1


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype == np.float64:
        return _DTYPE_F64
    if arr.dtype == np.uint8:
        return _DTYPE_U8
    raise ModelFormatError(f"unsupported tensor dtype {arr.dtype}")


def _dtype_from_code(code: int) -> np.dtype:
    if code == _DTYPE_F64:
        return np.dtype("<f8")
    if code == _DTYPE_U8:
        return np.dtype("u1")
    raise ModelFormatError(f"unknown dtype code {code}")


def write_container(path, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Write named tensors to a container file (order is preserved)."""
    header = bytearray()
    entries = []
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            arr = arr.astype("<f8", copy=False)
        entries.append((name.encode("utf-8"), arr))

    # Header size must be known before offsets can be assigned.
    table_size = 4
    for name_b, arr in entries:
        table_size += 2 + len(name_b) + 1 + 1 + 8 * arr.ndim + 8 + 8
    offset = len(MAGIC) + table_size

    header += struct.pack("<I", len(entries))
    blobs = []
    for name_b, arr in entries:
        data = arr.tobytes()
        header += struct.pack("<H", len(name_b)) + name_b
        header += struct.pack("<BB", _dtype_code(arr), arr.ndim)
        for dim in arr.shape:
            header += struct.pack("<Q", dim)
        header += struct.pack("<QQ", offset, len(data))
        blobs.append(data)
        offset += len(data)

    payload = MAGIC + bytes(header) + b"".join(blobs)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def read_container(path) -> dict[str, np.ndarray]:
    """Read a container file into {name: tensor}, verifying the checksum."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4 + 4:
        raise ModelFormatError(f"{path}: truncated file ({len(raw)} bytes)")
    magic = raw[: len(MAGIC)]
    if magic != MAGIC:
        if magic[: len(MAGIC_FAMILY)] == MAGIC_FAMILY:
            raise ModelFormatError(
                f"{path}: container version {magic[len(MAGIC_FAMILY):]!r} "
                f"not supported (expected {MAGIC[len(MAGIC_FAMILY):]!r})"
            )
        raise ModelFormatError(f"{path}: bad magic bytes {magic!r}")

    payload, crc_bytes = raw[:-4], raw[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ModelFormatError(f"{path}: checksum mismatch")

    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(payload):
            raise ModelFormatError(f"{path}: truncated table")
        out = struct.unpack_from(fmt, payload, pos)
        pos += size
        return out

    (n_entries,) = take("<I")
    tensors = {}
    for _ in range(n_entries):
        (name_len,) = take("<H")
        if pos + name_len > len(payload):
            raise ModelFormatError(f"{path}: truncated table")
        name = payload[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = take("<BB")
        shape = tuple(take("<" + "Q" * ndim)) if ndim else ()
        offset, nbytes = take("<QQ")
        dtype = _dtype_from_code(code)
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if ndim and expected != nbytes:
            raise ModelFormatError(f"{path}: tensor '{name}' size mismatch")
        if offset + nbytes > len(payload):
            raise ModelFormatError(f"{path}: tensor '{name}' exceeds file bounds")
        arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize,
                            offset=offset).reshape(shape)
        tensors[name] = arr.copy()
    return tensors


def meta_tensor(meta: dict) -> np.ndarray:
    """Encode a metadata dict as a deterministic uint8 JSON tensor."""
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return np.frombuffer(blob, dtype=np.uint8).copy()


def decode_meta(tensor: np.ndarray) -> dict:
    try:
        return json.loads(bytes(tensor).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"invalid metadata block: {exc}") from exc
