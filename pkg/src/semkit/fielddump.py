"""
Binary field dumps.

Layout (little-endian)::

    b"SEMF"  u32 version  u32 E  u32 N  u32 nfields
    per field: u32 name length, utf-8 name
    per field: E*(N+1)**3 float64 values, element-major, lattice order [i, j, k]
"""
import struct

import numpy as np

__all__ = ["MAGIC", "VERSION", "FieldDumpError", "write_fields", "read_fields"]

MAGIC = b"SEMF"
VERSION = 1


class FieldDumpError(ValueError):
    pass


def write_fields(path, fields: dict, N: int):
    """Write ``{name: (E, N+1, N+1, N+1) array}``; insertion order is kept."""
    if not fields:
        raise FieldDumpError("no fields to write")
    n = N + 1
    arrays = []
    E = None
    for name, a in fields.items():
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 4 or a.shape[1:] != (n, n, n):
            raise FieldDumpError(f"field {name!r} has shape {a.shape}, expected (E, {n}, {n}, {n})")
        if E is None:
            E = a.shape[0]
        elif a.shape[0] != E:
            raise FieldDumpError("fields disagree on the element count")
        arrays.append((name, np.ascontiguousarray(a, dtype="<f8")))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", VERSION, E, N, len(arrays)))
        for name, _ in arrays:
            b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(b)))
            fh.write(b)
        for _, a in arrays:
            fh.write(a.tobytes())


def read_fields(path):
    """Return ``(fields, N)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FieldDumpError("not a field dump (bad magic)")
    try:
        version, E, N, nf = struct.unpack_from("<4I", data, 4)
    except struct.error:
        raise FieldDumpError("truncated header") from None
    if version != VERSION:
        raise FieldDumpError(f"unsupported dump version {version}")
    off = 20
    names = []
    for _ in range(nf):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        names.append(data[off : off + ln].decode("utf-8"))
        off += ln
    n = N + 1
    count = E * n**3
    if len(data) != off + nf * count * 8:
        raise FieldDumpError("payload size does not match the header")
    fields = {}
    for name in names:
        fields[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(E, n, n, n).astype(np.float64)
        off += count * 8
    return fields, N
