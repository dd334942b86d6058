"""Bit-exact binary checkpoint format.

Layout: magic "OOMN", u32 version = 1, u32 record count, then per
record: u16 name length, UTF-8 name, u8 rank, rank x u64 dims, raw
little-endian f64 data. Optimizer moments are stored as additional
records named "<param>.m" / "<param>.v". All integers little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

MAGIC = b"OOMN"
VERSION = 1


def _records(params, optimizer_state):
    for name, value in params.items():
        yield name, np.asarray(value.data if hasattr(value, "data") else value)
    if optimizer_state:
        for name, (m, v) in optimizer_state.items():
            yield name + ".m", np.asarray(m)
            yield name + ".v", np.asarray(v)


def save_checkpoint(path, params: dict, optimizer_state: dict | None = None):
    recs = list(_records(params, optimizer_state))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(recs)))
        for name, arr in recs:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (params, optimizer_state) with plain float64 arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    flat = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from("<" + "Q" * rank, blob, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        flat[name] = arr.astype(np.float64)
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes in checkpoint")

    params = {k: v for k, v in flat.items()
              if not (k.endswith(".m") or k.endswith(".v"))}
    moments = {}
    for k, v in flat.items():
        if k.endswith(".m"):
            moments.setdefault(k[:-2], [None, None])[0] = v
        elif k.endswith(".v"):
            moments.setdefault(k[:-2], [None, None])[1] = v
    opt_state = {}
    for k, (m, v) in moments.items():
        if m is None or v is None:
            raise DataError(f"{path}: incomplete optimizer state for {k!r}")
        opt_state[k] = (m, v)
    return params, opt_state


def assign_parameters(params: dict, loaded: dict):
    """Copy loaded arrays into live tensors; shapes must match exactly."""
    missing = set(params) - set(loaded)
    extra = set(loaded) - set(params)
    if missing or extra:
        raise DataError(
            f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}"
        )
    for name, p in params.items():
        arr = loaded[name]
        if arr.shape != p.data.shape:
            raise DataError(
                f"checkpoint shape mismatch for {name!r}: "
                f"{arr.shape} vs {p.data.shape}"
            )
        p.data = arr.copy()
