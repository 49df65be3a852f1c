"""Binary checkpoint files.

Layout (all integers little-endian uint32)::

    b"IRN1" | version | repeated records until EOF:
        name_len | name (utf-8) | d0 d1 d2 d3 | d0*d1*d2*d3 float32 values

Model checkpoints hold one record per parameter. Optimizer state uses the
same container with ``adam.m/<name>``, ``adam.v/<name>`` and ``adam.step``
records, stored next to the model file.
"""

import struct

import numpy as np

from .errors import FormatError
from .tensor import AdamState

MAGIC = b"IRN1"
VERSION = 1


def write_records(path, records):
    """Write ``(name, 4-D array)`` pairs."""
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            for name, arr in records:
                arr = np.asarray(arr)
                if arr.ndim != 4:
                    raise ValueError(f"record {name!r} must be 4-D, got shape {arr.shape}")
                raw = name.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
                f.write(struct.pack("<4I", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    except OSError as exc:
        raise FormatError(f"cannot write checkpoint {path}: {exc}") from exc


def read_records(path):
    """Return an ordered dict of name -> float32 array."""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at byte 0, expected {MAGIC!r}")
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 8, {}
    while pos < len(buf):
        start = pos
        try:
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            shape = struct.unpack_from("<4I", buf, pos)
            pos += 16
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"{path}: corrupt record header at byte {start}") from exc
        size = int(np.prod(shape)) * 4
        if pos + size > len(buf):
            raise FormatError(f"{path}: record {name!r} truncated at byte {pos}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
    return out


def save_checkpoint(path, model):
    write_records(path, [(p.name, p.data) for p in model.parameters()])


def load_checkpoint(path, model):
    """Copy checkpoint values into ``model``; any name or shape mismatch is a fault."""
    records = read_records(path)
    params = model.params
    missing = [n for n in params if n not in records]
    extra = [n for n in records if n not in params]
    if missing:
        raise FormatError(f"{path}: checkpoint lacks parameter {missing[0]!r} ({len(missing)} missing)")
    if extra:
        raise FormatError(f"{path}: checkpoint has unexpected parameter {extra[0]!r} ({len(extra)} extra)")
    for name, p in params.items():
        if records[name].shape != p.data.shape:
            raise FormatError(
                f"{path}: parameter {name!r} has shape {records[name].shape}, model expects {p.data.shape}"
            )
    for name, p in params.items():
        p.data[...] = records[name]
        p.zero_grad()
    return model


def save_optimizer(path, state):
    recs = [("adam.step", np.array(state.step, dtype=np.float32).reshape(1, 1, 1, 1))]
    for name in state.m:
        recs.append((f"adam.m/{name}", state.m[name]))
        recs.append((f"adam.v/{name}", state.v[name]))
    write_records(path, recs)


def load_optimizer(path):
    recs = read_records(path)
    if "adam.step" not in recs:
        raise FormatError(f"{path}: not an optimizer state file")
    state = AdamState({}, {}, int(recs.pop("adam.step").item()))
    for key, arr in recs.items():
        kind, _, name = key.partition("/")
        if kind == "adam.m":
            state.m[name] = arr.copy()
        elif kind == "adam.v":
            state.v[name] = arr.copy()
        else:
            raise FormatError(f"{path}: unexpected record {key!r}")
    return state
