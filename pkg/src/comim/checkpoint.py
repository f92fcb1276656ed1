"""Binary checkpoint format: named tensors, little-endian throughout.

Layout: magic "MIMC", version u32, tensor count u32, then per tensor a u16
name length + UTF-8 name, rank u8, one u32 per dim, a dtype tag u8, and the
raw row-major data. Tag 0 is f32 (parameters, optimizer moments); tag 1 is
u64 (RNG stream states, step counter) under the reserved "rng/" and "meta/"
prefixes. Tensors are written sorted by name so identical state always
serializes to identical bytes.
"""

import struct

import numpy as np

_MAGIC = b"MIMC"
_VERSION = 1
_TAG_TO_DTYPE = {0: "<f4", 1: "<u8"}
_KIND_TO_TAG = {"f": 0, "u": 1}


class CheckpointError(RuntimeError):
    """Unreadable checkpoint or one that does not match the model."""


def save_tensors(path, tensors):
    """Write a name -> ndarray mapping (f32 or u64 values only)."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            tag = _KIND_TO_TAG.get(arr.dtype.kind)
            if tag is None or arr.dtype.itemsize not in (4, 8):
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(struct.pack("<B", tag))
            f.write(np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[tag]).tobytes())


def load_tensors(path):
    """Read a checkpoint back to a name -> ndarray dict."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
            off += 4 * rank
            (tag,) = struct.unpack_from("<B", blob, off)
            off += 1
            if tag not in _TAG_TO_DTYPE:
                raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype tag {tag}")
            dtype = np.dtype(_TAG_TO_DTYPE[tag])
            n_items = int(np.prod(shape, dtype=np.int64))  # prod(()) == 1 covers rank 0
            nbytes = n_items * dtype.itemsize
            if off + nbytes > len(blob):
                raise CheckpointError(
                    f"{path}: truncated checkpoint inside tensor {name!r} "
                    f"(needs {nbytes} data bytes, {len(blob) - off} left)")
            data = np.frombuffer(blob, dtype=dtype, count=n_items, offset=off)
            off += nbytes
            out[name] = data.reshape(shape).copy()
        if off != len(blob):
            raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes after {count} tensors")
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    return out


def check_compatible(path, found, expected_shapes):
    """Raise a CheckpointError naming every missing/unexpected/mismatched tensor."""
    problems = []
    for name in sorted(expected_shapes.keys() - found.keys()):
        problems.append(f"missing {name}")
    for name in sorted(found.keys() - expected_shapes.keys()):
        problems.append(f"unexpected {name}")
    for name in sorted(expected_shapes.keys() & found.keys()):
        if tuple(found[name].shape) != tuple(expected_shapes[name]):
            problems.append(
                f"shape mismatch {name}: checkpoint {tuple(found[name].shape)} vs model {tuple(expected_shapes[name])}"
            )
    if problems:
        raise CheckpointError(f"{path} does not match the model: " + "; ".join(problems))
