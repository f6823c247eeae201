"""Parameter checkpoints.

Layout (all integers big-endian)::

    magic      8 bytes  b"ACTSELCK"
    version    u32
    digest     32 bytes sha256 of the canonical spec JSON (``nn.spec_digest``)
    spec_len   u32, then spec_len bytes of spec JSON
    meta_len   u32, then meta_len bytes of metadata JSON
    count      u64 number of parameters
    blob       count little-endian f64 values, arrays in ``params.arrays()`` order
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import nn

MAGIC = b"ACTSELCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical(spec: dict) -> bytes:
    return json.dumps(spec, sort_keys=True).encode()


def dumps(params, meta: dict | None = None) -> bytes:
    spec = _canonical(params.spec_dict())
    extra = json.dumps(meta or {}, sort_keys=True).encode()
    blob = params.flat().astype("<f8").tobytes()
    return b"".join([
        MAGIC, struct.pack(">I", VERSION), hashlib.sha256(spec).digest(),
        struct.pack(">I", len(spec)), spec, struct.pack(">I", len(extra)), extra,
        struct.pack(">Q", len(blob) // 8), blob,
    ])


def loads(data: bytes):
    """Returns ``(params, meta)``."""
    view = memoryview(data)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    if take(8, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack(">I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = take(32, "digest")
    (n,) = struct.unpack(">I", take(4, "spec length"))
    spec_bytes = take(n, "spec")
    if hashlib.sha256(spec_bytes).digest() != digest:
        raise CheckpointError("spec digest mismatch")
    (n,) = struct.unpack(">I", take(4, "meta length"))
    meta = json.loads(take(n, "meta"))
    (count,) = struct.unpack(">Q", take(8, "parameter count"))
    blob = np.frombuffer(take(8 * count, "parameters"), dtype="<f8").astype(np.float64)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after parameters")
    template = nn.params_from_spec_dict(json.loads(spec_bytes))
    if template.num_params != count:
        raise CheckpointError(f"spec needs {template.num_params} parameters, blob has {count}")
    return template.unflatten(blob), meta


def save(path, params, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params, meta))
    return path


def load(path):
    return loads(Path(path).read_bytes())


def check_compatible(params, expected_spec):
    probe = nn.init_model(expected_spec, np.random.default_rng(0))
    if not nn.same_architecture(params, probe):
        raise nn.ConfigurationError(
            f"checkpoint spec {params.spec_dict()} does not match expected {probe.spec_dict()}")
