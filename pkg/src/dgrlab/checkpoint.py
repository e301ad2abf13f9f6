"""Binary weight checkpoints.

Layout: magic ``DGR1``; u32 length + UTF-8 JSON config fingerprint;
u32 parameter count; then per parameter: u32 name length, name bytes,
u32 rank, u32 per-dim sizes, and the row-major little-endian float64
payload. Everything is read and validated before any model state changes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DGR1"


class CheckpointError(RuntimeError):
    pass


def _write_u32(fh, value: int) -> None:
    fh.write(struct.pack("<I", value))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint {self.path}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def save_checkpoint(params: dict[str, np.ndarray], fingerprint: dict,
                    path: str | Path) -> None:
    """Write named float64 arrays plus the config fingerprint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(fingerprint, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_u32(fh, len(blob))
        fh.write(blob)
        _write_u32(fh, len(params))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            encoded = name.encode("utf-8")
            _write_u32(fh, len(encoded))
            fh.write(encoded)
            _write_u32(fh, arr.ndim)
            for dim in arr.shape:
                _write_u32(fh, dim)
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (params, fingerprint); any malformation raises CheckpointError."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    try:
        fingerprint = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt fingerprint: {exc}") from exc
    count = r.u32()
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        n_vals = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * n_vals), dtype="<f8").reshape(shape)
        params[name] = arr.astype(np.float64)
    if r.pos != len(raw):
        raise CheckpointError(f"{path} has {len(raw) - r.pos} trailing bytes")
    return params, fingerprint


def check_fingerprint(stored: dict, expected: dict, path) -> None:
    """Every key the checkpoint recorded must match the active config."""
    mismatched = {k: (v, expected.get(k)) for k, v in stored.items()
                  if expected.get(k) != v}
    if mismatched:
        detail = ", ".join(f"{k}: checkpoint={a!r} config={b!r}"
                           for k, (a, b) in sorted(mismatched.items()))
        raise CheckpointError(f"checkpoint {path} does not fit this config ({detail})")
