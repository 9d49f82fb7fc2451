"""Binary parameter checkpoints.

Layout: magic ``TSVC``, version u32, header length u32, then a UTF-8 JSON
header with run metadata plus a tensor manifest (name, shape, offset), then
the raw float64 little-endian buffers in manifest order. Serialization is
deterministic, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import ParseError
from .fusion import MMParams, init_mm_params
from .model import ModelConfig

MAGIC = b"TSVC"
VERSION = 1


def save_checkpoint(params: MMParams, cfg: ModelConfig, meta: dict, path: str) -> None:
    """Write parameters plus metadata; ``meta`` must be JSON-serializable."""
    named = params.named()
    manifest = []
    offset = 0
    buffers = []
    for name, t in named.items():
        buf = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        buffers.append(buf)
        offset += len(buf)

    header = {
        "meta": dict(meta),
        "mode": params.mode,
        "model": cfg.__dict__,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header_bytes)))
        f.write(header_bytes)
        for buf in buffers:
            f.write(buf)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[MMParams, ModelConfig, dict]:
    """Rebuild parameters from a checkpoint; returns (params, config, meta)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ParseError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(blob) < 12:
        raise ParseError("truncated header", offset=len(blob))
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4)
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"unreadable header: {e}", offset=12) from e

    cfg = ModelConfig(**header["model"])
    meta = header["meta"]
    params = init_mm_params(header["mode"], cfg, meta["channels"], seed=0)
    named = params.named()

    expected = {m["name"] for m in header["tensors"]}
    if expected != set(named):
        missing = sorted(set(named) - expected)
        extra = sorted(expected - set(named))
        raise ParseError(f"tensor manifest mismatch: missing={missing}, extra={extra}")

    base = 12 + header_len
    for entry in header["tensors"]:
        t = named[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != t.shape:
            raise ParseError(
                f"shape mismatch for {entry['name']}: file {shape} vs model {t.shape}"
            )
        start = base + entry["offset"]
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if start + nbytes > len(blob):
            raise ParseError(f"truncated buffer for {entry['name']}", offset=start)
        t.data = np.frombuffer(blob[start : start + nbytes], dtype="<f8").reshape(shape).copy()
    return params, cfg, meta
