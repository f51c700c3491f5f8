"""GAZM checkpoint files.

Layout (little-endian): magic ``GAZM``, u32 version, u32 header length,
UTF-8 JSON header, then one record per parameter or running statistic:
u32 name length, name, u32 ndim, ndim x u32 dims, float32 data.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import NetworkConfig
from .network import Network, build_network

MAGIC = b"GAZM"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _header(net: Network, meta: dict | None) -> dict:
    return {
        "config": net.config.to_json(),
        "mode": net.mode,
        "seed": net.seed,
        "dtype": net.dtype.name,
        "n_classes": None if net.classification_head is None else net.classification_head.n_classes,
        "meta": meta or {},
    }


def checkpoint_bytes(net: Network, meta: dict | None = None) -> bytes:
    head = json.dumps(_header(net, meta), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    for name, arr in net.state().items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(net: Network, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(net, meta))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path) -> tuple[dict, dict]:
    """Parse a GAZM file into (header, name -> float32 array)."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a GAZM checkpoint (bad magic)")
    r = _Reader(buf)
    r.pos = 4
    version = r.u32("version")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    hlen = r.u32("header length")
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    tensors: dict[str, np.ndarray] = {}
    while r.pos < len(buf):
        name = r.take(r.u32("name length"), "name").decode("utf-8", errors="replace")
        ndim = r.u32(f"{name} ndim")
        if ndim > 8:
            raise CheckpointError(f"{path}: implausible ndim {ndim} for {name}")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{name} dims"))
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(r.take(4 * count, f"{name} data"), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    return header, tensors


def load_checkpoint(path) -> tuple[Network, dict]:
    """Rebuild the network stored in ``path``; returns (network, metadata)."""
    header, tensors = read_checkpoint(path)
    try:
        cfg = NetworkConfig.from_json(header["config"])
        net = build_network(cfg, header["seed"], header["n_classes"], np.dtype(header["dtype"]))
        mode = header["mode"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: header missing field {exc}") from exc
    net._apply_plan(mode)
    try:
        net.load_state(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return net, header.get("meta", {})
