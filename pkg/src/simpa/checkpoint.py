"""Binary checkpoints for SImPa and MAML-baseline training state.

Layout (all integers little-endian)::

    magic        8 bytes  b"SIMPACK\\0"
    version      uint32
    header_len   uint32
    header       header_len bytes of UTF-8 JSON:
                 {"kind", "iteration", "adam_t", "config", "blocks": [name, ...]}
    header_crc   uint32   CRC-32 of the header bytes
    blocks, in header order, each:
        name_len uint16, name bytes, ndim uint32, dims uint64 * ndim,
        data     float64 little-endian, C order
    payload_crc  uint32   CRC-32 of all block bytes

Nothing may follow the payload CRC. Files are written to a temporary name
and renamed, so a checkpoint is either complete or absent.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .maml import MamlState
from .meta import MetaState
from .optim import AdamState

MAGIC = b"SIMPACK\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode_block(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def _state_blocks(state) -> tuple[str, dict, dict[str, np.ndarray]]:
    if isinstance(state, MetaState):
        adam_t = {tag: getattr(state, f"adam_{tag}").t for tag in ("psi", "enc", "omega")}
        return "simpa", adam_t, state.arrays()
    if isinstance(state, MamlState):
        return "maml", {"theta": state.adam.t}, state.arrays()
    raise TypeError(f"cannot checkpoint {type(state).__name__}")


def encode_checkpoint(state, config: dict | None = None) -> bytes:
    kind, adam_t, blocks = _state_blocks(state)
    header = json.dumps(
        {"kind": kind, "iteration": int(state.iteration), "adam_t": adam_t, "config": config or {}, "blocks": list(blocks)},
        sort_keys=True,
    ).encode()
    payload = b"".join(_encode_block(n, a) for n, a in blocks.items())
    return b"".join([
        MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", zlib.crc32(header)),
        payload, struct.pack("<I", zlib.crc32(payload)),
    ])


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, state, config: dict | None = None) -> None:
    _atomic_write(Path(path), encode_checkpoint(state, config))


def decode_checkpoint(data: bytes) -> tuple[object, dict, dict]:
    """Return (state, config, header). Raises CheckpointError on any
    structural problem; no partially decoded state is ever returned."""
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 16
    if len(data) < pos + hlen + 4:
        raise CheckpointError("truncated checkpoint header")
    header_bytes = data[pos : pos + hlen]
    (crc,) = struct.unpack_from("<I", data, pos + hlen)
    if zlib.crc32(header_bytes) != crc:
        raise CheckpointError(f"checkpoint version {version}: header checksum mismatch")
    try:
        header = json.loads(header_bytes)
    except ValueError:
        raise CheckpointError(f"checkpoint version {version}: header is not valid JSON") from None
    pos += hlen + 4
    if len(data) < pos + 4:
        raise CheckpointError("truncated checkpoint payload")
    payload, (pcrc,) = data[pos:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != pcrc:
        raise CheckpointError("payload checksum mismatch (truncated or corrupted file)")

    blocks: dict[str, np.ndarray] = {}
    off = 0
    try:
        for expected in header["blocks"]:
            (nlen,) = struct.unpack_from("<H", payload, off)
            name = payload[off + 2 : off + 2 + nlen].decode()
            off += 2 + nlen
            if name != expected:
                raise CheckpointError(f"block {name!r} out of order (expected {expected!r})")
            (ndim,) = struct.unpack_from("<I", payload, off)
            shape = struct.unpack_from(f"<{ndim}Q", payload, off + 4)
            off += 4 + 8 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            if off + 8 * count > len(payload):
                raise CheckpointError(f"block {name!r} truncated")
            blocks[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
            off += 8 * count
    except struct.error:
        raise CheckpointError("truncated block table") from None
    if off != len(payload):
        raise CheckpointError("trailing bytes after the last block")

    it, adam_t = int(header["iteration"]), header["adam_t"]
    if header["kind"] == "simpa":
        ad = lambda tag: AdamState(blocks[f"adam_{tag}.m"], blocks[f"adam_{tag}.v"], int(adam_t[tag]))
        state = MetaState(blocks["psi"], blocks["enc"], blocks["omega0"], ad("psi"), ad("enc"), ad("omega"), it)
    elif header["kind"] == "maml":
        state = MamlState(blocks["theta"], AdamState(blocks["adam.m"], blocks["adam.v"], int(adam_t["theta"])), it)
    else:
        raise CheckpointError(f"unknown checkpoint kind {header['kind']!r}")
    return state, header.get("config", {}), header


def load_checkpoint(path) -> tuple[object, dict, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def describe(path) -> dict:
    """Summary of a checkpoint without materialising state arrays elsewhere."""
    state, config, header = load_checkpoint(path)
    arrays = state.arrays()
    return {
        "path": str(path),
        "version": VERSION,
        "kind": header["kind"],
        "iteration": header["iteration"],
        "blocks": {n: list(a.shape) for n, a in arrays.items()},
        "n_params": int(sum(a.size for n, a in arrays.items() if "adam" not in n)),
        "config_name": config.get("name", ""),
    }
