"""Binary named-array checkpoints.

Layout, all integers unsigned 32-bit little endian::

    b"MWRN" | version | entry count | entries...
    entry = name length | UTF-8 name | rank | dims... | dtype tag | raw LE scalars

dtype tags: 0 = float32, 1 = float64, 2 = uint8 (used for the JSON metadata
entry). Entries are written in sorted name order so identical state always
produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .model import MwrnConfig, StageNetwork, build_stage, fold_batchnorm

MAGIC = b"MWRN"
VERSION = 1
META_KEY = "__meta__"
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}


class CorruptCheckpointError(ValueError):
    pass


def write_arrays(path, arrays: Dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype not in _TAG_OF:
            raise TypeError(f"cannot serialize {name} with dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        tag = _TAG_OF[arr.dtype]
        parts.append(struct.pack("<I", tag))
        parts.append(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_arrays(path) -> Dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptCheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(4) != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")
    version = u32()
    if version != VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported format version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(u32()):
        try:
            name = take(u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"{path}: entry name is not UTF-8") from exc
        rank = u32()
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        tag = u32()
        if tag not in _TAGS:
            raise CorruptCheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        dtype = _TAGS[tag]
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(count * dtype.itemsize), dtype=dtype).reshape(dims)
        out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if pos != len(buf):
        raise CorruptCheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def _meta_array(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def save_checkpoint(net: StageNetwork, optimizer_state: Optional[dict], path) -> None:
    """Write parameters, BN statistics, Adam moments and run metadata."""
    arrays = dict(net.named_arrays())
    steps = {}
    for name, p in net.params.items():
        arrays[f"adam.m.{name}"] = p.adam_m
        arrays[f"adam.v.{name}"] = p.adam_v
        steps[name] = p.step_count
    meta = {
        "stage": net.stage,
        "config": net.config.to_dict(),
        "bn_folded": net.bn_folded,
        "adam_steps": steps,
        "state": optimizer_state or {},
    }
    arrays[META_KEY] = _meta_array(meta)
    write_arrays(path, arrays)


def load_checkpoint(path) -> Tuple[StageNetwork, dict]:
    arrays = read_arrays(path)
    if META_KEY not in arrays:
        raise CorruptCheckpointError(f"{path}: missing metadata entry")
    try:
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8"))
        config = MwrnConfig.from_dict(meta["config"])
        stage = int(meta["stage"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable metadata ({exc})") from exc
    net = build_stage(stage, config, seed=0)
    if meta.get("bn_folded"):
        net = fold_batchnorm(net)
    expected = set(net.params) | set(net.buffers)
    expected |= {f"adam.{k}.{n}" for n in net.params for k in ("m", "v")}
    if set(arrays) != expected:
        missing = sorted(expected - set(arrays))[:3]
        extra = sorted(set(arrays) - expected)[:3]
        raise CorruptCheckpointError(f"{path}: entry mismatch (missing {missing}, unexpected {extra})")
    for store in (net.params, net.buffers):
        for name, t in store.items():
            _assign(t.data, arrays[name], name)
    for name, p in net.params.items():
        _assign(p.adam_m, arrays[f"adam.m.{name}"], f"adam.m.{name}")
        _assign(p.adam_v, arrays[f"adam.v.{name}"], f"adam.v.{name}")
        p.step_count = int(meta["adam_steps"].get(name, 0))
    return net, meta.get("state", {})


def _assign(dst: np.ndarray, src: np.ndarray, name: str) -> None:
    if dst.shape != src.shape:
        raise CorruptCheckpointError(f"shape mismatch for {name}: stored {src.shape}, expected {dst.shape}")
    if dst.dtype != src.dtype:
        raise CorruptCheckpointError(f"dtype mismatch for {name}: stored {src.dtype}, expected {dst.dtype}")
    dst[...] = src
