"""Binary volume and checkpoint formats, dataset manifests, JSON/CSV reports.

Volume file layout (little-endian throughout)::

    b"VPDVOL1"        7-byte magic
    uint8             dtype code (1 = float32, 2 = int32)
    uint32 x 4        extents
    payload           4 * prod(extents) bytes, C order

Checkpoint layout::

    b"VPDCKPT1"       8-byte magic
    uint32 + bytes    UTF-8 JSON configuration
    uint32            tensor count
    per tensor        uint16 name length, name, uint8 ndim, uint32 x ndim extents,
                      float32 payload
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from ..synth import SceneConfig, SceneSample, generate_scene
from ..volume import DepthMap, HypothesisPlanes

VOLUME_MAGIC = b"VPDVOL1"
CHECKPOINT_MAGIC = b"VPDCKPT1"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<i4")}
_CODES = {np.dtype("float32"): 1, np.dtype("int32"): 2}
DATA_ROOT_ENV = "VPD_DATA_ROOT"


class FormatError(ValueError):
    pass


def data_root(default: str | os.PathLike = "data") -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, default))


# -- volumes ---------------------------------------------------------------

def encode_volume(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise FormatError(f"volume files hold rank-4 arrays, got shape {arr.shape}")
    code = _CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32 or int32")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return VOLUME_MAGIC + struct.pack("<B4I", code, *arr.shape) + payload


def decode_volume(buf: bytes) -> np.ndarray:
    head = len(VOLUME_MAGIC) + struct.calcsize("<B4I")
    if buf[:len(VOLUME_MAGIC)] != VOLUME_MAGIC:
        raise FormatError("not a volume file (bad magic)")
    if len(buf) < head:
        raise FormatError("truncated volume header")
    code, *ext = struct.unpack_from("<B4I", buf, len(VOLUME_MAGIC))
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    n = int(np.prod(ext, dtype=np.int64))
    if len(buf) - head != 4 * n:
        raise FormatError(f"payload is {len(buf) - head} bytes, expected {4 * n}")
    arr = np.frombuffer(buf, dtype=_DTYPES[code], count=n, offset=head).reshape(ext)
    return arr.astype(arr.dtype.newbyteorder("="))  # native, writable copy


def write_volume(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_volume(arr))


def read_volume(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes())


# -- checkpoints -----------------------------------------------------------

def encode_checkpoint(tensors: Iterable[tuple[str, np.ndarray]], config: dict) -> bytes:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    cfg = json.dumps(config, sort_keys=True).encode()
    out.write(struct.pack("<I", len(cfg)))
    out.write(cfg)
    items = [(name, np.asarray(a)) for name, a in tensors]
    out.write(struct.pack("<I", len(items)))
    for name, arr in items:
        key = name.encode()
        out.write(struct.pack("<H", len(key)))
        out.write(key)
        out.write(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    try:
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        config = json.loads(buf[pos:pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + klen].decode()
            pos += klen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise FormatError(f"tensor {name!r} runs past the end of the file")
            tensors[name] = np.frombuffer(buf, "<f4", size, pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after the last tensor")
    return tensors, config


def save_checkpoint(path, tensors, config: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, config))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())


# -- scenes and manifests --------------------------------------------------

MANIFEST = "manifest.json"


def save_scene(directory, sample: SceneSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    h, w = sample.gt_depth.shape
    write_volume(d / "depth.vol", sample.gt_depth.values.astype(np.float32).reshape(1, 1, h, w))
    write_volume(d / "mask.vol", sample.gt_depth.mask.astype(np.int32).reshape(1, 1, h, w))
    write_volume(d / "cost.vol", sample.coarse_cost.astype(np.float32))
    write_volume(d / "corrupted.vol", sample.corrupted.astype(np.int32).reshape(1, 1, h, w))
    for i, c in enumerate(sample.contexts):
        write_volume(d / f"context{i}.vol", c.astype(np.float32)[None])
    write_volume(d / "semantic.vol", sample.semantic_grid.astype(np.int32)[None])


def load_scene(directory, planes: HypothesisPlanes) -> SceneSample:
    d = Path(directory)
    depth = read_volume(d / "depth.vol")[0, 0]
    mask = read_volume(d / "mask.vol")[0, 0].astype(bool)
    contexts = []
    i = 0
    while (d / f"context{i}.vol").exists():
        contexts.append(read_volume(d / f"context{i}.vol")[0])
        i += 1
    return SceneSample(DepthMap(depth, mask), read_volume(d / "cost.vol"), contexts,
                       read_volume(d / "semantic.vol")[0], read_volume(d / "corrupted.vol")[0, 0].astype(bool),
                       planes)


def build_dataset(root, config: SceneConfig, train_seeds: list[int], eval_seeds: list[int]) -> Path:
    """Generate and store every scene, then write the manifest; returns its path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, seeds in (("train", train_seeds), ("eval", eval_seeds)):
        for s in seeds:
            rel = f"{split}/{s:06d}"
            save_scene(root / rel, generate_scene(config.with_seed(s)))
            entries.append({"seed": int(s), "split": split, "path": rel})
    manifest = {"config": config.to_dict(), "config_digest": config.digest(), "samples": entries}
    path = root / MANIFEST
    write_json(path, manifest)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    m = json.loads(path.read_text())
    m["_root"] = str(path.parent)
    return m


def manifest_scene_config(manifest: dict) -> SceneConfig:
    return SceneConfig(**manifest["config"])


def load_split(manifest: dict, split: str) -> list[SceneSample]:
    planes = manifest_scene_config(manifest).planes
    root = Path(manifest["_root"])
    return [load_scene(root / e["path"], planes) for e in manifest["samples"] if e["split"] == split]


# -- reports ---------------------------------------------------------------

def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
