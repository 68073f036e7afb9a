"""Layered parameter store with a manifest + binary blob container.

Parameters are partitioned into merge groups: index 0 is the front-end
(conv + positional), 1..L are the encoder blocks, and -1 marks the
head/task group that merging never touches. A checkpoint's fingerprint
is a content hash over every tensor, so "unchanged" is checkable byte
for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .rng import Rng

FORMAT_VERSION = 1
_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}


class CheckpointError(Exception):
    """Container-level failure (I/O, compatibility)."""


class FormatError(CheckpointError):
    """Manifest malformed or dtype unknown."""


class CorruptionError(CheckpointError):
    """Stored bytes do not match their manifest."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 6
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    input_dim: int = 16
    kernel: int = 4
    stride: int = 2
    vocab_size: int = 12
    num_classes: int = 8
    max_frames: int = 64

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (blank + 1)")
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """All parameter names with shapes, in partition order (front-end,
    blocks, heads)."""
    d, f = cfg.model_dim, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "frontend.conv.weight": (cfg.kernel, cfg.input_dim, d),
        "frontend.conv.bias": (d,),
        "frontend.pos.weight": (cfg.max_frames, d),
    }
    for i in range(1, cfg.num_layers + 1):
        p = f"block{i}"
        shapes[f"{p}.attn.norm.gamma"] = (d,)
        shapes[f"{p}.attn.norm.beta"] = (d,)
        for m in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{m}"] = (d, d)
        for m in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{m}"] = (d,)
        shapes[f"{p}.ffn.norm.gamma"] = (d,)
        shapes[f"{p}.ffn.norm.beta"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, f)
        shapes[f"{p}.ffn.b1"] = (f,)
        shapes[f"{p}.ffn.w2"] = (f, d)
        shapes[f"{p}.ffn.b2"] = (d,)
    shapes["head.ser.weight"] = (d, cfg.num_classes)
    shapes["head.ser.bias"] = (cfg.num_classes,)
    shapes["head.asr.weight"] = (d, cfg.vocab_size)
    shapes["head.asr.bias"] = (cfg.vocab_size,)
    shapes["head.agg.raw"] = (cfg.num_layers,)
    return shapes


def partition_layers(cfg: ModelConfig) -> dict[str, int]:
    """Total map name -> merge group: 0 front-end, 1..L blocks, -1 heads."""
    index: dict[str, int] = {}
    for name in parameter_shapes(cfg):
        if name.startswith("frontend."):
            index[name] = 0
        elif name.startswith("block"):
            index[name] = int(name[5:name.index(".")])
        else:
            index[name] = -1
    return index


def _fingerprint(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


class LayeredCheckpoint:
    """Ordered name -> Tensor map plus the layer partition and metadata."""

    def __init__(self, params: dict[str, Tensor], layer_index: dict[str, int],
                 meta: dict | None = None):
        for name in params:
            if name not in layer_index:
                raise CheckpointError(f"parameter {name!r} missing a layer index")
        self.params = dict(params)
        self.layer_index = dict(layer_index)
        self.meta = dict(meta or {})
        self.meta.setdefault("task", "base")
        self.meta["fingerprint"] = _fingerprint(self.params)

    @property
    def fingerprint(self) -> str:
        return self.meta["fingerprint"]

    @property
    def task(self) -> str:
        return self.meta["task"]

    def names(self) -> Iterator[str]:
        return iter(self.params)

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if self.layer_index[n] >= 0]

    def head_names(self) -> list[str]:
        return [n for n in self.params if self.layer_index[n] < 0]

    def group_fingerprint(self, names: list[str]) -> str:
        return _fingerprint({n: self.params[n] for n in names})

    def check_compatible(self, other: "LayeredCheckpoint", backbone_only: bool = True):
        """Merge compatibility: same names, shapes, and layer map."""
        mine = self.backbone_names() if backbone_only else list(self.params)
        theirs = other.backbone_names() if backbone_only else list(other.params)
        if mine != theirs:
            offender = next(iter(set(mine) ^ set(theirs)), "(ordering)")
            raise CheckpointError(f"checkpoints not merge-compatible: name set "
                                  f"differs at {offender!r}")
        for n in mine:
            if self.params[n].shape != other.params[n].shape:
                raise CheckpointError(
                    f"checkpoints not merge-compatible: {n!r} has shape "
                    f"{self.params[n].shape} vs {other.params[n].shape}")
            if self.layer_index[n] != other.layer_index[n]:
                raise CheckpointError(f"checkpoints not merge-compatible: {n!r} "
                                      f"layer index differs")

    def with_params(self, updates: dict[str, Tensor], task: str | None = None
                    ) -> "LayeredCheckpoint":
        """Functional update; fingerprint is recomputed by the constructor."""
        params = dict(self.params)
        for n, t in updates.items():
            if n not in params:
                raise CheckpointError(f"unknown parameter {n!r}")
            if t.shape != params[n].shape:
                raise CheckpointError(f"shape mismatch for {n!r}: "
                                      f"{t.shape} vs {params[n].shape}")
            params[n] = t
        meta = dict(self.meta)
        if task is not None:
            meta["task"] = task
        return LayeredCheckpoint(params, self.layer_index, meta)


def init_checkpoint(cfg: ModelConfig, seed: int, task: str = "base"
                    ) -> LayeredCheckpoint:
    """Seeded initialization. Each parameter draws from its own named
    stream, so e.g. the SER head init is identical across procedures that
    share a seed."""
    root = Rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        r = root.derive(name)
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gamma",):
            value = np.ones(shape)
        elif leaf in ("beta",) or leaf.startswith("b") or leaf == "raw":
            value = np.zeros(shape)
        elif name == "frontend.pos.weight":
            value = r.normal(shape) * 0.02
        else:
            fan_in = int(np.prod(shape[:-1]))
            value = r.normal(shape) / np.sqrt(fan_in)
        params[name] = Tensor(value, name=name)
    meta = {"task": task, "config": cfg.to_dict(), "config_hash": cfg.config_hash()}
    return LayeredCheckpoint(params, partition_layers(cfg), meta)


def _paths(path: str) -> tuple[str, str]:
    for suffix in (".manifest.json", ".bin"):
        if path.endswith(suffix):
            path = path[:-len(suffix)]
    return path + ".manifest.json", path + ".bin"


def save_checkpoint(ckpt: LayeredCheckpoint, path: str, kind: str = "checkpoint",
                    extra_meta: dict | None = None) -> None:
    """Write `<path>.manifest.json` + `<path>.bin`. Byte-stable for
    identical content."""
    manifest_path, blob_path = _paths(path)
    os.makedirs(os.path.dirname(os.path.abspath(manifest_path)), exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, t in ckpt.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({
            "name": name,
            "shape": list(t.shape),
            "layer": ckpt.layer_index[name],
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    meta = {
        "task": ckpt.meta.get("task", "base"),
        "config_hash": ckpt.meta.get("config_hash", ""),
        "fingerprint": ckpt.fingerprint,
    }
    for key in ("config",):
        if key in ckpt.meta:
            meta[key] = ckpt.meta[key]
    if extra_meta:
        meta.update(extra_meta)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "dtype": "f64",
        "tensors": entries,
        "meta": meta,
    }
    try:
        with open(manifest_path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        with open(blob_path, "wb") as f:
            f.write(b"".join(chunks))
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint at {path!r}: {e}") from e


def read_manifest(path: str) -> dict:
    manifest_path, _ = _paths(path)
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except OSError as e:
        raise CheckpointError(f"cannot read manifest at {manifest_path!r}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest {manifest_path!r} is not valid JSON: {e}") from e
    for field in ("format_version", "dtype", "tensors", "meta"):
        if field not in manifest:
            raise FormatError(f"manifest {manifest_path!r} missing field {field!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {manifest['format_version']}")
    if manifest["dtype"] not in _DTYPES:
        raise FormatError(f"unknown dtype {manifest['dtype']!r}")
    return manifest


def load_checkpoint(path: str, expect_kind: str | None = "checkpoint"
                    ) -> LayeredCheckpoint:
    """Restore exact tensors; verifies blob length and fingerprint."""
    manifest_path, blob_path = _paths(path)
    manifest = read_manifest(path)
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise FormatError(f"{manifest_path!r} holds kind "
                          f"{manifest.get('kind')!r}, expected {expect_kind!r}")
    dtype = _DTYPES[manifest["dtype"]]
    try:
        with open(blob_path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read blob at {blob_path!r}: {e}") from e
    params: dict[str, Tensor] = {}
    layer_index: dict[str, int] = {}
    total = 0
    for ent in manifest["tensors"]:
        shape = tuple(int(s) for s in ent["shape"])
        nbytes = int(ent["nbytes"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if count * dtype.itemsize != nbytes:
            raise CorruptionError(f"tensor {ent['name']!r}: shape {shape} "
                                  f"inconsistent with nbytes {nbytes}")
        start = int(ent["offset"])
        if start + nbytes > len(blob):
            raise CorruptionError(f"tensor {ent['name']!r} extends past blob end")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start)
        params[ent["name"]] = Tensor(arr.astype(np.float64).reshape(shape),
                                     name=ent["name"])
        layer_index[ent["name"]] = int(ent["layer"])
        total += nbytes
    if total != len(blob):
        raise CorruptionError(f"blob length {len(blob)} != manifest total {total}")
    ckpt = LayeredCheckpoint(params, layer_index, manifest["meta"])
    stated = manifest["meta"].get("fingerprint")
    if manifest["dtype"] == "f64" and stated != ckpt.fingerprint:
        raise CorruptionError(f"fingerprint mismatch for {path!r}: manifest says "
                              f"{stated}, content hashes to {ckpt.fingerprint}")
    return ckpt
