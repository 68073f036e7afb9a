"""Task-vector extraction and the three merging strategies.

A task vector is the element-wise residual between a fine-tuned and a
base checkpoint, restricted to merge-eligible (backbone) tensors. Merging
adds scaled residuals back per layer group:

    merged[n] = base[n] + sum_v lambda_v[layer(n)] * delta_v[n]

Coefficients may be fixed values (pure numpy path) or trainable graph
leaves (`merge_on_graph`), in which case gradients flow only to the
coefficients; base and deltas stay off-tape.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import (CheckpointError, LayeredCheckpoint, load_checkpoint,
                         read_manifest, save_checkpoint)

LAMBDA_INIT = 0.5


class StaleVectorError(CheckpointError):
    """Task vector does not belong to the supplied base checkpoint."""


class MergeStrategy(enum.Enum):
    STATIC_GLOBAL = "static_global"
    ADAPTIVE_GLOBAL = "adaptive_global"
    ADAPTIVE_LAYERWISE = "adaptive_layerwise"


@dataclass
class TaskVector:
    deltas: dict[str, Tensor]
    base_fingerprint: str
    task: str
    layer_index: dict[str, int]

    @property
    def num_groups(self) -> int:
        return max(self.layer_index[n] for n in self.deltas) + 1

    def names(self) -> list[str]:
        return list(self.deltas)

    def max_abs(self) -> float:
        vals = [float(np.abs(t.data).max()) if t.size else 0.0
                for t in self.deltas.values()]
        return max(vals, default=0.0)


@dataclass
class MergeCoefficients:
    """Per task vector, one scalar (global strategies) or a length L+1
    vector (layer-wise). Initialized to 0.5 unless overridden."""

    strategy: MergeStrategy
    values: dict[str, np.ndarray] = field(default_factory=dict)
    trainable: bool = False

    @classmethod
    def init(cls, strategy: MergeStrategy, tasks: list[str], num_groups: int,
             value: float = LAMBDA_INIT) -> "MergeCoefficients":
        layerwise = strategy is MergeStrategy.ADAPTIVE_LAYERWISE
        values = {t: (np.full(num_groups, value) if layerwise
                      else np.asarray(float(value)))
                  for t in tasks}
        trainable = strategy is not MergeStrategy.STATIC_GLOBAL
        return cls(strategy, values, trainable)

    def validate(self, num_groups: int):
        for task, v in self.values.items():
            v = np.asarray(v)
            if self.strategy is MergeStrategy.ADAPTIVE_LAYERWISE:
                if v.shape != (num_groups,):
                    raise ValueError(
                        f"coefficients for {task!r} must carry exactly "
                        f"{num_groups} scalars, got shape {v.shape}")
            elif v.size != 1:
                raise ValueError(f"global strategy needs one scalar per "
                                 f"vector, got shape {v.shape} for {task!r}")

    def per_layer(self, task: str, num_groups: int) -> np.ndarray:
        """Coefficient value for each layer group (globals broadcast)."""
        v = np.asarray(self.values[task], dtype=np.float64)
        if v.shape == (num_groups,):
            return v
        return np.full(num_groups, float(v.reshape(())))


def extract_task_vector(ft: LayeredCheckpoint, base: LayeredCheckpoint
                        ) -> TaskVector:
    """deltas[n] = ft[n] - base[n] over backbone names; heads ignored."""
    ft.check_compatible(base, backbone_only=True)
    deltas = {}
    index = {}
    for name in base.backbone_names():
        deltas[name] = Tensor(ft.params[name].data - base.params[name].data,
                              name=name)
        index[name] = base.layer_index[name]
    return TaskVector(deltas, base.fingerprint, ft.meta.get("task", "task"), index)


def _check_vectors(base: LayeredCheckpoint, tvs: list[TaskVector]):
    backbone = set(base.backbone_names())
    for tv in tvs:
        if tv.base_fingerprint != base.fingerprint:
            raise StaleVectorError(
                f"task vector {tv.task!r} was extracted against base "
                f"{tv.base_fingerprint[:12]}, not {base.fingerprint[:12]}")
        if set(tv.deltas) != backbone:
            raise CheckpointError(f"task vector {tv.task!r} covers a different "
                                  f"backbone name set than the base")


def merge_layerwise(base: LayeredCheckpoint, tvs: list[TaskVector],
                    coeffs: MergeCoefficients) -> LayeredCheckpoint:
    """Fixed-value merge; heads come through from the base untouched."""
    _check_vectors(base, tvs)
    num_groups = max(i for i in base.layer_index.values()) + 1
    coeffs.validate(num_groups)
    lam = {tv.task: coeffs.per_layer(tv.task, num_groups) for tv in tvs}
    updates: dict[str, Tensor] = {}
    for name in base.backbone_names():
        acc = base.params[name].data
        layer = base.layer_index[name]
        for tv in tvs:
            acc = acc + lam[tv.task][layer] * tv.deltas[name].data
        updates[name] = Tensor(acc, name=name)
    return base.with_params(updates, task="merged")


def merge_static_global(base: LayeredCheckpoint, tvs: list[TaskVector],
                        lam: float = LAMBDA_INIT) -> LayeredCheckpoint:
    coeffs = MergeCoefficients(
        MergeStrategy.STATIC_GLOBAL,
        {tv.task: np.asarray(float(lam)) for tv in tvs}, trainable=False)
    return merge_layerwise(base, tvs, coeffs)


def merge_adaptive_global(base: LayeredCheckpoint, tvs: list[TaskVector],
                          coeffs: MergeCoefficients) -> LayeredCheckpoint:
    if coeffs.strategy is not MergeStrategy.ADAPTIVE_GLOBAL:
        raise ValueError("merge_adaptive_global requires the adaptive-global "
                         "strategy")
    return merge_layerwise(base, tvs, coeffs)


def merge_on_graph(base: LayeredCheckpoint, tvs: list[TaskVector],
                   lam: dict[str, list[Tensor] | Tensor]) -> dict[str, Tensor]:
    """Merge with coefficient tensors recorded on a graph.

    ``lam[task]`` is either a list of L+1 scalar leaves (layer-wise) or a
    single scalar leaf shared by every layer (global; its gradient then
    accumulates across layers). Returns the full parameter map: merged
    backbone plus the base's head tensors as constants.
    """
    _check_vectors(base, tvs)
    num_groups = max(i for i in base.layer_index.values()) + 1
    params: dict[str, Tensor] = {}
    for name, tensor in base.params.items():
        layer = base.layer_index[name]
        if layer < 0:
            params[name] = tensor
            continue
        acc = tensor
        for tv in tvs:
            coeff = lam[tv.task]
            scalar = coeff[layer] if isinstance(coeff, list) else coeff
            if isinstance(coeff, list) and len(coeff) != num_groups:
                raise ValueError(f"{tv.task!r} needs {num_groups} coefficient "
                                 f"tensors, got {len(coeff)}")
            acc = ad.add(acc, ad.mul(scalar, tv.deltas[name]))
        params[name] = acc
    return params


def vector_diagnostics(tv_a: TaskVector, tv_b: TaskVector) -> dict:
    """Per-layer L2 norms and cosine similarity between two vectors.
    Zero-norm layers report cosine 0.0 by convention."""
    if set(tv_a.deltas) != set(tv_b.deltas):
        raise CheckpointError("task vectors cover different name sets")
    groups = sorted({tv_a.layer_index[n] for n in tv_a.deltas})
    per_layer = []
    for layer in groups:
        names = sorted(n for n in tv_a.deltas if tv_a.layer_index[n] == layer)
        a = np.concatenate([tv_a.deltas[n].data.reshape(-1) for n in names])
        b = np.concatenate([tv_b.deltas[n].data.reshape(-1) for n in names])
        na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
        cos = float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0
        per_layer.append({"layer": layer, "norm_a": na, "norm_b": nb,
                          "cosine": cos})
    names = sorted(tv_a.deltas)
    a = np.concatenate([tv_a.deltas[n].data.reshape(-1) for n in names])
    b = np.concatenate([tv_b.deltas[n].data.reshape(-1) for n in names])
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    overall = {"norm_a": na, "norm_b": nb,
               "cosine": float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0}
    return {"per_layer": per_layer, "overall": overall}


def save_task_vector(tv: TaskVector, path: str) -> None:
    shell = LayeredCheckpoint(tv.deltas, tv.layer_index, {"task": tv.task})
    save_checkpoint(shell, path, kind="task_vector",
                    extra_meta={"base_fingerprint": tv.base_fingerprint})


def load_task_vector(path: str) -> TaskVector:
    manifest = read_manifest(path)
    if manifest.get("kind") != "task_vector":
        raise CheckpointError(f"{path!r} is not a task vector file")
    shell = load_checkpoint(path, expect_kind="task_vector")
    base_fp = manifest["meta"].get("base_fingerprint")
    if not base_fp:
        raise CheckpointError(f"{path!r} lacks a base fingerprint")
    return TaskVector(shell.params, base_fp, shell.meta.get("task", "task"),
                      shell.layer_index)
