"""Aggregation over layer hidden states plus the two task heads.

The downstream feature for emotion classification is a learnable weighted
sum over the encoder block outputs H^(1)..H^(L); the front-end state
H^(0) is excluded. Raw weights are normalized with a softmax, which keeps
them on the simplex and makes the whole path invariant to adding a
constant to every raw weight.

The frame-token head reads only the final layer, keeping the two heads
structurally distinct. Decoding is greedy: per-frame argmax (ties to the
lowest token id), collapse consecutive repeats, drop blanks (token 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .encoder import HiddenStack

BLANK = 0


@dataclass
class AggregationWeights:
    """Raw scores, one per encoder block (layer 0 excluded)."""

    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.ndim != 1 or self.raw.size < 1:
            raise ShapeError("aggregation weights must be a nonempty vector")

    @property
    def num_layers(self) -> int:
        return self.raw.size

    def normalized(self) -> np.ndarray:
        return ad.softmax(ad.tensor(self.raw), axis=-1).data


def weighted_sum(stack: HiddenStack, raw: Tensor) -> Tensor:
    """H_out = sum over l=1..L of softmax(raw)_l * H^(l)."""
    if raw.data.ndim != 1 or raw.shape[0] != stack.num_layers:
        raise ShapeError(f"aggregation arity {raw.shape} does not match "
                         f"{stack.num_layers} encoder layers")
    alpha = ad.softmax(raw, axis=-1)
    out = None
    for l in range(1, stack.num_layers + 1):
        term = ad.mul(ad.gather(alpha, [l - 1]), stack.states[l])
        out = term if out is None else ad.add(out, term)
    return out


def ser_forward(h_out: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Mean-pool over frames, then linear map to class logits."""
    if h_out.shape[0] < 1:
        raise ShapeError("cannot pool zero frames")
    pooled = ad.reshape(ad.mean(h_out, axis=0), (1, h_out.shape[1]))
    logits = ad.add_bias(ad.matmul(pooled, weight), bias)
    return ad.reshape(logits, (weight.shape[1],))


def asr_forward(h_last: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-frame linear projection to vocab logits."""
    return ad.add_bias(ad.matmul(h_last, weight), bias)


def greedy_decode(frame_logits: np.ndarray) -> list[int]:
    logits = np.asarray(frame_logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError("decoder needs [frames, vocab>=2] logits")
    best = np.argmax(logits, axis=1)  # ties resolve to the lowest id
    out: list[int] = []
    prev = -1
    for token in best.tolist():
        if token != prev and token != BLANK:
            out.append(token)
        prev = token
    return out
