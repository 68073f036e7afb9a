"""Small bidirectional transformer encoder exposing every layer's hidden
states.

Front-end: 1-D conv over input frames plus a learned positional embedding
sliced to the sequence. Blocks are pre-norm multi-head self-attention and
pre-norm FFN, each with a residual connection. No dropout anywhere;
forward is a pure function of (features, weights).

Works identically on plain checkpoint tensors and on graph-bound merged
views, so the same code path serves evaluation and coefficient training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .checkpoint import ModelConfig


@dataclass
class HiddenStack:
    """H^(0)..H^(L); H^(0) is the front-end output."""

    states: list[Tensor]

    def __post_init__(self):
        if len(self.states) < 2:
            raise ShapeError("hidden stack needs the front-end plus >= 1 block")
        shape = self.states[0].shape
        for h in self.states:
            if h.shape != shape:
                raise ShapeError("hidden states disagree on [frames, dim]")

    @property
    def num_layers(self) -> int:
        return len(self.states) - 1

    @property
    def frames(self) -> int:
        return self.states[0].shape[0]


def frontend(features: Tensor, params: dict[str, Tensor], cfg: ModelConfig
             ) -> Tensor:
    """conv + positional embedding; frames = (frames_in - kernel)//stride + 1."""
    frames_in = features.shape[0]
    if frames_in < cfg.kernel:
        raise ShapeError(f"sequence of {frames_in} frames is shorter than "
                         f"kernel {cfg.kernel}")
    h = ad.conv1d(features, params["frontend.conv.weight"], stride=cfg.stride)
    h = ad.add_bias(h, params["frontend.conv.bias"])
    frames = h.shape[0]
    if frames > cfg.max_frames:
        raise ShapeError(f"{frames} frames exceed positional table "
                         f"({cfg.max_frames})")
    pos = ad.gather(params["frontend.pos.weight"], list(range(frames)))
    return ad.add(h, pos)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x, w), b)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    frames, d = x.shape
    hd = d // num_heads
    return ad.transpose(ad.reshape(x, (frames, num_heads, hd)), (1, 0, 2))


def _head(x: Tensor, i: int) -> Tensor:
    _, frames, hd = x.shape
    return ad.reshape(ad.gather(x, [i]), (frames, hd))


def attention(h: Tensor, p: dict[str, Tensor], prefix: str, num_heads: int
              ) -> Tensor:
    a = ad.layer_norm(h, p[f"{prefix}.norm.gamma"], p[f"{prefix}.norm.beta"])
    q = _split_heads(_linear(a, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), num_heads)
    k = _split_heads(_linear(a, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), num_heads)
    v = _split_heads(_linear(a, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), num_heads)
    hd = h.shape[1] // num_heads
    inv_sqrt = 1.0 / math.sqrt(hd)
    mixed = []
    for i in range(num_heads):
        scores = ad.scale(ad.matmul(_head(q, i), ad.transpose(_head(k, i))),
                          inv_sqrt)
        mixed.append(ad.matmul(ad.softmax(scores, axis=-1), _head(v, i)))
    joined = ad.concat(mixed, axis=1)
    return _linear(joined, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def transformer_block(h: Tensor, params: dict[str, Tensor], block: int,
                      num_heads: int) -> Tensor:
    p = f"block{block}"
    h = ad.add(h, attention(h, params, f"{p}.attn", num_heads))
    f = ad.layer_norm(h, params[f"{p}.ffn.norm.gamma"],
                      params[f"{p}.ffn.norm.beta"])
    f = ad.gelu(_linear(f, params[f"{p}.ffn.w1"], params[f"{p}.ffn.b1"]))
    return ad.add(h, _linear(f, params[f"{p}.ffn.w2"], params[f"{p}.ffn.b2"]))


def encode(features: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
           check_finite: bool = True) -> HiddenStack:
    """Run front-end and all blocks, collecting H^(0)..H^(L)."""
    states = [frontend(features, params, cfg)]
    for block in range(1, cfg.num_layers + 1):
        states.append(transformer_block(states[-1], params, block,
                                        cfg.num_heads))
    if check_finite:
        for l, h in enumerate(states):
            if not np.all(np.isfinite(h.data)):
                raise FloatingPointError(
                    f"non-finite hidden state at layer {l}; at this scale "
                    f"that indicates a config error (e.g. lr too high)")
    return HiddenStack(states)
