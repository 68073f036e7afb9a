"""Front-end arithmetic, block algebra (residual identity, equivariance,
single-token attention), and layer locality of merged coefficients."""

from __future__ import annotations

import numpy as np
import pytest

from layermerge import autodiff as ad
from layermerge.autodiff import ShapeError, Tensor
from layermerge.checkpoint import ModelConfig, init_checkpoint
from layermerge.encoder import encode, frontend, transformer_block
from layermerge.rng import Rng
from layermerge.taskvector import (MergeCoefficients, MergeStrategy,
                                   extract_task_vector, merge_layerwise)

CFG = ModelConfig(num_layers=2, model_dim=8, num_heads=2, ffn_dim=16,
                  input_dim=4, kernel=2, stride=1, vocab_size=5,
                  num_classes=3, max_frames=16)


def features(frames: int, seed: int = 0, dim: int = CFG.input_dim) -> Tensor:
    return ad.tensor(Rng(seed).derive("feat").normal((frames, dim)))


@pytest.fixture
def params():
    return dict(init_checkpoint(CFG, seed=4).params)


def zero_out(params: dict, names: list[str]) -> dict:
    out = dict(params)
    for n in names:
        out[n] = Tensor(np.zeros(params[n].shape))
    return out


def test_frontend_conv_arithmetic():
    cfg = ModelConfig(num_layers=1, model_dim=8, num_heads=2, ffn_dim=16,
                      input_dim=4, kernel=4, stride=2, vocab_size=5,
                      num_classes=3, max_frames=16)
    p = dict(init_checkpoint(cfg, seed=1).params)
    out = frontend(features(10), p, cfg)
    assert out.shape == (4, cfg.model_dim)  # floor((10-4)/2)+1


def test_frontend_identity_kernel():
    cfg = ModelConfig(num_layers=1, model_dim=4, num_heads=2, ffn_dim=8,
                      input_dim=4, kernel=1, stride=1, vocab_size=5,
                      num_classes=3, max_frames=16)
    p = dict(init_checkpoint(cfg, seed=1).params)
    p["frontend.conv.weight"] = Tensor(np.eye(4).reshape(1, 4, 4))
    p["frontend.conv.bias"] = Tensor(np.zeros(4))
    x = features(6, dim=4)
    out = frontend(x, p, cfg)
    want = x.data + p["frontend.pos.weight"].data[:6]
    np.testing.assert_allclose(out.data, want, atol=1e-15)


def test_frontend_zero_everything_gives_zero(params):
    p = zero_out(params, ["frontend.conv.weight", "frontend.conv.bias",
                          "frontend.pos.weight"])
    out = frontend(ad.tensor(np.zeros((5, CFG.input_dim))), p, CFG)
    np.testing.assert_array_equal(out.data, 0.0)


def test_frontend_rejects_short_sequence(params):
    with pytest.raises(ShapeError, match="kernel"):
        frontend(features(1), params, CFG)


def test_frontend_rejects_overlong_sequence(params):
    with pytest.raises(ShapeError, match="positional"):
        frontend(features(40), params, CFG)


def test_residual_identity(params):
    """Zeroing the block output projections makes encode the identity on
    the front-end state."""
    names = []
    for i in (1, 2):
        names += [f"block{i}.attn.wo", f"block{i}.attn.bo",
                  f"block{i}.ffn.w2", f"block{i}.ffn.b2"]
    stack = encode(features(7), zero_out(params, names), CFG)
    for h in stack.states[1:]:
        np.testing.assert_array_equal(h.data, stack.states[0].data)


def test_single_frame_single_head_closed_form():
    cfg = ModelConfig(num_layers=1, model_dim=4, num_heads=1, ffn_dim=8,
                      input_dim=4, kernel=1, stride=1, vocab_size=5,
                      num_classes=3, max_frames=8)
    p = dict(init_checkpoint(cfg, seed=9).params)
    p = zero_out(p, ["block1.ffn.w2", "block1.ffn.b2"])  # isolate attention
    h = Rng(3).normal((1, 4))
    out = transformer_block(ad.tensor(h), p, 1, cfg.num_heads)

    def norm(x, g, b):
        mu, var = x.mean(), x.var()
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    a = norm(h[0], p["block1.attn.norm.gamma"].data,
             p["block1.attn.norm.beta"].data)
    v = a @ p["block1.attn.wv"].data + p["block1.attn.bv"].data
    want = h[0] + v @ p["block1.attn.wo"].data + p["block1.attn.bo"].data
    np.testing.assert_allclose(out.data[0], want, atol=1e-12)


def test_block_permutation_equivariance(params):
    """With no positional information inside a block, permuting frames
    permutes the outputs identically."""
    h = Rng(5).normal((6, CFG.model_dim))
    perm = Rng(6).permutation(6)
    out = transformer_block(ad.tensor(h), params, 1, CFG.num_heads)
    out_perm = transformer_block(ad.tensor(h[perm]), params, 1, CFG.num_heads)
    np.testing.assert_allclose(out_perm.data, out.data[perm], atol=1e-12)


def test_encode_stack_shape_and_determinism(params):
    x = features(7)
    stack = encode(x, params, CFG)
    assert stack.num_layers == CFG.num_layers
    assert len(stack.states) == CFG.num_layers + 1
    again = encode(x, params, CFG)
    for a, b in zip(stack.states, again.states):
        np.testing.assert_array_equal(a.data, b.data)


def test_encode_minimal_depth():
    cfg = ModelConfig(num_layers=1, model_dim=8, num_heads=2, ffn_dim=16,
                      input_dim=4, kernel=2, stride=1, vocab_size=5,
                      num_classes=3, max_frames=16)
    stack = encode(features(5), dict(init_checkpoint(cfg, seed=2).params), cfg)
    assert len(stack.states) == 2


def test_encode_flags_non_finite(params):
    p = dict(params)
    bad = params["block1.ffn.w1"].data.copy()
    bad[0, 0] = np.inf
    p["block1.ffn.w1"] = Tensor(bad)
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
        encode(features(5), p, CFG)


def test_merged_coefficient_locality():
    """Perturbing the coefficient at layer l changes H^(k) only for k >= l."""
    base = init_checkpoint(CFG, seed=11)
    ft = base.with_params(
        {n: Tensor(base.params[n].data
                   + 0.05 * Rng(77).derive(n).normal(base.params[n].shape))
         for n in base.backbone_names()}, task="ft")
    tv = extract_task_vector(ft, base)
    x = features(6)

    def stack_for(vals):
        coeffs = MergeCoefficients(MergeStrategy.ADAPTIVE_LAYERWISE,
                                   {"ft": vals}, trainable=False)
        merged = merge_layerwise(base, [tv], coeffs)
        return encode(x, dict(merged.params), CFG)

    ref_vals = np.full(CFG.num_layers + 1, 0.5)
    ref = stack_for(ref_vals)
    for l in range(CFG.num_layers + 1):
        bumped = ref_vals.copy()
        bumped[l] += 0.25
        got = stack_for(bumped)
        for k in range(CFG.num_layers + 1):
            same = np.array_equal(got.states[k].data, ref.states[k].data)
            assert same == (k < l), f"perturb l={l}: H^({k}) same={same}"


def test_encode_backbone_gradients_flow(params):
    g = ad.Graph()
    leaves = {n: g.leaf(t.data, trainable=not n.startswith("head."))
              for n, t in params.items()}
    stack = encode(features(5), leaves, CFG)
    loss = ad.mean(ad.mul(stack.states[-1], stack.states[-1]))
    grads = ad.backward(loss)
    for name in ("frontend.conv.weight", "block1.attn.wq", "block2.ffn.w2",
                 "frontend.pos.weight"):
        assert leaves[name] in grads
        assert np.all(np.isfinite(grads[leaves[name]].data))
