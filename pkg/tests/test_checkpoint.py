"""Container round trips, partition properties, and corruption handling."""

from __future__ import annotations

import json

import numpy as np
import pytest

from layermerge.autodiff import Tensor
from layermerge.checkpoint import (
    CheckpointError, CorruptionError, FormatError, LayeredCheckpoint,
    ModelConfig, init_checkpoint, load_checkpoint, parameter_shapes,
    partition_layers, save_checkpoint,
)

SMALL = ModelConfig(num_layers=2, model_dim=8, num_heads=2, ffn_dim=16,
                    input_dim=4, kernel=2, stride=1, vocab_size=5,
                    num_classes=3, max_frames=12)


def test_partition_group_counts_paper_scale():
    cfg = ModelConfig(num_layers=24, model_dim=8, num_heads=2, ffn_dim=16)
    index = partition_layers(cfg)
    merge_groups = sorted({i for i in index.values() if i >= 0})
    assert merge_groups == list(range(25))  # 1 front-end + 24 blocks


def test_partition_minimal_model():
    cfg = ModelConfig(num_layers=1, model_dim=8, num_heads=2, ffn_dim=16)
    groups = {i for i in partition_layers(cfg).values() if i >= 0}
    assert groups == {0, 1}


def test_partition_total_and_heads_excluded():
    index = partition_layers(SMALL)
    shapes = parameter_shapes(SMALL)
    assert set(index) == set(shapes)  # total function, one index per name
    for name, idx in index.items():
        assert idx == -1 if name.startswith("head.") else idx >= 0


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(model_dim=10, num_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(num_layers=0)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=1)


def test_init_checkpoint_deterministic_and_shaped():
    a = init_checkpoint(SMALL, seed=7)
    b = init_checkpoint(SMALL, seed=7)
    assert a.fingerprint == b.fingerprint
    assert init_checkpoint(SMALL, seed=8).fingerprint != a.fingerprint
    for name, shape in parameter_shapes(SMALL).items():
        assert a.params[name].shape == shape
    np.testing.assert_array_equal(a.params["block1.attn.norm.gamma"].data, 1.0)
    np.testing.assert_array_equal(a.params["head.agg.raw"].data, 0.0)


def test_round_trip_full_model(tmp_path):
    ckpt = init_checkpoint(SMALL, seed=3, task="base")
    path = str(tmp_path / "base")
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.fingerprint == ckpt.fingerprint
    assert back.layer_index == ckpt.layer_index
    assert back.meta["task"] == "base"
    for name in ckpt.params:
        np.testing.assert_array_equal(back.params[name].data, ckpt.params[name].data)


def test_round_trip_single_tensor_and_empty(tmp_path):
    one = LayeredCheckpoint({"w": Tensor([[1.5, -2.0]])}, {"w": 0}, {"task": "t"})
    save_checkpoint(one, str(tmp_path / "one"))
    back = load_checkpoint(str(tmp_path / "one"))
    assert back.fingerprint == one.fingerprint
    empty = LayeredCheckpoint({}, {}, {"task": "none"})
    save_checkpoint(empty, str(tmp_path / "empty"))
    assert load_checkpoint(str(tmp_path / "empty")).fingerprint == empty.fingerprint


def test_save_twice_byte_identical(tmp_path):
    ckpt = init_checkpoint(SMALL, seed=5)
    save_checkpoint(ckpt, str(tmp_path / "a"))
    save_checkpoint(ckpt, str(tmp_path / "b"))
    for ext in (".manifest.json", ".bin"):
        assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()


def test_corrupt_blob_rejected(tmp_path):
    save_checkpoint(init_checkpoint(SMALL, seed=1), str(tmp_path / "c"))
    blob = bytearray((tmp_path / "c.bin").read_bytes())
    blob[100] ^= 0xFF
    (tmp_path / "c.bin").write_bytes(bytes(blob))
    with pytest.raises(CorruptionError, match="fingerprint"):
        load_checkpoint(str(tmp_path / "c"))


def test_manifest_shape_blob_length_mismatch_rejected(tmp_path):
    save_checkpoint(init_checkpoint(SMALL, seed=1), str(tmp_path / "d"))
    manifest = json.loads((tmp_path / "d.manifest.json").read_text())
    manifest["tensors"][0]["shape"] = [999]
    (tmp_path / "d.manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CorruptionError):
        load_checkpoint(str(tmp_path / "d"))


def test_truncated_blob_rejected(tmp_path):
    save_checkpoint(init_checkpoint(SMALL, seed=1), str(tmp_path / "e"))
    blob = (tmp_path / "e.bin").read_bytes()
    (tmp_path / "e.bin").write_bytes(blob[:-8])
    with pytest.raises(CorruptionError):
        load_checkpoint(str(tmp_path / "e"))


def test_unknown_dtype_rejected(tmp_path):
    save_checkpoint(init_checkpoint(SMALL, seed=1), str(tmp_path / "f"))
    manifest = json.loads((tmp_path / "f.manifest.json").read_text())
    manifest["dtype"] = "f16"
    (tmp_path / "f.manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(FormatError, match="dtype"):
        load_checkpoint(str(tmp_path / "f"))


def test_fingerprint_changes_iff_bytes_change():
    ckpt = init_checkpoint(SMALL, seed=2)
    same = ckpt.with_params({})
    assert same.fingerprint == ckpt.fingerprint
    data = ckpt.params["block1.ffn.w1"].data.copy()
    data[0, 0] = np.nextafter(data[0, 0], np.inf)  # single-ulp nudge
    bumped = ckpt.with_params({"block1.ffn.w1": Tensor(data)})
    assert bumped.fingerprint != ckpt.fingerprint


def test_compatibility_checks():
    a = init_checkpoint(SMALL, seed=1)
    b = init_checkpoint(SMALL, seed=2)
    a.check_compatible(b)  # same structure, different values: fine
    other = init_checkpoint(
        ModelConfig(num_layers=3, model_dim=8, num_heads=2, ffn_dim=16,
                    input_dim=4, kernel=2, stride=1, vocab_size=5,
                    num_classes=3, max_frames=12), seed=1)
    with pytest.raises(CheckpointError, match="not merge-compatible"):
        a.check_compatible(other)


def test_with_params_validates():
    ckpt = init_checkpoint(SMALL, seed=1)
    with pytest.raises(CheckpointError):
        ckpt.with_params({"nope": Tensor([1.0])})
    with pytest.raises(CheckpointError):
        ckpt.with_params({"head.ser.bias": Tensor([[1.0]])})
