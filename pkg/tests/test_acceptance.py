"""Acceptance suite: twelve checks, one pass/fail line each.

The comparison-grid checks (8, 9, 10, 12) share a single full run of the
shipped default config; UAR values observed at the first green run are
frozen below as regression constants. Runtimes are asserted where the
check specifies a budget.
"""

import json
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

from layermerge import autodiff as ad
from layermerge.autodiff import Tensor
from layermerge.checkpoint import ModelConfig, init_checkpoint
from layermerge.encoder import encode
from layermerge.experiments import load_experiment_config, run_suite
from layermerge.heads import ser_forward, weighted_sum
from layermerge.metrics import (ConfusionMatrix, levenshtein, macro_f1,
                                precision_macro, token_error_rate, uar)
from layermerge.rng import Rng
from layermerge.synthdata import SynthConfig, generate_corpus
from layermerge.taskvector import (MergeCoefficients, MergeStrategy,
                                   extract_task_vector, merge_layerwise,
                                   merge_on_graph)
from layermerge.training import (ClassBalanceWeights, TrainConfig,
                                 class_balanced_soft_ce, smooth_labels,
                                 train_adaltm)

CONFIG_PATH = os.path.join(os.path.dirname(__file__), "..", "configs",
                           "default.json")

# UAR values observed at the first green run of the shipped config
# (seed-pinned; loose tolerance absorbs BLAS build variation).
REGRESSION = {
    "ser_only": 0.9312499999999999,
    "mtl_scratch": 0.89375,
    "frozen_baseline": 0.8875,
    "vec_asr": 0.925,
    "vec_ser": 0.9375,
    "vec_dual": 0.9375,
    "vec_dual_ood": 0.9375,
}
REGRESSION_TOL = 1e-6


@contextmanager
def criterion(num: int, title: str):
    try:
        yield
    except BaseException:
        print(f"[criterion {num:2d}] FAIL {title}")
        raise
    print(f"[criterion {num:2d}] PASS {title}")


def desk_model() -> ModelConfig:
    return ModelConfig()  # L=6, d=64 defaults


def finetune_stand_in(base, seed: int, scale: float = 0.05, task: str = "ft"):
    """Random pair with the fine-tune structure: base plus a residual at
    fine-tune scale. Real update magnitudes keep base and result within a
    binade almost everywhere, which is what makes the round trip exact;
    unrelated random checkpoints would not satisfy that (measured: up to
    64 ulp off after subtract-then-add when magnitudes span binades)."""
    rng = Rng(seed)
    updates = {}
    for name in base.backbone_names():
        t = base.params[name]
        updates[name] = Tensor(
            t.data + scale * rng.derive(name).normal(t.shape))
    return base.with_params(updates, task=task)


@pytest.fixture(scope="module")
def shipped():
    cfg = load_experiment_config(CONFIG_PATH)
    return cfg


@pytest.fixture(scope="module")
def suite(shipped, tmp_path_factory):
    run_dir = str(tmp_path_factory.mktemp("acceptance_suite"))
    t0 = time.time()
    report = run_suite(shipped, run_dir, parts=(1, 2, 3, 4))
    elapsed = time.time() - t0
    return report, elapsed, run_dir


def suite_uar(report: dict, name: str) -> float:
    entry = report["setups"][name]
    assert "metrics" in entry, f"setup {name} failed: {entry.get('error')}"
    return entry["metrics"]["uar"]["point"]


# ---------------------------------------------------------------------------

def test_criterion_01_round_trip():
    with criterion(1, "task-vector round trip is ulp-exact (< 1 s)"):
        t0 = time.time()
        mc = desk_model()
        for seed in (0, 1, 2):
            base = init_checkpoint(mc, seed=seed)
            ft = finetune_stand_in(base, seed=seed + 100,
                                   scale=(0.02, 0.05, 0.1)[seed], task="ser")
            tv = extract_task_vector(ft, base)
            rebuilt = merge_layerwise(
                base, [tv], MergeCoefficients(
                    MergeStrategy.STATIC_GLOBAL,
                    {"ser": np.asarray(1.0)}, trainable=False))
            for name in base.backbone_names():
                assert np.array_equal(rebuilt.params[name].data,
                                      ft.params[name].data), name
        elapsed = time.time() - t0
        assert elapsed < 1.0, f"took {elapsed:.2f}s"


def test_criterion_02_merge_collapse():
    with criterion(2, "lambda=0 / lambda=1 merges collapse bitwise (< 10 s)"):
        t0 = time.time()
        mc = desk_model()
        base = init_checkpoint(mc, seed=0)
        ft = finetune_stand_in(base, seed=7, task="ser")
        tv = extract_task_vector(ft, base)
        zero = merge_layerwise(base, [tv], MergeCoefficients(
            MergeStrategy.STATIC_GLOBAL, {"ser": np.asarray(0.0)},
            trainable=False))
        one = merge_layerwise(base, [tv], MergeCoefficients(
            MergeStrategy.STATIC_GLOBAL, {"ser": np.asarray(1.0)},
            trainable=False))
        rng = Rng(3).derive("inputs")
        for i in range(100):
            feats = Tensor(rng.derive(i).normal((24, mc.input_dim)))
            h_zero = encode(feats, zero.params, mc).states[-1].data
            h_base = encode(feats, base.params, mc).states[-1].data
            assert np.array_equal(h_zero, h_base)
            h_one = encode(feats, one.params, mc).states[-1].data
            h_ft = encode(feats, ft.params, mc).states[-1].data
            assert np.array_equal(h_one, h_ft)
        elapsed = time.time() - t0
        assert elapsed < 10.0, f"took {elapsed:.2f}s"


def _merge_loss(base, tvs, utts, lam_values, agg, hw, hb, cbw, mc,
                leaves=False):
    g = ad.Graph()
    mk = (lambda v: g.leaf(v, trainable=True)) if leaves else ad.tensor
    groups = mc.num_layers + 1
    lam = {t: [mk(lam_values[t][l]) for l in range(groups)]
           for t in lam_values}
    params = merge_on_graph(base, tvs, lam)
    params["head.agg.raw"] = mk(agg)
    params["head.ser.weight"] = mk(hw)
    params["head.ser.bias"] = mk(hb)
    total = None
    for u in utts:
        stack = encode(u.features, params, mc)
        logits = ser_forward(weighted_sum(stack, params["head.agg.raw"]),
                             params["head.ser.weight"],
                             params["head.ser.bias"])
        term = class_balanced_soft_ce(
            logits, smooth_labels(u.soft_label, 0.1), cbw)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(utts)), lam, params


def test_criterion_03_gradient_suite():
    with criterion(3, "lambda/alpha/head gradients match FD at L=6 d=64 "
                      "(< 2 min)"):
        t0 = time.time()
        mc = desk_model()
        corpus = generate_corpus(SynthConfig(num_train=8, num_valid=4,
                                             num_test=4, conflict=0.6,
                                             seed=11))
        utts = corpus["train"][:4]
        base = init_checkpoint(mc, seed=0)
        ser = init_checkpoint(mc, seed=5, task="ser")
        asr = init_checkpoint(mc, seed=6, task="asr")
        tvs = [extract_task_vector(asr, base), extract_task_vector(ser, base)]
        # shrink the deltas toward fine-tune scale so merges stay tame
        for tv in tvs:
            for n in list(tv.deltas):
                tv.deltas[n] = Tensor(tv.deltas[n].data * 0.05)
        groups = mc.num_layers + 1
        cbw = ClassBalanceWeights.uniform(mc.num_classes)
        lam0 = {"asr": np.full(groups, 0.5), "ser": np.full(groups, 0.5)}
        agg0 = np.zeros(mc.num_layers)
        hw0 = np.array(base.params["head.ser.weight"].data)
        hb0 = np.array(base.params["head.ser.bias"].data)

        loss, lam, params = _merge_loss(base, tvs, utts, lam0, agg0, hw0, hb0,
                                        cbw, mc, leaves=True)
        grads = ad.backward(loss)

        def value(lv, av, wv, bv):
            l, _, _ = _merge_loss(base, tvs, utts, lv, av, wv, bv, cbw, mc)
            return l.item()

        h = 1e-5
        checked = 0
        for task in ("asr", "ser"):
            for layer in range(groups):
                up = {t: v.copy() for t, v in lam0.items()}
                dn = {t: v.copy() for t, v in lam0.items()}
                up[task][layer] += h
                dn[task][layer] -= h
                fd = (value(up, agg0, hw0, hb0)
                      - value(dn, agg0, hw0, hb0)) / (2 * h)
                an = grads[lam[task][layer]].item()
                assert abs(an - fd) <= 1e-5 * max(1.0, abs(fd)), (task, layer)
                checked += 1
        agg_grad = grads[params["head.agg.raw"]].data
        for i in range(mc.num_layers):
            up, dn = agg0.copy(), agg0.copy()
            up[i] += h
            dn[i] -= h
            fd = (value(lam0, up, hw0, hb0)
                  - value(lam0, dn, hw0, hb0)) / (2 * h)
            assert abs(agg_grad[i] - fd) <= 1e-5 * max(1.0, abs(fd)), i
            checked += 1
        hw_grad = grads[params["head.ser.weight"]].data
        hb_grad = grads[params["head.ser.bias"]].data
        for (r, c) in [(0, 0), (17, 3), (63, 7)]:
            up, dn = hw0.copy(), hw0.copy()
            up[r, c] += h
            dn[r, c] -= h
            fd = (value(lam0, agg0, up, hb0)
                  - value(lam0, agg0, dn, hb0)) / (2 * h)
            assert abs(hw_grad[r, c] - fd) <= 1e-5 * max(1.0, abs(fd))
            checked += 1
        for c in (0, 5):
            up, dn = hb0.copy(), hb0.copy()
            up[c] += h
            dn[c] -= h
            fd = (value(lam0, agg0, hw0, up)
                  - value(lam0, agg0, hw0, dn)) / (2 * h)
            assert abs(hb_grad[c] - fd) <= 1e-5 * max(1.0, abs(fd))
            checked += 1
        assert checked == 2 * groups + mc.num_layers + 5
        elapsed = time.time() - t0
        assert elapsed < 120.0, f"took {elapsed:.2f}s"


def test_criterion_04_freeze_contract():
    with criterion(4, "base and delta fingerprints frozen across "
                      "coefficient training"):
        mc = ModelConfig(num_layers=3, model_dim=32, num_heads=2, ffn_dim=64,
                         max_frames=32)
        corpus = generate_corpus(SynthConfig(num_train=16, num_valid=8,
                                             num_test=4, conflict=0.6,
                                             seed=2))
        base = init_checkpoint(mc, seed=0)
        ser = init_checkpoint(mc, seed=5, task="ser")
        tv = extract_task_vector(ser, base)
        fp_base = base.fingerprint
        delta_bytes = {n: tv.deltas[n].data.tobytes() for n in tv.deltas}
        train_adaltm(base, [tv], corpus, MergeStrategy.ADAPTIVE_LAYERWISE,
                     TrainConfig(lr=3e-3, batch_size=8, epochs=2, seed=0))
        assert base.fingerprint == fp_base
        assert all(tv.deltas[n].data.tobytes() == delta_bytes[n]
                   for n in tv.deltas)


def test_criterion_05_shift_invariance():
    with criterion(5, "aggregation softmax is shift-invariant bitwise; "
                      "alpha sums to 1"):
        mc = ModelConfig(num_layers=4, model_dim=16, num_heads=2, ffn_dim=32,
                         max_frames=32)
        ckpt = init_checkpoint(mc, seed=3)
        rng = Rng(9).derive("shift")
        feats = Tensor(rng.derive("x").normal((20, mc.input_dim)))
        stack = encode(feats, ckpt.params, mc)
        grid = 2.0 ** -16
        raw0 = np.round(rng.derive("raw").normal(mc.num_layers) / grid) * grid
        w = ckpt.params["head.ser.weight"]
        b = ckpt.params["head.ser.bias"]
        ref = ser_forward(weighted_sum(stack, Tensor(raw0)), w, b).data
        for shift in (grid, -1.0, 0.5, 17.0, -256.0 + grid * 3):
            shifted = raw0 + shift  # exact: both operands on the 2^-16 grid
            got = ser_forward(weighted_sum(stack, Tensor(shifted)), w, b).data
            assert np.array_equal(got, ref), shift
        for i in range(50):
            raw = rng.derive(i).normal(mc.num_layers) * 10.0
            alpha = ad.softmax(Tensor(raw), axis=-1).data
            assert abs(alpha.sum() - 1.0) <= 1e-12


def test_criterion_06_class_balance_formula():
    with criterion(6, "class-balance weights match the closed form; "
                      "uniform counts give plain soft CE"):
        counts = np.array([10.0, 1000.0])
        for beta in (0.0, 0.9, 0.999):
            w = (1.0 - beta) / (1.0 - beta ** counts)
            expect = w / w.mean()
            got = ClassBalanceWeights.from_counts(counts, beta).weights
            assert np.all(np.abs(got - expect) <= 1e-12), beta
        rng = Rng(4).derive("cb")
        logits = Tensor(rng.derive("logits").normal(8))
        label = np.zeros(8)
        label[3] = 1.0
        label = smooth_labels(label, 0.1)
        cbw = ClassBalanceWeights.from_counts(np.full(8, 123), 0.9999)
        plain = class_balanced_soft_ce(logits, label,
                                       ClassBalanceWeights.uniform(8)).item()
        balanced = class_balanced_soft_ce(logits, label, cbw).item()
        assert balanced == plain


def _brute_metrics(counts: np.ndarray):
    """Per-class scalar loops; means aggregated with np.mean so the only
    independent part is the per-class arithmetic, which must match the
    implementation bitwise."""
    c = counts.shape[0]
    recalls, precisions, f1s = [], [], []
    for i in range(c):
        support = counts[i].sum()
        predicted = counts[:, i].sum()
        tp = counts[i, i]
        r = tp / support if support else None
        p = tp / predicted if predicted else 0.0
        rr = r if r is not None else 0.0
        f = 2 * p * rr / (p + rr) if (p + rr) else 0.0
        if r is not None:
            recalls.append(r)
        precisions.append(p)
        f1s.append(f)
    return (float(np.mean(recalls)), float(np.mean(precisions)),
            float(np.mean(f1s)))


def _lev_matrix(a, b):
    n, m = len(a), len(b)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dp[i][0] = i
    for j in range(m + 1):
        dp[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            dp[i][j] = min(dp[i - 1][j] + 1, dp[i][j - 1] + 1,
                           dp[i - 1][j - 1] + cost)
    return dp[n][m]


def test_criterion_07_metric_oracles():
    with criterion(7, "UAR/precision/MaF1 and TER match independent "
                      "oracles exactly"):
        rng = Rng(13).derive("metrics")
        for i in range(50):
            r = rng.derive(i)
            c = 2 + int(r.derive("c").integers(7))
            counts = r.derive("m").integers(13, c * c).reshape(c, c)
            if i % 7 == 0:  # exercise the zero-support path
                counts[c - 1, :] = 0
            if counts.sum() == 0 or counts.sum(axis=1).max() == 0:
                counts[0, 0] = 1
            cm = ConfusionMatrix(counts)
            b_uar, b_pre, b_f1 = _brute_metrics(counts)
            assert uar(cm) == b_uar
            assert precision_macro(cm) == b_pre
            assert macro_f1(cm) == b_f1
        for i in range(100):
            r = rng.derive(1000 + i)
            la = 1 + int(r.derive("la").integers(15))
            lb = 1 + int(r.derive("lb").integers(15))
            a = r.derive("a").integers(5, la).tolist()
            b = r.derive("b").integers(5, lb).tolist()
            assert levenshtein(a, b) == _lev_matrix(a, b)
            assert token_error_rate(a, b) == _lev_matrix(a, b) / len(b)


def test_criterion_08_part2_ordering(suite):
    with criterion(8, "Part 2 UAR ordering holds on the shipped config "
                      "(< 15 min)"):
        report, elapsed, _ = suite
        band = 0.005
        frozen = suite_uar(report, "frozen_baseline")
        v_asr = suite_uar(report, "vec_asr")
        v_ser = suite_uar(report, "vec_ser")
        dual = suite_uar(report, "vec_dual")
        assert dual >= frozen, (dual, frozen)
        assert v_ser >= v_asr - band, (v_ser, v_asr)
        assert v_asr >= frozen - band, (v_asr, frozen)
        assert elapsed < 15 * 60, f"suite took {elapsed:.0f}s"
        for name, value in (("frozen_baseline", frozen), ("vec_asr", v_asr),
                            ("vec_ser", v_ser), ("vec_dual", dual)):
            if REGRESSION[name] is not None:
                assert abs(value - REGRESSION[name]) <= REGRESSION_TOL, name


def test_criterion_09_part1_seesaw(suite):
    with criterion(9, "joint training seesaws >= 3 points; coefficient "
                      "training recovers within 1"):
        report, _, _ = suite
        ser_only = suite_uar(report, "ser_only")
        mtl = suite_uar(report, "mtl_scratch")
        dual = suite_uar(report, "vec_dual")
        assert ser_only - mtl >= 0.03, (ser_only, mtl)
        assert dual >= ser_only - 0.01, (ser_only, dual)
        for name, value in (("ser_only", ser_only), ("mtl_scratch", mtl),
                            ("vec_dual", dual)):
            if REGRESSION[name] is not None:
                assert abs(value - REGRESSION[name]) <= REGRESSION_TOL, name


def test_criterion_10_domain_shift(suite):
    with criterion(10, "out-of-domain vector merge scores <= in-domain"):
        report, _, _ = suite
        dual = suite_uar(report, "vec_dual")
        ood = suite_uar(report, "vec_dual_ood")
        assert ood <= dual, (ood, dual)
        if REGRESSION["vec_dual_ood"] is not None:
            assert abs(ood - REGRESSION["vec_dual_ood"]) <= REGRESSION_TOL


def test_criterion_11_determinism(tmp_path):
    with criterion(11, "suite reruns reproduce every CSV/JSON byte"):
        doc = {
            "model": {"num_layers": 2, "model_dim": 16, "num_heads": 2,
                      "ffn_dim": 32, "max_frames": 32},
            "train": {"lr": 3e-3, "batch_size": 8, "epochs": 1, "seed": 5},
            "synth": {"num_train": 12, "num_valid": 8, "num_test": 8,
                      "conflict": 0.3, "domain_shift": 0.5, "seed": 3},
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(doc))
        cfg = load_experiment_config(str(cfg_path))
        dirs = [str(tmp_path / "a"), str(tmp_path / "b")]
        for d in dirs:
            run_suite(cfg, d, parts=(2,))
        compared = 0
        for root, _, files in os.walk(dirs[0]):
            for fn in files:
                if fn == "log.txt" or fn.endswith(".png"):
                    continue
                a = os.path.join(root, fn)
                b = os.path.join(dirs[1], os.path.relpath(a, dirs[0]))
                assert open(a, "rb").read() == open(b, "rb").read(), a
                compared += 1
        assert compared > 15


def test_criterion_12_trajectory_export(suite, shipped):
    with criterion(12, "coefficient export: L+1 rows per vector, "
                       "lambda 0.5 at step 0"):
        _, _, run_dir = suite
        path = os.path.join(run_dir, "setups", "vec_dual", "coefficients.csv")
        lines = open(path).read().strip().split("\n")
        assert lines[0] == "step,layer,lambda_asr,lambda_ser,alpha_agg"
        groups = shipped.model.num_layers + 1
        step0 = [l.split(",") for l in lines[1:] if l.split(",")[0] == "0"]
        assert len(step0) == groups
        for cells in step0:
            assert float(cells[2]) == 0.5  # asr column spans L+1 rows
            assert float(cells[3]) == 0.5  # ser column spans L+1 rows
        # every later step keeps the L+1-row block shape
        steps = {}
        for line in lines[1:]:
            steps.setdefault(line.split(",")[0], []).append(line)
        assert all(len(rows) == groups for rows in steps.values())
