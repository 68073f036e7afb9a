"""Losses, optimizer, and the three training procedures: single-task
fine-tuning (which mints the vectors), joint multi-task training, and
frozen-backbone coefficient training.

Every procedure is deterministic given (config, seed, corpus): parameter
init, batch order, and evaluation draw from named substreams of the run
seed. Checkpoint selection is lowest validation loss, earliest epoch on
ties. There is no gradient clipping; at this scale divergence indicates
a config error and surfaces as a finite-ness failure in the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import LayeredCheckpoint, ModelConfig
from .encoder import encode
from .heads import asr_forward, greedy_decode, ser_forward, weighted_sum
from .metrics import (ConfusionMatrix, corpus_token_error_rate, macro_f1,
                      precision_macro, uar)
from .rng import Rng
from .taskvector import (MergeCoefficients, MergeStrategy, TaskVector,
                         merge_layerwise, merge_on_graph)

METRIC_COLUMNS = ("epoch", "split", "loss", "uar", "precision", "macro_f1",
                  "token_error_rate")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dlr_backbone_multiplier: float = 0.1
    coeff_lr_multiplier: float = 10.0
    mtl_loss_mix: float = 0.5
    cb_beta: float = 0.9999
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.coeff_lr_multiplier <= 0:
            raise ValueError("coeff_lr_multiplier must be > 0")
        if not 0.0 <= self.mtl_loss_mix <= 1.0:
            raise ValueError("mtl_loss_mix must be in [0, 1]")
        if not 0.0 <= self.cb_beta < 1.0:
            raise ValueError("cb_beta must be in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class ClassBalanceWeights:
    """Effective-number weights w_c = (1-beta)/(1-beta^n_c), normalized to
    mean 1. Zero-count classes are clamped to n_c = 1 so every weight
    stays positive (soft labels put mass on all classes)."""

    weights: np.ndarray

    @classmethod
    def from_counts(cls, counts, beta: float) -> "ClassBalanceWeights":
        counts = np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
        if not 0.0 <= beta < 1.0:
            raise ValueError("beta must be in [0, 1)")
        w = (1.0 - beta) / (1.0 - beta ** counts)
        return cls(w / w.mean())

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassBalanceWeights":
        return cls(np.ones(num_classes))


def smooth_labels(soft_label: np.ndarray, epsilon: float) -> np.ndarray:
    """Spread epsilon of the mass uniformly over all classes."""
    c = soft_label.size
    return (1.0 - epsilon) * soft_label + epsilon / c


def class_balanced_soft_ce(logits: Tensor, soft_label: np.ndarray,
                           cbw: ClassBalanceWeights) -> Tensor:
    """-(sum_c w_c * label_c * log softmax(logits)_c) as a graph scalar."""
    soft_label = np.asarray(soft_label, dtype=np.float64)
    if abs(float(soft_label.sum()) - 1.0) > 1e-9:
        raise ValueError("soft label must sum to 1")
    if soft_label.shape != logits.shape:
        raise ValueError(f"label shape {soft_label.shape} does not match "
                         f"logits {logits.shape}")
    logp = ad.log(ad.softmax(logits, axis=-1))
    coeff = ad.tensor(cbw.weights * soft_label)
    return ad.scale(ad.sum(ad.mul(logp, coeff)), -1.0)


def asr_frame_ce(frame_logits: Tensor, frame_labels) -> Tensor:
    """Mean per-frame cross entropy against integer token labels."""
    labels = np.asarray(frame_labels, dtype=np.int64)
    frames, vocab = frame_logits.shape
    if labels.shape != (frames,):
        raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for "
                         f"{frames} frames")
    if labels.min() < 0 or labels.max() >= vocab:
        raise ValueError(f"token label out of range for vocab {vocab}")
    onehot = np.zeros((frames, vocab))
    onehot[np.arange(frames), labels] = 1.0
    logp = ad.log(ad.softmax(frame_logits, axis=-1))
    return ad.scale(ad.sum(ad.mul(logp, ad.tensor(onehot))), -1.0 / frames)


def frame_targets(tokens: list[int], cfg: ModelConfig) -> list[int]:
    """Map input-frame labels to conv-output frames (center of each
    receptive window)."""
    frames_out = (len(tokens) - cfg.kernel) // cfg.stride + 1
    center = cfg.kernel // 2
    return [tokens[j * cfg.stride + center] for j in range(frames_out)]


class AdamW:
    """Decoupled weight decay, bias-corrected moments, per-parameter lr
    multipliers. Parameters without a gradient entry are left untouched."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr_mult: dict[str, float] | None = None,
             no_decay: frozenset[str] | set[str] = frozenset()) -> None:
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for name, g in grads.items():
            p = values[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"parameter {name!r} {p.shape}")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
            lr = cfg.lr * (lr_mult.get(name, 1.0) if lr_mult else 1.0)
            if cfg.weight_decay > 0 and name not in no_decay:
                update = update + cfg.weight_decay * p
            values[name] = p - lr * update


def select_checkpoint(valid_losses) -> int:
    """Earliest epoch with the lowest validation loss."""
    losses = list(valid_losses)
    if not losses:
        raise ValueError("empty training history")
    best = 0
    for i, loss in enumerate(losses):
        if loss < losses[best]:
            best = i
    return best


# ---------------------------------------------------------------------------
# forward/eval helpers

def _as_tensors(values: dict) -> dict[str, Tensor]:
    return {n: v if isinstance(v, Tensor) else Tensor(v)
            for n, v in values.items()}


def evaluate_params(values: dict, model_cfg: ModelConfig,
                    utterances: list, tasks: tuple[str, ...],
                    cbw: ClassBalanceWeights, smoothing: float,
                    mix: float = 0.5) -> dict:
    """Forward-only evaluation. Returns per-task losses, point metrics,
    and the raw per-utterance pairs for interval estimation."""
    params = _as_tensors(values)
    ser_pairs: list[tuple[int, int]] = []
    asr_pairs: list[tuple[list[int], list[int]]] = []
    loss_ser = 0.0
    loss_asr = 0.0
    for u in utterances:
        stack = encode(u.features, params, model_cfg)
        if "ser" in tasks:
            logits = ser_forward(weighted_sum(stack, params["head.agg.raw"]),
                                 params["head.ser.weight"],
                                 params["head.ser.bias"])
            target = smooth_labels(u.soft_label, smoothing)
            loss_ser += class_balanced_soft_ce(logits, target, cbw).item()
            ser_pairs.append((u.emotion, int(np.argmax(logits.data))))
        if "asr" in tasks:
            logits = asr_forward(stack.states[-1], params["head.asr.weight"],
                                 params["head.asr.bias"])
            loss_asr += asr_frame_ce(logits,
                                     frame_targets(u.frame_tokens, model_cfg)
                                     ).item()
            asr_pairs.append((greedy_decode(logits.data), u.transcript))
    n = max(1, len(utterances))
    out: dict = {"count": len(utterances)}
    if "ser" in tasks:
        cm = ConfusionMatrix.from_pairs(ser_pairs, model_cfg.num_classes)
        out.update(loss_ser=loss_ser / n, uar=uar(cm),
                   precision=precision_macro(cm), macro_f1=macro_f1(cm),
                   ser_pairs=ser_pairs)
    if "asr" in tasks:
        out.update(loss_asr=loss_asr / n,
                   token_error_rate=corpus_token_error_rate(asr_pairs),
                   asr_pairs=asr_pairs)
    if tasks == ("ser",):
        out["loss"] = out["loss_ser"]
    elif tasks == ("asr",):
        out["loss"] = out["loss_asr"]
    else:
        out["loss"] = mix * out["loss_ser"] + (1.0 - mix) * out["loss_asr"]
    return out


def _batches(order: np.ndarray, size: int) -> list[list[int]]:
    return [order[i:i + size].tolist() for i in range(0, len(order), size)]


def _history_row(epoch: int, train_loss: float, valid: dict) -> dict:
    return {"epoch": epoch, "train_loss": train_loss,
            "valid_loss": valid["loss"],
            "valid": {k: valid[k] for k in
                      ("loss_ser", "loss_asr", "uar", "precision", "macro_f1",
                       "token_error_rate") if k in valid}}


def write_metrics_csv(history: list[dict], path: str) -> None:
    """Per-epoch rows: the train row carries only the loss; the valid row
    carries whichever metrics the run computed."""
    def fmt(x) -> str:
        return "" if x is None else repr(float(x))

    lines = [",".join(METRIC_COLUMNS)]
    for row in history:
        lines.append(",".join([str(row["epoch"]), "train",
                               fmt(row["train_loss"]), "", "", "", ""]))
        v = row["valid"]
        lines.append(",".join([
            str(row["epoch"]), "valid", fmt(row["valid_loss"]),
            fmt(v.get("uar")), fmt(v.get("precision")),
            fmt(v.get("macro_f1")), fmt(v.get("token_error_rate"))]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_coefficients_csv(trajectory: list[dict], num_groups: int,
                           path: str) -> None:
    """One row per (step, layer group): merging coefficients for each
    vector plus the aggregation weight (empty on the front-end row)."""
    def fmt(x) -> str:
        return "" if x is None else repr(float(x))

    lines = ["step,layer,lambda_asr,lambda_ser,alpha_agg"]
    for snap in trajectory:
        lambdas = snap.get("lambda", {})
        alpha = snap.get("alpha")
        for layer in range(num_groups):
            lam_asr = lambdas.get("asr")
            lam_ser = lambdas.get("ser")
            lines.append(",".join([
                str(snap["step"]), str(layer),
                fmt(None if lam_asr is None else lam_asr[layer]),
                fmt(None if lam_ser is None else lam_ser[layer]),
                fmt(None if (alpha is None or layer == 0) else alpha[layer - 1]),
            ]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# training procedures

def _model_cfg(ckpt: LayeredCheckpoint) -> ModelConfig:
    if "config" not in ckpt.meta:
        raise ValueError("checkpoint carries no model config")
    return ModelConfig.from_dict(ckpt.meta["config"])


def _utterance_loss(u, params: dict[str, Tensor], model_cfg: ModelConfig,
                    tasks: tuple[str, ...], cbw: ClassBalanceWeights,
                    cfg: TrainConfig) -> Tensor:
    stack = encode(u.features, params, model_cfg)
    terms = []
    mix = cfg.mtl_loss_mix
    if "ser" in tasks and ("asr" not in tasks or mix > 0.0):
        logits = ser_forward(weighted_sum(stack, params["head.agg.raw"]),
                             params["head.ser.weight"], params["head.ser.bias"])
        target = smooth_labels(u.soft_label, cfg.label_smoothing)
        term = class_balanced_soft_ce(logits, target, cbw)
        if "asr" in tasks and mix != 1.0:
            term = ad.scale(term, mix)
        terms.append(term)
    if "asr" in tasks and ("ser" not in tasks or mix < 1.0):
        logits = asr_forward(stack.states[-1], params["head.asr.weight"],
                             params["head.asr.bias"])
        term = asr_frame_ce(logits, frame_targets(u.frame_tokens, model_cfg))
        if "ser" in tasks and mix != 0.0:
            term = ad.scale(term, 1.0 - mix)
        terms.append(term)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def _train_parameters(base: LayeredCheckpoint, corpus: dict, tasks: tuple,
                      cfg: TrainConfig, trainable: list[str],
                      lr_mult: dict[str, float], no_decay: set[str],
                      eval_tasks: tuple | None = None) -> tuple[dict, list[dict]]:
    """Shared loop for fine-tuning and joint training: full graphs over
    the trainable names, AdamW updates, per-epoch validation."""
    if not corpus.get("train") or not corpus.get("valid"):
        raise ValueError("corpus needs nonempty train and valid splits")
    model_cfg = _model_cfg(base)
    eval_tasks = tasks if eval_tasks is None else eval_tasks
    values = {n: np.array(t.data) for n, t in base.params.items()}
    counts = np.zeros(model_cfg.num_classes)
    for u in corpus["train"]:
        counts[u.emotion] += 1
    cbw = (ClassBalanceWeights.from_counts(counts, cfg.cb_beta)
           if "ser" in tasks else ClassBalanceWeights.uniform(model_cfg.num_classes))
    optimizer = AdamW(cfg)
    batch_rng = Rng(cfg.seed).derive("batches")
    history: list[dict] = []
    best_loss = None
    best_values = {n: values[n].copy() for n in trainable}
    train = corpus["train"]
    trainable_set = set(trainable)
    for epoch in range(cfg.epochs):
        order = batch_rng.derive(epoch).permutation(len(train))
        epoch_loss = 0.0
        for batch in _batches(order, cfg.batch_size):
            g = ad.Graph()
            params = {n: (g.leaf(values[n], trainable=True)
                          if n in trainable_set else Tensor(values[n]))
                      for n in values}
            losses = None
            for j in batch:
                term = _utterance_loss(train[j], params, model_cfg, tasks,
                                       cbw, cfg)
                losses = term if losses is None else ad.add(losses, term)
            loss = ad.scale(losses, 1.0 / len(batch))
            grads = ad.backward(loss)
            grad_arrays = {n: grads[params[n]].data.copy()
                           for n in trainable if params[n] in grads}
            optimizer.step(values, grad_arrays, lr_mult, no_decay)
            epoch_loss += loss.item() * len(batch)
        valid = evaluate_params(values, model_cfg, corpus["valid"], eval_tasks,
                                cbw, cfg.label_smoothing, cfg.mtl_loss_mix)
        history.append(_history_row(epoch, epoch_loss / len(train), valid))
        if best_loss is None or valid["loss"] < best_loss:
            best_loss = valid["loss"]
            best_values = {n: values[n].copy() for n in trainable}
    return best_values, history


def finetune_task(base: LayeredCheckpoint, corpus: dict, task: str,
                  cfg: TrainConfig) -> tuple[LayeredCheckpoint, list[dict]]:
    """Mint a task specialist: backbone at lr * dlr multiplier, task head
    (and, for the emotion task, aggregation weights) at full lr."""
    if task not in ("ser", "asr"):
        raise ValueError(f"unknown task {task!r}")
    head = ([f"head.{task}.weight", f"head.{task}.bias"]
            + (["head.agg.raw"] if task == "ser" else []))
    trainable = base.backbone_names() + head
    lr_mult = {n: cfg.dlr_backbone_multiplier for n in base.backbone_names()}
    best, history = _train_parameters(base, corpus, (task,), cfg, trainable,
                                      lr_mult, {"head.agg.raw"})
    ckpt = base.with_params({n: Tensor(v) for n, v in best.items()}, task=task)
    return ckpt, history


def train_mtl(init: LayeredCheckpoint, corpus: dict, cfg: TrainConfig
              ) -> tuple[LayeredCheckpoint, list[dict]]:
    """Joint training of both tasks on one backbone; the loss is
    mix * L_ser + (1 - mix) * L_asr, and a boundary mix skips the other
    branch entirely so it collapses to the single-task procedure."""
    trainable = (init.backbone_names()
                 + ["head.ser.weight", "head.ser.bias",
                    "head.asr.weight", "head.asr.bias", "head.agg.raw"])
    lr_mult = {n: cfg.dlr_backbone_multiplier for n in init.backbone_names()}
    mix = cfg.mtl_loss_mix
    tasks = ("ser",) if mix == 1.0 else ("asr",) if mix == 0.0 else ("ser", "asr")
    best, history = _train_parameters(init, corpus, tasks, cfg, trainable,
                                      lr_mult, {"head.agg.raw"},
                                      eval_tasks=("ser", "asr"))
    ckpt = init.with_params({n: Tensor(v) for n, v in best.items()}, task="mtl")
    return ckpt, history


@dataclass
class AdaLTMResult:
    strategy: MergeStrategy
    coefficients: MergeCoefficients
    agg_raw: np.ndarray
    head: dict[str, np.ndarray]
    best_epoch: int
    history: list[dict] = field(repr=False)
    trajectory: list[dict] = field(repr=False)

    def merged_checkpoint(self, base: LayeredCheckpoint,
                          tvs: list[TaskVector]) -> LayeredCheckpoint:
        merged = merge_layerwise(base, tvs, self.coefficients)
        updates = {"head.agg.raw": Tensor(self.agg_raw)}
        updates.update({n: Tensor(v) for n, v in self.head.items()})
        return merged.with_params(updates, task="adaltm")


def train_adaltm(base: LayeredCheckpoint, tvs: list[TaskVector], corpus: dict,
                 strategy: MergeStrategy, cfg: TrainConfig) -> AdaLTMResult:
    """Frozen-backbone phase: only merging coefficients, aggregation
    weights, and the emotion head train. Base and vector bytes are
    fingerprint-checked before and after; drift is a hard failure."""
    if not corpus.get("train") or not corpus.get("valid"):
        raise ValueError("corpus needs nonempty train and valid splits")
    model_cfg = _model_cfg(base)
    num_groups = model_cfg.num_layers + 1
    base_fp_before = base.fingerprint
    delta_bytes_before = {(tv.task, n): tv.deltas[n].data.tobytes()
                          for tv in tvs for n in tv.deltas}

    tasks = [tv.task for tv in tvs]
    coeffs = MergeCoefficients.init(strategy, tasks, num_groups)
    layerwise = strategy is MergeStrategy.ADAPTIVE_LAYERWISE
    train_lambdas = strategy is not MergeStrategy.STATIC_GLOBAL

    values: dict[str, np.ndarray] = {
        "head.agg.raw": np.array(base.params["head.agg.raw"].data),
        "head.ser.weight": np.array(base.params["head.ser.weight"].data),
        "head.ser.bias": np.array(base.params["head.ser.bias"].data),
    }
    for task in tasks:
        values[f"lambda.{task}"] = np.asarray(coeffs.values[task]).copy()

    counts = np.zeros(model_cfg.num_classes)
    for u in corpus["train"]:
        counts[u.emotion] += 1
    cbw = ClassBalanceWeights.from_counts(counts, cfg.cb_beta)
    optimizer = AdamW(cfg)
    batch_rng = Rng(cfg.seed).derive("batches")
    no_decay = {"head.agg.raw"} | {f"lambda.{t}" for t in tasks}
    # the head memorizes the small train set quickly; the coefficients get
    # a faster clock so they settle while the loss is still informative
    lr_mult = {f"lambda.{t}": cfg.coeff_lr_multiplier for t in tasks}

    def snapshot(step: int) -> dict:
        lam = {t: np.full(num_groups,
                          float(values[f"lambda.{t}"].reshape(-1)[0]))
               if not layerwise else values[f"lambda.{t}"].copy()
               for t in tasks}
        return {"step": step, "lambda": {t: lam[t].tolist() for t in tasks},
                "alpha": values["head.agg.raw"].tolist()}

    def eval_values() -> dict:
        current = MergeCoefficients(
            strategy, {t: values[f"lambda.{t}"].copy() for t in tasks},
            trainable=train_lambdas)
        merged = merge_layerwise(base, tvs, current) if tvs else base
        ev = dict(merged.params)
        ev["head.agg.raw"] = Tensor(values["head.agg.raw"])
        ev["head.ser.weight"] = Tensor(values["head.ser.weight"])
        ev["head.ser.bias"] = Tensor(values["head.ser.bias"])
        return evaluate_params(ev, model_cfg, corpus["valid"], ("ser",),
                               cbw, cfg.label_smoothing)

    trajectory = [snapshot(0)]
    history: list[dict] = []
    best_loss = None
    best = {n: v.copy() for n, v in values.items()}
    best_epoch = 0
    train = corpus["train"]
    for epoch in range(cfg.epochs):
        order = batch_rng.derive(epoch).permutation(len(train))
        epoch_loss = 0.0
        for batch in _batches(order, cfg.batch_size):
            g = ad.Graph()
            lam_tensors: dict[str, list[Tensor] | Tensor] = {}
            lam_leaves: dict[str, list[Tensor] | Tensor] = {}
            for task in tasks:
                vec = values[f"lambda.{task}"]
                if not train_lambdas:
                    lam_tensors[task] = ad.tensor(vec)
                elif layerwise:
                    leaves = [g.leaf(vec[l], trainable=True)
                              for l in range(num_groups)]
                    lam_tensors[task] = leaves
                    lam_leaves[task] = leaves
                else:
                    leaf = g.leaf(vec, trainable=True)
                    lam_tensors[task] = leaf
                    lam_leaves[task] = leaf
            params = merge_on_graph(base, tvs, lam_tensors) if tvs \
                else dict(base.params)
            for name in values:
                if name.startswith("head."):
                    params[name] = g.leaf(values[name], trainable=True)
            losses = None
            for j in batch:
                term = _utterance_loss(train[j], params, model_cfg, ("ser",),
                                       cbw, cfg)
                losses = term if losses is None else ad.add(losses, term)
            loss = ad.scale(losses, 1.0 / len(batch))
            grads = ad.backward(loss)
            grad_arrays: dict[str, np.ndarray] = {}
            for name in ("head.agg.raw", "head.ser.weight", "head.ser.bias"):
                if params[name] in grads:
                    grad_arrays[name] = grads[params[name]].data.copy()
            for task in tasks:
                if not train_lambdas:
                    continue
                if layerwise:
                    leaves = lam_leaves[task]
                    grad_arrays[f"lambda.{task}"] = np.array(
                        [grads[lv].item() if lv in grads else 0.0
                         for lv in leaves])
                else:
                    leaf = lam_leaves[task]
                    if leaf in grads:
                        grad_arrays[f"lambda.{task}"] = grads[leaf].data.copy()
            optimizer.step(values, grad_arrays, lr_mult, no_decay)
            epoch_loss += loss.item() * len(batch)
        valid = eval_values()
        history.append(_history_row(epoch, epoch_loss / len(train), valid))
        trajectory.append(snapshot(epoch + 1))
        if best_loss is None or valid["loss"] < best_loss:
            best_loss = valid["loss"]
            best = {n: v.copy() for n, v in values.items()}
            best_epoch = epoch

    if base.fingerprint != base_fp_before:
        raise RuntimeError("frozen contract violated: base changed")
    for tv in tvs:
        for n in tv.deltas:
            if tv.deltas[n].data.tobytes() != delta_bytes_before[(tv.task, n)]:
                raise RuntimeError(f"frozen contract violated: delta "
                                   f"{tv.task}/{n} changed")

    final = MergeCoefficients(
        strategy, {t: best[f"lambda.{t}"].copy() for t in tasks},
        trainable=train_lambdas)
    return AdaLTMResult(strategy, final, best["head.agg.raw"],
                        {"head.ser.weight": best["head.ser.weight"],
                         "head.ser.bias": best["head.ser.bias"]},
                        best_epoch, history, trajectory)
