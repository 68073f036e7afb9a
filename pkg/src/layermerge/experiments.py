"""Experiment orchestration: the four-part comparison grid, single-run
pipelines backing the command-line verbs, and the report writers.

One experiment run owns one output directory: the post-override config
copy, checkpoints, the per-epoch metrics CSV, the coefficient CSV where
coefficients train, a report JSON, rendered figures, and a log file.
Timestamps appear only in the log; every other artifact is byte-stable
under rerun with the same config.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import (LayeredCheckpoint, ModelConfig, init_checkpoint,
                         load_checkpoint, save_checkpoint)
from .metrics import asr_report, ser_report
from .synthdata import SynthConfig, corpus_stats, generate_corpus, save_corpus
from .taskvector import (MergeStrategy, TaskVector, extract_task_vector,
                         merge_static_global, save_task_vector)
from .training import (AdaLTMResult, ClassBalanceWeights, TrainConfig,
                       evaluate_params, finetune_task, train_adaltm,
                       train_mtl, write_coefficients_csv, write_metrics_csv)

STRATEGY_NAMES = {
    "static_global": MergeStrategy.STATIC_GLOBAL,
    "adaptive_global": MergeStrategy.ADAPTIVE_GLOBAL,
    "adaptive_layerwise": MergeStrategy.ADAPTIVE_LAYERWISE,
}
VECTOR_SETS = ("none", "asr", "ser", "dual")
DOMAINS = ("in", "out")

PART_SETUPS = {
    1: ("ser_only", "asr_only", "mtl_scratch", "mtl_static_init", "vec_dual"),
    2: ("frozen_baseline", "vec_asr", "vec_ser", "vec_dual"),
    3: ("vec_dual", "vec_dual_ood"),
    4: ("static_global", "adaptive_global", "vec_dual"),
}

SETUP_LABELS = {
    "ser_only": "SER fine-tune only",
    "asr_only": "ASR fine-tune only",
    "mtl_scratch": "MTL joint (scratch)",
    "mtl_static_init": "MTL joint (static merge init)",
    "frozen_baseline": "frozen backbone, no vectors",
    "vec_asr": "ASR vector only",
    "vec_ser": "SER vector only",
    "vec_dual": "dual vectors",
    "vec_dual_ood": "dual vectors, shifted ASR vector",
    "static_global": "dual vectors, static global",
    "adaptive_global": "dual vectors, adaptive global",
}


class ConfigError(ValueError):
    """Invalid or unknown experiment configuration content."""


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    synth: SynthConfig
    strategy: MergeStrategy = MergeStrategy.ADAPTIVE_LAYERWISE
    vectors: str = "dual"
    domain: str = "in"
    out: str | None = None
    finetune_epochs: int | None = None
    mtl_epochs: int | None = None
    merge_epochs: int | None = None

    def __post_init__(self):
        if self.vectors not in VECTOR_SETS:
            raise ConfigError(f"vectors must be one of {VECTOR_SETS}")
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}")
        for field in ("finetune_epochs", "mtl_epochs", "merge_epochs"):
            v = getattr(self, field)
            if v is not None and (not isinstance(v, int) or v < 0):
                raise ConfigError(f"stages.{field} must be a nonneg integer")
        m, s = self.model, self.synth
        if m.input_dim != s.input_dim:
            raise ConfigError("model.input_dim must match synth.input_dim")
        if m.vocab_size != s.vocab_size:
            raise ConfigError("model.vocab_size must match synth.vocab_size")
        if m.num_classes != s.num_classes:
            raise ConfigError("model.num_classes must match synth.num_classes")
        if s.frames_min < m.kernel:
            raise ConfigError("synth.frames_min shorter than the conv kernel")
        frames_out = (s.frames_max - m.kernel) // m.stride + 1
        if frames_out > m.max_frames:
            raise ConfigError("synth.frames_max exceeds the positional table")

    def stage_train(self, stage: str) -> TrainConfig:
        epochs = {"finetune": self.finetune_epochs, "mtl": self.mtl_epochs,
                  "merge": self.merge_epochs}[stage]
        if epochs is None:
            return self.train
        return dataclasses.replace(self.train, epochs=epochs)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "synth": self.synth.to_dict(),
            "strategy": self.strategy.value,
            "vectors": self.vectors,
            "domain": self.domain,
            "out": self.out,
            "stages": {"finetune_epochs": self.finetune_epochs,
                       "mtl_epochs": self.mtl_epochs,
                       "merge_epochs": self.merge_epochs},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        known = {"model", "train", "synth", "strategy", "vectors", "domain",
                 "out", "stages"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        def section(name, parser, default):
            raw = doc.get(name)
            if raw is None:
                return default
            if not isinstance(raw, dict):
                raise ConfigError(f"{name!r} must be an object")
            try:
                return parser(raw)
            except TypeError as e:
                raise ConfigError(f"bad {name!r} section: {e}") from e
            except ValueError as e:
                raise ConfigError(f"bad {name!r} section: {e}") from e

        model = section("model", ModelConfig.from_dict, ModelConfig())
        train = section("train", TrainConfig.from_dict, TrainConfig())
        synth = section("synth", SynthConfig.from_dict, SynthConfig())
        strategy_name = doc.get("strategy", "adaptive_layerwise")
        if strategy_name not in STRATEGY_NAMES:
            raise ConfigError(f"strategy must be one of "
                              f"{sorted(STRATEGY_NAMES)}")
        stages = doc.get("stages") or {}
        if not isinstance(stages, dict):
            raise ConfigError("'stages' must be an object")
        bad = set(stages) - {"finetune_epochs", "mtl_epochs", "merge_epochs"}
        if bad:
            raise ConfigError(f"unknown stages keys: {sorted(bad)}")
        return cls(model=model, train=train, synth=synth,
                   strategy=STRATEGY_NAMES[strategy_name],
                   vectors=doc.get("vectors", "dual"),
                   domain=doc.get("domain", "in"),
                   out=doc.get("out"),
                   finetune_epochs=stages.get("finetune_epochs"),
                   mtl_epochs=stages.get("mtl_epochs"),
                   merge_epochs=stages.get("merge_epochs"))


def apply_overrides(doc: dict, overrides) -> dict:
    """Dotted-path assignments, e.g. ``train.lr=3e-3``. Values parse as
    JSON with a bare-string fallback; the updated document still goes
    through full schema validation afterwards."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of form key=value")
        path, raw = item.split("=", 1)
        keys = path.split(".")
        if not all(keys):
            raise ConfigError(f"override {item!r} has an empty path segment")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        for k in keys[:-1]:
            nxt = node.setdefault(k, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {item!r} descends into a scalar")
            node = nxt
        node[keys[-1]] = value
    return doc


def load_experiment_config(path: str, overrides=(), seed: int | None = None,
                           out: str | None = None) -> ExperimentConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path!r} is not valid JSON: {e}") from e
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc.setdefault("train", {})["seed"] = seed
    if out is not None:
        doc["out"] = out
    return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# output directory plumbing

def write_json(path: str, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def make_run_dir(out: str) -> str:
    os.makedirs(out, exist_ok=True)
    return out


def open_log(run_dir: str, name: str = "run") -> logging.Logger:
    """File log is the one place timestamps are allowed."""
    logger = logging.getLogger(f"layermerge.{os.path.abspath(run_dir)}")
    logger.setLevel(logging.INFO)
    logger.propagate = False
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()
    handler = logging.FileHandler(os.path.join(run_dir, "log.txt"))
    handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
    logger.addHandler(handler)
    return logger


def close_log(logger: logging.Logger) -> None:
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()


# ---------------------------------------------------------------------------
# evaluation reports

def evaluate_checkpoint(ckpt: LayeredCheckpoint, utterances: list,
                        model_cfg: ModelConfig, seed: int,
                        tasks: tuple[str, ...] = ("ser", "asr")) -> dict:
    """Point metrics with bootstrap intervals plus the confusion matrix."""
    cbw = ClassBalanceWeights.uniform(model_cfg.num_classes)
    ev = evaluate_params(ckpt.params, model_cfg, utterances, tasks, cbw, 0.0)
    report: dict = {"count": ev["count"]}
    if "ser" in tasks:
        report.update(ser_report(ev["ser_pairs"], model_cfg.num_classes,
                                 seed=seed))
        report["loss_ser"] = ev["loss_ser"]
    if "asr" in tasks:
        report.update(asr_report(ev["asr_pairs"], seed=seed))
        report["loss_asr"] = ev["loss_asr"]
    return report


def format_suite_table(report: dict) -> str:
    """Aligned text table over all setups, one row per setup."""
    header = f"{'setup':<34} {'UAR [95% CI]':<25} {'Pre.':>8} " \
             f"{'MaF1':>8} {'TER':>8}"
    lines = [header, "-" * len(header)]
    for name in report["order"]:
        entry = report["setups"][name]
        label = SETUP_LABELS.get(name, name)
        if "error" in entry:
            lines.append(f"{label:<34} FAILED: {entry['error']['message']}")
            continue
        m = entry["metrics"]
        u = m["uar"]
        uar = f"{u['point']:.4f} [{u['ci_lo']:.4f},{u['ci_hi']:.4f}]"
        ter = m.get("token_error_rate", {}).get("point")
        ter_s = f"{ter:>8.4f}" if ter is not None else f"{'-':>8}"
        lines.append(f"{label:<34} {uar:<25} "
                     f"{m['precision']['point']:>8.4f} "
                     f"{m['macro_f1']['point']:>8.4f} {ter_s}")
    if report.get("parts"):
        lines.append("")
        for part in sorted(report["parts"]):
            names = ", ".join(report["parts"][part])
            lines.append(f"part {part}: {names}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# pipeline stages shared by the suite and the single verbs

@dataclass
class SuiteStages:
    corpus_in: dict
    corpus_out: dict
    base: LayeredCheckpoint
    ser_ft: LayeredCheckpoint
    asr_ft: LayeredCheckpoint
    asr_ft_ood: LayeredCheckpoint
    tv_ser: TaskVector
    tv_asr: TaskVector
    tv_asr_ood: TaskVector


def prepare_stages(cfg: ExperimentConfig, run_dir: str,
                   logger: logging.Logger) -> SuiteStages:
    """Everything the setups share: corpora, the base model, both
    fine-tunes, the shifted fine-tune, and the three vectors. All of it
    is saved under ``stages/`` so each setup directory can reference the
    exact artifact bytes it consumed."""
    stages_dir = os.path.join(run_dir, "stages")
    os.makedirs(stages_dir, exist_ok=True)
    p = lambda name: os.path.join(stages_dir, name)

    logger.info("generating corpora")
    # synth.domain_shift names the out-of-domain magnitude; the in-domain
    # corpus always gets shift 0.
    in_cfg = dataclasses.replace(cfg.synth, domain_shift=0.0)
    corpus_in = generate_corpus(in_cfg)
    if cfg.synth.domain_shift == 0.0:
        logger.info("synth.domain_shift is 0; shifted corpus matches in-domain"
                    " distribution")
    corpus_out = generate_corpus(cfg.synth)
    save_corpus(corpus_in, in_cfg, p("corpus_in"))
    save_corpus(corpus_out, cfg.synth, p("corpus_out"))
    write_json(p("corpus_in.stats.json"), corpus_stats(corpus_in["train"]))

    base = init_checkpoint(cfg.model, seed=cfg.train.seed)
    save_checkpoint(base, p("base"))

    ft_cfg = cfg.stage_train("finetune")
    logger.info("fine-tuning ser (%d epochs)", ft_cfg.epochs)
    ser_ft, hist = finetune_task(base, corpus_in, "ser", ft_cfg)
    save_checkpoint(ser_ft, p("ser_ft"))
    write_metrics_csv(hist, p("ser_ft.metrics.csv"))
    logger.info("fine-tuning asr (%d epochs)", ft_cfg.epochs)
    asr_ft, hist = finetune_task(base, corpus_in, "asr", ft_cfg)
    save_checkpoint(asr_ft, p("asr_ft"))
    write_metrics_csv(hist, p("asr_ft.metrics.csv"))
    logger.info("fine-tuning asr on the shifted corpus")
    asr_ft_ood, hist = finetune_task(base, corpus_out, "asr", ft_cfg)
    save_checkpoint(asr_ft_ood, p("asr_ft_ood"))
    write_metrics_csv(hist, p("asr_ft_ood.metrics.csv"))

    tv_ser = extract_task_vector(ser_ft, base)
    tv_asr = extract_task_vector(asr_ft, base)
    tv_asr_ood = extract_task_vector(asr_ft_ood, base)
    save_task_vector(tv_ser, p("tv_ser"))
    save_task_vector(tv_asr, p("tv_asr"))
    save_task_vector(tv_asr_ood, p("tv_asr_ood"))
    logger.info("task vectors extracted")
    return SuiteStages(corpus_in, corpus_out, base, ser_ft, asr_ft,
                       asr_ft_ood, tv_ser, tv_asr, tv_asr_ood)


def run_merge_setup(cfg: ExperimentConfig, stages: SuiteStages,
                    vectors: list[TaskVector], strategy: MergeStrategy,
                    setup_dir: str) -> tuple[LayeredCheckpoint, AdaLTMResult]:
    """Coefficient training on the in-domain corpus; writes checkpoints,
    metrics, the coefficient trajectory, and the coefficient artifact."""
    os.makedirs(setup_dir, exist_ok=True)
    result = train_adaltm(stages.base, vectors, stages.corpus_in, strategy,
                          cfg.stage_train("merge"))
    merged = result.merged_checkpoint(stages.base, vectors)
    save_checkpoint(merged, os.path.join(setup_dir, "merged"))
    write_metrics_csv(result.history, os.path.join(setup_dir, "metrics.csv"))
    num_groups = cfg.model.num_layers + 1
    write_coefficients_csv(result.trajectory, num_groups,
                           os.path.join(setup_dir, "coefficients.csv"))
    write_json(os.path.join(setup_dir, "coefficients.json"),
               coefficients_doc(result, num_groups))
    return merged, result


def coefficients_doc(result: AdaLTMResult, num_groups: int) -> dict:
    return {
        "strategy": result.strategy.value,
        "num_groups": num_groups,
        "best_epoch": result.best_epoch,
        "values": {t: np.asarray(v).tolist()
                   for t, v in result.coefficients.values.items()},
        "agg_raw": result.agg_raw.tolist(),
        "trajectory": result.trajectory,
    }


def run_mtl_setup(cfg: ExperimentConfig, stages: SuiteStages,
                  static_init: bool, setup_dir: str) -> LayeredCheckpoint:
    os.makedirs(setup_dir, exist_ok=True)
    init = stages.base
    if static_init:
        init = merge_static_global(stages.base, [stages.tv_asr, stages.tv_ser])
    ckpt, hist = train_mtl(init, stages.corpus_in, cfg.stage_train("mtl"))
    save_checkpoint(ckpt, os.path.join(setup_dir, "final"))
    write_metrics_csv(hist, os.path.join(setup_dir, "metrics.csv"))
    return ckpt


def build_setup(name: str, cfg: ExperimentConfig, stages: SuiteStages,
                setup_dir: str) -> LayeredCheckpoint:
    """Produce the evaluation-ready checkpoint for one named setup."""
    merge = lambda vecs, strat: run_merge_setup(cfg, stages, vecs, strat,
                                                setup_dir)[0]
    layerwise = cfg.strategy
    if name == "ser_only":
        return stages.ser_ft
    if name == "asr_only":
        return stages.asr_ft
    if name == "mtl_scratch":
        return run_mtl_setup(cfg, stages, False, setup_dir)
    if name == "mtl_static_init":
        return run_mtl_setup(cfg, stages, True, setup_dir)
    if name == "frozen_baseline":
        return merge([], layerwise)
    if name == "vec_asr":
        return merge([stages.tv_asr], layerwise)
    if name == "vec_ser":
        return merge([stages.tv_ser], layerwise)
    if name == "vec_dual":
        return merge([stages.tv_asr, stages.tv_ser], layerwise)
    if name == "vec_dual_ood":
        return merge([stages.tv_asr_ood, stages.tv_ser], layerwise)
    if name == "static_global":
        return merge([stages.tv_asr, stages.tv_ser],
                     MergeStrategy.STATIC_GLOBAL)
    if name == "adaptive_global":
        return merge([stages.tv_asr, stages.tv_ser],
                     MergeStrategy.ADAPTIVE_GLOBAL)
    raise ConfigError(f"unknown setup {name!r}")


def run_suite(cfg: ExperimentConfig, run_dir: str,
              parts: tuple[int, ...] = (1, 2, 3, 4)) -> dict:
    """The comparison grid. Every requested setup lands in the report:
    either with metrics or with the error that sank it. The report is
    written even when setups fail, so partial results survive."""
    for part in parts:
        if part not in PART_SETUPS:
            raise ConfigError(f"unknown suite part {part}; choose from "
                              f"{sorted(PART_SETUPS)}")
    run_dir = make_run_dir(run_dir)
    logger = open_log(run_dir)
    write_json(os.path.join(run_dir, "config.json"), cfg.to_dict())
    order: list[str] = []
    for part in parts:
        for name in PART_SETUPS[part]:
            if name not in order:
                order.append(name)
    report: dict = {
        "parts": {str(p): list(PART_SETUPS[p]) for p in parts},
        "order": order,
        "setups": {},
    }
    try:
        stages = prepare_stages(cfg, run_dir, logger)
        test_utts = stages.corpus_in["test"]
        for name in order:
            setup_dir = os.path.join(run_dir, "setups", name)
            os.makedirs(setup_dir, exist_ok=True)
            logger.info("setup %s", name)
            try:
                ckpt = build_setup(name, cfg, stages, setup_dir)
                metrics = evaluate_checkpoint(ckpt, test_utts, cfg.model,
                                              cfg.train.seed)
                entry = {"label": SETUP_LABELS.get(name, name),
                         "metrics": metrics}
            except Exception as e:  # noqa: BLE001 - per-setup isolation
                logger.info("setup %s failed: %s", name, e)
                entry = {"label": SETUP_LABELS.get(name, name),
                         "error": {"type": type(e).__name__,
                                   "message": str(e)}}
            report["setups"][name] = entry
            write_json(os.path.join(setup_dir, "report.json"), entry)
        write_json(os.path.join(run_dir, "report.json"), report)
        with open(os.path.join(run_dir, "table.txt"), "w") as f:
            f.write(format_suite_table(report))
        render_suite_figures(cfg, run_dir, report)
        logger.info("suite complete")
    finally:
        close_log(logger)
    return report


def render_suite_figures(cfg: ExperimentConfig, run_dir: str,
                         report: dict) -> None:
    from . import figures
    fig_dir = os.path.join(run_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    figures.plot_suite_comparison(report,
                                  os.path.join(fig_dir, "comparison.png"))
    for name in report["order"]:
        coeff_path = os.path.join(run_dir, "setups", name,
                                  "coefficients.json")
        if os.path.exists(coeff_path):
            with open(coeff_path) as f:
                doc = json.load(f)
            figures.plot_lambda_trajectories(
                doc["trajectory"], os.path.join(fig_dir, f"lambda_{name}.png"))
        metrics_path = os.path.join(run_dir, "setups", name, "metrics.csv")
        if os.path.exists(metrics_path):
            figures.plot_training_curves(
                metrics_path, os.path.join(fig_dir, f"curves_{name}.png"))


def suite_failures(report: dict) -> list[str]:
    return [n for n in report["order"] if "error" in report["setups"][n]]
