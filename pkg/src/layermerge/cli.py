"""Command-line front end.

Verbs: gen-data, finetune, extract, merge, train-mtl, train-merge, eval,
export-coeffs, run-suite. Exit code 0 on success, 2 on configuration or
input validation errors, 1 on runtime failures; failures emit a single
JSON line on stderr. Every verb that owns an output directory writes the
post-override config there, so the artifacts are self-describing.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .checkpoint import (CheckpointError, ModelConfig, init_checkpoint,
                         load_checkpoint, save_checkpoint)
from .experiments import (ConfigError, ExperimentConfig, coefficients_doc,
                          evaluate_checkpoint, format_suite_table,
                          load_experiment_config, make_run_dir, open_log,
                          close_log, prepare_stages, run_suite,
                          suite_failures, write_json)
from .synthdata import corpus_stats, generate_corpus, load_corpus, save_corpus
from .taskvector import (MergeCoefficients, MergeStrategy,
                         extract_task_vector, load_task_vector,
                         merge_layerwise, save_task_vector)
from .training import (finetune_task, train_adaltm, train_mtl,
                       write_coefficients_csv, write_metrics_csv)


class _CliParser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("ArgumentError", message)
        raise SystemExit(2)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def _load_cfg(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("this command needs --config")
    return load_experiment_config(args.config, overrides=args.set or (),
                                  seed=args.seed, out=args.out)


def _corpus_for(cfg: ExperimentConfig, path: str | None, domain: str):
    if path:
        corpus, _ = load_corpus(path)
        return corpus
    synth = cfg.synth if domain == "out" else dataclasses.replace(
        cfg.synth, domain_shift=0.0)
    return generate_corpus(synth)


def _base_for(cfg: ExperimentConfig, path: str | None):
    if path:
        return load_checkpoint(path)
    return init_checkpoint(cfg.model, seed=cfg.train.seed)


def _out_dir(args) -> str:
    if not args.out:
        raise ConfigError("this command needs --out")
    return make_run_dir(args.out)


# ---------------------------------------------------------------------------
# verbs

def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    synth = cfg.synth if cfg.domain == "out" else dataclasses.replace(
        cfg.synth, domain_shift=0.0)
    corpus = generate_corpus(synth)
    save_corpus(corpus, synth, os.path.join(out, "corpus"))
    write_json(os.path.join(out, "stats.json"),
               {split: corpus_stats(utts) for split, utts in corpus.items()})
    write_json(os.path.join(out, "config.json"), cfg.to_dict())
    print(f"wrote corpus ({cfg.domain}-domain) to {out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    log = open_log(out)
    try:
        base = _base_for(cfg, args.base)
        corpus = _corpus_for(cfg, args.corpus, cfg.domain)
        log.info("fine-tuning %s", args.task)
        ckpt, history = finetune_task(base, corpus, args.task,
                                      cfg.stage_train("finetune"))
        save_checkpoint(base, os.path.join(out, "base"))
        save_checkpoint(ckpt, os.path.join(out, "finetuned"))
        write_metrics_csv(history, os.path.join(out, "metrics.csv"))
        write_json(os.path.join(out, "config.json"), cfg.to_dict())
    finally:
        close_log(log)
    print(f"fine-tuned {args.task} checkpoint in {out}")
    return 0


def cmd_extract(args) -> int:
    base = load_checkpoint(args.base)
    ft = load_checkpoint(args.finetuned)
    tv = extract_task_vector(ft, base)
    save_task_vector(tv, args.out)
    print(f"task vector {tv.task!r} (max |delta| {tv.max_abs():.6g}) "
          f"-> {args.out}")
    return 0


def _coefficients_from_args(args, tasks: list[str], num_groups: int
                            ) -> MergeCoefficients:
    if args.coeffs:
        with open(args.coeffs) as f:
            doc = json.load(f)
        if "values" not in doc:
            raise ConfigError(f"{args.coeffs!r} has no 'values' field")
        strategy = MergeStrategy(doc.get("strategy", "static_global"))
        values = {t: np.asarray(v, dtype=np.float64)
                  for t, v in doc["values"].items()}
        missing = [t for t in tasks if t not in values]
        if missing:
            raise ConfigError(f"coefficients missing tasks {missing}")
        return MergeCoefficients(strategy, values, trainable=False)
    lam = 0.5 if args.lam is None else args.lam
    return MergeCoefficients(
        MergeStrategy.STATIC_GLOBAL,
        {t: np.asarray(float(lam)) for t in tasks}, trainable=False)


def cmd_merge(args) -> int:
    base = load_checkpoint(args.base)
    tvs = [load_task_vector(p) for p in args.vector or []]
    num_groups = max(base.layer_index.values()) + 1
    coeffs = _coefficients_from_args(args, [tv.task for tv in tvs], num_groups)
    merged = merge_layerwise(base, tvs, coeffs)
    save_checkpoint(merged, args.out)
    print(f"merged {len(tvs)} vector(s) -> {args.out}")
    return 0


def cmd_train_mtl(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    log = open_log(out)
    try:
        base = _base_for(cfg, args.base)
        corpus = _corpus_for(cfg, args.corpus, "in")
        init = base
        if args.static_init:
            if not args.vector:
                raise ConfigError("--static-init needs --vector files")
            from .taskvector import merge_static_global
            tvs = [load_task_vector(p) for p in args.vector]
            init = merge_static_global(base, tvs)
        log.info("joint training (mix %.3f)", cfg.train.mtl_loss_mix)
        ckpt, history = train_mtl(init, corpus, cfg.stage_train("mtl"))
        save_checkpoint(ckpt, os.path.join(out, "final"))
        write_metrics_csv(history, os.path.join(out, "metrics.csv"))
        write_json(os.path.join(out, "config.json"), cfg.to_dict())
    finally:
        close_log(log)
    print(f"joint checkpoint in {out}")
    return 0


def cmd_train_merge(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    log = open_log(out)
    try:
        corpus = _corpus_for(cfg, args.corpus, "in")
        if args.base:
            base = load_checkpoint(args.base)
            tvs = [load_task_vector(p) for p in args.vector or []]
        else:
            # no prebuilt inputs: mint the whole stage chain here
            stages = prepare_stages(cfg, out, log)
            base = stages.base
            corpus = stages.corpus_in
            wanted = {"none": [], "asr": [stages.tv_asr],
                      "ser": [stages.tv_ser],
                      "dual": [stages.tv_asr, stages.tv_ser]}
            if cfg.domain == "out":
                wanted["dual"] = [stages.tv_asr_ood, stages.tv_ser]
                wanted["asr"] = [stages.tv_asr_ood]
            tvs = wanted[cfg.vectors]
        log.info("training merge coefficients (%s, %d vectors)",
                 cfg.strategy.value, len(tvs))
        result = train_adaltm(base, tvs, corpus, cfg.strategy,
                              cfg.stage_train("merge"))
        merged = result.merged_checkpoint(base, tvs)
        num_groups = max(base.layer_index.values()) + 1
        save_checkpoint(merged, os.path.join(out, "merged"))
        write_metrics_csv(result.history, os.path.join(out, "metrics.csv"))
        write_coefficients_csv(result.trajectory, num_groups,
                               os.path.join(out, "coefficients.csv"))
        write_json(os.path.join(out, "coefficients.json"),
                   coefficients_doc(result, num_groups))
        write_json(os.path.join(out, "config.json"), cfg.to_dict())
    finally:
        close_log(log)
    print(f"merged checkpoint and coefficients in {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if "config" not in ckpt.meta:
        raise ConfigError("checkpoint carries no model config")
    model_cfg = ModelConfig.from_dict(ckpt.meta["config"])
    if args.corpus:
        corpus, _ = load_corpus(args.corpus)
    elif args.config:
        cfg = _load_cfg(args)
        corpus = _corpus_for(cfg, None, cfg.domain)
    else:
        raise ConfigError("eval needs --corpus or --config")
    if args.split not in corpus:
        raise ConfigError(f"split {args.split!r} not in corpus")
    seed = args.seed if args.seed is not None else 0
    report = evaluate_checkpoint(ckpt, corpus[args.split], model_cfg, seed)
    out = _out_dir(args)
    write_json(os.path.join(out, "report.json"), report)
    u = report["uar"]
    print(f"uar {u['point']:.4f} [{u['ci_lo']:.4f},{u['ci_hi']:.4f}]  "
          f"ter {report['token_error_rate']['point']:.4f}  ({out})")
    return 0


def cmd_export_coeffs(args) -> int:
    path = args.coeffs
    if args.run:
        path = os.path.join(args.run, "coefficients.json")
    if not path:
        raise ConfigError("export-coeffs needs --coeffs or --run")
    with open(path) as f:
        doc = json.load(f)
    for key in ("trajectory", "num_groups"):
        if key not in doc:
            raise ConfigError(f"{path!r} has no {key!r} field")
    out = args.out or os.path.join(os.path.dirname(path), "coefficients.csv")
    write_coefficients_csv(doc["trajectory"], doc["num_groups"], out)
    from . import figures
    figures.plot_lambda_trajectories(doc["trajectory"],
                                     os.path.splitext(out)[0] + ".png")
    print(f"wrote {out}")
    return 0


def cmd_run_suite(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    parts = tuple(int(p) for p in args.parts.split(",")) if args.parts \
        else (1, 2, 3, 4)
    report = run_suite(cfg, out, parts)
    sys.stdout.write(format_suite_table(report))
    failed = suite_failures(report)
    if failed:
        _emit_error("SetupFailure", f"setups failed: {', '.join(failed)}")
        return 1
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _CliParser(prog="layermerge",
                        description="task-vector merging experiments")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, parents=[common], **kw)
        p.set_defaults(func=fn)
        return p

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override train.seed")
    common.add_argument("--out", help="output directory or file prefix")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted-path config override, e.g. train.lr=3e-3")

    add("gen-data", cmd_gen_data, help="generate and save a synthetic corpus")

    p = add("finetune", cmd_finetune, help="single-task fine-tune")
    p.add_argument("--task", required=True, choices=("ser", "asr"))
    p.add_argument("--base", help="base checkpoint (default: seeded init)")
    p.add_argument("--corpus", help="corpus file (default: generated)")

    p = add("extract", cmd_extract, help="extract a task vector")
    p.add_argument("--base", required=True)
    p.add_argument("--finetuned", required=True)

    p = add("merge", cmd_merge, help="fixed-coefficient merge")
    p.add_argument("--base", required=True)
    p.add_argument("--vector", action="append", help="task vector file")
    p.add_argument("--coeffs", help="coefficients JSON file")
    p.add_argument("--lam", type=float, help="global coefficient value")

    p = add("train-mtl", cmd_train_mtl, help="joint two-task training")
    p.add_argument("--base", help="init checkpoint (default: seeded init)")
    p.add_argument("--corpus")
    p.add_argument("--static-init", action="store_true",
                   help="start from the 0.5 static merge of --vector files")
    p.add_argument("--vector", action="append")

    p = add("train-merge", cmd_train_merge,
            help="train merging coefficients on a frozen backbone")
    p.add_argument("--base", help="base checkpoint; omit to mint everything")
    p.add_argument("--corpus")
    p.add_argument("--vector", action="append")

    p = add("eval", cmd_eval, help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--split", default="test")

    p = add("export-coeffs", cmd_export_coeffs,
            help="emit the coefficient trajectory CSV and figure")
    p.add_argument("--coeffs", help="coefficients JSON artifact")
    p.add_argument("--run", help="run directory containing coefficients.json")

    p = add("run-suite", cmd_run_suite, help="run the comparison grid")
    p.add_argument("--parts", help="comma list from 1,2,3,4 (default all)")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError, KeyError,
            FileNotFoundError, json.JSONDecodeError, NotADirectoryError) as e:
        _emit_error(type(e).__name__, str(e))
        return 2
    except Exception as e:  # noqa: BLE001 - runtime failure boundary
        _emit_error(type(e).__name__, str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
