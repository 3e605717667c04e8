"""Command-line entry point: data generation, training, evaluation,
injection-mode ablations, and gate inspection.

Configuration lives in a flat "key = value" text file with dotted keys
(model.*, train.*, data.*, plus a bare seed); --override key=value wins
over the file, --seed wins over both for the master seed. Exit codes:
0 success, 2 configuration, 3 missing input, 4 numeric failure,
5 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, fields

import numpy as np

from . import __version__
from .backbone import (
    CheckpointError,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, ModelConfig, partition_preset
from .fusion import gate_table
from .metrics import write_metric_csv
from .synthdata import (
    Vocabulary,
    build_biased_pretrain_corpus,
    default_bias_spec,
    generate_dataset,
    load_corpus,
    load_samples,
    save_corpus,
    save_samples,
)
from .tensor import ContractError
from .trainer import (
    LOG_HEADER,
    NumericError,
    TrainConfig,
    evaluate,
    finetune,
    pretrain_lm,
    run_ablation,
    sign_test,
    write_ablation_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5

DATA_DEFAULTS = {
    "data.n_total": "2000",
    "data.ratios": "0.7,0.1,0.2",
    "data.marginal": "0.3",
    "data.corpus_size": "20000",
}

GATED_MODES = ("shared_gate", "layer_gate")


# -- configuration ------------------------------------------------------------

def parse_config_text(text: str) -> dict:
    """Flat dotted-key map from "key = value" lines; # starts a comment."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {ln}: empty key or value in {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config_map(args) -> dict:
    cfg = {}
    if args.config:
        _require(args.config)
        with open(args.config, encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read())
    for item in args.override or []:
        if "=" not in item:
            raise ConfigError(f"--override expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        cfg[key] = value
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    return cfg


def _coerce(value: str, kind: str, key: str):
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind}") from None


def build_model_config(cfg_map: dict) -> ModelConfig:
    kinds = {f.name: f.type for f in fields(ModelConfig)}
    kwargs = {}
    problems = []
    for key, value in cfg_map.items():
        if not key.startswith("model."):
            continue
        name = key[len("model."):]
        if name not in kinds:
            problems.append(f"{key}: unknown model field")
            continue
        kwargs[name] = _coerce(value, kinds[name], key)
    if problems:
        raise ConfigError("; ".join(problems))
    return ModelConfig(**kwargs)


def build_train_config(cfg_map: dict, master_seed: int) -> TrainConfig:
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    kwargs = {"seed": master_seed}
    for key, value in cfg_map.items():
        if not key.startswith("train."):
            continue
        name = key[len("train."):]
        if name == "lambda":
            kwargs["lam"] = _coerce(value, "float", key)
        elif name == "partition":
            kwargs["partition"] = partition_preset(value)
        elif name == "seed":
            raise ConfigError("train.seed is owned by the master seed; set 'seed' or --seed")
        elif name in kinds:
            kwargs[name] = _coerce(value, kinds[name], key)
        else:
            raise ConfigError(f"{key}: unknown train field")
    return TrainConfig(**kwargs)


def data_params(cfg_map: dict) -> dict:
    merged = dict(DATA_DEFAULTS)
    for key, value in cfg_map.items():
        if key.startswith("data."):
            if key not in DATA_DEFAULTS:
                raise ConfigError(f"{key}: unknown data field")
            merged[key] = value
    ratios = tuple(_coerce(p, "float", "data.ratios") for p in merged["data.ratios"].split(","))
    if len(ratios) != 3:
        raise ConfigError(f"data.ratios needs three comma-separated values, got {merged['data.ratios']!r}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"data.ratios must sum to 1, got {merged['data.ratios']!r}")
    return {
        "n_total": _coerce(merged["data.n_total"], "int", "data.n_total"),
        "ratios": ratios,
        "marginal": _coerce(merged["data.marginal"], "float", "data.marginal"),
        "corpus_size": _coerce(merged["data.corpus_size"], "int", "data.corpus_size"),
    }


def master_seed(cfg_map: dict) -> int:
    return _coerce(cfg_map.get("seed", "0"), "int", "seed")


# -- artifacts -----------------------------------------------------------------

def _require(path: str):
    if not os.path.exists(path):
        raise FileNotFoundError(path)


def _atomic_write(path: str, text: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_manifest(out_dir: str, command: str, cfg_map: dict, model_cfg: ModelConfig | None,
                   train_cfg: TrainConfig | None, inputs: list, outputs: list,
                   seed: int, started: float, extra: dict | None = None):
    payload = {
        "command": command,
        "config": dict(sorted(cfg_map.items())),
        "model_config": asdict(model_cfg) if model_cfg else None,
        "train_config": asdict(train_cfg) if train_cfg else None,
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
        "master_seed": seed,
        "tool_version": __version__,
        "duration_seconds": round(time.time() - started, 3),
    }
    if extra:
        payload.update(extra)
    _atomic_write(os.path.join(out_dir, "manifest.json"), json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args):
    started = time.time()
    cfg_map = load_config_map(args)
    mc = build_model_config(cfg_map)
    dp = data_params(cfg_map)
    seed = master_seed(cfg_map)
    os.makedirs(args.out, exist_ok=True)

    splits = generate_dataset(mc, dp["n_total"], dp["ratios"], seed=seed, marginal=dp["marginal"])
    bias = default_bias_spec(mc.n_categories, dp["marginal"])
    corpus = build_biased_pretrain_corpus(bias, dp["corpus_size"], seed)

    outputs = []
    for name in ("train", "val", "test"):
        path = os.path.join(args.out, f"{name}.jsonl")
        save_samples(path, splits[name])
        outputs.append(path)
    corpus_path = os.path.join(args.out, "corpus.txt")
    save_corpus(corpus_path, corpus)
    outputs.append(corpus_path)

    counts = {name: len(splits[name]) for name in ("train", "val", "test")}
    counts["corpus"] = len(corpus)
    write_manifest(args.out, "gen-data", cfg_map, mc, None, [], outputs, seed, started,
                   extra={"counts": counts})


def cmd_train(args):
    started = time.time()
    cfg_map = load_config_map(args)
    mc = build_model_config(cfg_map)
    seed = master_seed(cfg_map)
    tc = build_train_config(cfg_map, seed)
    os.makedirs(args.out, exist_ok=True)
    lines = []
    inputs = [args.data]

    if args.phase == "pretrain":
        corpus_path = os.path.join(args.data, "corpus.txt") if os.path.isdir(args.data) else args.data
        _require(corpus_path)
        with open(corpus_path, encoding="utf-8") as fh:
            head = fh.readline().strip()
        if head.startswith("{"):
            raise ConfigError("pretraining needs a text corpus, not an image dataset file")
        corpus = load_corpus(corpus_path)
        model, history = pretrain_lm(corpus, mc, tc, log=lines.append)
        extra = {"holdout_ppl": history["holdout_ppl"]}
    else:
        train_path = os.path.join(args.data, "train.jsonl")
        val_path = os.path.join(args.data, "val.jsonl")
        _require(train_path)
        _require(val_path)
        splits = {"train": load_samples(train_path), "val": load_samples(val_path)}
        pretrained = None
        if args.init:
            _require(args.init)
            _, pretrained = load_checkpoint(args.init)
            inputs.append(args.init)
        model, history = finetune(splits, mc, tc, pretrained=pretrained, log=lines.append)
        extra = {"val_f1": history["val_f1"], "best_epoch": history["best_epoch"]}

    ckpt_path = os.path.join(args.out, "checkpoint.ckpt")
    save_checkpoint(ckpt_path, model.cfg, model.params)
    log_path = os.path.join(args.out, "training.log")
    _atomic_write(log_path, "\n".join([LOG_HEADER] + lines) + "\n")
    write_manifest(args.out, f"train:{args.phase}", cfg_map, mc, tc, inputs,
                   [ckpt_path, log_path], seed, started, extra=extra)


def cmd_eval(args):
    started = time.time()
    cfg_map = load_config_map(args)
    seed = master_seed(cfg_map)
    _require(args.ckpt)
    _require(args.data)
    model = model_from_checkpoint(args.ckpt)
    samples = load_samples(args.data)
    report, rows = evaluate(model, samples)
    os.makedirs(args.out, exist_ok=True)

    csv_path = os.path.join(args.out, "metrics.csv")
    write_metric_csv(report, csv_path)
    json_path = os.path.join(args.out, "metrics.json")
    _atomic_write(json_path, json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
    gen_path = os.path.join(args.out, "generations.jsonl")
    gen_lines = [
        json.dumps({
            "id": row["id"],
            "generated": " ".join(row["generated"]),
            "pred_labels": [int(v) for v in row["pred_labels"]],
            "true_labels": [int(v) for v in row["true_labels"]],
        })
        for row in rows
    ]
    _atomic_write(gen_path, "\n".join(gen_lines) + "\n")
    write_manifest(args.out, "eval", cfg_map, model.cfg, None, [args.ckpt, args.data],
                   [csv_path, json_path, gen_path], seed, started)


def cmd_ablate(args):
    started = time.time()
    cfg_map = load_config_map(args)
    mc = build_model_config(cfg_map)
    seed = master_seed(cfg_map)
    tc = build_train_config(cfg_map, seed)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    seeds = [_coerce(s.strip(), "int", "--seeds") for s in args.seeds.split(",") if s.strip()]
    if len(seeds) < 2:
        raise ConfigError("the significance summary needs at least 2 seeds")

    for name in ("train", "val", "test"):
        _require(os.path.join(args.data, f"{name}.jsonl"))
    splits = {name: load_samples(os.path.join(args.data, f"{name}.jsonl"))
              for name in ("train", "val", "test")}
    inputs = [args.data]
    pretrained = None
    if args.init:
        _require(args.init)
        _, pretrained = load_checkpoint(args.init)
        inputs.append(args.init)

    os.makedirs(args.out, exist_ok=True)
    progress = []
    rows = run_ablation(splits, mc, tc, modes, seeds, pretrained=pretrained, log=progress.append)
    csv_path = os.path.join(args.out, "ablation.csv")
    write_ablation_csv(csv_path, rows)

    if {"layer_gate", "none"} <= set(modes):
        wins, n = sign_test(rows)
        summary = f"layer_gate beats none on {wins}/{n} seeds (paired by seed, macro-F1)"
    else:
        summary = "sign test skipped: needs both layer_gate and none among the modes"
    summary_path = os.path.join(args.out, "summary.txt")
    _atomic_write(summary_path, summary + "\n")
    write_manifest(args.out, "ablate", cfg_map, mc, tc, inputs, [csv_path, summary_path],
                   seed, started, extra={"modes": modes, "seeds": seeds, "summary": summary})


def cmd_inspect_gates(args):
    started = time.time()
    cfg_map = load_config_map(args)
    seed = master_seed(cfg_map)
    _require(args.ckpt)
    _require(args.data)
    model = model_from_checkpoint(args.ckpt)
    if model.cfg.injection_mode not in GATED_MODES:
        raise ConfigError(f"injection_mode {model.cfg.injection_mode!r} has no gates to inspect")
    samples = load_samples(args.data)
    match = [s for s in samples if s.id == args.sample_id]
    if not match:
        raise ConfigError(f"unknown sample id {args.sample_id}")
    sample = match[0]

    vocab = Vocabulary(model.cfg.n_categories)
    ids = vocab.encode(sample.report)
    image = sample.image(model.cfg).astype(np.float32)
    sink = []
    model.multimodal_logits(image[None], ids[None, :-1], gate_sink=sink)
    rows = gate_table(sink)

    os.makedirs(args.out, exist_ok=True)
    table_path = os.path.join(args.out, "gates.csv")
    lines = ["layer,position,mean_gate,max_gate,min_gate"]
    lines += [f"{l},{t},{m:.8f},{mx:.8f},{mn:.8f}" for l, t, m, mx, mn in rows]
    _atomic_write(table_path, "\n".join(lines) + "\n")
    write_manifest(args.out, "inspect-gates", cfg_map, model.cfg, None, [args.ckpt, args.data],
                   [table_path], seed, started, extra={"sample_id": args.sample_id})


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leadlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat dotted-key config file")
        sp.add_argument("--seed", type=int, help="master seed (wins over the config file)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")

    sp = sub.add_parser("gen-data", help="synthesize dataset splits and the biased corpus")
    common(sp)

    sp = sub.add_parser("train", help="pretrain the language model or finetune the full model")
    sp.add_argument("--phase", choices=("pretrain", "finetune"), required=True)
    sp.add_argument("--data", required=True, help="gen-data output directory (or corpus file)")
    sp.add_argument("--init", help="initial checkpoint (finetune: the pretrained decoder)")
    common(sp)

    sp = sub.add_parser("eval", help="greedy-decode a split and score it")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True, help="a samples .jsonl file")
    common(sp)

    sp = sub.add_parser("ablate", help="train and test every (injection mode, seed) pair")
    sp.add_argument("--data", required=True, help="gen-data output directory")
    sp.add_argument("--init", help="shared pretrained checkpoint")
    sp.add_argument("--modes", default="none,aux_only,shared_gate,layer_add,layer_gate")
    sp.add_argument("--seeds", default="0,1,2,3,4")
    common(sp)

    sp = sub.add_parser("inspect-gates", help="dump per-(layer, position) gate statistics")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True, help="a samples .jsonl file")
    sp.add_argument("--sample-id", type=int, required=True)
    common(sp)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect-gates": cmd_inspect_gates,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
        return EXIT_OK
    except (ConfigError, ContractError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"missing input: {err}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as err:
        print("checkpoint mismatch:", file=sys.stderr)
        for line in err.mismatches:
            print(f"  {line}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
