"""Optimization loop: decoupled-weight-decay Adam, cosine schedule with
linear warmup, gradient accumulation, freeze configurations, and the
pretrain / finetune / evaluate / ablation phases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import (
    LeadModel,
    generate_greedy_batch,
    group_hashes,
    load_arrays,
    set_trainable,
)
from .config import (
    PARAM_GROUPS,
    PARTITION_PRESETS,
    ConfigError,
    ModelConfig,
    ParameterPartition,
    stream,
)
from .losses import LossReport, classification_loss, generation_loss, total_loss
from .metrics import EvalReport, evaluate_pairs
from .synthdata import Vocabulary, extract_labels
from .tensor import ContractError, backward, is_live, mul, no_grad

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    grad_accum_steps: int = 1
    peak_lr: float = 3e-3
    warmup_fraction: float = 0.03
    weight_decay: float = 0.01
    lam: float = 4.0
    seed: int = 0
    partition: ParameterPartition = field(default_factory=lambda: PARTITION_PRESETS["hybrid"])
    injection_mode: str = "layer_gate"
    max_new_tokens: int = 0   # 0: one full report plus the stop token
    val_subset: int = 0       # 0: score every validation sample
    holdout_fraction: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be > 0, got {self.peak_lr}")
        if self.grad_accum_steps < 1:
            raise ConfigError(f"grad_accum_steps must be >= 1, got {self.grad_accum_steps}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lam < 0:
            raise ConfigError(f"lambda weight must be >= 0, got {self.lam}")
        self.partition.validate()


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over the warmup span, then half-cosine to 0."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(cfg.warmup_fraction * total_steps))
    if step < warmup:
        return cfg.peak_lr * step / warmup
    span = total_steps - warmup
    if span == 0:
        return cfg.peak_lr
    progress = (step - warmup) / span
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- optimizer ---------------------------------------------------------------

def init_optimizer_state(params: dict) -> dict:
    return {
        "step": 0,
        "m": {n: np.zeros_like(p.data) for n, p in params.items()},
        "v": {n: np.zeros_like(p.data) for n, p in params.items()},
    }


def optimizer_step(params: dict, grads: dict, state: dict, lr: float, weight_decay: float):
    """One Adam update with bias correction and decoupled weight decay.

    Parameters absent from grads are left untouched (they sat outside
    the step's graph), which keeps unused-but-trainable groups
    bit-identical.
    """
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match {name!r} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name!r}")
        m, v = state["m"][name], state["v"][name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


# -- logging -----------------------------------------------------------------

@dataclass
class TrainLogRecord:
    step: int
    lr: float
    l_gen: float
    l_cls: float
    total: float

    def to_line(self) -> str:
        return f"{self.step},{self.lr:.8e},{self.l_gen:.8f},{self.l_cls:.8f},{self.total:.8f}"


LOG_HEADER = "step,lr,l_gen,l_cls,total"


def parse_training_log(text: str) -> list:
    records = []
    for line in text.strip().splitlines():
        if line == LOG_HEADER or not line:
            continue
        step, lr, l_gen, l_cls, total = line.split(",")
        records.append(TrainLogRecord(int(step), float(lr), float(l_gen), float(l_cls), float(total)))
    return records


def _record(step: int, lr: float, reports: list) -> TrainLogRecord:
    gen = float(np.mean([r.generation for r in reports]))
    cls = float(np.mean([r.classification for r in reports]))
    lam = reports[0].lam
    return TrainLogRecord(step, lr, gen, cls, gen + lam * cls)


def _check_finite(report: LossReport, step: int, last_ok: TrainLogRecord | None):
    vals = (report.generation, report.classification)
    if all(math.isfinite(v) for v in vals):
        return
    context = f"; last finite step: {last_ok.to_line()}" if last_ok else ""
    raise NumericError(f"non-finite loss at step {step} (l_gen={vals[0]}, l_cls={vals[1]}){context}")


def _batched_indices(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _opt_steps(n: int, cfg: TrainConfig) -> int:
    micro = math.ceil(n / cfg.batch_size)
    return cfg.epochs * math.ceil(micro / cfg.grad_accum_steps)


# -- pretraining -------------------------------------------------------------

def pretrain_lm(corpus: list, model_cfg: ModelConfig, cfg: TrainConfig, log=None) -> tuple:
    """Text-only next-token training on the biased corpus.

    Returns (model, history); history carries per-step log records and a
    per-epoch held-out perplexity curve. The held-out slice is the
    corpus tail, never trained on.
    """
    vocab = Vocabulary(model_cfg.n_categories)
    if len(vocab) > model_cfg.vocab_size:
        raise ConfigError(f"vocabulary of {len(vocab)} exceeds vocab_size {model_cfg.vocab_size}")
    ids_all = np.stack([vocab.encode(r) for r in corpus])
    n_hold = max(1, int(round(len(corpus) * cfg.holdout_fraction)))
    if n_hold >= len(corpus):
        raise ConfigError("corpus too small for a held-out slice")
    train_ids, hold_ids = ids_all[:-n_hold], ids_all[-n_hold:]

    model = LeadModel(model_cfg, seed=cfg.seed, text_only=True)
    model.set_all_trainable(True)
    trainables = model.trainable()
    state = init_optimizer_state(trainables)
    total_steps = _opt_steps(len(train_ids), cfg)
    shuffle_rng = stream(cfg.seed, "shuffle")
    history = {"log": [], "holdout_ppl": []}
    last_ok = None

    def micro_loss(rows) -> LossReport:
        logits = model.text_logits(rows[:, :-1])
        targets = rows[:, 1:]
        return total_loss(generation_loss(logits, targets, targets != vocab.pad_id), None, 0.0)

    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_ids))
        micros = list(_batched_indices(len(train_ids), cfg.batch_size, order))
        for at in range(0, len(micros), cfg.grad_accum_steps):
            window = micros[at:at + cfg.grad_accum_steps]
            lr = lr_at(state["step"], total_steps, cfg)
            model.zero_grads()
            reports = []
            for idx in window:
                report = micro_loss(train_ids[idx])
                _check_finite(report, state["step"], last_ok)
                backward(mul(report.total, 1.0 / len(window)))
                reports.append(report)
            grads = {n: t.grad for n, t in trainables.items() if t.grad is not None}
            optimizer_step(trainables, grads, state, lr, cfg.weight_decay)
            rec = _record(state["step"] - 1, lr, reports)
            history["log"].append(rec)
            last_ok = rec
            if log:
                log(rec.to_line())
        with no_grad():
            ce = []
            for at in range(0, len(hold_ids), cfg.batch_size):
                rows = hold_ids[at:at + cfg.batch_size]
                ce.append(float(micro_loss(rows).generation) * len(rows))
            history["holdout_ppl"].append(math.exp(sum(ce) / len(hold_ids)))
    return model, history


# -- fine-tuning -------------------------------------------------------------

def _encode_split(samples: list, vocab: Vocabulary, cfg: ModelConfig) -> dict:
    return {
        "images": np.stack([s.image(cfg) for s in samples]).astype(np.float32),
        "ids": np.stack([vocab.encode(s.report) for s in samples]),
        "labels": np.stack([s.labels for s in samples]),
    }


def finetune(splits: dict, model_cfg: ModelConfig, cfg: TrainConfig,
             pretrained: dict | None = None, log=None) -> tuple:
    """Composite-objective training from the (biased) pretrained decoder.

    splits holds "train" and "val" sample lists. Returns (model,
    history); the model carries the epoch snapshot with the best
    validation macro-F1.
    """
    mc = replace(model_cfg, injection_mode=cfg.injection_mode)
    model = LeadModel(mc, seed=cfg.seed)
    if pretrained is not None:
        load_arrays(model, pretrained, allow_subset=True)
    set_trainable(model, cfg.partition)
    before = group_hashes(model)

    vocab = Vocabulary(mc.n_categories)
    if len(vocab) > mc.vocab_size:
        raise ConfigError(f"vocabulary of {len(vocab)} exceeds vocab_size {mc.vocab_size}")
    train = _encode_split(splits["train"], vocab, mc)
    val_samples = splits["val"][: cfg.val_subset or None]

    trainables = model.trainable()
    state = init_optimizer_state(trainables)
    total_steps = _opt_steps(len(splits["train"]), cfg)
    shuffle_rng = stream(cfg.seed, "shuffle")
    lam = cfg.lam if cfg.injection_mode != "none" else 0.0
    history = {"log": [], "val_f1": [], "best_epoch": -1}
    last_ok = None
    best = {"f1": -1.0, "arrays": None}

    def micro_loss(idx) -> LossReport:
        ids = train["ids"][idx]
        targets = ids[:, 1:]
        logits, s = model.multimodal_logits(train["images"][idx], ids[:, :-1])
        l_gen = generation_loss(logits, targets, targets != vocab.pad_id)
        l_cls = classification_loss(s, train["labels"][idx]) if s is not None else None
        return total_loss(l_gen, l_cls, lam)

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(splits["train"]))
        micros = list(_batched_indices(len(splits["train"]), cfg.batch_size, order))
        for at in range(0, len(micros), cfg.grad_accum_steps):
            window = micros[at:at + cfg.grad_accum_steps]
            lr = lr_at(state["step"], total_steps, cfg)
            model.zero_grads()
            reports = []
            for idx in window:
                report = micro_loss(idx)
                _check_finite(report, state["step"], last_ok)
                # an all-frozen path (no injection, frozen backbone) yields a
                # constant loss; the step is then log-only
                if is_live(report.total):
                    backward(mul(report.total, 1.0 / len(window)))
                reports.append(report)
            grads = {n: t.grad for n, t in trainables.items() if t.grad is not None}
            optimizer_step(trainables, grads, state, lr, cfg.weight_decay)
            rec = _record(state["step"] - 1, lr, reports)
            history["log"].append(rec)
            last_ok = rec
            if log:
                log(rec.to_line())
        report, _ = evaluate(model, val_samples, max_new_tokens=cfg.max_new_tokens)
        history["val_f1"].append(report.ce_f1)
        if report.ce_f1 > best["f1"]:
            best = {"f1": report.ce_f1, "arrays": {n: t.data.copy() for n, t in trainables.items()},
                    "epoch": epoch}
    if best["arrays"] is not None:
        for name, arr in best["arrays"].items():
            model.params[name].data = arr
        history["best_epoch"] = best["epoch"]

    after = group_hashes(model)
    mutated = [g for g in PARAM_GROUPS if not cfg.partition.trainable(g) and before[g] != after[g]]
    if mutated:
        raise RuntimeError(f"frozen parameter groups changed during finetune: {mutated}")
    return model, history


# -- evaluation --------------------------------------------------------------

def evaluate(model: LeadModel, samples: list, eval_batch: int = 64,
             max_new_tokens: int = 0) -> tuple:
    """Greedy-decode every sample and score the generations.

    Returns (EvalReport, per-sample rows); each row carries the sample
    id, the generated words, and both label vectors.
    """
    if not samples:
        raise ContractError("evaluate needs at least one sample")
    cfg = model.cfg
    vocab = Vocabulary(cfg.n_categories)
    budget = max_new_tokens or (4 * cfg.n_categories + 2)
    generated, refs, preds, truths, rows = [], [], [], [], []
    for at in range(0, len(samples), eval_batch):
        chunk = samples[at:at + eval_batch]
        images = np.stack([s.image(cfg) for s in chunk]).astype(np.float32)
        prompts = np.full((len(chunk), 1), vocab.bos_id)
        outs = generate_greedy_batch(model, prompts, images, budget, stop_id=vocab.eor_id)
        for s, ids in zip(chunk, outs):
            words = vocab.decode(ids)
            pred = extract_labels(words, cfg.n_categories).labels
            generated.append(words)
            refs.append(list(s.report))
            preds.append(pred)
            truths.append(s.labels)
            rows.append({"id": s.id, "generated": words, "pred_labels": pred, "true_labels": s.labels})
    report = evaluate_pairs(generated, refs, preds, truths)
    return report, rows


# -- ablation ----------------------------------------------------------------

ABLATION_HEADER = "mode,seed,rouge_l,cider,precision,recall,f1,hallucination_rate"


@dataclass
class AblationRow:
    mode: str
    seed: object
    rouge_l: float
    cider: float
    precision: float
    recall: float
    f1: float
    hallucination_rate: float

    def to_line(self) -> str:
        return (f"{self.mode},{self.seed},{self.rouge_l:.6f},{self.cider:.6f},"
                f"{self.precision:.6f},{self.recall:.6f},{self.f1:.6f},{self.hallucination_rate:.6f}")


def _row_from_report(mode: str, seed, r: EvalReport) -> AblationRow:
    return AblationRow(mode, seed, r.rouge_l, r.cider, r.ce_precision, r.ce_recall,
                       r.ce_f1, r.hallucination_rate)


def run_ablation(splits: dict, model_cfg: ModelConfig, base_cfg: TrainConfig,
                 modes: list, seeds: list, pretrained: dict | None = None, log=None) -> list:
    """Finetune and test every (mode, seed) pair from one shared start."""
    unknown = [m for m in modes if m not in ("none", "aux_only", "shared_gate", "layer_add", "layer_gate")]
    if unknown:
        raise ConfigError(f"unknown injection modes {unknown}")
    rows = []
    for mode in modes:
        for seed in seeds:
            cfg = replace(base_cfg, injection_mode=mode, seed=seed)
            model, _ = finetune(splits, model_cfg, cfg, pretrained)
            report, _ = evaluate(model, splits["test"], max_new_tokens=base_cfg.max_new_tokens)
            rows.append(_row_from_report(mode, seed, report))
            if log:
                log(rows[-1].to_line())
    return rows


def ablation_means(rows: list) -> list:
    """One synthetic row per mode, seed column set to "mean"."""
    means = []
    for mode in dict.fromkeys(r.mode for r in rows):
        group = [r for r in rows if r.mode == mode]
        means.append(AblationRow(
            mode, "mean",
            float(np.mean([r.rouge_l for r in group])),
            float(np.mean([r.cider for r in group])),
            float(np.mean([r.precision for r in group])),
            float(np.mean([r.recall for r in group])),
            float(np.mean([r.f1 for r in group])),
            float(np.mean([r.hallucination_rate for r in group])),
        ))
    return means


def sign_test(rows: list, challenger: str = "layer_gate", baseline: str = "none") -> tuple:
    """(wins, comparisons): seeds where the challenger's F1 is strictly higher."""
    base = {r.seed: r.f1 for r in rows if r.mode == baseline}
    challenge = {r.seed: r.f1 for r in rows if r.mode == challenger}
    shared = sorted(set(base) & set(challenge), key=str)
    wins = sum(1 for s in shared if challenge[s] > base[s])
    return wins, len(shared)


def write_ablation_csv(path: str, rows: list):
    lines = [ABLATION_HEADER]
    lines += [r.to_line() for r in rows]
    lines += [r.to_line() for r in ablation_means(rows)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ablation_csv(path: str) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh.read().strip().splitlines():
            if line == ABLATION_HEADER or not line:
                continue
            mode, seed, *vals = line.split(",")
            seed = seed if seed == "mean" else int(seed)
            rows.append(AblationRow(mode, seed, *map(float, vals)))
    return rows
