"""Report-quality and label-grounding metrics.

ROUGE-L and CIDEr score generated token sequences against references;
clinical efficacy scores the label vectors a labeler extracts from them;
hallucination/omission rates isolate false positives and false negatives
among the positive mentions.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ROUGE_BETA = 1.2
CIDER_N_MAX = 4


def _lcs_length(a: Sequence, b: Sequence) -> int:
    """Classic O(len(a)*len(b)) longest-common-subsequence table."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure; empty candidate or reference scores 0."""
    if not candidate or not reference:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return ((1 + beta * beta) * p * r) / (r + beta * beta * p)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def cider(candidates: Sequence[Sequence], references: Sequence[Sequence], n_max: int = CIDER_N_MAX) -> float:
    """TF-IDF n-gram cosine consensus, averaged over n=1..n_max, scaled x10.

    IDF counts documents over the reference corpus; plain CIDEr, no
    length or clipping penalties.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("cider needs at least one pair")
    n_docs = len(references)
    doc_freq = [Counter() for _ in range(n_max + 1)]
    for ref in references:
        for n in range(1, n_max + 1):
            for gram in set(_ngrams(ref, n)):
                doc_freq[n][gram] += 1

    def tfidf(tokens, n):
        return {g: c * (math.log(n_docs) - math.log(max(1, doc_freq[n][g])))
                for g, c in _ngrams(tokens, n).items()}

    total = 0.0
    for cand, ref in zip(candidates, references):
        per_n = 0.0
        for n in range(1, n_max + 1):
            vc = tfidf(cand, n)
            vr = tfidf(ref, n)
            dot = sum(w * vr[g] for g, w in vc.items() if g in vr)
            nc = math.sqrt(sum(w * w for w in vc.values()))
            nr = math.sqrt(sum(w * w for w in vr.values()))
            if nc > 0 and nr > 0:
                per_n += dot / (nc * nr)
        total += per_n / n_max
    return 10.0 * total / len(candidates)


@dataclass
class CategoryScore:
    category: str
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    rouge_l: float = 0.0
    cider: float = 0.0
    ce_precision: float = 0.0
    ce_recall: float = 0.0
    ce_f1: float = 0.0
    hallucination_rate: float = 0.0
    omission_rate: float = 0.0
    per_category: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "rouge_l": self.rouge_l,
            "cider": self.cider,
            "ce_precision": self.ce_precision,
            "ce_recall": self.ce_recall,
            "ce_f1": self.ce_f1,
            "hallucination_rate": self.hallucination_rate,
            "omission_rate": self.omission_rate,
        }


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def clinical_efficacy(
    pred_labels: Sequence[np.ndarray],
    true_labels: Sequence[np.ndarray],
    names: Sequence[str] | None = None,
) -> tuple:
    """Per-category P/R/F1 with zero denominators scoring 0, plus macros."""
    if len(pred_labels) != len(true_labels):
        raise ValueError(f"{len(pred_labels)} predictions vs {len(true_labels)} truths")
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError(f"label shapes differ: {pred.shape} vs {true.shape}")
    C = pred.shape[1]
    names = names if names is not None else [f"cat{i}" for i in range(C)]
    rows = []
    for i in range(C):
        tp = int(np.sum((pred[:, i] == 1) & (true[:, i] == 1)))
        fp = int(np.sum((pred[:, i] == 1) & (true[:, i] == 0)))
        fn = int(np.sum((pred[:, i] == 0) & (true[:, i] == 1)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        rows.append(CategoryScore(names[i], p, r, _f1(p, r), tp, fp, fn))
    macro_p = float(np.mean([c.precision for c in rows]))
    macro_r = float(np.mean([c.recall for c in rows]))
    macro_f1 = float(np.mean([c.f1 for c in rows]))
    return macro_p, macro_r, macro_f1, rows


def hallucination_rate(pred_labels: Sequence[np.ndarray], true_labels: Sequence[np.ndarray]) -> tuple:
    """(false-positive share of predicted positives, miss share of true positives)."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError(f"label shapes differ: {pred.shape} vs {true.shape}")
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    predicted_pos = int(np.sum(pred == 1))
    true_pos_total = int(np.sum(true == 1))
    return fp / max(1, predicted_pos), fn / max(1, true_pos_total)


def evaluate_pairs(
    generated: Sequence[Sequence],
    reference: Sequence[Sequence],
    pred_labels: Sequence[np.ndarray],
    true_labels: Sequence[np.ndarray],
    names: Sequence[str] | None = None,
) -> EvalReport:
    macro_p, macro_r, macro_f1, rows = clinical_efficacy(pred_labels, true_labels, names)
    hall, omit = hallucination_rate(pred_labels, true_labels)
    mean_rouge = float(np.mean([rouge_l(c, r) for c, r in zip(generated, reference)]))
    return EvalReport(
        rouge_l=mean_rouge,
        cider=cider(generated, reference),
        ce_precision=macro_p,
        ce_recall=macro_r,
        ce_f1=macro_f1,
        hallucination_rate=hall,
        omission_rate=omit,
        per_category=rows,
    )


def write_metric_csv(report: EvalReport, path: str):
    """One row per category plus a macro row; P/R/F1 and raw counts."""
    lines = ["category,precision,recall,f1,tp,fp,fn"]
    for c in report.per_category:
        lines.append(f"{c.category},{c.precision:.6f},{c.recall:.6f},{c.f1:.6f},{c.tp},{c.fp},{c.fn}")
    tp = sum(c.tp for c in report.per_category)
    fp = sum(c.fp for c in report.per_category)
    fn = sum(c.fn for c in report.per_category)
    lines.append(f"macro,{report.ce_precision:.6f},{report.ce_recall:.6f},{report.ce_f1:.6f},{tp},{fp},{fn}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
