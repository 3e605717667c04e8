"""Synthetic grounded-report task.

Images are noise grids with one fixed 8x8 glyph stamped per present
category; reports are closed-template sentences, one per category, so a
label vector can be read back from any report exactly. A separate
text-only corpus with a skewed co-occurrence distribution gives the
language model priors that conflict with the (independent) image labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .config import ConfigError, ModelConfig, derive_seed, stream

CATEGORIES = (
    "cardiomegaly",
    "effusion",
    "edema",
    "pneumonia",
    "atelectasis",
    "consolidation",
    "fracture",
    "emphysema",
    "fibrosis",
    "nodule",
    "mass",
    "opacity",
    "hernia",
    "thickening",
)

# Every sentence is exactly "<category> is <word> ." so reports have a
# fixed token count and the labeler can match sentences structurally.
POSITIVE_WORDS = ("present", "evident", "visible")
NEGATIVE_WORDS = ("absent", "missing", "excluded")

PAD, BOS, EOR, UNK = "<pad>", "<bos>", "<eor>", "<unk>"
SPECIALS = (PAD, BOS, EOR, UNK)

GLYPH_SIZE = 8
_GLYPH_SALT = 0x67C0DE


def category_names(n_categories: int) -> tuple:
    if n_categories <= len(CATEGORIES):
        return CATEGORIES[:n_categories]
    extra = tuple(f"finding{i}" for i in range(len(CATEGORIES), n_categories))
    return CATEGORIES + extra


class Vocabulary:
    """Word-level vocabulary over the closed template lexicon."""

    def __init__(self, n_categories: int):
        words = list(category_names(n_categories)) + ["is", "."]
        words += list(POSITIVE_WORDS) + list(NEGATIVE_WORDS)
        self.tokens = list(SPECIALS) + words
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eor_id = self.index[EOR]
        self.unk_id = self.index[UNK]

    def __len__(self):
        return len(self.tokens)

    def encode(self, words: Sequence[str], add_bos: bool = True, add_eor: bool = True) -> np.ndarray:
        ids = [self.index.get(w, self.unk_id) for w in words]
        if add_bos:
            ids.insert(0, self.bos_id)
        if add_eor:
            ids.append(self.eor_id)
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids: Sequence[int], strip_special: bool = True) -> list:
        words = []
        for i in ids:
            t = self.tokens[int(i)] if 0 <= int(i) < len(self.tokens) else UNK
            if strip_special and t in SPECIALS:
                continue
            words.append(t)
        return words


def glyph(category_index: int) -> np.ndarray:
    """Fixed 8x8 binary stamp for one category, identical across runs."""
    rng = np.random.default_rng(derive_seed(_GLYPH_SALT, f"glyph:{category_index}"))
    g = (rng.random((GLYPH_SIZE, GLYPH_SIZE)) < 0.5).astype(np.float32)
    g[0, 0] = 1.0  # never an all-empty corner, keeps glyphs visually anchored
    return g


def render_image(labels: np.ndarray, seed: int, cfg: ModelConfig) -> np.ndarray:
    """Noise background plus one glyph per present category.

    Glyphs occupy whole patch-aligned slots; slot choice is by rejection
    so two categories never share a patch. Bit-identical under (labels,
    seed).
    """
    labels = np.asarray(labels)
    if labels.shape != (cfg.n_categories,):
        raise ConfigError(f"labels shape {labels.shape} does not match C={cfg.n_categories}")
    if cfg.patch_size < GLYPH_SIZE:
        raise ConfigError(f"patch_size {cfg.patch_size} cannot hold an {GLYPH_SIZE}x{GLYPH_SIZE} glyph")
    side = cfg.image_size
    grid = side // cfg.patch_size
    n_slots = grid * grid
    if int(labels.sum()) > n_slots:
        raise ConfigError(f"{int(labels.sum())} present categories exceed {n_slots} glyph slots")
    rng = np.random.default_rng(seed)
    img = np.clip(rng.normal(0.0, 0.05, size=(side, side)), 0.0, 1.0).astype(np.float32)
    taken = set()
    for ci in np.flatnonzero(labels):
        while True:
            slot = int(rng.integers(n_slots))
            if slot not in taken:
                taken.add(slot)
                break
        r = (slot // grid) * cfg.patch_size
        c = (slot % grid) * cfg.patch_size
        img[r:r + GLYPH_SIZE, c:c + GLYPH_SIZE] = np.clip(
            img[r:r + GLYPH_SIZE, c:c + GLYPH_SIZE] + glyph(ci), 0.0, 1.0)
    return img


def render_report(labels: np.ndarray, style_seed: int, n_categories: int | None = None) -> list:
    """One sentence per category, template and order chosen by the seed."""
    labels = np.asarray(labels)
    C = len(labels) if n_categories is None else n_categories
    if labels.shape != (C,):
        raise ConfigError(f"labels shape {labels.shape} does not match C={C}")
    names = category_names(C)
    rng = np.random.default_rng(style_seed)
    order = rng.permutation(C)
    tokens = []
    for ci in order:
        words = POSITIVE_WORDS if labels[ci] else NEGATIVE_WORDS
        tokens += [names[ci], "is", words[int(rng.integers(len(words)))], "."]
    return tokens


class LabelExtraction(NamedTuple):
    labels: np.ndarray      # {0,1}^C
    contradicted: np.ndarray  # True where both polarities were mentioned


def extract_labels(tokens: Sequence[str], n_categories: int) -> LabelExtraction:
    """Exact labeler over the closed templates.

    A category is 1 iff some positive sentence mentions it and no negative
    one does; malformed sentences are ignored; contradictions resolve to 0
    and are flagged.
    """
    names = category_names(n_categories)
    cat_index = {n: i for i, n in enumerate(names)}
    pos = np.zeros(n_categories, dtype=bool)
    neg = np.zeros(n_categories, dtype=bool)
    sentence = []
    for tok in tokens:
        if tok != ".":
            sentence.append(tok)
            continue
        if len(sentence) == 3 and sentence[1] == "is" and sentence[0] in cat_index:
            ci = cat_index[sentence[0]]
            if sentence[2] in POSITIVE_WORDS:
                pos[ci] = True
            elif sentence[2] in NEGATIVE_WORDS:
                neg[ci] = True
        sentence = []
    contradicted = pos & neg
    labels = (pos & ~neg).astype(np.int64)
    return LabelExtraction(labels, contradicted)


@dataclass
class BiasSpec:
    """Text-only co-occurrence prior that disagrees with image truth.

    marginals[j] is the base presence rate; q[(i, j)] (with i < j)
    overrides the conditional P(j present | i present) in sampled text.
    Image labels are drawn independently, so any q entry far from
    marginals[j] is a learnable confound with no visual support.
    """

    marginals: np.ndarray
    q: dict

    def __post_init__(self):
        self.marginals = np.asarray(self.marginals, dtype=np.float64)
        self.validate()

    def validate(self):
        if np.any((self.marginals < 0) | (self.marginals > 1)):
            raise ConfigError("marginals must lie in [0,1]")
        C = len(self.marginals)
        for (i, j), p in self.q.items():
            if not (0 <= i < C and 0 <= j < C):
                raise ConfigError(f"q index ({i},{j}) outside [0,{C})")
            if i >= j:
                raise ConfigError(f"q entries must have i < j (sampling order), got ({i},{j})")
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"q[({i},{j})]={p} outside [0,1]")

    @property
    def n_categories(self) -> int:
        return len(self.marginals)

    def max_deviation(self) -> float:
        if not self.q:
            return 0.0
        return max(abs(p - self.marginals[j]) for (_, j), p in self.q.items())

    def require_confound(self, min_dev: float = 0.4):
        if self.max_deviation() < min_dev:
            raise ConfigError(
                f"bias spec max |q - marginal| = {self.max_deviation():.3f} < {min_dev}; "
                "the text prior would not measurably disagree with image truth")

    def sample_labels(self, rng: np.random.Generator) -> np.ndarray:
        c = np.zeros(self.n_categories, dtype=np.int64)
        for j in range(self.n_categories):
            p = self.marginals[j]
            for i in range(j):
                if c[i] and (i, j) in self.q:
                    p = self.q[(i, j)]
                    break
            c[j] = int(rng.random() < p)
        return c

    def to_file(self, path: str):
        lines = ["# bias spec: marginals then q overrides", f"C {self.n_categories}"]
        lines += [f"m {j} {self.marginals[j]:.6f}" for j in range(self.n_categories)]
        lines += [f"q {i} {j} {p:.6f}" for (i, j), p in sorted(self.q.items())]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path: str) -> "BiasSpec":
        marginals, q, C = [], {}, None
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.split("#", 1)[0].split()
                if not parts:
                    continue
                if parts[0] == "C":
                    C = int(parts[1])
                elif parts[0] == "m":
                    marginals.append((int(parts[1]), float(parts[2])))
                elif parts[0] == "q":
                    q[(int(parts[1]), int(parts[2]))] = float(parts[3])
                else:
                    raise ConfigError(f"unrecognized bias spec line: {line.strip()!r}")
        if C is None or len(marginals) != C:
            raise ConfigError(f"bias spec lists {len(marginals)} marginals for C={C}")
        m = np.zeros(C)
        for j, v in marginals:
            m[j] = v
        return cls(m, q)


def default_bias_spec(n_categories: int = 14, marginal: float = 0.3) -> BiasSpec:
    """The experiment default: strong textual co-occurrence confounds."""
    q = {(0, 1): 0.95, (2, 3): 0.90, (4, 5): 0.05, (6, 7): 0.10}
    q = {k: v for k, v in q.items() if k[1] < n_categories}
    spec = BiasSpec(np.full(n_categories, marginal), q)
    spec.require_confound()
    return spec


def build_biased_pretrain_corpus(bias: BiasSpec, n: int, seed: int) -> list:
    """n image-free reports whose label statistics follow the bias spec."""
    if n < 1:
        raise ConfigError(f"corpus size must be >= 1, got {n}")
    bias.validate()
    label_rng = stream(seed, "corpus-labels")
    style_rng = stream(seed, "corpus-style")
    corpus = []
    for _ in range(n):
        c = bias.sample_labels(label_rng)
        corpus.append(render_report(c, int(style_rng.integers(2**63)), bias.n_categories))
    return corpus


@dataclass
class Sample:
    id: int
    labels: np.ndarray
    report: list
    image_seed: int

    def image(self, cfg: ModelConfig) -> np.ndarray:
        return render_image(self.labels, self.image_seed, cfg)


def split_sizes(n: int, ratios: Sequence[float]) -> list:
    """Largest-remainder apportionment of n items into len(ratios) splits."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios {list(ratios)} sum to {sum(ratios)}, expected 1")
    raw = [n * r for r in ratios]
    sizes = [int(x) for x in raw]
    remainders = sorted(range(len(raw)), key=lambda i: raw[i] - sizes[i], reverse=True)
    for i in remainders[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def generate_dataset(
    cfg: ModelConfig,
    n_total: int,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
    marginal: float = 0.3,
) -> dict:
    """Disjoint train/val/test splits with independent per-category labels."""
    sizes = split_sizes(n_total, ratios)
    label_rng = stream(seed, "labels")
    style_rng = stream(seed, "style")
    image_rng = stream(seed, "imageseed")
    samples = []
    for sid in range(n_total):
        c = (label_rng.random(cfg.n_categories) < marginal).astype(np.int64)
        report = render_report(c, int(style_rng.integers(2**63)), cfg.n_categories)
        samples.append(Sample(sid, c, report, int(image_rng.integers(2**63))))
    out, at = {}, 0
    for name, size in zip(("train", "val", "test"), sizes):
        out[name] = samples[at:at + size]
        at += size
    return out


def save_samples(path: str, samples: Sequence[Sample]):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({
                "id": s.id,
                "labels": [int(v) for v in s.labels],
                "report": " ".join(s.report),
                "image_seed": s.image_seed,
            }) + "\n")


def load_samples(path: str) -> list:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            samples.append(Sample(
                int(rec["id"]),
                np.asarray(rec["labels"], dtype=np.int64),
                rec["report"].split(),
                int(rec["image_seed"]),
            ))
    return samples


def save_corpus(path: str, corpus: Sequence[Sequence[str]]):
    with open(path, "w", encoding="utf-8") as fh:
        for report in corpus:
            fh.write(" ".join(report) + "\n")


def load_corpus(path: str) -> list:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh if line.strip()]
