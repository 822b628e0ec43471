"""Scanpath-augmented text classification and intent-aware finetuning.

Holds the desk-scale synthetic corpora (a rule-driven reading corpus for the
generator-learning experiment and a planted-signal parity task), the
two-branch classifier, the train/test scanpath-source matrix with k-fold
cross-validation, and joint generator+classifier finetuning on task loss.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import f1_score

from .corpus import MAX_STEPS, Fixation, Scanpath, Sentence
from .embeddings import TextEmbedding
from .errors import ConfigError, TrainingDivergedError, ValidationError
from .losses import (
    LossWeights,
    adversarial_terms,
    batched_scanpath_content_loss,
    text_content_loss,
)
from .model import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    eos_length,
    generator_forward,
    load_checkpoint,
    load_module_state,
    module_state_tensors,
    sample_noise,
    save_checkpoint,
)
from .seeding import mix, np_rng, torch_generator

TRIGGERS = ("zilp", "vome")
PAIR_SEPARATOR_VALUE = -1.0

SOURCE_VARIANTS = ("none", "random", "real", "generated", "real_plus_generated")


# --- synthetic reading-rule corpus (drives the generator-learning experiment) ---


@dataclass
class ReadingCorpus:
    sentences: dict[str, Sentence]
    scanpaths: list[Scanpath]
    embeddings: dict[str, TextEmbedding]


def _word_vector(word: str, emb_dim: int, seed: int) -> np.ndarray:
    return np_rng(mix(seed, "word-emb", word)).standard_normal(emb_dim).astype(np.float32)


def _sentence_embedding(
    sentence_id: str, words: Sequence[str], emb_dim: int, seed: int
) -> TextEmbedding:
    tokens = np.zeros((MAX_STEPS, emb_dim), dtype=np.float32)
    for i, w in enumerate(words):
        tokens[i] = _word_vector(w, emb_dim, seed)
    cls = tokens[: len(words)].mean(axis=0)
    return TextEmbedding(
        sentence_id=sentence_id, tokens=tokens, token_count=len(words), cls=cls
    )


def _pseudoword(rng, length: int) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz"
    return "".join(letters[int(rng.integers(0, 26))] for _ in range(length))


def make_reading_corpus(
    n_sentences: int = 500,
    participants: int = 3,
    emb_dim: int = 32,
    seed: int = 0,
) -> ReadingCorpus:
    """Corpus whose scanpaths follow fixed reading rules: fixation duration
    proportional to word length (35 ms per character plus small noise), short
    words (<= 3 letters) skipped 30% of the time, and a 10% chance after each
    word of regressing to a uniformly chosen earlier word."""
    rng = np_rng(mix(seed, "reading-corpus"))
    vocab: list[str] = []
    seen: set[str] = set()
    while len(vocab) < 40:
        w = _pseudoword(rng, int(rng.integers(1, 11)))
        if w not in seen:
            seen.add(w)
            vocab.append(w)

    def rule_duration(word: str) -> float:
        return max(35.0 * len(word) + float(rng.normal(0.0, 5.0)), 20.0)

    sentences: dict[str, Sentence] = {}
    scanpaths: list[Scanpath] = []
    embeddings: dict[str, TextEmbedding] = {}
    for s in range(n_sentences):
        sid = f"R{s:04d}"
        n_words = int(rng.integers(4, 10))
        words = tuple(vocab[int(rng.integers(0, len(vocab)))] for _ in range(n_words))
        sentences[sid] = Sentence(sid, words)
        embeddings[sid] = _sentence_embedding(sid, words, emb_dim, seed)
        for p in range(participants):
            fixations: list[Fixation] = []
            for i, w in enumerate(words):
                if len(w) <= 3 and rng.random() < 0.3:
                    continue
                fixations.append(Fixation(i, rule_duration(w)))
                if i >= 1 and rng.random() < 0.1:
                    j = int(rng.integers(0, i))
                    fixations.append(Fixation(j, rule_duration(words[j])))
            if not fixations:
                fixations.append(Fixation(0, rule_duration(words[0])))
            scanpaths.append(Scanpath(f"P{p}", sid, tuple(fixations[:MAX_STEPS])))
    return ReadingCorpus(sentences, scanpaths, embeddings)


# --- planted-signal parity task ---


@dataclass
class TaskExample:
    sentence_id: str
    label: int
    real_steps: np.ndarray | None  # (80, 3) normalized triples, or None

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label}")


@dataclass
class TaskData:
    examples: list[TaskExample]
    embeddings: dict[str, TextEmbedding]
    sentences: dict[str, Sentence]
    scanpath_reads: int = 0

    def fetch_real_steps(self, ex: TaskExample) -> np.ndarray:
        """Sole sanctioned access path to real scanpath data; counted so the
        no-scanpath configuration can prove it never looked."""
        if ex.real_steps is None:
            raise ValidationError(f"example {ex.sentence_id!r} has no real scanpath")
        self.scanpath_reads += 1
        return ex.real_steps


def _oracle_steps(words: Sequence[str], triggers: Sequence[str]) -> np.ndarray:
    n = len(words)
    steps = np.zeros((MAX_STEPS, 3), dtype=np.float64)
    for i, w in enumerate(words):
        steps[i, 0] = i / n
        steps[i, 1] = 0.9 if w in triggers else 0.1
    steps[n - 1, 2] = 1.0
    return steps


def make_synthetic_task(
    seed: int, n_examples: int = 1000, emb_dim: int = 32
) -> tuple[TaskData, tuple[str, str]]:
    """Binary task where the label is the parity of trigger-word presence.

    Each sentence draws one of four patterns uniformly (no trigger, first
    only, second only, both); exactly one trigger present means label 1.
    Oracle scanpaths fixate every word left to right with normalized duration
    0.9 on triggers and 0.1 elsewhere, so the label is recoverable from
    durations alone. Word embeddings are random per word type and shared
    across examples.
    """
    if n_examples < 100:
        raise ValidationError(f"n_examples must be >= 100, got {n_examples}")
    rng = np_rng(mix(seed, "parity-task"))
    fillers: list[str] = []
    seen = set(TRIGGERS)
    while len(fillers) < 20:
        w = _pseudoword(rng, int(rng.integers(3, 9)))
        if w not in seen:
            seen.add(w)
            fillers.append(w)

    examples: list[TaskExample] = []
    embeddings: dict[str, TextEmbedding] = {}
    sentences: dict[str, Sentence] = {}
    for i in range(n_examples):
        sid = f"T{i:05d}"
        n_words = int(rng.integers(6, 11))
        words = [fillers[int(rng.integers(0, len(fillers)))] for _ in range(n_words)]
        pattern = int(rng.integers(0, 4))
        present = [TRIGGERS[0]] if pattern == 1 else [TRIGGERS[1]] if pattern == 2 else (
            list(TRIGGERS) if pattern == 3 else []
        )
        slots = rng.choice(n_words, size=len(present), replace=False)
        for slot, trig in zip(slots, present):
            words[int(slot)] = trig
        label = 1 if len(present) == 1 else 0
        sentence = Sentence(sid, tuple(words))
        sentences[sid] = sentence
        embeddings[sid] = _sentence_embedding(sid, words, emb_dim, seed)
        examples.append(TaskExample(sid, label, _oracle_steps(words, TRIGGERS)))
    return TaskData(examples, embeddings, sentences), TRIGGERS


def read_task_jsonl(path: str | Path) -> list[dict]:
    """Task rows: {"sentence_id", "text", "label", optional "pair_text"}."""
    rows: list[dict] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: line {lineno}: bad JSON ({exc})") from None
            for key in ("sentence_id", "text", "label"):
                if key not in row:
                    raise ValidationError(f"{path}: line {lineno}: missing {key!r}")
            if row["label"] not in (0, 1):
                raise ValidationError(
                    f"{path}: line {lineno}: label must be 0 or 1, got {row['label']!r}"
                )
            rows.append(row)
    return rows


def merge_pair_embedding(a: TextEmbedding, b: TextEmbedding) -> TextEmbedding:
    """Concatenate two sentences' token rows with a separator row of -1s.

    Token rows past the shared max length are dropped; the CLS vectors are
    averaged. Used for pair-input tasks.
    """
    max_len, dim = a.tokens.shape
    if b.tokens.shape != (max_len, dim):
        raise ValidationError("pair embeddings must share shape")
    tokens = np.zeros((max_len, dim), dtype=np.float32)
    tokens[: a.token_count] = a.tokens[: a.token_count]
    used = a.token_count
    if used < max_len:
        tokens[used] = PAIR_SEPARATOR_VALUE
        used += 1
    take = min(b.token_count, max_len - used)
    if take > 0:
        tokens[used : used + take] = b.tokens[:take]
        used += take
    return TextEmbedding(
        sentence_id=a.sentence_id,
        tokens=tokens,
        token_count=used,
        cls=((a.cls + b.cls) / 2.0).astype(np.float32),
    )


def merge_pair_steps(a: np.ndarray, len_a: int, b: np.ndarray, len_b: int) -> np.ndarray:
    """Concatenate two normalized step blocks with a -1 separator row."""
    max_len = a.shape[0]
    out = np.zeros_like(a)
    take_a = min(len_a, max_len)
    out[:take_a] = a[:take_a]
    used = take_a
    if used < max_len:
        out[used] = PAIR_SEPARATOR_VALUE
        used += 1
    take_b = min(len_b, max_len - used)
    if take_b > 0:
        out[used : used + take_b] = b[:take_b]
    return out


# --- classifier ---


ClassifierConfig = DiscriminatorConfig


class Classifier(Discriminator):
    """Same two-branch recurrent topology as the discriminator, repurposed:
    the logistic output is the class-1 probability for the task label."""


def classifier_forward(
    emb: TextEmbedding, steps: np.ndarray | torch.Tensor | None, clf: Classifier
) -> float:
    """Single-example class-1 probability; steps None feeds zeros (the
    no-scanpath configuration)."""
    dtype = next(clf.parameters()).dtype
    tokens = torch.as_tensor(emb.tokens, dtype=dtype).unsqueeze(0)
    if steps is None:
        steps_t = torch.zeros(1, clf.config.max_len, clf.config.step_dim, dtype=dtype)
    else:
        steps_t = torch.as_tensor(steps, dtype=dtype).unsqueeze(0)
    with torch.no_grad():
        prob = clf(tokens, steps_t, train_mode=False)
    return float(prob[0])


def save_classifier(path, clf: Classifier, meta: Mapping | None = None) -> None:
    import dataclasses

    save_checkpoint(
        path, "classifier", dataclasses.asdict(clf.config), module_state_tensors(clf), meta
    )


def load_classifier(path, dtype: torch.dtype = torch.float32) -> tuple[Classifier, dict]:
    from .errors import FormatError

    ckpt = load_checkpoint(path)
    if ckpt.kind != "classifier":
        raise FormatError(f"{path}: checkpoint kind {ckpt.kind!r}, want 'classifier'")
    clf = Classifier(DiscriminatorConfig(**ckpt.config), dtype=dtype)
    load_module_state(clf, ckpt.tensors)
    return clf, ckpt.meta


# --- scanpath sources ---


@dataclass
class ScanpathSource:
    variant: str
    generator: Generator | None = None
    tau: float = 0.5

    def validate(self) -> None:
        if self.variant not in SOURCE_VARIANTS:
            raise ConfigError(
                f"unknown scanpath source {self.variant!r}; "
                f"expected one of {SOURCE_VARIANTS}"
            )
        if self.variant in ("generated", "real_plus_generated") and self.generator is None:
            raise ConfigError(f"source {self.variant!r} needs a generator")


def random_steps(seed: int, sentence_id: str) -> np.ndarray:
    """Uniform control scanpath: length U{1..80}, positions and durations
    U[0,1], laid out like a normalized path (eos 1 at the end, zero pads)."""
    rng = np_rng(mix(seed, "random-sp", sentence_id))
    length = int(rng.integers(1, MAX_STEPS + 1))
    steps = np.zeros((MAX_STEPS, 3), dtype=np.float64)
    steps[:length, 0] = rng.uniform(0.0, 1.0, length)
    steps[:length, 1] = rng.uniform(0.0, 1.0, length)
    steps[length - 1, 2] = 1.0
    return steps


def generated_steps(
    gen: Generator, emb: TextEmbedding, seed: int, tau: float = 0.5
) -> np.ndarray:
    """Generator output as normalized triples, zeroed past the eos cut."""
    noise = sample_noise(
        mix(seed, "gen-sp", emb.sentence_id), gen.config.max_len, gen.config.noise_dim
    )
    out = generator_forward(emb, noise, gen)
    steps = out.steps.detach().to(torch.float64).cpu().numpy().copy()
    length = eos_length(steps[:, 2], tau)
    steps[length:] = 0.0
    return steps


def _resolve_basic(
    variant: str,
    data: TaskData,
    source: ScanpathSource,
    seed: int,
) -> list[np.ndarray | None]:
    """Per-example step arrays for a non-composite variant (None means zeros)."""
    if variant == "none":
        return [None] * len(data.examples)
    if variant == "random":
        return [random_steps(seed, ex.sentence_id) for ex in data.examples]
    if variant == "real":
        return [data.fetch_real_steps(ex) for ex in data.examples]
    if variant == "generated":
        return [
            generated_steps(
                source.generator, data.embeddings[ex.sentence_id], seed, source.tau
            )
            for ex in data.examples
        ]
    raise ConfigError(f"variant {variant!r} is not a per-example source")


# --- folds ---


def stratified_folds(labels: Sequence[int], folds: int, seed: int) -> list[np.ndarray]:
    """Deterministic label-stratified partition: shuffle within each class,
    deal round-robin. Every index lands in exactly one fold."""
    labels_arr = np.asarray(labels)
    if folds < 2:
        raise ValidationError(f"folds must be >= 2, got {folds}")
    if len(labels_arr) < folds:
        raise ValidationError(f"{len(labels_arr)} examples cannot fill {folds} folds")
    assignment = np.empty(len(labels_arr), dtype=np.int64)
    for cls in np.unique(labels_arr):
        idx = np.flatnonzero(labels_arr == cls)
        perm = np_rng(mix(seed, "folds", int(cls))).permutation(len(idx))
        for j, k in enumerate(perm):
            assignment[idx[k]] = j % folds
    out = [np.flatnonzero(assignment == f) for f in range(folds)]
    if any(len(f) == 0 for f in out):
        raise ValidationError("a fold came out empty; use fewer folds")
    return out


# --- cross-validated configuration runs ---


@dataclass
class ClassifierTrainConfig:
    hidden: int = 8
    dropout: float = 0.1
    fusion_heads: int = 4
    epochs: int = 6
    batch_size: int = 32
    lr: float = 1e-3

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("bad classifier training settings")


def _emb_tensor(data: TaskData, dtype: torch.dtype) -> list[torch.Tensor]:
    return [
        torch.as_tensor(data.embeddings[ex.sentence_id].tokens, dtype=dtype)
        for ex in data.examples
    ]


def _steps_tensor(
    arr: np.ndarray | None, max_len: int, dtype: torch.dtype
) -> torch.Tensor:
    if arr is None:
        return torch.zeros(max_len, 3, dtype=dtype)
    return torch.as_tensor(arr, dtype=dtype)


def _fit_classifier(
    emb_rows: Sequence[torch.Tensor],
    step_rows: Sequence[torch.Tensor],
    labels: Sequence[int],
    emb_dim: int,
    cfg: ClassifierTrainConfig,
    seed: int,
) -> Classifier:
    clf = Classifier(
        DiscriminatorConfig(
            emb_dim=emb_dim, hidden=cfg.hidden, dropout=cfg.dropout,
            fusion_heads=cfg.fusion_heads,
        ),
        init_seed=mix(seed, "clf-init"),
    )
    opt = torch.optim.Adam(clf.parameters(), lr=cfg.lr)
    y = torch.tensor(labels, dtype=torch.float32)
    n = len(labels)
    for epoch in range(cfg.epochs):
        perm = np_rng(mix(seed, "clf-shuffle", epoch)).permutation(n)
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            emb_b = torch.stack([emb_rows[i] for i in idx])
            steps_b = torch.stack([step_rows[i] for i in idx])
            prob = clf(
                emb_b, steps_b, train_mode=True,
                rng=torch_generator(mix(seed, "clf-drop", epoch, bi)),
            )
            loss = F.binary_cross_entropy(prob.clamp(1e-7, 1 - 1e-7), y[idx])
            if not math.isfinite(float(loss.detach())):
                raise TrainingDivergedError(
                    f"classifier loss non-finite at epoch {epoch}, batch {bi}",
                    {"epoch": epoch, "batch_index": bi, "loss": float(loss.detach())},
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return clf


def _predict(
    clf: Classifier,
    emb_rows: Sequence[torch.Tensor],
    step_rows: Sequence[torch.Tensor],
    batch_size: int = 64,
) -> np.ndarray:
    preds = []
    with torch.no_grad():
        for start in range(0, len(emb_rows), batch_size):
            emb_b = torch.stack(list(emb_rows[start : start + batch_size]))
            steps_b = torch.stack(list(step_rows[start : start + batch_size]))
            prob = clf(emb_b, steps_b, train_mode=False)
            preds.append((prob >= 0.5).to(torch.int64).numpy())
    return np.concatenate(preds)


def run_configuration(
    train_src: ScanpathSource,
    test_src: ScanpathSource,
    data: TaskData,
    folds: int = 10,
    seed: int = 0,
    clf_cfg: ClassifierTrainConfig | None = None,
) -> float:
    """Mean weighted F1 over label-stratified folds for one cell of the
    train-source x test-source matrix."""
    train_src.validate()
    test_src.validate()
    if test_src.variant == "real_plus_generated":
        raise ConfigError("real_plus_generated is a training-side source only")
    if not data.examples:
        raise ValidationError("task data is empty")
    cfg = clf_cfg or ClassifierTrainConfig()
    cfg.validate()
    dtype = torch.float32
    emb_rows = _emb_tensor(data, dtype)
    emb_dim = emb_rows[0].shape[1]
    max_len = emb_rows[0].shape[0]
    labels = [ex.label for ex in data.examples]

    def rows_for(variant: str, source: ScanpathSource) -> list[torch.Tensor]:
        arrays = _resolve_basic(variant, data, source, seed)
        return [_steps_tensor(a, max_len, dtype) for a in arrays]

    if train_src.variant == "real_plus_generated":
        train_rows = {
            "real": rows_for("real", train_src),
            "generated": rows_for("generated", train_src),
        }
    else:
        train_rows = {train_src.variant: rows_for(train_src.variant, train_src)}
    test_rows = (
        train_rows[test_src.variant]
        if test_src.variant in train_rows
        else rows_for(test_src.variant, test_src)
    )

    fold_indices = stratified_folds(labels, folds, seed)
    scores = []
    for k, test_idx in enumerate(fold_indices):
        in_test = np.zeros(len(labels), dtype=bool)
        in_test[test_idx] = True
        train_idx = np.flatnonzero(~in_test)
        fit_emb, fit_steps, fit_y = [], [], []
        for i in train_idx:
            for rows in train_rows.values():
                fit_emb.append(emb_rows[i])
                fit_steps.append(rows[i])
                fit_y.append(labels[i])
        clf = _fit_classifier(
            fit_emb, fit_steps, fit_y, emb_dim, cfg, mix(seed, "fold", k)
        )
        pred = _predict(
            clf,
            [emb_rows[i] for i in test_idx],
            [test_rows[i] for i in test_idx],
        )
        truth = np.array([labels[i] for i in test_idx])
        scores.append(f1_score(truth, pred, average="weighted", zero_division=0))
    return float(np.mean(scores))


# --- intent-aware finetuning ---


@dataclass
class IntentConfig:
    lr_clf: float = 1e-3
    batch_size: int = 32
    task_weight: float = 1.0
    content_weight: float = 1.0
    adversarial_weight: float = 1.0  # applies only when a discriminator is passed
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def validate(self) -> None:
        if not self.lr_clf > 0 or self.batch_size < 1:
            raise ConfigError("bad intent finetuning settings")
        if min(self.task_weight, self.content_weight, self.adversarial_weight) < 0:
            raise ConfigError("loss mix weights must be non-negative")
        self.weights.validate()


@dataclass
class IntentResult:
    generator: Generator
    classifier: Classifier
    history: list[float]  # per-epoch task F1 over the full dataset


def _true_length_from_steps(steps: np.ndarray) -> int:
    hot = np.flatnonzero(steps[:, 2] == 1.0)
    return int(hot[0]) + 1 if hot.size else steps.shape[0]


def intent_finetune(
    gen: Generator,
    clf: Classifier,
    data: TaskData,
    epochs: int,
    lr_gen: float,
    cfg: IntentConfig | None = None,
    disc: Discriminator | None = None,
) -> IntentResult:
    """Joint updates: the classifier descends task loss; the generator
    descends task loss plus the content/adversarial components, weighted per
    cfg. lr_gen = 0 leaves the generator bitwise untouched (classifier-only
    training). Inputs are deep-copied; the passed modules never change.
    """
    cfg = cfg or IntentConfig()
    cfg.validate()
    if epochs < 0:
        raise ValidationError("epochs must be >= 0")
    if lr_gen < 0:
        raise ValidationError("lr_gen must be >= 0")
    if not data.examples:
        raise ValidationError("task data is empty")
    gen = copy.deepcopy(gen)
    clf = copy.deepcopy(clf)
    dtype = next(gen.parameters()).dtype
    emb_rows = _emb_tensor(data, dtype)
    cls_rows = [
        torch.as_tensor(data.embeddings[ex.sentence_id].cls, dtype=dtype)
        for ex in data.examples
    ]
    real_rows = [
        None if ex.real_steps is None else torch.as_tensor(ex.real_steps, dtype=dtype)
        for ex in data.examples
    ]
    real_lengths = [
        None if ex.real_steps is None else _true_length_from_steps(ex.real_steps)
        for ex in data.examples
    ]
    y = torch.tensor([ex.label for ex in data.examples], dtype=dtype)
    n = len(data.examples)

    clf_opt = torch.optim.Adam(clf.parameters(), lr=cfg.lr_clf)
    gen_opt = (
        torch.optim.Adam(gen.parameters(), lr=lr_gen) if lr_gen > 0 else None
    )
    eval_noise = torch.randn(
        n, gen.config.max_len, gen.config.noise_dim,
        generator=torch_generator(mix(cfg.seed, "intent-eval-noise")), dtype=dtype,
    )

    def epoch_f1() -> float:
        preds = []
        with torch.no_grad():
            for start in range(0, n, 64):
                sl = slice(start, min(start + 64, n))
                emb_b = torch.stack(emb_rows[sl])
                steps_b, _ = gen(emb_b, eval_noise[sl])
                prob = clf(emb_b, steps_b, train_mode=False)
                preds.append((prob >= 0.5).to(torch.int64).numpy())
        return float(
            f1_score(
                y.numpy().astype(np.int64), np.concatenate(preds),
                average="weighted", zero_division=0,
            )
        )

    history: list[float] = []
    for epoch in range(epochs):
        perm = np_rng(mix(cfg.seed, "intent-shuffle", epoch)).permutation(n)
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            emb_b = torch.stack([emb_rows[i] for i in idx])
            cls_b = torch.stack([cls_rows[i] for i in idx])
            noise = torch.randn(
                len(idx), gen.config.max_len, gen.config.noise_dim,
                generator=torch_generator(mix(cfg.seed, "intent-noise", epoch, bi)),
                dtype=dtype,
            )
            gen_steps, cls_recon = gen(emb_b, noise)
            prob = clf(
                emb_b, gen_steps, train_mode=True,
                rng=torch_generator(mix(cfg.seed, "intent-drop", epoch, bi)),
            )
            task = F.binary_cross_entropy(prob.clamp(1e-7, 1 - 1e-7), y[idx])

            content = torch.zeros((), dtype=dtype)
            with_real = [j for j, i in enumerate(idx) if real_rows[i] is not None]
            if with_real:
                real_b = torch.stack([real_rows[idx[j]] for j in with_real])
                lengths = torch.tensor(
                    [real_lengths[idx[j]] for j in with_real], dtype=torch.long
                )
                content = batched_scanpath_content_loss(
                    gen_steps[with_real], real_b, lengths, cfg.weights
                ).mean()
            recon = text_content_loss(cls_recon, cls_b).mean()
            adv = torch.zeros((), dtype=dtype)
            if disc is not None:
                d_fake = disc(emb_b, gen_steps, train_mode=False)
                adv, _ = adversarial_terms(torch.full_like(d_fake, 0.5), d_fake)

            gen_extra = cfg.content_weight * (content + recon) + cfg.adversarial_weight * adv
            values = {
                "task": float(task.detach()),
                "content": float(content.detach()),
                "recon": float(recon.detach()),
                "adversarial": float(adv.detach()),
            }
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingDivergedError(
                    f"non-finite intent loss at epoch {epoch}, batch {bi}",
                    {"epoch": epoch, "batch_index": bi, "losses": values},
                )
            clf_opt.zero_grad(set_to_none=True)
            if gen_opt is not None:
                gen_opt.zero_grad(set_to_none=True)
            (cfg.task_weight * task).backward(retain_graph=True)
            if gen_opt is not None:
                gen_extra.backward()
                gen_opt.step()
            clf_opt.step()
        history.append(epoch_f1())
    return IntentResult(gen, clf, history)


# --- intent direction measurement ---


def trigger_duration_mean(
    gen: Generator,
    data: TaskData,
    triggers: Sequence[str],
    seed: int = 0,
    tau: float = 0.5,
) -> float:
    """Mean generated (normalized, clipped) fixation duration over fixations
    landing on trigger words, across all examples containing one."""
    durations: list[float] = []
    trigger_set = set(triggers)
    for ex in data.examples:
        sentence = data.sentences[ex.sentence_id]
        if not trigger_set.intersection(sentence.words):
            continue
        emb = data.embeddings[ex.sentence_id]
        noise = sample_noise(
            mix(seed, "trigger-stat", ex.sentence_id),
            gen.config.max_len,
            gen.config.noise_dim,
        )
        out = generator_forward(emb, noise, gen)
        steps = out.steps.detach().to(torch.float64).cpu().numpy()
        length = eos_length(steps[:, 2], tau)
        n_words = len(sentence)
        for pos, dur, _ in steps[:length]:
            idx = int(math.floor(pos * n_words + 0.5))
            idx = min(max(idx, 0), n_words - 1)
            if sentence.words[idx] in trigger_set:
                durations.append(min(max(float(dur), 0.0), 1.0))
    return float(np.mean(durations)) if durations else 0.0
