"""Raw fixation records -> normalized fixed-length training sequences.

Pipeline: parse CSV fixation rows into per-(participant, sentence) scanpaths,
drop outlier durations above the corpus 99th percentile (which then serves as
the duration scale), normalize word positions by sentence length and durations
by that percentile, pad/trim to exactly 80 steps with a binary end-of-sequence
marker, and split by sentence into train/val/test.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .seeding import np_rng

MAX_STEPS = 80
CSV_HEADER = ["participant_id", "sentence_id", "word_index", "duration_ms"]


# --- domain types ---


@dataclass(frozen=True)
class Fixation:
    word_index: int  # 0-based position of the fixated word in its sentence
    duration_ms: float  # dwell time, strictly positive

    def __post_init__(self) -> None:
        if self.word_index < 0:
            raise ValidationError(f"word_index must be >= 0, got {self.word_index}")
        if not (self.duration_ms > 0):
            raise ValidationError(f"duration_ms must be > 0, got {self.duration_ms}")


@dataclass(frozen=True)
class Scanpath:
    """Temporally ordered fixations of one participant over one sentence.

    Word indices may repeat and need not increase (regressions are data, not
    noise).
    """

    participant_id: str
    sentence_id: str
    fixations: tuple[Fixation, ...]

    def __post_init__(self) -> None:
        if len(self.fixations) == 0:
            raise ValidationError("scanpath needs at least one fixation")

    @property
    def word_indices(self) -> list[int]:
        return [f.word_index for f in self.fixations]

    @property
    def durations_ms(self) -> list[float]:
        return [f.duration_ms for f in self.fixations]


@dataclass(frozen=True)
class Sentence:
    sentence_id: str
    words: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.words) == 0:
            raise ValidationError(f"sentence {self.sentence_id!r} has no words")

    def __len__(self) -> int:
        return len(self.words)


@dataclass
class NormalizedScanpath:
    """Fixed-length training target: 80 rows of (position, duration, eos).

    Rows at and beyond ``true_length`` are the pad triple (0, 0, 0); the eos
    column is 1 exactly at row ``true_length - 1``. ``norm_meta`` keeps the
    scales needed to map the path back to word indices and milliseconds.
    """

    steps: np.ndarray  # (80, 3) float64
    true_length: int
    participant_id: str
    sentence_id: str
    p99_duration_ms: float
    sentence_len: int

    def validate(self) -> None:
        if self.steps.shape != (MAX_STEPS, 3):
            raise ValidationError(f"steps shape {self.steps.shape}, want ({MAX_STEPS}, 3)")
        if not (1 <= self.true_length <= MAX_STEPS):
            raise ValidationError(f"true_length {self.true_length} outside 1..{MAX_STEPS}")
        if not np.isfinite(self.steps).all():
            raise ValidationError("non-finite step values")
        if (self.steps < 0).any() or (self.steps > 1).any():
            raise ValidationError("step values outside [0, 1]")
        eos = self.steps[:, 2]
        hot = np.flatnonzero(eos == 1.0)
        if hot.size != 1 or hot[0] != self.true_length - 1:
            raise ValidationError("eos must be 1 exactly at true_length - 1")
        if self.true_length < MAX_STEPS and np.any(self.steps[self.true_length :] != 0.0):
            raise ValidationError("pad rows must be all zeros")


@dataclass
class CorpusSplit:
    train: list[tuple[Sentence, Scanpath]]
    val: list[tuple[Sentence, Scanpath]]
    test: list[tuple[Sentence, Scanpath]]
    seed: int

    def part(self, name: str) -> list[tuple[Sentence, Scanpath]]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split part {name!r}")
        return getattr(self, name)


# --- parsing ---


def parse_fixation_records(rows: Iterable[Mapping[str, str]]) -> list[Scanpath]:
    """Group already-decoded row dicts into scanpaths, preserving row order.

    One Scanpath per (participant_id, sentence_id) pair, fixations in the
    order the rows arrived.
    """
    grouped: dict[tuple[str, str], list[Fixation]] = {}
    order: list[tuple[str, str]] = []
    for i, row in enumerate(rows):
        rownum = i + 1
        try:
            participant = row["participant_id"]
            sentence = row["sentence_id"]
            word_raw = row["word_index"]
            dur_raw = row["duration_ms"]
        except KeyError as exc:
            raise ParseError(f"row {rownum}: missing field {exc.args[0]!r}") from None
        if participant is None or sentence is None or word_raw is None or dur_raw is None:
            raise ParseError(f"row {rownum}: missing field value")
        try:
            word_index = int(word_raw)
            duration_ms = float(dur_raw)
        except (TypeError, ValueError):
            raise ParseError(
                f"row {rownum}: word_index/duration_ms not numeric: "
                f"{word_raw!r}, {dur_raw!r}"
            ) from None
        if word_index < 0:
            raise ValidationError(f"row {rownum}: negative word_index {word_index}")
        if not duration_ms > 0:
            raise ValidationError(f"row {rownum}: duration_ms must be > 0, got {duration_ms}")
        key = (participant, sentence)
        if key not in grouped:
            grouped[key] = []
            order.append(key)
        grouped[key].append(Fixation(word_index, duration_ms))
    return [
        Scanpath(participant_id=p, sentence_id=s, fixations=tuple(grouped[(p, s)]))
        for (p, s) in order
    ]


def read_fixation_csv(path: str | Path) -> list[Scanpath]:
    """Read the UTF-8 CSV interchange format (header pinned to CSV_HEADER)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return _parse_fixation_csv(fh)


def _parse_fixation_csv(fh: io.TextIOBase) -> list[Scanpath]:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty fixation file") from None
    if header != CSV_HEADER:
        raise ParseError(f"bad header {header!r}, want {CSV_HEADER!r}")
    rows = []
    for i, rec in enumerate(reader):
        if len(rec) == 0:  # ignore trailing blank lines
            continue
        if len(rec) != 4:
            raise ParseError(f"row {i + 1}: expected 4 fields, got {len(rec)}")
        rows.append(dict(zip(CSV_HEADER, rec)))
    return parse_fixation_records(rows)


def write_fixation_csv(path: str | Path, corpus: Sequence[Scanpath]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for sp in corpus:
            for fx in sp.fixations:
                writer.writerow(
                    [sp.participant_id, sp.sentence_id, fx.word_index, repr(fx.duration_ms)]
                )


def read_sentences_jsonl(path: str | Path) -> dict[str, Sentence]:
    """Read the sentence file: one {"sentence_id", "text"} object per line.

    Words are whitespace tokens; the eyetracking word indices must agree with
    that tokenization (documented input contract).
    """
    sentences: dict[str, Sentence] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if not isinstance(obj, dict) or "sentence_id" not in obj or "text" not in obj:
                raise ParseError(f"{path}: line {lineno}: need sentence_id and text fields")
            words = tuple(str(obj["text"]).split())
            if not words:
                raise ValidationError(f"{path}: line {lineno}: sentence has no words")
            sentences[str(obj["sentence_id"])] = Sentence(str(obj["sentence_id"]), words)
    return sentences


# --- outlier capping and normalization ---


def cap_outlier_durations(corpus: Sequence[Scanpath]) -> tuple[list[Scanpath], float]:
    """Drop fixations longer than the corpus p99 duration; return (corpus', p99).

    p99 is the linear-interpolation 99th percentile over every fixation in the
    corpus. It doubles as the duration scale for normalization, so it is
    returned alongside the filtered corpus. Scanpaths that lose all their
    fixations are removed.
    """
    if len(corpus) == 0:
        raise ValidationError("cannot cap an empty corpus")
    durations = np.array(
        [fx.duration_ms for sp in corpus for fx in sp.fixations], dtype=np.float64
    )
    p99 = float(np.percentile(durations, 99))
    capped: list[Scanpath] = []
    for sp in corpus:
        kept = tuple(fx for fx in sp.fixations if fx.duration_ms <= p99)
        if kept:
            capped.append(Scanpath(sp.participant_id, sp.sentence_id, kept))
    return capped, p99


def normalize(sp: Scanpath, sent: Sentence, p99: float) -> NormalizedScanpath:
    """Map a scanpath into the unit square and pad/trim to 80 steps.

    position = word_index / sentence_len, duration = duration_ms / p99 clipped
    to [0, 1]. Paths longer than 80 fixations keep the first 80 with eos
    forced at step 80.
    """
    if not p99 > 0:
        raise ValidationError(f"p99 must be > 0, got {p99}")
    n_words = len(sent)
    for fx in sp.fixations:
        if fx.word_index >= n_words:
            raise ValidationError(
                f"scanpath ({sp.participant_id}, {sp.sentence_id}): word_index "
                f"{fx.word_index} out of range for {n_words}-word sentence"
            )
    fixations = sp.fixations[:MAX_STEPS]
    k = len(fixations)
    steps = np.zeros((MAX_STEPS, 3), dtype=np.float64)
    for i, fx in enumerate(fixations):
        steps[i, 0] = fx.word_index / n_words
        steps[i, 1] = min(fx.duration_ms / p99, 1.0)
    steps[k - 1, 2] = 1.0
    return NormalizedScanpath(
        steps=steps,
        true_length=k,
        participant_id=sp.participant_id,
        sentence_id=sp.sentence_id,
        p99_duration_ms=p99,
        sentence_len=n_words,
    )


# --- splitting ---


def split(
    scanpaths: Sequence[Scanpath],
    sentences: Mapping[str, Sentence],
    ratios: tuple[float, float, float],
    seed: int,
) -> CorpusSplit:
    """Partition by sentence_id so no sentence leaks across splits.

    Counts are floor(n*train) / floor(n*val) / remainder, over sentence ids
    sorted then shuffled by the seed. Deterministic given (corpus, seed).
    """
    if len(ratios) != 3 or any(not (r > 0) for r in ratios):
        raise ValidationError(f"ratios must be three positives, got {ratios!r}")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)}")
    ids = sorted({sp.sentence_id for sp in scanpaths})
    for sid in ids:
        if sid not in sentences:
            raise ValidationError(f"scanpath references unknown sentence {sid!r}")
    if len(ids) < 3:
        raise ValidationError(f"need at least 3 distinct sentences, got {len(ids)}")
    perm = np_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    n = len(ids)
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    train_ids = set(shuffled[:n_train])
    val_ids = set(shuffled[n_train : n_train + n_val])
    parts: dict[str, list[tuple[Sentence, Scanpath]]] = {"train": [], "val": [], "test": []}
    for sp in scanpaths:
        if sp.sentence_id in train_ids:
            part = "train"
        elif sp.sentence_id in val_ids:
            part = "val"
        else:
            part = "test"
        parts[part].append((sentences[sp.sentence_id], sp))
    return CorpusSplit(train=parts["train"], val=parts["val"], test=parts["test"], seed=seed)


# --- normalized archive IO (JSON Lines) ---


def write_normalized_jsonl(path: str | Path, paths: Iterable[NormalizedScanpath]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for nsp in paths:
            rec = {
                "participant_id": nsp.participant_id,
                "sentence_id": nsp.sentence_id,
                "steps": [[float(v) for v in row] for row in nsp.steps],
                "true_length": int(nsp.true_length),
                "norm_meta": {
                    "p99_duration_ms": float(nsp.p99_duration_ms),
                    "sentence_len": int(nsp.sentence_len),
                },
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_normalized_jsonl(path: str | Path) -> list[NormalizedScanpath]:
    out: list[NormalizedScanpath] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            try:
                nsp = NormalizedScanpath(
                    steps=np.array(rec["steps"], dtype=np.float64),
                    true_length=int(rec["true_length"]),
                    participant_id=str(rec["participant_id"]),
                    sentence_id=str(rec["sentence_id"]),
                    p99_duration_ms=float(rec["norm_meta"]["p99_duration_ms"]),
                    sentence_len=int(rec["norm_meta"]["sentence_len"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}: line {lineno}: bad record ({exc})") from None
            nsp.validate()
            out.append(nsp)
    return out


def denormalize(nsp: NormalizedScanpath) -> Scanpath:
    """Back to word indices and milliseconds using the stored norm_meta."""
    fixations = []
    for i in range(nsp.true_length):
        pos, dur, _ = nsp.steps[i]
        idx = int(math.floor(pos * nsp.sentence_len + 0.5))
        idx = min(max(idx, 0), nsp.sentence_len - 1)
        fixations.append(Fixation(idx, max(dur * nsp.p99_duration_ms, 1.0)))
    return Scanpath(nsp.participant_id, nsp.sentence_id, tuple(fixations))
