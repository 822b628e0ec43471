"""Run a pretrained contextual encoder over a sentence file and write the
80x768 embedding archive plus a manifest describing how it was produced.

Words are whitespace tokens, matching the consumer's tokenization contract.
Each word row is the mean of its subword states from the encoder's last
hidden layer; the CLS vector is the last-layer state of the sentence-level
token at position 0. Sentences longer than 80 words are refused rather than
truncated, since the consumer indexes fixations by word position.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .archive import DIM, MAX_TOKENS, Record, write_archive
from .errors import ExportError

log = logging.getLogger(__name__)

LAYER = "last"
POOLING = "mean-of-subwords-per-word"


def read_sentences(path: str | Path) -> list[tuple[str, list[str]]]:
    """Parse the sentence JSONL format: one {"sentence_id", "text"} per line.

    Returns (id, words) pairs in file order. Empty text and duplicate ids are
    errors; an export must be unambiguous about what each record is.
    """
    seen: set[str] = set()
    out: list[tuple[str, list[str]]] = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ExportError(f"cannot read sentences file: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ExportError(f"{path}: line {lineno}: bad JSON ({exc})") from None
            if not isinstance(obj, dict) or "sentence_id" not in obj or "text" not in obj:
                raise ExportError(f"{path}: line {lineno}: need sentence_id and text fields")
            sid = str(obj["sentence_id"])
            words = str(obj["text"]).split()
            if not words:
                raise ExportError(f"{path}: line {lineno}: sentence {sid!r} has empty text")
            if sid in seen:
                raise ExportError(f"{path}: line {lineno}: duplicate sentence id {sid!r}")
            seen.add(sid)
            out.append((sid, words))
    too_long = [(sid, len(words)) for sid, words in out if len(words) > MAX_TOKENS]
    if too_long:
        listing = ", ".join(f"{sid} ({n} words)" for sid, n in too_long)
        raise ExportError(f"sentences exceed the {MAX_TOKENS}-word limit: {listing}")
    return out


@dataclass
class Encoder:
    encoder_id: str
    tokenizer: object
    model: object
    max_positions: int | None


def load_encoder(encoder_id: str) -> Encoder:
    """Load tokenizer and model from a hub id or local directory."""
    from transformers import AutoModel, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(encoder_id)
        model = AutoModel.from_pretrained(encoder_id)
    except Exception as exc:
        raise ExportError(f"cannot load encoder {encoder_id!r}: {exc}") from exc
    if not getattr(tokenizer, "is_fast", False):
        # word_ids() only exists on fast tokenizers
        raise ExportError(
            f"encoder {encoder_id!r} has no fast tokenizer; subword-to-word "
            "pooling needs word alignment"
        )
    hidden = getattr(model.config, "hidden_size", None)
    if hidden != DIM:
        raise ExportError(f"encoder {encoder_id!r} emits {hidden}-d states, need {DIM}-d")
    model.eval()
    max_positions = getattr(model.config, "max_position_embeddings", None)
    return Encoder(encoder_id, tokenizer, model, max_positions)


def pool_subwords(hidden: np.ndarray, word_ids: list[int | None], n_words: int) -> np.ndarray:
    """Mean-pool subword states per word into an (n_words, dim) matrix.

    word_ids maps each encoder token to its word index, with None for special
    tokens. A word the tokenizer dropped entirely would leave a silent zero
    row, so that is an error instead.
    """
    dim = hidden.shape[1]
    summed = np.zeros((n_words, dim), dtype=np.float64)
    counts = np.zeros(n_words, dtype=np.int64)
    for t, w in enumerate(word_ids):
        if w is None:
            continue
        if not (0 <= w < n_words):
            raise ExportError(f"tokenizer produced word index {w} for {n_words} words")
        summed[w] += hidden[t]
        counts[w] += 1
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ExportError(f"words {missing.tolist()} produced no encoder tokens")
    return (summed / counts[:, None]).astype(np.float32)


def encode_words(enc: Encoder, sentence_id: str, words: list[str]) -> Record:
    batch = enc.tokenizer(words, is_split_into_words=True, return_tensors="pt")
    n_tokens = batch["input_ids"].shape[1]
    if enc.max_positions is not None and n_tokens > enc.max_positions:
        raise ExportError(
            f"{sentence_id}: {n_tokens} subword tokens exceed the encoder's "
            f"{enc.max_positions}-position limit"
        )
    with torch.no_grad():
        out = enc.model(**batch)
    hidden = out.last_hidden_state[0].numpy()
    pooled = pool_subwords(hidden, batch.word_ids(0), len(words))
    tokens = np.zeros((MAX_TOKENS, DIM), dtype=np.float32)
    tokens[: len(words)] = pooled
    return Record(sentence_id, len(words), tokens, hidden[0].astype(np.float32))


def _probe_determinism(enc: Encoder, sentence_id: str, words: list[str]) -> bool:
    a = encode_words(enc, sentence_id, words)
    b = encode_words(enc, sentence_id, words)
    return a.tokens.tobytes() == b.tokens.tobytes() and a.cls.tobytes() == b.cls.tobytes()


@dataclass
class ExportManifest:
    """Provenance sidecar written next to every archive."""

    encoder: str
    layer: str
    pooling: str
    max_tokens: int
    dim: int
    record_count: int
    deterministic: bool
    created: str

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


def manifest_path(out_path: str | Path) -> Path:
    return Path(str(out_path) + ".manifest.json")


def export(
    sentences_file: str | Path, encoder_id: str, out_path: str | Path
) -> tuple[Path, ExportManifest]:
    """Encode every sentence in file order and write archive plus manifest.

    Returns (archive_path, manifest). The determinism flag in the manifest
    reports whether encoding the first sentence twice was bit-identical;
    False flags an encoder that randomizes even in eval mode.
    """
    sentences = read_sentences(sentences_file)
    if not sentences:
        raise ExportError(f"{sentences_file}: no sentences")
    enc = load_encoder(encoder_id)
    records = []
    for sid, words in sentences:
        records.append(encode_words(enc, sid, words))
    log.info("encoded %d sentences with %s", len(records), encoder_id)
    deterministic = _probe_determinism(enc, *sentences[0])
    if not deterministic:
        log.warning("encoder %s is not deterministic in eval mode", encoder_id)
    out_path = Path(out_path)
    write_archive(out_path, records)
    manifest = ExportManifest(
        encoder=encoder_id,
        layer=LAYER,
        pooling=POOLING,
        max_tokens=MAX_TOKENS,
        dim=DIM,
        record_count=len(records),
        deterministic=deterministic,
        created=datetime.now(timezone.utc).isoformat(),
    )
    manifest_path(out_path).write_text(manifest.to_json(), encoding="utf-8")
    return out_path, manifest
