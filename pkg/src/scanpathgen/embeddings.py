"""Precomputed per-sentence token embeddings: binary archive IO and lookup.

The toolkit never runs a text encoder itself; it ingests archives produced
offline. Archive format (little-endian):

    magic  "SPEMB1" (6 bytes)
    u32    record_count
    u32    max_tokens (must be 80)
    u32    dim        (must be 768)
    then per record:
      u16    id_length
      bytes  sentence_id (UTF-8, id_length bytes)
      u16    token_count (1..max_tokens)
      f32[max_tokens * dim]  token matrix, row-major, zero rows past token_count
      f32[dim]               CLS vector

In-memory TextEmbedding instances may use other (max_tokens, dim) shapes so
scaled-down models can be exercised; the on-disk format is fixed at 80x768.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import FormatError, MissingKeyError, ShapeError, ValidationError

log = logging.getLogger(__name__)

MAGIC = b"SPEMB1"
ARCHIVE_MAX_TOKENS = 80
ARCHIVE_DIM = 768


@dataclass
class TextEmbedding:
    """Per-sentence conditioning input: token matrix plus a CLS summary vector.

    tokens is (max_tokens, dim) float32 with all-zero rows at indices >=
    token_count; cls is (dim,) float32.
    """

    sentence_id: str
    tokens: np.ndarray
    token_count: int
    cls: np.ndarray

    def validate(self) -> None:
        if self.tokens.ndim != 2:
            raise ShapeError(f"{self.sentence_id}: tokens must be 2-D, got {self.tokens.ndim}-D")
        max_tokens, dim = self.tokens.shape
        if self.cls.shape != (dim,):
            raise ShapeError(
                f"{self.sentence_id}: cls shape {self.cls.shape}, want ({dim},)"
            )
        if not (1 <= self.token_count <= max_tokens):
            raise ValidationError(
                f"{self.sentence_id}: token_count {self.token_count} outside 1..{max_tokens}"
            )
        if not np.isfinite(self.tokens).all() or not np.isfinite(self.cls).all():
            raise ValidationError(f"{self.sentence_id}: non-finite embedding values")
        if self.token_count < max_tokens and np.any(self.tokens[self.token_count :] != 0):
            raise ValidationError(f"{self.sentence_id}: nonzero rows past token_count")


def write_embedding_archive(
    path: str | Path, embeddings: Sequence[TextEmbedding]
) -> None:
    """Write the 80x768 binary archive. Entries are validated before writing."""
    for emb in embeddings:
        emb.validate()
        if emb.tokens.shape != (ARCHIVE_MAX_TOKENS, ARCHIVE_DIM):
            raise ShapeError(
                f"{emb.sentence_id}: archive requires {ARCHIVE_MAX_TOKENS}x{ARCHIVE_DIM} "
                f"tokens, got {emb.tokens.shape}"
            )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", len(embeddings), ARCHIVE_MAX_TOKENS, ARCHIVE_DIM))
        for emb in embeddings:
            id_bytes = emb.sentence_id.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise ValidationError(f"sentence_id too long ({len(id_bytes)} bytes)")
            fh.write(struct.pack("<H", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(struct.pack("<H", emb.token_count))
            fh.write(np.ascontiguousarray(emb.tokens, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(emb.cls, dtype="<f4").tobytes())


def load_embedding_archive(path: str | Path) -> dict[str, TextEmbedding]:
    """Read and validate an archive; duplicate ids keep the last record."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 12:
        raise FormatError(f"{path}: truncated header")
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    record_count, max_tokens, dim = struct.unpack_from("<III", data, len(MAGIC))
    if max_tokens != ARCHIVE_MAX_TOKENS or dim != ARCHIVE_DIM:
        raise ShapeError(
            f"{path}: header declares {max_tokens}x{dim}, "
            f"want {ARCHIVE_MAX_TOKENS}x{ARCHIVE_DIM}"
        )
    offset = len(MAGIC) + 12
    matrix_bytes = max_tokens * dim * 4
    out: dict[str, TextEmbedding] = {}
    for rec in range(record_count):
        try:
            (id_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            sentence_id = data[offset : offset + id_len].decode("utf-8")
            if len(data[offset : offset + id_len]) != id_len:
                raise struct.error("short id")
            offset += id_len
            (token_count,) = struct.unpack_from("<H", data, offset)
            offset += 2
            if len(data) < offset + matrix_bytes + dim * 4:
                raise struct.error("short record body")
            tokens = (
                np.frombuffer(data, dtype="<f4", count=max_tokens * dim, offset=offset)
                .reshape(max_tokens, dim)
                .copy()
            )
            offset += matrix_bytes
            cls = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
            offset += dim * 4
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"{path}: record {rec}: {exc}") from None
        emb = TextEmbedding(sentence_id=sentence_id, tokens=tokens, token_count=token_count, cls=cls)
        emb.validate()
        if sentence_id in out:
            log.warning("%s: duplicate sentence_id %r, keeping the last record", path, sentence_id)
        out[sentence_id] = emb
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes after last record")
    return out


def lookup(embeddings: Mapping[str, TextEmbedding], sentence_id: str) -> TextEmbedding:
    try:
        return embeddings[sentence_id]
    except KeyError:
        raise MissingKeyError(f"no embedding for sentence {sentence_id!r}") from None
