"""Writer for the sentence embedding archive format.

This is an independent implementation of the consumer's on-disk contract;
the byte layout below is the interface between the two tools and must not
drift. Layout (little-endian):

    magic  "SPEMB1" (6 bytes)
    u32    record_count
    u32    max_tokens (80)
    u32    dim        (768)
    then per record:
      u16    id_length
      bytes  sentence_id (UTF-8, id_length bytes)
      u16    token_count (1..max_tokens)
      f32[max_tokens * dim]  token matrix, row-major, zero rows past token_count
      f32[dim]               CLS vector
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ExportError

MAGIC = b"SPEMB1"
MAX_TOKENS = 80
DIM = 768


@dataclass
class Record:
    sentence_id: str
    token_count: int
    tokens: np.ndarray  # (MAX_TOKENS, DIM) float32, zero past token_count
    cls: np.ndarray  # (DIM,) float32

    def validate(self) -> None:
        if self.tokens.shape != (MAX_TOKENS, DIM):
            raise ExportError(
                f"{self.sentence_id}: token matrix {self.tokens.shape}, "
                f"want ({MAX_TOKENS}, {DIM})"
            )
        if self.cls.shape != (DIM,):
            raise ExportError(f"{self.sentence_id}: cls shape {self.cls.shape}, want ({DIM},)")
        if not (1 <= self.token_count <= MAX_TOKENS):
            raise ExportError(
                f"{self.sentence_id}: token_count {self.token_count} outside 1..{MAX_TOKENS}"
            )
        if not np.isfinite(self.tokens).all() or not np.isfinite(self.cls).all():
            raise ExportError(f"{self.sentence_id}: non-finite embedding values")
        if self.token_count < MAX_TOKENS and np.any(self.tokens[self.token_count :] != 0):
            raise ExportError(f"{self.sentence_id}: nonzero rows past token_count")


def write_archive(path: str | Path, records: Sequence[Record]) -> None:
    """Write records in order. Every record is validated first so a bad
    sentence never leaves a truncated file behind."""
    for rec in records:
        rec.validate()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", len(records), MAX_TOKENS, DIM))
        for rec in records:
            id_bytes = rec.sentence_id.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise ExportError(f"sentence id too long ({len(id_bytes)} bytes)")
            fh.write(struct.pack("<H", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(struct.pack("<H", rec.token_count))
            fh.write(np.ascontiguousarray(rec.tokens, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(rec.cls, dtype="<f4").tobytes())
