"""Conditional scanpath generator and discriminator.

Generator: token embeddings concatenated with Gaussian noise, sinusoidal
positional encoding, a stack of self-attention encoder layers, then two
heads: a per-step head emitting (position, duration, eos_prob) for all 80
steps in one pass, and a pooled head reconstructing the sentence CLS vector.

Discriminator: two bidirectional LSTM branches (token embeddings; scanpath
step triples) each followed by batch normalization, concatenated on the
feature axis, fused by one multi-head self-attention block, passed through a
post-fusion bidirectional LSTM, and squashed to a real/fake probability.

All dropout and noise randomness is driven by explicitly passed generators;
nothing reads global RNG state.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .corpus import Fixation, Scanpath
from .embeddings import TextEmbedding
from .errors import FormatError, ShapeError, ValidationError
from .seeding import torch_generator

DEFAULT_MAX_LEN = 80


# --- configs ---


@dataclass(frozen=True)
class GeneratorConfig:
    emb_dim: int = 768
    noise_dim: int = 8  # total width 776 = 768 + 8
    num_layers: int = 3
    num_heads: int = 4
    ff_dim: int | None = None  # defaults to 4 * d_model
    head_hidden: int = 256
    cls_dim: int | None = None  # defaults to emb_dim
    max_len: int = DEFAULT_MAX_LEN

    @property
    def d_model(self) -> int:
        return self.emb_dim + self.noise_dim

    def resolved_ff_dim(self) -> int:
        return self.ff_dim if self.ff_dim is not None else 4 * self.d_model

    def resolved_cls_dim(self) -> int:
        return self.cls_dim if self.cls_dim is not None else self.emb_dim

    def validate(self) -> None:
        if self.emb_dim < 1 or self.noise_dim < 1:
            raise ValidationError("emb_dim and noise_dim must be >= 1")
        if self.d_model % self.num_heads != 0:
            raise ValidationError(
                f"model width {self.d_model} not divisible by {self.num_heads} heads"
            )
        if self.num_layers < 1 or self.max_len < 1:
            raise ValidationError("num_layers and max_len must be >= 1")


@dataclass(frozen=True)
class DiscriminatorConfig:
    emb_dim: int = 768
    step_dim: int = 3
    hidden: int = 64
    dropout: float = 0.3
    fusion_heads: int = 4
    max_len: int = DEFAULT_MAX_LEN

    def validate(self) -> None:
        if not (0.0 <= self.dropout < 1.0):
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")
        if (4 * self.hidden) % self.fusion_heads != 0:
            raise ValidationError(
                f"fused width {4 * self.hidden} not divisible by {self.fusion_heads} heads"
            )


# --- noise ---


@dataclass
class NoiseBlock:
    matrix: torch.Tensor  # (max_len, noise_dim) standard normal
    seed: int


def sample_noise(
    seed: int, max_len: int = DEFAULT_MAX_LEN, noise_dim: int = 8
) -> NoiseBlock:
    """Reproducible (max_len, noise_dim) standard-normal block."""
    gen = torch_generator(seed)
    matrix = torch.randn(max_len, noise_dim, generator=gen)
    return NoiseBlock(matrix=matrix, seed=seed)


# --- shared bits ---


def sinusoidal_positional_encoding(
    max_len: int, d_model: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Classic alternating sin/cos table, (max_len, d_model)."""
    position = torch.arange(max_len, dtype=torch.float64).unsqueeze(1)
    half = torch.arange(0, d_model, 2, dtype=torch.float64)
    div = torch.exp(-half * math.log(10000.0) / d_model)
    pe = torch.zeros(max_len, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: pe[:, 1::2].shape[1]])
    return pe.to(dtype)


def init_params(module: nn.Module, rng: torch.Generator) -> None:
    """Uniform fan-in initialization: weights in +-1/sqrt(fan_in), biases 0,
    normalization gains 1. Deterministic given the generator state."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() >= 2:
                bound = 1.0 / math.sqrt(p.shape[-1])
                p.uniform_(-bound, bound, generator=rng)
            elif name.endswith("bias"):
                p.zero_()
            else:  # 1-D weight: BatchNorm/LayerNorm gain
                p.fill_(1.0)


def _dropout(
    x: torch.Tensor, rate: float, train_mode: bool, rng: torch.Generator | None
) -> torch.Tensor:
    if not train_mode or rate <= 0.0:
        return x
    if rng is None:
        raise ValidationError("dropout in train mode requires an explicit generator")
    keep = (torch.rand(x.shape, generator=rng) >= rate).to(x.dtype)
    return x * keep / (1.0 - rate)


# --- generator ---


class _EncoderLayer(nn.Module):
    """Post-norm transformer block: self-attention then position-wise FF."""

    def __init__(self, d_model: int, num_heads: int, ff_dim: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(d_model, num_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_dim), nn.ReLU(), nn.Linear(ff_dim, d_model)
        )
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        attn_out, _ = self.attn(x, x, x, need_weights=False)
        x = self.norm1(x + attn_out)
        return self.norm2(x + self.ff(x))


class Generator(nn.Module):
    def __init__(
        self,
        config: GeneratorConfig | None = None,
        init_seed: int | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.config = config or GeneratorConfig()
        self.config.validate()
        d = self.config.d_model
        self.layers = nn.ModuleList(
            _EncoderLayer(d, self.config.num_heads, self.config.resolved_ff_dim())
            for _ in range(self.config.num_layers)
        )
        h = self.config.head_hidden
        self.scanpath_head = nn.Sequential(nn.Linear(d, h), nn.ReLU(), nn.Linear(h, 3))
        self.cls_head = nn.Sequential(
            nn.Linear(d, h), nn.ReLU(), nn.Linear(h, self.config.resolved_cls_dim())
        )
        self.register_buffer(
            "pos_encoding",
            sinusoidal_positional_encoding(self.config.max_len, d),
            persistent=False,
        )
        if init_seed is not None:
            init_params(self, torch_generator(init_seed))
        self.to(dtype)

    def forward(
        self, emb_tokens: torch.Tensor, noise: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, emb_dim) tokens + (B, T, noise_dim) noise ->
        (B, T, 3) step triples with eos squashed to (0,1), (B, cls_dim) recon."""
        cfg = self.config
        if emb_tokens.dim() != 3 or emb_tokens.shape[1:] != (cfg.max_len, cfg.emb_dim):
            raise ShapeError(
                f"emb_tokens shape {tuple(emb_tokens.shape)}, "
                f"want (B, {cfg.max_len}, {cfg.emb_dim})"
            )
        if noise.shape != (emb_tokens.shape[0], cfg.max_len, cfg.noise_dim):
            raise ShapeError(
                f"noise shape {tuple(noise.shape)}, "
                f"want ({emb_tokens.shape[0]}, {cfg.max_len}, {cfg.noise_dim})"
            )
        x = torch.cat([emb_tokens, noise], dim=2) + self.pos_encoding.unsqueeze(0)
        for layer in self.layers:
            x = layer(x)
        raw = self.scanpath_head(x)
        steps = torch.cat([raw[:, :, :2], torch.sigmoid(raw[:, :, 2:])], dim=2)
        cls_recon = self.cls_head(x.mean(dim=1))
        return steps, cls_recon

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass
class GeneratorOutput:
    steps: torch.Tensor  # (max_len, 3): position, duration, eos_prob
    cls_recon: torch.Tensor  # (cls_dim,)


def generator_forward(
    emb: TextEmbedding, noise: NoiseBlock, gen: Generator
) -> GeneratorOutput:
    """Single-sentence forward pass; deterministic given (emb, noise, params)."""
    dtype = next(gen.parameters()).dtype
    tokens = torch.as_tensor(emb.tokens, dtype=dtype).unsqueeze(0)
    nz = noise.matrix.to(dtype).unsqueeze(0)
    with torch.no_grad():
        steps, cls_recon = gen(tokens, nz)
    return GeneratorOutput(steps=steps[0], cls_recon=cls_recon[0])


def eos_length(eos_probs: np.ndarray, tau: float) -> int:
    """Generated-path length: index of the first eos_prob strictly above tau,
    plus one; the whole sequence when none crosses."""
    if not (0.0 < tau < 1.0):
        raise ValidationError(f"tau must be in (0,1), got {tau}")
    above = np.flatnonzero(eos_probs > tau)
    return int(above[0]) + 1 if above.size else int(eos_probs.shape[0])


def truncate_at_eos(
    out: GeneratorOutput,
    sentence_len: int,
    p99: float,
    tau: float = 0.5,
    sentence_id: str = "",
    participant_id: str = "generated",
) -> Scanpath:
    """Cut the 80-step output at the first eos_prob strictly above tau (all
    below tau keeps the full length), then map positions back to word indices
    (half-up rounding, clamped) and durations back to milliseconds (floored
    at 1 ms so downstream duration invariants hold)."""
    if sentence_len < 1 or not p99 > 0:
        raise ValidationError("sentence_len and p99 must be positive")
    steps = out.steps.detach().to(torch.float64).cpu().numpy()
    length = eos_length(steps[:, 2], tau)
    fixations = []
    for pos, dur, _ in steps[:length]:
        idx = int(math.floor(pos * sentence_len + 0.5))
        idx = min(max(idx, 0), sentence_len - 1)
        dur_ms = max(min(max(dur, 0.0), 1.0) * p99, 1.0)
        fixations.append(Fixation(idx, dur_ms))
    return Scanpath(participant_id, sentence_id, tuple(fixations))


# --- discriminator ---


class Discriminator(nn.Module):
    def __init__(
        self,
        config: DiscriminatorConfig | None = None,
        init_seed: int | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        self.config.validate()
        cfg = self.config
        h = cfg.hidden
        self.lstm_emb = nn.LSTM(cfg.emb_dim, h, batch_first=True, bidirectional=True)
        self.lstm_steps = nn.LSTM(cfg.step_dim, h, batch_first=True, bidirectional=True)
        self.bn_emb = nn.BatchNorm1d(2 * h)
        self.bn_steps = nn.BatchNorm1d(2 * h)
        self.fusion = nn.MultiheadAttention(4 * h, cfg.fusion_heads, batch_first=True)
        self.lstm_post = nn.LSTM(4 * h, h, batch_first=True, bidirectional=True)
        self.head = nn.Sequential(nn.Linear(2 * h, h), nn.ReLU(), nn.Linear(h, 1))
        if init_seed is not None:
            init_params(self, torch_generator(init_seed))
        self.to(dtype)

    def forward(
        self,
        emb_tokens: torch.Tensor,
        steps: torch.Tensor,
        train_mode: bool = False,
        rng: torch.Generator | None = None,
    ) -> torch.Tensor:
        """(B, T, emb_dim), (B, T, 3) -> (B,) probability the scanpath is real.

        train_mode switches batch-norm to batch statistics (updating running
        stats) and enables dropout, which then requires rng.
        """
        cfg = self.config
        if emb_tokens.dim() != 3 or emb_tokens.shape[1:] != (cfg.max_len, cfg.emb_dim):
            raise ShapeError(
                f"emb_tokens shape {tuple(emb_tokens.shape)}, "
                f"want (B, {cfg.max_len}, {cfg.emb_dim})"
            )
        if steps.shape != (emb_tokens.shape[0], cfg.max_len, cfg.step_dim):
            raise ShapeError(
                f"steps shape {tuple(steps.shape)}, "
                f"want ({emb_tokens.shape[0]}, {cfg.max_len}, {cfg.step_dim})"
            )
        was_training = self.training
        self.train(train_mode)
        try:
            branch_e, _ = self.lstm_emb(emb_tokens)
            branch_s, _ = self.lstm_steps(steps)
            branch_e = self.bn_emb(branch_e.transpose(1, 2)).transpose(1, 2)
            branch_s = self.bn_steps(branch_s.transpose(1, 2)).transpose(1, 2)
            branch_e = _dropout(branch_e, cfg.dropout, train_mode, rng)
            branch_s = _dropout(branch_s, cfg.dropout, train_mode, rng)
            fused = torch.cat([branch_e, branch_s], dim=2)
            attn_out, _ = self.fusion(fused, fused, fused, need_weights=False)
            post, _ = self.lstm_post(attn_out)
            final = torch.cat([post[:, -1, : cfg.hidden], post[:, 0, cfg.hidden :]], dim=1)
            final = _dropout(final, cfg.dropout, train_mode, rng)
            logit = self.head(final).squeeze(1)
            return torch.sigmoid(logit)
        finally:
            self.train(was_training)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def discriminator_forward(
    emb: TextEmbedding,
    steps: torch.Tensor | np.ndarray,
    disc: Discriminator,
    train_mode: bool = False,
    rng: torch.Generator | None = None,
) -> float:
    """Single-sample probability that (text, scanpath) is a real pair."""
    dtype = next(disc.parameters()).dtype
    tokens = torch.as_tensor(emb.tokens, dtype=dtype).unsqueeze(0)
    steps_t = torch.as_tensor(steps, dtype=dtype).unsqueeze(0)
    if train_mode:
        prob = disc(tokens, steps_t, train_mode=True, rng=rng)
    else:
        with torch.no_grad():
            prob = disc(tokens, steps_t, train_mode=False)
    return float(prob[0])


# --- checkpoint container ---

CHECKPOINT_MAGIC = b"SPGC"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    meta: dict


def save_checkpoint(
    path: str | Path,
    kind: str,
    config: Mapping,
    tensors: Mapping[str, np.ndarray | torch.Tensor],
    meta: Mapping | None = None,
) -> None:
    """Versioned binary container: JSON header plus raw little-endian tensor
    bytes. Write-then-read is bit-exact."""
    entries = []
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": np.dtype(arr.dtype).str,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "kind": kind,
        "config": dict(config),
        "meta": dict(meta or {}),
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {data[:4]!r}")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header ({exc})") from None
    base = 12 + header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(data):
            raise FormatError(f"{path}: tensor {entry['name']!r} extends past file end")
        arr = np.frombuffer(data[start:end], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        kind=header["kind"], config=header["config"], tensors=tensors, meta=header["meta"]
    )


def module_state_tensors(module: nn.Module) -> dict[str, np.ndarray]:
    """Parameters and buffers as numpy arrays (running BN stats included)."""
    return {
        name: tensor.detach().cpu().numpy().copy()
        for name, tensor in module.state_dict().items()
    }


def load_module_state(module: nn.Module, tensors: Mapping[str, np.ndarray]) -> None:
    state = {name: torch.as_tensor(arr) for name, arr in tensors.items()}
    module.load_state_dict(state)


def save_generator(path: str | Path, gen: Generator, meta: Mapping | None = None) -> None:
    save_checkpoint(
        path, "generator", dataclasses.asdict(gen.config), module_state_tensors(gen), meta
    )


def load_generator(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[Generator, dict]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "generator":
        raise FormatError(f"{path}: checkpoint kind {ckpt.kind!r}, want 'generator'")
    gen = Generator(GeneratorConfig(**ckpt.config), dtype=dtype)
    load_module_state(gen, ckpt.tensors)
    return gen, ckpt.meta


def save_discriminator(
    path: str | Path, disc: Discriminator, meta: Mapping | None = None
) -> None:
    save_checkpoint(
        path, "discriminator", dataclasses.asdict(disc.config), module_state_tensors(disc), meta
    )


def load_discriminator(
    path: str | Path, dtype: torch.dtype = torch.float32
) -> tuple[Discriminator, dict]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "discriminator":
        raise FormatError(f"{path}: checkpoint kind {ckpt.kind!r}, want 'discriminator'")
    disc = Discriminator(DiscriminatorConfig(**ckpt.config), dtype=dtype)
    load_module_state(disc, ckpt.tensors)
    return disc, ckpt.meta
