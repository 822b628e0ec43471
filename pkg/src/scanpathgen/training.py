"""Adversarial training loop: alternating updates, checkpoints, reproducible runs.

All randomness (shuffling, noise, dropout) is derived functionally from
(config seed, epoch, batch index), so resuming from a checkpoint needs no
RNG state serialization: the remaining epochs replay bit-identically.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .corpus import CorpusSplit, NormalizedScanpath, Scanpath, Sentence, normalize
from .embeddings import TextEmbedding, lookup
from .errors import ConfigError, TrainingDivergedError, ValidationError
from .losses import (
    LossWeights,
    adversarial_terms,
    batched_scanpath_content_loss,
    net_generator_loss,
    text_content_loss,
)
from .metrics import BIN_MS, MetricReport, score_pairs
from .model import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    generator_forward,
    load_checkpoint,
    load_module_state,
    module_state_tensors,
    sample_noise,
    save_checkpoint,
    save_discriminator,
    save_generator,
    truncate_at_eos,
)
from .seeding import mix, torch_generator

log = logging.getLogger(__name__)

_OPTIMIZERS = {"gen": ("adam",), "disc": ("rmsprop",)}
_CONFIG_KEYS = (
    "batch_size",
    "gen_lr",
    "disc_lr",
    "epochs",
    "gen_optimizer",
    "disc_optimizer",
    "alpha",
    "beta",
    "gamma",
    "seed",
    "checkpoint_every",
    "lr_schedule",
)


@dataclass
class TrainConfig:
    """Optimization settings; defaults follow the reference setup."""

    batch_size: int = 128
    gen_lr: float = 1e-4
    disc_lr: float = 1e-5
    epochs: int = 300
    gen_optimizer: str = "adam"
    disc_optimizer: str = "rmsprop"
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 10
    lr_schedule: str = "constant"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.gen_lr > 0 and self.disc_lr > 0):
            raise ConfigError("learning rates must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.gen_optimizer not in _OPTIMIZERS["gen"]:
            raise ConfigError(f"unsupported gen_optimizer {self.gen_optimizer!r}")
        if self.disc_optimizer not in _OPTIMIZERS["disc"]:
            raise ConfigError(f"unsupported disc_optimizer {self.disc_optimizer!r}")
        if self.lr_schedule != "constant":
            raise ConfigError(f"unsupported lr_schedule {self.lr_schedule!r}")
        self.weights.validate()

    def to_flat_dict(self) -> dict[str, str]:
        return {
            "batch_size": str(self.batch_size),
            "gen_lr": repr(self.gen_lr),
            "disc_lr": repr(self.disc_lr),
            "epochs": str(self.epochs),
            "gen_optimizer": self.gen_optimizer,
            "disc_optimizer": self.disc_optimizer,
            "alpha": repr(self.weights.alpha),
            "beta": repr(self.weights.beta),
            "gamma": repr(self.weights.gamma),
            "seed": str(self.seed),
            "checkpoint_every": str(self.checkpoint_every),
            "lr_schedule": self.lr_schedule,
        }


def parse_train_config(text: str) -> TrainConfig:
    """Parse the flat key=value config format; unknown keys are errors."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value.strip()

    def take(key: str, conv, default):
        if key not in values:
            return default
        try:
            return conv(values[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {values[key]!r}") from exc

    cfg = TrainConfig(
        batch_size=take("batch_size", int, 128),
        gen_lr=take("gen_lr", float, 1e-4),
        disc_lr=take("disc_lr", float, 1e-5),
        epochs=take("epochs", int, 300),
        gen_optimizer=take("gen_optimizer", str, "adam"),
        disc_optimizer=take("disc_optimizer", str, "rmsprop"),
        weights=LossWeights(
            alpha=take("alpha", float, 1.0),
            beta=take("beta", float, 1.0),
            gamma=take("gamma", float, 1.0),
        ),
        seed=take("seed", int, 0),
        checkpoint_every=take("checkpoint_every", int, 10),
        lr_schedule=take("lr_schedule", str, "constant"),
    )
    cfg.validate()
    return cfg


def format_train_config(cfg: TrainConfig) -> str:
    flat = cfg.to_flat_dict()
    return "".join(f"{key}={flat[key]}\n" for key in _CONFIG_KEYS)


def read_train_config(path: str | Path) -> TrainConfig:
    return parse_train_config(Path(path).read_text(encoding="utf-8"))


@dataclass
class EpochRecord:
    """Mean batch losses plus the validation report for one epoch."""

    epoch: int
    lg: float
    ls: float
    lr: float
    gen_term: float
    disc_loss: float
    val: MetricReport | None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "lg": self.lg,
            "ls": self.ls,
            "lr": self.lr,
            "gen_term": self.gen_term,
            "disc_loss": self.disc_loss,
            "val": None if self.val is None else self.val.to_dict(),
        }


RunHistory = list[EpochRecord]


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Discriminator
    history: RunHistory
    best_epoch: int | None
    best_val_nld: float | None


def _optimizer_tensors(opt: torch.optim.Optimizer, prefix: str):
    """Split an optimizer state_dict into (numpy tensors, JSON structure)."""
    sd = opt.state_dict()
    tensors: dict[str, np.ndarray] = {}
    scalars: dict[str, dict] = {}
    for pid, state in sd["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                tensors[f"{prefix}.{pid}.{key}"] = value.detach().cpu().numpy().copy()
            else:
                scalars.setdefault(str(pid), {})[key] = value
    structure = {"param_groups": sd["param_groups"], "scalars": scalars}
    return tensors, structure


def _restore_optimizer(opt, prefix: str, tensors: Mapping[str, np.ndarray], structure: dict) -> None:
    state: dict[int, dict] = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        _, pid_s, key = name.split(".", 2)
        state.setdefault(int(pid_s), {})[key] = torch.from_numpy(arr.copy())
    for pid_s, extra in structure["scalars"].items():
        state.setdefault(int(pid_s), {}).update(extra)
    opt.load_state_dict({"state": state, "param_groups": structure["param_groups"]})


def _check_embeddings(
    parts: Sequence[Sequence[tuple[Sentence, Scanpath]]],
    embs: Mapping[str, TextEmbedding],
) -> None:
    # contract: fail before any training work starts
    seen: set[str] = set()
    for part in parts:
        for sentence, _ in part:
            if sentence.sentence_id in seen:
                continue
            seen.add(sentence.sentence_id)
            emb = lookup(embs, sentence.sentence_id)
            if emb.token_count != len(sentence):
                raise ValidationError(
                    f"embedding for {sentence.sentence_id!r} covers "
                    f"{emb.token_count} tokens but the sentence has {len(sentence)} words"
                )


def _sentence_groups(part: Sequence[tuple[Sentence, Scanpath]]):
    """Example indices grouped by sentence, deterministically ordered."""
    order = sorted(
        range(len(part)),
        key=lambda i: (part[i][0].sentence_id, part[i][1].participant_id),
    )
    groups: list[list[int]] = []
    for i in order:
        sid = part[i][0].sentence_id
        if groups and part[groups[-1][0]][0].sentence_id == sid:
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def _stack_embeddings(
    examples: Sequence[tuple[Sentence, Scanpath]],
    embs: Mapping[str, TextEmbedding],
    dtype: torch.dtype,
):
    tok: dict[str, torch.Tensor] = {}
    cls: dict[str, torch.Tensor] = {}
    for sentence, _ in examples:
        sid = sentence.sentence_id
        if sid not in tok:
            emb = embs[sid]
            tok[sid] = torch.from_numpy(emb.tokens.astype(np.float32)).to(dtype)
            cls[sid] = torch.from_numpy(emb.cls.astype(np.float32)).to(dtype)
    return tok, cls


class _Batcher:
    """Precomputed tensors for one split part plus seeded epoch iteration."""

    def __init__(self, part, embs, p99: float, dtype: torch.dtype):
        self.part = list(part)
        self.groups = _sentence_groups(self.part)
        self.tok, self.cls = _stack_embeddings(self.part, embs, dtype)
        self.steps = []
        self.true_lengths = []
        self.sids = []
        for sentence, sp in self.part:
            nsp = normalize(sp, sentence, p99)
            self.steps.append(torch.from_numpy(nsp.steps).to(dtype))
            self.true_lengths.append(nsp.true_length)
            self.sids.append(sentence.sentence_id)

    def epoch_batches(self, seed: int, epoch: int, batch_size: int):
        rng = np.random.default_rng(mix(seed, "shuffle", epoch))
        perm = rng.permutation(len(self.groups))
        flat = [i for g in perm for i in self.groups[g]]
        for start in range(0, len(flat), batch_size):
            yield flat[start : start + batch_size]

    def batch_tensors(self, idx: Sequence[int]):
        emb = torch.stack([self.tok[self.sids[i]] for i in idx])
        cls = torch.stack([self.cls[self.sids[i]] for i in idx])
        steps = torch.stack([self.steps[i] for i in idx])
        lengths = torch.tensor([self.true_lengths[i] for i in idx], dtype=torch.long)
        return emb, cls, steps, lengths


def _grad_norm(module: torch.nn.Module) -> float:
    total = 0.0
    for p in module.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def _diverged(epoch: int, batch_index: int, values: dict, gen, disc, out_dir):
    diagnostics = {
        "epoch": epoch,
        "batch_index": batch_index,
        "losses": values,
        "gen_grad_norm": _grad_norm(gen),
        "disc_grad_norm": _grad_norm(disc),
        "gen_param_norm": math.sqrt(
            sum(float(p.detach().pow(2).sum()) for p in gen.parameters())
        ),
        "disc_param_norm": math.sqrt(
            sum(float(p.detach().pow(2).sum()) for p in disc.parameters())
        ),
    }
    if out_dir is not None:
        dump = Path(out_dir) / "divergence_diagnostics.json"
        dump.write_text(json.dumps(diagnostics, indent=2, sort_keys=True), encoding="utf-8")
        diagnostics["dump_path"] = str(dump)
    raise TrainingDivergedError(
        f"non-finite loss at epoch {epoch}, batch {batch_index}", diagnostics
    )


def _save_train_state(path, cfg, gen, disc, gen_opt, disc_opt, epoch, p99, best):
    gen_t = {f"gen.{k}": v for k, v in module_state_tensors(gen).items()}
    disc_t = {f"disc.{k}": v for k, v in module_state_tensors(disc).items()}
    go_t, go_s = _optimizer_tensors(gen_opt, "gen_opt")
    do_t, do_s = _optimizer_tensors(disc_opt, "disc_opt")
    meta = {
        "epoch": epoch,
        "p99_duration_ms": p99,
        "train_config": cfg.to_flat_dict(),
        "gen_config": dataclasses.asdict(gen.config),
        "disc_config": dataclasses.asdict(disc.config),
        "gen_opt_structure": go_s,
        "disc_opt_structure": do_s,
        "best_epoch": best[0],
        "best_val_nld": best[1],
    }
    save_checkpoint(path, "train-state", {}, {**gen_t, **disc_t, **go_t, **do_t}, meta)


def load_train_state(path, dtype: torch.dtype = torch.float32):
    """Rebuild (gen, disc, gen_opt, disc_opt, meta) from a training checkpoint."""
    ckpt = load_checkpoint(path)
    if ckpt.kind != "train-state":
        raise ConfigError(f"{path} is a {ckpt.kind!r} checkpoint, not train-state")
    meta = ckpt.meta
    gen = Generator(GeneratorConfig(**meta["gen_config"]), init_seed=0, dtype=dtype)
    disc = Discriminator(DiscriminatorConfig(**meta["disc_config"]), init_seed=0, dtype=dtype)
    load_module_state(gen, {k[4:]: v for k, v in ckpt.tensors.items() if k.startswith("gen.")})
    load_module_state(disc, {k[5:]: v for k, v in ckpt.tensors.items() if k.startswith("disc.")})
    cfg = parse_train_config(
        "".join(f"{k}={v}\n" for k, v in meta["train_config"].items())
    )
    gen_opt, disc_opt = _build_optimizers(cfg, gen, disc)
    _restore_optimizer(gen_opt, "gen_opt", ckpt.tensors, meta["gen_opt_structure"])
    _restore_optimizer(disc_opt, "disc_opt", ckpt.tensors, meta["disc_opt_structure"])
    return gen, disc, gen_opt, disc_opt, meta


def _build_optimizers(cfg: TrainConfig, gen, disc):
    gen_opt = torch.optim.Adam(
        gen.parameters(), lr=cfg.gen_lr, betas=(0.9, 0.999), eps=1e-8
    )
    disc_opt = torch.optim.RMSprop(
        disc.parameters(), lr=cfg.disc_lr, alpha=0.99, eps=1e-8
    )
    return gen_opt, disc_opt


def train_step_pair(cfg, batcher, idx, gen, disc, gen_opt, disc_opt, epoch, bi):
    """One discriminator step then one generator step on the same batch."""
    emb, cls, real_steps, lengths = batcher.batch_tensors(idx)
    bsize = emb.shape[0]
    noise = torch.randn(
        bsize,
        gen.config.max_len,
        gen.config.noise_dim,
        generator=torch_generator(mix(cfg.seed, "noise", epoch, bi)),
        dtype=emb.dtype,
    )

    with torch.no_grad():
        fake_steps, _ = gen(emb, noise)
    d_real = disc(
        emb, real_steps, train_mode=True,
        rng=torch_generator(mix(cfg.seed, "drop-real", epoch, bi)),
    )
    d_fake = disc(
        emb, fake_steps.detach(), train_mode=True,
        rng=torch_generator(mix(cfg.seed, "drop-fake", epoch, bi)),
    )
    _, disc_loss = adversarial_terms(d_real, d_fake)
    disc_opt.zero_grad(set_to_none=True)
    disc_loss.backward()
    disc_opt.step()

    gen_steps, cls_recon = gen(emb, noise)
    ls = batched_scanpath_content_loss(gen_steps, real_steps, lengths, cfg.weights).mean()
    lr_loss = text_content_loss(cls_recon, cls).mean()
    d_fake_gen = disc(emb, gen_steps, train_mode=False)
    gen_term, _ = adversarial_terms(d_real.detach(), d_fake_gen)
    lg = net_generator_loss(ls, lr_loss, gen_term)
    gen_opt.zero_grad(set_to_none=True)
    lg.backward()
    gen_opt.step()

    return {
        "lg": float(lg.detach()),
        "ls": float(ls.detach()),
        "lr": float(lr_loss.detach()),
        "gen_term": float(gen_term.detach()),
        "disc_loss": float(disc_loss.detach()),
    }


def train(
    cfg: TrainConfig,
    split: CorpusSplit,
    embs: Mapping[str, TextEmbedding],
    p99: float,
    *,
    out_dir: str | Path | None = None,
    gen_config: GeneratorConfig | None = None,
    disc_config: DiscriminatorConfig | None = None,
    resume_from: str | Path | None = None,
    dtype: torch.dtype = torch.float32,
    eval_noise_samples: int = 1,
) -> TrainResult:
    """Run the alternating loop over split.train, validating on split.val.

    When out_dir is given: history.jsonl gets one line per epoch, a full
    training-state checkpoint lands every checkpoint_every epochs (and at
    the end), the best-validation generator is saved whenever val NLD
    improves, and final generator/discriminator snapshots are written.
    """
    cfg.validate()
    if not split.train:
        raise ValidationError("training split is empty")
    if not p99 > 0:
        raise ValidationError("p99 must be positive")
    _check_embeddings([split.train, split.val], embs)

    first_emb = embs[split.train[0][0].sentence_id]
    emb_dim = first_emb.tokens.shape[1]
    max_len = first_emb.tokens.shape[0]
    cls_dim = first_emb.cls.shape[0]

    if resume_from is not None:
        gen, disc, gen_opt, disc_opt, meta = load_train_state(resume_from, dtype=dtype)
        stored = dict(meta["train_config"])
        current = cfg.to_flat_dict()
        # epochs/checkpoint_every only set the horizon; extending them is the
        # point of resuming. Everything else changes the arithmetic.
        for horizon_key in ("epochs", "checkpoint_every"):
            stored.pop(horizon_key, None)
            current.pop(horizon_key, None)
        if stored != current:
            raise ConfigError(
                "resume config mismatch: checkpoint was trained with "
                f"{stored}, current config is {current}"
            )
        if meta["p99_duration_ms"] != p99:
            raise ConfigError("resume p99 mismatch")
        start_epoch = meta["epoch"] + 1
        best_epoch = meta["best_epoch"]
        best_val_nld = meta["best_val_nld"]
    else:
        if gen_config is None:
            gen_config = GeneratorConfig(emb_dim=emb_dim, max_len=max_len, cls_dim=cls_dim)
        if disc_config is None:
            disc_config = DiscriminatorConfig(emb_dim=emb_dim, max_len=max_len)
        gen = Generator(gen_config, init_seed=mix(cfg.seed, "gen-init"), dtype=dtype)
        disc = Discriminator(disc_config, init_seed=mix(cfg.seed, "disc-init"), dtype=dtype)
        gen_opt, disc_opt = _build_optimizers(cfg, gen, disc)
        start_epoch = 0
        best_epoch = None
        best_val_nld = None

    if gen.config.emb_dim != emb_dim or gen.config.max_len != max_len:
        raise ConfigError("generator config does not match embedding shapes")
    if gen.config.resolved_cls_dim() != cls_dim:
        raise ConfigError("generator cls head does not match embedding cls dim")

    batcher = _Batcher(split.train, embs, p99, dtype)
    out_path = None if out_dir is None else Path(out_dir)
    history_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        history_fh = open(
            out_path / "history.jsonl",
            "a" if resume_from is not None else "w",
            encoding="utf-8",
        )

    val_seed = mix(cfg.seed, "val-eval")
    history: RunHistory = []
    try:
        for epoch in range(start_epoch, cfg.epochs):
            sums = {"lg": 0.0, "ls": 0.0, "lr": 0.0, "gen_term": 0.0, "disc_loss": 0.0}
            n_batches = 0
            for bi, idx in enumerate(batcher.epoch_batches(cfg.seed, epoch, cfg.batch_size)):
                values = train_step_pair(
                    cfg, batcher, idx, gen, disc, gen_opt, disc_opt, epoch, bi
                )
                if not all(math.isfinite(v) for v in values.values()):
                    _diverged(epoch, bi, values, gen, disc, out_path)
                for key in sums:
                    sums[key] += values[key]
                n_batches += 1

            val_report = None
            if split.val:
                val_report = evaluate_checkpoint(
                    gen, split.val, embs, eval_noise_samples, p99=p99, seed=val_seed
                )
                if best_val_nld is None or val_report.nld < best_val_nld:
                    best_val_nld = val_report.nld
                    best_epoch = epoch
                    if out_path is not None:
                        save_generator(
                            out_path / "generator_best.ckpt",
                            gen,
                            meta={"epoch": epoch, "p99_duration_ms": p99,
                                  "val_nld": val_report.nld},
                        )
            record = EpochRecord(
                epoch=epoch,
                **{k: sums[k] / n_batches for k in sums},
                val=val_report,
            )
            history.append(record)
            if history_fh is not None:
                history_fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
                history_fh.flush()
            if out_path is not None and (
                (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1
            ):
                _save_train_state(
                    out_path / f"train_state_epoch_{epoch:04d}.ckpt",
                    cfg, gen, disc, gen_opt, disc_opt, epoch, p99,
                    (best_epoch, best_val_nld),
                )
    finally:
        if history_fh is not None:
            history_fh.close()

    if out_path is not None:
        save_generator(
            out_path / "generator.ckpt", gen,
            meta={"epoch": cfg.epochs - 1, "p99_duration_ms": p99},
        )
        save_discriminator(
            out_path / "discriminator.ckpt", disc,
            meta={"epoch": cfg.epochs - 1, "p99_duration_ms": p99},
        )
    return TrainResult(gen, disc, history, best_epoch, best_val_nld)


def generate_for_sentence(
    gen: Generator,
    emb: TextEmbedding,
    sentence_len: int,
    p99: float,
    noise_seed: int,
    tau: float = 0.5,
    participant_id: str = "generated",
) -> Scanpath:
    """One sampled scanpath for a sentence, in raw (word index, ms) form."""
    noise = sample_noise(noise_seed, gen.config.max_len, gen.config.noise_dim)
    out = generator_forward(emb, noise, gen)
    return truncate_at_eos(
        out, sentence_len, p99, tau=tau,
        sentence_id=emb.sentence_id, participant_id=participant_id,
    )


def evaluate_checkpoint(
    gen: Generator,
    split_part: Sequence[tuple[Sentence, Scanpath]],
    embs: Mapping[str, TextEmbedding],
    n_noise: int,
    *,
    p99: float,
    seed: int = 0,
    tau: float = 0.5,
    bin_ms: float = BIN_MS,
) -> MetricReport:
    """Score n_noise generated paths against every real path in the part."""
    if not split_part:
        raise ValidationError("empty split part")
    if n_noise < 1:
        raise ValidationError("n_noise must be >= 1")
    pairs: list[tuple[Scanpath, Scanpath]] = []
    sentence_lens: dict[str, int] = {}
    for sentence, real in split_part:
        sid = sentence.sentence_id
        sentence_lens[sid] = len(sentence)
        emb = lookup(embs, sid)
        for k in range(n_noise):
            noise_seed = mix(seed, "eval-noise", sid, real.participant_id, k)
            gen_sp = generate_for_sentence(gen, emb, len(sentence), p99, noise_seed, tau=tau)
            pairs.append((gen_sp, real))
    return score_pairs(pairs, sentence_lens, p99, bin_ms=bin_ms)
