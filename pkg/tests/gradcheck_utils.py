"""Shared miniature-model gradient check used by unit and acceptance tests.

Builds a scaled-down generator/discriminator pair (width 12 = 8 + 4, one
layer, one head, sequence length 6) in double precision, forms the full net
generator loss, and compares torch autograd gradients against the test-local
central finite-difference oracle for every parameter.
"""

from __future__ import annotations

import numpy as np
import torch

from oracles import finite_difference_grads, max_relative_error
from scanpathgen.embeddings import TextEmbedding
from scanpathgen.losses import (
    adversarial_terms,
    batched_scanpath_content_loss,
    net_generator_loss,
    text_content_loss,
)
from scanpathgen.model import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
)

MINI_SEQ = 6


def build_mini_setup(seed: int = 123):
    """Mini generator + discriminator + one fixed training example, float64."""
    gen_cfg = GeneratorConfig(
        emb_dim=8,
        noise_dim=4,  # width 12 total
        num_layers=1,
        num_heads=1,
        ff_dim=24,
        head_hidden=8,
        cls_dim=8,
        max_len=MINI_SEQ,
    )
    disc_cfg = DiscriminatorConfig(
        emb_dim=8, hidden=4, dropout=0.0, fusion_heads=2, max_len=MINI_SEQ
    )
    gen = Generator(gen_cfg, init_seed=seed, dtype=torch.float64)
    disc = Discriminator(disc_cfg, init_seed=seed + 1, dtype=torch.float64)
    rng = np.random.default_rng(seed + 2)
    tokens = np.zeros((MINI_SEQ, 8), dtype=np.float64)
    token_count = 4
    tokens[:token_count] = rng.standard_normal((token_count, 8))
    emb = TextEmbedding(
        sentence_id="mini",
        tokens=tokens.astype(np.float32),
        token_count=token_count,
        cls=rng.standard_normal(8).astype(np.float32),
    )
    noise = torch.tensor(rng.standard_normal((1, MINI_SEQ, 4)), dtype=torch.float64)
    real_steps = np.zeros((1, MINI_SEQ, 3), dtype=np.float64)
    true_len = 4
    real_steps[0, :true_len, 0] = rng.uniform(0, 1, true_len)
    real_steps[0, :true_len, 1] = rng.uniform(0.05, 1, true_len)
    real_steps[0, true_len - 1, 2] = 1.0
    return gen, disc, emb, noise, torch.tensor(real_steps), true_len


def lg_closure(gen, disc, emb, noise, real_steps, true_len):
    """Closure computing the full net generator loss, deterministic.

    grad is force-enabled inside so the finite-difference harness (which
    runs under no_grad) traverses the same kernels as the analytic pass.
    """
    tokens = torch.as_tensor(emb.tokens, dtype=torch.float64).unsqueeze(0)
    cls_real = torch.as_tensor(emb.cls, dtype=torch.float64)
    lengths = torch.tensor([true_len])

    def closure():
        with torch.enable_grad():
            steps, cls_recon = gen(tokens, noise)
            ls = batched_scanpath_content_loss(steps, real_steps, lengths).mean()
            lr = text_content_loss(cls_recon[0], cls_real)
            d_fake = disc(tokens, steps, train_mode=False)
            gen_term, _ = adversarial_terms(torch.full_like(d_fake, 0.5), d_fake)
            return net_generator_loss(ls, lr, gen_term)

    return closure


def run_gradcheck(params: list[torch.nn.Parameter], closure, h: float = 1e-6):
    """Returns (max_rel_err, n_params_checked)."""
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = closure()
    loss.backward()
    analytic = [p.grad.detach().numpy().copy() for p in params]
    numeric = finite_difference_grads(closure, params, h=h)
    n_scalars = sum(int(np.prod(p.shape)) for p in params)
    return max_relative_error(analytic, numeric), n_scalars
