"""Loss function tests: forced arithmetic, masking, monotonicity."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from scanpathgen.corpus import MAX_STEPS, NormalizedScanpath
from scanpathgen.errors import ValidationError
from scanpathgen.losses import (
    LossWeights,
    adversarial_terms,
    batched_scanpath_content_loss,
    net_generator_loss,
    scanpath_content_loss,
    text_content_loss,
)


def _real(rows, true_length):
    steps = np.zeros((MAX_STEPS, 3))
    for i, row in enumerate(rows):
        steps[i] = row
    return NormalizedScanpath(steps, true_length, "P", "S", 100.0, 4)


def test_content_loss_identity():
    real = _real([(0.3, 0.1, 0.0), (0.5, 0.2, 1.0)], 2)
    gen = torch.as_tensor(real.steps)
    assert scanpath_content_loss(gen, real).item() == 0.0


def test_content_loss_forced_arithmetic():
    real = _real([(0.3, 0.1, 0.0)], 1)
    gen = torch.zeros(MAX_STEPS, 3, dtype=torch.float64)
    gen[0] = torch.tensor([0.5, 0.5, 0.0])
    loss = scanpath_content_loss(gen, real, LossWeights(1, 1, 1))
    assert loss.item() == pytest.approx(0.04 + 0.16, abs=1e-12)
    loss2 = scanpath_content_loss(gen, real, LossWeights(2, 1, 1))
    assert loss2.item() == pytest.approx(0.08 + 0.16, abs=1e-12)


def test_content_loss_ignores_pad_steps():
    real = _real([(0.3, 0.1, 0.0), (0.5, 0.2, 1.0)], 2)
    gen_a = torch.as_tensor(real.steps).clone()
    gen_b = gen_a.clone()
    gen_b[2:] = 123.0  # garbage in the pad region must not matter
    la = scanpath_content_loss(gen_a, real)
    lb = scanpath_content_loss(gen_b, real)
    assert la.item() == lb.item() == 0.0


def test_content_loss_rejects_zero_length():
    real = _real([(0.3, 0.1, 1.0)], 1)
    real.true_length = 0
    with pytest.raises(ValidationError):
        scanpath_content_loss(torch.zeros(MAX_STEPS, 3), real)


def test_content_loss_weight_validation():
    with pytest.raises(ValidationError):
        LossWeights(0, 0, 0).validate()
    with pytest.raises(ValidationError):
        LossWeights(-1, 1, 1).validate()


def test_batched_matches_single():
    rng = np.random.default_rng(0)
    reals = []
    gens = []
    for i in range(5):
        k = int(rng.integers(1, MAX_STEPS + 1))
        rows = [
            (rng.uniform(), rng.uniform(), 0.0) for _ in range(k - 1)
        ] + [(rng.uniform(), rng.uniform(), 1.0)]
        reals.append(_real(rows, k))
        gens.append(torch.tensor(rng.standard_normal((MAX_STEPS, 3))))
    batch_gen = torch.stack(gens)
    batch_real = torch.tensor(np.stack([r.steps for r in reals]))
    lengths = torch.tensor([r.true_length for r in reals])
    w = LossWeights(0.7, 1.3, 2.0)
    batched = batched_scanpath_content_loss(batch_gen, batch_real, lengths, w)
    for i in range(5):
        single = scanpath_content_loss(gens[i], reals[i], w)
        assert batched[i].item() == pytest.approx(single.item(), rel=1e-12)


def test_text_content_loss_examples():
    a = torch.zeros(768, dtype=torch.float64)
    assert text_content_loss(a, a).item() == 0.0
    b = a.clone()
    b[5] = 1.0
    assert text_content_loss(a, b).item() == pytest.approx(1.0 / 768, abs=1e-15)
    u = torch.zeros(768, dtype=torch.float64)
    v = torch.zeros(768, dtype=torch.float64)
    u[0] = 1.0
    v[1] = 1.0
    assert text_content_loss(u, v).item() == pytest.approx(2.0 / 768, abs=1e-15)


def test_adversarial_terms_examples():
    gen_term, _ = adversarial_terms(0.5, 1.0 - 1e-7)
    assert gen_term.item() == pytest.approx(1.0, abs=1e-6)
    gen_term, _ = adversarial_terms(0.5, math.exp(-1))
    assert gen_term.item() == pytest.approx(2.0, abs=1e-12)
    _, disc_loss = adversarial_terms(1.0 - 1e-7, 1e-7)
    assert disc_loss.item() == pytest.approx(0.0, abs=1e-6)


def test_adversarial_terms_clamp_extremes():
    gen_term, disc_loss = adversarial_terms(0.0, 0.0)
    assert math.isfinite(gen_term.item()) and math.isfinite(disc_loss.item())
    gen_term, disc_loss = adversarial_terms(1.0, 1.0)
    assert math.isfinite(gen_term.item()) and math.isfinite(disc_loss.item())


def test_adversarial_monotonicity():
    fakes = np.linspace(0.01, 0.99, 25)
    gen_terms = [adversarial_terms(0.5, f)[0].item() for f in fakes]
    assert all(a > b for a, b in zip(gen_terms, gen_terms[1:]))  # decreasing in d_fake
    disc_in_fake = [adversarial_terms(0.5, f)[1].item() for f in fakes]
    assert all(a < b for a, b in zip(disc_in_fake, disc_in_fake[1:]))  # increasing
    reals = np.linspace(0.01, 0.99, 25)
    disc_in_real = [adversarial_terms(r, 0.5)[1].item() for r in reals]
    assert all(a > b for a, b in zip(disc_in_real, disc_in_real[1:]))  # decreasing


def test_net_generator_loss_examples():
    assert net_generator_loss(0.0, 0.0, 1.0).item() == 1.0
    assert net_generator_loss(0.2, 0.1, 2.0).item() == pytest.approx(2.3, abs=1e-12)


def test_net_generator_loss_weight_linearity():
    real = _real([(0.3, 0.1, 0.0)], 1)
    gen = torch.zeros(MAX_STEPS, 3, dtype=torch.float64)
    gen[0] = torch.tensor([0.5, 0.5, 0.5])
    ls1 = scanpath_content_loss(gen, real, LossWeights(1, 1, 1))
    ls2 = scanpath_content_loss(gen, real, LossWeights(2, 2, 2))
    assert ls2.item() == pytest.approx(2 * ls1.item(), rel=1e-12)
    lg1 = net_generator_loss(ls1, 0.3, 1.5).item()
    lg2 = net_generator_loss(ls2, 0.3, 1.5).item()
    assert lg2 - lg1 == pytest.approx(ls1.item(), rel=1e-9)


def test_losses_nonnegative_random():
    rng = np.random.default_rng(4)
    for _ in range(20):
        k = int(rng.integers(1, 10))
        rows = [(rng.uniform(), rng.uniform(), 0.0) for _ in range(k)]
        rows[-1] = (rows[-1][0], rows[-1][1], 1.0)
        real = _real(rows, k)
        gen = torch.tensor(rng.standard_normal((MAX_STEPS, 3)))
        assert scanpath_content_loss(gen, real).item() >= 0.0
        a = torch.tensor(rng.standard_normal(16))
        b = torch.tensor(rng.standard_normal(16))
        assert text_content_loss(a, b).item() >= 0.0
