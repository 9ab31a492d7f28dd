# hierflow
# This test module is used to test the hierarchical visual encoder and its ablation flags.

import itertools

import numpy as np
import pytest
import torch

from components import diffcore, hierenc
from lib.class_helper import ENCODER_FLAGS, N_MELS, DimensionError, EncoderConfig, ValidationError


def tiny_config(**flags):
    return EncoderConfig(
        hidden_dim=8,
        n_units=4,
        lip_layers=2,
        lip_dim=4,
        face_dim=3,
        expr_dim=3,
        timbre_dim=3,
        heads=2,
        mapper_layers=1,
        output_layers=1,
        predictor_blocks=2,
        **flags,
    )


def inputs(video_frames=5, seed=0):
    generator = torch.Generator().manual_seed(seed)
    T = 2 * video_frames
    lip = torch.randn(2, video_frames, 4, generator=generator)
    face = torch.randn(3, generator=generator)
    expr = torch.randn(video_frames, 3, generator=generator)
    targets = {
        "units": torch.randint(0, 4, (T,), generator=generator),
        "timbre": torch.randn(3, generator=generator),
        "pitch": torch.randn(T, generator=generator),
        "energy": 1.0 + torch.rand(T, generator=generator),
    }
    return lip, face, expr, targets


def build(seed=0, **flags):
    torch.manual_seed(seed)
    return hierenc.HierarchicalEncoder(tiny_config(**flags), energy_mean=1.5, energy_std=0.3)


def test_forward_shapes():
    encoder = build()
    lip, face, expr, targets = inputs()
    encoding, losses = encoder(lip, face, expr, targets, mode="train")
    assert encoding.mu.shape == (10, N_MELS)
    assert encoding.unit_pred.shape == (10,)
    assert encoding.timbre_pred.shape == (3,)
    assert encoding.pitch_pred.shape == (10,) and encoding.energy_pred.shape == (10,)
    for value in [losses.content, losses.timbre, losses.prosody]:
        assert torch.isfinite(value) and value.item() > 0


def test_every_flag_combination_runs():
    lip, face, expr, targets = inputs()
    for values in itertools.product([True, False], repeat=len(ENCODER_FLAGS)):
        flags = dict(zip(ENCODER_FLAGS, values))
        encoder = build(**flags)
        encoding, losses = encoder(lip, face, expr, targets, mode="train")
        assert encoding.mu.shape == (10, N_MELS), f"Wrong shape with flags {flags}"
        if not flags["timbre_stage"]:
            assert losses.timbre.item() == 0.0 and encoding.timbre_pred is None
        if not flags["prosody_stage"]:
            assert losses.prosody.item() == 0.0 and encoding.pitch_pred is None


def test_modes():
    encoder = build()
    lip, face, expr, targets = inputs()
    with pytest.raises(ValidationError):
        encoder(lip, face, expr, None, mode="train")
    with pytest.raises(ValidationError):
        encoder(lip, face, expr, targets, mode="evaluate")

    # infer mode never reads the targets
    with torch.no_grad():
        plain, losses = encoder(lip, face, expr, None, mode="infer")
        _, _, _, other_targets = inputs(seed=3)
        same, _ = encoder(lip, face, expr, other_targets, mode="infer")
    assert torch.equal(plain.mu, same.mu)
    assert losses.content.item() == 0.0

    # train mode embeds the targets
    with torch.no_grad():
        first, _ = encoder(lip, face, expr, targets, mode="train")
        second, _ = encoder(lip, face, expr, other_targets, mode="train")
    assert not torch.allclose(first.mu, second.mu), "Teacher forcing has to embed the targets"


def perturb(module, seed=11):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in module.parameters():
            param.add_(torch.randn(param.shape, generator=generator))


def test_teacher_forcing_bypasses_the_content_predictor():
    """Train mode embeds the target units, so corrupting CP leaves mu untouched. Infer mode embeds the CP argmax."""
    encoder = build()
    lip, face, expr, targets = inputs()
    with torch.no_grad():
        train_before, _ = encoder(lip, face, expr, targets, mode="train")
        infer_before, _ = encoder(lip, face, expr, None, mode="infer")
        perturb(encoder.content_predictor)
        train_after, _ = encoder(lip, face, expr, targets, mode="train")
        infer_after, _ = encoder(lip, face, expr, None, mode="infer")
    assert (train_after.mu - train_before.mu).abs().max().item() <= 1e-12
    assert not torch.equal(train_after.unit_pred, train_before.unit_pred), "The perturbation did not reach CP"
    assert (infer_after.mu - infer_before.mu).abs().max().item() > 1e-6


def test_mappers_are_identity_without_hier():
    encoder = build(hier=False)
    h = torch.randn(6, 8)
    assert torch.equal(encoder.c2t_map(h), h) and torch.equal(encoder.t2p_map(h), h)
    assert not torch.equal(build().c2t_map(h), h)

    # every stage reads the pre-stage sequence, the mapper stacks are never used
    lip, face, expr, targets = inputs()
    with torch.no_grad():
        before, _ = encoder(lip, face, expr, targets)
        perturb(encoder.c2t)
        perturb(encoder.t2p)
        after, _ = encoder(lip, face, expr, targets)
    assert torch.equal(before.mu, after.mu)


def test_dimension_checks():
    encoder = build()
    lip, face, expr, targets = inputs()
    with pytest.raises(DimensionError):
        encoder(lip[:1], face, expr, targets)
    with pytest.raises(DimensionError):
        encoder(lip, face, expr[:3], targets)
    with pytest.raises(ValidationError):
        encoder(lip, face, expr, {**targets, "units": targets["units"][:4]})


def test_face_and_expression_flags():
    lip, face, expr, targets = inputs()
    encoder = build(face_id=False, expr=False)
    with torch.no_grad():
        a, _ = encoder(lip, face, expr, targets)
        b, _ = encoder(lip, torch.randn(3), torch.randn(5, 3), targets)
    assert torch.equal(a.mu, b.mu), "Disabled face identity and expression features must not be read"

    encoder = build()
    with torch.no_grad():
        a, _ = encoder(lip, face, expr, targets)
        b, _ = encoder(lip, face + 1.0, expr, targets)
    assert not torch.allclose(a.timbre_pred, b.timbre_pred)


def test_weighted_layer_sum():
    encoder = build()
    weights = encoder.layer_weight_table()
    assert np.allclose(weights, [0.5, 0.5]) and weights.sum() == pytest.approx(1.0)
    lip = torch.randn(2, 5, 4)
    assert torch.allclose(encoder.weighted_layer_sum(lip), lip.mean(dim=0))

    encoder = build(weighted_sum=False)
    assert encoder.layer_weight_table() is None
    assert torch.equal(encoder.weighted_layer_sum(lip), lip[-1])


def test_masked_predictors_add_a_loss():
    lip, face, expr, targets = inputs()
    with torch.no_grad():
        _, with_masked = build(masked_pred=True)(lip, face, expr, targets)
        _, without = build(masked_pred=False)(lip, face, expr, targets)
    assert with_masked.content.item() > without.content.item()
    assert with_masked.prosody.item() > without.prosody.item()


def test_masked_predictor_ignores_its_own_frame():
    torch.manual_seed(0)
    predictor = hierenc.ConvPredictor(4, 6, 2, blocks=3, kernel_size=3, masked=True)
    h = torch.randn(7, 4)
    changed = h.clone()
    changed[3] += 5.0
    assert torch.allclose(predictor(h)[3], predictor(changed)[3])


def test_content_loss_label_smoothing():
    """Uniform logits cost log(K) under both the one-hot and the uniform term."""
    encoder = build()
    logits = torch.zeros(3, 4)
    units = torch.tensor([0, 1, 2])
    assert encoder.content_loss(logits, units).item() == pytest.approx(np.log(4))


def test_content_loss_falls_towards_the_smoothed_optimum():
    """With label smoothing alpha the loss of a target logit s (others 0) is minimal at softmax(s) = alpha + (1 - alpha) / K.

    It falls strictly from s = 0 up to that point and rises again behind it.
    """
    encoder = build()
    K, alpha = 4, encoder.cfg.label_smoothing
    p = alpha + (1.0 - alpha) / K
    optimum = np.log((K - 1) * p / (1.0 - p))
    units = torch.tensor([0, 1, 2])
    one_hot = torch.nn.functional.one_hot(units, K).to(torch.float64)

    def loss(scale):
        return encoder.content_loss(scale * one_hot, units).item()

    rising = [loss(s) for s in np.linspace(0.0, optimum, 12)]
    assert all(a > b for a, b in zip(rising, rising[1:]))
    falling = [loss(s) for s in np.linspace(optimum, 10.0, 12)]
    assert all(a < b for a, b in zip(falling, falling[1:]))
    assert min(loss(s) for s in np.linspace(0.0, 10.0, 101)) >= loss(optimum) - 1e-12


def test_encode_crops(tiny_corpus):
    samples, _, meta = tiny_corpus
    sample = samples[0]
    torch.manual_seed(0)
    cfg = EncoderConfig(
        hidden_dim=8, n_units=4, lip_layers=2, lip_dim=4, face_dim=3, expr_dim=3, timbre_dim=3, heads=2, mapper_layers=1, output_layers=1
    )
    encoder = hierenc.HierarchicalEncoder(cfg, meta["energy_mean"], meta["energy_std"])
    encoding, _ = encoder.encode(sample, mode="train", start=1, frames=4)
    assert encoding.mu.shape == (8, N_MELS)
    full, _ = encoder.encode(sample, mode="infer")
    assert full.mu.shape == (sample.mel_frames, N_MELS)


def test_stage_gradients():
    encoder = build()
    h_l = torch.randn(4, 8)
    units = torch.tensor([0, 3, 1, 1])
    tensors = {"h_l": h_l, "weight": encoder.unit_embedding.weight}

    def fn():
        h_c, loss, _ = encoder.content_stage(h_l, units, mode="train")
        return torch.cat([h_c.reshape(-1), loss.reshape(1)])

    assert diffcore.gradient_check(fn, tensors) < 1e-4
