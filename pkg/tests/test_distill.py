import copy

import pytest
import torch
from hypothesis import given, settings, strategies as st

from cod import data, distill
from cod.core import CodecConfig, ConfigError, StateError
from cod.features import RandomConvExtractor
from cod.network import count_parameters, fold_adaln
from conftest import randomize, tiny_model


def _trained(seed=0):
    m = randomize(tiny_model(seed=seed), seed)
    m.quantizer.initialized.fill_(True)
    return m


def gaussian_oracle(theta, n=100_000, seed=0):
    """Mean DMD gradient for a generator N(theta, 1) against real N(0, 1), exact scores."""
    g = torch.Generator().manual_seed(seed)
    real = distill.AnalyticGaussianDenoiser(0.0).requires_grad_(False)
    fake = distill.AnalyticGaussianDenoiser(theta)
    x = theta + torch.randn(n, 1, generator=g, dtype=torch.float64)
    grad = distill.dmd_gradient(x, real, fake, None, g, t_range=(0.95, 0.98), weighting="score")
    return float(grad.mean())


def test_gaussian_oracle_shift():
    # d/dtheta KL(N(theta, 1) || N(0, 1)) = theta
    assert gaussian_oracle(0.5) == pytest.approx(0.5, rel=0.05)


@settings(max_examples=5, deadline=None)
@given(st.floats(-1.0, 1.0).filter(lambda v: abs(v) > 0.2))
def test_gaussian_oracle_sign_and_scale(theta):
    assert gaussian_oracle(theta, n=20_000) == pytest.approx(theta, rel=0.1)


def test_analytic_denoiser_posterior_mean():
    # at t -> 1 the posterior mean is the observation itself
    d = distill.AnalyticGaussianDenoiser(0.3, 2.0)
    x = torch.randn(5, dtype=torch.float64)
    assert torch.allclose(d(x, 1.0), x)
    assert torch.allclose(d(x, 0.0), torch.full_like(x, 0.3))


def test_dmd_gradient_zero_when_fake_equals_real():
    m = _trained()
    real = copy.deepcopy(m.denoiser).requires_grad_(False)
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    c = m.conditioner.decode_tokens(m.conditioner.encode(x).indices).detach()
    grad = distill.dmd_gradient(x, real, copy.deepcopy(m.denoiser), c, torch.Generator().manual_seed(0))
    assert float(grad.abs().max()) == 0.0


def test_dmd_requires_frozen_real():
    m = tiny_model()
    with pytest.raises(StateError):
        distill.dmd_gradient(torch.zeros(1, 3, 32, 32), m.denoiser, m.denoiser)


def test_dmd_loss_gradient_only_reaches_generator():
    m = _trained()
    real = copy.deepcopy(m.denoiser).requires_grad_(False)
    fake = randomize(copy.deepcopy(m.denoiser), 3)
    x = (torch.rand(2, 3, 32, 32) * 2 - 1).requires_grad_(True)
    c = torch.zeros(2, m.arch.d_cond, 2, 2)
    g = torch.Generator().manual_seed(0)
    loss = distill.dmd_generator_loss(x, real, fake, c, g)
    loss.backward()
    expected = distill.dmd_gradient(x, real, fake, c, torch.Generator().manual_seed(0)) / x.numel()
    assert torch.allclose(x.grad, expected, atol=1e-8)
    assert all(p.grad is None for p in fake.parameters())


def test_update_ratio_pattern_and_frozen_real():
    teacher = _trained()
    state = distill.init_dmd(teacher, distill.DistillConfig(update_ratio=3, seed=0), RandomConvExtractor(8))
    before = state.real_checksum
    imgs = data.desk_images(8, 32)
    reports = distill.distill(imgs, state, 7, batch_size=2)
    assert [r.updated for r in reports] == ["generator", "fake", "fake"] * 2 + ["generator"]
    assert distill.weight_checksum(state.real_score_model) == before
    assert all(p.grad is None for p in state.real_score_model.parameters())
    assert all(p.grad is None for p in state.real_conditioner.parameters())


def test_unfrozen_real_is_rejected():
    state = distill.init_dmd(_trained(), extractor=RandomConvExtractor(8))
    state.real_score_model.requires_grad_(True)
    with pytest.raises(StateError):
        distill.distill_step(data.desk_images(2, 32), state)


def test_distill_config_validation():
    with pytest.raises(ConfigError):
        distill.DistillConfig(update_ratio=1)
    with pytest.raises(ConfigError):
        distill.DistillConfig(w_dmd=-1)


def test_report_recombines_total():
    state = distill.init_dmd(_trained(), extractor=RandomConvExtractor(8))
    rep = distill.distill_step(data.desk_images(4, 32), state)
    assert rep.updated == "generator"
    assert rep.recombine() == pytest.approx(rep.total, rel=1e-5)


def test_zero_perceptual_weights_reduce_to_supervised():
    cfg = distill.DistillConfig(w_dmd=0, w_gan=0)
    imgs = data.desk_images(4, 32)
    a = distill.init_dmd(_trained(), cfg, RandomConvExtractor(8))
    b = distill.init_dmd(_trained(), cfg, RandomConvExtractor(8))
    ta, *_ = distill.generator_losses(a, imgs, cfg, use_perc=True)
    tb, *_ = distill.generator_losses(b, imgs, cfg, use_perc=False)
    assert torch.equal(ta, tb)


def test_lora_identity_at_init():
    m = _trained()
    ref = copy.deepcopy(m.denoiser)
    adapters = distill.apply_lora(m.denoiser, rank=4)
    assert adapters and all(not a.base.weight.requires_grad for a in adapters)
    x, t, c = torch.randn(2, 3, 32, 32), torch.zeros(2), torch.randn(2, m.arch.d_cond, 2, 2)
    with torch.no_grad():
        assert torch.equal(m.denoiser(x, t, c), ref(x, t, c))
    trainable = {n for n, p in m.denoiser.named_parameters() if p.requires_grad}
    assert trainable and all(n.endswith((".A", ".B")) for n in trainable)


def test_lora_merge_matches_adapted():
    m = _trained()
    distill.apply_lora(m.denoiser, rank=4)
    randomize(m.denoiser, 9)
    x, t, c = torch.randn(2, 3, 32, 32), torch.zeros(2), torch.randn(2, m.arch.d_cond, 2, 2)
    with torch.no_grad():
        before = m.denoiser(x, t, c)
        distill.merge_lora(m.denoiser)
        after = m.denoiser(x, t, c)
    assert not any(isinstance(mod, distill.LowRankAdapter) for mod in m.denoiser.modules())
    assert torch.allclose(before, after, atol=1e-5)


def test_stage_one_freezes_base_and_skips_perceptual(monkeypatch):
    base = _trained()

    def boom(*a, **k):
        raise AssertionError("perceptual term evaluated in Stage I")

    monkeypatch.setattr(distill, "dmd_generator_loss", boom)
    monkeypatch.setattr(distill, "hinge_g_loss", boom)
    target = CodecConfig(32, 32, 8, 64, channel_width=16, depth=2)
    m = distill.finetune_higher_bitrate(base, target, "I", data.desk_images(8, 32), steps=2, rank=4, batch_size=2)
    assert m.finetune_stage == "I"
    base_linear = {n: p for n, p in base.denoiser.named_parameters()}
    for name, p in m.denoiser.named_parameters():
        if ".base." in name:
            assert not p.requires_grad
            assert torch.equal(p, base_linear[name.replace(".base.", ".")])


def test_stage_two_requires_stage_one():
    with pytest.raises(StateError):
        distill.finetune_higher_bitrate(_trained(), None, "II", data.desk_images(2, 32), steps=1)
    with pytest.raises(ConfigError):
        distill.finetune_higher_bitrate(_trained(), None, "III", data.desk_images(2, 32), steps=1)


def test_stage_two_runs_after_stage_one():
    base = _trained()
    teacher = distill.init_dmd(base, extractor=RandomConvExtractor(8))
    target = CodecConfig(32, 32, 8, 64, channel_width=16, depth=2)
    imgs = data.desk_images(8, 32)
    m = distill.finetune_higher_bitrate(base, target, "I", imgs, steps=1, rank=4, batch_size=2)
    st2 = distill.finetune_higher_bitrate(m, target, "II", imgs, steps=2, state=teacher, batch_size=2)
    assert m.finetune_stage == "II"
    assert not any(isinstance(mod, distill.LowRankAdapter) for mod in m.modules())
    assert st2.opt_generator.param_groups[0]["lr"] == pytest.approx(1e-4)


def test_fold_on_distilled_generator():
    state = distill.init_dmd(_trained(), extractor=RandomConvExtractor(8))
    distill.distill(data.desk_images(4, 32), state, 1, batch_size=2)
    gen = state.generator.denoiser.eval()
    folded = fold_adaln(gen)
    assert count_parameters(folded) < count_parameters(gen)
    x, c = torch.randn(2, 3, 32, 32), torch.randn(2, state.generator.arch.d_cond, 2, 2)
    with torch.no_grad():
        diff = (folded(x, torch.zeros(2), c) - gen(x, torch.zeros(2), c)).abs().max()
    assert float(diff) < 1e-5


def test_toy_codec_quantizer_levels():
    codec = distill.ToyMSECodec(levels=4.0)
    z = codec.encode(torch.rand(2, 3, 32, 32))
    assert z.shape == (2, 4, 4, 4)
    assert torch.allclose(z * 4, torch.round(z * 4), atol=1e-6)


def test_finetune_decoder_freezes_encoder():
    imgs = data.desk_images(16, 32)
    codec = distill.ToyMSECodec(width=8)
    distill.train_toy_codec(codec, imgs, steps=3, batch_size=4)
    enc = copy.deepcopy(codec.encoder.state_dict())
    ps = distill.PerceptualSupervisionLoss(_trained())
    hist = distill.finetune_decoder(codec, imgs, ps, decoder_steps=2, update_ratio=3, batch_size=2)
    assert len(hist) == 2
    for k, v in codec.encoder.state_dict().items():
        assert torch.equal(v, enc[k])
    assert distill._frozen(ps.real)
