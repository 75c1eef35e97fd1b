import pytest
import torch

from cod import codec, data, flow
from cod.core import ConfigError, FormatError, StateError, compute_rate, parse_bitstream, serialize_bitstream
from cod.eval import dataset_psnr
from cod.model import IdentityAdapter, LatentAdapter, fit_adapter
from conftest import tiny_model


@pytest.mark.parametrize("name,bits,bpp", [
    ("cod-base", 1024, 0.00390625),
    ("cod-64bit", 64, 64 / 512 ** 2),
    ("cod-mid", 8192, 0.03125),
    ("cod-high", 32768, 0.125),
])
def test_preset_budgets(name, bits, bpp):
    p = codec.get_preset(name)
    assert p.nominal_bits == bits and p.nominal_bpp == bpp


def test_unknown_preset():
    with pytest.raises(ConfigError):
        codec.get_preset("cod-ultra")


def test_untrained_model_refuses_encode():
    with pytest.raises(StateError):
        codec.encode(tiny_model(), torch.zeros(3, 32, 32))


def test_encode_wrong_size(trained_tiny):
    with pytest.raises(ConfigError):
        codec.encode(trained_tiny, torch.zeros(3, 64, 64))


def test_encode_deterministic(trained_tiny):
    img = data.desk_images(1, 32, split="heldout")[0]
    a = serialize_bitstream(codec.encode(trained_tiny, img, seed=7))
    b = serialize_bitstream(codec.encode(trained_tiny, img.clone(), seed=7))
    assert a == b
    s = parse_bitstream(a)
    assert s.payload_bits == compute_rate(trained_tiny.codec).total_bits == 64


def test_encode_preset_mismatch(trained_tiny):
    with pytest.raises(ConfigError):
        codec.encode(trained_tiny, torch.zeros(3, 32, 32), preset="cod-base")


def test_decode_twice_identical(trained_tiny):
    s = codec.encode(trained_tiny, data.desk_images(1, 32, split="heldout")[0], seed=3)
    a = codec.decode(trained_tiny, s, steps=5)
    b = codec.decode(trained_tiny, s, steps=5)
    assert torch.equal(a, b)


def test_one_step_decode_is_one_step_sample(trained_tiny):
    img = data.desk_images(1, 32, split="heldout")[0]
    s = codec.encode(trained_tiny, img, seed=9)
    out = codec.decode(trained_tiny, s, steps=1)
    with torch.no_grad():
        c = trained_tiny.conditioner.decode_tokens(torch.as_tensor(s.tokens().indices)[None])
        ref = flow.one_step_sample(trained_tiny.denoiser, c, seed=9)
    assert torch.equal(out, ref[0].clamp(-1, 1))


def test_decode_geometry_mismatch(trained_tiny):
    s = codec.encode(trained_tiny, torch.zeros(3, 32, 32))
    s.height = 64
    s.payload = bytes(8 * 4 // 8 * 4)
    with pytest.raises(FormatError):
        codec.decode(trained_tiny, s, steps=1)


def test_dp_control_single_step(trained_tiny):
    s = codec.encode(trained_tiny, torch.zeros(3, 32, 32))
    [(steps, img)] = codec.dp_control_decode(trained_tiny, s, [1])
    assert steps == 1 and torch.equal(img, codec.decode(trained_tiny, s, 1))


def test_tokens_are_informative(trained_tiny):
    imgs = data.desk_images(32, 32, split="heldout")
    idx = codec.encode_tokens(trained_tiny, imgs)
    seeds = list(range(len(imgs)))
    real = codec.decode_tokens(trained_tiny, idx, seeds, steps=1)
    shuffled = codec.decode_tokens(trained_tiny, idx[torch.randperm(len(imgs))], seeds, steps=1)
    assert dataset_psnr(imgs, real) > dataset_psnr(imgs, shuffled)


def test_identity_adapter_ceiling():
    imgs = data.desk_images(4, 32)
    p, _ = codec.latent_roundtrip_ceiling(IdentityAdapter(), imgs)
    assert p == 99.0


def test_latent_ceiling_stable():
    imgs = data.desk_images(64, 32)
    runs = []
    for _ in range(2):
        torch.manual_seed(0)
        ad = LatentAdapter(4, 16)
        fit_adapter(ad, imgs, steps=40, seed=0)
        runs.append(codec.latent_roundtrip_ceiling(ad, imgs)[0])
    assert abs(runs[0] - runs[1]) <= 0.1


def test_latent_model_roundtrip():
    m = tiny_model(size=32, space="latent")
    m.quantizer.initialized.fill_(True)
    img = data.desk_images(1, 32)[0]
    s = codec.encode(m, img)
    out = codec.decode(m, s, steps=2)
    assert out.shape == img.shape
    assert codec.default_cfg_scale(m, 25) == 1.25 and codec.default_cfg_scale(m, 1) == 1.0
