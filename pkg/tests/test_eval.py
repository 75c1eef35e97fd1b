import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cod import data
from cod import eval as ev
from cod.core import ConfigError
from cod.features import RandomConvExtractor


def test_psnr_exact_match():
    x = torch.rand(3, 8, 8)
    r = ev.psnr(x, x.clone())
    assert r.exact and r.db == 99.0


def test_psnr_zero_db():
    assert ev.psnr(torch.zeros(4), torch.ones(4)).db == pytest.approx(0.0)


def test_psnr_twenty_db():
    x = torch.zeros(100, dtype=torch.float64)
    y = torch.full((100,), 0.1, dtype=torch.float64)  # MSE 0.01
    assert ev.psnr(x, y).db == pytest.approx(20.0)


def test_psnr_shape_mismatch():
    with pytest.raises(ConfigError):
        ev.psnr(torch.zeros(3), torch.zeros(4))


def test_psnr_decreasing_in_noise():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(3, 32, 32, generator=g, dtype=torch.float64)
    n = torch.randn(3, 32, 32, generator=g, dtype=torch.float64)
    vals = [ev.psnr(x, x + s * n).db for s in (0.01, 0.02, 0.05, 0.1, 0.3)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def closed_form_frechet(mu1, sd1, mu2, sd2):
    # diagonal Gaussians: |mu1 - mu2|^2 + sum (sd1 - sd2)^2
    return float(((mu1 - mu2) ** 2).sum() + ((sd1 - sd2) ** 2).sum())


def test_frechet_identical_sets_zero():
    a = np.random.default_rng(0).normal(size=(500, 4))
    assert ev.frechet_distance(a, a.copy()).value == pytest.approx(0.0, abs=1e-9)


def test_frechet_1d_unit_shift():
    rng = np.random.default_rng(0)
    v = ev.frechet_distance(rng.normal(0, 1, 100_000), rng.normal(1, 1, 100_000)).value
    assert v == pytest.approx(1.0, rel=0.05)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_frechet_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    d = 4
    mu1, mu2 = rng.normal(0, 2, d), rng.normal(0, 2, d)
    sd1, sd2 = rng.uniform(0.5, 2, d), rng.uniform(0.5, 2, d)
    a = mu1 + sd1 * rng.normal(size=(10_000, d))
    b = mu2 + sd2 * rng.normal(size=(10_000, d))
    assert ev.frechet_distance(a, b).value == pytest.approx(closed_form_frechet(mu1, sd1, mu2, sd2), rel=0.02)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_frechet_symmetric(seed, d):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(50, d)), rng.normal(1, 2, size=(60, d))
    assert ev.frechet_distance(a, b).value == ev.frechet_distance(b, a).value


def test_frechet_singular_covariance_ridge():
    a = np.zeros((10, 3))
    a[:, 0] = np.arange(10)
    r = ev.frechet_distance(a, a + 1)
    assert r.ridge_added and math.isfinite(r.value)


def test_frechet_needs_two_samples():
    with pytest.raises(ConfigError):
        ev.frechet_distance(np.zeros((1, 2)), np.zeros((5, 2)))


def test_proxy_fid_patches():
    ext = RandomConvExtractor()
    imgs = data.desk_images(8, 64)
    real = ev.extract_patches(imgs, 32)
    assert real.shape == (32, 3, 32, 32)
    assert ev.proxy_fid(real, real.clone(), ext).value == pytest.approx(0.0, abs=1e-6)
    noisy = (real + 0.3 * torch.randn_like(real)).clamp(-1, 1)
    assert ev.proxy_fid(real, noisy, ext).value > 0


def test_overlapping_patches():
    assert ev.extract_patches(torch.zeros(1, 3, 64, 64), 32, stride=16).shape[0] == 9


def test_metric_record_invariants():
    with pytest.raises(ConfigError):
        ev.MetricRecord(bpp=0.0, psnr_db=10.0)
    with pytest.raises(ConfigError):
        ev.MetricRecord(bpp=0.1, psnr_db=-1.0)


def test_sweep_axis_strictly_increasing():
    r = ev.MetricRecord(0.1, 10.0)
    with pytest.raises(ConfigError):
        ev.SweepResult("steps", [(5, r), (5, r)])


@settings(max_examples=30)
@given(st.lists(st.tuples(st.floats(1e-6, 10), st.floats(0, 99), st.one_of(st.floats(0, 5), st.just(float("nan")))),
                min_size=1, max_size=5))
def test_csv_roundtrip(rows):
    result = ev.SweepResult("steps", [(i + 1, ev.MetricRecord(b, p, f, steps=i + 1, preset="cod-base", model_id="m"))
                                      for i, (b, p, f) in enumerate(rows)])
    back = ev.SweepResult.from_csv(result.to_csv(), "steps")
    assert back.same_as(result)
    assert result.to_csv().splitlines()[0] == "axis,bpp,psnr_db,feature_distance,proxy_fid,steps,preset,model_id"


def test_write_outputs_deterministic(tmp_path):
    result = ev.SweepResult("steps", [(1, ev.MetricRecord(0.06, 12.5, 0.3, 4.0, 1)),
                                      (5, ev.MetricRecord(0.06, 12.1, 0.28, 3.0, 5))])
    a = ev.write_outputs(result, tmp_path / "a")
    b = ev.write_outputs(result, tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_channel_mean_error():
    x = torch.zeros(2, 3, 4, 4)
    assert ev.channel_mean_error(x, x) == 0.0
    assert ev.channel_mean_error(x, x + 0.2) == pytest.approx(0.1)


def test_dp_sweep_single_and_trend(trained_tiny):
    imgs = data.desk_images(16, 32, split="heldout")
    single = ev.dp_sweep(trained_tiny, imgs, [25])
    assert single.values == [25] and len(single.rows) == 1
    sweep = ev.dp_sweep(trained_tiny, imgs, [1, 5, 25])
    assert sweep.values == [1, 5, 25]
    assert all(r.bpp == 0.0625 for r in sweep.records)


def test_evaluate_reproducible(trained_tiny):
    imgs = data.desk_images(8, 32, split="heldout")
    ext = RandomConvExtractor(seed=7)
    a = ev.evaluate(trained_tiny, imgs, 2, extractor=ext)
    b = ev.evaluate(trained_tiny, imgs, 2, extractor=ext)
    assert a.same_as(b)


def test_scaling_sweep_single_width():
    from cod.core import CodecConfig
    from cod.training import TrainConfig
    from conftest import TINY_ARCH

    imgs = data.desk_images(16, 32)
    res = ev.scaling_sweep([16], imgs, imgs[:8], CodecConfig(32, 32, 8, 16, depth=2), TINY_ARCH,
                           TrainConfig(steps=2, batch_size=4))
    assert res.values == [16] and "val_loss" in res.extras[16]
    with pytest.raises(ConfigError):
        ev.scaling_sweep([32, 16], imgs, imgs, CodecConfig(32, 32, 8, 16), TINY_ARCH, TrainConfig(steps=1))
