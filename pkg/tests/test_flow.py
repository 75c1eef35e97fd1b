import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from cod import flow
from cod.core import ConfigError


def test_forward_process_endpoints():
    x, eps = torch.randn(4, 3), torch.randn(4, 3)
    assert torch.equal(flow.forward_process(x, eps, 0.0), eps)
    assert torch.equal(flow.forward_process(x, eps, 1.0), x)


def test_forward_process_arithmetic():
    v = flow.forward_process(torch.tensor(0.8), torch.tensor(-0.2), 0.25)
    assert math.isclose(float(v), 0.05, abs_tol=1e-7)


def test_forward_process_domain():
    with pytest.raises(flow.DomainError):
        flow.forward_process(torch.zeros(1), torch.zeros(1), 1.5)


def test_velocity_target():
    assert float(flow.velocity_target(torch.tensor(0.8), torch.tensor(-0.2))) == pytest.approx(1.0)
    x = torch.randn(5)
    assert torch.equal(flow.velocity_target(x, x), torch.zeros(5))
    a, b = torch.randn(10), torch.randn(10)
    assert torch.equal(flow.velocity_target(a, b), a - b)


def test_v_to_x_examples():
    eps, v = torch.randn(3), torch.randn(3)
    assert torch.equal(flow.v_to_x(v, eps, 0.0), eps + v)
    assert math.isclose(float(flow.v_to_x(torch.tensor(1.0), torch.tensor(0.05), 0.25)), 0.8, abs_tol=1e-7)


@settings(max_examples=50)
@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_true_velocity_recovers_x(t, seed):
    g = torch.Generator().manual_seed(seed)
    x, eps = torch.randn(8, generator=g, dtype=torch.float64), torch.randn(8, generator=g, dtype=torch.float64)
    x_t = flow.forward_process(x, eps, t)
    assert torch.allclose(flow.v_to_x(x - eps, x_t, t), x, atol=1e-12)


def test_x_to_v_examples():
    assert float(flow.x_to_v(torch.tensor(0.8), torch.tensor(0.05), 0.25)) == pytest.approx(1.0)
    # clamp active: 0.01 / 0.05
    assert float(flow.x_to_v(torch.tensor(0.8), torch.tensor(0.79), 0.99)) == pytest.approx(0.2)


@settings(max_examples=50)
@given(st.floats(0.0, 0.95), st.integers(0, 1000))
def test_x_v_roundtrip(t, seed):
    # float64: at 1 - t = 0.05 float32 cancellation alone is ~1e-6 relative
    g = torch.Generator().manual_seed(seed)
    v, x_t = torch.randn(16, generator=g, dtype=torch.float64), torch.randn(16, generator=g, dtype=torch.float64)
    back = flow.x_to_v(flow.v_to_x(v, x_t, t), x_t, t)
    assert torch.allclose(back, v, rtol=1e-6, atol=0)


@pytest.mark.parametrize("t", [0.951, 0.97, 0.99, 1.0])
def test_clamp_region_breaks_roundtrip(t):
    v, x_t = torch.ones(4), torch.zeros(4)
    back = flow.x_to_v(flow.v_to_x(v, x_t, t), x_t, t)
    assert torch.allclose(back, v * (1 - t) / flow.X_CLAMP)


def test_per_sample_t_broadcast():
    x, eps = torch.randn(3, 2, 4, 4), torch.randn(3, 2, 4, 4)
    t = torch.tensor([0.0, 0.5, 1.0])
    x_t = flow.forward_process(x, eps, t)
    assert torch.equal(x_t[0], eps[0]) and torch.equal(x_t[2], x[2])


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        flow.SamplerConfig(steps=0)
    with pytest.raises(ConfigError):
        flow.SamplerConfig(solver="rk4")
    with pytest.raises(ConfigError):
        flow.SamplerConfig(cfg_scale=-1.0)


class ConstantVelocity(torch.nn.Module):
    """Oracle denoiser that knows the straight-line velocity for one (x, eps) pair."""

    prediction_target = "V"

    def __init__(self, x, eps):
        super().__init__()
        self.register_buffer("v", x - eps)
        self.anchor = torch.nn.Parameter(torch.zeros(()))

    def forward(self, x_t, t, c=None, drop_mask=None):
        return self.v.expand_as(x_t)


@pytest.mark.parametrize("steps,solver", [(1, "euler"), (25, "euler"), (25, "second_order")])
def test_oracle_velocity_exact_recovery(steps, solver):
    x, eps = torch.randn(1, 3, 8, 8), torch.randn(1, 3, 8, 8)
    out = flow.sample(ConstantVelocity(x, eps), None, flow.SamplerConfig(steps, solver), noise=eps)
    assert torch.allclose(out, x, atol=1e-5)


def test_one_step_equals_sample_steps_1():
    x = torch.randn(1, 3, 8, 8)
    m = ConstantVelocity(x, torch.zeros_like(x))
    a = flow.one_step_sample(m, None, seed=11, shape=(1, 3, 8, 8))
    b = flow.sample(m, None, flow.SamplerConfig(1, "euler", seed=11), shape=(1, 3, 8, 8))
    assert torch.equal(a, b)


def affine_error(steps, solver, a=-0.5, b=0.3, x0=1.0):
    # dx/dt = a x + b; x(1) = e^a x0 + b/a (e^a - 1)
    exact = math.exp(a) * x0 + b / a * (math.exp(a) - 1)
    fn = lambda x, t: a * x + b  # noqa: E731
    out = flow.integrate(fn, torch.tensor([x0], dtype=torch.float64), steps, solver)
    return abs(float(out) - exact)


def test_sampler_order_affine():
    e5, e25 = affine_error(5, "euler"), affine_error(25, "euler")
    h5, h25 = affine_error(5, "second_order"), affine_error(25, "second_order")
    assert h5 < e5 and h25 < e25
    # empirical convergence order from 5 -> 25 steps
    assert math.log(e5 / e25) / math.log(5) == pytest.approx(1.0, abs=0.15)
    assert math.log(h5 / h25) / math.log(5) == pytest.approx(2.0, abs=0.15)
    assert affine_error(100, "euler") < 1e-3 and affine_error(100, "second_order") < 1e-3


def test_guided_velocity_x_prediction():
    class XModel(torch.nn.Module):
        prediction_target = "X"

        def forward(self, x_t, t, c=None, drop_mask=None):
            return torch.ones_like(x_t)

    fn = flow.guided_velocity(XModel(), None)
    x_t = torch.zeros(1, 3, 2, 2)
    assert torch.allclose(fn(x_t, 0.5), torch.full_like(x_t, 2.0))


def test_seeded_noise_reproducible():
    assert torch.equal(flow.seeded_noise((2, 3), 5), flow.seeded_noise((2, 3), 5))
    assert not torch.equal(flow.seeded_noise((2, 3), 5), flow.seeded_noise((2, 3), 6))
