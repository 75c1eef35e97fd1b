"""Rectified-flow process: interpolant, target conversions and ODE samplers.

Orientation: t = 0 is pure noise, t = 1 is data, so x_t = t*x + (1 - t)*eps and
the velocity is v = x - eps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .core import ConfigError

X_CLAMP = 0.05


class DomainError(ConfigError):
    pass


def _t_like(t, ref):
    t = torch.as_tensor(t, dtype=ref.dtype, device=ref.device)
    if t.ndim == 1 and ref.ndim > 1:
        t = t.view(-1, *([1] * (ref.ndim - 1)))
    return t


def forward_process(x, eps, t):
    tt = torch.as_tensor(t)
    if bool(((tt < 0) | (tt > 1)).any()):
        raise DomainError("t must lie in [0, 1]")
    if x.shape != eps.shape:
        raise ConfigError(f"shape mismatch {tuple(x.shape)} vs {tuple(eps.shape)}")
    t = _t_like(t, x)
    return t * x + (1 - t) * eps


def velocity_target(x, eps):
    return x - eps


def v_to_x(v_pred, x_t, t):
    """Clean-sample estimate reached by following v_pred from t to 1."""
    return x_t + (1 - _t_like(t, x_t)) * v_pred


def x_to_v(x_pred, x_t, t):
    """Velocity implied by a clean-sample prediction, with the denominator clamped to >= 0.05."""
    return (x_pred - x_t) / (1 - _t_like(t, x_t)).clamp(X_CLAMP, 1.0)


@dataclass
class FlowSample:
    x: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor
    x_t: torch.Tensor
    v: torch.Tensor

    @classmethod
    def build(cls, x, eps, t) -> "FlowSample":
        return cls(x, eps, torch.as_tensor(t), forward_process(x, eps, t), velocity_target(x, eps))


@dataclass
class SamplerConfig:
    steps: int = 25
    solver: str = "second_order"
    cfg_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {self.solver!r}; choose from {sorted(SOLVERS)}")
        if self.cfg_scale < 0:
            raise ConfigError(f"cfg_scale must be >= 0, got {self.cfg_scale}")


VelocityFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def euler_step(fn: VelocityFn, x, t: float, dt: float):
    return x + dt * fn(x, t)


def heun_step(fn: VelocityFn, x, t: float, dt: float):
    v1 = fn(x, t)
    x_pred = x + dt * v1
    v2 = fn(x_pred, t + dt)
    return x + 0.5 * dt * (v1 + v2)


SOLVERS = {"euler": euler_step, "second_order": heun_step}


def integrate(fn: VelocityFn, x0, steps: int, solver: str = "euler"):
    """Integrate dx/dt = fn(x, t) from t=0 to t=1 on a uniform grid."""
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    step = SOLVERS[solver]
    x = x0
    dt = 1.0 / steps
    for i in range(steps):
        x = step(fn, x, i * dt, dt)
    return x


def guided_velocity(model, c, cfg_scale: float = 1.0) -> VelocityFn:
    """Velocity field of a denoiser with classifier-free guidance blended in v-space.

    X-predicting models are converted to velocities before blending.
    """
    def as_v(pred, x, t):
        return pred if model.prediction_target == "V" else x_to_v(pred, x, t)

    def fn(x, t):
        tb = torch.full((x.shape[0],), float(t), dtype=x.dtype, device=x.device)
        if c is None or cfg_scale == 1.0:
            return as_v(model(x, tb, c), x, tb)
        b = x.shape[0]
        out = model(torch.cat([x, x]), torch.cat([tb, tb]), torch.cat([c, c]),
                    drop_mask=torch.arange(2 * b, device=x.device) >= b)
        cond = as_v(out[:b], x, tb)
        uncond = as_v(out[b:], x, tb)
        return uncond + cfg_scale * (cond - uncond)

    return fn


def seeded_noise(shape, seed: int, dtype=torch.float32, device=None):
    gen = torch.Generator().manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return torch.randn(shape, generator=gen, dtype=dtype).to(device)


@torch.no_grad()
def sample(model, c, config: SamplerConfig, shape=None, noise: Optional[torch.Tensor] = None):
    """Draw x_0 = eps from the seed and integrate the guided velocity to t = 1."""
    if noise is None:
        if shape is None:
            shape = model.sample_shape(c)
        p = next(model.parameters())
        noise = seeded_noise(shape, config.seed, p.dtype, p.device)
    fn = guided_velocity(model, c, config.cfg_scale)
    return integrate(fn, noise, config.steps, config.solver)


@torch.no_grad()
def one_step_sample(model, c, seed: int, cfg_scale: float = 1.0, shape=None, noise=None):
    """eps + v(eps, t=0): a single Euler step over the whole interval."""
    return sample(model, c, SamplerConfig(steps=1, solver="euler", cfg_scale=cfg_scale, seed=seed),
                  shape=shape, noise=noise)
