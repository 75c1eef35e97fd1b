"""One-step distillation (DMD), higher-bitrate finetuning and CoD-based perceptual supervision."""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import flow
from .core import ConfigError, NumericalError, StateError
from .features import RandomConvExtractor, feature_distance
from .model import CoDModel, transfer_weights
from .training import repa_loss, sample_timesteps


# ------------------------------------------------------------- score models


def denoised(denoiser, x_t, t, c, cfg_scale: float = 1.0):
    """Clean-sample estimate from any V- or X-predicting denoiser."""
    v = flow.guided_velocity(denoiser, c, cfg_scale)
    tb = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1)
    if tb.numel() == 1:
        return flow.v_to_x(v(x_t, float(tb)), x_t, float(tb))
    # per-sample t: evaluate directly
    if c is not None and cfg_scale != 1.0:
        b = x_t.shape[0]
        out = denoiser(torch.cat([x_t, x_t]), torch.cat([tb, tb]), torch.cat([c, c]),
                       drop_mask=torch.arange(2 * b) >= b)
        cond, uncond = out[:b], out[b:]
        pred = uncond + cfg_scale * (cond - uncond)
    else:
        pred = denoiser(x_t, tb, c)
    if denoiser.prediction_target == "X":
        return pred
    return flow.v_to_x(pred, x_t, tb)


class AnalyticGaussianDenoiser(nn.Module):
    """Exact posterior mean E[x | x_t] for data ~ N(mean, var * I) under the RF interpolant."""

    prediction_target = "X"

    def __init__(self, mean: float, var: float = 1.0):
        super().__init__()
        self.register_buffer("mean", torch.tensor(float(mean)))
        self.var = var

    def forward(self, x_t, t, c=None, drop_mask=None):
        t = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1, *([1] * (x_t.ndim - 1)))
        s2 = t ** 2 * self.var + (1 - t) ** 2
        return self.mean + t * self.var / s2 * (x_t - t * self.mean)


def _frozen(module) -> bool:
    return not any(p.requires_grad for p in module.parameters())


def weight_checksum(module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def dmd_gradient(x_gen, real, fake, c=None, generator=None, t_range=(0.02, 0.98),
                 weighting: str = "dmd", real_cfg_scale: float = 1.0):
    """Per-element gradient direction for the generator output (no graph attached).

    weighting='dmd': (x_fake - x_real) / mean|x_gen - x_real|, per sample.
    weighting='score': t * (s_fake - s_real)(x_t), the exact per-noise-level
    KL gradient w.r.t. the clean sample, using s = (t * x_hat - x_t) / (1 - t)^2.
    """
    if not _frozen(real):
        raise StateError("real score model must be frozen")
    lo, hi = t_range
    if not 0.0 <= lo <= hi < 1.0:
        raise ConfigError(f"bad t_range {t_range}")
    b = x_gen.shape[0]
    x = x_gen.detach()
    t = lo + (hi - lo) * torch.rand(b, generator=generator, dtype=x.dtype)
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    x_t = flow.forward_process(x, eps, t)
    with torch.no_grad():
        x_real = denoised(real, x_t, t, c, real_cfg_scale)
        x_fake = denoised(fake, x_t, t, c)
    diff = x_fake - x_real
    dims = tuple(range(1, x.ndim))
    if weighting == "dmd":
        w = (x - x_real).abs().mean(dim=dims, keepdim=True).clamp_min(1e-8)
        grad = diff / w
    elif weighting == "score":
        tt = t.view(-1, *([1] * (x.ndim - 1)))
        grad = tt ** 2 * diff / (1 - tt) ** 2
    else:
        raise ConfigError(f"unknown weighting {weighting!r}")
    return torch.nan_to_num(grad)


def dmd_generator_loss(x_gen, real, fake, c=None, generator=None, t_range=(0.02, 0.98),
                       weighting: str = "dmd", real_cfg_scale: float = 1.0):
    """Surrogate whose gradient w.r.t. each element of ``x_gen`` is grad / numel.

    Only the generator graph receives gradient; both score models are queried
    under no_grad.
    """
    grad = dmd_gradient(x_gen, real, fake, c, generator, t_range, weighting, real_cfg_scale)
    target = (x_gen - grad).detach()
    return 0.5 * F.mse_loss(x_gen, target, reduction="sum") / x_gen.numel()


def rf_step(denoiser, optimizer, x, c=None, generator=None):
    """One rectified-flow regression step of ``denoiser`` on fixed samples ``x``."""
    x = x.detach()
    t = sample_timesteps(x.shape[0], 1.0, generator, x.dtype)
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    x_t = flow.forward_process(x, eps, t)
    pred = denoiser(x_t, t, c)
    v_pred = pred if denoiser.prediction_target == "V" else flow.x_to_v(pred, x_t, t)
    loss = F.mse_loss(v_pred, flow.velocity_target(x, eps))
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


# ------------------------------------------------------------- discriminator


class PatchDiscriminator(nn.Module):
    """Four strided convolutions producing a map of real/fake logits."""

    def __init__(self, in_channels: int = 3, width: int = 32):
        super().__init__()
        chans = (in_channels, width, 2 * width, 4 * width)
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        layers.append(nn.Conv2d(chans[-1], 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def hinge_d_loss(real_logits, fake_logits):
    return 0.5 * (F.relu(1 - real_logits).mean() + F.relu(1 + fake_logits).mean())


def hinge_g_loss(fake_logits):
    return -fake_logits.mean()


# --------------------------------------------------------------- low rank


class LowRankAdapter(nn.Module):
    """y = base(x) + x A^T B^T with A: (r, in), B: (out, r); B starts at zero."""

    def __init__(self, base: nn.Linear, rank: int = 32, alpha: Optional[float] = None):
        super().__init__()
        if rank < 1:
            raise ConfigError(f"rank must be >= 1, got {rank}")
        self.base = base
        self.base.requires_grad_(False)
        self.rank = rank
        self.scale = (alpha or rank) / rank
        self.A = nn.Parameter(torch.randn(rank, base.in_features) / math.sqrt(base.in_features))
        self.B = nn.Parameter(torch.zeros(base.out_features, rank))

    @property
    def delta(self):
        return self.scale * self.B @ self.A

    def forward(self, x):
        return self.base(x) + self.scale * F.linear(F.linear(x, self.A), self.B)

    def merged(self) -> nn.Linear:
        out = nn.Linear(self.base.in_features, self.base.out_features, bias=self.base.bias is not None)
        with torch.no_grad():
            out.weight.copy_(self.base.weight + self.delta)
            if self.base.bias is not None:
                out.bias.copy_(self.base.bias)
        return out


def apply_lora(module: nn.Module, rank: int = 32) -> list[LowRankAdapter]:
    """Wrap every nn.Linear below ``module`` in a LowRankAdapter (in place); freezes everything else."""
    module.requires_grad_(False)
    adapters = []

    def visit(parent):
        for name, child in parent.named_children():
            if isinstance(child, nn.Linear):
                a = LowRankAdapter(child, min(rank, child.in_features, child.out_features))
                setattr(parent, name, a)
                adapters.append(a)
            elif not isinstance(child, LowRankAdapter):
                visit(child)

    visit(module)
    return adapters


def merge_lora(module: nn.Module) -> None:
    for name, child in module.named_children():
        if isinstance(child, LowRankAdapter):
            setattr(module, name, child.merged())
        else:
            merge_lora(child)


# ------------------------------------------------------------- distillation


@dataclass
class DistillConfig:
    update_ratio: int = 10
    w_l1: float = 1.0
    w_feat: float = 1.0
    w_dmd: float = 2.0
    w_gan: float = 0.01
    lambda_repa: float = 0.5
    beta_commit: float = 0.25
    lr_generator: float = 1e-4
    lr_fake: float = 1e-4
    lr_disc: float = 1e-4
    t_range: tuple = (0.02, 0.98)
    weighting: str = "dmd"
    real_cfg_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.update_ratio < 2:
            raise ConfigError(f"update_ratio must be >= 2, got {self.update_ratio}")
        for k in ("w_l1", "w_feat", "w_dmd", "w_gan", "lambda_repa", "beta_commit"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")


@dataclass
class OneStepLossReport:
    l1: float = 0.0
    perceptual_feature: float = 0.0
    dmd: float = 0.0
    gan: float = 0.0
    repa: float = 0.0
    commit: float = 0.0
    total: float = 0.0
    updated: str = "generator"
    fake_loss: float = float("nan")
    weights: tuple = (1.0, 1.0, 2.0, 0.01, 0.5, 0.25)

    def recombine(self) -> float:
        w1, wf, wd, wg, lam, beta = self.weights
        return (w1 * self.l1 + wf * self.perceptual_feature) + (wd * self.dmd + wg * self.gan) \
            + lam * self.repa + beta * self.commit


@dataclass
class DMDState:
    generator: CoDModel
    real_score_model: nn.Module
    fake_score_model: nn.Module
    real_conditioner: nn.Module
    discriminator: PatchDiscriminator
    config: DistillConfig
    extractor: nn.Module
    step_counter: int = 0
    opt_generator: Optional[torch.optim.Optimizer] = None
    opt_fake: Optional[torch.optim.Optimizer] = None
    opt_disc: Optional[torch.optim.Optimizer] = None
    rng: Optional[torch.Generator] = None
    real_checksum: str = ""
    history: list = field(default_factory=list)

    @property
    def update_ratio(self) -> int:
        return self.config.update_ratio

    def is_generator_turn(self) -> bool:
        return self.step_counter % self.config.update_ratio == 0


def init_dmd(teacher: CoDModel, config: Optional[DistillConfig] = None, extractor=None) -> DMDState:
    """Generator and fake score start as copies of the teacher; the real score is a frozen copy."""
    config = config or DistillConfig()
    if teacher.codec.space != "pixel":
        raise ConfigError("distillation is implemented for pixel-space models")
    generator = copy.deepcopy(teacher)
    generator.requires_grad_(True)
    if generator.adapter is not None:
        generator.adapter.requires_grad_(False)
    real = copy.deepcopy(teacher.denoiser).requires_grad_(False).eval()
    real_cond = copy.deepcopy(teacher.conditioner).requires_grad_(False).eval()
    fake = copy.deepcopy(teacher.denoiser).requires_grad_(True)
    disc = PatchDiscriminator()
    extractor = extractor or RandomConvExtractor(teacher.arch.feature_dim)
    gen_params = [p for p in generator.parameters() if p.requires_grad]
    state = DMDState(
        generator, real, fake, real_cond, disc, config, extractor,
        opt_generator=torch.optim.AdamW(gen_params, lr=config.lr_generator, betas=(0.9, 0.99), weight_decay=0),
        opt_fake=torch.optim.AdamW(fake.parameters(), lr=config.lr_fake, betas=(0.9, 0.99), weight_decay=0),
        opt_disc=torch.optim.AdamW(disc.parameters(), lr=config.lr_disc, betas=(0.5, 0.99), weight_decay=0),
        rng=torch.Generator().manual_seed(config.seed),
    )
    state.real_checksum = weight_checksum(real)
    return state


def one_step_generate(model: CoDModel, images, noise, return_all: bool = False):
    """Differentiable one-step reconstruction eps + v(eps, 0 | c) from the model's own condition."""
    q = model.conditioner.encode(images)
    c = model.conditioner.decoder(q.z_q)
    t0 = torch.zeros(images.shape[0], dtype=images.dtype)
    pred, feats = model.denoiser(noise, t0, c, return_features=True)
    v = pred if model.denoiser.prediction_target == "V" else flow.x_to_v(pred, noise, t0)
    x = model.from_sample_space(flow.v_to_x(v, noise, t0))
    return (x, q, c, feats) if return_all else x


def fake_score_step(x_gen_detached, state: DMDState, c=None) -> float:
    """One RF step of the fake score model on generator samples."""
    if x_gen_detached.requires_grad:
        raise StateError("fake score step expects detached generator output")
    state.fake_score_model.train()
    return rf_step(state.fake_score_model, state.opt_fake, x_gen_detached, c, state.rng)


def _real_condition(state: DMDState, images):
    with torch.no_grad():
        return state.real_conditioner.decode_tokens(state.real_conditioner.encode(images).indices)


def generator_losses(state: DMDState, images, cfg: DistillConfig, use_perc: bool = True):
    gen = state.generator
    noise = torch.randn(images.shape, generator=state.rng, dtype=images.dtype)
    x_gen, q, c, feats = one_step_generate(gen, images, noise, return_all=True)
    l1 = (x_gen - images).abs().mean()
    lf = feature_distance(x_gen, images, state.extractor) if cfg.w_feat > 0 else torch.zeros(())
    with torch.no_grad():
        target_feats = state.extractor(images)
    l_repa = repa_loss(gen.repa_proj(feats), target_feats) if cfg.lambda_repa > 0 else torch.zeros(())
    l_c = q.commitment_loss
    zero = torch.zeros(())
    l_dmd = l_gan = zero
    if use_perc and cfg.w_dmd > 0:
        c_real = _real_condition(state, images)
        l_dmd = dmd_generator_loss(x_gen, state.real_score_model, state.fake_score_model, c_real, state.rng,
                                   cfg.t_range, cfg.weighting, cfg.real_cfg_scale)
    if use_perc and cfg.w_gan > 0:
        l_gan = hinge_g_loss(state.discriminator(x_gen))
    w_dmd = cfg.w_dmd if use_perc else 0.0
    w_gan = cfg.w_gan if use_perc else 0.0
    total = (cfg.w_l1 * l1 + cfg.w_feat * lf) + (w_dmd * l_dmd + w_gan * l_gan) \
        + cfg.lambda_repa * l_repa + cfg.beta_commit * l_c
    report = OneStepLossReport(float(l1.detach()), float(lf.detach()), float(l_dmd.detach()), float(l_gan.detach()),
                               float(l_repa.detach()), float(l_c.detach()), float(total.detach()), "generator",
                               weights=(cfg.w_l1, cfg.w_feat, w_dmd, w_gan, cfg.lambda_repa, cfg.beta_commit))
    return total, x_gen, q, report


def distill_step(images, state: DMDState, use_perc: bool = True) -> OneStepLossReport:
    """Generator update on every ``update_ratio``-th step, fake-score update otherwise."""
    cfg = state.config
    if state.real_checksum and not _frozen(state.real_score_model):
        raise StateError("real score model was unfrozen")
    if state.is_generator_turn():
        state.generator.train()
        total, x_gen, q, report = generator_losses(state, images, cfg, use_perc)
        if not torch.isfinite(total):
            raise NumericalError(f"non-finite one-step loss: {report}")
        state.opt_generator.zero_grad(set_to_none=True)
        total.backward()
        torch.nn.utils.clip_grad_norm_([p for g in state.opt_generator.param_groups for p in g["params"]], 1.0)
        state.opt_generator.step()
        state.generator.quantizer.update(q.z_q.detach(), q.indices, state.rng)
        if use_perc and cfg.w_gan > 0:
            d_loss = hinge_d_loss(state.discriminator(images), state.discriminator(x_gen.detach()))
            state.opt_disc.zero_grad(set_to_none=True)
            d_loss.backward()
            state.opt_disc.step()
    else:
        with torch.no_grad():
            state.generator.eval()
            noise = torch.randn(images.shape, generator=state.rng, dtype=images.dtype)
            x_gen = one_step_generate(state.generator, images, noise)
        c_real = _real_condition(state, images)
        loss = fake_score_step(x_gen.detach(), state, c_real)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite fake score loss {loss}")
        report = OneStepLossReport(updated="fake", fake_loss=loss)
    state.history.append(report.updated)
    state.step_counter += 1
    return report


def distill(images, state: DMDState, steps: int, batch_size: int = 16, use_perc: bool = True):
    gen = torch.Generator().manual_seed(state.config.seed + 1)
    reports = []
    for _ in range(steps):
        idx = torch.randint(0, len(images), (batch_size,), generator=gen)
        reports.append(distill_step(images[idx], state, use_perc))
    return reports


# ---------------------------------------------------- higher-bitrate finetune


def finetune_higher_bitrate(base: CoDModel, target_codec, stage: str, images, steps: int,
                            state: Optional[DMDState] = None, rank: int = 32, lr_stage1: float = 1e-3,
                            batch_size: int = 16, config: Optional[DistillConfig] = None, seed: int = 0):
    """Two-stage adaptation of a one-step model to a new (f, N) operating point.

    Stage "I": fresh conditioner for ``target_codec``, diffusion weights loaded
    from ``base`` and adapted only through rank-``rank`` adapters, perceptual
    (DMD + GAN) terms off. Stage "II": adapters merged, everything trainable,
    full loss, learning rate a tenth of Stage I. Returns the model, or the
    DMD state for Stage II.
    """
    config = config or DistillConfig()
    if stage == "I":
        torch.manual_seed(seed)
        model = CoDModel(target_codec, base.arch)
        transfer_weights(model.denoiser, base.denoiser.state_dict())
        transfer_weights(model.repa_proj, base.repa_proj.state_dict())
        apply_lora(model.denoiser, rank)
        model.conditioner.requires_grad_(True)
        model.finetune_stage = "I"
        st = _stage_state(model, base, config, lr_stage1)
        distill(images, st, steps, batch_size, use_perc=False)
        return model
    if stage == "II":
        if getattr(base, "finetune_stage", None) != "I":
            raise StateError("Stage II must follow Stage I")
        merge_lora(base.denoiser)
        base.requires_grad_(True)
        base.finetune_stage = "II"
        if state is None:
            raise StateError("Stage II needs the DMD state of the multi-step teacher")
        st = _stage_state(base, None, config, lr_stage1 / 10, teacher_state=state)
        distill(images, st, steps, batch_size, use_perc=True)
        return st
    raise ConfigError(f"unknown finetune stage {stage!r}")


def _stage_state(model: CoDModel, base, config: DistillConfig, lr: float, teacher_state=None) -> DMDState:
    from dataclasses import replace

    cfg = replace(config, lr_generator=lr, update_ratio=config.update_ratio)
    params = [p for p in model.parameters() if p.requires_grad]
    if teacher_state is not None:
        real, fake, real_cond = (teacher_state.real_score_model, teacher_state.fake_score_model,
                                 teacher_state.real_conditioner)
        disc, extractor = teacher_state.discriminator, teacher_state.extractor
    else:
        real = copy.deepcopy(base.denoiser).requires_grad_(False)
        fake = copy.deepcopy(base.denoiser)
        real_cond = copy.deepcopy(base.conditioner).requires_grad_(False)
        disc, extractor = PatchDiscriminator(), RandomConvExtractor(model.arch.feature_dim)
    st = DMDState(model, real, fake, real_cond, disc, cfg, extractor,
                  opt_generator=torch.optim.AdamW(params, lr=lr, weight_decay=0),
                  opt_fake=torch.optim.AdamW(fake.parameters(), lr=cfg.lr_fake, weight_decay=0),
                  opt_disc=torch.optim.AdamW(disc.parameters(), lr=cfg.lr_disc, betas=(0.5, 0.99), weight_decay=0),
                  rng=torch.Generator().manual_seed(cfg.seed))
    st.real_checksum = weight_checksum(real)
    if teacher_state is None:
        # Stage I never queries the score models; only generator turns run.
        st.config = replace(cfg, update_ratio=cfg.update_ratio)
        st.is_generator_turn = lambda: True  # type: ignore[method-assign]
    return st


# -------------------------------------------------- perceptual supervision


class ToyMSECodec(nn.Module):
    """Tiny conv autoencoder with a uniformly quantised bottleneck; trained with MSE."""

    def __init__(self, latent_channels: int = 4, width: int = 32, levels: float = 4.0):
        super().__init__()
        self.levels = levels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, width, 4, 2, 1), nn.GELU(),
            nn.Conv2d(width, width, 4, 2, 1), nn.GELU(),
            nn.Conv2d(width, width, 4, 2, 1), nn.GELU(),
            nn.Conv2d(width, latent_channels, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, padding=1), nn.GELU(),
            nn.ConvTranspose2d(width, width, 4, 2, 1), nn.GELU(),
            nn.ConvTranspose2d(width, width, 4, 2, 1), nn.GELU(),
            nn.ConvTranspose2d(width, width, 4, 2, 1), nn.GELU(),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def quantize(self, z):
        zq = torch.round(torch.tanh(z) * self.levels) / self.levels
        return torch.tanh(z) + (zq - torch.tanh(z)).detach()

    def encode(self, x):
        return self.quantize(self.encoder(x))

    def forward(self, x):
        return self.decoder(self.encode(x))


class PerceptualSupervisionLoss:
    """DMD loss from a frozen CoD (real score) and an online fake score, for any decoder output.

    ``loss(x_hat, images)`` returns a scalar whose gradient reaches only ``x_hat``;
    ``fake_step(x_hat.detach(), images)`` trains the fake score on decoder outputs.
    """

    def __init__(self, teacher: CoDModel, lr_fake: float = 1e-4, t_range=(0.02, 0.98),
                 weighting: str = "dmd", real_cfg_scale: float = 1.0, seed: int = 0):
        self.real = copy.deepcopy(teacher.denoiser).requires_grad_(False).eval()
        self.conditioner = copy.deepcopy(teacher.conditioner).requires_grad_(False).eval()
        self.fake = copy.deepcopy(teacher.denoiser).requires_grad_(True)
        self.opt = torch.optim.AdamW(self.fake.parameters(), lr=lr_fake, weight_decay=0)
        self.t_range = t_range
        self.weighting = weighting
        self.real_cfg_scale = real_cfg_scale
        self.rng = torch.Generator().manual_seed(seed)

    def condition(self, images):
        with torch.no_grad():
            return self.conditioner.decode_tokens(self.conditioner.encode(images).indices)

    def __call__(self, x_hat, images):
        return dmd_generator_loss(x_hat, self.real, self.fake, self.condition(images), self.rng,
                                  self.t_range, self.weighting, self.real_cfg_scale)

    def fake_step(self, x_hat_detached, images) -> float:
        self.fake.train()
        return rf_step(self.fake, self.opt, x_hat_detached, self.condition(images), self.rng)


def train_toy_codec(codec: ToyMSECodec, images, steps: int, lr: float = 2e-3, batch_size: int = 32,
                    seed: int = 0) -> float:
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    loss = torch.tensor(float("nan"))
    for _ in range(steps):
        x = images[torch.randint(0, len(images), (batch_size,), generator=gen)]
        loss = F.mse_loss(codec(x), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return float(loss.detach())


def finetune_decoder(codec: ToyMSECodec, images, ps_loss: PerceptualSupervisionLoss, decoder_steps: int,
                     update_ratio: int = 10, lr: float = 1e-4, w_mse: float = 1.0, w_dmd: float = 1.0,
                     w_feat: float = 0.0, extractor=None, batch_size: int = 16, seed: int = 0):
    """Frozen encoder; decoder trained with MSE (+ feature) + DMD, fake score updated in between."""
    codec.encoder.requires_grad_(False)
    opt = torch.optim.Adam(codec.decoder.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    history = []
    for step in range(decoder_steps * update_ratio):
        x = images[torch.randint(0, len(images), (batch_size,), generator=gen)]
        with torch.no_grad():
            z = codec.encode(x)
        if step % update_ratio == 0:
            x_hat = codec.decoder(z)
            loss = w_mse * F.mse_loss(x_hat, x) + w_dmd * ps_loss(x_hat, x)
            if w_feat > 0:
                loss = loss + w_feat * feature_distance(x_hat, x, extractor)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(float(loss.detach()))
        elif w_dmd > 0:
            with torch.no_grad():
                x_hat = codec.decoder(z)
            ps_loss.fake_step(x_hat, x)
    return history
