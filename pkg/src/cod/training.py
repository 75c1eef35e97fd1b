"""Unified rectified-flow training, loss bookkeeping, checkpoints and the staged recipe."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F

from . import flow
from .core import CodecConfig, ConfigError, NumericalError, compute_rate
from .features import RandomConvExtractor, cosine_distance
from .conditioner import aux_loss
from .model import ArchConfig, CoDModel, LatentAdapter, transfer_weights

log = logging.getLogger(__name__)

STAGES = ("low_res_pretrain", "high_res_pretrain", "unified_post_train")


@dataclass
class TrainConfig:
    alpha_flow_fraction: float = 0.9
    lambda_repa: float = 0.5
    beta_commit: float = 0.25
    gamma_aux: float = 1.0
    uncond_dropout_p: float = 0.1
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 200
    stage: str = "low_res_pretrain"
    seed: int = 0
    grad_clip: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha_flow_fraction <= 1.0:
            raise ConfigError(f"alpha_flow_fraction must be in [0, 1], got {self.alpha_flow_fraction}")
        for k in ("lambda_repa", "beta_commit", "gamma_aux"):
            if getattr(self, k) < 0:
                raise ConfigError(f"loss weight {k} must be >= 0, got {getattr(self, k)}")
        if not 0.0 <= self.uncond_dropout_p <= 1.0:
            raise ConfigError(f"uncond_dropout_p must be in [0, 1], got {self.uncond_dropout_p}")
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("lr must be > 0, batch_size >= 1, steps >= 0")
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; choose from {STAGES}")


@dataclass
class LossReport:
    rf: float
    repa: float
    commit: float
    aux: float
    total: float
    weights: tuple = (0.5, 0.25, 1.0)
    repa_skipped: bool = False
    aux_feature_skipped: bool = False

    def recombine(self) -> float:
        lam, beta, gamma = self.weights
        return self.rf + lam * self.repa + beta * self.commit + gamma * self.aux

    def as_dict(self) -> dict:
        return {"L_RF": self.rf, "L_REPA": self.repa, "L_C": self.commit, "L_aux": self.aux,
                "total": self.total, "repa_skipped": self.repa_skipped,
                "aux_feature_skipped": self.aux_feature_skipped}


def sample_timesteps(batch_size: int, alpha_flow_fraction: float, generator=None, dtype=torch.float32):
    """Logit-normal t for a fraction of the batch, exactly 0 for the rest."""
    if not 0.0 <= alpha_flow_fraction <= 1.0:
        raise ConfigError(f"alpha_flow_fraction must be in [0, 1], got {alpha_flow_fraction}")
    flow_mask = torch.rand(batch_size, generator=generator) < alpha_flow_fraction
    t = torch.sigmoid(torch.randn(batch_size, generator=generator))
    return torch.where(flow_mask, t, torch.zeros_like(t)).to(dtype)


def rf_loss(v_pred, v_target):
    if v_pred.shape != v_target.shape:
        raise ConfigError(f"shape mismatch {tuple(v_pred.shape)} vs {tuple(v_target.shape)}")
    return F.mse_loss(v_pred, v_target)


def repa_loss(backbone_features, extractor_features):
    """1 - mean cosine similarity per spatial position.

    backbone_features: (B, N, D) already projected; extractor_features: (B, D, h, w) with h*w = N.
    """
    target = extractor_features.flatten(2).transpose(1, 2)
    if target.shape != backbone_features.shape:
        raise ConfigError(f"REPA shapes differ: {tuple(backbone_features.shape)} vs {tuple(target.shape)}")
    return cosine_distance(backbone_features, target, dim=-1)


@dataclass
class StepInputs:
    """All randomness consumed by one loss evaluation."""

    eps: torch.Tensor
    t: torch.Tensor
    drop_mask: torch.Tensor

    @classmethod
    def draw(cls, x, config: TrainConfig, generator=None) -> "StepInputs":
        b = x.shape[0]
        t = sample_timesteps(b, config.alpha_flow_fraction, generator, x.dtype)
        eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        drop = torch.rand(b, generator=generator) < config.uncond_dropout_p
        return cls(eps, t, drop)


@dataclass
class LossTerms:
    rf: torch.Tensor
    repa: Optional[torch.Tensor]
    commit: torch.Tensor
    aux: Optional[torch.Tensor]
    total: torch.Tensor
    z_e: torch.Tensor
    indices: torch.Tensor
    aux_feature_skipped: bool
    v_pred: torch.Tensor


def compute_losses(model: CoDModel, images, config: TrainConfig, inputs: StepInputs,
                   extractor=None) -> LossTerms:
    """Eq.-8 objective for one batch with externally supplied randomness."""
    cond = model.conditioner
    z_e = cond.encoder(images)
    q = cond.quantizer(z_e)
    c = cond.decoder(q.z_q)
    x = model.to_sample_space(images)
    x_t = flow.forward_process(x, inputs.eps, inputs.t)
    v = flow.velocity_target(x, inputs.eps)
    pred, feats = model.denoiser(x_t, inputs.t, c, drop_mask=inputs.drop_mask, return_features=True)
    v_pred = pred if model.denoiser.prediction_target == "V" else flow.x_to_v(pred, x_t, inputs.t)
    l_rf = rf_loss(v_pred, v)
    total = l_rf + config.beta_commit * q.commitment_loss

    target_feats = None
    if extractor is not None and (config.lambda_repa > 0 or config.gamma_aux > 0):
        with torch.no_grad():
            target_feats = extractor(images)
    l_repa = None
    if target_feats is not None and config.lambda_repa > 0:
        l_repa = repa_loss(model.repa_proj(feats), target_feats)
        total = total + config.lambda_repa * l_repa
    l_aux, skipped = None, target_feats is None
    if model.aux is not None and config.gamma_aux > 0:
        a = aux_loss(model.aux(c), images, target_feats)
        l_aux, skipped = a.total, a.feature_skipped
        total = total + config.gamma_aux * l_aux
    return LossTerms(l_rf, l_repa, q.commitment_loss, l_aux, total, z_e, q.indices, skipped, v_pred)


def _report(terms: LossTerms, config: TrainConfig) -> LossReport:
    def val(x):
        return 0.0 if x is None else float(x.detach())

    return LossReport(val(terms.rf), val(terms.repa), val(terms.commit), val(terms.aux), val(terms.total),
                      (config.lambda_repa, config.beta_commit, config.gamma_aux),
                      repa_skipped=terms.repa is None, aux_feature_skipped=terms.aux_feature_skipped)


def training_step(images, model: CoDModel, optimizer, config: TrainConfig, extractor=None,
                  generator=None, inputs: Optional[StepInputs] = None) -> LossReport:
    model.train()
    if inputs is None:
        inputs = StepInputs.draw(images, config, generator)
    terms = compute_losses(model, images, config, inputs, extractor)
    if not torch.isfinite(terms.total):
        rep = _report(terms, config)
        raise NumericalError(f"non-finite loss: L_RF={rep.rf} L_C={rep.commit} L_REPA={rep.repa} L_aux={rep.aux}")
    optimizer.zero_grad(set_to_none=True)
    terms.total.backward()
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_([p for g in optimizer.param_groups for p in g["params"]],
                                       config.grad_clip)
    optimizer.step()
    model.quantizer.update(terms.z_e, terms.indices, generator)
    return _report(terms, config)


def make_optimizer(model: CoDModel, lr: float):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=lr, weight_decay=0.0, betas=(0.9, 0.99))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: CoDModel, train_config: Optional[TrainConfig] = None,
                    provenance: Optional[list] = None, extra: Optional[dict] = None) -> Path:
    """Atomic single-file checkpoint: weights + configs + stage provenance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "codec": asdict(model.codec),
        "arch": asdict(model.arch),
        "train": asdict(train_config) if train_config else None,
        "provenance": list(provenance or []),
        "extra": extra or {},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_checkpoint(path) -> tuple[CoDModel, dict]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    codec = CodecConfig(**payload["codec"])
    arch = ArchConfig(**payload["arch"])
    adapter = LatentAdapter(arch.latent_channels) if codec.space == "latent" else None
    model = CoDModel(codec, arch, adapter)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


# -------------------------------------------------------------------- stages


@dataclass(frozen=True)
class StageSpec:
    name: str
    resolution: int
    downsample_factor: int
    lr: float
    alpha_flow_fraction: float
    steps: int
    batch_size: int


# Reference recipe; bits stay at 1024 across the resolution change.
PAPER_STAGES = (
    StageSpec("low_res_pretrain", 256, 16, 1e-4, 1.0, 400_000, 128),
    StageSpec("high_res_pretrain", 512, 32, 2e-5, 1.0, 100_000, 64),
    StageSpec("unified_post_train", 512, 32, 2e-5, 0.9, 50_000, 64),
)

# Desk recipe: same shape, 64-bit constant budget, step counts scaled down,
# learning rates x10 with the 5:1 pretrain/post-train ratio kept.
DESK_STAGES = (
    StageSpec("low_res_pretrain", 32, 8, 1e-3, 1.0, 600, 32),
    StageSpec("high_res_pretrain", 64, 16, 2e-4, 1.0, 300, 16),
    StageSpec("unified_post_train", 64, 16, 2e-4, 0.9, 300, 16),
)


def stage_spec(name: str, table=DESK_STAGES) -> StageSpec:
    for s in table:
        if s.name == name:
            return s
    raise ConfigError(f"unknown stage {name!r}")


def stage_bits(spec: StageSpec, codebook_size: int = 16) -> int:
    cfg = CodecConfig(spec.resolution, spec.resolution, spec.downsample_factor, codebook_size)
    return compute_rate(cfg).total_bits


def stage_train_config(spec: StageSpec, **overrides) -> TrainConfig:
    base = TrainConfig(alpha_flow_fraction=spec.alpha_flow_fraction, lr=spec.lr, steps=spec.steps,
                       batch_size=spec.batch_size, stage=spec.name)
    return replace(base, **overrides)


class RunLog:
    """Line-delimited JSON, one record per step."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def train_loop(model: CoDModel, images, config: TrainConfig, extractor=None, run_log: Optional[RunLog] = None,
               generator=None) -> list[LossReport]:
    """Plain minibatch loop over an in-memory dataset tensor."""
    model.check_image(images[:1])
    gen = generator or torch.Generator().manual_seed(config.seed)
    opt = make_optimizer(model, config.lr)
    reports = []
    for step in range(config.steps):
        idx = torch.randint(0, images.shape[0], (config.batch_size,), generator=gen)
        rep = training_step(images[idx], model, opt, config, extractor, gen)
        reports.append(rep)
        if run_log is not None:
            run_log.write({"step": step, "stage": config.stage, "lr": config.lr, **rep.as_dict()})
    return reports


def build_model(spec: StageSpec, codec_base: CodecConfig, arch: ArchConfig, seed: int = 0) -> CoDModel:
    codec = replace(codec_base, height=spec.resolution, width=spec.resolution,
                    downsample_factor=spec.downsample_factor)
    torch.manual_seed(seed)
    return CoDModel(codec, arch)


def run_stage(stage: str, images, out_path, codec_base: CodecConfig, arch: Optional[ArchConfig] = None,
              init_checkpoint=None, table=DESK_STAGES, extractor=None, run_log_path=None,
              **train_overrides) -> Path:
    """Train one stage of the recipe and write its checkpoint.

    Stages after the first must start from the previous stage's checkpoint;
    weights are carried over wherever names and shapes agree.
    """
    spec = stage_spec(stage, table)
    if stage != STAGES[0] and init_checkpoint is None:
        raise ConfigError(f"stage {stage!r} needs the previous stage's checkpoint")
    provenance = []
    if init_checkpoint is not None:
        prior, payload = load_checkpoint(init_checkpoint)
        arch = prior.arch
        codec_base = prior.codec
        provenance = payload["provenance"]
    arch = arch or ArchConfig()
    cfg = stage_train_config(spec, **train_overrides)
    model = build_model(spec, codec_base, arch, cfg.seed)
    if init_checkpoint is not None:
        transfer_weights(model, payload["state_dict"])
    if images.shape[-1] != spec.resolution:
        raise ConfigError(f"stage {stage} trains at {spec.resolution}px, got {images.shape[-1]}px images")
    extractor = extractor or RandomConvExtractor(arch.feature_dim)
    log.info("stage %s: %s, %d bits", stage, compute_rate(model.codec), compute_rate(model.codec).total_bits)
    reports = train_loop(model, images, cfg, extractor, RunLog(run_log_path) if run_log_path else None)
    k = max(1, len(reports) // 10)
    provenance.append({"stage": stage, "steps": cfg.steps, "bits": compute_rate(model.codec).total_bits,
                       "initial_loss": sum(r.total for r in reports[:k]) / k if reports else math.nan,
                       "final_loss": sum(r.total for r in reports[-k:]) / k if reports else math.nan,
                       "final_report": asdict(reports[-1]) if reports else None})
    return save_checkpoint(out_path, model, cfg, provenance)


@torch.no_grad()
def validation_loss(model: CoDModel, images, config: TrainConfig, seed: int = 1, batches: int = 4,
                    batch_size: Optional[int] = None) -> float:
    """Mean L_RF over fixed (t, eps) draws; no condition dropout, no parameter updates."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    cfg = replace(config, uncond_dropout_p=0.0, lambda_repa=0.0, gamma_aux=0.0)
    bs = batch_size or min(len(images), 64)
    total = 0.0
    for k in range(batches):
        start = (k * bs) % len(images)
        x = images[start:start + bs]
        inputs = StepInputs.draw(x, cfg, gen)
        total += float(compute_losses(model, x, cfg, inputs).rf)
    return total / batches
