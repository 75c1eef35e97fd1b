import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cod import training
from cod.core import CodecConfig
from cod.model import ArchConfig, CoDModel

TINY_ARCH = ArchConfig(d_code=4, d_cond=8, enc_width=8, num_res_blocks=1, heads=2, field_width=8,
                       feature_dim=8, aux_width=8)


def tiny_model(size=32, f=8, n=16, width=16, depth=2, seed=0, **codec_kw) -> CoDModel:
    torch.manual_seed(seed)
    return CoDModel(CodecConfig(size, size, f, n, channel_width=width, depth=depth, **codec_kw), TINY_ARCH)


def randomize(module, seed=0):
    """Fan-in scaled random weights on every parameter, including zero-initialised ones."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            scale = p.shape[-1] ** -0.5 if p.ndim >= 2 else 0.1
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


class LinearizedQuantizer:
    """Straight-through surrogate frozen at the current point.

    Quantisation is piecewise constant, so the encoder's true derivative is
    zero almost everywhere; training differentiates the surrogate
    z_q = z_e + (e - z_e0) instead. Finite differences of this surrogate are
    the reference for encoder parameters.
    """

    def __init__(self, quantizer, z_e0):
        q = quantizer(z_e0)
        self.quantizer, self.e, self.z_e0, self.indices = quantizer, q.z_q.detach(), z_e0.detach(), q.indices

    def __call__(self, z_e):
        from cod.conditioner import QuantizeResult
        codebook = F.mse_loss(self.e, self.z_e0)
        commit = F.mse_loss(z_e, self.e)
        return QuantizeResult(self.indices, z_e + (self.e - self.z_e0), codebook + commit, codebook, commit)


def gradient_check(model, x, cfg, inputs, extractor, coords=80, h=1e-6, seed=0):
    """Autograd vs central differences on random parameter coordinates (float64)."""
    model.zero_grad()
    training.compute_losses(model, x, cfg, inputs, extractor).total.backward()
    cond = model.conditioner
    with torch.no_grad():
        surrogate = LinearizedQuantizer(cond.quantizer, cond.encoder(x))
    encoder_ids = {id(p) for p in cond.encoder.parameters()}
    params = [p for p in model.parameters() if p.requires_grad]
    g = torch.Generator().manual_seed(seed)
    auto, fd = [], []

    def loss():
        return float(training.compute_losses(model, x, cfg, inputs, extractor).total)

    for _ in range(coords):
        p = params[int(torch.randint(len(params), (1,), generator=g))]
        i = int(torch.randint(p.numel(), (1,), generator=g))
        flat = p.data.view(-1)
        old = flat[i].item()
        if id(p) in encoder_ids:
            cond.quantizer.forward = surrogate
        try:
            with torch.no_grad():
                flat[i] = old + h
                up = loss()
                flat[i] = old - h
                down = loss()
                flat[i] = old
        finally:
            cond.quantizer.__dict__.pop("forward", None)
        auto.append(float(p.grad.view(-1)[i]))
        fd.append((up - down) / (2 * h))
    auto, fd = torch.tensor(auto, dtype=torch.float64), torch.tensor(fd, dtype=torch.float64)
    return float((auto - fd).norm() / auto.norm()), auto, fd


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(1234)
    np.random.seed(1234)


@pytest.fixture(scope="session")
def trained_tiny():
    """Small pixel model trained briefly with unified sampling on toy crops; shared across tests."""
    from cod import data, training
    from cod.features import RandomConvExtractor

    imgs = data.desk_images(256, 32)
    m = tiny_model(width=32, depth=2)
    cfg = training.TrainConfig(alpha_flow_fraction=0.9, steps=300, batch_size=16, lr=2e-3)
    training.train_loop(m, imgs, cfg, RandomConvExtractor(8))
    return m.eval()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
