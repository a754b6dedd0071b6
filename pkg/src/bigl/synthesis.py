"""Bidirectional cross-modality image translators and their patch discriminators."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .domain import Domain, LossReport, Slice2D, from_model_range, to_model_range
from .errors import DirectionMismatch, EmptyEpoch, NonFiniteActivation, ShapeMismatch

PROB_EPS = 1e-7


class Direction(str, enum.Enum):
    S_TO_T = "s2t"
    T_TO_S = "t2s"


_IO = {
    Direction.S_TO_T: (Domain.SOURCE, Domain.SYN_TARGET),
    Direction.T_TO_S: (Domain.TARGET, Domain.SYN_SOURCE),
}


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1), nn.InstanceNorm2d(ch), nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, padding=1), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class GeneratorNet(nn.Module):
    """Residual encoder-decoder: 2 stride-2 downsamplings, residual blocks, 2 upsamplings, tanh."""

    def __init__(self, direction=Direction.S_TO_T, width=16, n_res=4):
        super().__init__()
        self.direction = Direction(direction)
        w = width
        layers = [nn.Conv2d(1, w, 7, padding=3), nn.InstanceNorm2d(w), nn.ReLU(inplace=True)]
        for mult in (1, 2):
            layers += [nn.Conv2d(w * mult, w * mult * 2, 3, stride=2, padding=1),
                       nn.InstanceNorm2d(w * mult * 2), nn.ReLU(inplace=True)]
        layers += [ResBlock(4 * w) for _ in range(n_res)]
        for mult in (4, 2):
            layers += [nn.ConvTranspose2d(w * mult, w * mult // 2, 3, stride=2, padding=1,
                                          output_padding=1),
                       nn.InstanceNorm2d(w * mult // 2), nn.ReLU(inplace=True)]
        layers += [nn.Conv2d(w, 1, 7, padding=3), nn.Tanh()]
        self.net = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.normal_(m.weight, 0.0, 0.02)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        return self.net(x)


class ImageDiscriminatorNet(nn.Module):
    """Four-layer strided patch classifier; returns per-patch probabilities."""

    def __init__(self, domain=Domain.TARGET, width=16):
        super().__init__()
        self.domain = Domain(domain)
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(1, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), nn.InstanceNorm2d(2 * w),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1), nn.InstanceNorm2d(4 * w),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * w, 1, 4, stride=1, padding=1),
        )
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, 0.0, 0.02)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        return torch.sigmoid(self.net(x))


def generate(g: GeneratorNet, x: Slice2D) -> Slice2D:
    """Translate one slice; z-scored in, z-scaled out, metadata carried over."""
    src, dst = _IO[g.direction]
    if x.domain != src:
        raise DirectionMismatch(f"{g.direction.value} generator expects a {src.value} slice, "
                                f"got {x.domain.value}")
    param = next(g.parameters())
    inp = to_model_range(torch.from_numpy(np.array(x.pixels))).to(param)[None, None]
    with torch.no_grad():
        out = g(inp)[0, 0]
    return x.replace(pixels=from_model_range(out).cpu().numpy(), domain=dst)


def _probs(d, x):
    p = d(x) if callable(d) else d
    p = torch.as_tensor(p)
    if not torch.isfinite(p).all():
        raise NonFiniteActivation("discriminator produced non-finite output")
    return p.clamp(PROB_EPS, 1 - PROB_EPS)


def generator_loss(x_s, x_t, x_syn, d, lambda_rec, reconstruction=None):
    """``E[log(1 - D(x_syn))] + lambda_rec * E|x_t - x_syn|``.

    When ``reconstruction`` (``G_t2s(G_s2t(x_s))``) is given the L1 term compares
    it with ``x_s`` instead, the cycle-consistent variant.
    """
    if reconstruction is None:
        if x_t.shape != x_syn.shape:
            raise ShapeMismatch(f"x_t {tuple(x_t.shape)} vs x_syn {tuple(x_syn.shape)}")
        rec = (x_t - x_syn).abs().mean()
    else:
        if x_s.shape != reconstruction.shape:
            raise ShapeMismatch(f"x_s {tuple(x_s.shape)} vs reconstruction {tuple(reconstruction.shape)}")
        rec = (x_s - reconstruction).abs().mean()
    adv = torch.log(1 - _probs(d, x_syn)).mean()
    return adv + lambda_rec * rec


def discriminator_loss(x_real, x_syn, d):
    """``-E[log D(x_real)] - E[log(1 - D(x_syn))]`` with probabilities clamped to [1e-7, 1-1e-7]."""
    p_real = _probs(d, x_real)
    p_fake = _probs(d, x_syn)
    return -torch.log(p_real).mean() - torch.log(1 - p_fake).mean()


@dataclass
class SynthesisNets:
    g_s2t: GeneratorNet
    g_t2s: GeneratorNet
    d_src: ImageDiscriminatorNet
    d_tgt: ImageDiscriminatorNet

    def named(self):
        return {"g_s2t": self.g_s2t, "g_t2s": self.g_t2s, "d_src": self.d_src, "d_tgt": self.d_tgt}

    @classmethod
    def build(cls, gen_width=16, disc_width=16):
        return cls(
            GeneratorNet(Direction.S_TO_T, gen_width),
            GeneratorNet(Direction.T_TO_S, gen_width),
            ImageDiscriminatorNet(Domain.SOURCE, disc_width),
            ImageDiscriminatorNet(Domain.TARGET, disc_width),
        )

    def generator_params(self):
        return list(self.g_s2t.parameters()) + list(self.g_t2s.parameters())

    def discriminator_params(self):
        return list(self.d_src.parameters()) + list(self.d_tgt.parameters())


def _set_grad(params, flag):
    for p in params:
        p.requires_grad_(flag)


def synthesis_step(nets: SynthesisNets, opt_g, opt_d, x_s, x_t, lambda_rec, cycle=False):
    """One generator update (both directions) followed by one discriminator update."""
    _set_grad(nets.discriminator_params(), False)
    x_st = nets.g_s2t(x_s)
    x_ts = nets.g_t2s(x_t)
    rec_s = nets.g_t2s(x_st) if cycle else None
    rec_t = nets.g_s2t(x_ts) if cycle else None
    loss_g = (generator_loss(x_s, x_t, x_st, nets.d_tgt, lambda_rec, rec_s)
              + generator_loss(x_t, x_s, x_ts, nets.d_src, lambda_rec, rec_t))
    opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    opt_g.step()
    _set_grad(nets.discriminator_params(), True)

    _set_grad(nets.generator_params(), False)
    loss_d = (discriminator_loss(x_t, x_st.detach(), nets.d_tgt)
              + discriminator_loss(x_s, x_ts.detach(), nets.d_src))
    opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    opt_d.step()
    _set_grad(nets.generator_params(), True)
    return loss_g.item(), loss_d.item()


def train_synthesis_epoch(nets: SynthesisNets, batches, opt_g, opt_d, lambda_rec,
                          cycle=False, iteration=0, lambda_syn=1.0, device="cpu"):
    """Run one pass over ``batches`` (an iterable of UnpairedBatch); returns LossReports."""
    reports = []
    for batch in batches:
        x_s, _, x_t = batch.tensors(device)
        g, d = synthesis_step(nets, opt_g, opt_d, to_model_range(x_s), to_model_range(x_t),
                              lambda_rec, cycle)
        iteration += 1
        reports.append(LossReport({"gen_syn": g, "disc_syn": d}, lambda_syn * (g + d), iteration))
    if not reports:
        raise EmptyEpoch("synthesis epoch received no batches")
    return reports
