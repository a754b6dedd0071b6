"""Dual-attention U-Net shared across all four input streams, and its supervised loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .domain import LabelMask, Slice2D, to_model_range
from .errors import NonFiniteActivation, ShapeMismatch

PROB_EPS = 1e-7


def _check_finite(x):
    if not torch.isfinite(x).all():
        raise NonFiniteActivation("non-finite values entering attention block")


class PositionAttention(nn.Module):
    """Spatial self-attention over all H*W positions with a zero-initialized gate."""

    def __init__(self, channels, reduction=8):
        super().__init__()
        inner = max(1, channels // reduction)
        self.query = nn.Conv2d(channels, inner, 1)
        self.key = nn.Conv2d(channels, inner, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.alpha = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        _check_finite(x)
        b, c, h, w = x.shape
        q = self.query(x).flatten(2).transpose(1, 2)  # B x N x C'
        k = self.key(x).flatten(2)  # B x C' x N
        attn = torch.softmax(torch.bmm(q, k), dim=-1)  # B x N x N
        v = self.value(x).flatten(2)  # B x C x N
        out = torch.bmm(v, attn.transpose(1, 2)).view(b, c, h, w)
        return self.alpha * out + x, attn


class ChannelAttention(nn.Module):
    """Channel self-attention from the softmax of the channel Gram matrix."""

    def __init__(self):
        super().__init__()
        self.alpha = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        _check_finite(x)
        b, c, h, w = x.shape
        flat = x.flatten(2)  # B x C x N
        attn = torch.softmax(torch.bmm(flat, flat.transpose(1, 2)), dim=-1)  # B x C x C
        out = torch.bmm(attn, flat).view(b, c, h, w)
        return self.alpha * out + x, attn


@dataclass
class AttentionBundle:
    position_map: torch.Tensor  # B x N x N
    channel_map: torch.Tensor  # B x C x C
    alpha_pos: torch.Tensor
    alpha_cha: torch.Tensor

    def select(self, idx) -> "AttentionBundle":
        return AttentionBundle(self.position_map[idx], self.channel_map[idx],
                               self.alpha_pos, self.alpha_cha)


class DualAttention(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.position = PositionAttention(channels)
        self.channel = ChannelAttention()

    def forward(self, x):
        pos, pos_map = self.position(x)
        cha, cha_map = self.channel(x)
        # mean rather than plain sum so that zero gates reduce the block to the identity
        out = (pos + cha) / 2
        return out, AttentionBundle(pos_map, cha_map, self.position.alpha, self.channel.alpha)


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class Up(nn.Module):
    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cin // 2, 2, stride=2)
        self.conv = DoubleConv(cin // 2 + cskip, cout)

    def forward(self, x, skip):
        return self.conv(torch.cat([skip, self.up(x)], dim=1))


class SegOutput(NamedTuple):
    logits: torch.Tensor
    bundle: Optional[AttentionBundle]
    feat: torch.Tensor


class SegNet(nn.Module):
    """U-Net with four stride-2 stages and a dual-attention bottleneck.

    For a ``(B, 1, H, W)`` input the bottleneck sits at ``H/16 x W/16`` with
    ``16 * width`` channels. ``attention=False`` builds the plain U-Net with the
    same parameter names minus the attention block.
    """

    def __init__(self, num_classes=4, width=32, image_size=(64, 64), in_channels=1, attention=True):
        super().__init__()
        self.num_classes = num_classes
        self.image_size = tuple(image_size)
        widths = [width * 2 ** i for i in range(5)]
        self.inc = DoubleConv(in_channels, widths[0])
        self.downs = nn.ModuleList(
            nn.Sequential(nn.MaxPool2d(2), DoubleConv(widths[i], widths[i + 1])) for i in range(4)
        )
        self.attention = DualAttention(widths[4]) if attention else None
        self.ups = nn.ModuleList(Up(widths[i + 1], widths[i], widths[i]) for i in reversed(range(4)))
        self.head = nn.Conv2d(widths[0], num_classes, 1)
        self.reset_parameters()

    @property
    def bottleneck_channels(self):
        return self.head.in_channels * 16

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def zero_head(self):
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x) -> SegOutput:
        if tuple(x.shape[-2:]) != self.image_size:
            raise ShapeMismatch(f"expected spatial size {self.image_size}, got {tuple(x.shape[-2:])}")
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        feat = skips.pop()
        bundle = None
        if self.attention is not None:
            feat, bundle = self.attention(feat)
        y = feat
        for up in self.ups:
            y = up(y, skips.pop())
        return SegOutput(self.head(y), bundle, feat)


def segment(net: SegNet, x: Slice2D) -> SegOutput:
    """Run ``net`` on a single slice; outputs keep a leading batch axis of 1."""
    if x.shape != net.image_size:
        raise ShapeMismatch(f"slice is {x.shape}, network expects {net.image_size}")
    param = next(net.parameters())
    t = to_model_range(torch.from_numpy(np.array(x.pixels))).to(param)
    return net(t[None, None])


def _dice_terms(probs, onehot):
    """Per-sample, per-class soft dice and class-balance weights (absent classes weigh 0)."""
    dims = tuple(range(2, probs.dim()))
    inter = (probs * onehot).sum(dims)
    denom = (probs + onehot).sum(dims)
    counts = onehot.sum(dims)
    present = counts > 0
    w = torch.where(present, 1.0 / counts.clamp_min(1), torch.zeros_like(counts))
    w = w / w.sum(dim=1, keepdim=True).clamp_min(torch.finfo(w.dtype).tiny)
    dice = torch.where(present, 2 * inter / denom.clamp_min(PROB_EPS), torch.zeros_like(inter))
    return dice, w


def segmentation_loss(logits, target):
    """Cross-entropy plus generalized dice loss with normalized 1/count class weights.

    ``logits`` is (B, c, H, W) or (c, H, W); ``target`` holds class indices with
    the matching spatial shape. Classes absent from a sample are left out of its
    dice sum but still enter the cross-entropy.
    """
    if isinstance(target, LabelMask):
        target = torch.from_numpy(np.array(target.classes))
    if logits.dim() == target.dim() + 1 and logits.dim() == 3:
        logits, target = logits[None], target[None]
    if logits.dim() != target.dim() + 1 or logits.shape[2:] != target.shape[1:] \
            or logits.shape[0] != target.shape[0]:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(target.shape)}")
    target = target.long().to(logits.device)
    ce = F.cross_entropy(logits, target)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, logits.shape[1]).movedim(-1, 1).to(probs.dtype)
    dice, w = _dice_terms(probs, onehot)
    gdl = 1 - (w * dice).sum(dim=1)
    return ce + gdl.mean()


def seg_losses_pair(net, x_s, x_syn_t, y_s):
    """Supervised losses on a source batch and its synthesized-target twin, same labels."""
    if x_s.shape != x_syn_t.shape:
        raise ShapeMismatch(f"source {tuple(x_s.shape)} vs synthesized {tuple(x_syn_t.shape)}")
    out = net(torch.cat([x_s, x_syn_t]))
    logits_s, logits_st = out.logits.chunk(2)
    return segmentation_loss(logits_s, y_s), segmentation_loss(logits_st, y_s)
