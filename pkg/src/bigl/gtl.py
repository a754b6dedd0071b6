"""Global-to-local alignment losses and their auxiliary discriminators.

Four representation streams are aligned, keyed ``"s"``, ``"t"``, ``"s2t"`` and
``"t2s"`` (real source, real target, synthesized target, synthesized source).
The source-side discriminator treats ``s`` as its own domain and ``t2s`` as
foreign; the target-side discriminator owns ``s2t`` (labeled, target-looking)
and treats ``t`` as foreign. Consistency losses ask the foreign streams to be
accepted; adversarial losses train the discriminators to reject them.
"""

from __future__ import annotations

import enum
from typing import Mapping

import torch
from torch import nn

from .domain import Domain, LossReport
from .errors import FrozenContractViolation, IncompleteReport, LevelMismatch, ShapeMismatch

PROB_EPS = 1e-7


class Level(str, enum.Enum):
    FEATURE = "feat"
    ATT_POSITION = "pos"
    ATT_CHANNEL = "cha"


class Stage(enum.IntEnum):
    SYNTHESIS_ACTIVE = 1
    SYNTHESIS_FROZEN = 2


# indicator y = 1: the stream each discriminator accepts as its own domain
OWN_STREAM = {Domain.SOURCE: "s", Domain.TARGET: "s2t"}
FOREIGN_STREAM = {Domain.SOURCE: "t2s", Domain.TARGET: "t"}


def indicator(disc_domain, stream) -> int:
    disc_domain = Domain(disc_domain)
    if stream == OWN_STREAM[disc_domain]:
        return 1
    if stream == FOREIGN_STREAM[disc_domain]:
        return 0
    raise KeyError(f"stream {stream!r} is not seen by the {disc_domain.value} discriminator")


class AlignmentDiscriminator(nn.Module):
    """Three strided convolutions, global average pooling and a sigmoid unit.

    Attention maps arrive as (B, N, N) and are treated as one-channel images,
    rescaled by N so a uniform map reads as all ones.
    """

    def __init__(self, level, domain, in_channels=1, width=16):
        super().__init__()
        self.level = Level(level)
        self.domain = Domain(domain)
        if self.level is not Level.FEATURE:
            in_channels = 1
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
        )
        self.classifier = nn.Linear(4 * w, 1)

    def forward(self, x):
        if self.level is not Level.FEATURE:
            x = x.unsqueeze(1) * x.shape[-1]
        h = self.body(x).mean(dim=(2, 3))
        return torch.sigmoid(self.classifier(h)).squeeze(1)


def _nll(p):
    return -torch.log(p.clamp(PROB_EPS, 1 - PROB_EPS)).mean()


def _nll_neg(p):
    return -torch.log(1 - p.clamp(PROB_EPS, 1 - PROB_EPS)).mean()


def _check_level(disc, level, domain):
    if disc.level is not level:
        raise LevelMismatch(f"{disc.level.value} discriminator used for {level.value} alignment")
    if disc.domain is not domain:
        raise LevelMismatch(f"{disc.domain.value} discriminator passed as the {domain.value} one")


def _require_frozen(*discs):
    for d in discs:
        if any(p.requires_grad for p in d.parameters()):
            raise FrozenContractViolation(
                f"{d.level.value}/{d.domain.value} discriminator must be frozen while "
                "computing a segmentation-side consistency loss"
            )


def output_consistency(p_t, p_t2s):
    """Mean over pixels of the squared L2 distance between two class-probability fields."""
    if p_t.shape != p_t2s.shape:
        raise ShapeMismatch(f"{tuple(p_t.shape)} vs {tuple(p_t2s.shape)}")
    return ((p_t - p_t2s) ** 2).sum(dim=-3).mean()


def adversarial_losses(reps: Mapping, d_s, d_t):
    """Discriminator-side losses on detached representations: ``(L_adv_s, L_adv_t)``."""
    loss_s = _nll(d_s(reps["s"].detach())) + _nll_neg(d_s(reps["t2s"].detach()))
    loss_t = _nll(d_t(reps["s2t"].detach())) + _nll_neg(d_t(reps["t"].detach()))
    return loss_s, loss_t


def consistency_loss(reps: Mapping, d_s, d_t):
    """Segmentation-side fooling loss: foreign streams should be judged own-domain."""
    _require_frozen(d_s, d_t)
    return _nll(d_s(reps[FOREIGN_STREAM[Domain.SOURCE]])) + _nll(d_t(reps[FOREIGN_STREAM[Domain.TARGET]]))


def _attention_reps(bundles, level):
    attr = "position_map" if level is Level.ATT_POSITION else "channel_map"
    return {k: getattr(b, attr) for k, b in bundles.items()}


def attention_adversarial_losses(bundles: Mapping, d_s, d_t, level=Level.ATT_POSITION):
    level = Level(level)
    if level is Level.FEATURE:
        raise LevelMismatch("attention alignment needs a position or channel level")
    _check_level(d_s, level, Domain.SOURCE)
    _check_level(d_t, level, Domain.TARGET)
    return adversarial_losses(_attention_reps(bundles, level), d_s, d_t)


def attention_consistency_loss(bundles: Mapping, discs: Mapping):
    """Sum over both attention kinds; ``discs`` maps (level, domain) to a discriminator."""
    total = 0.0
    for level in (Level.ATT_POSITION, Level.ATT_CHANNEL):
        d_s, d_t = discs[level, Domain.SOURCE], discs[level, Domain.TARGET]
        _check_level(d_s, level, Domain.SOURCE)
        _check_level(d_t, level, Domain.TARGET)
        total = total + consistency_loss(_attention_reps(bundles, level), d_s, d_t)
    return total


def attention_consistency_terms(bundles: Mapping, discs: Mapping):
    """Per-kind consistency losses ``(position, channel)``."""
    out = []
    for level in (Level.ATT_POSITION, Level.ATT_CHANNEL):
        d_s, d_t = discs[level, Domain.SOURCE], discs[level, Domain.TARGET]
        _check_level(d_s, level, Domain.SOURCE)
        _check_level(d_t, level, Domain.TARGET)
        out.append(consistency_loss(_attention_reps(bundles, level), d_s, d_t))
    return tuple(out)


def feature_adversarial_losses(feats: Mapping, d_s, d_t):
    _check_level(d_s, Level.FEATURE, Domain.SOURCE)
    _check_level(d_t, Level.FEATURE, Domain.TARGET)
    return adversarial_losses(feats, d_s, d_t)


def feature_consistency_loss(feats: Mapping, d_s, d_t):
    _check_level(d_s, Level.FEATURE, Domain.SOURCE)
    _check_level(d_t, Level.FEATURE, Domain.TARGET)
    return consistency_loss(feats, d_s, d_t)


def build_discriminators(feat_channels, width=16, levels=tuple(Level)):
    discs = nn.ModuleDict()
    for level in levels:
        for domain in (Domain.SOURCE, Domain.TARGET):
            discs[f"{Level(level).value}_{domain.value}"] = AlignmentDiscriminator(
                level, domain, feat_channels, width)
    return discs


def disc_lookup(discs: nn.ModuleDict):
    return {(d.level, d.domain): d for d in discs.values()}


# each group enters with one coefficient; two-sided
# terms (source/target, position/channel) are averaged into their group
_GROUPS = {
    "seg": (("seg_s", "seg_syn_s"), "sum"),
    "out": (("output_consis",), "sum"),
    "syn": (("gen_syn", "disc_syn"), "sum"),
    "adv_feat": (("adv_feat_s", "adv_feat_t"), "mean"),
    "feat_consis": (("feat_consis",), "sum"),
    "adv_att": (("adv_att_s", "adv_att_t"), "mean"),
    "att_consis": (("att_consis_pos", "att_consis_cha"), "mean"),
}
_GTL = ("adv_feat", "feat_consis", "adv_att", "att_consis")


def _coefficients(cfg, include_syn):
    coef = {"seg": 1.0, "out": cfg.lambda_out, "syn": cfg.lambda_syn if include_syn else 0.0}
    coef.update({g: cfg.lambda_gtl for g in _GTL})
    return coef


def weighted_total(components: Mapping, cfg, include_syn=True) -> float:
    """Weighted combination of whichever components are present."""
    coef = _coefficients(cfg, include_syn)
    total = 0.0
    for group, (names, how) in _GROUPS.items():
        vals = [float(components[n]) for n in names if n in components]
        if not vals or coef[group] == 0.0:
            continue
        v = sum(vals) if how == "sum" else sum(vals) / len(vals)
        total += coef[group] * v
    return total


def total_loss(report, cfg, stage=Stage.SYNTHESIS_FROZEN) -> float:
    """Full weighted objective; every component required by ``stage`` must be present."""
    comps = report.components if isinstance(report, LossReport) else report
    stage = Stage(stage)
    required = [n for g, (names, _) in _GROUPS.items() for n in names
                if g != "syn" or stage is Stage.SYNTHESIS_ACTIVE]
    missing = [n for n in required if n not in comps]
    if missing:
        raise IncompleteReport(missing)
    return weighted_total(comps, cfg, include_syn=stage is Stage.SYNTHESIS_ACTIVE)


def make_report(components: Mapping, cfg, iteration=0, include_syn=True) -> LossReport:
    comps = {k: float(v) for k, v in components.items()}
    return LossReport(comps, weighted_total(comps, cfg, include_syn), iteration)
