"""Two-stage training: synthesis first, then segmentation with global-to-local alignment."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .domain import Domain, TrainConfig, UnpairedBatch, to_model_range
from .errors import (EmptyEpoch, FrozenContractViolation, NonFiniteLoss, ScheduleExhausted,
                     CheckpointError)
from .gtl import (Level, adversarial_losses, build_discriminators, consistency_loss,
                  disc_lookup, make_report, output_consistency)
from .segnet import SegNet, segmentation_loss
from .synthesis import Direction, GeneratorNet, SynthesisNets, train_synthesis_epoch

log = logging.getLogger(__name__)

# the default block weight; per-term consistency weights scale with lambda_gtl / this
GTL_REFERENCE = 0.1


def subseed(seed, name) -> int:
    """Named, independent sub-seed derived from the run seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def poly_lr(iteration, max_iter, base, power):
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    if iteration > max_iter:
        raise ScheduleExhausted(f"iteration {iteration} exceeds schedule length {max_iter}")
    return base * (1 - iteration / max_iter) ** power


@dataclass
class OptimState:
    optimizer: torch.optim.Optimizer
    base_lr: float
    max_iterations: int
    power: float = 0.75
    decay: bool = True
    iteration: int = 0

    @property
    def lr(self):
        if not self.decay:
            return self.base_lr
        return poly_lr(self.iteration, self.max_iterations, self.base_lr, self.power)

    def step(self):
        lr = self.lr
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.iteration += 1
        return lr


def params_hash(*modules) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, p in m.state_dict().items():
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def parameters_equal(a: nn.Module, b_state: dict) -> bool:
    return all(torch.equal(p.detach().cpu(), b_state[n].cpu()) for n, p in a.named_parameters())


class TrainLog:
    """Line-delimited JSON, one record per iteration."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **record):
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def read_log(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def batches_per_epoch(n, batch_size):
    return max(1, n // batch_size) if n else 0


def unpaired_batches(source, target, batch_size, epoch):
    """Positional pairing of independently shuffled source and target streams."""
    src = source.epoch(epoch)
    tgt = target.epoch(epoch)
    if not src or not tgt:
        raise EmptyEpoch("source and target streams must be nonempty")
    n = batches_per_epoch(len(src), batch_size)
    bs = min(batch_size, len(src))
    out = []
    for b in range(n):
        s_items = src[b * bs:(b + 1) * bs]
        t_items = [tgt[(b * bs + i) % len(tgt)][0] for i in range(len(s_items))]
        out.append(UnpairedBatch(tuple(s_items), tuple(t_items)))
    return out


def source_batches(source, batch_size, epoch):
    src = source.epoch(epoch)
    if not src:
        raise EmptyEpoch("source stream is empty")
    n = batches_per_epoch(len(src), batch_size)
    bs = min(batch_size, len(src))
    for b in range(n):
        items = src[b * bs:(b + 1) * bs]
        x = torch.from_numpy(np.stack([s.pixels for s, _ in items])[:, None])
        y = torch.from_numpy(np.stack([m.classes for _, m in items]))
        yield x, y


def _ckpt_path(stage_dir, net, epoch):
    return Path(stage_dir) / f"{net}_{epoch:04d}.ckpt"


def latest_epoch(stage_dir, names):
    """Highest epoch for which every named checkpoint exists, or None."""
    stage_dir = Path(stage_dir)
    if not stage_dir.is_dir():
        return None
    epochs = None
    for name in names:
        found = {int(m.group(1)) for p in stage_dir.iterdir()
                 if (m := re.fullmatch(rf"{re.escape(name)}_(\d+)\.ckpt", p.name))}
        epochs = found if epochs is None else epochs & found
    return max(epochs) if epochs else None


# --------------------------------------------------------------------------- stage 1


SYN_NAMES = ("g_s2t", "g_t2s", "d_src", "d_tgt")
SYN_KIND = {"g_s2t": "generator", "g_t2s": "generator", "d_src": "image_disc", "d_tgt": "image_disc"}


@dataclass
class Stage1Result:
    nets: SynthesisNets
    reports: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    epochs_run: int = 0


def _adam(params, lr, betas=(0.5, 0.999)):
    return torch.optim.Adam(params, lr=lr, betas=betas)


def _save_stage1(stage_dir, nets, opt_g, opt_d, epoch, cfg):
    paths = {}
    for name, m in nets.named().items():
        tag = m.direction.value if name.startswith("g") else m.domain.value
        width = m.net[0].out_channels
        paths[name] = ckpt.save_module(_ckpt_path(stage_dir, name, epoch), m, kind=SYN_KIND[name],
                                       tag=tag, iteration=epoch, cfg=cfg, meta={"width": width})
    ckpt.save_checkpoint(_ckpt_path(stage_dir, "optim_syn", epoch),
                         {**{f"g/{k}": v for k, v in ckpt.optimizer_tensors(opt_g).items()},
                          **{f"d/{k}": v for k, v in ckpt.optimizer_tensors(opt_d).items()}},
                         kind="optim", tag="syn", iteration=epoch,
                         config_hash=ckpt.config_hash(cfg))
    return paths


def _split_optim(tensors, prefix):
    return {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}


def train_stage1(cfg: TrainConfig, source, target, out_dir=None, resume=False, device="cpu",
                 log_path=None):
    """Adversarially train both translators on unpaired source/target slice streams."""
    torch.manual_seed(subseed(cfg.seed, "init:synthesis"))
    nets = SynthesisNets.build(cfg.gen_width, cfg.disc_width)
    for m in nets.named().values():
        m.to(device)
    opt_g = _adam(nets.generator_params(), cfg.syn_lr)
    opt_d = _adam(nets.discriminator_params(), cfg.syn_lr)
    stage_dir = Path(out_dir) / "stage1" if out_dir else None
    result = Stage1Result(nets)
    start = 0
    if stage_dir and resume:
        last = latest_epoch(stage_dir, SYN_NAMES + ("optim_syn",))
        if last is not None:
            for name, m in nets.named().items():
                ckpt.load_module(_ckpt_path(stage_dir, name, last), m)
            _, ot = ckpt.load_checkpoint(_ckpt_path(stage_dir, "optim_syn", last))
            ckpt.restore_optimizer(opt_g, _split_optim(ot, "g"))
            ckpt.restore_optimizer(opt_d, _split_optim(ot, "d"))
            start = last
            result.checkpoints = {n: _ckpt_path(stage_dir, n, last) for n in SYN_NAMES}
    if stage_dir and start == 0:
        result.checkpoints = _save_stage1(stage_dir, nets, opt_g, opt_d, 0, cfg)
    train_log = TrainLog(log_path)
    iteration = start * batches_per_epoch(len(source), cfg.batch_size)
    for epoch in range(start, cfg.syn_epochs):
        batches = unpaired_batches(source, target, cfg.batch_size, epoch)
        reports = train_synthesis_epoch(nets, batches, opt_g, opt_d, cfg.lambda_rec,
                                        cycle=cfg.cycle_reconstruction, iteration=iteration,
                                        lambda_syn=cfg.lambda_syn, device=device)
        for r in reports:
            _check_finite_report(r)
            train_log.write(stage="stage1", epoch=epoch + 1, lr=cfg.syn_lr, **r.as_record())
        iteration = reports[-1].iteration
        result.reports.extend(reports)
        log.info("stage1 epoch %d: gen %.4f disc %.4f", epoch + 1,
                 np.mean([r["gen_syn"] for r in reports]), np.mean([r["disc_syn"] for r in reports]))
        if stage_dir and ((epoch + 1) % cfg.ckpt_every == 0 or epoch + 1 == cfg.syn_epochs):
            result.checkpoints = _save_stage1(stage_dir, nets, opt_g, opt_d, epoch + 1, cfg)
    result.epochs_run = cfg.syn_epochs - start
    return result


def _check_finite_report(report):
    for k, v in report.components.items():
        if not np.isfinite(v):
            raise NonFiniteLoss(f"{k} is not finite", report.iteration)


def load_generators(stage1_dir, device="cpu"):
    """Load the latest stage-1 generators; returns ``(g_s2t, g_t2s)``."""
    stage1_dir = Path(stage1_dir)
    last = latest_epoch(stage1_dir, ("g_s2t", "g_t2s"))
    if last is None:
        raise CheckpointError(f"no stage-1 generator checkpoints in {stage1_dir}")
    gens = []
    for name, direction in (("g_s2t", Direction.S_TO_T), ("g_t2s", Direction.T_TO_S)):
        path = _ckpt_path(stage1_dir, name, last)
        header = ckpt.read_header(path)
        g = GeneratorNet(direction, header["meta"]["width"])
        ckpt.load_module(path, g, kind="generator", tag=direction.value)
        gens.append(g.to(device))
    return tuple(gens)


# --------------------------------------------------------------------------- stage 2


STREAMS = ("s", "s2t", "t", "t2s")


@dataclass
class Stage2Result:
    segnet: SegNet
    discs: Optional[nn.ModuleDict] = None
    reports: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # (epoch, validation score)
    best_epoch: Optional[int] = None


def _enabled_levels(cfg):
    levels = []
    if cfg.align_feature:
        levels.append(Level.FEATURE)
    if cfg.align_attention:
        levels += [Level.ATT_POSITION, Level.ATT_CHANNEL]
    return levels


def build_segnet(cfg, device="cpu"):
    torch.manual_seed(subseed(cfg.seed, "init:segnet"))
    return SegNet(cfg.num_classes, cfg.seg_width, cfg.image_size).to(device)


def _set_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


def adaptation_step(segnet, discs, g_s2t, g_t2s, x_s, y_s, x_t, cfg, seg_opt: OptimState,
                    disc_opt, iteration=0):
    """One iteration: backbone update on all four streams, then the discriminators.

    Inputs are z-scored tensors; they are mapped to the network range here.
    Returns the loss components as floats.
    """
    x_s, x_t = to_model_range(x_s), to_model_range(x_t)
    with torch.no_grad():
        x_st = g_s2t(x_s)
        x_ts = g_t2s(x_t)
    out = segnet(torch.cat([x_s, x_st, x_t, x_ts]))
    logits = dict(zip(STREAMS, out.logits.chunk(4)))
    feats = dict(zip(STREAMS, out.feat.chunk(4)))
    pos = dict(zip(STREAMS, out.bundle.position_map.chunk(4)))
    cha = dict(zip(STREAMS, out.bundle.channel_map.chunk(4)))
    reps = {Level.FEATURE: feats, Level.ATT_POSITION: pos, Level.ATT_CHANNEL: cha}
    lookup = disc_lookup(discs) if discs is not None else {}
    levels = sorted({lvl for lvl, _ in lookup}, key=list(Level).index)

    scale = cfg.lambda_gtl / GTL_REFERENCE
    weights = {Level.FEATURE: cfg.lambda_feat, Level.ATT_POSITION: cfg.lambda_att_pos,
               Level.ATT_CHANNEL: cfg.lambda_att_cha}
    names = {Level.FEATURE: "feat_consis", Level.ATT_POSITION: "att_consis_pos",
             Level.ATT_CHANNEL: "att_consis_cha"}

    comps = {}
    seg_s = segmentation_loss(logits["s"], y_s)
    seg_st = segmentation_loss(logits["s2t"], y_s)
    loss = seg_s + seg_st
    comps["seg_s"], comps["seg_syn_s"] = seg_s, seg_st
    if cfg.align_output:
        out_c = output_consistency(torch.softmax(logits["t"], 1), torch.softmax(logits["t2s"], 1))
        loss = loss + cfg.lambda_out * out_c
        comps["output_consis"] = out_c
    if discs is not None:
        _set_grad(discs, False)
    for level in levels:
        c = consistency_loss(reps[level], lookup[level, Domain.SOURCE], lookup[level, Domain.TARGET])
        loss = loss + scale * weights[level] * c
        comps[names[level]] = c
    if not torch.isfinite(loss):
        raise NonFiniteLoss("backbone loss is not finite", iteration)
    seg_opt.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    lr = seg_opt.step()

    if discs is not None and levels:
        _set_grad(discs, True)
        d_loss = 0.0
        for level in levels:
            ls, lt = adversarial_losses(reps[level], lookup[level, Domain.SOURCE],
                                        lookup[level, Domain.TARGET])
            key = "feat" if level is Level.FEATURE else "att"
            # position and channel adversarial terms share one report slot each side
            comps[f"adv_{key}_s"] = comps.get(f"adv_{key}_s", 0.0) + ls
            comps[f"adv_{key}_t"] = comps.get(f"adv_{key}_t", 0.0) + lt
            d_loss = d_loss + ls + lt
        if not torch.isfinite(d_loss):
            raise NonFiniteLoss("discriminator loss is not finite", iteration)
        disc_opt.zero_grad(set_to_none=True)
        d_loss.backward()
        disc_opt.step()
    return {k: v.item() if torch.is_tensor(v) else float(v) for k, v in comps.items()}, lr


STAGE2_BASE = ("segnet", "optim_seg")


def _disc_name(d):
    return f"disc_{d.level.value}_{d.domain.value}"


def _save_stage2(stage_dir, segnet, discs, seg_opt, disc_opt, epoch, cfg):
    paths = {"segnet": ckpt.save_module(_ckpt_path(stage_dir, "segnet", epoch), segnet,
                                        kind="segnet", iteration=epoch, cfg=cfg,
                                        meta={"width": segnet.head.in_channels,
                                              "num_classes": segnet.num_classes,
                                              "image_size": list(segnet.image_size)})}
    ckpt.save_checkpoint(_ckpt_path(stage_dir, "optim_seg", epoch),
                         ckpt.optimizer_tensors(seg_opt.optimizer), kind="optim", tag="segnet",
                         iteration=epoch, config_hash=ckpt.config_hash(cfg),
                         meta={"iteration": seg_opt.iteration})
    if discs is not None:
        for d in discs.values():
            name = _disc_name(d)
            paths[name] = ckpt.save_module(_ckpt_path(stage_dir, name, epoch), d, kind="disc",
                                           tag=f"{d.level.value}/{d.domain.value}",
                                           iteration=epoch, cfg=cfg)
        ckpt.save_checkpoint(_ckpt_path(stage_dir, "optim_disc", epoch),
                             ckpt.optimizer_tensors(disc_opt), kind="optim", tag="disc",
                             iteration=epoch, config_hash=ckpt.config_hash(cfg))
    return paths


def load_segnet(path, device="cpu"):
    header = ckpt.read_header(path)
    meta = header["meta"]
    net = SegNet(meta["num_classes"], meta["width"], tuple(meta["image_size"]))
    ckpt.load_module(path, net, kind="segnet")
    return net.to(device).eval()


def _run_segmentation(cfg, source, target, gens, out_dir, resume, device, log_path, validate,
                      source_only):
    segnet = build_segnet(cfg, device)
    discs = None
    if not source_only:
        levels = _enabled_levels(cfg)
        if levels:
            torch.manual_seed(subseed(cfg.seed, "init:discriminators"))
            discs = build_discriminators(segnet.bottleneck_channels, cfg.disc_width, levels).to(device)
    n_batches = batches_per_epoch(len(source), cfg.batch_size)
    if n_batches == 0:
        raise EmptyEpoch("source stream is empty")
    max_iter = max(1, cfg.epochs * n_batches)
    seg_opt = OptimState(torch.optim.SGD(segnet.parameters(), lr=cfg.base_lr, momentum=cfg.momentum),
                         cfg.base_lr, max_iter, cfg.lr_power)
    disc_opt = (torch.optim.Adam(discs.parameters(), lr=cfg.disc_lr, betas=(0.9, 0.99))
                if discs is not None else None)

    g_s2t = g_t2s = None
    syn_hash = None
    if not source_only:
        g_s2t, g_t2s = gens
        for g in (g_s2t, g_t2s):
            g.eval()
            _set_grad(g, False)
        syn_hash = params_hash(g_s2t, g_t2s)

    stage_dir = Path(out_dir) / "stage2" if out_dir else None
    names = STAGE2_BASE + (tuple(_disc_name(d) for d in discs.values()) + ("optim_disc",)
                           if discs is not None else ())
    result = Stage2Result(segnet, discs)
    start = 0
    if stage_dir and resume:
        last = latest_epoch(stage_dir, names)
        if last is not None:
            ckpt.load_module(_ckpt_path(stage_dir, "segnet", last), segnet)
            h, ot = ckpt.load_checkpoint(_ckpt_path(stage_dir, "optim_seg", last))
            ckpt.restore_optimizer(seg_opt.optimizer, ot)
            seg_opt.iteration = h["meta"]["iteration"]
            if discs is not None:
                for d in discs.values():
                    ckpt.load_module(_ckpt_path(stage_dir, _disc_name(d), last), d)
                _, ot = ckpt.load_checkpoint(_ckpt_path(stage_dir, "optim_disc", last))
                ckpt.restore_optimizer(disc_opt, ot)
            start = last
            result.checkpoints = {n: _ckpt_path(stage_dir, n, last) for n in names
                                  if not n.startswith("optim")}
    if stage_dir and start == 0:
        result.checkpoints = _save_stage2(stage_dir, segnet, discs, seg_opt, disc_opt, 0, cfg)

    train_log = TrainLog(log_path)
    segnet.train()
    for epoch in range(start, cfg.epochs):
        if source_only:
            for x, y in source_batches(source, cfg.batch_size, epoch):
                it = seg_opt.iteration
                loss = segmentation_loss(segnet(to_model_range(x).to(device)).logits, y.to(device))
                if not torch.isfinite(loss):
                    raise NonFiniteLoss("source-only loss is not finite", it)
                seg_opt.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                lr = seg_opt.step()
                report = make_report({"seg_s": loss.item()}, cfg, it + 1, include_syn=False)
                result.reports.append(report)
                train_log.write(stage="source_only", epoch=epoch + 1, lr=lr, **report.as_record())
        else:
            for batch in unpaired_batches(source, target, cfg.batch_size, epoch):
                it = seg_opt.iteration
                x_s, y_s, x_t = batch.tensors(device)
                comps, lr = adaptation_step(segnet, discs, g_s2t, g_t2s, x_s, y_s, x_t, cfg,
                                            seg_opt, disc_opt, it)
                report = make_report(comps, cfg, it + 1, include_syn=False)
                result.reports.append(report)
                train_log.write(stage="stage2", epoch=epoch + 1, lr=lr, disc_lr=cfg.disc_lr,
                                **report.as_record())
            if params_hash(g_s2t, g_t2s) != syn_hash:
                raise FrozenContractViolation(f"synthesis parameters changed during epoch {epoch + 1}")
        recent = result.reports[-n_batches:]
        log.info("%s epoch %d: seg %.4f total %.4f", "source-only" if source_only else "stage2",
                 epoch + 1, np.mean([r["seg_s"] for r in recent]), np.mean([r.total for r in recent]))
        if stage_dir and ((epoch + 1) % cfg.ckpt_every == 0 or epoch + 1 == cfg.epochs):
            result.checkpoints = _save_stage2(stage_dir, segnet, discs, seg_opt, disc_opt,
                                              epoch + 1, cfg)
            if validate is not None:
                score = float(validate(segnet))
                segnet.train()
                result.history.append((epoch + 1, score))
                if result.best_epoch is None or score > max(s for e, s in result.history[:-1]):
                    result.best_epoch = epoch + 1
                    shutil.copyfile(result.checkpoints["segnet"], stage_dir / "segnet_best.ckpt")
    segnet.eval()
    return result


def train_stage2(cfg: TrainConfig, source, target, gens, out_dir=None, resume=False,
                 device="cpu", log_path=None, validate: Optional[Callable] = None):
    """Train the SegNet and alignment discriminators with both generators frozen.

    ``gens`` is ``(g_s2t, g_t2s)``; ``validate`` (SegNet -> score) is called at
    every checkpoint and the best-scoring weights are copied to ``segnet_best.ckpt``.
    """
    return _run_segmentation(cfg, source, target, gens, out_dir, resume, device, log_path,
                             validate, source_only=False)


def source_only_baseline(cfg: TrainConfig, source, out_dir=None, resume=False, device="cpu",
                         log_path=None, validate=None):
    """SegNet trained on labeled source slices alone: no synthesis, no alignment."""
    return _run_segmentation(cfg, source, None, None, out_dir, resume, device, log_path,
                             validate, source_only=True)
