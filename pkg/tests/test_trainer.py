import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from bigl.data import PhantomSpec, generate_phantom, load_cases, make_slice_stream
from bigl.domain import Domain, TrainConfig
from bigl.errors import FrozenContractViolation, ScheduleExhausted
from bigl.gtl import build_discriminators
from bigl.synthesis import Direction, GeneratorNet
from bigl.trainer import (OptimState, adaptation_step, build_segnet, load_generators, load_segnet,
                          params_hash, poly_lr, read_log, source_only_baseline, subseed,
                          train_stage1, train_stage2, unpaired_batches)


def test_poly_lr_endpoints_are_exact():
    assert poly_lr(0, 1000, 5e-3, 0.75) == 5e-3
    assert poly_lr(1000, 1000, 5e-3, 0.75) == 0.0
    assert poly_lr(500, 1000, 5e-3, 0.75) == pytest.approx(5e-3 * 0.5 ** 0.75, rel=1e-15)


def test_poly_lr_past_schedule():
    with pytest.raises(ScheduleExhausted):
        poly_lr(1001, 1000, 5e-3, 0.75)
    with pytest.raises(ValueError):
        poly_lr(0, 0, 5e-3, 0.75)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10_000), st.data(), st.floats(0.1, 3.0))
def test_poly_lr_is_non_increasing(max_iter, data, power):
    a = data.draw(st.integers(0, max_iter))
    b = data.draw(st.integers(a, max_iter))
    assert poly_lr(b, max_iter, 5e-3, power) <= poly_lr(a, max_iter, 5e-3, power)


def test_subseeds_are_distinct_and_stable():
    names = ["init:synthesis", "init:segnet", "init:discriminators", "shuffle:source", "shuffle:target"]
    seeds = [subseed(0, n) for n in names]
    assert len(set(seeds)) == len(seeds)
    assert seeds == [subseed(0, n) for n in names]
    assert subseed(1, "init:segnet") != subseed(0, "init:segnet")


CFG = TrainConfig(image_size=(32, 32), seg_width=4, gen_width=2, disc_width=2, batch_size=2,
                  epochs=2, syn_epochs=1, ckpt_every=1)


def make_streams(root):
    generate_phantom(PhantomSpec(image_size=32, n_cases=4, slices_per_case=3,
                                 lesion_radius=(4.0, 7.0), seed=1), root)
    cases = load_cases(root)
    src = make_slice_stream(cases, "modA", True, seed=subseed(0, "shuffle:source"), image_size=(32, 32))
    tgt = make_slice_stream(cases, "modB", False, seed=subseed(0, "shuffle:target"),
                            image_size=(32, 32), domain=Domain.TARGET)
    return src, tgt


@pytest.fixture(scope="module")
def streams(tmp_path_factory):
    return make_streams(tmp_path_factory.mktemp("ph"))


def gens(width=2):
    torch.manual_seed(9)
    return GeneratorNet(Direction.S_TO_T, width, 1), GeneratorNet(Direction.T_TO_S, width, 1)


def step_setup(cfg, seg_lr=None, disc_lr=None):
    segnet = build_segnet(cfg)
    discs = build_discriminators(segnet.bottleneck_channels, cfg.disc_width)
    lr = cfg.base_lr if seg_lr is None else seg_lr
    seg_opt = OptimState(torch.optim.SGD(segnet.parameters(), lr=lr, momentum=0.9), lr, 100)
    disc_opt = torch.optim.Adam(discs.parameters(), lr=cfg.disc_lr if disc_lr is None else disc_lr)
    return segnet, discs, seg_opt, disc_opt


def first_batch(streams):
    src, tgt = streams
    return unpaired_batches(src, tgt, 2, 0)[0].tensors()


def test_zero_learning_rate_is_a_no_op(streams):
    segnet, discs, seg_opt, disc_opt = step_setup(CFG, 0.0, 0.0)
    before = params_hash(segnet, discs)
    g = gens()
    x_s, y_s, x_t = first_batch(streams)
    segnet.eval()  # running statistics are buffers; keep them fixed too
    comps, lr = adaptation_step(segnet, discs, *g, x_s, y_s, x_t, CFG, seg_opt, disc_opt)
    assert lr == 0.0 and params_hash(segnet, discs) == before
    assert set(comps) == {"seg_s", "seg_syn_s", "output_consis", "feat_consis", "att_consis_pos",
                          "att_consis_cha", "adv_feat_s", "adv_feat_t", "adv_att_s", "adv_att_t"}


def test_gradient_routing(streams):
    segnet, discs, seg_opt, disc_opt = step_setup(CFG)
    seen = {}
    real_seg_step, real_disc_step = seg_opt.optimizer.step, disc_opt.step

    def seg_step(*a, **k):
        seen["disc_grads_at_backbone_step"] = [p.grad for p in discs.parameters()]
        seen["seg_grads"] = [p.grad.clone() for p in segnet.parameters()]
        return real_seg_step(*a, **k)

    def disc_step(*a, **k):
        seen["seg_grads_at_disc_step"] = [p.grad for p in segnet.parameters()]
        return real_disc_step(*a, **k)

    seg_opt.optimizer.step, disc_opt.step = seg_step, disc_step
    x_s, y_s, x_t = first_batch(streams)
    adaptation_step(segnet, discs, *gens(), x_s, y_s, x_t, CFG, seg_opt, disc_opt)
    # consistency losses leave the discriminators untouched
    assert all(g is None for g in seen["disc_grads_at_backbone_step"])
    # adversarial losses add nothing to the backbone gradients
    for g, ref in zip(seen["seg_grads_at_disc_step"], seen["seg_grads"]):
        assert torch.equal(g, ref)


def stage2(streams, cfg=CFG, out_dir=None, **kw):
    src, tgt = streams
    return train_stage2(cfg, src, tgt, gens(), out_dir=out_dir, **kw)


def test_first_iterations_are_deterministic(streams):
    torch.set_num_threads(1)
    a = stage2(streams).reports[:10]
    b = stage2(streams).reports[:10]
    assert len(a) == 10
    assert [r.components for r in a] == [r.components for r in b]
    assert [r.total for r in a] == [r.total for r in b]


def test_synthesis_freeze_is_enforced(streams):
    class Drifting(GeneratorNet):
        def forward(self, x):
            with torch.no_grad():
                self.net[0].bias.add_(1e-3)
            return super().forward(x)

    src, tgt = streams
    torch.manual_seed(0)
    g = (Drifting(Direction.S_TO_T, 2, 1), GeneratorNet(Direction.T_TO_S, 2, 1))
    with pytest.raises(FrozenContractViolation):
        train_stage2(CFG.replace(epochs=1), src, tgt, g)


def test_zero_epochs_write_initial_checkpoints(streams, tmp_path):
    src, tgt = streams
    cfg = CFG.replace(epochs=0, syn_epochs=0)
    r1 = train_stage1(cfg, src, tgt, out_dir=tmp_path)
    assert r1.reports == [] and r1.checkpoints["g_s2t"].name == "g_s2t_0000.ckpt"
    torch.manual_seed(subseed(cfg.seed, "init:synthesis"))
    g_s2t, _ = load_generators(tmp_path / "stage1")
    assert params_hash(g_s2t) == params_hash(r1.nets.g_s2t)

    r2 = train_stage2(cfg, src, tgt, (g_s2t, r1.nets.g_t2s), out_dir=tmp_path)
    assert r2.reports == []
    saved = load_segnet(tmp_path / "stage2" / "segnet_0000.ckpt")
    assert params_hash(saved) == params_hash(build_segnet(cfg).eval())
    for name in ("disc_feat_source", "disc_pos_target", "disc_cha_source", "optim_disc", "optim_seg"):
        assert (tmp_path / "stage2" / f"{name}_0000.ckpt").exists()


def test_resume_matches_uninterrupted_run(streams, tmp_path):
    full = stage2(streams, out_dir=tmp_path / "a")
    stage2(streams, out_dir=tmp_path / "b")
    for p in (tmp_path / "b" / "stage2").glob("*_0002.ckpt"):
        p.unlink()
    resumed = stage2(streams, out_dir=tmp_path / "b", resume=True)
    assert len(resumed.reports) == len(full.reports) // 2
    assert params_hash(resumed.segnet) == params_hash(full.segnet)
    assert resumed.reports[-1].components == full.reports[-1].components
    # a completed run resumes to a no-op
    again = stage2(streams, out_dir=tmp_path / "b", resume=True)
    assert again.reports == [] and params_hash(again.segnet) == params_hash(full.segnet)


def test_stage1_resume_and_log(streams, tmp_path):
    src, tgt = streams
    cfg = CFG.replace(syn_epochs=2)
    full = train_stage1(cfg, src, tgt, out_dir=tmp_path / "a", log_path=tmp_path / "a.jsonl")
    records = read_log(tmp_path / "a.jsonl")
    assert len(records) == len(full.reports) and records[0]["stage"] == "stage1"
    assert {"gen_syn", "disc_syn", "total", "iteration"} <= set(records[0])
    train_stage1(cfg, src, tgt, out_dir=tmp_path / "b")
    for p in (tmp_path / "b" / "stage1").glob("*_0002.ckpt"):
        p.unlink()
    resumed = train_stage1(cfg, src, tgt, out_dir=tmp_path / "b", resume=True)
    assert resumed.epochs_run == 1
    assert params_hash(*resumed.nets.named().values()) == params_hash(*full.nets.named().values())


def test_validation_selects_best_checkpoint(streams, tmp_path):
    scores = iter([0.2, 0.9, 0.5])
    res = stage2(streams, cfg=CFG.replace(epochs=3), out_dir=tmp_path, validate=lambda net: next(scores))
    assert res.history == [(1, 0.2), (2, 0.9), (3, 0.5)] and res.best_epoch == 2
    best = tmp_path / "stage2" / "segnet_best.ckpt"
    assert best.read_bytes() == (tmp_path / "stage2" / "segnet_0002.ckpt").read_bytes()


def test_source_only_trains_segmentation_only(streams):
    src, _ = streams
    res = source_only_baseline(CFG.replace(epochs=1), src)
    assert res.discs is None
    assert all(set(r.components) == {"seg_s"} for r in res.reports)
    assert all(math.isfinite(r.total) for r in res.reports)


def test_ablation_without_attention_builds_feature_discriminators_only(streams):
    res = stage2(streams, cfg=CFG.replace(epochs=1, align_attention=False))
    assert sorted(res.discs.keys()) == ["feat_source", "feat_target"]
    assert "att_consis_pos" not in res.reports[0].components
