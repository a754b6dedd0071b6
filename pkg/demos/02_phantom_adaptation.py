"""Train a source-only baseline and the full adaptation model on the synthetic phantom.

Domain A is the labeled source and domain B (inverted, gamma-warped intensities)
the unlabeled target. The default settings finish in a few minutes on one CPU
core; ``--acceptance`` switches to the settings used by the acceptance tests.

    python demos/02_phantom_adaptation.py --out /tmp/bigl-demo
"""

import argparse
import time
from pathlib import Path

import torch

from bigl import (Domain, PhantomSpec, TrainConfig, evaluate_split, generate_phantom, load_cases,
                  make_slice_stream, source_only_baseline, split_cases, train_stage1, train_stage2)
from bigl.trainer import subseed


def wt(net, stream):
    return evaluate_split(net, stream).summary()["WT"]["dsc_mean"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="/tmp/bigl-demo")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--acceptance", action="store_true", help="30 cases, width 16, 20 + 40 epochs")
    args = ap.parse_args()
    torch.set_num_threads(1)

    if args.acceptance:
        n_cases, cfg = 30, TrainConfig(seed=args.seed, seg_width=16, syn_epochs=20, epochs=40)
    else:
        n_cases, cfg = 16, TrainConfig(seed=args.seed, seg_width=8, syn_epochs=8, epochs=12)

    root = Path(args.out) / "phantom"
    if not root.exists():
        generate_phantom(PhantomSpec(image_size=64, n_cases=n_cases, seed=0), root)
    train, _, test = split_cases(load_cases(root), seed=subseed(args.seed, "data:split"))
    src = make_slice_stream(train, "modA", True, subseed(args.seed, "shuffle:source"), domain=Domain.SOURCE)
    tgt = make_slice_stream(train, "modB", False, subseed(args.seed, "shuffle:target"), domain=Domain.TARGET)
    test_src = make_slice_stream(test, "modA", True, domain=Domain.SOURCE)
    test_tgt = make_slice_stream(test, "modB", True, domain=Domain.TARGET)
    print(f"{len(train)} training cases ({len(src)} source slices, {len(tgt)} target slices), {len(test)} test cases")

    t0 = time.perf_counter()
    stage1 = train_stage1(cfg, src, tgt)
    gens = (stage1.nets.g_s2t.eval(), stage1.nets.g_t2s.eval())
    print(f"stage 1 (image translation): {time.perf_counter() - t0:.0f} s")

    t0 = time.perf_counter()
    so = source_only_baseline(cfg, src).segnet
    print(f"source-only: WT DSC source {wt(so, test_src):.1f}%  target {wt(so, test_tgt):.1f}%  "
          f"({time.perf_counter() - t0:.0f} s)")

    t0 = time.perf_counter()
    full = train_stage2(cfg, src, tgt, gens).segnet
    print(f"adapted:     WT DSC source {wt(full, test_src):.1f}%  target {wt(full, test_tgt):.1f}%  "
          f"({time.perf_counter() - t0:.0f} s)")


if __name__ == "__main__":
    main()
