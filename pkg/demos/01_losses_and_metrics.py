"""A short tour of the objective and the evaluation metrics on hand-made inputs.

Runs in a second or two; nothing is trained.
"""

import numpy as np
import torch

from bigl import SegNet, TrainConfig, dice, hd95, asd, segmentation_loss, total_loss
from bigl.domain import LOSS_COMPONENTS
from bigl.gtl import Stage, output_consistency

torch.manual_seed(0)

# segmentation loss: cross-entropy plus generalized Dice
target = torch.zeros(1, 8, 8, dtype=torch.long)
target[0, 2:6, 2:6] = 1
perfect = torch.full((1, 4, 8, 8), -20.0)
perfect.scatter_(1, target[:, None], 20.0)
print(f"segmentation loss, perfect logits:  {float(segmentation_loss(perfect, target)):.6f}")
print(f"segmentation loss, uniform logits:  {float(segmentation_loss(torch.zeros(1, 4, 8, 8), target)):.4f}")

# output consistency between a target prediction and its translated twin
p = torch.softmax(torch.randn(1, 4, 8, 8), 1)
print(f"output consistency, same map:       {float(output_consistency(p, p)):.4f}")
print(f"output consistency, rolled map:     {float(output_consistency(p, p.roll(3, -1))):.4f}")

# the weighted objective with every component equal to one
cfg = TrainConfig()
ones = {k: 1.0 for k in LOSS_COMPONENTS}
print(f"total with synthesis active:        {total_loss(ones, cfg, Stage.SYNTHESIS_ACTIVE):.3f}")
print(f"total with synthesis frozen:        {total_loss(ones, cfg, Stage.SYNTHESIS_FROZEN):.3f}")

# the dual attention block starts as the identity, so the U-Net begins attention-free
net = SegNet(4, 4, (32, 32))
x = torch.randn(2, 1, 32, 32)
plain = SegNet(4, 4, (32, 32), attention=False)
plain.load_state_dict({k: v for k, v in net.state_dict().items() if not k.startswith("attention")})
with torch.no_grad():
    gap = (net(x).logits - plain(x).logits).abs().max()
print(f"zero-gate attention vs plain U-Net: max |diff| = {float(gap):.2e}")

# metrics: two single pixels five millimetres apart, then two offset squares
a = np.zeros((8, 8), bool)
b = np.zeros((8, 8), bool)
a[0, 0], b[3, 4] = True, True
print(f"single pixels: DSC {dice(a, b):.2f}  HD95 {hd95(a, b, (1, 1)):.2f} mm  ASD {asd(a, b, (1, 1)):.2f} mm")
sq = np.zeros((20, 20), bool)
sq[4:12, 4:12] = True
moved = np.roll(sq, 2, axis=1)
print(f"shifted square: DSC {dice(sq, moved):.3f}  HD95 {hd95(sq, moved, (1.0, 0.5)):.2f} mm  "
      f"ASD {asd(sq, moved, (1.0, 0.5)):.2f} mm (0.5 mm columns)")
