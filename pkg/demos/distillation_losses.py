"""How temperature shapes the distillation term and how the loss weights move.

Run: python3 demos/distillation_losses.py
"""

import numpy as np

from htrkd.distill import kd_loss, weight_schedule
from htrkd.numerics import Tensor
from htrkd.train import synthetic_ratio

teacher = np.array([[4.0, 1.0, 0.5, -2.0]])
for student in ([4.0, 1.0, 0.5, -2.0], [4.0, -2.0, 0.5, 1.0], [-2.0, 1.0, 0.5, 4.0]):
    row = "  ".join(f"tau={t}: {float(kd_loss(teacher, Tensor([student]), t).data):7.4f}" for t in (1, 2, 4))
    print(f"student {student}: {row}")

print("\nepoch  alpha  beta  gamma  delta  synthetic share")
for e in range(0, 31, 5):
    w = weight_schedule(e, 30)
    print(f"{e:5d}  {w.alpha:.3f}  {w.beta:.2f}  {w.gamma:.3f}  {w.delta:.2f}   {synthetic_ratio(e, 30):.2f}")
