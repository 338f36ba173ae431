"""
The unsupervised losses on toy inputs
=====================================

Consistency losses compare teacher and student. The difference-of-pixels term
compares how the maps change from one frame to the next, so a constant offset
between teacher and student costs nothing while flicker does.
"""

import math

import torch

from stable_teacher import losses as L

p = torch.tensor([0.7, 0.2, 0.1])
print("JSD(p, p)              =", L.jsd(p, p).item())
a = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
b = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
print("JSD(a, b) disjoint     =", L.jsd(a, b).item(), " ln 2 =", math.log(2))

# a teacher map that moves smoothly, and two students
t = torch.linspace(0, 1, 4).view(4, 1, 1).expand(4, 8, 8).clone() * 0.5
shifted = t + 0.2                                   # same motion, brighter
flicker = t + 0.2 * (torch.arange(4) % 2).view(4, 1, 1)  # same mean level, jittery

for name, s in (("shifted", shifted), ("flicker", flicker)):
    dop_u, _ = L.dop_loss(t, None, s)
    print(f"{name:8s} MSE={L.loc_consistency(t, s).item():.4f}  DoP={dop_u.item():.4f}")

# the unsupervised weight ramps up over the first epochs
print("lambda by epoch:", [round(L.lambda_schedule(e), 3) for e in (0, 5, 10, 15, 30)])
