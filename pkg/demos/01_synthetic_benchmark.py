"""
Moving shapes benchmark
=======================

Each class is a (shape, motion) pair. Half the classes scroll their
background texture between frames, the other half keep it fixed.
"""

import sys
from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
from matplotlib import pyplot as plt

from stable_teacher.synthdata import SynthConfig, class_table, generate_samples

config = SynthConfig(train_per_class=1, val_per_class=0, test_per_class=0)
for info in class_table(config):
    print(f"{info.id}: {info.name:22s} background={info.background}")

# one clip per class, frames left to right, ground-truth box drawn on top
samples = generate_samples(config)
fig, axes = plt.subplots(len(samples), config.num_frames, figsize=(config.num_frames, len(samples)))
for row, sample in zip(axes, samples.values()):
    for f, ax in enumerate(row):
        ax.imshow(sample.clip.frames[f])
        x0, y0, x1, y1 = sample.annotations[f].box
        ax.add_patch(plt.Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0, fill=False, color="red", lw=0.8))
        ax.axis("off")
fig.tight_layout()
out = Path(sys.argv[1] if len(sys.argv) > 1 else "benchmark.png")
fig.savefig(out, dpi=80)
print("saved", out)

# foreground is a small fraction of every frame
fg = np.mean([a.mask.mean() for s in samples.values() for a in s.annotations])
print(f"mean foreground fraction {fg:.3f}")
