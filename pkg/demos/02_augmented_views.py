"""
Weak and strong views
=====================

Both views share the frame selection and the horizontal flip, so teacher and
student maps line up pixel for pixel. Only the strong view gets color jitter,
grayscale and blur.
"""

import numpy as np

from stable_teacher.augment import make_view_pair
from stable_teacher.synthdata import SynthConfig, generate_samples

sample = next(iter(generate_samples(SynthConfig(train_per_class=1, val_per_class=0,
                                                test_per_class=0)).values()))
rng = np.random.default_rng(0)

for _ in range(4):
    pair = make_view_pair(sample, 8, rng)
    diff = np.abs(pair.weak.frames - pair.strong.frames).mean()
    print(f"strategy={pair.temporal.strategy:10s} frames={pair.temporal.indices} "
          f"flip={pair.geom.hflip!s:5s} |weak-strong|={diff:.3f} box0={pair.annotations_t[0].box}")

# the weak view is just an index remap of the source
pair = make_view_pair(sample, 8, rng)
src = sample.clip.frames[list(pair.temporal.indices)]
if pair.geom.hflip:
    src = src[:, :, ::-1]
print("weak view equals remapped source:", np.array_equal(src, pair.weak.frames))
