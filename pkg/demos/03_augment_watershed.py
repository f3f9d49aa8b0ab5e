"""Expand a dataset sixfold with rotations, reflections and watershed outlines."""
import numpy as np

from pucare.augment import AugmentConfig, build_augmented_set, watershed_markers, watershed_segment, luminance
from pucare.data_io import SyntheticSpec, generate_synthetic

ds = generate_synthetic(SyntheticSpec(n=4, size=48, seed=5))
aug = build_augmented_set(ds, AugmentConfig(seed=5))
print(f"{len(ds)} originals -> {len(aug)} samples")
for s in aug.samples[:6]:
    print(f"  {s.id:28s} wound pixels {int(s.mask.sum()):4d}")

# the watershed step on its own: markers inside and outside the wound flood the gradient image
sample = ds[0]
res = watershed_segment(luminance(sample.image), watershed_markers(sample.mask), threshold=0.7)
print("watershed labels", np.unique(res.labels).tolist(), "boundary pixels", int(res.boundary.sum()))
