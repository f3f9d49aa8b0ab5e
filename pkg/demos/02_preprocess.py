"""Resize an image/mask pair to the network input size.

Images use half-pixel bilinear sampling with a widened kernel when shrinking;
masks use nearest neighbour so they stay binary.
"""
import numpy as np

from pucare.data_io import SyntheticSpec, generate_synthetic
from pucare.preprocess import PreprocessConfig, preprocess_pair, resize_bilinear

sample = generate_synthetic(SyntheticSpec(n=1, size=96, seed=3))[0]
img, mask = preprocess_pair(sample.image, sample.mask, PreprocessConfig(target_size=32))
print("image", sample.image.shape, "->", img.shape, "range", (round(float(img.min()), 3), round(float(img.max()), 3)))
print("mask ", sample.mask.shape, "->", mask.shape, "values", np.unique(mask).tolist())

# without the widened kernel a checkerboard aliases instead of averaging out
board = np.indices((64, 64)).sum(0) % 2 * 1.0
for antialias in (True, False):
    small = resize_bilinear(board[..., None], 20, 20, antialias=antialias)
    print(f"checkerboard 64->20 antialias={antialias}: mean {small.mean():.3f}, spread {small.std():.3f}")
