"""Pixel metrics on hand-made masks, and why macro and micro averages differ."""
import numpy as np

from pucare.metrics import confusion_counts, evaluate_pair, macro_average, micro_average

truth = np.zeros((8, 8), np.uint8)
truth[2:6, 2:6] = 1
pred = np.zeros_like(truth)
pred[3:7, 3:7] = 1
m = evaluate_pair(pred, truth)
print(f"shifted square: acc {m.acc:.4f}  IoU {m.iou:.4f}  DSC {m.dsc:.4f}  (2*IoU/(1+IoU) = {2 * m.iou / (1 + m.iou):.4f})")

# a tiny wound found badly and a large one found well
small_t = np.zeros((8, 8), np.uint8); small_t[0, 0:2] = 1
small_p = np.zeros_like(small_t); small_p[0, 1:3] = 1
big_t = np.ones((8, 8), np.uint8); big_p = big_t.copy(); big_p[0] = 0
pairs = [(small_p, small_t), (big_p, big_t)]
macro = macro_average([evaluate_pair(p, t) for p, t in pairs])
micro = micro_average([confusion_counts(p, t) for p, t in pairs])
print(f"macro DSC {macro.dsc:.4f} (mean over images), micro DSC {micro.dsc:.4f} (pooled pixels)")
