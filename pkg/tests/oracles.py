"""Slow, independent reference implementations used as test oracles."""
import numpy as np
from scipy import ndimage


def naive_resize(img, out_h, out_w, antialias=True):
    """Per-pixel reference written from the coordinate formula.

    Upscaling (or antialias off): classic clamped bilinear between the two
    neighbouring source pixels. Downscaling with antialias: every source
    pixel weighted by a triangle of half-width ``scale`` around the mapped
    centre, normalised to sum 1.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return naive_resize(img[..., None], out_h, out_w, antialias)[..., 0]
    h, w, c = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    sy, sx = h / out_h, w / out_w
    out = np.zeros((out_h, out_w, c))

    def axis_weights(center, n, scale):
        if antialias and scale > 1:
            wts = [max(0.0, 1 - abs(t - center) / scale) for t in range(n)]
            if sum(wts) == 0:
                wts = [0.0] * n
                wts[min(max(int(round(center)), 0), n - 1)] = 1.0
            return [v / sum(wts) for v in wts]
        q = min(max(center, 0.0), n - 1.0)
        lo = min(int(np.floor(q)), n - 1)
        hi = min(lo + 1, n - 1)
        frac = q - lo
        wts = [0.0] * n
        wts[lo] += 1 - frac
        wts[hi] += frac
        return wts

    for i in range(out_h):
        wy = axis_weights((i + 0.5) * sy - 0.5, h, sy)
        for j in range(out_w):
            wx = axis_weights((j + 0.5) * sx - 0.5, w, sx)
            acc = np.zeros(c)
            for r in range(h):
                if wy[r] == 0:
                    continue
                for q in range(w):
                    if wx[q]:
                        acc += wy[r] * wx[q] * img[r, q]
            out[i, j] = acc
    return out


def pixel_counts(pred, truth):
    """(tp, tn, fp, fn) by visiting every pixel."""
    tp = tn = fp = fn = 0
    for p, t in zip(np.asarray(pred).ravel().tolist(), np.asarray(truth).ravel().tolist()):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def pixel_metrics(pred, truth):
    tp, tn, fp, fn = pixel_counts(pred, truth)
    acc = (tp + tn) / (tp + tn + fp + fn)
    iou = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    dsc = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return acc, iou, dsc


def central_gradient_magnitude(gray):
    """Central differences inside, one-sided at the borders."""
    g = np.asarray(gray, dtype=np.float64)
    h, w = g.shape

    def diff(get, n, i):
        if n == 1:
            return 0.0
        if i == 0:
            return get(1) - get(0)
        if i == n - 1:
            return get(n - 1) - get(n - 2)
        return (get(i + 1) - get(i - 1)) / 2

    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            dy = diff(lambda k: g[k, c], h, r)
            dx = diff(lambda k: g[r, k], w, c)
            out[r, c] = np.hypot(dy, dx)
    return out


NEIGHBOURS = ((-1, 0), (0, -1), (0, 1), (1, 0))


def flood_oracle(gray, markers, threshold):
    """Exhaustive priority flood: every step rescans the whole image.

    A pixel becomes a candidate when one of its 4-neighbours is labelled;
    candidates are stamped in order of discovery (markers in row-major order,
    then each newly labelled pixel's neighbours up/left/right/down). The
    candidate with the smallest (ridge tier, gradient, stamp) is taken next.
    If its labelled neighbours disagree it becomes boundary; otherwise it
    takes their label. Anything never reached is boundary.
    """
    level = central_gradient_magnitude(gray)
    top = level.max()
    tier = (level > threshold * top).astype(int) if top > 0 else np.zeros(level.shape, int)
    h, w = level.shape
    labels = np.array(markers, dtype=np.int64)
    done = labels != 0
    boundary = np.zeros((h, w), bool)
    stamp = np.full((h, w), -1)
    clock = [0]

    def discover(r, c):
        for dr, dc in NEIGHBOURS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and not done[rr, cc] and stamp[rr, cc] < 0:
                stamp[rr, cc] = clock[0]
                clock[0] += 1

    for r in range(h):
        for c in range(w):
            if labels[r, c]:
                discover(r, c)
    while True:
        best = None
        for r in range(h):
            for c in range(w):
                if done[r, c] or stamp[r, c] < 0:
                    continue
                key = (tier[r, c], level[r, c], stamp[r, c])
                if best is None or key < best[0]:
                    best = (key, r, c)
        if best is None:
            break
        _, r, c = best
        done[r, c] = True
        seen = {int(labels[r + dr, c + dc]) for dr, dc in NEIGHBOURS if 0 <= r + dr < h and 0 <= c + dc < w and labels[r + dr, c + dc]}
        if len(seen) > 1:
            boundary[r, c] = True
            continue
        labels[r, c] = seen.pop()
        discover(r, c)
    boundary |= labels == 0
    return labels, boundary


def random_instance(rng, size=None):
    h = size or int(rng.integers(4, 33))
    w = size or int(rng.integers(4, 33))
    kind = rng.integers(3)
    if kind == 0:
        gray = rng.random((h, w))
    elif kind == 1:  # few grey levels: lots of exact ties
        gray = rng.integers(0, 4, (h, w)) / 3.0
    else:
        gray = ndimage.gaussian_filter(rng.random((h, w)), 1.5)
    markers = np.zeros((h, w), np.int64)
    n_labels = int(rng.integers(2, 5))
    for label in range(1, n_labels + 1):
        for _ in range(int(rng.integers(1, 4))):
            markers[rng.integers(h), rng.integers(w)] = label
    if np.unique(markers[markers > 0]).size < 2:
        markers[0, 0], markers[-1, -1] = 1, 2
    return gray, markers, float(rng.uniform(0.3, 0.9))
