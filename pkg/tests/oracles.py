"""Independent reference implementations used by the tests (plain Python, per frame)."""
import math


def iou_scalar(a, b):
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    x1, y1 = max(ax, bx), max(ay, by)
    x2, y2 = min(ax + aw, bx + bw), min(ay + ah, by + bh)
    inter = max(0.0, x2 - x1) * max(0.0, y2 - y1)
    union = aw * ah + bw * bh - inter
    return min(1.0, max(0.0, inter / union)) if union > 0 else 0.0


def iou_pixel_grid(a, b, scale=1):
    """IoU of integer boxes by counting covered unit cells (optionally on a finer grid)."""
    def cells(box):
        x, y, w, h = (int(round(v * scale)) for v in box)
        return {(i, j) for i in range(x, x + w) for j in range(y, y + h)}
    ca, cb = cells(a), cells(b)
    return len(ca & cb) / len(ca | cb)


def centers(box):
    x, y, w, h = (float(v) for v in box)
    return x + w / 2.0, y + h / 2.0


def recount_curves(pred, gt):
    """PR/NPR/SR curves on the 51-point grids by explicit per-frame loops."""
    n = len(gt)
    pr, npr, sr = [], [], []
    cerr, nerr, ious = [], [], []
    for p, g in zip(pred, gt):
        (pcx, pcy), (gcx, gcy) = centers(p), centers(g)
        cerr.append(math.hypot(pcx - gcx, pcy - gcy))
        nerr.append(math.hypot((pcx - gcx) / float(g[2]), (pcy - gcy) / float(g[3])))
        ious.append(iou_scalar(p, g))
    for i in range(51):
        pr.append(sum(1 for e in cerr if e <= i) / n)
        npr.append(sum(1 for e in nerr if e <= i / 100) / n)
        sr.append(sum(1 for o in ious if o > i / 50) / n)
    return pr, npr, sr
