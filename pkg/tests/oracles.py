"""Independent brute-force reference implementations used by the tests."""
from fractions import Fraction
import math


def iou_box(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_mask(a, b):
    inter = union = 0
    for ra, rb in zip(a, b):
        for x, y in zip(ra, rb):
            inter += bool(x) and bool(y)
            union += bool(x) or bool(y)
    return inter / union if union else 0.0


def greedy(preds, gts, iou, thr):
    """preds: list of (score, region). Returns TP flag per prediction."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][0], i))
    used = set()
    flags = [False] * len(preds)
    for i in order:
        cands = [(iou(preds[i][1], g), -j) for j, g in enumerate(gts) if j not in used]
        if not cands:
            continue
        v, negj = max(cands)
        if v > thr:
            used.add(-negj)
            flags[i] = True
    return flags


def ap_from_flags(scores, flags, n_gt):
    """AP with one operating point per distinct score, exact rational arithmetic."""
    if n_gt == 0:
        return None
    points = []
    for t in sorted(set(scores), reverse=True):
        sel = [f for s, f in zip(scores, flags) if s >= t]
        points.append((Fraction(sum(sel), n_gt), Fraction(sum(sel), len(sel))))
    total, prev = Fraction(0), Fraction(0)
    for k, (r, _) in enumerate(points):
        best = max(p for _, p in points[k:])
        total += (r - prev) * best
        prev = r
    return float(total)


def dataset_ap(images, num_classes, iou, thr):
    """images: list of (preds, gts); preds = [(label, score, region)], gts = [(label, region)]."""
    out = {}
    for c in range(num_classes):
        scores, flags, n_gt = [], [], 0
        for preds, gts in images:
            p = [(s, r) for lab, s, r in preds if lab == c]
            g = [r for lab, r in gts if lab == c]
            n_gt += len(g)
            scores += [s for s, _ in p]
            flags += greedy(p, g, iou, thr)
        out[c] = ap_from_flags(scores, flags, n_gt)
    return out


def pixel_f1_counts(prob, gt, t):
    tp = fp = fn = 0
    for rp, rg in zip(prob, gt):
        for p, g in zip(rp, rg):
            pred = p > t
            tp += pred and g
            fp += pred and not g
            fn += (not pred) and g
    return tp, fp, fn


def f1(tp, fp, fn):
    d = 2 * tp + fp + fn
    return 2 * tp / d if d else 0.0


def iou_counts(tp, fp, fn):
    d = tp + fp + fn
    return tp / d if d else 0.0


def seg_metrics(maps, gts, thresholds):
    per = [[pixel_f1_counts(m, g, t) for t in thresholds] for m, g in zip(maps, gts)]
    aiu = sum(sum(iou_counts(*per[i][k]) for i in range(len(maps))) / len(maps)
              for k in range(len(thresholds))) / len(thresholds)
    ods = max(f1(*[sum(per[i][k][j] for i in range(len(maps))) for j in range(3)])
              for k in range(len(thresholds)))
    ois = sum(max(f1(*c) for c in row) for row in per) / len(maps)
    return aiu, ods, ois


def allocate(dets, mask, thr, with_index=False):
    """dets: list of (box, conf, area, label). Per-pixel first-claim assignment."""
    h, w = len(mask), len(mask[0])
    kept = [i for i, d in enumerate(dets) if d[1] >= thr]
    order = sorted(kept, key=lambda i: (-dets[i][1], -dets[i][2], i))
    owner = [[None] * w for _ in range(h)]
    for r in range(h):
        for c in range(w):
            if not mask[r][c]:
                continue
            for i in order:
                x1, y1, x2, y2 = dets[i][0]
                if x1 <= c + 0.5 < x2 and y1 <= r + 0.5 < y2:
                    owner[r][c] = i
                    break
    result = []
    for i in order:
        pix = {(r, c) for r in range(h) for c in range(w) if owner[r][c] == i}
        if pix:
            result.append((i, dets[i][3], pix) if with_index else (dets[i][3], pix))
    return result


def linear_cka_hsic(x, y):
    """CKA from the HSIC definition with explicit centering matrix (pure Python floats via math.fsum)."""
    n = len(x)
    k = [[math.fsum(a * b for a, b in zip(x[i], x[j])) for j in range(n)] for i in range(n)]
    l = [[math.fsum(a * b for a, b in zip(y[i], y[j])) for j in range(n)] for i in range(n)]

    def centre(m):
        rows = [math.fsum(r) / n for r in m]
        cols = [math.fsum(m[i][j] for i in range(n)) / n for j in range(n)]
        tot = math.fsum(rows) / n
        return [[m[i][j] - rows[i] - cols[j] + tot for j in range(n)] for i in range(n)]

    kc, lc = centre(k), centre(l)
    hsic = lambda a, b: math.fsum(a[i][j] * b[i][j] for i in range(n) for j in range(n))  # noqa: E731
    return hsic(kc, lc) / math.sqrt(hsic(kc, kc) * hsic(lc, lc))
