"""Slow, loop-based reference implementations used as test oracles.

Each oracle is written from the defining formula with explicit Python loops
and shares no code with the package beyond plain data containers.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def linear(x, w, b=None):
    n, cin = x.shape
    cout = w.shape[1]
    out = np.zeros((n, cout))
    for i in range(n):
        for o in range(cout):
            acc = 0.0 if b is None else b[o]
            for k in range(cin):
                acc += x[i, k] * w[k, o]
            out[i, o] = acc
    return out


def relu(x):
    return np.where(x > 0, x, 0.0)


def project(point, intrinsic, extrinsic, width, height):
    """[u, v, 1]^T = (1/z) S T [x, y, z, 1]^T, or None without correspondence."""
    x, y, z = (float(v) for v in point)
    hom = [x, y, z, 1.0]
    cam = [sum(extrinsic[r][k] * hom[k] for k in range(4)) for r in range(4)]
    img = [sum(intrinsic[r][k] * cam[k] for k in range(4)) for r in range(3)]
    depth = img[2]
    if depth <= 0:
        return None
    u, v = img[0] / depth, img[1] / depth
    if not (0 <= u < width and 0 <= v < height):
        return None
    return u, v


def bilinear(fmap, row, col):
    """Zero-padded bilinear lookup at one continuous (row, col); integers are pixel centres."""
    h, w, c = fmap.shape
    out = np.zeros(c)
    r0, c0 = math.floor(row), math.floor(col)
    for rr in (r0, r0 + 1):
        for cc in (c0, c0 + 1):
            wgt = (1 - abs(row - rr)) * (1 - abs(col - cc))
            if 0 <= rr < h and 0 <= cc < w:
                out += wgt * fmap[rr, cc]
    return out


def trilinear(points, occupied, features, voxel_size):
    """Renormalised trilinear interpolation over occupied voxel centres, via a dict."""
    table = {tuple(int(v) for v in cell): i for i, cell in enumerate(occupied)}
    out = np.zeros((len(points), features.shape[1]))
    for p, pt in enumerate(points):
        g = [pt[a] / voxel_size - 0.5 for a in range(3)]
        base = [math.floor(v) for v in g]
        acc = np.zeros(features.shape[1])
        total = 0.0
        for corner in itertools.product((0, 1), repeat=3):
            cell = tuple(base[a] + corner[a] for a in range(3))
            wgt = 1.0
            for a in range(3):
                f = g[a] - base[a]
                wgt *= f if corner[a] else 1.0 - f
            if cell in table and wgt > 0:
                acc += wgt * features[table[cell]]
                total += wgt
        if total > 0:
            out[p] = acc / total
    return out


def deformable_attention(query, image, pixels, scale, heads, samples, wo, bo, wa, ba, wv, wout):
    """Image-enhanced features: sum_m W_m [ sum_l A_{iml} (W'_m F^I(p_i + dp_{iml})) ]."""
    n = len(query)
    c_f = wout.shape[0]
    d = c_f // heads
    out = np.zeros((n, c_f))
    for i in range(n):
        if not np.all(np.isfinite(pixels[i])):
            continue
        q = query[i]
        off = (q @ wo + bo).reshape(heads, samples, 2)
        logit = (q @ wa + ba).reshape(heads, samples)
        for m in range(heads):
            e = [math.exp(v - max(logit[m])) for v in logit[m]]
            attn = [v / sum(e) for v in e]
            head = np.zeros(d)
            for l in range(samples):
                col = pixels[i, 0] * scale - 0.5 + off[m, l, 0]
                row = pixels[i, 1] * scale - 0.5 + off[m, l, 1]
                sampled = bilinear(image, row, col)
                head += attn[l] * (sampled @ wv[:, m * d : (m + 1) * d])
            out[i] += head @ wout[m * d : (m + 1) * d, :]
    return out


def lva(fv, fr, fp, gate, w1, b1, w2, b2, adapters):
    """Global aggregation then residual per-view adaptation, one point at a time."""
    outs = {"voxel": np.zeros_like(fv), "range": np.zeros_like(fr), "point": np.zeros_like(fp)}
    for i in range(len(fp)):
        multi = np.concatenate([fv[i], fr[i], fp[i]])
        mixed = multi @ gate
        hidden = relu(mixed @ w1 + b1)
        glob = relu(hidden @ w2 + b2)
        for view, f in (("voxel", fv), ("range", fr), ("point", fp)):
            wa, ba = adapters[view]
            outs[view][i] = f[i] + relu(glob @ wa + ba)
    return outs["voxel"], outs["range"], outs["point"]


def cross_entropy(logits, labels, weights, ignore_index):
    total, count = 0.0, 0
    for row, y in zip(logits, labels):
        if y == ignore_index:
            continue
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += weights[y] * (lse - row[y])
        count += 1
    return total / count


def set_iou(pred, gt):
    inter = sum(1 for p, g in zip(pred, gt) if p and g)
    union = sum(1 for p, g in zip(pred, gt) if p or g)
    return 1.0 if union == 0 else inter / union


def confusion_miou(pred, gt, num_classes, ignore_index):
    conf = [[0] * num_classes for _ in range(num_classes)]
    for p, g in zip(pred, gt):
        if g != ignore_index:
            conf[g][p] += 1
    ious = {}
    for c in range(num_classes):
        if c == ignore_index:
            continue
        tp = conf[c][c]
        fp = sum(conf[g][c] for g in range(num_classes)) - tp
        fn = sum(conf[c]) - tp
        if tp + fp + fn:
            ious[c] = tp / (tp + fp + fn)
    return ious, (math.fsum(ious.values()) / len(ious) if ious else float("nan"))


def _segments(sem, inst, cls, thing):
    segs = {}
    for i, (s, k) in enumerate(zip(sem, inst)):
        if s != cls or (thing and k == 0):
            continue
        segs.setdefault(k if thing else 0, set()).add(i)
    return list(segs.values())


def _best_matching(pred, gt):
    """Maximum-cardinality assignment of IoU>0.5 pairs by trying every permutation."""
    best = (0, 0.0)
    small, large, flip = (pred, gt, False) if len(pred) <= len(gt) else (gt, pred, True)
    for perm in itertools.permutations(range(len(large)), len(small)):
        matched = []
        for a, b in zip(range(len(small)), perm):
            p, g = (large[b], small[a]) if flip else (small[a], large[b])
            iou = len(p & g) / len(p | g)
            if iou > 0.5:
                matched.append(iou)
        # fsum is correctly rounded, so the total does not depend on summation order
        cand = (len(matched), math.fsum(matched))
        if cand > best:
            best = cand
    return best


def panoptic(pred_sem, pred_inst, gt_sem, gt_inst, num_classes, things, ignore_index):
    keep = [i for i, g in enumerate(gt_sem) if g != ignore_index]
    ps = [pred_sem[i] for i in keep]
    pi = [pred_inst[i] for i in keep]
    gs = [gt_sem[i] for i in keep]
    gi = [gt_inst[i] for i in keep]
    per = {}
    for c in range(num_classes):
        if c == ignore_index:
            continue
        thing = c in things
        p = _segments(ps, pi, c, thing)
        g = _segments(gs, gi, c, thing)
        tp, iou_sum = _best_matching(p, g)
        fp, fn = len(p) - tp, len(g) - tp
        if tp + fp + fn == 0:
            continue
        sq = iou_sum / tp if tp else 0.0
        rq = tp / (tp + 0.5 * fp + 0.5 * fn)
        per[c] = (sq * rq, sq, rq)
    ious, _ = confusion_miou(ps, gs, num_classes, ignore_index=-1)

    def mean(cs, k):
        return math.fsum(per[c][k] for c in cs) / len(cs) if cs else float("nan")

    cs = sorted(per)
    th = [c for c in cs if c in things]
    st = [c for c in cs if c not in things]
    dagger = [per[c][0] if c in things else ious.get(c, 0.0) for c in cs]
    return {
        "pq": mean(cs, 0), "sq": mean(cs, 1), "rq": mean(cs, 2),
        "pq_things": mean(th, 0), "pq_stuff": mean(st, 0),
        "pq_dagger": math.fsum(dagger) / len(dagger) if dagger else float("nan"),
    }


def gaussian_heatmap(cells, height, width, sigma):
    out = np.zeros((height, width))
    for r in range(height):
        for c in range(width):
            best = 0.0
            for cr, cc in cells:
                best = max(best, math.exp(-((r - cr) ** 2 + (c - cc) ** 2) / (2 * sigma * sigma)))
            out[r, c] = best
    return out
