"""Straight-line reference implementations used as test oracles.

Everything here is deliberately naive (explicit loops, float64, no
vectorized tricks from the library) so that agreement is meaningful.
"""
import math

import numpy as np


def naive_dft2(x):
    """O(N^2) 2D DFT of an H x W array, DC-centered."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for y in range(h):
                for z in range(w):
                    acc += x[y, z] * np.exp(-2j * np.pi * (u * y / h + v * z / w))
            out[u, v] = acc
    return np.roll(out, (h // 2, w // 2), axis=(0, 1))


def loop_conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    n, cin, h, wd = x.shape
    cout, cpg, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, ho, wo))
    opg = cout // groups
    for i in range(n):
        for o in range(cout):
            g = o // opg
            for y in range(ho):
                for z in range(wo):
                    s = 0.0
                    for c in range(cpg):
                        for dy in range(k):
                            for dz in range(k):
                                s += xp[i, g * cpg + c, y * stride + dy, z * stride + dz] * w[o, c, dy, dz]
                    out[i, o, y, z] = s + (0.0 if b is None else b[o])
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax_rows(s):
    out = np.zeros_like(s)
    for idx in np.ndindex(s.shape[:-1]):
        row = s[idx]
        e = np.exp(row - row.max())
        out[idx] = e / e.sum()
    return out


def hand_cross_attention(q, k, v, heads):
    """q, k, v: N x C x H x W already projected; channel tokens, per-head softmax."""
    n, c, h, w = q.shape
    ch, d = c // heads, h * w
    out = np.zeros((n, c, h * w))
    for i in range(n):
        for hd in range(heads):
            for a in range(ch):
                qa = q[i, hd * ch + a].reshape(-1)
                scores = np.array([qa @ k[i, hd * ch + b].reshape(-1) / math.sqrt(d) for b in range(ch)])
                p = np.exp(scores - scores.max())
                p /= p.sum()
                acc = np.zeros(d)
                for b in range(ch):
                    acc += p[b] * v[i, hd * ch + b].reshape(-1)
                out[i, hd * ch + a] = acc
    return out.reshape(n, c, h, w)


def hand_sfm(f_h, f_l, x_in, gate_w, gate_b, out_w, out_b):
    n, c, h, w = f_h.shape
    cat = np.concatenate([f_h, f_l], axis=1)
    u = np.zeros((n, 2, h, w))
    for i in range(n):
        for y in range(h):
            for z in range(w):
                col = cat[i, :, y, z]
                u[i, 0, y, z] = sum(col) / len(col)
                u[i, 1, y, z] = max(col)
    g = sigmoid(loop_conv2d(u, gate_w, gate_b, padding=gate_w.shape[-1] // 2))
    mixed = g[:, :1] * f_h + g[:, 1:2] * f_l
    fused = loop_conv2d(mixed, out_w, out_b)
    return fused * x_in


def ce_oracle(logits, labels):
    n, k, h, w = logits.shape
    total = 0.0
    for i in range(n):
        for y in range(h):
            for z in range(w):
                row = logits[i, :, y, z].astype(np.float64)
                m = row.max()
                lse = m + math.log(sum(math.exp(v - m) for v in row))
                total += lse - row[labels[i, y, z]]
    return total / (n * h * w)


def dice_oracle(logits, labels, smooth=1.0):
    n, k, h, w = logits.shape
    p = np.zeros(logits.shape)
    for i in range(n):
        for y in range(h):
            for z in range(w):
                row = logits[i, :, y, z].astype(np.float64)
                e = np.exp(row - row.max())
                p[i, :, y, z] = e / e.sum()
    score = 0.0
    for c in range(k):
        inter = sp = sy = 0.0
        for i in range(n):
            for y in range(h):
                for z in range(w):
                    t = 1.0 if labels[i, y, z] == c else 0.0
                    inter += p[i, c, y, z] * t
                    sp += p[i, c, y, z]
                    sy += t
        score += (2 * inter + smooth) / (sp + sy + smooth)
    return 1.0 - score / k


def confusion_oracle(pred, label, k, ignore=None):
    cm = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(np.ravel(pred), np.ravel(label)):
        if ignore is not None and t == ignore:
            continue
        cm[t, p] += 1
    return cm


def metrics_oracle(cm):
    """Per-class F1 and IoU plus OA from explicit TP/FP/FN counts."""
    k = cm.shape[0]
    f1, iou, present = [], [], []
    for c in range(k):
        tp = cm[c, c]
        fp = sum(cm[r, c] for r in range(k)) - tp
        fn = sum(cm[c, r] for r in range(k)) - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        iou.append(tp / (tp + fp + fn) if tp + fp + fn else 0.0)
        present.append(tp + fp + fn > 0)
    oa = sum(cm[c, c] for c in range(k)) / cm.sum()
    return np.array(f1), np.array(iou), np.array(present), oa


def adam_oracle(p, g, m, v, t, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """One decoupled-weight-decay Adam step on scalars/arrays, t is the new step index."""
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1 ** t)
    vh = v / (1 - b2 ** t)
    p = p - lr * (mh / (np.sqrt(vh) + eps) + wd * p)
    return p, m, v
