"""Independent brute-force reference implementations used by the tests.

These stay deliberately naive (plain Python loops over the defining
formulas) so they share no code path with the package kernels they check.
"""

import numpy as np

UP_TAPS = (0.25, 0.75, 0.75, 0.25)


def naive_conv3x3(x, w, b):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    out = np.zeros((n, cout, h, wd), dtype=np.float64)
    for img in range(n):
        for o in range(cout):
            for y in range(h):
                for xx in range(wd):
                    acc = float(b[o])
                    for i in range(cin):
                        for dy in range(3):
                            for dx in range(3):
                                yy, xc = y + dy - 1, xx + dx - 1
                                if 0 <= yy < h and 0 <= xc < wd:
                                    acc += float(w[o, i, dy, dx]) * \
                                        float(x[img, i, yy, xc])
                    out[img, o, y, xx] = acc
    return out


def naive_maxpool(x, k):
    n, c, h, wd = x.shape
    oh, ow = h // k, wd // k
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for img in range(n):
        for ch in range(c):
            for y in range(oh):
                for xx in range(ow):
                    out[img, ch, y, xx] = x[img, ch, y * k:(y + 1) * k,
                                            xx * k:(xx + 1) * k].max()
    return out


def naive_upsample2x(x):
    """Transposed conv, 4x4 separable bilinear kernel, stride 2, pad 1."""
    n, c, h, wd = x.shape
    out = np.zeros((n, c, 2 * h, 2 * wd), dtype=np.float64)
    ker = np.outer(UP_TAPS, UP_TAPS)
    for img in range(n):
        for ch in range(c):
            for iy in range(h):
                for ix in range(wd):
                    v = float(x[img, ch, iy, ix])
                    for ky in range(4):
                        for kx in range(4):
                            oy = 2 * iy + ky - 1
                            ox = 2 * ix + kx - 1
                            if 0 <= oy < 2 * h and 0 <= ox < 2 * wd:
                                out[img, ch, oy, ox] += v * ker[ky, kx]
    return out


def naive_cbce(p, y, beta):
    total = 0.0
    for pj, yj in zip(np.asarray(p, np.float64).ravel(),
                      np.asarray(y).ravel()):
        if yj:
            total -= beta * np.log(pj)
        else:
            total -= (1.0 - beta) * np.log(1.0 - pj)
    return total


def naive_confusion(prob, gt, fov, t):
    tp = fp = tn = fn = 0
    for p, g, f in zip(np.asarray(prob).ravel(), np.asarray(gt).ravel(),
                       np.asarray(fov).ravel()):
        if not f:
            continue
        pred = p >= t
        if pred and g:
            tp += 1
        elif pred and not g:
            fp += 1
        elif not pred and g:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def pair_auc(scores_pos, scores_neg):
    """O(n^2) pair counting with half-weight ties."""
    wins = 0.0
    for sp in scores_pos:
        for sn in scores_neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(scores_pos) * len(scores_neg))


def sweep_threshold(prob, gt, fov):
    """Exhaustive Youden-J sweep over distinct scores; ties -> largest t."""
    scores = np.asarray(prob)[np.asarray(fov, bool)]
    labels = np.asarray(gt, bool)[np.asarray(fov, bool)]
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    best_t, best_j = None, -np.inf
    for t in np.unique(scores):
        pred = scores >= t
        se = (pred & labels).sum() / n_pos
        sp = (~pred & ~labels).sum() / n_neg
        j = se + sp - 1.0
        if j > best_j or (j == best_j and t > best_t):
            best_t, best_j = float(t), j
    return best_t, best_j
