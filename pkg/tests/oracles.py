"""Brute-force reference implementations used to check the metrics module.

These loop over samples, classes and pixels directly from the definitions
and share no code with ``terracover.metrics``.
"""

import math


def div0(a, b):
    return a / b if b else 0.0


def f1_from(p, r):
    return div0(2 * p * r, p + r)


def cardinality(truths):
    return sum(len(t) for t in truths) / len(truths)


def density(truths, num_labels):
    return sum(len(t) / num_labels for t in truths) / len(truths)


def match_breakdown(truths, preds):
    n = len(truths)
    exact = partial = wrong = 0
    for t, p in zip(truths, preds):
        if set(t) == set(p):
            exact += 1
        elif not set(t) & set(p):
            wrong += 1
        else:
            partial += 1
    return exact / n, partial / n, wrong / n


def class_counts(truths, preds, c):
    tp = fp = fn = 0
    for t, p in zip(truths, preds):
        if c in t and c in p:
            tp += 1
        elif c not in t and c in p:
            fp += 1
        elif c in t and c not in p:
            fn += 1
    return tp, fp, fn


def per_class(truths, preds, num_labels):
    out = []
    for c in range(num_labels):
        tp, fp, fn = class_counts(truths, preds, c)
        p, r = div0(tp, tp + fp), div0(tp, tp + fn)
        out.append((p, r, f1_from(p, r)))
    return out


def sample_f1(truths, preds):
    total = 0.0
    for t, p in zip(truths, preds):
        t, p = set(t), set(p)
        tp = len(t & p)
        prec, rec = div0(tp, len(p)), div0(tp, len(t))
        total += f1_from(prec, rec)
    return total / len(truths)


def micro_f1(truths, preds, num_labels):
    tp = fp = fn = 0
    for c in range(num_labels):
        a, b, d = class_counts(truths, preds, c)
        tp, fp, fn = tp + a, fp + b, fn + d
    p, r = div0(tp, tp + fp), div0(tp, tp + fn)
    return f1_from(p, r)


def macro_f1(truths, preds, num_labels):
    return sum(f for _, _, f in per_class(truths, preds, num_labels)) / num_labels


def pixel_accuracy(truth, pred, nodata=255):
    correct = total = 0
    for t, p in zip(truth.ravel().tolist(), pred.ravel().tolist()):
        if t == nodata or p == nodata:
            continue
        total += 1
        correct += t == p
    return correct / total


def iou(truth, pred, c, nodata=255):
    inter = union = 0
    for t, p in zip(truth.ravel().tolist(), pred.ravel().tolist()):
        if t == nodata or p == nodata:
            continue
        inter += t == c and p == c
        union += t == c or p == c
    return inter / union if union else None


def pearson(xs, ys):
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    vx = sum((x - mx) ** 2 for x in xs)
    vy = sum((y - my) ** 2 for y in ys)
    return cov / math.sqrt(vx * vy)
