"""Slow reference implementations used as test oracles."""

import numpy as np


def cooccurrence_oracle(records, index):
    n = index.n_leaves
    q = np.zeros((n, n), dtype=np.int64)
    for rec in records:
        for visit in rec.visits:
            codes = list(visit.codes)
            for a in codes:
                for b in codes:
                    q[index.leaf_position(a), index.leaf_position(b)] += 1
    return q


def aggregate_oracle(q_leaf, index, level):
    """Explicit four-loop sum over parents p, q and their leaves i, j."""
    n_l = index.size(level)
    anc = index.leaf_ancestor[level - 1]
    out = np.zeros((n_l, n_l), dtype=np.int64)
    for p in range(n_l):
        kids_p = [i for i in range(index.n_leaves) if anc[i] == p]
        for q in range(n_l):
            kids_q = [j for j in range(index.n_leaves) if anc[j] == q]
            for i in kids_p:
                for j in kids_q:
                    out[p, q] += q_leaf[i, j]
    return out


def probability_oracle(q):
    q = np.asarray(q, dtype=float)
    out = np.zeros_like(q)
    for p in range(q.shape[0]):
        total = sum(q[p])
        if total > 0:
            for j in range(q.shape[1]):
                out[p, j] = q[p, j] / total
    return out


def binarize_oracle(p, tau):
    n = p.shape[0]
    return np.array([[1 if (i == j or p[i, j] >= tau) else 0 for j in range(n)] for i in range(n)])


def softmax_oracle(values):
    m = max(values)
    e = [np.exp(v - m) for v in values]
    s = sum(e)
    return [x / s for x in e]


def average_precision_oracle(scores, labels):
    """Quadratic-time AP: for each distinct threshold, precision of everything scored at or above it."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = y.sum()
    total = 0.0
    prev_recall = 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        tp = fp = 0
        for k in range(len(s)):
            if s[k] >= t:
                if y[k]:
                    tp += 1
                else:
                    fp += 1
        recall = tp / n_pos
        total += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return total


def acc_at_k_oracle(scores, labels, k):
    out = []
    for s, y in zip(np.atleast_2d(scores), np.atleast_2d(labels)):
        ranked = sorted(range(len(s)), key=lambda i: (-s[i], i))[:k]
        hits = sum(1 for i in ranked if y[i])
        out.append(hits / min(k, int(sum(y))))
    return sum(out) / len(out)


def f1_oracle(scores, labels, threshold=0.5):
    tp = fp = fn = 0
    for s, y in zip(np.ravel(scores), np.ravel(labels)):
        pred = s >= threshold
        if pred and y:
            tp += 1
        elif pred:
            fp += 1
        elif y:
            fn += 1
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
