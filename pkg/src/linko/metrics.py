"""Evaluation metrics for multi-label next-visit prediction.

AUPRC and F1 are micro-averaged over all (sample, label) pairs. AUPRC uses
the average-precision step formulation: tied scores form one threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

TOP_K = (15, 20, 30)
BANDS = ("0-25%", "25-50%", "50-75%", "75-100%")


def acc_at_k(scores, targets, k: int) -> float:
    """Mean over samples of |top-k hits| / min(k, |y|); ties go to the lower label index."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets))
    if k < 1:
        raise ValueError("k must be >= 1")
    pos = targets.sum(axis=1)
    if np.any(pos < 1):
        raise ValueError("every sample needs at least one positive label")
    # stable sort on -score keeps lower indices first among ties
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    hits = np.take_along_axis(targets, order, axis=1).sum(axis=1)
    return float(np.mean(hits / np.minimum(k, pos)))


def average_precision(scores, targets) -> float:
    """Micro AUPRC: sum over distinct thresholds of (recall step) x precision."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(targets).ravel().astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positives")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # end of each tie group
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * precision))


def f1_micro(scores, targets, threshold: float = 0.5) -> float:
    pred = np.asarray(scores) >= threshold
    y = np.asarray(targets).astype(bool)
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def frequency_bands(train_targets, n_bands: int = 4) -> np.ndarray:
    """Band id per label from training frequency quantiles; band 0 holds the rarest labels."""
    freq = np.asarray(train_targets).sum(axis=0)
    order = np.lexsort((np.arange(len(freq)), freq))
    band = np.empty(len(freq), dtype=np.int64)
    for b, part in enumerate(np.array_split(order, n_bands)):
        band[part] = b
    return band


def stratified_auprc(scores, targets, bands) -> list[float]:
    """Micro AUPRC restricted to each band's labels (NaN for a band with no positives)."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    out = []
    for b in range(int(bands.max()) + 1):
        cols = bands == b
        y = targets[:, cols]
        out.append(average_precision(scores[:, cols], y) if y.any() else float("nan"))
    return out


def evaluate(scores, targets, bands) -> dict:
    metrics = {
        "auprc": average_precision(scores, targets),
        "f1": f1_micro(scores, targets),
    }
    for k in TOP_K:
        metrics[f"acc@{k}"] = acc_at_k(scores, targets, k)
    for name, value in zip(BANDS, stratified_auprc(scores, targets, bands)):
        metrics[f"auprc[{name}]"] = value
    return metrics


def confidence_interval(values, level: float = 0.95) -> float:
    """Half-width of the Student-t interval for the mean (0 for fewer than two values)."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(stats.t.ppf(0.5 + level / 2, len(v) - 1) * v.std(ddof=1) / np.sqrt(len(v)))


@dataclass
class MetricsReport:
    per_seed: dict = field(default_factory=dict)  # seed -> {metric: value}
    extras: dict = field(default_factory=dict)  # seed -> {name: value}, e.g. epochs_to_best

    METRIC_ORDER = ("auprc", "f1") + tuple(f"acc@{k}" for k in TOP_K) + tuple(f"auprc[{b}]" for b in BANDS)

    def add(self, seed: int, metrics: dict, **extras):
        self.per_seed[int(seed)] = dict(metrics)
        if extras:
            self.extras[int(seed)] = dict(extras)

    def summary(self) -> dict:
        out = {}
        for key in self.METRIC_ORDER:
            vals = [m[key] for m in self.per_seed.values() if key in m]
            clean = [v for v in vals if not math.isnan(v)]
            mean = float(np.mean(clean)) if clean else float("nan")
            out[key] = (mean, confidence_interval(clean))
        return out

    def to_text(self) -> str:
        """Structured text: ``key = value`` with ``+- ci`` for aggregated metrics."""
        lines = ["# metrics report", f"seeds = {','.join(str(s) for s in sorted(self.per_seed))}"]
        for key, (mean, ci) in self.summary().items():
            lines.append(f"{key} = {mean:.10f} +- {ci:.10f}")
        for seed in sorted(self.per_seed):
            for key in self.METRIC_ORDER:
                if key in self.per_seed[seed]:
                    lines.append(f"seed.{seed}.{key} = {float(self.per_seed[seed][key])!r}")  # exact round trip
            for key, value in sorted(self.extras.get(seed, {}).items()):
                lines.append(f"seed.{seed}.{key} = {value}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        rows = [f"{'metric':<16}{'mean':>10}{'95% CI':>10}"]
        for key, (mean, ci) in self.summary().items():
            rows.append(f"{key:<16}{100 * mean:>10.2f}{100 * ci:>10.2f}")
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        report = cls()
        for line in text.splitlines():
            if not line.startswith("seed.") or "=" not in line:
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            _, seed, name = key.split(".", 2)
            seed = int(seed)
            if name in cls.METRIC_ORDER:
                report.per_seed.setdefault(seed, {})[name] = float(value)
            else:
                report.extras.setdefault(seed, {})[name] = value
        return report
