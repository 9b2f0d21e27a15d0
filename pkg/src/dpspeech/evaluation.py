"""Diagnostic performance and fairness metrics over repeated evaluations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import UndefinedMetricError

EXACT_WILCOXON_MAX_N = 25


@dataclass
class PredictionSet:
    speaker_ids: list
    scores: np.ndarray  # (n_speakers, n_classes), sigmoid outputs
    labels: np.ndarray  # (n_speakers,) true class index
    tags: dict  # axis name -> list of subgroup tags, e.g. {"sex": [...], "age_band": [...]}
    repeat_id: int = 0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.ndim != 2 or self.scores.shape[0] != len(self.labels):
            raise ValueError("scores must be (n_speakers, n_classes) aligned with labels")
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ValueError("scores must lie in [0, 1]")
        for axis, vals in self.tags.items():
            if len(vals) != len(self.labels):
                raise ValueError(f"tag axis {axis!r} has the wrong length")


@dataclass
class SubgroupMetrics:
    auroc: float
    accuracy: float
    sensitivity: float
    specificity: float
    threshold: float
    n_speakers: int


@dataclass
class FairnessReport:
    classes: list
    repeats: int
    epsilon: float | None
    overall: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)
    subgroups: dict = field(default_factory=dict)
    fairness: list = field(default_factory=list)
    wilcoxon: list = field(default_factory=list)


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("need at least one positive and one negative")
    return scores, labels, pos, neg


def auroc(scores, labels):
    """P(random positive outscores random negative), ties counted 1/2."""
    scores, labels, pos, neg = _split(scores, labels)
    ranks = stats.rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def roc_points(scores, labels):
    """(fpr, tpr, thresholds) at every candidate cut, from +inf downwards."""
    scores, labels, pos, neg = _split(scores, labels)
    cuts = candidate_thresholds(scores)[::-1]
    tpr = np.array([(pos >= t).mean() for t in cuts])
    fpr = np.array([(neg >= t).mean() for t in cuts])
    return fpr, tpr, cuts


def candidate_thresholds(scores):
    """-inf, midpoints between sorted distinct scores, +inf (ascending)."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def youden_index(scores, labels, threshold):
    scores, labels, pos, neg = _split(scores, labels)
    return float((pos >= threshold).mean() - (neg >= threshold).mean())


def youden_threshold(scores, labels):
    """Cut maximising TPR - FPR (predict positive when score >= cut).

    Ties go to the larger cut, i.e. towards higher specificity.
    """
    scores, labels, pos, neg = _split(scores, labels)
    best_t, best_j = None, -np.inf
    for t in candidate_thresholds(scores):
        j = (pos >= t).mean() - (neg >= t).mean()
        if j >= best_j:
            best_t, best_j = t, j
    return float(best_t)


def confusion_metrics(scores, labels, threshold):
    """accuracy, sensitivity, specificity at ``score >= threshold``.

    Sensitivity (specificity) is NaN when no positives (negatives) are present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pred = scores >= threshold
    tp = int(np.sum(pred & labels))
    tn = int(np.sum(~pred & ~labels))
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    return {
        "accuracy": (tp + tn) / labels.size if labels.size else math.nan,
        "sensitivity": tp / n_pos if n_pos else math.nan,
        "specificity": tn / n_neg if n_neg else math.nan,
    }


def statistical_parity_difference(correct_rate_minority, correct_rate_majority):
    """PtD: correct-prediction rate of the minority minus that of the majority."""
    return correct_rate_minority - correct_rate_majority


def equal_opportunity_difference(tpr_minority, tpr_majority):
    return tpr_minority - tpr_majority


def pearson_r(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise UndefinedMetricError("pearson_r needs two equal-length series of at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("pearson_r is undefined for a constant series")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def _signed_ranks(pairs):
    d = np.array([float(a) - float(b) for a, b in pairs])
    d = d[d != 0]
    if d.size < 5:
        raise UndefinedMetricError(f"need >= 5 non-zero differences, got {d.size}")
    return d, stats.rankdata(np.abs(d))


def wilcoxon_signed_rank(pairs):
    """Two-sided signed-rank test on (a, b) pairs; W = sum of ranks of positive a - b.

    Exact null distribution (ties allowed, average ranks) for n <= 25,
    normal approximation with continuity and tie correction above.
    """
    d, ranks = _signed_ranks(pairs)
    n = d.size
    w = float(ranks[d > 0].sum())
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        total = int(doubled.sum())
        counts = np.zeros(total + 1, dtype=object)
        counts[0] = 1
        for r in doubled:
            counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
        w2 = int(round(2 * w))
        lower = sum(counts[: w2 + 1])
        upper = sum(counts[w2:])
        p = min(1.0, 2 * min(lower, upper) / 2 ** n)
        return w, float(p)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    diff = w - mean
    z = (abs(diff) - 0.5) / math.sqrt(var) if abs(diff) >= 0.5 else 0.0
    return w, float(min(1.0, 2.0 * stats.norm.sf(z)))


def repeat_summary(values):
    """(mean, sample sd, (2.5th, 97.5th) percentile) over repeats."""
    v = np.asarray([x for x in values], dtype=np.float64)
    if v.size < 2:
        raise UndefinedMetricError("repeat_summary needs at least two values")
    lo, hi = np.percentile(v, [2.5, 97.5])
    return float(v.mean()), float(v.std(ddof=1)), (float(lo), float(hi))


def summary_dict(values):
    vals = [x for x in values if not (isinstance(x, float) and math.isnan(x))]
    try:
        mean, sd, (lo, hi) = repeat_summary(vals)
    except UndefinedMetricError:
        return {"mean": None, "sd": None, "ci95": [None, None], "n": len(vals)}
    return {"mean": mean, "sd": sd, "ci95": [lo, hi], "n": len(vals)}


def speaker_split(speakers, train_frac=0.7, seed=0):
    """Speaker-level stratified split -> (train ids, test ids), both sorted.

    ``speakers`` is a sequence of (speaker_id, class) pairs.  The overall
    train count is round(train_frac * n); it is shared among classes by
    largest remainder, so every class is within one speaker of train_frac.
    """
    speakers = list(speakers)
    if not speakers:
        raise ValueError("cannot split an empty cohort")
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must lie in (0, 1)")
    by_class = {}
    for sid, cls in sorted(speakers, key=lambda s: str(s[0])):
        by_class.setdefault(cls, []).append(sid)
    classes = sorted(by_class, key=str)
    n_train = int(math.floor(train_frac * len(speakers) + 0.5))
    raw = np.array([train_frac * len(by_class[c]) for c in classes])
    take = np.floor(raw).astype(int)
    rem = raw - take
    for i in sorted(range(len(classes)), key=lambda i: (-rem[i], i))[: max(0, n_train - take.sum())]:
        take[i] += 1
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c, k in zip(classes, take):
        ids = by_class[c]
        perm = rng.permutation(len(ids))
        train += [ids[i] for i in perm[:k]]
        test += [ids[i] for i in perm[k:]]
    return sorted(train), sorted(test)


# -- per-repeat tables ----------------------------------------------------------

def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return math.nan


def repeat_metrics(pred: PredictionSet, class_names, subgroup_axes=("sex", "age_band")):
    """Metric rows for one repeat: per class x subgroup (plus 'all' and the class mean).

    One-vs-rest per class; the Youden cut is chosen on all test speakers
    and reused for every subgroup.  Row dicts carry: class, subgroup, auroc,
    accuracy, sensitivity, specificity, threshold, n_speakers.
    """
    rows = []
    groups = {"all": np.ones(len(pred.labels), dtype=bool)}
    for axis in subgroup_axes:
        tags = np.asarray(pred.tags[axis])
        for tag in sorted(set(tags.tolist())):
            groups[tag] = tags == tag
    per_group_rows = {g: [] for g in groups}
    for k, cname in enumerate(class_names):
        y = pred.labels == k
        s = pred.scores[:, k]
        thr = _safe(youden_threshold, s, y)
        for g, mask in groups.items():
            conf = confusion_metrics(s[mask], y[mask], thr) if not math.isnan(thr) else \
                {"accuracy": math.nan, "sensitivity": math.nan, "specificity": math.nan}
            row = {"class": cname, "subgroup": g, "auroc": _safe(auroc, s[mask], y[mask]),
                   **conf, "threshold": thr, "n_speakers": int(mask.sum())}
            rows.append(row)
            per_group_rows[g].append(row)
    for g, grows in per_group_rows.items():
        mean_row = {"class": "mean", "subgroup": g, "threshold": math.nan,
                    "n_speakers": int(groups[g].sum())}
        for m in ("auroc", "accuracy", "sensitivity", "specificity"):
            vals = [r[m] for r in grows]
            mean_row[m] = float(np.mean(vals)) if not any(math.isnan(v) for v in vals) else math.nan
        rows.append(mean_row)
    top1 = float(np.mean(pred.scores.argmax(axis=1) == pred.labels))
    return rows, top1


def fairness_rows(rows, pairs):
    """PtD/EOD per class for each (minority, majority) pair from one repeat's rows."""
    idx = {(r["class"], r["subgroup"]): r for r in rows}
    out = []
    classes = []
    for r in rows:
        if r["class"] not in classes:
            classes.append(r["class"])
    for cname in classes:
        for a, b in pairs:
            ra, rb = idx.get((cname, a)), idx.get((cname, b))
            if ra is None or rb is None:
                continue
            out.append({
                "class": cname, "minority": a, "majority": b,
                "ptd": statistical_parity_difference(ra["accuracy"], rb["accuracy"]),
                "eod": equal_opportunity_difference(ra["sensitivity"], rb["sensitivity"]),
            })
    return out
