"""Repeat summaries, fairness reports and cross-run figure data (CSV/JSON)."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .errors import UndefinedMetricError

METRICS = ("auroc", "accuracy", "sensitivity", "specificity")

METRIC_COLUMNS = ("repeat", "class", "subgroup", "auroc", "accuracy", "sensitivity",
                  "specificity", "threshold", "n_speakers")
FAIRNESS_COLUMNS = ("repeat", "class", "minority", "majority", "ptd", "eod")
FLAT_COLUMNS = ("epsilon", "class", "subgroup", "metric", "mean", "sd", "ci_low", "ci_high")
ROC_COLUMNS = ("epsilon", "class", "fpr", "tpr", "threshold")
ACCURACY_COLUMNS = ("epsilon", "class", "subgroup", "accuracy_mean", "accuracy_sd")
PTD_COLUMNS = ("epsilon", "class", "minority", "majority", "ptd_mean", "ptd_sd")
EOD_COLUMNS = ("epsilon", "class", "minority", "majority", "eod_mean", "eod_sd")
CORRELATION_COLUMNS = ("class", "minority", "majority", "metric", "n_points", "pearson_r")
WILCOXON_COLUMNS = ("epsilon", "class", "subgroup", "metric", "n_pairs", "w", "p_value")


def fmt(v):
    """Stable text form of a CSV cell; floats use repr, missing values are empty."""
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return ""
        return "inf" if v == math.inf else repr(v)
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            cells = [r[c] for c in columns] if isinstance(r, dict) else r
            w.writerow([fmt(v) for v in cells])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dump_json(path, obj):
    Path(path).write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- one evaluation run -------------------------------------------------------------

def build_fairness_report(metric_rows, fairness_rows, top1, classes, epsilon):
    """Summarise per-repeat rows (each carrying a ``repeat`` key) into a FairnessReport."""
    repeats = sorted({r["repeat"] for r in metric_rows})
    report = ev.FairnessReport(list(classes), len(repeats), epsilon)
    report.overall["top1_accuracy"] = ev.summary_dict(top1)
    cells = {}
    for r in metric_rows:
        cells.setdefault((r["class"], r["subgroup"]), []).append(r)
    for (cname, group), rs in cells.items():
        summ = {m: ev.summary_dict([x[m] for x in rs]) for m in METRICS}
        summ["n_speakers"] = rs[0]["n_speakers"]
        if cname == "mean":
            report.subgroups[group] = summ
        else:
            report.per_class.setdefault(cname, {})[group] = summ
    if "all" in report.subgroups:
        report.overall.update(report.subgroups["all"])
    pairs = {}
    for r in fairness_rows:
        pairs.setdefault((r["class"], r["minority"], r["majority"]), []).append(r)
    for (cname, a, b), rs in pairs.items():
        report.fairness.append({"class": cname, "minority": a, "majority": b,
                                "ptd": ev.summary_dict([x["ptd"] for x in rs]),
                                "eod": ev.summary_dict([x["eod"] for x in rs])})
    return report


def flat_rows(report: ev.FairnessReport):
    eps = report.epsilon
    rows = []

    def add(cname, group, metric, s):
        rows.append({"epsilon": eps, "class": cname, "subgroup": group, "metric": metric,
                     "mean": s["mean"], "sd": s["sd"], "ci_low": s["ci95"][0], "ci_high": s["ci95"][1]})

    for cname, groups in report.per_class.items():
        for group, summ in groups.items():
            for m in METRICS:
                add(cname, group, m, summ[m])
    for group, summ in report.subgroups.items():
        for m in METRICS:
            add("mean", group, m, summ[m])
    for f in report.fairness:
        for m in ("ptd", "eod"):
            add(f["class"], f"{f['minority']}-vs-{f['majority']}", m, f[m])
    return rows


def report_to_dict(report):
    return asdict(report)


# -- across runs ------------------------------------------------------------------------

def _eps_key(eps):
    return math.inf if eps is None else float(eps)


def correlation_rows(series):
    """Pearson r of a fairness metric against epsilon.

    ``series`` maps (class, minority, majority, metric) to a list of
    (epsilon, value) points from DP runs.  With fewer than two points, or a
    constant series, the coefficient is reported as "undefined".
    """
    rows = []
    for (cname, a, b, metric), pts in sorted(series.items()):
        pts = [(e, v) for e, v in pts if v is not None and not math.isnan(v)]
        try:
            r = ev.pearson_r([p[0] for p in pts], [p[1] for p in pts])
            cell = repr(r)
        except UndefinedMetricError:
            cell = "undefined"
        rows.append({"class": cname, "minority": a, "majority": b, "metric": metric,
                     "n_points": len(pts), "pearson_r": cell})
    return rows


def wilcoxon_rows(baseline, others):
    """Paired signed-rank tests of per-repeat accuracy: each DP run against the baseline.

    ``baseline`` and every entry of ``others`` are (epsilon, metric rows).
    Repeats are paired by repeat id.
    """
    base = {(r["class"], r["subgroup"], r["repeat"]): r for r in baseline[1]}
    rows = []
    for eps, metric_rows in others:
        cells = {}
        for r in metric_rows:
            key = (r["class"], r["subgroup"], r["repeat"])
            if key in base:
                cells.setdefault((r["class"], r["subgroup"]), []).append(
                    (r["accuracy"], base[key]["accuracy"]))
        for (cname, group), pairs in cells.items():
            pairs = [p for p in pairs if not (math.isnan(p[0]) or math.isnan(p[1]))]
            try:
                w, p = ev.wilcoxon_signed_rank(pairs)
                w_cell, p_cell = repr(w), repr(p)
            except UndefinedMetricError:
                w_cell = p_cell = "undefined"
            rows.append({"epsilon": eps, "class": cname, "subgroup": group, "metric": "accuracy",
                         "n_pairs": len(pairs), "w": w_cell, "p_value": p_cell})
    return rows


def parse_metric_rows(rows):
    out = []
    for r in rows:
        d = {"repeat": int(r["repeat"]), "class": r["class"], "subgroup": r["subgroup"],
             "n_speakers": int(r["n_speakers"])}
        for m in METRICS + ("threshold",):
            d[m] = float(r[m]) if r[m] not in ("",) else math.nan
        out.append(d)
    return out


def build_run_report(eval_dirs, out_dir):
    """Figure-data CSVs from a set of evaluation directories."""
    runs = []
    for d in eval_dirs:
        d = Path(d)
        rep = json.loads((d / "report.json").read_text(encoding="utf-8"))
        runs.append({"dir": d, "report": rep, "epsilon": rep["epsilon"],
                     "metrics": parse_metric_rows(read_csv(d / "metrics.csv")),
                     "scores": read_csv(d / "scores.csv")})
    runs.sort(key=lambda r: _eps_key(r["epsilon"]))
    out_dir = Path(out_dir)

    roc, acc, ptd, eod = [], [], [], []
    series = {}
    for run in runs:
        eps = _eps_key(run["epsilon"])
        rep = run["report"]
        classes = rep["classes"]
        first = [s for s in run["scores"] if s["repeat"] == "0"]
        labels = np.array([int(s["true_class"]) for s in first])
        for k, cname in enumerate(classes):
            try:
                fpr, tpr, cuts = ev.roc_points([float(s[f"score_{cname}"]) for s in first], labels == k)
            except UndefinedMetricError:
                continue
            roc += [{"epsilon": eps, "class": cname, "fpr": a, "tpr": b, "threshold": c}
                    for a, b, c in zip(fpr, tpr, cuts)]
        for cname, groups in rep["per_class"].items():
            for group, summ in groups.items():
                acc.append({"epsilon": eps, "class": cname, "subgroup": group,
                            "accuracy_mean": summ["accuracy"]["mean"], "accuracy_sd": summ["accuracy"]["sd"]})
        for group, summ in rep["subgroups"].items():
            acc.append({"epsilon": eps, "class": "mean", "subgroup": group,
                        "accuracy_mean": summ["accuracy"]["mean"], "accuracy_sd": summ["accuracy"]["sd"]})
        for f in rep["fairness"]:
            base = {"epsilon": eps, "class": f["class"], "minority": f["minority"], "majority": f["majority"]}
            ptd.append({**base, "ptd_mean": f["ptd"]["mean"], "ptd_sd": f["ptd"]["sd"]})
            eod.append({**base, "eod_mean": f["eod"]["mean"], "eod_sd": f["eod"]["sd"]})
            if run["epsilon"] is not None:
                for m in ("ptd", "eod"):
                    v = f[m]["mean"]
                    series.setdefault((f["class"], f["minority"], f["majority"], m), []).append(
                        (eps, math.nan if v is None else v))

    write_csv(out_dir / "roc_points.csv", ROC_COLUMNS, roc)
    write_csv(out_dir / "accuracy_vs_eps.csv", ACCURACY_COLUMNS, acc)
    write_csv(out_dir / "ptd_vs_eps.csv", PTD_COLUMNS, ptd)
    write_csv(out_dir / "eod_vs_eps.csv", EOD_COLUMNS, eod)
    write_csv(out_dir / "correlation.csv", CORRELATION_COLUMNS, correlation_rows(series))
    baseline = [r for r in runs if r["epsilon"] is None]
    dp_runs = [(_eps_key(r["epsilon"]), r["metrics"]) for r in runs if r["epsilon"] is not None]
    wil = wilcoxon_rows((math.inf, baseline[0]["metrics"]), dp_runs) if baseline else []
    write_csv(out_dir / "wilcoxon.csv", WILCOXON_COLUMNS, wil)
    return sorted(p.name for p in out_dir.glob("*.csv"))
