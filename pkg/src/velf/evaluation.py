"""Ranking and calibration metrics, and the per-split evaluation harness.

AUC is the rank-sum estimator: average ranks over the pooled scores with
ties sharing their mean rank, O(n log n).  It is exactly invariant under
any strictly monotone transform of the scores, because only the induced
ordering and tie pattern enter.  RelaImpr rescales AUC lift over the
0.5 random baseline.
"""

import json

import numpy as np

# reporting order for the test views; "all" comes last
REPORT_ORDER = ("test_new_user", "test_new_item", "test_infreq_user",
                "test_infreq_item", "test_all")
REPORT_LABELS = {
    "test_new_user": "New user",
    "test_new_item": "New item",
    "test_infreq_user": "Infreq user",
    "test_infreq_item": "Infreq item",
    "test_all": "All",
}


class UndefinedAucError(ValueError):
    def __init__(self, n_pos: int, n_neg: int):
        self.n_pos = int(n_pos)
        self.n_neg = int(n_neg)
        super().__init__(
            f"auc undefined: {n_pos} positives, {n_neg} negatives")


def _check_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or np.any((labels != 0) & (labels != 1)):
        raise ValueError("labels must be a 1-d 0/1 array")
    return labels


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties
    counting half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_labels(labels)
    if scores.shape != labels.shape:
        raise ValueError(
            f"scores {scores.shape} and labels {labels.shape} differ")
    n = scores.size
    n_pos = int(labels.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError(n_pos, n_neg)
    # average rank per distinct score: a run of k equal values starting
    # at sorted position s has mean rank s + (k + 1) / 2, 1-based
    _, inverse, counts = np.unique(scores, return_inverse=True,
                                   return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    mean_ranks = starts + (counts + 1) / 2.0
    rank_sum = mean_ranks[inverse][labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def rela_impr(auc_measured: float, auc_base: float) -> float:
    """Percent improvement of AUC lift over the random baseline."""
    if auc_base == 0.5:
        raise ValueError("rela_impr: baseline AUC of exactly 0.5 has no lift")
    return ((auc_measured - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


def log_loss(scores, labels) -> float:
    """Mean negative log-likelihood; scores must already be clamped
    inside (0, 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_labels(labels)
    if scores.shape != labels.shape:
        raise ValueError(
            f"scores {scores.shape} and labels {labels.shape} differ")
    if scores.size == 0:
        raise ValueError("log_loss: empty input")
    if np.any(scores <= 0.0) or np.any(scores >= 1.0):
        raise ValueError("log_loss: scores must lie strictly inside (0, 1)")
    return float(-np.mean(labels * np.log(scores)
                          + (1 - labels) * np.log1p(-scores)))


def evaluate_splits(model, splits, include_train: bool = False) -> dict:
    """Score every test view with the model's deterministic inference
    path and compute metrics per split.

    A split where a metric is undefined (single-class, empty) gets an
    ``error`` entry instead of silently dropping out; other splits are
    unaffected.
    """
    names = (("train",) if include_train else ()) + REPORT_ORDER
    out = {}
    for name, insts in splits.items():
        if name not in names:
            continue
        row = {"count": len(insts), "auc": None, "log_loss": None,
               "error": None}
        if len(insts) == 0:
            row["error"] = "empty split"
        else:
            scores = model.score(insts)
            try:
                row["auc"] = auc(scores, insts.labels)
            except UndefinedAucError as e:
                row["error"] = str(e)
            row["log_loss"] = log_loss(scores, insts.labels)
        out[name] = row
    return {"splits": out}


def attach_rela_impr(report: dict, base_report: dict) -> dict:
    """Add per-split RelaImpr of ``report`` over ``base_report`` in place."""
    for name, row in report["splits"].items():
        base_row = base_report["splits"].get(name)
        if (row.get("auc") is not None and base_row
                and base_row.get("auc") is not None
                and base_row["auc"] != 0.5):
            row["rela_impr"] = rela_impr(row["auc"], base_row["auc"])
    return report


def report_lines(report: dict) -> list[str]:
    """Report as JSONL lines, one canonical-ordered object per split."""
    lines = []
    for name in REPORT_ORDER:
        if name not in report["splits"]:
            continue
        row = report["splits"][name]
        obj = {"split": name, "count": row["count"], "auc": row["auc"],
               "log_loss": row["log_loss"]}
        if row.get("rela_impr") is not None:
            obj["rela_impr"] = row["rela_impr"]
        if row.get("error"):
            obj["error"] = row["error"]
        lines.append(json.dumps(obj, sort_keys=True))
    return lines


def _fmt(v, width: int) -> str:
    if v is None:
        return "-".rjust(width)
    return f"{v:.4f}".rjust(width)


def render_table(rows: list[tuple[str, dict]], metric: str = "auc") -> str:
    """Fixed-width AUC table, one line per model, columns in report
    order."""
    width = 12
    label_w = max([len(lbl) for lbl, _ in rows] + [len("model")])
    header = "model".ljust(label_w) + "".join(
        REPORT_LABELS[n].rjust(width) for n in REPORT_ORDER)
    lines = [header, "-" * len(header)]
    for label, report in rows:
        cells = []
        for name in REPORT_ORDER:
            row = report["splits"].get(name)
            cells.append(_fmt(row.get(metric) if row else None, width))
        lines.append(label.ljust(label_w) + "".join(cells))
    return "\n".join(lines)
