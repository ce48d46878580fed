"""Test-time protocol and metric suite.

Cluster the test features into C groups, find the cluster-to-class bijection
maximizing label agreement, and with that assignment fixed report accuracy
over known classes (Old), novel classes (New) and everything (All), plus
Many/Median/Few group accuracies (classes grouped by training-set count) and
the standard deviation across the three groups as a balancedness measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimate import hungarian, kmeans


@dataclass
class EvalReport:
    acc_all: float
    acc_old: float
    acc_new: float
    known_groups: dict
    novel_groups: dict
    std_known: float
    std_novel: float
    per_class_acc: list
    assignment: list
    n_test: int
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not np.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v

        return clean({
            "acc_all": self.acc_all,
            "acc_old": self.acc_old,
            "acc_new": self.acc_new,
            "known": {**self.known_groups, "std": self.std_known},
            "novel": {**self.novel_groups, "std": self.std_novel},
            "per_class_acc": self.per_class_acc,
            "assignment": self.assignment,
            "n_test": self.n_test,
            "warnings": self.warnings,
        })

    CSV_COLUMNS = (
        "acc_all", "acc_old", "acc_new",
        "known_many", "known_median", "known_few", "std_known",
        "novel_many", "novel_median", "novel_few", "std_novel",
    )

    def csv_row(self) -> list:
        return [
            self.acc_all, self.acc_old, self.acc_new,
            self.known_groups["many"], self.known_groups["median"],
            self.known_groups["few"], self.std_known,
            self.novel_groups["many"], self.novel_groups["median"],
            self.novel_groups["few"], self.std_novel,
        ]


def _group_sizes(m: int) -> tuple[int, int, int]:
    g1 = -(-m // 3)
    g2 = -(-(m - g1) // 2)
    return g1, g2, m - g1 - g2


def group_metrics(per_class_acc: np.ndarray, counts: np.ndarray, class_ids: np.ndarray):
    """Many/Median/Few accuracies over one class partition plus their Std.

    Classes are sorted by training-set count descending (ties: lower id) and
    split into three contiguous groups as evenly as possible. Group accuracy
    is the unweighted mean of member-class accuracies; Std is the population
    standard deviation of the nonempty group accuracies.
    """
    class_ids = np.asarray(class_ids, dtype=int)
    if class_ids.size == 0:
        raise ValueError("empty class partition")
    warnings = []
    order = class_ids[np.lexsort((class_ids, -counts[class_ids]))]
    sizes = _group_sizes(order.size)
    if order.size < 3:
        warnings.append(
            f"partition of {order.size} classes: Many/Median/Few degenerate to singletons"
        )
    groups = {}
    start = 0
    values = []
    for name, size in zip(("many", "median", "few"), sizes):
        members = order[start : start + size]
        start += size
        if members.size:
            acc = float(per_class_acc[members].mean())
            values.append(acc)
        else:
            acc = float("nan")
        groups[name] = acc
    values = np.asarray(values)
    std = float(np.sqrt(((values - values.mean()) ** 2).mean()))
    return groups, std, warnings


def evaluate(
    features: np.ndarray,
    labels: np.ndarray,
    num_known: int,
    num_classes: int,
    train_counts: np.ndarray,
    seed: int,
    kmeans_max_iter: int = 100,
    kmeans_tol: float = 1e-6,
    kmeans_n_init: int = 10,
) -> EvalReport:
    """Cluster-and-match evaluation of a labeled test set.

    Every class in [0, num_classes) must appear. k-means produces the
    clusters; score_clustering does the matching and scoring.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    if X.shape[0] != y.size:
        raise ValueError("features and labels disagree in length")
    km = kmeans(X, num_classes, seed=seed, max_iter=kmeans_max_iter, tol=kmeans_tol,
                n_init=kmeans_n_init)
    return score_clustering(km.assignments, y, num_known, num_classes, train_counts)


def score_clustering(
    cluster_assignments: np.ndarray,
    labels: np.ndarray,
    num_known: int,
    num_classes: int,
    train_counts: np.ndarray,
) -> EvalReport:
    """Metrics for a fixed clustering: find the agreement-maximizing
    cluster-to-class bijection (minimum-cost assignment on negated
    contingency counts) and score with that map fixed. Invariant to any
    permutation of the cluster ids."""
    y = np.asarray(labels, dtype=int)
    present = np.unique(y)
    if present.size != num_classes or present.min() != 0 or present.max() != num_classes - 1:
        missing = sorted(set(range(num_classes)) - set(present.tolist()))
        raise ValueError(f"test set is missing classes {missing}")
    if not 0 < num_known <= num_classes:
        raise ValueError("need 0 < num_known <= num_classes")
    train_counts = np.asarray(train_counts)
    if train_counts.size != num_classes:
        raise ValueError("train_counts must have one entry per class")

    contingency = np.zeros((num_classes, num_classes))
    for clu, cls in zip(cluster_assignments, y):
        contingency[clu, cls] += 1.0
    assignment = hungarian(-contingency)

    pred = assignment[np.asarray(cluster_assignments, dtype=int)]
    correct = pred == y
    acc_all = float(correct.mean())
    known_mask = y < num_known
    acc_old = float(correct[known_mask].mean()) if known_mask.any() else float("nan")
    acc_new = float(correct[~known_mask].mean()) if (~known_mask).any() else float("nan")

    per_class = np.zeros(num_classes)
    for c in range(num_classes):
        sel = y == c
        per_class[c] = float(correct[sel].mean())

    known_ids = np.arange(num_known)
    novel_ids = np.arange(num_known, num_classes)
    known_groups, std_known, warn_k = group_metrics(per_class, train_counts, known_ids)
    if novel_ids.size:
        novel_groups, std_novel, warn_n = group_metrics(per_class, train_counts, novel_ids)
    else:
        novel_groups, std_novel, warn_n = (
            {"many": float("nan"), "median": float("nan"), "few": float("nan")},
            float("nan"),
            ["no novel classes"],
        )

    return EvalReport(
        acc_all=acc_all,
        acc_old=acc_old,
        acc_new=acc_new,
        known_groups=known_groups,
        novel_groups=novel_groups,
        std_known=std_known,
        std_novel=std_novel,
        per_class_acc=per_class.tolist(),
        assignment=assignment.tolist(),
        n_test=int(y.size),
        warnings=warn_k + warn_n,
    )
