"""Training-set class-distribution estimation from feature space.

k-means over all training features gives cluster sizes; normalizing them
yields an estimated class-frequency vector. Labeled samples anchor the
cluster-to-class correspondence: known classes are matched to clusters by a
minimum-cost assignment on negated agreement counts, and the leftover
clusters map to novel classes in descending size order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._rng import KMEANS, rng_for


class EstimationError(RuntimeError):
    """Raised when a distribution-estimation round cannot proceed."""


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    iterations: int
    inertia_history: list


@dataclass(frozen=True)
class AlignmentMap:
    """Total bijection cluster id -> class id."""

    cluster_to_class: np.ndarray

    def __post_init__(self):
        c2c = np.asarray(self.cluster_to_class, dtype=int)
        n = c2c.size
        if sorted(c2c.tolist()) != list(range(n)):
            raise ValueError("cluster_to_class must be a permutation of 0..C-1")
        object.__setattr__(self, "cluster_to_class", c2c)

    def class_to_cluster(self) -> np.ndarray:
        inv = np.empty_like(self.cluster_to_class)
        inv[self.cluster_to_class] = np.arange(self.cluster_to_class.size)
        return inv


# --- k-means -----------------------------------------------------------------

def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: per step, draw a few D^2-weighted candidates and
    keep the one minimizing the total potential. The greedy variant is what
    makes small far-away blobs reliably receive a seed."""
    n = X.shape[0]
    n_candidates = 2 + int(math.log(max(k, 2)))
    centers = np.empty((k, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0:
            cand_ids = rng.integers(n, size=n_candidates)
        else:
            cand_ids = rng.choice(n, size=n_candidates, p=d2 / total)
        best_d2 = None
        best_pot = np.inf
        best_id = int(cand_ids[0])
        for cid in cand_ids:
            nd2 = np.minimum(d2, ((X - X[int(cid)]) ** 2).sum(axis=1))
            pot = float(nd2.sum())
            if pot < best_pot:
                best_id, best_pot, best_d2 = int(cid), pot, nd2
        centers[j] = X[best_id]
        d2 = best_d2
    return centers


def _sq_dists(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.maximum(d2, 0.0)


def _assign_with_repair(X: np.ndarray, centers: np.ndarray, k: int):
    """Nearest-center assignment; empty clusters steal the point currently
    farthest from its own center (which becomes the cluster's new center)."""
    d2 = _sq_dists(X, centers)
    assign = d2.argmin(axis=1)
    counts = np.bincount(assign, minlength=k)
    if np.all(counts > 0):
        inertia = float(d2[np.arange(X.shape[0]), assign].sum())
        return assign, centers, inertia
    centers = centers.copy()
    point_cost = d2[np.arange(X.shape[0]), assign]
    for c in np.flatnonzero(counts == 0):
        donors = counts[assign] > 1
        if not donors.any():
            raise EstimationError("cannot repair empty cluster: no donor cluster")
        masked = np.where(donors, point_cost, -np.inf)
        far = int(masked.argmax())
        counts[assign[far]] -= 1
        assign[far] = c
        counts[c] = 1
        centers[c] = X[far]
        point_cost[far] = 0.0
    inertia = float(point_cost.sum())
    return assign, centers, inertia


def _lloyd(X: np.ndarray, n_clusters: int, rng, max_iter: int, tol: float) -> KMeansResult:
    centers = _kmeanspp_init(X, n_clusters, rng)
    assign, centers, inertia = _assign_with_repair(X, centers, n_clusters)
    history = [inertia]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        new_centers = np.empty_like(centers)
        for c in range(n_clusters):
            new_centers[c] = X[assign == c].mean(axis=0)
        new_assign, new_centers, inertia = _assign_with_repair(X, new_centers, n_clusters)
        history.append(inertia)
        shift = float(np.linalg.norm(new_centers - centers, axis=1).max())
        stable = bool(np.array_equal(new_assign, assign))
        assign, centers = new_assign, new_centers
        if stable or shift < tol:
            break
    return KMeansResult(
        assignments=assign,
        centers=centers,
        inertia=history[-1],
        iterations=iterations,
        inertia_history=history,
    )


def kmeans(
    features: np.ndarray,
    n_clusters: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-6,
    n_init: int = 10,
) -> KMeansResult:
    """Best of `n_init` Lloyd runs from k-means++ starts; deterministic
    given seed.

    Each run stops when the max center shift drops below tol, the assignment
    is stable, or max_iter is hit; the run with the lowest inertia wins
    (ties: earliest run). Restarts matter under heavy class imbalance, where
    a single k-means++ start regularly leaves a small blob uncovered.
    Inertia is non-increasing over each run's iterations.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D array")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    n = X.shape[0]
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    if n < n_clusters:
        raise ValueError(f"{n} samples cannot fill {n_clusters} clusters")
    if n_init < 1:
        raise ValueError("need at least one initialization")

    best: KMeansResult | None = None
    for trial in range(n_init):
        rng = rng_for(seed, KMEANS, trial)
        result = _lloyd(X, n_clusters, rng, max_iter, tol)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


# --- minimum-cost assignment ----------------------------------------------------

def _solve_assignment(cost) -> tuple[list, float]:
    """O(n^3) shortest-augmenting-path solver (potentials form).

    cost is a square list-of-lists / array; returns (col_for_row, total).
    """
    n = len(cost)
    INF = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j] = 1-based row matched to column j
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            row = cost[i0 - 1]
            ui0 = u[i0]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - ui0 - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = [0] * n
    total = 0.0
    for j in range(1, n + 1):
        if p[j]:
            perm[p[j] - 1] = j - 1
            total += cost[p[j] - 1][j - 1]
    return perm, total


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Permutation sigma minimizing sum_i cost[i][sigma(i)].

    Ties are broken toward the lexicographically smallest permutation, which
    costs O(n^2) extra solver calls; fine at the class counts this library
    targets.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"cost matrix must be square, got {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix must be finite")
    n = C.shape[0]
    if n == 1:
        return np.array([0], dtype=int)

    rows = C.tolist()
    base_perm, best = _solve_assignment(rows)
    tol = 1e-9 * (1.0 + abs(best))

    avail = list(range(n))
    result = [0] * n
    fixed_cost = 0.0
    # completion[r] = a known-optimal column for every unfixed row r
    completion = dict(enumerate(base_perm))
    for i in range(n):
        target = completion[i]
        chosen = target
        for j in avail:
            if j == target:
                break
            # j < target: accept it iff some optimal solution goes through (i, j)
            sub_rows = list(range(i + 1, n))
            sub_cols = [c for c in avail if c != j]
            sub = [[rows[r][c] for c in sub_cols] for r in sub_rows]
            sub_perm, sub_total = _solve_assignment(sub)
            if fixed_cost + C[i, j] + sub_total <= best + tol:
                chosen = j
                completion = {sub_rows[r]: sub_cols[sub_perm[r]] for r in range(len(sub_rows))}
                break
        result[i] = chosen
        fixed_cost += C[i, chosen]
        avail.remove(chosen)
    return np.array(result, dtype=int)


# --- distribution + alignment ------------------------------------------------------

def estimate_distribution(assignments: np.ndarray, n_clusters: int) -> np.ndarray:
    """Cluster-indexed frequency vector (pre-alignment)."""
    a = np.asarray(assignments, dtype=int)
    if a.size == 0:
        raise ValueError("no assignments")
    if a.min() < 0 or a.max() >= n_clusters:
        raise ValueError("assignment outside [0, n_clusters)")
    counts = np.bincount(a, minlength=n_clusters)
    return counts / counts.sum()


def align_clusters(
    result: KMeansResult,
    labeled_indices: np.ndarray,
    labeled_classes: np.ndarray,
    num_known: int,
) -> AlignmentMap:
    """Map clusters to classes using labeled agreement.

    Known classes are matched to clusters by a minimum-cost assignment on
    negated agreement counts (zero-padded to square, so fewer label-bearing
    clusters than known classes is fine). Remaining clusters are sorted by
    size descending and assigned to novel classes in ascending index order.
    """
    n_clusters = result.centers.shape[0]
    labeled_indices = np.asarray(labeled_indices, dtype=int)
    labeled_classes = np.asarray(labeled_classes, dtype=int)
    if num_known < 1 or num_known > n_clusters:
        raise ValueError("num_known must be in [1, n_clusters]")
    if labeled_indices.size == 0:
        raise EstimationError("no labeled samples to anchor the alignment")
    if labeled_classes.size != labeled_indices.size:
        raise ValueError("labeled indices and classes must pair up")
    if labeled_classes.min() < 0 or labeled_classes.max() >= num_known:
        raise ValueError("labeled classes must lie in the known set")

    agreement = np.zeros((num_known, n_clusters))
    clusters_of_labeled = result.assignments[labeled_indices]
    for cls, clu in zip(labeled_classes, clusters_of_labeled):
        agreement[cls, clu] += 1.0
    if agreement.sum() == 0:
        raise EstimationError("labeled samples never hit any cluster")

    cost = np.zeros((n_clusters, n_clusters))
    cost[:num_known, :] = -agreement
    perm = hungarian(cost)

    cluster_to_class = np.full(n_clusters, -1, dtype=int)
    for cls in range(num_known):
        cluster_to_class[perm[cls]] = cls
    leftovers = np.flatnonzero(cluster_to_class < 0)
    sizes = np.bincount(result.assignments, minlength=n_clusters)[leftovers]
    order = leftovers[np.lexsort((leftovers, -sizes))]
    for novel_cls, clu in enumerate(order, start=num_known):
        cluster_to_class[clu] = novel_cls
    return AlignmentMap(cluster_to_class=cluster_to_class)


def aligned_distribution(result: KMeansResult, amap: AlignmentMap) -> np.ndarray:
    """Cluster frequencies permuted into class order."""
    freq = estimate_distribution(result.assignments, result.centers.shape[0])
    out = np.empty_like(freq)
    out[amap.cluster_to_class] = freq
    return out


def floor_distribution(freq: np.ndarray, n_samples: int) -> np.ndarray:
    """Clamp frequencies below at 1/(2N) so logs and ratios stay defined."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    return np.maximum(np.asarray(freq, dtype=float), 1.0 / (2.0 * n_samples))


def estimate_round(
    features: np.ndarray,
    n_classes: int,
    labeled_indices: np.ndarray,
    labeled_classes: np.ndarray,
    num_known: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-6,
    n_init: int = 10,
):
    """One full estimation round: cluster, align, normalize.

    Returns (KMeansResult, AlignmentMap, class-indexed frequency vector).
    """
    result = kmeans(features, n_classes, seed=seed, max_iter=max_iter, tol=tol, n_init=n_init)
    amap = align_clusters(result, labeled_indices, labeled_classes, num_known)
    return result, amap, aligned_distribution(result, amap)
