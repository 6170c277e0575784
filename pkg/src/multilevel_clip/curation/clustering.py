"""Density-aware grouping of object labels over mutual-reachability distances.

Single linkage over the mutual-reachability graph (the minimum spanning tree),
flattened at the most persistent cut: the MST edge-weight gap that keeps one
partition alive over the widest range of distance thresholds.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .._validation import check_int
from ..exceptions import InvalidInputError, InvalidParameterError
from .embedding import get_embedder

VOCABULARY_VERSION = 1


def cosine_distances(X):
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    Xn = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
    D = 1.0 - Xn @ Xn.T
    np.fill_diagonal(D, 0.0)
    return np.clip(D, 0.0, 2.0)


def core_distances(D, k):
    """Distance from each point to its ``k``-th nearest *other* point."""
    n = D.shape[0]
    if n <= k:
        raise InvalidParameterError(f"need more than k={k} points, got {n}")
    masked = D + np.diag(np.full(n, np.inf))
    return np.sort(masked, axis=1)[:, k - 1]


def mutual_reachability_matrix(X, k):
    D = cosine_distances(X)
    core = core_distances(D, k)
    M = np.maximum(D, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(M, 0.0)
    return M


def mutual_reachability(a, b, k, points):
    """``max(core_k(a), core_k(b), d(a, b))`` for point indices ``a`` and ``b``."""
    k = check_int(k, "k", min_value=1)
    D = cosine_distances(points)
    core = core_distances(D, k)
    return float(max(core[a], core[b], D[a, b]))


def prim_mst(W):
    """Minimum spanning tree of a dense symmetric weight matrix as ``(u, v, w)`` rows."""
    n = W.shape[0]
    if n == 0:
        return np.zeros((0, 3))
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.full(n, -1)
    in_tree[0] = True
    best[:] = W[0]
    parent[:] = 0
    edges = []
    for _ in range(n - 1):
        cand = np.where(in_tree, np.inf, best)
        v = int(np.argmin(cand))
        edges.append((int(parent[v]), v, float(best[v])))
        in_tree[v] = True
        closer = (~in_tree) & (W[v] < best)
        best[closer] = W[v][closer]
        parent[closer] = v
    return np.array(edges, dtype=np.float64).reshape(-1, 3)


def _components(n, edges):
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in edges:
        ru, rv = find(int(u)), find(int(v))
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)
    return [find(i) for i in range(n)]


def flat_cut(mst, n, min_cluster_size):
    """Labels (``-1`` = noise) and the chosen threshold for the most persistent cut.

    Distinct MST weights ``w1 > w2 > ... > wL`` define candidate levels; level
    ``m`` removes every edge with weight ``>= wm`` and persists for ``wm - w(m+1)``.
    The level with the largest persistence that still has a component of at
    least ``min_cluster_size`` points wins (ties: fewer cuts). With fewer than
    two distinct weights nothing is cut.
    """
    weights = mst[:, 2] if len(mst) else np.zeros(0)
    levels = sorted(set(weights.tolist()), reverse=True)
    threshold = np.inf
    best_gap = -1.0
    for m in range(len(levels) - 1):
        gap = levels[m] - levels[m + 1]
        kept = [(u, v) for u, v, w in mst if w < levels[m]]
        roots = _components(n, kept)
        sizes = np.bincount(roots, minlength=n)
        if sizes.max() >= min_cluster_size and gap > best_gap:
            best_gap, threshold = gap, levels[m]
    kept = [(u, v) for u, v, w in mst if w < threshold]
    roots = _components(n, kept)
    sizes = np.bincount(roots, minlength=n)
    labels = np.full(n, -1, dtype=int)
    next_label = 0
    mapping = {}
    for i, r in enumerate(roots):
        if sizes[r] < min_cluster_size:
            continue
        if r not in mapping:
            mapping[r] = next_label
            next_label += 1
        labels[i] = mapping[r]
    return labels, float(threshold)


class MutualReachabilityClustering(ClusterMixin, BaseEstimator):
    """Cluster rows of ``X`` by single linkage over cosine mutual reachability.

    Parameters
    ----------
    k : int
        Neighbour rank used for core distances.
    min_cluster_size : int
        Components smaller than this are labelled ``-1`` (noise).
    """

    def __init__(self, k=2, min_cluster_size=2):
        self.k = k
        self.min_cluster_size = min_cluster_size

    def fit(self, X, y=None):
        check_int(self.k, "k", min_value=1)
        check_int(self.min_cluster_size, "min_cluster_size", min_value=2)
        X = check_array(X, dtype=np.float64)
        M = mutual_reachability_matrix(X, self.k)
        self.mutual_reachability_ = M
        self.minimum_spanning_tree_ = prim_mst(M)
        self.labels_, self.cut_threshold_ = flat_cut(
            self.minimum_spanning_tree_, X.shape[0], self.min_cluster_size)
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_

    @property
    def n_clusters_(self):
        check_is_fitted(self, "labels_")
        return int(self.labels_.max() + 1) if len(self.labels_) else 0


@dataclass
class ClusterConfig:
    k: int = 2
    min_cluster_size: int = 2
    metric: str = "cosine"
    embedder: object = "char-ngram"

    def __post_init__(self):
        check_int(self.k, "k", min_value=1)
        check_int(self.min_cluster_size, "min_cluster_size", min_value=2)
        if self.metric != "cosine":
            raise InvalidParameterError("only the cosine metric is supported")


@dataclass
class VocabularyState:
    raw_labels: list
    color_list: frozenset = frozenset()
    group_assignments: dict = field(default_factory=dict)
    group_names: dict = field(default_factory=dict)
    noise_labels: set = field(default_factory=set)

    def label_to_name(self):
        """Raw label to canonical group name (noise labels map to themselves)."""
        out = {lab: lab for lab in self.noise_labels}
        out.update({lab: self.group_names[g] for lab, g in self.group_assignments.items()})
        return out

    def to_json(self, **extra):
        groups = {}
        for lab, g in sorted(self.group_assignments.items()):
            groups.setdefault(self.group_names[g], []).append(lab)
        data = {
            "version": VOCABULARY_VERSION,
            "groups": dict(sorted(groups.items())),
            "noise": sorted(self.noise_labels),
            "label_map": dict(sorted(self.label_to_name().items())),
        }
        data.update(extra)
        return json.dumps(data, indent=1, sort_keys=True)

    def save(self, path, **extra):
        Path(path).write_text(self.to_json(**extra), encoding="utf-8")


def read_vocabulary(path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("version") != VOCABULARY_VERSION:
        raise InvalidInputError(f"{path}: unsupported vocabulary version {data.get('version')!r}")
    return data


def _medoid(members, X):
    D = cosine_distances(X)
    totals = D.sum(axis=1)
    order = sorted(range(len(members)), key=lambda i: (totals[i], members[i]))
    return members[order[0]]


def cluster_objects(labels, config=None):
    """Group object labels; each group is named by its medoid label."""
    config = config or ClusterConfig()
    labels = list(labels)
    if len(labels) < config.min_cluster_size:
        raise InvalidParameterError(
            f"need at least min_cluster_size={config.min_cluster_size} labels, got {len(labels)}")
    embed = get_embedder(config.embedder)
    rows = []
    for lab in labels:
        try:
            rows.append(np.asarray(embed(lab), dtype=np.float64))
        except Exception as exc:
            raise InvalidInputError(f"embedder failed on label {lab!r}: {exc}") from exc
    X = np.stack(rows)
    est = MutualReachabilityClustering(config.k, config.min_cluster_size).fit(X)
    state = VocabularyState(raw_labels=labels)
    for g in range(est.n_clusters_):
        idx = np.flatnonzero(est.labels_ == g)
        members = [labels[i] for i in idx]
        state.group_names[g] = _medoid(members, X[idx])
        for lab in members:
            state.group_assignments[lab] = g
    state.noise_labels = {lab for lab, c in zip(labels, est.labels_) if c < 0}
    return state
