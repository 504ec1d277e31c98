"""Random forest classifier built from scratch on numpy.

Trees are grown depth-first with Gini-impurity splits evaluated at the
midpoints between consecutive sorted unique feature values, over a random
feature subset per node. Per-tree seeds are derived as seed + tree index,
so serial and parallel training produce bit-identical forests. Ties in
predicted probability resolve to the lowest class index.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .store import FormatError, _read_exact

FOREST_MAGIC = b"RFST"
FOREST_VERSION = 1


class _Tree:
    """Flat-array binary decision tree."""

    __slots__ = ("feature", "threshold", "left", "right", "counts")

    def __init__(self, feature, threshold, left, right, counts):
        self.feature = feature      # int32, -1 marks a leaf
        self.threshold = threshold  # float64 midpoint thresholds
        self.left = left            # int32 child ids
        self.right = right
        self.counts = counts        # (n_nodes, K) uint32 class counts at leaves

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf index for every row of x."""
        node = np.zeros(len(x), dtype=np.int64)
        rows = np.arange(len(x))
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return node
            r = rows[active]
            n = node[active]
            go_left = x[r, feat[active]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])


def _best_split(x, idx, y_node, feat_ids, n_classes, min_leaf):
    """Best (feature, threshold, score) over candidate features, or None.

    Columns are gathered one at a time; copying the full row block per node
    would dominate the fit time on wide feature matrices.
    """
    n = len(y_node)
    totals = np.bincount(y_node, minlength=n_classes)
    best = None
    for f in feat_ids:
        v = x[idx, f]
        order = np.argsort(v)
        vs = v[order]
        boundaries = np.flatnonzero(vs[:-1] < vs[1:])
        if boundaries.size == 0:
            continue
        if min_leaf > 1:
            nl_all = boundaries + 1
            boundaries = boundaries[(nl_all >= min_leaf) & (n - nl_all >= min_leaf)]
            if boundaries.size == 0:
                continue
        ys = y_node[order]
        lsq = np.zeros(boundaries.size, dtype=np.float64)
        rsq = np.zeros(boundaries.size, dtype=np.float64)
        for c in range(n_classes):
            if totals[c] == 0:
                continue
            lc = np.cumsum(ys == c)[boundaries].astype(np.float64)
            lsq += lc * lc
            rc = totals[c] - lc
            rsq += rc * rc
        nl = (boundaries + 1).astype(np.float64)
        # maximizing sum of squared counts over group size == minimizing Gini
        score = lsq / nl + rsq / (n - nl)
        k = int(np.argmax(score))
        if best is None or score[k] > best[0]:
            b = boundaries[k]
            thr = (float(vs[b]) + float(vs[b + 1])) / 2.0
            best = (float(score[k]), int(f), thr)
    return best


def _grow_tree(x, y, n_classes, max_depth, min_leaf, n_feats, rng):
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(None)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(y)), 0)]
    n_columns = x.shape[1]
    while stack:
        node, idx, depth = stack.pop()
        ys = y[idx]
        hist = np.bincount(ys, minlength=n_classes)
        pure = (hist > 0).sum() <= 1
        if pure or len(idx) < 2 * min_leaf or (max_depth is not None and depth >= max_depth):
            counts[node] = hist
            continue
        # sorted so split ties resolve by feature index, independent of draw order
        feat_ids = np.sort(rng.choice(n_columns, size=n_feats, replace=False))
        split = _best_split(x, idx, ys, feat_ids, n_classes, min_leaf)
        if split is None:
            counts[node] = hist
            continue
        _, f, thr = split
        goes_left = x[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        lnode = new_node()
        rnode = new_node()
        left[node] = lnode
        right[node] = rnode
        # push right first so the left child is grown next (stable rng order)
        stack.append((rnode, idx[~goes_left], depth + 1))
        stack.append((lnode, idx[goes_left], depth + 1))
    count_arr = np.zeros((len(feature), n_classes), dtype=np.uint32)
    for i, h in enumerate(counts):
        if h is not None:
            count_arr[i] = h
    return _Tree(np.asarray(feature, dtype=np.int32),
                 np.asarray(threshold, dtype=np.float64),
                 np.asarray(left, dtype=np.int32),
                 np.asarray(right, dtype=np.int32),
                 count_arr)


_SHARED: dict = {}


def _pool_init(x, y, params):
    _SHARED["x"] = x
    _SHARED["y"] = y
    _SHARED["params"] = params


def _pool_fit(tree_index):
    x, y, params = _SHARED["x"], _SHARED["y"], _SHARED["params"]
    return _fit_one_tree(x, y, tree_index, **params)


def _fit_one_tree(x, y, tree_index, n_classes, max_depth, min_leaf, n_feats,
                  bootstrap, seed):
    rng = np.random.default_rng(seed + tree_index)
    if bootstrap:
        rows = rng.integers(0, len(y), size=len(y))
        x, y = x[rows], y[rows]
    return _grow_tree(x, y, n_classes, max_depth, min_leaf, n_feats, rng)


class RandomForestClassifier:
    """Forest of Gini decision trees with sklearn-style fit/predict.

    Parameters
    ----------
    n_trees: ensemble size.
    max_depth: depth limit, None for unlimited.
    min_samples_leaf: minimum rows on each side of a split.
    max_features: "sqrt" (floor of sqrt of feature count), an int, or None
        for all features.
    bootstrap: resample rows per tree when True, full data otherwise.
    seed: base seed; tree t uses seed + t.
    n_jobs: worker processes for fitting (1 = in-process).
    """

    def __init__(self, n_trees: int = 100, max_depth: int | None = None,
                 min_samples_leaf: int = 1, max_features="sqrt",
                 bootstrap: bool = True, seed: int = 0, n_jobs: int = 1):
        if n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {n_trees}")
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.seed = seed
        self.n_jobs = n_jobs
        self.trees_: list[_Tree] = []
        self.classes_: np.ndarray | None = None
        self.n_features_: int | None = None

    def get_params(self) -> dict:
        return {"n_trees": self.n_trees, "max_depth": self.max_depth,
                "min_samples_leaf": self.min_samples_leaf,
                "max_features": self.max_features, "bootstrap": self.bootstrap,
                "seed": self.seed, "n_jobs": self.n_jobs}

    def set_params(self, **params) -> "RandomForestClassifier":
        for key, value in params.items():
            if key not in self.get_params():
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def _n_feats(self, n_columns: int) -> int:
        if self.max_features is None:
            return n_columns
        if self.max_features == "sqrt":
            return max(1, min(n_columns, int(math.isqrt(n_columns))))
        n = int(self.max_features)
        if not (1 <= n <= n_columns):
            raise ValueError(f"max_features {n} outside [1, {n_columns}]")
        return n

    def fit(self, features: np.ndarray, labels: np.ndarray,
            classes=None) -> "RandomForestClassifier":
        x = np.ascontiguousarray(features, dtype=np.float32)
        labels = np.asarray(labels)
        if x.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {x.shape}")
        if len(x) == 0:
            raise ValueError("cannot fit on an empty sample")
        if len(x) != len(labels):
            raise ValueError("features and labels disagree in length")
        extra = set() if classes is None else {int(c) for c in classes}
        self.classes_ = np.asarray(sorted({int(c) for c in np.unique(labels)} | extra))
        lookup = {c: i for i, c in enumerate(self.classes_)}
        y = np.asarray([lookup[v] for v in labels], dtype=np.int64)
        self.n_features_ = x.shape[1]
        params = dict(n_classes=len(self.classes_), max_depth=self.max_depth,
                      min_leaf=self.min_samples_leaf,
                      n_feats=self._n_feats(x.shape[1]),
                      bootstrap=self.bootstrap, seed=self.seed)
        if self.n_jobs > 1 and self.n_trees > 1:
            with ProcessPoolExecutor(max_workers=self.n_jobs,
                                     initializer=_pool_init,
                                     initargs=(x, y, params)) as pool:
                self.trees_ = list(pool.map(_pool_fit, range(self.n_trees),
                                            chunksize=max(1, self.n_trees // (4 * self.n_jobs))))
        else:
            self.trees_ = [_fit_one_tree(x, y, t, **params) for t in range(self.n_trees)]
        return self

    def _check_features(self, features) -> np.ndarray:
        if not self.trees_:
            raise ValueError("forest is not fitted")
        x = np.ascontiguousarray(features, dtype=np.float32)
        if x.ndim != 2 or x.shape[1] != self.n_features_:
            raise ValueError(
                f"feature dim mismatch: got {x.shape}, trained on {self.n_features_} features")
        return x

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """Mean over trees of normalized leaf class counts, rows on the K-simplex."""
        x = self._check_features(features)
        acc = np.zeros((len(x), len(self.classes_)), dtype=np.float64)
        for tree in self.trees_:
            leaf = tree.apply(x)
            counts = tree.counts[leaf].astype(np.float64)
            acc += counts / counts.sum(axis=1, keepdims=True)
        return acc / len(self.trees_)

    def predict(self, features: np.ndarray) -> np.ndarray:
        proba = self.predict_proba(features)
        return self.classes_[np.argmax(proba, axis=1)]

    # -- serialization ("RFST" versioned binary) --------------------------------

    def save(self, path) -> None:
        if not self.trees_:
            raise ValueError("forest is not fitted")
        k = len(self.classes_)
        with open(path, "wb") as fh:
            fh.write(FOREST_MAGIC)
            fh.write(struct.pack("<IIII", FOREST_VERSION, k, self.n_features_,
                                 len(self.trees_)))
            fh.write(np.asarray(self.classes_, dtype="<i8").tobytes())
            for tree in self.trees_:
                fh.write(struct.pack("<I", len(tree.feature)))
                fh.write(tree.feature.astype("<i4").tobytes())
                fh.write(tree.threshold.astype("<f8").tobytes())
                fh.write(tree.left.astype("<i4").tobytes())
                fh.write(tree.right.astype("<i4").tobytes())
                fh.write(tree.counts.astype("<u4").tobytes())

    @classmethod
    def load(cls, path) -> "RandomForestClassifier":
        with open(path, "rb") as fh:
            magic = _read_exact(fh, 4, "magic")
            if magic != FOREST_MAGIC:
                raise FormatError(f"bad magic at offset 0: expected {FOREST_MAGIC!r}, got {magic!r}")
            version, k, n_features, n_trees = struct.unpack("<IIII", _read_exact(fh, 16, "header"))
            if version != FOREST_VERSION:
                raise FormatError(f"unsupported version {version} at offset 4")
            model = cls(n_trees=n_trees)
            model.classes_ = np.frombuffer(_read_exact(fh, 8 * k, "classes"), dtype="<i8").copy()
            model.n_features_ = n_features
            model.trees_ = []
            for _ in range(n_trees):
                (n_nodes,) = struct.unpack("<I", _read_exact(fh, 4, "node count"))
                feature = np.frombuffer(_read_exact(fh, 4 * n_nodes, "features"), dtype="<i4").copy()
                threshold = np.frombuffer(_read_exact(fh, 8 * n_nodes, "thresholds"), dtype="<f8").copy()
                left = np.frombuffer(_read_exact(fh, 4 * n_nodes, "left"), dtype="<i4").copy()
                right = np.frombuffer(_read_exact(fh, 4 * n_nodes, "right"), dtype="<i4").copy()
                counts = np.frombuffer(_read_exact(fh, 4 * n_nodes * k, "counts"),
                                       dtype="<u4").reshape(n_nodes, k).copy()
                model.trees_.append(_Tree(feature, threshold, left, right, counts))
        return model
