"""Random-forest classifier over SAD feature vectors.

Trees are CART-style binary trees grown on bootstrap resamples with Gini
impurity. Per-tree random streams come from a splitmix64 derivation of the
master seed, so the forest does not depend on the order (or concurrency) in
which trees are grown.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import CorruptModel, EmptySamples, SingleClassTrainingSet, UnsupportedVersion
from .sad_extractor import N_FEATURES, SadProfile
from .trace_model import Label

MODEL_FORMAT = "sadspan.forest"
MODEL_VERSION = 1

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    """One splitmix64 output for ``state`` (already advanced by the caller)."""
    z = state & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def tree_seed(master_seed: int, tree_index: int) -> int:
    # state of a splitmix64 stream seeded with master_seed after tree_index+1 steps
    return splitmix64(master_seed + (tree_index + 1) * 0x9E3779B97F4A7C15)


@dataclass(frozen=True)
class LabeledSample:
    features: tuple[float, ...]
    label: Label
    app_id: str = ""
    year: int = 0

    @classmethod
    def from_profile(cls, profile: SadProfile) -> "LabeledSample":
        return cls(profile.features, profile.label, profile.app_id, profile.year)


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    features_per_split: int = math.ceil(math.sqrt(N_FEATURES))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be positive")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be positive")
        if self.min_samples_split < 1:
            raise ValueError("min_samples_split must be positive")
        if not 1 <= self.features_per_split <= N_FEATURES:
            raise ValueError(f"features_per_split must lie in [1, {N_FEATURES}]")


@dataclass
class Tree:
    """Flat array form of one decision tree.

    ``feature[i] == -1`` marks a leaf. Internal nodes send ``x[feature] <=
    threshold`` left. ``counts[i]`` is the (benign, malicious) pair of training
    samples that reached node ``i``. Feature indices are 0-based here.
    """

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    counts: list[tuple[int, int]] = field(default_factory=list)
    n_resampled: int = 0

    def _add(self, counts: tuple[int, int]) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.counts.append(counts)
        return len(self.feature) - 1

    def __len__(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = feature[node] >= 0
        while active.any():
            idx = rows[active]
            cur = node[idx]
            go_left = X[idx, feature[cur]] <= threshold[cur]
            node[idx] = np.where(go_left, left[cur], right[cur])
            active = feature[node] >= 0
        return node

    def votes_malicious(self, X: np.ndarray) -> np.ndarray:
        counts = np.asarray(self.counts, dtype=np.int64).reshape(-1, 2)
        leaf = counts[self.apply(X)]
        # a leaf tie counts as malicious, same rule as the forest vote
        return leaf[:, 1] >= leaf[:, 0]


def best_split(
    X: np.ndarray, y: np.ndarray, features: Iterable[int], budget: int
) -> Optional[tuple[int, float, float]]:
    """Best (feature, threshold, score) over up to ``budget`` non-constant features.

    ``features`` is the random visiting order. The score is the weighted child
    purity ``sum_c n_{L,c}^2/n_L + sum_c n_{R,c}^2/n_R``; maximizing it is the
    same as maximizing the Gini decrease. Constant features are skipped and do
    not use up the budget. Ties keep the first candidate found.
    """
    n = len(y)
    best: Optional[tuple[int, float, float]] = None
    visited = 0
    for f in features:
        if visited >= budget:
            break
        col = X[:, f]
        order = np.argsort(col, kind="stable")
        v = col[order]
        if v[0] == v[-1]:
            continue
        visited += 1
        mal_left = np.cumsum(y[order])[:-1].astype(np.float64)
        n_left = np.arange(1, n, dtype=np.float64)
        n_right = n - n_left
        mal_total = float(y.sum())
        ben_left = n_left - mal_left
        mal_right = mal_total - mal_left
        ben_right = n_right - mal_right
        score = (mal_left**2 + ben_left**2) / n_left + (mal_right**2 + ben_right**2) / n_right
        valid = v[1:] != v[:-1]
        score = np.where(valid, score, -np.inf)
        i = int(np.argmax(score))
        if best is None or score[i] > best[2]:
            threshold = float((v[i] + v[i + 1]) / 2.0)
            # midpoint of adjacent doubles can round up onto the upper value
            if threshold >= v[i + 1]:
                threshold = float(v[i])
            best = (int(f), threshold, float(score[i]))
    return best


def grow_tree(X: np.ndarray, y: np.ndarray, params: ForestParams, seed: int) -> Tree:
    rng = np.random.default_rng(seed)
    n = len(y)
    if params.bootstrap:
        sample = rng.integers(0, n, size=n)
        X, y = X[sample], y[sample]
    tree = Tree(n_resampled=len(y))

    def counts_of(idx: np.ndarray) -> tuple[int, int]:
        mal = int(y[idx].sum())
        return (len(idx) - mal, mal)

    root = tree._add(counts_of(np.arange(len(y))))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        ben, mal = tree.counts[node]
        if ben == 0 or mal == 0:
            continue
        if params.max_depth is not None and depth >= params.max_depth:
            continue
        if len(idx) < params.min_samples_split:
            continue
        order = rng.permutation(N_FEATURES)
        split = best_split(X[idx], y[idx], order, params.features_per_split)
        if split is None:
            continue
        f, thr, _ = split
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        tree.feature[node] = f
        tree.threshold[node] = thr
        tree.left[node] = tree._add(counts_of(li))
        tree.right[node] = tree._add(counts_of(ri))
        # right pushed first so the left subtree is numbered first
        stack.append((tree.right[node], ri, depth + 1))
        stack.append((tree.left[node], li, depth + 1))
    return tree


def _as_arrays(samples: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray([s.features for s in samples], dtype=np.float64)
    y = np.asarray([s.label is Label.MALICIOUS for s in samples], dtype=np.int64)
    return X, y


def training_fingerprint(samples: Sequence[LabeledSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.label.value.encode())
        h.update(np.asarray(s.features, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class ForestModel:
    params: ForestParams
    trees: list[Tree]
    training_fingerprint: str

    def malicious_votes(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        votes = np.zeros(len(X), dtype=np.int64)
        for tree in self.trees:
            votes += tree.votes_malicious(X)
        return votes

    def predict_scores(self, X) -> np.ndarray:
        return self.malicious_votes(X) / len(self.trees)

    def predict_many(self, X) -> list[Label]:
        votes = self.malicious_votes(X)
        # ties go to MALICIOUS
        return [Label.MALICIOUS if 2 * v >= len(self.trees) else Label.BENIGN for v in votes]


def train(
    samples: Sequence[LabeledSample], params: ForestParams = ForestParams(), workers: int = 1
) -> ForestModel:
    if not samples:
        raise EmptySamples("no training samples")
    labels = {s.label for s in samples}
    if labels - {Label.BENIGN, Label.MALICIOUS}:
        raise ValueError("training samples must be labeled BENIGN or MALICIOUS")
    if len(labels) < 2:
        raise SingleClassTrainingSet(f"all {len(samples)} samples are {labels.pop().value}")
    X, y = _as_arrays(samples)
    if X.shape[1] != N_FEATURES:
        raise ValueError(f"samples must have {N_FEATURES} features")

    seeds = [tree_seed(params.seed, i) for i in range(params.n_trees)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(lambda s: grow_tree(X, y, params, s), seeds))
    else:
        trees = [grow_tree(X, y, params, s) for s in seeds]
    return ForestModel(params, trees, training_fingerprint(samples))


def predict(model: ForestModel, features: Sequence[float]) -> Label:
    return model.predict_many([features])[0]


def predict_score(model: ForestModel, features: Sequence[float]) -> float:
    return float(model.predict_scores([features])[0])


# -- serialization ----------------------------------------------------------


def save_model(model: ForestModel) -> bytes:
    """Serialize to versioned JSON text. Equal models give equal bytes."""
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "n_features": N_FEATURES,
        "params": asdict(model.params),
        "training_fingerprint": model.training_fingerprint,
        "trees": [
            {
                "n_resampled": t.n_resampled,
                # 1-based feature indices on disk; 0 marks a leaf
                "feature": [f + 1 for f in t.feature],
                "threshold": t.threshold,
                "left": t.left,
                "right": t.right,
                "counts": [list(c) for c in t.counts],
            }
            for t in model.trees
        ],
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def load_model(data: bytes) -> ForestModel:
    try:
        doc = json.loads(data.decode("utf-8") if isinstance(data, bytes) else data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptModel(f"model is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise CorruptModel("not a sadspan forest model")
    if doc.get("version") != MODEL_VERSION:
        raise UnsupportedVersion(f"model version {doc.get('version')!r}; this build reads {MODEL_VERSION}")
    try:
        if doc["n_features"] != N_FEATURES:
            raise CorruptModel(f"model expects {doc['n_features']} features")
        params = ForestParams(**doc["params"])
        trees = []
        for t in doc["trees"]:
            tree = Tree(
                feature=[int(f) - 1 for f in t["feature"]],
                threshold=[float(x) for x in t["threshold"]],
                left=[int(i) for i in t["left"]],
                right=[int(i) for i in t["right"]],
                counts=[(int(b), int(m)) for b, m in t["counts"]],
                n_resampled=int(t["n_resampled"]),
            )
            _check_tree(tree)
            trees.append(tree)
        if len(trees) != params.n_trees:
            raise CorruptModel(f"expected {params.n_trees} trees, found {len(trees)}")
        return ForestModel(params, trees, str(doc["training_fingerprint"]))
    except CorruptModel:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModel(f"malformed model: {exc!r}") from None


def _check_tree(tree: Tree) -> None:
    n = len(tree.feature)
    if n == 0 or not (len(tree.threshold) == len(tree.left) == len(tree.right) == len(tree.counts) == n):
        raise CorruptModel("tree arrays have inconsistent lengths")
    for i in range(n):
        f = tree.feature[i]
        if f == -1:
            continue
        if not 0 <= f < N_FEATURES:
            raise CorruptModel(f"split feature {f + 1} out of range")
        # children always come after their parent, which also rules out cycles
        if not (i < tree.left[i] < n and i < tree.right[i] < n):
            raise CorruptModel(f"node {i} has invalid children")


__all__ = [
    "ForestModel",
    "ForestParams",
    "LabeledSample",
    "Tree",
    "best_split",
    "load_model",
    "predict",
    "predict_score",
    "save_model",
    "train",
    "tree_seed",
]
