"""Gini random forest, AUROC, grouped cross-validation and hyperparameter search.

Trees keep per-node training coverage (the class-weighted bootstrap weight
reaching the node), which the SHAP code needs for path-dependent
expectations.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import binio
from .errors import ConfigError, InputError, ModelArtifactError, SchemaError, TrainingError, UndefinedMetricError

FOREST_FORMAT_VERSION = 1


@dataclass(frozen=True)
class HyperParams:
    n_trees: int = 100
    max_depth: int = 8
    min_samples_leaf: int = 5
    max_features: float = 0.5
    class_weight: str = "balanced"
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ConfigError("n_trees, max_depth and min_samples_leaf must be positive")
        if not 0 < self.max_features <= 1:
            raise ConfigError("max_features must lie in (0, 1]")
        if self.class_weight not in ("balanced", "none"):
            raise ConfigError("class_weight must be 'balanced' or 'none'")

    @classmethod
    def from_dict(cls, d: Mapping) -> "HyperParams":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class DecisionTree:
    """Array-backed binary tree; ``feature == -1`` marks a leaf.

    ``value`` is the weighted positive-class fraction at every node and
    ``coverage`` the weight of training samples reaching it.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    coverage: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return node
            idx = np.flatnonzero(active)
            go_left = X[idx, f[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def used_features(self) -> set[int]:
        return {int(f) for f in self.feature if f >= 0}


@dataclass(frozen=True)
class RandomForest:
    trees: tuple[DecisionTree, ...]
    hyperparams: HyperParams
    n_features: int
    class_balance: float = float("nan")

    def predict_proba(self, X) -> np.ndarray | float:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = X[None, :] if single else X
        if X2.shape[1] != self.n_features:
            raise SchemaError(f"expected {self.n_features} features, got {X2.shape[1]}")
        p = np.mean([t.predict(X2) for t in self.trees], axis=0)
        return float(p[0]) if single else p

    def tree_votes(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)[None, :]
        return np.array([t.predict(x)[0] for t in self.trees])

    def used_features(self) -> set[int]:
        return set().union(*(t.used_features() for t in self.trees))

    def to_bytes(self) -> bytes:
        sizes = np.array([t.n_nodes for t in self.trees], dtype=np.int64)
        cat = lambda name: np.concatenate([getattr(t, name) for t in self.trees])  # noqa: E731
        arrays = {
            "tree_sizes": sizes,
            "feature": cat("feature"),
            "threshold": cat("threshold"),
            "left": cat("left"),
            "right": cat("right"),
            "coverage": cat("coverage"),
            "value": cat("value"),
        }
        meta = {
            "version": FOREST_FORMAT_VERSION,
            "hyperparams": asdict(self.hyperparams),
            "n_features": self.n_features,
            "class_balance": self.class_balance,
        }
        return binio.dumps("random-forest", arrays, meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RandomForest":
        a, meta = binio.loads(blob, "random-forest")
        if meta.get("version") != FOREST_FORMAT_VERSION:
            raise ModelArtifactError(f"unsupported forest format version {meta.get('version')}")
        trees = []
        bounds = np.concatenate([[0], np.cumsum(a["tree_sizes"])])
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            trees.append(
                DecisionTree(*(a[k][lo:hi] for k in ("feature", "threshold", "left", "right", "coverage", "value")))
            )
        return cls(tuple(trees), HyperParams(**meta["hyperparams"]), int(meta["n_features"]), float(meta["class_balance"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "RandomForest":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # n x k
    labels: np.ndarray  # n, {0, 1}
    groups: np.ndarray  # n, patient ids

    def __post_init__(self):
        n = len(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] != n or len(self.groups) != n:
            raise SchemaError("features, labels and groups disagree in length")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def k(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.groups[idx])

    def check_group_labels(self) -> None:
        seen: dict = {}
        for g, y in zip(self.groups, self.labels):
            if seen.setdefault(g, y) != y:
                raise InputError(f"group {g} carries both labels")


# --------------------------------------------------------------------------
# tree growing


def _best_split(X, y, w, c, feats, min_leaf):
    W = w.sum()
    P = (w * y).sum()
    C = c.sum()
    best_g, best_f, best_t = np.inf, -1, 0.0
    wy = w * y
    for f in feats:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cw = np.cumsum(w[order])[:-1]
        cp = np.cumsum(wy[order])[:-1]
        cc = np.cumsum(c[order])[:-1]
        valid = (xs[:-1] < xs[1:]) & (cc >= min_leaf) & (C - cc >= min_leaf)
        if not valid.any():
            continue
        wr = W - cw
        pr = P - cp
        with np.errstate(divide="ignore", invalid="ignore"):
            g = cp * (cw - cp) / cw + pr * (wr - pr) / wr
        g = np.where(valid, g, np.inf)
        i = int(np.argmin(g))
        if g[i] < best_g:
            best_g, best_f, best_t = g[i], int(f), 0.5 * (xs[i] + xs[i + 1])
    return best_f, best_t


def _grow_tree(X, y, w, c, hp: HyperParams, n_try: int, rng) -> DecisionTree:
    feature, threshold, left, right, coverage, value = [], [], [], [], [], []

    def new_node(idx):
        W = w[idx].sum()
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        coverage.append(W)
        value.append((w[idx] * y[idx]).sum() / W)
        return len(feature) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    k = X.shape[1]
    while stack:
        node, idx, depth = stack.pop()
        v = value[node]
        if depth >= hp.max_depth or c[idx].sum() < 2 * hp.min_samples_leaf or v <= 0.0 or v >= 1.0:
            continue
        feats = np.sort(rng.choice(k, size=n_try, replace=False))
        f, t = _best_split(X[idx], y[idx], w[idx], c[idx], feats, hp.min_samples_leaf)
        if f < 0:
            continue
        go_left = X[idx, f] <= t
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, t
        ln, rn = new_node(li), new_node(ri)
        left[node], right[node] = ln, rn
        stack.append((rn, ri, depth + 1))
        stack.append((ln, li, depth + 1))
    return DecisionTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=float),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(coverage, dtype=float),
        np.array(value, dtype=float),
    )


def fit_forest(data: LabeledDataset, hp: HyperParams = HyperParams()) -> RandomForest:
    """Bootstrap-aggregated Gini trees; identical output for identical (data, hp)."""
    X = np.ascontiguousarray(data.features, dtype=float)
    y = np.asarray(data.labels, dtype=float)
    n, k = X.shape
    if n < 2:
        raise TrainingError("need at least two samples")
    n_pos = y.sum()
    if n_pos == 0 or n_pos == n:
        raise TrainingError("training data contains a single class")
    if hp.class_weight == "balanced":
        cw = np.where(y == 1, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))
    else:
        cw = np.ones(n)
    n_try = max(1, math.ceil(hp.max_features * k))
    rng = np.random.default_rng(hp.seed)
    trees = []
    for _ in range(hp.n_trees):
        counts = np.bincount(rng.integers(0, n, size=n), minlength=n)
        rows = np.flatnonzero(counts)
        c = counts[rows].astype(float)
        trees.append(_grow_tree(X[rows], y[rows], c * cw[rows], c, hp, n_try, rng))
    return RandomForest(tuple(trees), hp, k, float(n_pos / n))


def predict_proba(model: RandomForest, x) -> np.ndarray | float:
    return model.predict_proba(x)


# --------------------------------------------------------------------------
# metrics


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise SchemaError("scores and labels differ in length")
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    return s, y, n1, n0


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC from mid-ranks: P(s+ > s-) + P(tie)/2."""
    s, y, n1, n0 = _check_binary(scores, labels)
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    # mid-rank of each run of equal scores (ranks 1-based)
    starts = np.flatnonzero(np.concatenate([[True], ss[1:] != ss[:-1]]))
    ends = np.concatenate([starts[1:], [len(ss)]])
    mid = (starts + ends + 1) / 2.0
    ranks = np.empty(len(ss))
    ranks[order] = np.repeat(mid, ends - starts)
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """False- and true-positive rates at every distinct threshold, from (0,0) to (1,1)."""
    s, y, n1, n0 = _check_binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    ss, yy = s[order], y[order]
    last = np.concatenate([ss[1:] != ss[:-1], [True]])
    tp = np.cumsum(yy)[last]
    fp = np.cumsum(1 - yy)[last]
    return np.concatenate([[0.0], fp / n0]), np.concatenate([[0.0], tp / n1])


# --------------------------------------------------------------------------
# grouped cross-validation


@dataclass
class CVResult:
    mean_auroc: float
    fold_aurocs: list[float]
    fold_of_group: dict = field(default_factory=dict)


def group_folds(groups: np.ndarray, n_folds: int, seed: int) -> np.ndarray:
    """Fold index per row; every group lands in exactly one fold."""
    uniq = np.unique(groups)
    if len(uniq) < n_folds:
        raise InputError(f"{len(uniq)} groups cannot fill {n_folds} folds")
    perm = np.random.default_rng(seed).permutation(len(uniq))
    fold_of = np.empty(len(uniq), dtype=np.int64)
    fold_of[perm] = np.arange(len(uniq)) % n_folds
    return fold_of[np.searchsorted(uniq, groups)]


def cross_validate(data: LabeledDataset, hp: HyperParams, n_folds: int = 6, seed: int | None = None) -> CVResult:
    """Mean holdout AUROC over patient-grouped folds; single-class folds are skipped."""
    fold = group_folds(data.groups, n_folds, hp.seed if seed is None else seed)
    scores = []
    for f in range(n_folds):
        test = fold == f
        tr, te = data.subset(np.flatnonzero(~test)), data.subset(np.flatnonzero(test))
        if len(np.unique(te.labels)) < 2 or len(np.unique(tr.labels)) < 2:
            warnings.warn(f"fold {f} has a single class; skipped", UserWarning, stacklevel=2)
            scores.append(float("nan"))
            continue
        model = fit_forest(tr, hp)
        scores.append(auroc(model.predict_proba(te.features), te.labels))
    valid = [s for s in scores if not math.isnan(s)]
    if not valid:
        raise UndefinedMetricError("no fold had both classes")
    groups_sorted = np.unique(data.groups)
    fog = {str(g): int(fold[np.flatnonzero(data.groups == g)[0]]) for g in groups_sorted}
    return CVResult(float(np.mean(valid)), scores, fog)


# --------------------------------------------------------------------------
# hyperparameter search


@dataclass
class Trial:
    number: int
    strategy: str
    params: dict
    mean_auroc: float
    fold_aurocs: list[float]


def _budget_split(budget: int, strategies: Sequence[str]) -> list[int]:
    base, extra = divmod(budget, len(strategies))
    return [base + (1 if i < extra else 0) for i in range(len(strategies))]


def search_hyperparams(
    data: LabeledDataset,
    space: Mapping[str, Sequence],
    budget: int,
    strategies: Sequence[str] = ("random",),
    seed: int = 0,
    n_folds: int = 6,
    base: HyperParams = HyperParams(),
) -> tuple[HyperParams, list[Trial]]:
    """Maximize grouped CV AUROC over a discrete space.

    ``space`` maps HyperParams field names to candidate values. The budget is
    split across ``strategies`` (run in order): ``random`` samples uniformly,
    ``grid`` walks the Cartesian product, ``coordinate`` moves the incumbent
    to neighbouring values one parameter at a time while that improves it.
    Repeated configurations reuse their cached score.
    """
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    if not space or any(len(v) == 0 for v in space.values()):
        raise ConfigError("hyperparameter space is empty")
    names = sorted(space)
    valid = {f.name for f in fields(HyperParams)}
    if set(names) - valid:
        raise ConfigError(f"unknown hyperparameters {sorted(set(names) - valid)}")
    for s in strategies:
        if s not in ("random", "grid", "coordinate"):
            raise ConfigError(f"unknown strategy {s!r}")
    values = {k: list(space[k]) for k in names}
    rng = np.random.default_rng(seed)
    cache: dict[tuple, CVResult] = {}
    log: list[Trial] = []

    def evaluate(idx: tuple[int, ...], strategy: str) -> float:
        params = {k: values[k][i] for k, i in zip(names, idx)}
        if idx not in cache:
            cache[idx] = cross_validate(data, replace(base, **params), n_folds, seed)
        r = cache[idx]
        log.append(Trial(len(log), strategy, params, r.mean_auroc, list(r.fold_aurocs)))
        return r.mean_auroc

    def incumbent() -> tuple[int, ...]:
        return max(cache, key=lambda i: (cache[i].mean_auroc, [-j for j in i]))

    for strategy, alloc in zip(strategies, _budget_split(budget, strategies)):
        if strategy == "random":
            for _ in range(alloc):
                evaluate(tuple(int(rng.integers(len(values[k]))) for k in names), strategy)
        elif strategy == "grid":
            grid = itertools.product(*(range(len(values[k])) for k in names))
            for idx in itertools.islice(grid, alloc):
                evaluate(tuple(idx), strategy)
        else:
            used = 0
            if not cache:
                evaluate(tuple(0 for _ in names), strategy)
                used += 1
            improved = True
            while used < alloc and improved:
                improved = False
                for p, k in enumerate(names):
                    for step in (-1, 1):
                        cur = incumbent()
                        j = cur[p] + step
                        if not 0 <= j < len(values[k]) or used >= alloc:
                            continue
                        cand = cur[:p] + (j,) + cur[p + 1 :]
                        if cand in cache:
                            continue
                        before = cache[cur].mean_auroc
                        evaluate(cand, strategy)
                        used += 1
                        if cache[cand].mean_auroc > before:
                            improved = True
    best = incumbent()
    return replace(base, **{k: values[k][i] for k, i in zip(names, best)}), log


def write_trial_log(log: Sequence[Trial], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "strategy", "params", "mean_auroc", "fold_aurocs"])
        for t in log:
            w.writerow(
                [t.number, t.strategy, json.dumps(t.params, sort_keys=True), repr(t.mean_auroc), json.dumps(t.fold_aurocs)]
            )
