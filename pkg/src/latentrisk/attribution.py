"""Exact SHAP attribution for the forest, rankings, waterfalls and signature summaries.

Contributions use the path-dependent convention: the expected model output
given a feature subset follows the instance at splits on known features and
averages children by training coverage elsewhere. ``tree_shap`` runs the
polynomial-time path algorithm; ``brute_force_shap`` enumerates every subset
of the features the model uses and serves as its oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .errors import InputError, ModelArtifactError, SchemaError
from .forest import DecisionTree, RandomForest

MAX_BRUTE_FORCE_FEATURES = 15


@dataclass(frozen=True)
class ShapVector:
    base_value: float
    contributions: np.ndarray
    prediction: float

    @property
    def local_accuracy_error(self) -> float:
        return abs(self.base_value + float(np.sum(self.contributions)) - self.prediction)


# --------------------------------------------------------------------------
# path-dependent TreeSHAP kernel


@numba.njit(cache=True)
def _extend(pf, pz, po, pw, d, zero, one, feat):
    pf[d] = feat
    pz[d] = zero
    po[d] = one
    pw[d] = 1.0 if d == 0 else 0.0
    for i in range(d - 1, -1, -1):
        pw[i + 1] += one * pw[i] * (i + 1) / (d + 1)
        pw[i] = zero * pw[i] * (d - i) / (d + 1)


@numba.njit(cache=True)
def _unwind(pf, pz, po, pw, d, idx):
    one = po[idx]
    zero = pz[idx]
    nxt = pw[d]
    for i in range(d - 1, -1, -1):
        if one != 0.0:
            tmp = pw[i]
            pw[i] = nxt * (d + 1) / ((i + 1) * one)
            nxt = tmp - pw[i] * zero * (d - i) / (d + 1)
        else:
            pw[i] = pw[i] * (d + 1) / (zero * (d - i))
    for i in range(idx, d):
        pf[i] = pf[i + 1]
        pz[i] = pz[i + 1]
        po[i] = po[i + 1]


@numba.njit(cache=True)
def _unwound_sum(pz, po, pw, d, idx):
    one = po[idx]
    zero = pz[idx]
    nxt = pw[d]
    total = 0.0
    if one != 0.0:
        for i in range(d - 1, -1, -1):
            tmp = nxt / ((i + 1) * one)
            total += tmp
            nxt = pw[i] - tmp * zero * (d - i)
    else:
        for i in range(d - 1, -1, -1):
            total += pw[i] / (zero * (d - i))
    return total * (d + 1)


@numba.njit(cache=True)
def _tree_shap_one(feature, threshold, left, right, coverage, value, x, phi, pf, pz, po, pw, plen, st_node, st_level, st_zero, st_one, st_feat):
    # pf/pz/po/pw hold one copy of the unique path per level; the st_* arrays are the DFS stack
    st_node[0] = 0
    st_level[0] = 0
    st_zero[0] = 1.0
    st_one[0] = 1.0
    st_feat[0] = -1
    sp = 1
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        lv = st_level[sp]
        if lv == 0:
            d = 0
        else:
            d = plen[lv - 1] + 1
            for i in range(d):
                pf[lv, i] = pf[lv - 1, i]
                pz[lv, i] = pz[lv - 1, i]
                po[lv, i] = po[lv - 1, i]
                pw[lv, i] = pw[lv - 1, i]
        _extend(pf[lv], pz[lv], po[lv], pw[lv], d, st_zero[sp], st_one[sp], st_feat[sp])
        plen[lv] = d
        f = feature[node]
        if f < 0:
            for i in range(1, d + 1):
                w = _unwound_sum(pz[lv], po[lv], pw[lv], d, i)
                phi[pf[lv, i]] += w * (po[lv, i] - pz[lv, i]) * value[node]
            continue
        if x[f] <= threshold[node]:
            hot = left[node]
            cold = right[node]
        else:
            hot = right[node]
            cold = left[node]
        inc_zero = 1.0
        inc_one = 1.0
        k = 1
        while k <= d:
            if pf[lv, k] == f:
                break
            k += 1
        if k <= d:
            inc_zero = pz[lv, k]
            inc_one = po[lv, k]
            _unwind(pf[lv], pz[lv], po[lv], pw[lv], d, k)
            plen[lv] = d - 1
        cov = coverage[node]
        st_node[sp] = cold
        st_level[sp] = lv + 1
        st_zero[sp] = coverage[cold] / cov * inc_zero
        st_one[sp] = 0.0
        st_feat[sp] = f
        sp += 1
        st_node[sp] = hot
        st_level[sp] = lv + 1
        st_zero[sp] = coverage[hot] / cov * inc_zero
        st_one[sp] = inc_one
        st_feat[sp] = f
        sp += 1


@numba.njit(cache=True)
def _forest_shap(feature, threshold, left, right, coverage, value, offsets, depths, X, n_features):
    n = X.shape[0]
    n_trees = len(offsets) - 1
    phi = np.zeros((n, n_features + 1))
    L = depths.max() + 2
    pf = np.zeros((L, L), dtype=np.int64)
    pz = np.zeros((L, L))
    po = np.zeros((L, L))
    pw = np.zeros((L, L))
    plen = np.zeros(L, dtype=np.int64)
    st_node = np.zeros(2 * L + 2, dtype=np.int64)
    st_level = np.zeros(2 * L + 2, dtype=np.int64)
    st_zero = np.zeros(2 * L + 2)
    st_one = np.zeros(2 * L + 2)
    st_feat = np.zeros(2 * L + 2, dtype=np.int64)
    for t in range(n_trees):
        lo = offsets[t]
        hi = offsets[t + 1]
        for r in range(n):
            _tree_shap_one(
                feature[lo:hi], threshold[lo:hi], left[lo:hi], right[lo:hi], coverage[lo:hi], value[lo:hi],
                X[r], phi[r], pf, pz, po, pw, plen, st_node, st_level, st_zero, st_one, st_feat,
            )
    return phi / n_trees


def _tree_depth(tree: DecisionTree) -> int:
    depth = np.zeros(tree.n_nodes, dtype=np.int64)
    for i in range(tree.n_nodes):
        if tree.feature[i] >= 0:
            depth[tree.left[i]] = depth[i] + 1
            depth[tree.right[i]] = depth[i] + 1
    return int(depth.max())


def _check_coverage(model: RandomForest) -> None:
    for t in model.trees:
        if t.coverage is None or len(t.coverage) != t.n_nodes or not np.all(t.coverage > 0):
            raise ModelArtifactError("tree lacks positive node coverage; cannot compute SHAP")


def expected_value(model: RandomForest) -> float:
    """Coverage-weighted mean output, i.e. the value with no features known."""
    return float(np.mean([_root_expectation(t) for t in model.trees]))


def _root_expectation(tree: DecisionTree) -> float:
    leaves = tree.is_leaf
    return float(np.sum(tree.coverage[leaves] * tree.value[leaves]) / tree.coverage[0])


def tree_shap_matrix(model: RandomForest, X) -> tuple[float, np.ndarray, np.ndarray]:
    """SHAP for every row of ``X``: returns (base_value, phi n x k, predictions)."""
    _check_coverage(model)
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
    if X.shape[1] != model.n_features:
        raise SchemaError(f"expected {model.n_features} features, got {X.shape[1]}")
    trees = model.trees
    offsets = np.concatenate([[0], np.cumsum([t.n_nodes for t in trees])]).astype(np.int64)
    cat = lambda name: np.ascontiguousarray(np.concatenate([getattr(t, name) for t in trees]))  # noqa: E731
    depths = np.array([_tree_depth(t) for t in trees], dtype=np.int64)
    phi = _forest_shap(
        cat("feature"), cat("threshold"), cat("left"), cat("right"), cat("coverage"), cat("value"),
        offsets, depths, X, model.n_features,
    )
    return expected_value(model), phi[:, : model.n_features], np.asarray(model.predict_proba(X))


def tree_shap(model: RandomForest, x) -> ShapVector:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise SchemaError("tree_shap explains a single feature vector")
    base, phi, pred = tree_shap_matrix(model, x[None, :])
    return ShapVector(base, phi[0], float(pred[0]))


# --------------------------------------------------------------------------
# exhaustive oracle


def _background_coverage(tree: DecisionTree, background: np.ndarray) -> np.ndarray:
    reached = np.zeros(tree.n_nodes)
    node = np.zeros(len(background), dtype=np.int64)
    alive = np.ones(len(background), dtype=bool)
    np.add.at(reached, node, 1.0)
    while alive.any():
        idx = np.flatnonzero(alive)
        f = tree.feature[node[idx]]
        leaf = f < 0
        alive[idx[leaf]] = False
        idx, f = idx[~leaf], f[~leaf]
        go_left = background[idx, f] <= tree.threshold[node[idx]]
        node[idx] = np.where(go_left, tree.left[node[idx]], tree.right[node[idx]])
        np.add.at(reached, node[idx], 1.0)
    return reached


def _subset_values(tree: DecisionTree, coverage: np.ndarray, x: np.ndarray, active: list[int]) -> np.ndarray:
    """E[f(x) | x_S] for every subset S of ``active``, indexed by bitmask."""
    n_sub = 1 << len(active)
    masks = np.arange(n_sub)
    bit = {f: j for j, f in enumerate(active)}
    out = np.zeros(n_sub)
    stack = [(0, np.ones(n_sub))]
    while stack:
        node, mass = stack.pop()
        f = tree.feature[node]
        if f < 0:
            out += mass * tree.value[node]
            continue
        l, r = tree.left[node], tree.right[node]
        known = (masks >> bit[f]) & 1 == 1
        hot, cold = (l, r) if x[f] <= tree.threshold[node] else (r, l)
        cov = coverage[node]
        with np.errstate(invalid="ignore", divide="ignore"):
            frac_hot = coverage[hot] / cov if cov > 0 else 0.0
            frac_cold = coverage[cold] / cov if cov > 0 else 0.0
        stack.append((hot, np.where(known, mass, mass * frac_hot)))
        stack.append((cold, np.where(known, 0.0, mass * frac_cold)))
    return out


def brute_force_shap(model: RandomForest, x, background: np.ndarray | None = None) -> ShapVector:
    """Exact Shapley values by enumerating all subsets of the features the forest uses.

    With ``background`` the node coverages are recounted from those rows;
    otherwise the trees' stored training coverage is used, matching
    ``tree_shap``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_features,):
        raise SchemaError(f"expected {model.n_features} features")
    active = sorted(model.used_features())
    d = len(active)
    if d > MAX_BRUTE_FORCE_FEATURES:
        raise InputError(f"{d} active features; brute force refuses more than {MAX_BRUTE_FORCE_FEATURES}")
    if background is None:
        _check_coverage(model)
        covs = [t.coverage for t in model.trees]
    else:
        covs = [_background_coverage(t, np.asarray(background, dtype=float)) for t in model.trees]
    v = np.mean([_subset_values(t, c, x, active) for t, c in zip(model.trees, covs)], axis=0)
    phi = np.zeros(model.n_features)
    masks = np.arange(1 << d)
    sizes = np.array([bin(s).count("1") for s in masks])
    weight = np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) if s < d else 0.0 for s in sizes])
    for j, f in enumerate(active):
        without = masks[(masks >> j) & 1 == 0]
        phi[f] = np.sum(weight[without] * (v[without | (1 << j)] - v[without]))
    return ShapVector(float(v[0]), phi, float(v[-1]))


# --------------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class RankEntry:
    source: int
    mean_abs: float
    max_abs: float


@dataclass(frozen=True)
class SourceRanking:
    statistic: str
    entries: tuple[RankEntry, ...]

    def order(self) -> list[int]:
        return [e.source for e in self.entries]


def rank_sources(shap_matrix, statistic: str = "mean_abs") -> SourceRanking:
    """Sort sources by mean or max absolute SHAP, descending, ties by index."""
    S = np.atleast_2d(np.asarray(shap_matrix, dtype=float))
    if S.shape[0] < 1:
        raise InputError("need at least one record")
    mean_abs = np.abs(S).mean(axis=0)
    max_abs = np.abs(S).max(axis=0)
    if statistic == "mean_abs":
        key = mean_abs
    elif statistic == "max_abs":
        key = max_abs
    else:
        raise InputError(f"unknown statistic {statistic!r}")
    idx = np.arange(S.shape[1])
    order = np.lexsort((idx, -key))
    return SourceRanking(statistic, tuple(RankEntry(int(i), float(mean_abs[i]), float(max_abs[i])) for i in order))


@dataclass(frozen=True)
class SignatureEntry:
    variable: str
    weight: float
    bar: float  # weight / max |weight|


@dataclass(frozen=True)
class SignatureDescription:
    source: int
    entries: tuple[SignatureEntry, ...]
    hist_edges: np.ndarray | None = None
    hist_counts: np.ndarray | None = None

    @property
    def log_counts(self) -> np.ndarray | None:
        return None if self.hist_counts is None else np.log10(1.0 + self.hist_counts)

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "entries": [{"variable": e.variable, "weight": e.weight, "bar": e.bar} for e in self.entries],
            "histogram": None
            if self.hist_counts is None
            else {
                "edges": self.hist_edges.tolist(),
                "counts": self.hist_counts.astype(int).tolist(),
                "log10_1p_counts": self.log_counts.tolist(),
            },
        }


def describe_signature(
    A: np.ndarray,
    j: int,
    top_n: int = 10,
    variable_names: Sequence[str] | None = None,
    expressions: np.ndarray | None = None,
    bins: int = 30,
) -> SignatureDescription:
    """Largest-magnitude entries of signature column ``j`` plus an expression histogram."""
    A = np.asarray(A, dtype=float)
    m, k = A.shape
    if not 0 <= j < k:
        raise IndexError(f"source {j} out of range for k={k}")
    names = list(variable_names) if variable_names is not None else [f"v{i}" for i in range(m)]
    col = A[:, j]
    order = np.lexsort((np.arange(m), -np.abs(col)))[: min(top_n, m)]
    scale = np.max(np.abs(col))
    scale = scale if scale > 0 else 1.0
    entries = tuple(SignatureEntry(names[i], float(col[i]), float(col[i] / scale)) for i in order)
    edges = counts = None
    if expressions is not None:
        counts, edges = np.histogram(np.asarray(expressions, dtype=float), bins=bins)
    return SignatureDescription(j, entries, edges, counts)


@dataclass(frozen=True)
class WaterfallStep:
    label: str
    value: float
    start: float
    end: float


@dataclass(frozen=True)
class Waterfall:
    base_value: float
    prediction: float
    steps: tuple[WaterfallStep, ...]

    def to_dict(self) -> dict:
        return {
            "base_value": self.base_value,
            "prediction": self.prediction,
            "steps": [{"label": s.label, "value": s.value, "start": s.start, "end": s.end} for s in self.steps],
        }


def waterfall(shap: ShapVector, top_n: int = 10, labels: Sequence[str] | None = None) -> Waterfall:
    """Largest contributions first, the rest pooled as "other sources"."""
    phi = np.asarray(shap.contributions, dtype=float)
    k = len(phi)
    names = list(labels) if labels is not None else [f"source {i}" for i in range(k)]
    nz = np.flatnonzero(phi != 0)
    order = nz[np.lexsort((nz, -np.abs(phi[nz])))]
    shown, rest = order[:top_n], order[top_n:]
    steps = []
    cur = shap.base_value
    for i in shown:
        steps.append(WaterfallStep(names[i], float(phi[i]), cur, cur + float(phi[i])))
        cur += float(phi[i])
    if len(rest):
        other = float(np.sum(phi[rest]))
        steps.append(WaterfallStep(f"other sources ({len(rest)})", other, cur, cur + other))
    return Waterfall(shap.base_value, shap.prediction, tuple(steps))


def to_log_odds(shap: ShapVector, eps: float = 1e-6) -> ShapVector:
    """Rescale probability-space contributions to log-odds, keeping additivity.

    Contributions are scaled by the ratio of the logit gap to the probability
    gap between base value and prediction. This is a presentation transform,
    not a log-odds model.
    """
    logit = lambda p: math.log(min(max(p, eps), 1 - eps) / (1 - min(max(p, eps), 1 - eps)))  # noqa: E731
    lb, lp = logit(shap.base_value), logit(shap.prediction)
    gap = shap.prediction - shap.base_value
    if abs(gap) < 1e-15:
        scale = 1.0 / max(shap.base_value * (1 - shap.base_value), eps)
    else:
        scale = (lp - lb) / gap
    return ShapVector(lb, shap.contributions * scale, lb + float(np.sum(shap.contributions * scale)))


def expression_percentiles(values: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Percentile (0-100) of each source expression within a reference population, per row."""
    values = np.atleast_2d(values)
    reference = np.atleast_2d(reference)
    out = np.empty_like(values, dtype=float)
    for i in range(values.shape[0]):
        ref = np.sort(reference[i])
        out[i] = 100.0 * np.searchsorted(ref, values[i], side="right") / len(ref)
    return out
