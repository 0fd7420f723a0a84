"""Downstream OOD detectors: min-max scaling, L2 logistic regression with
stratified k-fold selection of the penalty, a Gini random forest, and an
isolation forest. Class 1 (OOD) is the positive class everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LAMBDA_GRID = tuple(10.0 ** k for k in range(-4, 5))
EULER_GAMMA = 0.5772156649015329


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X.reshape(-1, 1) if X.ndim == 1 else X


def _check_binary(y) -> np.ndarray:
    y = np.asarray(y).astype(np.int64)
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be 0 (in-distribution) or 1 (OOD)")
    if len(np.unique(y)) < 2:
        raise ValueError("both classes must be present to fit a detector")
    return y


# -- scaling -----------------------------------------------------------------

@dataclass
class MinMaxScaler:
    min_: np.ndarray
    max_: np.ndarray


def fit_scaler(X) -> MinMaxScaler:
    X = _as_matrix(X)
    if len(X) < 1:
        raise ValueError("cannot fit a scaler on zero rows")
    return MinMaxScaler(X.min(axis=0), X.max(axis=0))


def transform(scaler: MinMaxScaler, X) -> np.ndarray:
    """Map the training range onto [0, 1]; out-of-range values extrapolate, constant columns become 0."""
    X = _as_matrix(X)
    if X.shape[1] != scaler.min_.shape[0]:
        raise ValueError(f"scaler fitted on {scaler.min_.shape[0]} features, got {X.shape[1]}")
    span = scaler.max_ - scaler.min_
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (X - scaler.min_) / safe, 0.0)


# -- logistic regression -----------------------------------------------------

@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    lam: float
    cv_losses: dict = field(default_factory=dict)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def regularized_loss(X, y, w, b, lam) -> float:
    """Mean log-loss plus ``lam/2 * |w|^2`` (bias unpenalized)."""
    z = X @ w + b
    # log(1 + exp(-z)) for y=1, log(1 + exp(z)) for y=0
    return float(np.mean(np.logaddexp(0.0, np.where(y == 1, -z, z))) + 0.5 * lam * w @ w)


def _gradient_descent(X, y, lam, max_iter=10_000, tol=1e-6, history=None):
    n, d = X.shape
    # diagonal steps from the majorizer L*I + diag(lam, .., lam, 0) >= Hessian -> monotone descent,
    # and the unpenalized bias keeps a usable step however large lam is
    Xa = np.hstack([X, np.ones((n, 1))])
    L = 0.25 * np.linalg.eigvalsh(Xa.T @ Xa / n).max()
    step_w, step_b = 1.0 / (L + lam), 1.0 / L
    w = np.zeros(d)
    b = 0.0
    for _ in range(max_iter):
        r = _sigmoid(X @ w + b) - y
        gw = X.T @ r / n + lam * w
        gb = r.mean()
        if max(np.abs(gw).max(initial=0.0), abs(gb)) < tol:
            break
        w = w - step_w * gw
        b = b - step_b * gb
        if history is not None:
            history.append(regularized_loss(X, y, w, b, lam))
    return w, b


def stratified_folds(y, k: int, seed: int) -> np.ndarray:
    """Fold id per row; each class is shuffled then dealt round-robin."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    folds = np.empty(len(y), dtype=np.int64)
    offset = 0
    for cls in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == cls))
        folds[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    return folds


def fit_logistic(X, y, lambda_grid=LAMBDA_GRID, k: int = 3, seed: int = 0,
                 max_iter: int = 10_000, tol: float = 1e-6) -> LogisticModel:
    X = _as_matrix(X)
    y = _check_binary(y)
    if len(y) < k:
        raise ValueError(f"need at least {k} rows for {k}-fold cross-validation, got {len(y)}")
    folds = stratified_folds(y, k, seed)
    cv = {}
    for lam in lambda_grid:
        losses = []
        for f in range(k):
            tr, va = folds != f, folds == f
            w, b = _gradient_descent(X[tr], y[tr], lam, max_iter, tol)
            losses.append(regularized_loss(X[va], y[va], w, b, 0.0))
        cv[lam] = float(np.mean(losses))
    best = min(lambda_grid, key=lambda lam: cv[lam])
    w, b = _gradient_descent(X, y, best, max_iter, tol)
    return LogisticModel(w, float(b), float(best), cv)


def predict_proba_logistic(model: LogisticModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return _sigmoid(X @ model.weights + model.bias)


# -- random forest -----------------------------------------------------------

@dataclass
class Tree:
    """Array-encoded binary tree; leaves have ``feature == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, 2) class frequencies
    n_samples: np.ndarray
    impurity: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict_proba(self, X) -> np.ndarray:
        return self.value[self.apply(_as_matrix(X)), 1]


@dataclass
class Forest:
    trees: list[Tree]
    n_features: int
    max_features: int
    seed: int = 0

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _gini(pos: np.ndarray, n: np.ndarray) -> np.ndarray:
    p = pos / n
    return 2.0 * p * (1.0 - p)


def _best_split(Xn: np.ndarray, yn: np.ndarray, features):
    """Lowest weighted child Gini over ``features``; ties -> smaller feature, then smaller threshold."""
    n = len(yn)
    best = None
    for f in sorted(features):
        order = np.argsort(Xn[:, f], kind="stable")
        xs = Xn[order, f]
        valid = np.flatnonzero(xs[1:] > xs[:-1])
        if valid.size == 0:
            continue
        cum = np.cumsum(yn[order])
        nl = valid + 1.0
        pl = cum[valid]
        nr = n - nl
        pr = cum[-1] - pl
        score = (nl * _gini(pl, nl) + nr * _gini(pr, nr)) / n
        j = int(np.argmin(score))
        s = float(score[j])
        if best is None or s < best[0] - 1e-12:
            thr = 0.5 * (xs[valid[j]] + xs[valid[j] + 1])
            if not thr < xs[valid[j] + 1]:
                thr = xs[valid[j]]
            best = (s, f, float(thr))
    return best


def _grow_tree(X: np.ndarray, y: np.ndarray, max_features: int, rng: np.random.Generator) -> Tree:
    feature, threshold, left, right, value, n_samples, impurity = [], [], [], [], [], [], []

    def new_node(idx):
        pos = float(y[idx].sum())
        cnt = float(len(idx))
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append((1.0 - pos / cnt, pos / cnt))
        n_samples.append(len(idx))
        impurity.append(float(_gini(np.array(pos), np.array(cnt))))
        return len(feature) - 1

    d = X.shape[1]
    stack = [(new_node(np.arange(len(y))), np.arange(len(y)))]
    while stack:
        node, idx = stack.pop()
        if len(idx) < 2 or impurity[node] == 0.0:
            continue
        Xn, yn = X[idx], y[idx]
        chosen = rng.choice(d, size=max_features, replace=False)
        split = _best_split(Xn, yn, chosen)
        if split is None:
            # every drawn feature is constant here; fall back to the rest
            rest = np.setdiff1d(np.arange(d), chosen)
            split = _best_split(Xn, yn, rest) if rest.size else None
        if split is None:
            continue
        _, f, thr = split
        mask = Xn[:, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node] = int(f)
        threshold[node] = thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri))
        stack.append((left[node], li))

    return Tree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(value), np.array(n_samples, dtype=np.int64),
                np.array(impurity))


def fit_random_forest(X, y, n_trees: int = 500, seed: int = 0, max_features: int | None = None) -> Forest:
    """Bootstrap-aggregated Gini trees grown to purity.

    Tree ``t`` draws its bootstrap and feature subsets from ``default_rng([seed, t])``,
    so each tree is independent of how the others are scheduled.
    """
    X = _as_matrix(X)
    y = _check_binary(y)
    n, d = X.shape
    mtry = max(1, int(math.floor(math.sqrt(d)))) if max_features is None else int(max_features)
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        boot = rng.integers(0, n, size=n)
        trees.append(_grow_tree(X[boot], y[boot].astype(np.float64), mtry, rng))
    return Forest(trees, d, mtry, seed)


def predict_proba_forest(forest: Forest, X) -> np.ndarray:
    X = _as_matrix(X)
    total = np.zeros(len(X))
    for tree in forest.trees:
        total += tree.predict_proba(X)
    return total / forest.n_trees


def gini_importances(forest: Forest) -> np.ndarray:
    """Mean decrease in impurity per feature, averaged over trees and normalized to sum 1.

    A forest without any split returns the zero vector.
    """
    imp = np.zeros(forest.n_features)
    for tree in forest.trees:
        root_n = tree.n_samples[0]
        for node in np.flatnonzero(tree.feature >= 0):
            l, r = tree.left[node], tree.right[node]
            decrease = (tree.n_samples[node] * tree.impurity[node]
                        - tree.n_samples[l] * tree.impurity[l]
                        - tree.n_samples[r] * tree.impurity[r]) / root_n
            imp[tree.feature[node]] += decrease
    imp /= max(forest.n_trees, 1)
    total = imp.sum()
    return imp / total if total > 0 else imp


# -- isolation forest --------------------------------------------------------

def average_path_length(n) -> np.ndarray:
    """Expected unsuccessful-search depth in a BST of ``n`` points (0 for n <= 1)."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    big = n > 2
    out[n == 2] = 1.0
    nb = n[big]
    out[big] = 2.0 * (np.log(nb - 1.0) + EULER_GAMMA) - 2.0 * (nb - 1.0) / nb
    return out


@dataclass
class IsolationForestModel:
    trees: list[Tree]  # value[:, 0] holds the leaf size
    subsample_size: int
    height_limit: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _isolation_tree(X: np.ndarray, height_limit: int, rng: np.random.Generator):
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def new_node(n, dep):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        depth.append(dep)
        return len(feature) - 1

    stack = [(new_node(len(X), 0), np.arange(len(X)))]
    while stack:
        node, idx = stack.pop()
        if depth[node] >= height_limit or len(idx) <= 1:
            continue
        Xn = X[idx]
        lo, hi = Xn.min(axis=0), Xn.max(axis=0)
        splittable = np.flatnonzero(hi > lo)
        if splittable.size == 0:
            continue
        f = int(splittable[rng.integers(splittable.size)])
        thr = float(rng.uniform(lo[f], hi[f]))
        mask = Xn[:, f] < thr
        feature[node] = f
        threshold[node] = thr
        left[node] = new_node(int(mask.sum()), depth[node] + 1)
        right[node] = new_node(int((~mask).sum()), depth[node] + 1)
        stack.append((left[node], idx[mask]))
        stack.append((right[node], idx[~mask]))

    n_nodes = len(feature)
    # encode for Tree.apply: go left iff x <= threshold, so nudge strict "<" splits
    thr_arr = np.array(threshold)
    thr_arr = np.where(np.array(feature) >= 0, np.nextafter(thr_arr, -np.inf), thr_arr)
    value = np.stack([np.array(size, dtype=np.float64), np.array(depth, dtype=np.float64)], axis=1)
    return Tree(np.array(feature, dtype=np.int64), thr_arr, np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), value, np.array(size, dtype=np.int64), np.zeros(n_nodes))


def fit_isolation_forest(X, n_trees: int = 100, subsample: int = 256, seed: int = 0) -> IsolationForestModel:
    X = _as_matrix(X)
    if len(X) < 2:
        raise ValueError(f"isolation forest needs at least 2 rows, got {len(X)}")
    psi = min(int(subsample), len(X))
    limit = int(math.ceil(math.log2(psi)))
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        rows = rng.choice(len(X), size=psi, replace=False)
        trees.append(_isolation_tree(X[rows], limit, rng))
    return IsolationForestModel(trees, psi, limit)


def path_lengths(model: IsolationForestModel, X) -> np.ndarray:
    """Per-tree path lengths, shape ``(n_trees, n)``; leaves add c(leaf size)."""
    X = _as_matrix(X)
    out = np.empty((model.n_trees, len(X)))
    for k, tree in enumerate(model.trees):
        leaf = tree.apply(X)
        out[k] = tree.value[leaf, 1] + average_path_length(tree.value[leaf, 0])
    return out


def anomaly_score(model: IsolationForestModel, X) -> np.ndarray:
    """``2 ** (-E[h(x)] / c(psi))`` in (0, 1]; larger means more anomalous."""
    c = float(average_path_length(model.subsample_size))
    h = path_lengths(model, X).mean(axis=0)
    if c == 0:
        return np.ones(len(h))
    return np.power(2.0, -h / c)
