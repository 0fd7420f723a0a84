"""Per-datum uncertainty features from an MC run.

Softmax baselines (max softmax probability, mutual information, predictive
entropy) plus, for every captured layer, the maximum pairwise distance between
the T embedding samples and their mean norm.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bnn import MCRun, Network, mc_sample_many

EMBED_SHIFT = 1e-6
METRICS = ("cosine", "euclidean")
BASELINE_COLUMNS = ("max_softmax", "mutual_info", "pred_entropy")
FEATURE_SETS = ("last", "last+spread")


def _check_pair(u, v):
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape or u.size == 0:
        raise ValueError(f"vectors must have equal nonzero length, got {u.size} and {v.size}")
    return u, v


def cosine_distance(u, v) -> float:
    u, v = _check_pair(u, v)
    u = u + EMBED_SHIFT
    v = v + EMBED_SHIFT
    d = 1.0 - float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return min(max(d, 0.0), 2.0)


def euclidean_distance(u, v) -> float:
    u, v = _check_pair(u, v)
    return float(np.linalg.norm(u - v))


def pairwise_distances(samples, metric: str = "cosine") -> np.ndarray:
    X = np.asarray(samples, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    if metric == "cosine":
        S = X + EMBED_SHIFT
        S = S / np.linalg.norm(S, axis=1, keepdims=True)
        return np.clip(1.0 - S @ S.T, 0.0, 2.0)
    if metric == "euclidean":
        D = np.zeros((len(X), len(X)))
        for i in range(len(X) - 1):
            D[i, i + 1 :] = np.linalg.norm(X[i + 1 :] - X[i], axis=1)
        return D + D.T
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def max_pairwise_distance(samples, metric: str = "cosine") -> float:
    X = np.asarray(samples)
    if X.ndim < 2 or X.shape[0] < 2:
        raise ValueError("need at least 2 samples for a pairwise distance")
    D = pairwise_distances(X, metric)
    return float(D[np.triu_indices(len(D), k=1)].max())


def _entropy(p: np.ndarray) -> np.ndarray:
    safe = np.where(p > 0, p, 1.0)
    return -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=-1)


def predictive_entropy(softmax_samples) -> float:
    P = np.atleast_2d(np.asarray(softmax_samples, dtype=np.float64))
    return float(_entropy(P.mean(axis=0)))


def _raw_mutual_information(P: np.ndarray) -> float:
    return float(_entropy(P.mean(axis=0)) - _entropy(P).mean())


def mutual_information(softmax_samples) -> float:
    """Predictive entropy minus mean per-sample entropy, clamped at 0."""
    P = np.atleast_2d(np.asarray(softmax_samples, dtype=np.float64))
    return max(_raw_mutual_information(P), 0.0)


def max_softmax_prob(softmax_samples) -> float:
    P = np.atleast_2d(np.asarray(softmax_samples, dtype=np.float64))
    return float(P.mean(axis=0).max())


def mean_embedding_norm(samples) -> float:
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    return float(np.linalg.norm(X.reshape(X.shape[0], -1), axis=1).mean())


@dataclass
class FeatureVector:
    max_softmax: float
    pred_entropy: float
    mutual_info: float
    spread: list[float] = field(default_factory=list)
    mean_embed_norm: list[float] = field(default_factory=list)
    metric: str = "cosine"
    mi_clamped: bool = False

    def values(self, include_spread: bool = True, include_norms: bool = False) -> list[float]:
        row = [self.max_softmax, self.mutual_info, self.pred_entropy]
        if include_spread:
            row += list(self.spread)
        if include_norms:
            row += list(self.mean_embed_norm)
        return row


def column_names(n_layers: int, include_spread: bool = True, include_norms: bool = False) -> list[str]:
    names = list(BASELINE_COLUMNS)
    if include_spread:
        names += [f"spread_{i + 1}" for i in range(n_layers)]
    if include_norms:
        names += [f"norm_{i + 1}" for i in range(n_layers)]
    return names


@dataclass
class FeatureTable:
    """Named feature columns for a pool of data (one row per datum)."""

    columns: list[str]
    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, len(self.columns))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.values)

    def select(self, feature_set: str) -> tuple[list[str], np.ndarray]:
        cols = feature_columns(self.columns, feature_set)
        idx = [self.columns.index(c) for c in cols]
        return cols, self.values[:, idx]


def feature_columns(columns: list[str], feature_set: str) -> list[str]:
    missing = [c for c in BASELINE_COLUMNS if c not in columns]
    if missing:
        raise ValueError(f"feature table lacks baseline columns {missing}")
    if feature_set == "last":
        return list(BASELINE_COLUMNS)
    if feature_set == "last+spread":
        spread = [c for c in columns if c.startswith("spread_")]
        if not spread:
            raise ValueError("feature set 'last+spread' requested but the table has no spread_* columns")
        return list(BASELINE_COLUMNS) + spread
    raise ValueError(f"unknown feature set {feature_set!r}; expected one of {FEATURE_SETS}")


def extract_features(run: MCRun, metric: str = "cosine", include_spread: bool = True) -> FeatureVector:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    P = np.asarray(run.softmax_samples, dtype=np.float64)
    raw_mi = _raw_mutual_information(P)
    return FeatureVector(
        max_softmax=max_softmax_prob(P),
        pred_entropy=predictive_entropy(P),
        mutual_info=max(raw_mi, 0.0),
        spread=[max_pairwise_distance(e, metric) for e in run.layer_embeddings] if include_spread else [],
        mean_embed_norm=[mean_embedding_norm(e) for e in run.layer_embeddings],
        metric=metric,
        mi_clamped=raw_mi < 0,
    )


def feature_table(net: Network, X, T: int = 32, metric: str = "cosine", seed: int = 0,
                  include_norms: bool = False, labels=None) -> FeatureTable:
    """MC-sample every row of ``X`` and tabulate its features (spread always included)."""
    fvs = [extract_features(r, metric) for r in mc_sample_many(net, X, T, seed)]
    cols = column_names(net.n_embeddings, include_norms=include_norms)
    values = np.array([f.values(include_norms=include_norms) for f in fvs]).reshape(len(fvs), len(cols))
    table = FeatureTable(cols, values, labels)
    table.mi_clamped = sum(f.mi_clamped for f in fvs)
    return table
