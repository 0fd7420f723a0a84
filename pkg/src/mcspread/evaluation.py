"""Detection metrics and the repeated-subsampling OOD experiment."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import detectors as det
from .features import FEATURE_SETS, FeatureTable

DETECTORS = ("lr", "rf", "if")


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels).astype(np.int64)
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be 0/1")
    return y


def roc_auc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative labels")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy_at_half(probs, labels) -> float:
    """Fraction correct when ``prob >= 0.5`` predicts OOD."""
    p = np.asarray(probs, dtype=np.float64)
    y = _binary(labels)
    if len(p) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean((p >= 0.5).astype(np.int64) == y))


def recall_ood(probs, labels) -> float:
    p = np.asarray(probs, dtype=np.float64)
    y = _binary(labels)
    if y.sum() == 0:
        raise ValueError("recall needs at least one OOD label")
    return float(np.mean(p[y == 1] >= 0.5))


@dataclass
class ExperimentConfig:
    n_per_class: int = 100
    repetitions: int = 10
    seed: int = 0
    feature_set: str = "last+spread"
    detector: str = "rf"
    metric: str = "cosine"
    n_trees: int = 500
    if_trees: int = 100
    if_subsample: int = 256
    cv_folds: int = 3

    def validate(self) -> list[str]:
        errors = []
        if self.n_per_class < 1:
            errors.append(f"n_per_class must be positive, got {self.n_per_class}")
        if self.repetitions < 1:
            errors.append(f"repetitions must be at least 1, got {self.repetitions}")
        if self.feature_set not in FEATURE_SETS:
            errors.append(f"feature_set must be one of {FEATURE_SETS}, got {self.feature_set!r}")
        if self.detector not in DETECTORS:
            errors.append(f"detector must be one of {DETECTORS}, got {self.detector!r}")
        if self.metric not in ("cosine", "euclidean"):
            errors.append(f"metric must be cosine or euclidean, got {self.metric!r}")
        if self.n_trees < 1:
            errors.append(f"n_trees must be positive, got {self.n_trees}")
        return errors


@dataclass
class EvalReport:
    auc_mean: float
    auc_std: float
    acc_mean: float
    acc_std: float
    recall_mean: float
    recall_std: float
    auc: list[float] = field(default_factory=list)
    acc: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    columns: list[str] = field(default_factory=list)
    importances: dict | None = None
    config: dict = field(default_factory=dict)
    splits: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("splits")
        return out


def _summary(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def fit_detector(kind: str, X, y, config: ExperimentConfig, seed: int):
    """Fit one detector; returns a scoring callable and the fitted model."""
    if kind == "lr":
        scaler = det.fit_scaler(X)
        model = det.fit_logistic(det.transform(scaler, X), y, k=config.cv_folds, seed=seed)
        return (lambda Z: det.predict_proba_logistic(model, det.transform(scaler, Z))), (scaler, model)
    if kind == "rf":
        forest = det.fit_random_forest(X, y, n_trees=config.n_trees, seed=seed)
        return (lambda Z: det.predict_proba_forest(forest, Z)), forest
    if kind == "if":
        # unsupervised: fit on the in-distribution draw only
        model = det.fit_isolation_forest(X[np.asarray(y) == 0], config.if_trees, config.if_subsample, seed)
        return (lambda Z: det.anomaly_score(model, Z)), model
    raise ValueError(f"unknown detector {kind!r}")


def run_experiment(indist: FeatureTable, ood_train: FeatureTable, ood_test: FeatureTable | None,
                   config: ExperimentConfig, scorer=None) -> EvalReport:
    """Repeated OOD-detector training on small draws, scored on everything held out.

    Repetition ``r`` uses ``default_rng([config.seed, r])``. ``ood_test=None``
    means the OOD test pool is whatever of ``ood_train`` was not drawn.
    ``scorer`` (``X_train, y_train, seed -> callable``) replaces the detector,
    mainly for oracle checks.
    """
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    n = config.n_per_class
    need_id = n + 1
    need_ood = n + (1 if ood_test is None else 0)
    if len(indist) < need_id or len(ood_train) < need_ood or (ood_test is not None and len(ood_test) < 1):
        raise ValueError(
            f"pools too small: need >= {need_id} in-distribution rows (have {len(indist)}), "
            f">= {need_ood} OOD training rows (have {len(ood_train)})"
            + ("" if ood_test is None else f", >= 1 OOD test row (have {len(ood_test)})")
        )
    cols, X_id = indist.select(config.feature_set)
    cols_tr, X_ood_tr = ood_train.select(config.feature_set)
    if cols_tr != cols:
        raise ValueError(f"column mismatch between pools: {cols} vs {cols_tr}")
    if ood_test is not None:
        cols_te, X_ood_te = ood_test.select(config.feature_set)
        if cols_te != cols:
            raise ValueError(f"column mismatch between pools: {cols} vs {cols_te}")

    aucs, accs, recs, imps, splits = [], [], [], [], []
    for r in range(config.repetitions):
        rng = np.random.default_rng([config.seed, r])
        id_perm = rng.permutation(len(X_id))
        ood_perm = rng.permutation(len(X_ood_tr))
        id_tr, id_te = id_perm[:n], id_perm[n:]
        ood_tr = ood_perm[:n]
        test_ood = X_ood_tr[ood_perm[n:]] if ood_test is None else X_ood_te
        X_train = np.vstack([X_id[id_tr], X_ood_tr[ood_tr]])
        y_train = np.r_[np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)]
        X_eval = np.vstack([X_id[id_te], test_ood])
        y_eval = np.r_[np.zeros(len(id_te), dtype=np.int64), np.ones(len(test_ood), dtype=np.int64)]
        fit_seed = int(rng.integers(2**63))
        if scorer is None:
            score, model = fit_detector(config.detector, X_train, y_train, config, fit_seed)
            if config.detector == "rf":
                imps.append(det.gini_importances(model))
        else:
            score = scorer(X_train, y_train, fit_seed)
        p = score(X_eval)
        aucs.append(roc_auc(p, y_eval))
        accs.append(accuracy_at_half(p, y_eval))
        recs.append(recall_ood(p, y_eval))
        splits.append({"id_train": id_tr, "id_eval": id_te, "ood_train": ood_tr,
                       "ood_eval": ood_perm[n:] if ood_test is None else None})

    auc_m, auc_s = _summary(aucs)
    acc_m, acc_s = _summary(accs)
    rec_m, rec_s = _summary(recs)
    return EvalReport(auc_m, auc_s, acc_m, acc_s, rec_m, rec_s, aucs, accs, recs, cols,
                      importance_report(imps, cols) if imps else None, asdict(config), splits)


def importance_report(importances, columns: list[str]) -> dict:
    """Per-feature mean and population std of Gini importances across repetitions."""
    if len(importances) == 0:
        raise ValueError("need at least one importance vector")
    M = np.array([det.gini_importances(f) if isinstance(f, det.Forest) else np.asarray(f, dtype=np.float64)
                  for f in importances])
    if M.shape[1] != len(columns):
        raise ValueError(f"{M.shape[1]} importances but {len(columns)} column names")
    return {"columns": list(columns), "mean": M.mean(axis=0).tolist(), "std": M.std(axis=0).tolist()}


def format_table(rows: list[dict]) -> str:
    """Aligned text table; each row dict has train/test/model/features/n and an EvalReport under 'report'."""
    header = ["Train", "Test", "Model", "Features", "n", "AUC", "AUC sd", "Acc", "Acc sd", "Recall", "Recall sd"]
    body = []
    for row in rows:
        rep = row["report"]
        body.append([str(row.get("train", "")), str(row.get("test", "")), row["model"].upper(),
                     "Last+Spread" if row["features"] == "last+spread" else "Last", str(row["n"]),
                     f"{rep.auc_mean:.3f}", f"{rep.auc_std:.3f}", f"{rep.acc_mean:.3f}", f"{rep.acc_std:.3f}",
                     f"{rep.recall_mean:.3f}", f"{rep.recall_std:.3f}"])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines) + "\n"
