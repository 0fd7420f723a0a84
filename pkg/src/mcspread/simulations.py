"""Simulation studies around dropout embeddings and the softmax."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .bnn import dropout_mask, embedding_component_variance
from .features import (
    max_pairwise_distance,
    max_softmax_prob,
    mean_embedding_norm,
    mutual_information,
    predictive_entropy,
)
from .numerics import softmax

CORRELATION_FEATURES = ("mutual_info", "pred_entropy", "max_softmax", "max_cos_pdist", "max_euclid_pdist",
                        "mean_embed_norm")
PLACEMENTS = ("layer1", "layer2", "both")


@dataclass
class SimConfig:
    embed_dim: int = 100
    sample_count: int = 10_000
    iterations: int = 1000
    drop_prob: float = 0.1
    rho: float = 0.9
    center_scale: float = 0.0
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.iterations < 1:
            errors.append(f"iterations must be >= 1, got {self.iterations}")
        if self.embed_dim < 2:
            errors.append(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.sample_count < 2:
            errors.append(f"sample_count must be >= 2, got {self.sample_count}")
        if not 0 <= self.drop_prob < 1:
            errors.append(f"drop_prob must be in [0, 1), got {self.drop_prob}")
        if not -1 < self.rho < 1:
            errors.append(f"rho must be in (-1, 1), got {self.rho}")
        return errors

    def checked(self) -> "SimConfig":
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))
        return self


def _mean_var(a: np.ndarray) -> tuple[float, float]:
    # shifted two-pass form: identical draws give exactly zero variance
    d = a - a[0]
    m = d.mean()
    return float(a[0] + m), float(np.mean((d - m) ** 2))


def sim_embedding_norms(config: SimConfig | None = None) -> dict:
    """Norm mean/variance of both layers of a random two-layer ReLU net under each dropout placement.

    Weights and the single input are standard normal; ``sample_count`` dropout
    draws per placement. Dropout hits the input of the chosen weight layer(s).
    """
    cfg = (config or SimConfig()).checked()
    rng = np.random.default_rng(cfg.seed)
    D, B = cfg.embed_dim, cfg.sample_count
    x = rng.standard_normal(D)
    W1 = rng.standard_normal((D, D))
    W2 = rng.standard_normal((D, D))
    out = {}
    for k, placement in enumerate(PLACEMENTS):
        prng = np.random.default_rng([cfg.seed, k])
        h0 = np.broadcast_to(x, (B, D))
        if placement in ("layer1", "both"):
            h0 = h0 * dropout_mask((B, D), cfg.drop_prob, prng)
        h1 = np.maximum(h0 @ W1.T, 0.0)
        h1_in = h1 * dropout_mask((B, D), cfg.drop_prob, prng) if placement in ("layer2", "both") else h1
        h2 = np.maximum(h1_in @ W2.T, 0.0)
        m1, v1 = _mean_var(np.linalg.norm(h1, axis=1))
        m2, v2 = _mean_var(np.linalg.norm(h2, axis=1))
        out[placement] = {"layer1": {"mean": m1, "var": v1}, "layer2": {"mean": m2, "var": v2}}
    return {"config": asdict(cfg), "norms": out}


def _decay_cholesky(D: int, rho: float) -> np.ndarray:
    idx = np.arange(D)
    return np.linalg.cholesky(rho ** np.abs(idx[:, None] - idx[None, :]))


def correlation_features(E: np.ndarray) -> np.ndarray:
    """Six uncertainty features of a D x B embedding matrix whose columns are dropout samples."""
    samples = E.T
    P = softmax(samples)
    return np.array([
        mutual_information(P),
        predictive_entropy(P),
        max_softmax_prob(P),
        max_pairwise_distance(samples, "cosine"),
        max_pairwise_distance(samples, "euclidean"),
        mean_embedding_norm(samples),
    ])


def correlation_defaults(**overrides) -> SimConfig:
    """Norm-simulation defaults, but with 32 dropout samples per matrix."""
    return SimConfig(**{"sample_count": 32, **overrides})


def sim_feature_correlations(config: SimConfig | None = None) -> dict:
    """Pearson correlations between the six features across random embedding matrices.

    Each iteration draws ``sample_count`` zero-mean samples (columns) with
    covariance ``rho**|i-j|`` over the embedding dimensions, optionally around
    a shared random center scaled by ``center_scale``. Softmax features use
    the softmax of each sample.
    """
    cfg = (config or correlation_defaults()).checked()
    D, B = cfg.embed_dim, cfg.sample_count
    L = _decay_cholesky(D, cfg.rho)
    rows = np.empty((cfg.iterations, len(CORRELATION_FEATURES)))
    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        center = cfg.center_scale * (L @ rng.standard_normal(D))
        E = center[:, None] + L @ rng.standard_normal((D, B))
        rows[it] = correlation_features(E)
    corr = np.corrcoef(rows, rowvar=False)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return {
        "config": asdict(cfg),
        "features": list(CORRELATION_FEATURES),
        "correlation": np.clip(corr, -1.0, 1.0).tolist(),
    }


def _fit_line(x: np.ndarray, y: np.ndarray) -> dict:
    if len(x) < 2 or np.ptp(x) == 0:
        return {"slope": 0.0, "intercept": float(y.mean()) if len(y) else 0.0, "pearson_r": 0.0}
    slope, intercept = np.polyfit(x, y, 1)
    r = 0.0 if np.ptp(y) == 0 else float(np.corrcoef(x, y)[0, 1])
    if np.ptp(y) == 0:
        slope, intercept = 0.0, float(y[0])
    return {"slope": float(slope), "intercept": float(intercept), "pearson_r": r}


def norm_confounding_diagnostic(pools: dict, layer: int = -1, metric: str = "euclidean") -> dict:
    """Per pool: (mean embedding norm, max spread) for every MC run, plus a least-squares line."""
    out = {}
    for name, runs in pools.items():
        if len(runs) == 0:
            raise ValueError(f"pool {name!r} is empty")
        pts = np.array([(mean_embedding_norm(r.layer_embeddings[layer]),
                         max_pairwise_distance(r.layer_embeddings[layer], metric)) for r in runs])
        out[name] = {"points": pts.tolist(), **_fit_line(pts[:, 0], pts[:, 1])}
    return {"layer": layer, "metric": metric, "pools": out}


def softmax_property_report(trials: int = 1000, seed: int = 0, dim: int = 10) -> dict:
    """Worst-case deviations for translation invariance, scaling, temperature and constant inputs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    translation = 0.0
    scaling_changed = 0
    monotone_violations = 0
    constant_dev = 0.0
    for _ in range(trials):
        x = rng.normal(0, 3, dim)
        K = rng.uniform(-50, 50)
        translation = max(translation, float(np.abs(softmax(x + K) - softmax(x)).max()))
        alpha = rng.choice([rng.uniform(0.2, 0.9), rng.uniform(1.1, 5.0)])
        if np.any(softmax(x / alpha) != softmax(x)):
            scaling_changed += 1
        a1, a2 = np.sort(rng.uniform(0.1, 10.0, 2))
        top = int(np.argmax(x))
        if softmax(x, a1)[top] < softmax(x, a2)[top]:
            monotone_violations += 1
        c = rng.normal(0, 10)
        for a in (0.1, 1.0, 7.5):
            constant_dev = max(constant_dev, float(np.abs(softmax(np.full(dim, c) / a) - 1.0 / dim).max()))
    return {
        "trials": trials,
        "translation_max_dev": translation,
        "scaling_changed_fraction": scaling_changed / trials,
        "temperature_monotone_violations": monotone_violations,
        "constant_uniform_max_dev": constant_dev,
    }


def mc_component_variance(weight, x, bias, keep_prob: float, draws: int, rng: np.random.Generator):
    """Sample variance of ``W (D * x) + b`` over raw Bernoulli(keep_prob) masks, and its standard error."""
    W = np.asarray(weight, dtype=np.float64)
    masks = rng.random((draws, W.shape[1])) < keep_prob
    Y = (masks * x) @ W.T + bias
    dev = Y - Y.mean(axis=0)
    var = np.mean(dev**2, axis=0)
    m4 = np.mean(dev**4, axis=0)
    se = np.sqrt(np.maximum(m4 - var**2, 0.0) / draws)
    return var, se


def variance_closed_form_check(cases: int = 20, draws: int = 100_000, seed: int = 0) -> dict:
    """Closed-form embedding-component variance vs Monte Carlo, in standard errors."""
    worst = 0.0
    results = []
    for c in range(cases):
        rng = np.random.default_rng([seed, c])
        n_in, n_out = int(rng.integers(2, 12)), int(rng.integers(1, 6))
        W = rng.standard_normal((n_out, n_in))
        x = rng.standard_normal(n_in)
        b = rng.standard_normal(n_out)
        keep = float(rng.uniform(0.05, 0.95))
        closed = embedding_component_variance(W, x, keep)
        mc, se = mc_component_variance(W, x, b, keep, draws, rng)
        z = np.abs(closed - mc) / np.maximum(se, 1e-300)
        worst = max(worst, float(z.max()))
        results.append({"keep_prob": keep, "closed_form": closed.tolist(), "monte_carlo": mc.tolist(),
                        "z": z.tolist()})
    return {"cases": results, "max_z": worst}
