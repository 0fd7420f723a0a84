"""Acceptance criteria 1-10, each printing a single PASS/FAIL line.

The MNIST-based criteria use real IDX files when MCSPREAD_MNIST_DIR is set,
otherwise the bundled 5000-image subset (see conftest).
"""
import itertools
import json
import math
import shutil
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, MNIST_FILES
from mcspread.bnn import TrainConfig, build_network, mc_sample_many, mlp_arch, predict, train
from mcspread.cli import gradcheck_layers, main
from mcspread.data_io import write_idx
from mcspread.evaluation import ExperimentConfig, roc_auc, run_experiment
from mcspread.features import (
    euclidean_distance,
    feature_table,
    max_pairwise_distance,
    mutual_information,
    predictive_entropy,
)
from mcspread.numerics import softmax
from mcspread.simulations import (
    SimConfig,
    correlation_defaults,
    norm_confounding_diagnostic,
    sim_embedding_norms,
    sim_feature_correlations,
    softmax_property_report,
    variance_closed_form_check,
)

T = 32
DROP = 0.1


def record(n, ok, detail):
    line = f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def rotate(images):
    """Rotate each 28x28 digit by 90 degrees: the synthetic OOD set."""
    return np.rot90(images.reshape(-1, 28, 28), 1, axes=(1, 2)).reshape(len(images), -1)


def flat(ds):
    return ds.inputs.reshape(len(ds), -1)


def desk_mlp(train_ds, seed):
    net = build_network(mlp_arch((128, 64), 10), (784,), DROP, init_seed=seed)
    net, _ = train(net, flat(train_ds), train_ds.labels, TrainConfig(epochs=10, batch_size=64, seed=seed))
    return net


@pytest.fixture(scope="module")
def desk_model(mnist):
    train_ds, test_ds, source = mnist
    t0 = time.perf_counter()
    net = desk_mlp(train_ds, 0)
    return net, time.perf_counter() - t0


# -- 1 -------------------------------------------------------------------------

def test_c1_spread_features_improve_rf(mnist, desk_model):
    _, test_ds, source = mnist
    net, train_secs = desk_model
    t0 = time.perf_counter()
    X = flat(test_ds)
    ind = feature_table(net, X, T, "cosine", seed=1)
    ood = feature_table(net, rotate(X), T, "cosine", seed=2)
    diffs = []
    for seed in range(10):
        auc = {fs: run_experiment(ind, ood, None, ExperimentConfig(n_per_class=100, repetitions=10, seed=seed,
                                                                   feature_set=fs, detector="rf", n_trees=500)
                                  ).auc_mean
               for fs in ("last", "last+spread")}
        diffs.append(auc["last+spread"] - auc["last"])
    secs = time.perf_counter() - t0 + train_secs
    wins = sum(d >= 0 for d in diffs)
    ok = wins >= 8 and np.mean(diffs) > 0 and secs < 600
    record(1, ok, f"RF AUC(Last+Spread) >= AUC(Last) in {wins}/10 runs, mean gain {np.mean(diffs):+.4f}, "
                  f"{secs:.0f}s [{source} vs rotated digits]")
    assert ok


# -- 2 -------------------------------------------------------------------------

def test_c2_desk_mlp_accuracy(mnist, desk_model):
    _, test_ds, source = mnist
    net, secs = desk_model
    acc = float(np.mean(predict(net, flat(test_ds)) == test_ds.labels))
    ok = acc >= 0.95 and secs < 300
    record(2, ok, f"MLP 784-128-64-10 test accuracy {acc:.4f} after 10 epochs (need >= 0.95), {secs:.0f}s "
                  f"[{source}]")
    assert ok


# -- 3 -------------------------------------------------------------------------

def test_c3_norm_confounding(mnist, desk_model):
    train_ds, test_ds, source = mnist
    X = flat(test_ds)[:500]
    pools_X = {"id": X, "ood": rotate(X)}
    good = 0
    rs = []
    for seed in range(5):
        net = desk_model[0] if seed == 0 else desk_mlp(train_ds, seed)
        runs = {k: mc_sample_many(net, v, T, seed=100 + seed) for k, v in pools_X.items()}
        euc = norm_confounding_diagnostic(runs, metric="euclidean")["pools"]
        cos = norm_confounding_diagnostic(runs, metric="cosine")["pools"]
        pairs = {k: (euc[k]["pearson_r"], cos[k]["pearson_r"]) for k in pools_X}
        rs.append(pairs)
        good += all(abs(e) > abs(c) for e, c in pairs.values())
    ok = good >= 4
    detail = "; ".join(f"s{i} id {p['id'][0]:.2f}/{p['id'][1]:.2f} ood {p['ood'][0]:.2f}/{p['ood'][1]:.2f}"
                       for i, p in enumerate(rs))
    record(3, ok, f"|r(norm, euclid)| > |r(norm, cos)| in both pools for {good}/5 seeds ({detail})")
    assert ok


# -- 4 -------------------------------------------------------------------------

def test_c4_feature_correlations():
    rep = sim_feature_correlations(correlation_defaults())
    f = rep["features"]
    C = np.array(rep["correlation"])
    cos_norm = C[f.index("max_cos_pdist"), f.index("mean_embed_norm")]
    euc_norm = C[f.index("max_euclid_pdist"), f.index("mean_embed_norm")]
    ent_msp = C[f.index("pred_entropy"), f.index("max_softmax")]
    ok = rep["config"]["iterations"] == 1000 and abs(cos_norm) < abs(euc_norm) and ent_msp < 0
    record(4, ok, f"corr(cos spread, norm) {cos_norm:+.3f}, corr(euclid spread, norm) {euc_norm:+.3f}, "
                  f"corr(entropy, max softmax) {ent_msp:+.3f}")
    assert ok


# -- 5 -------------------------------------------------------------------------

def test_c5_norm_variance_propagation():
    wins, zero_ok = 0, True
    both, only2 = [], []
    for seed in range(10):
        n = sim_embedding_norms(SimConfig(seed=seed))["norms"]
        both.append(n["both"]["layer2"]["var"])
        only2.append(n["layer2"]["layer2"]["var"])
        wins += both[-1] > only2[-1]
        zero_ok &= n["layer2"]["layer1"]["var"] == 0.0
    ok = wins >= 9 and zero_ok
    record(5, ok, f"Var(layer-2 norm) both > layer-2-only in {wins}/10 seeds (seed 0: {both[0]:.1f} vs "
                  f"{only2[0]:.1f}); layer-1 variance exactly 0 with layer-2-only dropout: {zero_ok}")
    assert ok


# -- 6 -------------------------------------------------------------------------

def test_c6_closed_form_variance():
    rep = variance_closed_form_check(cases=20, draws=100_000, seed=0)
    ok = rep["max_z"] < 3.0
    record(6, ok, f"closed-form vs 1e5-draw Monte Carlo variance over 20 cases: max |z| = {rep['max_z']:.2f} (< 3)")
    assert ok


# -- 7 -------------------------------------------------------------------------

def test_c7_softmax_properties():
    t0 = time.perf_counter()
    rep = softmax_property_report(trials=1000, seed=0)
    secs = time.perf_counter() - t0
    ok = (rep["translation_max_dev"] < 1e-12 and rep["scaling_changed_fraction"] == 1.0
          and rep["temperature_monotone_violations"] == 0 and rep["constant_uniform_max_dev"] < 1e-15
          and secs < 1.0)
    record(7, ok, f"translation dev {rep['translation_max_dev']:.1e}, scaling changed "
                  f"{100 * rep['scaling_changed_fraction']:.0f}%, temperature violations "
                  f"{rep['temperature_monotone_violations']}, constant-input dev {rep['constant_uniform_max_dev']:.1e}, "
                  f"{secs:.2f}s")
    assert ok


# -- 8 -------------------------------------------------------------------------

def test_c8_numerics():
    grad = gradcheck_layers(seed=0)
    rng = np.random.default_rng(8)
    eq2 = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 64))
        u, v = rng.standard_normal(d), rng.standard_normal(d)
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        rhs = nu**2 + nv**2 - 2 * nu * nv * (u @ v / (nu * nv))
        eq2 = max(eq2, abs(euclidean_distance(u, v) ** 2 - rhs))
    bounds_ok = True
    for _ in range(1000):
        Tn, C = int(rng.integers(2, 40)), int(rng.integers(2, 20))
        P = softmax(rng.normal(0, rng.uniform(0.1, 6), (Tn, C)))
        mi, h = mutual_information(P), predictive_entropy(P)
        bounds_ok &= 0.0 <= mi <= h + 1e-9 and h <= math.log(C) + 1e-9
    worst = max(grad, key=grad.get)
    ok = max(grad.values()) < 1e-4 and eq2 < 1e-9 and bounds_ok
    record(8, ok, f"gradcheck worst {worst} {grad[worst]:.1e} (< 1e-4) over {sorted(grad)}; "
                  f"squared-distance identity max err {eq2:.1e}; 0 <= MI <= H <= ln C on 1000 matrices: {bounds_ok}")
    assert ok


# -- 9 -------------------------------------------------------------------------

def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    return sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg) / (len(pos) * len(neg))


def brute_spread(S, metric):
    best = 0.0
    for a, b in itertools.combinations(np.asarray(S, dtype=float), 2):
        if metric == "euclidean":
            d = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
        else:
            a, b = a + 1e-6, b + 1e-6
            d = 1 - sum(x * y for x, y in zip(a, b)) / (math.sqrt(sum(a * a)) * math.sqrt(sum(b * b)))
        best = max(best, d)
    return best


def test_c9_metric_oracles():
    rng = np.random.default_rng(9)
    auc_err = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.integers(0, 8, n) / 7.0 if rng.random() < 0.5 else rng.random(n)
        auc_err = max(auc_err, abs(roc_auc(s, y) - brute_auc(s, y)))
    spread_err = 0.0
    for _ in range(200):
        S = rng.normal(rng.normal(), rng.uniform(0.1, 3), (int(rng.integers(2, 33)), int(rng.integers(1, 20))))
        for metric in ("cosine", "euclidean"):
            spread_err = max(spread_err, abs(max_pairwise_distance(S, metric) - brute_spread(S, metric)))
    ok = auc_err <= 1e-12 and spread_err <= 1e-12
    record(9, ok, f"roc_auc vs pair counting max err {auc_err:.1e} over 1000 instances; "
                  f"max_pairwise_distance vs enumeration max err {spread_err:.1e}")
    assert ok


# -- 10 ------------------------------------------------------------------------

def run_pipeline(root, idx_dir, ood_images):
    if root.exists():
        shutil.rmtree(root)
    root.mkdir()
    imgs, labs = MNIST_FILES["train"]
    timgs, tlabs = MNIST_FILES["test"]
    cfg = root / "train.json"
    cfg.write_text(json.dumps({"dataset": {"kind": "idx", "images": str(idx_dir / imgs), "labels": str(idx_dir / labs)},
                               "test_dataset": {"kind": "idx", "images": str(idx_dir / timgs),
                                                "labels": str(idx_dir / tlabs)},
                               "drop_prob": DROP, "train": {"epochs": 2, "batch_size": 64}}))
    assert main(["train", "--config", str(cfg), "--seed", "7", "--out", str(root / "model")]) == 0
    bundle = str(root / "model" / "bundle.json")
    assert main(["features", "--bundle", bundle, "--images", str(idx_dir / timgs), "--labels", str(idx_dir / tlabs),
                 "--seed", "1", "--out", str(root / "feat_id" / "id.csv")]) == 0
    assert main(["features", "--bundle", bundle, "--images", str(ood_images), "--seed", "2",
                 "--out", str(root / "feat_ood" / "ood.csv")]) == 0
    assert main(["eval", "--id", str(root / "feat_id" / "id.csv"), "--ood-train", str(root / "feat_ood" / "ood.csv"),
                 "--n-per-class", "100", "--repetitions", "3", "--trees", "50", "--detector", "rf",
                 "--detector", "lr", "--seed", "3", "--out", str(root / "eval")]) == 0
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.suffix in (".csv", ".json", ".txt") and p.name != "train.json"}


def test_c10_pipeline_determinism(tmp_path, mnist_idx_dir, mnist):
    idx_dir, source = mnist_idx_dir
    test_ds = mnist[1]
    ood_path = tmp_path / "rot-images-idx3-ubyte"
    write_idx(ood_path, None, rotate(flat(test_ds)).reshape(-1, 28, 28))
    # same paths both times: manifests echo their input paths
    a = run_pipeline(tmp_path / "run", idx_dir, ood_path)
    b = run_pipeline(tmp_path / "run", idx_dir, ood_path)
    differing = [k for k in a if a[k] != b.get(k)]
    ok = set(a) == set(b) and not differing and len(a) >= 8
    record(10, ok, f"train -> features -> eval twice: {len(a)} CSV/JSON/text outputs, "
                   f"{len(differing)} differ byte-for-byte")
    assert ok
