import json

import numpy as np
import pytest

from mcspread.cli import main
from mcspread.data_io import read_features, write_features
from mcspread.features import FeatureTable


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def synth(part, n=120):
    return {"kind": "synthetic", "part": part, "seed": 0, "n": n, "d": 2}


@pytest.fixture
def trained(tmp_path):
    cfg = write_json(tmp_path / "train.json", {"dataset": synth("indist"), "test_dataset": synth("indist"),
                                              "hidden": [8], "train": {"epochs": 2, "batch_size": 16}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "run"), "--seed", "1"]) == 0
    return tmp_path / "run"


def test_train_outputs(trained):
    assert {p.name for p in trained.iterdir()} == {"bundle.json", "train_log.json", "manifest.json"}
    log = json.loads((trained / "train_log.json").read_text())
    assert len(log["epoch_loss"]) == 2 and "test_accuracy" in log
    man = json.loads((trained / "manifest.json").read_text())
    assert man["subcommand"] == "train" and man["seeds"] == {"init_seed": 1, "train_seed": 1}
    assert man["outputs"] == ["bundle.json", "train_log.json"]


def test_train_same_seed_same_bundle(tmp_path, trained):
    cfg = write_json(tmp_path / "train2.json", {"dataset": synth("indist"), "test_dataset": synth("indist"),
                                               "hidden": [8], "train": {"epochs": 2, "batch_size": 16}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "again"), "--seed", "1"]) == 0
    assert (tmp_path / "again" / "bundle.json").read_bytes() == (trained / "bundle.json").read_bytes()


def test_train_validation_errors_listed(tmp_path, capsys):
    cfg = write_json(tmp_path / "bad.json", {"dataset": {"kind": "idx", "images": str(tmp_path / "nope-images"),
                                                         "labels": str(tmp_path / "nope-labels")},
                                             "drop_prob": 1.0, "train": {"epochs": 0}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "nope-images" in err and "nope-labels" in err
    assert "drop_prob" in err and "epochs" in err
    assert not (tmp_path / "o").exists()


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    assert "missing.json" in capsys.readouterr().err


def test_features_columns_and_determinism(tmp_path, trained):
    out1, out2 = tmp_path / "f1" / "id.csv", tmp_path / "f2" / "id.csv"
    for out in (out1, out2):
        cfg = write_json(tmp_path / "feat.json", {"dataset": synth("indist", 40)})
        assert main(["features", "--config", cfg, "--bundle", str(trained / "bundle.json"), "--out", str(out),
                     "--samples", "8", "--include-norms"]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    t = read_features(out1)
    # 2 weight layers: 3 baselines + 2 spreads + 2 norms, plus the label column
    assert t.columns == ["max_softmax", "mutual_info", "pred_entropy", "spread_1", "spread_2", "norm_1", "norm_2"]
    assert len(t) == 40 and t.labels is not None
    man = json.loads((out1.parent / "manifest.json").read_text())
    assert man["inputs"]["samples"] == 8


def test_features_default_T_and_shape_error(tmp_path, trained, capsys):
    cfg = write_json(tmp_path / "feat.json", {"dataset": synth("ood", 10)})
    assert main(["features", "--config", cfg, "--bundle", str(trained / "bundle.json"),
                 "--out", str(tmp_path / "ood.csv")]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["inputs"]["samples"] == 32
    assert read_features(tmp_path / "ood.csv").labels is None
    bad = write_json(tmp_path / "bad.json", {"dataset": {"kind": "synthetic", "part": "ood", "n": 10, "d": 3}})
    assert main(["features", "--config", bad, "--bundle", str(trained / "bundle.json"),
                 "--out", str(tmp_path / "x.csv")]) == 1
    assert "expects" in capsys.readouterr().err


def test_features_bad_samples(tmp_path, trained):
    cfg = write_json(tmp_path / "feat.json", {"dataset": synth("ood", 10)})
    assert main(["features", "--config", cfg, "--bundle", str(trained / "bundle.json"), "--samples", "1",
                 "--out", str(tmp_path / "x.csv")]) == 1


def oracle_tables(tmp_path):
    rng = np.random.default_rng(0)
    cols = ["max_softmax", "mutual_info", "pred_entropy", "spread_1"]
    ind = rng.random((60, 4))
    ind[:, 3] = 0.0  # the "label" leaked as a feature
    ood = rng.random((60, 4))
    ood[:, 3] = 1.0
    write_features(tmp_path / "id.csv", FeatureTable(cols, ind))
    write_features(tmp_path / "ood.csv", FeatureTable(cols, ood))
    return tmp_path / "id.csv", tmp_path / "ood.csv"


def test_eval_oracle_feature(tmp_path, capsys):
    idp, oodp = oracle_tables(tmp_path)
    rc = main(["eval", "--id", str(idp), "--ood-train", str(oodp), "--n-per-class", "20", "--repetitions", "1",
               "--trees", "10", "--detector", "rf", "--detector", "lr", "--out", str(tmp_path / "ev")])
    assert rc == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    cells = {(c["detector"], c["feature_set"]): c for c in rep["cells"]}
    assert set(cells) == {("rf", "last"), ("rf", "last+spread"), ("lr", "last"), ("lr", "last+spread")}
    assert cells[("rf", "last+spread")]["auc_mean"] == 1.0
    assert cells[("lr", "last+spread")]["auc_mean"] == 1.0
    assert all(c["auc_std"] == 0.0 for c in cells.values())
    text = (tmp_path / "ev" / "report.txt").read_text()
    assert "Last+Spread" in text and "Last " in text
    assert text in capsys.readouterr().out


def test_eval_column_mismatch(tmp_path, capsys):
    idp, _ = oracle_tables(tmp_path)
    write_features(tmp_path / "other.csv", FeatureTable(["max_softmax", "mutual_info", "pred_entropy", "spread_9"],
                                                        np.zeros((50, 4))))
    assert main(["eval", "--id", str(idp), "--ood-train", str(tmp_path / "other.csv"), "--out",
                 str(tmp_path / "ev")]) == 1
    assert "column" in capsys.readouterr().err


def test_eval_validation(tmp_path, capsys):
    assert main(["eval", "--id", str(tmp_path / "nope.csv"), "--repetitions", "0"]) == 1
    err = capsys.readouterr().err
    assert "nope.csv" in err and "ood-train" in err and "repetitions" in err


def test_eval_runtime_failure_exit_2(tmp_path, capsys):
    idp, oodp = oracle_tables(tmp_path)
    # pools too small for the requested draw: not a config error, a runtime failure
    assert main(["eval", "--id", str(idp), "--ood-train", str(oodp), "--n-per-class", "500",
                 "--out", str(tmp_path / "ev")]) == 2
    assert "pools too small" in capsys.readouterr().err


@pytest.mark.parametrize("which", ["norms", "correlations", "softmax", "variance"])
def test_simulate_dispatch_and_determinism(tmp_path, which):
    cfg = write_json(tmp_path / "sim.json", {"embed_dim": 10, "sample_count": 200, "iterations": 20,
                                             "trials": 50, "cases": 2, "draws": 2000})
    for out in ("a", "b"):
        assert main(["simulate", which, "--config", cfg, "--seed", "3", "--out", str(tmp_path / out)]) == 0
    a = (tmp_path / "a" / f"{which}.json").read_bytes()
    assert a == (tmp_path / "b" / f"{which}.json").read_bytes()
    assert json.loads(a)["config"]["seed"] == 3


def test_simulate_config_echo(tmp_path):
    cfg = write_json(tmp_path / "sim.json", {"embed_dim": 12, "iterations": 5})
    assert main(["simulate", "correlations", "--config", cfg, "--out", str(tmp_path / "c")]) == 0
    echo = json.loads((tmp_path / "c" / "correlations.json").read_text())["config"]
    assert echo["embed_dim"] == 12 and echo["iterations"] == 5 and echo["sample_count"] == 32


def test_simulate_unknown_rejected(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "bogus", "--out", str(tmp_path)])
    assert exc.value.code == 2  # argparse usage error
    cfg = write_json(tmp_path / "bad.json", {"embed_dim": 1})
    assert main(["simulate", "norms", "--config", cfg, "--out", str(tmp_path / "n")]) == 1


def test_simulate_confounding(tmp_path, trained):
    cfg = write_json(tmp_path / "conf.json", {"bundle": str(trained / "bundle.json"), "samples": 6,
                                              "pools": {"id": synth("indist", 30), "ood": synth("ood", 25)}})
    assert main(["simulate", "confounding", "--config", cfg, "--out", str(tmp_path / "cf")]) == 0
    rep = json.loads((tmp_path / "cf" / "confounding.json").read_text())
    assert len(rep["pools"]["id"]["points"]) == 30 and len(rep["pools"]["ood"]["points"]) == 25
    lines = (tmp_path / "cf" / "confounding_ood.csv").read_text().splitlines()
    assert lines[0] == "mean_embed_norm,max_spread" and len(lines) == 26
    bad = write_json(tmp_path / "bad.json", {"bundle": str(tmp_path / "missing.json"), "pools": {}})
    assert main(["simulate", "confounding", "--config", bad, "--out", str(tmp_path / "x")]) == 1


def test_gradcheck(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path / "g")]) == 0
    out = capsys.readouterr().out
    for kind in ("linear", "conv2d", "relu", "maxpool2d", "flatten"):
        assert kind in out
    assert "worst:" in out
    rep = json.loads((tmp_path / "g" / "gradcheck.json").read_text())
    assert rep["passed"] and max(rep["max_relative_error"].values()) < 1e-4


def test_gradcheck_failure_exit(monkeypatch, capsys):
    import mcspread.cli as cli

    monkeypatch.setattr(cli, "gradcheck_layers", lambda seed=0: {"linear": 1e-9, "conv2d": 0.5})
    assert main(["gradcheck"]) == 2
    assert "FAIL" in capsys.readouterr().out
