import json
import os

import numpy as np
import pytest

from riskgrid import checkpoint as C
from riskgrid import dataset as D
from riskgrid.cli import atomic_write, main, manifest_path
from riskgrid.estimators import BaseDNNClassifier
from riskgrid.exceptions import CompatibilityError, ShapeError


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    os.environ.setdefault("SOURCE_DATE_EPOCH", "1700000000")
    cfg = d / "fast.json"
    cfg.write_text(json.dumps({"max_epochs": 3, "batch_size": 32}))
    assert run("synth", "--n", 400, "--out", d / "all.csv") == 0
    assert run("split", "--data", d / "all.csv", "--train-out", d / "tr.csv",
               "--test-out", d / "te.csv") == 0
    for model in ("base-dnn", "mmoe"):
        extra = ["--qi-pairs", "LSBP:TC,Wt:LDBP"] if model == "mmoe" else []
        assert run("train", "--model", model, "--data", d / "tr.csv",
                   "--config", cfg, "--out", d / f"{model}.json", *extra) == 0
    return d


def test_synth_is_byte_reproducible(tmp_path):
    assert run("synth", "--n", 400, "--out", tmp_path / "a.csv") == 0
    assert run("synth", "--n", 400, "--out", tmp_path / "b.csv") == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    ds = D.load_csv(tmp_path / "a.csv")
    assert len(ds) == 400


def test_usage_errors_exit_2(tmp_path):
    assert run("train", "--model", "qidnn", "--out", tmp_path / "m.json") == 2
    assert run("synth", "--noise", "1.5", "--out", tmp_path / "x.csv") == 2
    assert not (tmp_path / "x.csv").exists()


def test_bad_config_key_is_usage_error(work, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"max_epochs": 1, "dropout": 0.5}))
    assert run("train", "--model", "base-dnn", "--data", work / "tr.csv",
               "--config", cfg, "--out", tmp_path / "m.json") == 2
    assert not (tmp_path / "m.json").exists()


def test_missing_data_file_exits_3(tmp_path):
    assert run("split", "--data", tmp_path / "nope.csv", "--train-out",
               tmp_path / "a.csv", "--test-out", tmp_path / "b.csv") == 3


def test_unknown_sample_exits_3(work, tmp_path):
    assert run("explain", "--model-path", work / "base-dnn.json", "--data",
               work / "te.csv", "--sample-id", 99999, "--out-svg",
               tmp_path / "f.svg", "--out-json", tmp_path / "e.json") == 3
    assert list(tmp_path.iterdir()) == []


def test_project_on_mmoe_exits_4(work, tmp_path):
    assert run("project", "--model-path", work / "mmoe.json", "--data",
               work / "te.csv", "--out", tmp_path / "p.csv") == 4


def test_schema_mismatch_exits_4(work, tmp_path):
    ds = D.load_csv(work / "te.csv")
    order = [1, 0] + list(range(2, 34))
    feats = list(ds.schema)
    schema = D.FeatureSchema(tuple(feats[i] for i in order))
    X = ds.X[:, order]
    D.write_csv(D.Dataset(schema, X, ds.risk_state), tmp_path / "swap.csv")
    assert run("eval", "--model-path", work / "base-dnn.json", "--data",
               tmp_path / "swap.csv") == 4


def test_eval_and_manifest(work, capsys):
    out = work / "eval.json"
    assert run("eval", "--model-path", work / "mmoe.json", "--data",
               work / "te.csv", "--out", out) == 0
    text = capsys.readouterr().out
    assert "Stroke occurrence" in text and "Auc" in text
    report = json.loads(out.read_text())
    assert set(report) == {"model_kind", "n_samples", "risk_state", "stroke"}
    man = json.loads(manifest_path(out).read_text())
    assert man["command"] == "eval" and man["seed"] == 7
    assert set(man["inputs"]) == {"mmoe.json", "te.csv"}
    assert list(man["outputs"]) == ["eval.json"]
    assert man["timestamps"]["started"] == "2023-11-14T22:13:20+00:00"


def test_train_writes_trace_and_named_pairs(work):
    ckpt = C.load(work / "mmoe.json")
    assert ckpt.training["qi_pairs"] == [["LSBP", "TC"], ["Wt", "LDBP"]]
    header = (work / "mmoe.trace.csv").read_text().splitlines()[0]
    assert header.split(",")[:3] == ["epoch", "train_loss", "val_loss"]
    assert "val_loss_obj2" in header and header.endswith("val_auc")
    man = json.loads(manifest_path(work / "mmoe.json").read_text())
    assert set(man["outputs"]) == {"mmoe.json", "mmoe.trace.csv"}


def test_explain_outputs(work, capsys):
    ds = D.load_csv(work / "te.csv")
    sid = int(ds.sample_ids[0])
    assert run("explain", "--model-path", work / "base-dnn.json", "--data",
               work / "te.csv", "--sample-id", sid, "--out-svg",
               work / "force.svg", "--out-json", work / "exp.json") == 0
    line = capsys.readouterr().out.splitlines()[0]
    assert line.startswith(f"sample {sid}: ")
    d = json.loads((work / "exp.json").read_text())
    assert d["method"] == "sampled:128"
    assert len(d["explanations"]) == 4
    for e in d["explanations"]:
        total = e["base_value"] + sum(t["phi"] for t in e["phi"])
        assert total == pytest.approx(e["prediction"], abs=1e-9)
    for state in ("low", "medium", "high", "attack"):
        assert (work / f"force_{state}.svg").read_text().startswith("<?xml")


def test_screen_and_project(work):
    out = work / "pairs.csv"
    assert run("screen", "--data", work / "te.csv", "--model-path",
               work / "base-dnn.json", "--top-m", 3, "--n-samples", 8,
               "--n-draws", 4, "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "rank,feature_i,feature_j,strength" and len(lines) == 4
    assert run("project", "--model-path", work / "base-dnn.json", "--data",
               work / "te.csv", "--out", work / "viz.csv") == 0
    head = (work / "viz.csv").read_text().splitlines()[0].split(",")
    assert head[:4] == ["sample_id", "state", "low_x", "low_y"]
    assert len(head) == 10


# -- checkpoints --------------------------------------------------------------------

def _fitted(n=200):
    train = D.synth(D.SynthConfig(n=n, seed=1))
    stats = D.fit_stats(train)
    X = D.normalize(D.impute(train, stats), stats).X
    est = BaseDNNClassifier(max_epochs=2).fit(X, train.risk_state)
    return C.from_estimator(est, train.schema, stats), X


def test_checkpoint_round_trip(tmp_path):
    ckpt, X = _fitted()
    C.save(ckpt, tmp_path / "m.json")
    back = C.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.logits(X), ckpt.logits(X))
    assert C.dumps(back) == C.dumps(ckpt)
    assert back.training["estimator"] == "BaseDNNClassifier"


def test_checkpoint_rejects_tampering():
    ckpt, _ = _fitted()
    d = ckpt.to_dict()
    d["format_version"] = 99
    with pytest.raises(CompatibilityError):
        C.Checkpoint.from_dict(d)
    d = ckpt.to_dict()
    d["schema_fingerprint"] = "0" * 16
    with pytest.raises(CompatibilityError):
        C.Checkpoint.from_dict(d)
    d = ckpt.to_dict()
    d["parameters"]["W1"] = d["parameters"]["W1"][:-1]
    with pytest.raises(ShapeError):
        C.Checkpoint.from_dict(d)
    d = ckpt.to_dict()
    del d["spec"]
    with pytest.raises(CompatibilityError):
        C.Checkpoint.from_dict(d)


def test_atomic_write_leaves_no_partial_file(tmp_path):
    target = tmp_path / "out.txt"
    target.write_text("old")

    with pytest.raises(TypeError):
        atomic_write(target, object())
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]
