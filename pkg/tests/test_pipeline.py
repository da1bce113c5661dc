import csv
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sml import cli
from sml.classifier import FORMAT_VERSION, EnsembleConfig
from sml.dataset import Cohort, ImageStack, Patient, SynthParams, split_train_test, synth_cohort, write_manifest, write_stack
from sml.pipeline import (
    ModelFormatError, PatientPrediction, PipelineError, RunConfig, cross_validate, dumps_model, evaluate,
    load_model, predict_cohort, save_model, test_pipeline as run_test, train_pipeline,
)

FAST = EnsembleConfig(n_trees=60, features_per_tree=5)


@pytest.fixture(scope="module")
def cohort():
    return synth_cohort(SynthParams(n_normal=40, n_abnormal=70, m_range=(20, 40), p=12, cluster_fraction=0.2), seed=2)


@pytest.fixture(scope="module")
def split(cohort):
    return split_train_test(cohort, 20, 40, seed=0)


@pytest.fixture(scope="module")
def trained(split):
    return train_pipeline(RunConfig(ensemble=FAST, grid_step=0.05), split[0])


def test_in_sample_perfect_on_planted_cohort():
    c = synth_cohort(SynthParams(n_normal=50, n_abnormal=50, m_range=(20, 40), p=12, cluster_fraction=0.2), seed=8)
    model, report = train_pipeline(RunConfig(ensemble=EnsembleConfig(n_trees=200, features_per_tree=5),
                                             grid_step=0.05), c)
    assert report.accuracy == 1.0
    assert report.train_seconds is not None and report.train_seconds >= 0


def test_single_label_rejected(cohort):
    normals = Cohort(tuple(pt for pt in cohort if pt.label == "normal"))
    with pytest.raises(PipelineError) as info:
        train_pipeline(RunConfig(ensemble=FAST), normals)
    assert info.value.stage == "input"


def test_rerun_identical_model_bytes(split, trained):
    again, _ = train_pipeline(RunConfig(ensemble=FAST, grid_step=0.05), split[0])
    assert dumps_model(again) == dumps_model(trained[0])


def test_thread_count_irrelevant(split, trained):
    par, _ = train_pipeline(RunConfig(ensemble=FAST, grid_step=0.05, workers=4), split[0])
    assert dumps_model(par) == dumps_model(trained[0])


def test_test_on_training_equals_in_sample(split, trained):
    model, in_sample = trained
    report = run_test(model, split[0])
    assert report.accuracy == in_sample.accuracy
    assert [p.score for p in report.predictions] == [p.score for p in in_sample.predictions]


def test_held_out_accuracy_default_config():
    # 250 train / 113 test with the default ensemble (1000 trees, 20 features, 9 quantiles)
    params = SynthParams(n_normal=82, n_abnormal=281, m_range=(40, 80), p=16, cluster_fraction=0.1)
    train, test = split_train_test(synth_cohort(params, seed=100, lazy=True), 50, 200, seed=100)
    model, in_sample = train_pipeline(RunConfig(), train)
    report = run_test(model, test)
    assert in_sample.accuracy == 1.0
    assert report.accuracy >= 0.9
    assert report.test_seconds is not None and report.test_seconds >= 0
    assert report.tp + report.tn + report.fp + report.fn == len(test)


def test_baseline_models_train_and_predict(split):
    for kind in ("random_image", "mean_image"):
        model, _ = train_pipeline(RunConfig(ensemble=FAST, features=kind), split[0])
        assert model.selection is None
        report = run_test(model, split[1])
        assert report.undiagnosed == 0


def test_predict_needs_no_labels(split, trained):
    class Blind:
        def __init__(self, pt):
            self.patient_id = pt.patient_id
            self._pt = pt

        def load(self):
            return self._pt.load()

    blind = predict_cohort(trained[0], [Blind(pt) for pt in split[1]])
    seen = run_test(trained[0], split[1]).predictions
    assert blind == seen


def test_corrupt_stack_becomes_undiagnosed(tmp_path, split, trained):
    rows = []
    for pt in list(split[1])[:4]:
        write_stack(pt.load(), tmp_path / f"{pt.patient_id}.sps")
        rows.append((pt.patient_id, pt.label, f"{pt.patient_id}.sps"))
    (tmp_path / "bad.sps").write_bytes(b"XXXX" + bytes(40))
    rows.append(("BAD", "abnormal", "bad.sps"))
    write_manifest(rows, tmp_path / "m.csv")
    from sml.dataset import read_manifest
    report = run_test(trained[0], read_manifest(tmp_path / "m.csv"))
    assert report.undiagnosed == 1
    bad = report.predictions[-1]
    assert bad.score is None and "BadMagic" in bad.error
    assert report.tp + report.tn + report.fp + report.fn == 4


def test_wrong_size_stack_is_undiagnosed(trained):
    odd = Patient("ODD", "normal", ImageStack("ODD", np.zeros((5, 7, 7))))
    report = run_test(trained[0], Cohort((odd,)))
    assert report.undiagnosed == 1 and report.accuracy != report.accuracy  # nan: nothing diagnosed


def test_cross_validate_two_repeats(cohort):
    cfg = RunConfig(ensemble=replace(FAST, n_trees=30), grid_step=0.1)
    res = cross_validate(cfg, 2, cohort, n_normal_train=20, n_abnormal_train=40)
    assert res["splits"][0]["test_ids"] != res["splits"][1]["test_ids"]
    accs = [r["accuracy"] for r in res["sml"]["per_repeat"]]
    assert res["sml"]["out_of_sample"]["accuracy"]["mean"] == pytest.approx(np.mean(accs))
    assert res["sml"]["out_of_sample"]["accuracy"]["std"] == pytest.approx(np.std(accs))
    again = cross_validate(cfg, 2, cohort, n_normal_train=20, n_abnormal_train=40)
    strip = lambda r: [{k: v for k, v in x.items() if not k.endswith("seconds")} for x in r["sml"]["per_repeat"]]
    assert strip(again) == strip(res)


def test_save_load_save_identical(tmp_path, trained):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_model(trained[0], a)
    save_model(load_model(a), b)
    assert a.read_bytes() == b.read_bytes()


def test_unknown_version(tmp_path, trained):
    d = trained[0].to_dict()
    d["format_version"] = "v999"
    f = tmp_path / "v.json"
    f.write_text(json.dumps(d))
    with pytest.raises(ModelFormatError, match="v999"):
        load_model(f)


def test_schema_violation(tmp_path, trained):
    d = trained[0].to_dict()
    del d["trees"]
    f = tmp_path / "s.json"
    f.write_text(json.dumps(d))
    with pytest.raises(ModelFormatError):
        load_model(f)
    d = trained[0].to_dict()
    d["trees"][0]["nodes"][0]["feature"] = 10_000
    f.write_text(json.dumps(d))
    with pytest.raises(ModelFormatError):
        load_model(f)


def test_hand_written_stump(tmp_path):
    model = {
        "format_version": FORMAT_VERSION,
        "config": {"n_trees": 1, "features_per_tree": 1, "max_depth": 1, "learning_rate": 1.0,
                   "mode": "gbrf", "seed": 0, "feature_sampling": "tree"},
        "n_features": 2, "mask": None, "selection": None, "preprocessing": {}, "base_score": 0.0,
        "trees": [{"features": [1], "nodes": [
            {"feature": 1, "threshold": 0.5, "left": 1, "right": 2, "leaf_value": None},
            {"feature": None, "threshold": None, "left": None, "right": None, "leaf_value": -2.0},
            {"feature": None, "threshold": None, "left": None, "right": None, "leaf_value": 2.0},
        ]}],
    }
    f = tmp_path / "stump.json"
    f.write_text(json.dumps(model))
    from sml.classifier import predict_proba
    m = load_model(f)
    assert predict_proba(m, np.array([9.0, 0.4])) == pytest.approx(1 / (1 + np.exp(2.0)))
    assert predict_proba(m, np.array([-9.0, 0.6])) == pytest.approx(1 / (1 + np.exp(-2.0)))
    assert predict_proba(m, np.array([0.0, 0.5])) < 0.5  # threshold goes left


@given(st.lists(st.tuples(st.sampled_from(["normal", "abnormal", None]),
                          st.one_of(st.none(), st.floats(0, 1))), min_size=1, max_size=60))
def test_report_consistency(rows):
    preds, truth = [], []
    for i, (label, score) in enumerate(rows):
        pred = None if score is None else ("abnormal" if score > 0.5 else "normal")
        preds.append(PatientPrediction(f"P{i}", score, pred))
        truth.append(label)
    r = evaluate(preds, truth)
    total = r.tp + r.tn + r.fp + r.fn
    assert total == sum(s is not None and t is not None for (t, s) in rows)
    assert r.undiagnosed == sum(s is None for _, s in rows)
    if total:
        assert r.accuracy == (r.tp + r.tn) / total
    if r.tp + r.fn:
        assert r.sensitivity == r.tp / (r.tp + r.fn)
    if r.tn + r.fp:
        assert r.specificity == r.tn / (r.tn + r.fp)


def test_run_config_validation(tmp_path):
    with pytest.raises(ValueError):
        RunConfig(quantile_count=7)
    with pytest.raises(FileNotFoundError):
        RunConfig(train_manifest=tmp_path / "missing.csv").check_inputs()


# -- command line ---------------------------------------------------------------

@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(d), "--normal", "30", "--abnormal", "50", "--p", "12",
                     "--m-min", "20", "--m-max", "30", "--seed", "4", "--cluster-fraction", "0.2"]) == 0
    return d


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_cli_train_predict(synth_dir, tmp_path, capsys):
    m = synth_dir / "manifest.csv"
    assert cli.main(["train", "--manifest", str(m), "--trees", "50", "--features", "5", "--grid-step", "0.1",
                     "--model-out", str(tmp_path / "model.json"), "--report-out", str(tmp_path / "r.json")]) == 0
    assert cli.main(["predict", "--model", str(tmp_path / "model.json"), "--manifest", str(m),
                     "--out", str(tmp_path / "pred.csv"), "--roc", str(tmp_path / "roc.csv")]) == 0
    pred = _rows(tmp_path / "pred.csv")
    assert pred[0] == ["patient_id", "score", "predicted_label", "true_label"]
    assert len(pred) == 81
    roc = _rows(tmp_path / "roc.csv")
    assert roc[0] == ["threshold", "fpr", "tpr"] and roc[1] == ["inf", "0.0", "0.0"] and roc[-1][1:] == ["1.0", "1.0"]
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["accuracy"] == 1.0


def test_cli_threads_env_same_bytes(synth_dir, tmp_path, monkeypatch):
    m = synth_dir / "manifest.csv"
    args = ["train", "--manifest", str(m), "--trees", "30", "--features", "5", "--grid-step", "0.1", "--model-out"]
    assert cli.main(args + [str(tmp_path / "a.json")]) == 0
    monkeypatch.setenv("SML_THREADS", "4")
    assert cli.main(args + [str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_cli_select_and_mask_stats(synth_dir, tmp_path):
    m = synth_dir / "manifest.csv"
    assert cli.main(["select", "--manifest", str(m), "--grid-step", "0.25", "--out", str(tmp_path / "f3.csv"),
                     "--selection-out", str(tmp_path / "sel.json")]) == 0
    rows = _rows(tmp_path / "f3.csv")
    assert rows[0] == ["ell", "alpha", "misclustering_error"] and len(rows) == 1 + 2 * 5
    assert json.loads((tmp_path / "sel.json").read_text())["ell"] in (1, 2)
    assert cli.main(["mask-stats", "--manifest", str(m), "--out", str(tmp_path / "t1.csv")]) == 0
    rows = _rows(tmp_path / "t1.csv")
    assert rows[0] == ["alpha", "pct_A1", "pct_A2", "pct_A3"] and len(rows) == 7
    for r in rows[1:]:
        assert sum(map(float, r[1:])) == pytest.approx(100.0)


def test_cli_exit_codes(synth_dir, tmp_path, monkeypatch):
    with pytest.raises(SystemExit) as info:
        cli.main(["train"])
    assert info.value.code == 1
    assert cli.main(["predict", "--model", str(tmp_path / "nope.json"), "--manifest", str(synth_dir / "manifest.csv"),
                     "--out", str(tmp_path / "p.csv")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"format_version": "v999"}')
    assert cli.main(["predict", "--model", str(bad), "--manifest", str(synth_dir / "manifest.csv"),
                     "--out", str(tmp_path / "p.csv")]) == 2
    monkeypatch.setenv("SML_THREADS", "zero")
    assert cli.main(["mask-stats", "--manifest", str(synth_dir / "manifest.csv"), "--out", str(tmp_path / "t.csv")]) == 1
