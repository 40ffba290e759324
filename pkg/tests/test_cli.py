import json

import pytest

from specdetect import cli, training
from specdetect.core_types import read_dataset
from specdetect.training import NonFiniteLoss

SMALL = {"pass_length_range": [1201, 1204], "n_train": [1, 1], "n_test": [1, 1]}
SPEC = {"format_version": 1, "interferers": [
    {"start_t": 400, "duration": 10, "noise_seed": 1},
    {"start_t": 1100, "duration": 100, "noise_seed": 2}]}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.json").write_text(json.dumps(SMALL))
    (root / "spec.json").write_text(json.dumps(SPEC))
    assert cli.main(["gen", "--out", str(root / "ds"), "--config", str(root / "small.json")]) == 0
    assert cli.main(["baseline", "--data", str(root / "ds"), "--out", str(root / "basis")]) == 0
    assert cli.main(["train", "--data", str(root / "ds"), "--out", str(root / "model"),
                     "--epochs", "2", "--classifier-epochs", "2"]) == 0
    return root


def test_gen_honours_config_and_writes_one_manifest(workdir):
    ds = read_dataset(workdir / "ds")
    assert [p.id for p in ds.train_passes] == ["A1", "B1"]
    assert [p.id for p in ds.test_passes] == ["A2", "B2"]
    assert all(1201 <= len(p) <= 1204 for p in ds.train_passes + ds.test_passes)
    assert len(list((workdir / "ds").glob("run_manifest.json"))) == 1
    manifest = json.loads((workdir / "ds" / "run_manifest.json").read_text())
    assert manifest["command"] == "gen"
    assert manifest["seeds"] == {"dataset": 0}
    assert "dataset.json" in manifest["outputs"]


def test_train_writes_model_and_loss_report(workdir):
    model = json.loads((workdir / "model" / "model.json").read_text())
    assert (model["h"], model["d"], model["R"]) == (20, 1024, 4)
    rows = (workdir / "model" / "loss_report.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss" and len(rows) == 3


def test_detect_outputs_share_schema_across_predictors(workdir):
    outs = {}
    for kind, model in (("lstm", "model/model.json"), ("baseline", "basis/basis.json")):
        out = workdir / f"det_{kind}"
        assert cli.main(["detect", "--model", str(workdir / model), "--predictor", kind,
                         "--pass", str(workdir / "ds" / "A2"), "--inject",
                         str(workdir / "spec.json"), "--out", str(out)]) == 0
        outs[kind] = out
    for name in ("trace.csv", "events.json", "report.json", "ground_truth_events.json"):
        assert (outs["lstm"] / name).exists() and (outs["baseline"] / name).exists()
    heads = {k: (v / "trace.csv").read_text().splitlines()[0] for k, v in outs.items()}
    assert heads["lstm"] == heads["baseline"] == "t,mmse,argmax_window"
    reports = {k: json.loads((v / "report.json").read_text()) for k, v in outs.items()}
    assert reports["lstm"].keys() == reports["baseline"].keys()
    # The basis reproduces the class templates, so it finds the injections exactly.
    assert reports["baseline"]["num_interference"] == 2
    assert reports["baseline"]["exact_match"] is True


def test_inject_then_eval(workdir):
    inj = workdir / "inj"
    assert cli.main(["inject", "--data", str(workdir / "ds"), "--spec", str(workdir / "spec.json"),
                     "--out", str(inj)]) == 0
    truth = json.loads((inj / "ground_truth_events.json").read_text())
    assert sorted(truth["passes"]) == ["A2", "B2"]
    assert cli.main(["eval", "--model", str(workdir / "basis" / "basis.json"),
                     "--predictor", "baseline", "--data", str(inj),
                     "--ground-truth", str(inj / "ground_truth_events.json"),
                     "--out", str(workdir / "ev")]) == 0
    metrics = json.loads((workdir / "ev" / "metrics.json").read_text())
    assert metrics["p_error_max"] == 0.0
    assert metrics["recall"] == 1.0


def test_eval_requires_ground_truth_for_every_pass(workdir, tmp_path):
    gt = tmp_path / "gt.json"
    gt.write_text(json.dumps({"format_version": 1, "window_length": 64, "passes": {}}))
    code = cli.main(["eval", "--model", str(workdir / "basis" / "basis.json"),
                     "--predictor", "baseline", "--data", str(workdir / "ds"),
                     "--ground-truth", str(gt), "--out", str(tmp_path / "ev")])
    assert code == cli.EXIT_VALIDATION


def test_exit_codes(workdir, tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "missing"), "--out",
                     str(tmp_path / "m")]) == cli.EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["inject", "--pass", str(workdir / "ds" / "A2"), "--spec", str(bad),
                     "--out", str(tmp_path / "i")]) == cli.EXIT_VALIDATION
    off_end = tmp_path / "late.json"
    off_end.write_text(json.dumps({"start_t": 1200, "duration": 100}))
    assert cli.main(["inject", "--pass", str(workdir / "ds" / "A2"), "--spec", str(off_end),
                     "--out", str(tmp_path / "j")]) == cli.EXIT_VALIDATION
    bad_range = tmp_path / "range.json"
    bad_range.write_text(json.dumps({"pass_length_range": [5, 1]}))
    assert cli.main(["gen", "--out", str(tmp_path / "g"), "--config", str(bad_range)]) == \
        cli.EXIT_VALIDATION


def test_non_finite_loss_is_a_numerical_failure(workdir, tmp_path, monkeypatch):
    def diverge(*args, **kwargs):
        raise NonFiniteLoss(3, float("nan"))

    monkeypatch.setattr(training, "train", diverge)
    code = cli.main(["train", "--data", str(workdir / "ds"), "--out", str(tmp_path / "m"),
                     "--epochs", "5"])
    assert code == cli.EXIT_NUMERICAL


def test_help_documents_every_subcommand(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for name in cli.COMMANDS:
        assert name in text


def test_rerun_rejects_foreign_manifest(tmp_path):
    other = tmp_path / "m.json"
    other.write_text(json.dumps({"tool": "something-else", "command": "gen"}))
    assert cli.main(["rerun", str(other)]) == cli.EXIT_VALIDATION
