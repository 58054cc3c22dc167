import json
import os

import numpy as np
import pytest

from rarelift.cli import main
from rarelift.serialize import load_model

CONFIG_PAYLOAD = {
    "data": {"synthetic": {"n_rows": 900, "n_features": 6, "positive_rate": 0.1, "seed": 5}},
    "k_folds": 3,
    "hybrid": {"epochs": 15, "batch_size": 128, "learning_rate": 0.1, "seed": 3},
    "student": {"n_trees": 40, "max_depth": 3, "early_stopping_rounds": 10, "seed": 4},
    "k_leads": 20,
    "seed": 5,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "cfg.json"
    config.write_text(json.dumps(CONFIG_PAYLOAD))
    raw = root / "raw.csv"
    assert main(["gen-data", "--config", str(config), "--out", str(raw), "--quiet"]) == 0
    run = root / "run"
    assert main(["pipeline", "--config", str(config), "--out-dir", str(run), "--quiet"]) == 0
    return {"root": root, "config": str(config), "raw": str(raw), "run": str(run)}


def run_cli(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestGenData:
    def test_writes_csv_and_reports_columns(self, workspace, capsys, tmp_path):
        out = str(tmp_path / "rows.csv")
        code, stdout, _ = run_cli(capsys, ["gen-data", "--config", workspace["config"], "--out", out, "--quiet"])
        assert code == 0
        payload = json.loads(stdout)
        assert payload["rows"] == 900
        assert payload["path"] == out
        assert len(payload["columns"]) == 6
        assert os.path.exists(out)

    def test_seed_override_changes_data(self, workspace, capsys, tmp_path):
        a, b, c = (str(tmp_path / f"{n}.csv") for n in "abc")
        run_cli(capsys, ["gen-data", "--config", workspace["config"], "--out", a, "--seed", "9", "--quiet"])
        run_cli(capsys, ["--seed", "9", "gen-data", "--config", workspace["config"], "--out", b, "--quiet"])
        run_cli(capsys, ["gen-data", "--config", workspace["config"], "--out", c, "--quiet"])
        assert open(a).read() == open(b).read()
        assert open(a).read() != open(c).read()

    def test_requires_synthetic_source(self, workspace, capsys, tmp_path):
        config = tmp_path / "csv_cfg.json"
        config.write_text(
            json.dumps(
                {
                    "data": {"csv": {"path": workspace["raw"], "columns": [["f00_num", "numeric"]]}},
                    "k_leads": 5,
                }
            )
        )
        code, _, err = run_cli(capsys, ["gen-data", "--config", str(config), "--out", str(tmp_path / "x.csv")])
        assert code == 2
        assert "synthetic" in err

    def test_missing_config_names_path(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, ["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x.csv")])
        assert code == 3
        assert "nope.json" in err


class TestPreprocess:
    def test_fit_and_reapply_agree(self, workspace, capsys, tmp_path):
        clean = str(tmp_path / "clean.csv")
        pre = str(tmp_path / "pre.json")
        code, stdout, _ = run_cli(
            capsys,
            ["preprocess", "--config", workspace["config"], "--input", workspace["raw"], "--out", clean, "--preprocessor", pre, "--quiet"],
        )
        assert code == 0
        assert json.loads(stdout)["rows"] == 900
        again = str(tmp_path / "again.csv")
        code, _, _ = run_cli(
            capsys,
            ["preprocess", "--config", workspace["config"], "--input", workspace["raw"], "--out", again, "--apply", pre, "--quiet"],
        )
        assert code == 0
        assert open(clean).read() == open(again).read()


class TestStageCommands:
    def test_train_base_writes_five_models(self, workspace, capsys, tmp_path):
        out_dir = str(tmp_path / "base")
        code, stdout, _ = run_cli(
            capsys,
            ["train-base", "--config", workspace["config"], "--train", workspace["run"] + "/data/train.csv", "--out-dir", out_dir, "--quiet"],
        )
        assert code == 0
        models = json.loads(stdout)["models"]
        assert set(models) == {"gbdt_logloss", "mlp", "fm", "gbdt_focal", "gbdt_subset"}
        for path in models.values():
            assert load_model(path).kind in ("gbdt", "mlp", "fm")

    def test_oof_then_train_meta(self, workspace, capsys, tmp_path):
        oof = str(tmp_path / "oof.csv")
        code, stdout, _ = run_cli(
            capsys,
            ["oof", "--config", workspace["config"], "--train", workspace["run"] + "/data/train.csv", "--out", oof, "--quiet"],
        )
        assert code == 0
        summary = json.loads(stdout)
        assert len(summary["learners"]) == 5
        assert set(summary["oof_auc"]) == set(summary["learners"])
        meta = str(tmp_path / "meta.json")
        code, stdout, _ = run_cli(capsys, ["train-meta", "--config", workspace["config"], "--oof", oof, "--out", meta, "--quiet"])
        assert code == 0
        assert json.loads(stdout)["meta_features"] == 26

    def test_distill_command(self, workspace, capsys, tmp_path):
        student = str(tmp_path / "student.json")
        code, stdout, _ = run_cli(
            capsys,
            [
                "distill",
                "--config",
                workspace["config"],
                "--train",
                workspace["run"] + "/data/train.csv",
                "--teacher",
                workspace["run"] + "/stage3/teacher/teacher.json",
                "--out",
                student,
                "--loss",
                "kl",
                "--quiet",
            ],
        )
        assert code == 0
        assert json.loads(stdout)["loss"] == "kl"
        assert load_model(student).kind == "student"


class TestPredictEvaluate:
    def test_reproduces_pipeline_report_exactly(self, workspace, capsys, tmp_path):
        scores = str(tmp_path / "scores.csv")
        code, _, _ = run_cli(
            capsys,
            [
                "predict",
                "--model",
                workspace["run"] + "/stage3/teacher/teacher.json",
                "--input",
                workspace["run"] + "/data/eval.csv",
                "--out",
                scores,
                "--quiet",
            ],
        )
        assert code == 0
        report = str(tmp_path / "report.json")
        code, stdout, _ = run_cli(
            capsys,
            ["evaluate", "--scores", scores, "--labels", workspace["run"] + "/data/eval.csv", "--k", "20", "--out", report, "--quiet"],
        )
        assert code == 0
        pipeline_report = json.load(open(workspace["run"] + "/stage4/teacher_report.json"))
        cli_report = json.load(open(report))
        for key in ("auc", "precision_at_k", "business_recall_at_k", "log_loss", "lift_at_k", "pr_curve"):
            assert cli_report[key] == pipeline_report[key]

    def test_student_model_predicts(self, workspace, capsys, tmp_path):
        scores = str(tmp_path / "s.csv")
        code, stdout, _ = run_cli(
            capsys,
            ["predict", "--model", workspace["run"] + "/stage3/student.json", "--input", workspace["run"] + "/data/eval.csv", "--out", scores, "--quiet"],
        )
        assert code == 0
        lines = open(scores).read().strip().split("\n")
        assert lines[0] == "id,score"
        assert len(lines) == json.loads(stdout)["rows"] + 1
        values = [float(l.split(",")[1]) for l in lines[1:]]
        assert all(0.0 <= v <= 1.0 for v in values)

    def test_k_zero_is_usage_error(self, workspace, capsys, tmp_path):
        code, _, err = run_cli(
            capsys,
            ["evaluate", "--scores", workspace["raw"], "--labels", workspace["raw"], "--k", "0", "--out", str(tmp_path / "r.json")],
        )
        assert code == 2
        assert "--k" in err

    def test_score_id_missing_from_labels(self, workspace, capsys, tmp_path):
        scores = tmp_path / "scores.csv"
        scores.write_text("id,score\n999999,0.5\n")
        code, _, err = run_cli(
            capsys,
            ["evaluate", "--scores", str(scores), "--labels", workspace["run"] + "/data/eval.csv", "--k", "1", "--out", str(tmp_path / "r.json")],
        )
        assert code == 3
        assert "999999" in err

    def test_missing_model_names_path(self, workspace, capsys, tmp_path):
        code, _, err = run_cli(
            capsys,
            ["predict", "--model", str(tmp_path / "ghost.json"), "--input", workspace["raw"], "--out", str(tmp_path / "s.csv")],
        )
        assert code == 3
        assert "ghost.json" in err


class TestAblateAndDrift:
    def test_ablate_prints_csv(self, workspace, capsys, tmp_path):
        out_dir = str(tmp_path / "tables")
        code, stdout, _ = run_cli(
            capsys,
            ["ablate", "--suite", "fusion", "--config", workspace["config"], "--out-dir", out_dir, "--quiet"],
        )
        assert code == 0
        lines = stdout.strip().split("\n")
        assert lines[0].startswith("variant,precision_at_k")
        assert len(lines) == 6
        assert os.path.exists(os.path.join(out_dir, "ablation_fusion.csv"))
        assert os.path.exists(os.path.join(out_dir, "ablation_fusion.txt"))

    def test_ablate_rejects_unknown_suite(self, workspace, capsys):
        code = main(["ablate", "--suite", "everything", "--config", workspace["config"]])
        assert code == 2

    def test_drift_identical_data_is_small(self, workspace, capsys):
        train = workspace["run"] + "/data/train.csv"
        code, stdout, _ = run_cli(capsys, ["drift", "--reference", train, "--current", train, "--quiet"])
        assert code == 0
        psi = json.loads(stdout)
        assert len(psi) == 6
        assert all(v < 0.01 for v in psi.values())

    def test_drift_schema_mismatch(self, workspace, capsys, tmp_path):
        other = tmp_path / "other.csv"
        other.write_text("id,zz\n" + "\n".join(f"{i},{i * 0.01}" for i in range(120)) + "\n")
        code, _, err = run_cli(capsys, ["drift", "--reference", workspace["run"] + "/data/train.csv", "--current", str(other)])
        assert code == 3
        assert err.startswith("error:")


class TestMainEntry:
    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 2

    def test_unknown_flag(self, workspace, capsys):
        assert main(["gen-data", "--config", workspace["config"], "--out", "/dev/null", "--bogus"]) == 2

    def test_pipeline_needs_out_dir(self, workspace, capsys, tmp_path):
        config = tmp_path / "no_out.json"
        config.write_text(json.dumps(CONFIG_PAYLOAD))
        code, _, err = run_cli(capsys, ["pipeline", "--config", str(config)])
        assert code == 2
        assert "out-dir" in err or "out_dir" in err

    def test_training_failure_exit_code(self, workspace, capsys, tmp_path):
        oof = str(tmp_path / "oof.csv")
        run_cli(
            capsys,
            ["oof", "--config", workspace["config"], "--train", workspace["run"] + "/data/train.csv", "--out", oof, "--quiet"],
        )
        config = tmp_path / "explode.json"
        payload = dict(CONFIG_PAYLOAD)
        payload["hybrid"] = {
            "epochs": 60,
            "batch_size": 128,
            "learning_rate": 1e9,
            "l2": 1e9,
            "early_stopping_rounds": None,
            "seed": 3,
        }
        config.write_text(json.dumps(payload))
        with np.errstate(all="ignore"):
            code, _, err = run_cli(capsys, ["train-meta", "--config", str(config), "--oof", oof, "--out", str(tmp_path / "m.json")])
        assert code == 4
        assert "error:" in err

    def test_quiet_suppresses_notes(self, workspace, capsys, tmp_path):
        out = str(tmp_path / "q.csv")
        code, stdout, err = run_cli(capsys, ["gen-data", "--config", workspace["config"], "--out", out, "--quiet"])
        assert code == 0 and err == ""
        code, stdout, err = run_cli(capsys, ["gen-data", "--config", workspace["config"], "--out", out])
        assert code == 0 and "wrote" in err
