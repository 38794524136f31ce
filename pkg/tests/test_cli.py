import json
import os

import numpy as np
import pytest

from pmbnn.cli import main


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    """One full CLI pass: synth -> preprocess -> train x3 -> reconstruct
    -> evaluate -> report, with a small epoch budget."""
    root = tmp_path_factory.mktemp("cli")
    synth = root / "synth"
    assert run(["synth", "--out", str(synth), "--seed", "5",
                "--noise-hr", "2.0"]) == 0
    subject_csv = synth / "synthetic.csv"

    prep = root / "prep"
    assert run(["preprocess", "--input", str(subject_csv), "--out", str(prep)]) == 0

    train_dir = root / "train"
    common = ["--input", str(prep / "preprocessed.csv"), "--out", str(train_dir),
              "--train.max_epochs", "60"]
    for model in ("pmbnn", "fcnn"):
        assert run(["train", "--model", model] + common) == 0
    assert run(["train", "--model", "pm", "--input", str(prep / "preprocessed.csv"),
                "--out", str(train_dir), "--pm.iters", "40"]) == 0

    recon = root / "recon"
    assert run(["reconstruct", "--checkpoint",
                str(train_dir / "pmbnn_checkpoint.json"),
                "--input", str(prep / "preprocessed.csv"),
                "--out", str(recon)]) == 0

    ev = root / "eval"
    assert run(["evaluate",
                "--pred",
                str(train_dir / "predictions_pmbnn.csv"),
                str(train_dir / "predictions_fcnn.csv"),
                str(train_dir / "predictions_pm.csv"),
                str(recon / "predictions_pmbnn_r.csv"),
                "--subject", "s01",
                "--out", str(ev)]) == 0

    rep = root / "report"
    assert run(["report", "--metrics", str(ev / "metrics.json"),
                "--out", str(rep)]) == 0
    return {"root": root, "synth": synth, "prep": prep, "train": train_dir,
            "recon": recon, "eval": ev, "report": rep}


class TestPipeline:
    def test_synth_writes_truth_manifest(self, pipeline_dirs):
        manifest = json.loads(
            (pipeline_dirs["synth"] / "synth_manifest.json").read_text()
        )
        assert len(manifest["lambda_true"]) == 6
        assert manifest["seed"] == 5

    def test_preprocess_keeps_schema(self, pipeline_dirs):
        head = (pipeline_dirs["prep"] / "preprocessed.csv").read_text().split("\n")[0]
        assert head == "time_s,vo2_lpm,hr_bpm,activity"

    def test_train_outputs(self, pipeline_dirs):
        d = pipeline_dirs["train"]
        for name in ("pmbnn_checkpoint.json", "fcnn_checkpoint.json",
                     "pm_lambda.json", "predictions_pmbnn.csv",
                     "pmbnn_run_manifest.json"):
            assert (d / name).exists()
        manifest = json.loads((d / "pmbnn_run_manifest.json").read_text())
        assert manifest["model"] == "pmbnn"
        assert len(manifest["lambda"]) == 6
        assert manifest["wall_time_s"] > 0
        assert manifest["stopped_reason"] in ("threshold", "epoch-cap")

    def test_all_manifests_share_split_hash(self, pipeline_dirs):
        d = pipeline_dirs["train"]
        hashes = {
            json.loads((d / f"{m}_run_manifest.json").read_text())["split_hash"]
            for m in ("pmbnn", "fcnn", "pm")
        }
        recon = json.loads(
            (pipeline_dirs["recon"] / "pmbnn_r_run_manifest.json").read_text()
        )
        hashes.add(recon["split_hash"])
        assert len(hashes) == 1

    def test_joined_predictions_schema(self, pipeline_dirs):
        lines = (pipeline_dirs["eval"] / "predictions.csv").read_text().split("\n")
        assert lines[0] == "t_s,hr_true,hr_pmbnn,hr_fcnn,hr_pm,hr_pmbnn_r,activity"
        assert len([l for l in lines[1:] if l]) > 0
        # every joined row carries all four model columns
        some = lines[1].split(",")
        assert all(cell != "" for cell in some)

    def test_metrics_json_structure(self, pipeline_dirs):
        payload = json.loads((pipeline_dirs["eval"] / "metrics.json").read_text())
        assert payload["participant"] == "s01"
        assert set(payload["models"]) == {"pmbnn", "fcnn", "pm", "pmbnn_r"}
        for entry in payload["models"].values():
            assert set(entry["per_activity"]) == {"rest", "cycle", "run"}

    def test_report_files_emitted(self, pipeline_dirs):
        d = pipeline_dirs["report"]
        for name in ("report.csv", "report_by_activity.csv",
                     "boxplot_long.csv", "report.json"):
            assert (d / name).exists()
        text = (d / "report.csv").read_text()
        assert "insufficient pairs" in text  # single subject: no paired tests


class TestGradcheckCommand:
    def test_exit_zero_and_prints_error(self, capsys):
        assert run(["gradcheck", "--seed", "7"]) == 0
        out = capsys.readouterr().out
        assert "max relative gradient error" in out
        assert float(out.strip().split()[-1]) <= 1e-4


class TestErrorPaths:
    def test_domain_error_exits_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        # positive raw values that the un-clamped filters drive negative
        vo2 = ["0.02"] * 40
        vo2[20] = "2.5"
        rows = [f"{t},{v},70,rest" for t, v in enumerate(vo2)]
        bad.write_bytes(("time_s,vo2_lpm,hr_bpm,activity\n"
                         + "\n".join(rows) + "\n").encode())
        prep = tmp_path / "prep"
        assert run(["preprocess", "--input", str(bad), "--out", str(prep),
                    "--filter.vo2_floor", "-100",
                    "--filter.sg_polyorder", "3"]) == 0
        code = run(["train", "--model", "pm", "--input",
                    str(prep / "preprocessed.csv"), "--out", str(tmp_path / "t")])
        assert code == 1
        assert "NonPositive" in capsys.readouterr().err

    def test_usage_error_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            run(["train", "--model", "nonsense", "--input", "x", "--out", "y"])
        assert exc.value.code == 2

    def test_missing_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            run([])
        assert exc.value.code == 2


class TestConfigPlumbing:
    def test_file_config_with_flag_override(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"split.ratio": 0.7, "train.max_epochs": 3}))
        synth = tmp_path / "s"
        assert run(["synth", "--out", str(synth), "--seed", "1"]) == 0
        out = tmp_path / "o"
        assert run(["split", "--input", str(synth / "synthetic.csv"),
                    "--out", str(out), "--config", str(cfg),
                    "--split.ratio", "0.8"]) == 0
        manifest = json.loads((out / "split_manifest.json").read_text())
        assert manifest["ratio"] == 0.8  # flag beats file

    def test_split_files_roundtrip(self, tmp_path):
        synth = tmp_path / "s"
        assert run(["synth", "--out", str(synth), "--seed", "2"]) == 0
        out = tmp_path / "o"
        assert run(["split", "--input", str(synth / "synthetic.csv"),
                    "--out", str(out)]) == 0
        train_lines = (out / "train.csv").read_text().strip().split("\n")
        test_lines = (out / "test.csv").read_text().strip().split("\n")
        assert len(train_lines) - 1 == 1440
        assert len(test_lines) - 1 == 360


class TestIdempotence:
    def test_repeat_runs_byte_identical(self, tmp_path):
        outputs = []
        for tag in ("a", "b"):
            root = tmp_path / tag
            synth = root / "synth"
            run(["synth", "--out", str(synth), "--seed", "9",
                 "--noise-hr", "2.0"])
            prep = root / "prep"
            run(["preprocess", "--input", str(synth / "synthetic.csv"),
                 "--out", str(prep)])
            train = root / "train"
            run(["train", "--model", "pmbnn", "--input",
                 str(prep / "preprocessed.csv"), "--out", str(train),
                 "--train.max_epochs", "25"])
            ev = root / "eval"
            run(["evaluate", "--pred", str(train / "predictions_pmbnn.csv"),
                 "--out", str(ev)])
            outputs.append(root)
        a, b = outputs
        for rel in ("synth/synthetic.csv", "prep/preprocessed.csv",
                    "train/predictions_pmbnn.csv", "train/pmbnn_checkpoint.json",
                    "eval/predictions.csv"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        # manifests identical modulo wall time
        ma = json.loads((a / "train/pmbnn_run_manifest.json").read_text())
        mb = json.loads((b / "train/pmbnn_run_manifest.json").read_text())
        ma.pop("wall_time_s"), mb.pop("wall_time_s")
        assert ma == mb


class TestSynthSpecFile:
    def test_spec_json_controls_generation(self, tmp_path):
        spec = {
            "subject_id": "custom",
            "plan": [
                {"label": "rest", "duration_s": 120, "target_vo2": 0.4},
                {"label": "cycle", "duration_s": 180, "target_vo2": 1.5, "tau_s": 45},
            ],
            "lambda_true": [0.02, 0.1, -5.3, 10.5, 0.44, 0.0],
            "hr0": 66.0,
            "noise_sigma_hr": 0.0,
            "seed": 3,
        }
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec))
        out = tmp_path / "out"
        assert run(["synth", "--spec", str(spec_path), "--out", str(out)]) == 0
        lines = (out / "custom.csv").read_text().strip().split("\n")
        assert len(lines) - 1 == 300
        manifest = json.loads((out / "synth_manifest.json").read_text())
        assert manifest["plan"][1]["tau_s"] == 45
        assert manifest["hr0"] == 66.0

    def test_seed_flag_overrides_spec_seed(self, tmp_path):
        spec = {
            "plan": [{"label": "rest", "duration_s": 120, "target_vo2": 0.4}],
            "lambda_true": [0.02, 0.1, -5.3, 10.5, 0.44, 0.1],
            "noise_sigma_hr": 2.0,
            "seed": 3,
        }
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec))
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(["synth", "--spec", str(spec_path), "--out", str(a)]) == 0
        assert run(["synth", "--spec", str(spec_path), "--out", str(b),
                    "--seed", "77"]) == 0
        csv_a = (a / "synthetic.csv").read_bytes()
        csv_b = (b / "synthetic.csv").read_bytes()
        assert csv_a != csv_b


def test_log_env_variable(tmp_path, monkeypatch, caplog):
    import logging

    monkeypatch.setenv("PMBNN_LOG", "INFO")
    with caplog.at_level(logging.INFO, logger="pmbnn"):
        assert run(["synth", "--out", str(tmp_path / "s"), "--seed", "1"]) == 0
    assert any("synthesized" in r.message for r in caplog.records)


def test_public_api_experiment_smoke():
    import pmbnn

    spec = pmbnn.SyntheticSpec(
        subject_id="api",
        plan=(
            pmbnn.experiment.ActivityPhase("rest", 100, 0.4),
            pmbnn.experiment.ActivityPhase("run", 100, 2.0),
        ),
        lambda_true=pmbnn.LambdaParams(0.02, 0.1, -5.3, 10.5, 0.44, 0.0),
        hr0=70.0,
        seed=1,
    )
    rec = pmbnn.generate_synthetic_subject(spec)
    cfg = pmbnn.experiment.ExperimentConfig(
        pmbnn=pmbnn.TrainConfig(max_epochs=10, seed=1),
        fcnn=pmbnn.TrainConfig(max_epochs=10, seed=1),
        pm_fit=pmbnn.training.PmFitConfig(iters=15),
    )
    split, results, manifest = pmbnn.run_subject_experiment(rec, cfg)
    assert set(results) == {"pmbnn", "fcnn", "pm", "pmbnn_r"}
    assert manifest["subject_id"] == "api"
