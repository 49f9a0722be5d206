import json

import numpy as np
import pytest

from msamseg import cli
from msamseg.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small generated dataset plus a matching experiment config file."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    config = {
        "model": {"backbone_input": "ct", "msam_input": "pet",
                  "depth": 2, "base_width": 4, "input_size": [16, 16]},
        "training": {"epochs": 2, "batch_size": 2, "seed": 3},
        "data": {"path": str(data_dir),
                 "phantom": {"patients": 4, "slices_per_patient": [2, 2],
                             "size": [16, 16], "seed": 9}},
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config))
    rc = main(["gen-data", "--config", str(config_path), "--out", str(data_dir)])
    assert rc == EXIT_OK
    return root, config_path, data_dir


class TestGenData:
    def test_writes_manifest(self, workspace):
        _, _, data_dir = workspace
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert manifest["schema_version"] == 1
        assert len({r["patient_id"] for r in manifest["slices"]}) == 4

    def test_regeneration_is_byte_identical(self, workspace, tmp_path):
        _, config_path, data_dir = workspace
        assert main(["gen-data", "--config", str(config_path), "--out", str(tmp_path)]) == EXIT_OK
        for f in sorted(data_dir.iterdir()):
            assert (tmp_path / f.name).read_bytes() == f.read_bytes(), f.name

    def test_seed_flag_overrides_config(self, workspace, tmp_path):
        _, config_path, data_dir = workspace
        assert main(["gen-data", "--config", str(config_path), "--seed", "10",
                     "--out", str(tmp_path)]) == EXIT_OK
        a = next(data_dir.glob("*_pet.raw")).name
        assert (tmp_path / a).read_bytes() != (data_dir / a).read_bytes()


class TestConfigValidation:
    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"optimizer": {}}))
        assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "d")]) == EXIT_USAGE

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"training": {"epochs": 1, "momentum": 0.9}}))
        assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "d")]) == EXIT_USAGE

    def test_unknown_phantom_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"data": {"phantom": {"lesions": 3}}}))
        assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "d")]) == EXIT_USAGE

    def test_invalid_json_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "d")]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "d")]) == EXIT_USAGE

    def test_missing_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == EXIT_USAGE


@pytest.fixture(scope="module")
def run_dir(workspace, tmp_path_factory):
    _, config_path, _ = workspace
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--config", str(config_path), "--out", str(out),
               "--label", "demo", "--k", "2", "--fold", "0"])
    assert rc == EXIT_OK
    return out


class TestTrainEval:
    def test_train_outputs(self, run_dir):
        assert (run_dir / "demo.ckpt").exists()
        lines = (run_dir / "demo_loss.csv").read_text().strip().split("\n")
        assert lines[0] == "epoch,mean_loss" and len(lines) == 3

    def test_eval_uses_recorded_fold(self, workspace, run_dir, tmp_path):
        _, config_path, _ = workspace
        rc = main(["eval", "--config", str(config_path),
                   "--checkpoint", str(run_dir / "demo.ckpt"), "--out", str(tmp_path)])
        assert rc == EXIT_OK
        report = json.loads((tmp_path / "eval.json").read_text())
        assert set(report["metrics"]) == {"precision", "sensitivity", "specificity", "dsc"}

    def test_eval_attention_export(self, workspace, run_dir, tmp_path):
        _, config_path, _ = workspace
        maps = tmp_path / "maps"
        rc = main(["eval", "--config", str(config_path),
                   "--checkpoint", str(run_dir / "demo.ckpt"), "--out", str(tmp_path),
                   "--export-attention", str(maps)])
        assert rc == EXIT_OK
        attn = sorted(maps.glob("*_attention.pgm"))
        pred = sorted(maps.glob("*_pred.pgm"))
        assert attn and len(attn) == len(pred)

    def test_eval_without_attention_prints_notice(self, workspace, tmp_path, capsys):
        _, config_path, _ = workspace
        out = tmp_path / "plain"
        rc = main(["train", "--config", str(config_path), "--out", str(out),
                   "--msam-input", "off", "--epochs", "1", "--k", "2"])
        assert rc == EXIT_OK
        rc = main(["eval", "--config", str(config_path),
                   "--checkpoint", str(out / "run.ckpt"), "--out", str(tmp_path / "e"),
                   "--export-attention", str(tmp_path / "maps")])
        assert rc == EXIT_OK
        assert "no attention to export" in capsys.readouterr().out
        assert not (tmp_path / "maps").exists()

    def test_bad_fold_index(self, workspace, tmp_path):
        _, config_path, _ = workspace
        rc = main(["train", "--config", str(config_path), "--out", str(tmp_path),
                   "--k", "2", "--fold", "5"])
        assert rc == EXIT_USAGE

    def test_missing_dataset(self, tmp_path):
        rc = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path),
                   "--epochs", "1"])
        assert rc == EXIT_USAGE

    def test_eval_rejects_garbage_checkpoint(self, workspace, tmp_path):
        _, config_path, _ = workspace
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"nonsense")
        rc = main(["eval", "--config", str(config_path), "--checkpoint", str(bad),
                   "--out", str(tmp_path)])
        assert rc == EXIT_USAGE


class TestXval:
    def test_single_config_report(self, workspace, tmp_path):
        _, config_path, _ = workspace
        rc = main(["xval", "--config", str(config_path), "--out", str(tmp_path),
                   "--k", "2", "--epochs", "1"])
        assert rc == EXIT_OK
        lines = (tmp_path / "report.csv").read_text().strip().split("\n")
        assert len(lines) == 3  # header + 2 folds
        assert (tmp_path / "summary.json").exists()
        assert (tmp_path / "matrix_summary.json").exists()

    def test_multi_seed_layout(self, workspace, tmp_path):
        _, config_path, _ = workspace
        rc = main(["xval", "--config", str(config_path), "--out", str(tmp_path),
                   "--k", "2", "--epochs", "1", "--seeds", "1", "2"])
        assert rc == EXIT_OK
        assert (tmp_path / "seed1" / "report.csv").exists()
        assert (tmp_path / "seed2" / "report.csv").exists()
        summary = json.loads((tmp_path / "matrix_summary.json").read_text())
        assert summary["seeds"] == [1, 2]

    def test_invalid_threads_env(self, workspace, tmp_path, monkeypatch):
        _, config_path, _ = workspace
        monkeypatch.setenv("MSAMSEG_THREADS", "many")
        rc = main(["xval", "--config", str(config_path), "--out", str(tmp_path),
                   "--k", "2", "--epochs", "1"])
        assert rc == EXIT_USAGE


class TestGradCheck:
    def test_subset_passes(self, capsys):
        rc = main(["grad-check", "--ops", "relu,maxpool2d", "--trials", "2"])
        assert rc == EXIT_OK
        out = capsys.readouterr().out
        assert out.count("PASS") == 2

    def test_unknown_op_is_usage_error(self):
        assert main(["grad-check", "--ops", "conv5d"]) == EXIT_USAGE

    def test_impossible_tolerance_fails(self, capsys):
        rc = main(["grad-check", "--ops", "relu", "--trials", "1", "--tolerance", "1e-30"])
        assert rc == EXIT_FAIL
        assert "FAIL" in capsys.readouterr().out
