"""CLI surface: subcommands, artifacts, exit codes, reproducibility."""

import json
from pathlib import Path

import numpy as np
import pytest

from fvcprog import pgmio
from fvcprog.cli import main

SMALL_MODEL = {
    "image_size": 32, "gate_channels": 4, "cnn_channels": [8, 16, 32],
    "token_grid": 4, "vit_embed": 32, "vit_heads": 4, "vit_depth": 1,
    "clinical_hidden": 8, "clinical_out": 16, "fusion_hidden": 32,
}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    code = main(["synth", "--patients", "5", "--slices", "3", "--visits", "4",
                 "--image-size", "32", "--seed", "7", "--out", str(root)])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    cfg_path = out.parent / "model.json"
    cfg_path.write_text(json.dumps(SMALL_MODEL))
    code = main(["train", "--data", str(dataset), "--out", str(out),
                 "--config", str(cfg_path), "--folds", "2", "--epochs", "2",
                 "--eval-every", "2", "--seed", "3", "--image-size", "32"])
    assert code == 0
    return out


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestSynth:
    def test_byte_identical_trees(self, tmp_path):
        for d in ("a", "b"):
            code = main(["synth", "--patients", "3", "--slices", "3",
                         "--visits", "3", "--image-size", "32", "--seed", "7",
                         "--out", str(tmp_path / d)])
            assert code == 0
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a.keys() == b.keys()
        for name in a:
            assert a[name] == b[name], f"{name} differs"

    def test_layout(self, dataset):
        assert (dataset / "clinical.csv").exists()
        assert (dataset / "SP000" / "manifest.json").exists()
        assert (dataset / "run_manifest.json").exists()
        manifest = json.loads((dataset / "SP000" / "manifest.json").read_text())
        assert set(manifest) == {"patient_id", "slices", "keep_range"}


class TestMask:
    def test_writes_masks_for_kept_slices(self, dataset):
        code = main(["mask", "--data", str(dataset)])
        assert code == 0
        # keep_range of a 3-slice stack is (1, 1)
        assert (dataset / "SP000" / "slice_001.mask.pgm").exists()
        mask = pgmio.read_mask(dataset / "SP000" / "slice_001.mask.pgm")
        assert mask.any()

    def test_no_lung_region_exit_code(self, tmp_path):
        pdir = tmp_path / "P9"
        pdir.mkdir()
        pgmio.write_hu_slice(pdir / "s0.pgm", np.zeros((16, 16), dtype=np.int32))
        (pdir / "manifest.json").write_text(json.dumps(
            {"patient_id": "P9", "slices": ["s0.pgm"], "keep_range": [0, 0]}))
        code = main(["mask", "--manifest", str(pdir / "manifest.json")])
        assert code == 2

    def test_fallback_ones_flag(self, tmp_path, capsys):
        pdir = tmp_path / "P9"
        pdir.mkdir()
        pgmio.write_hu_slice(pdir / "s0.pgm", np.zeros((16, 16), dtype=np.int32))
        (pdir / "manifest.json").write_text(json.dumps(
            {"patient_id": "P9", "slices": ["s0.pgm"], "keep_range": [0, 0]}))
        code = main(["mask", "--manifest", str(pdir / "manifest.json"),
                     "--fallback-ones"])
        assert code == 0
        assert "all-ones" in capsys.readouterr().err
        mask = pgmio.read_mask(pdir / "s0.mask.pgm")
        assert mask.all()

    def test_manual_seed_point(self, dataset):
        code = main(["mask", "--data", str(dataset), "--seed-point", "16,10"])
        assert code == 0


class TestTrain:
    def test_artifacts(self, trained):
        assert (trained / "trainlog.jsonl").exists()
        assert (trained / "fold0.ckpt").exists()
        assert (trained / "fold1.ckpt").exists()
        assert (trained / "loss_curves.svg").exists()
        assert (trained / "timing.json").exists()
        lines = (trained / "trainlog.jsonl").read_text().splitlines()
        header = json.loads(lines[0])
        assert header["type"] == "header"
        assert header["config"]["learning_rate"] == pytest.approx(2e-4)

    def test_run_manifest_embedded_in_artifacts(self, trained):
        lines = (trained / "trainlog.jsonl").read_text().splitlines()
        header = json.loads(lines[0])
        assert header["run"]["command"] == "train"
        from fvcprog.checkpoint import load_checkpoint
        _, ckpt_header = load_checkpoint(trained / "fold0.ckpt")
        assert ckpt_header["meta"]["run"]["tool"] == "fvcprog"
        svg = (trained / "loss_curves.svg").read_text()
        assert "fvcprog" in svg  # manifest in figure metadata

    def test_trainlog_reproducible(self, dataset, trained, tmp_path):
        cfg_path = tmp_path / "model.json"
        cfg_path.write_text(json.dumps(SMALL_MODEL))
        out2 = tmp_path / "run2"
        code = main(["train", "--data", str(dataset), "--out", str(out2),
                     "--config", str(cfg_path), "--folds", "2", "--epochs", "2",
                     "--eval-every", "2", "--seed", "3", "--image-size", "32"])
        assert code == 0
        assert (trained / "trainlog.jsonl").read_bytes() == \
            (out2 / "trainlog.jsonl").read_bytes()
        assert (trained / "fold0.ckpt").read_bytes() == \
            (out2 / "fold0.ckpt").read_bytes()
        assert (trained / "loss_curves.svg").read_bytes() == \
            (out2 / "loss_curves.svg").read_bytes()


class TestEval:
    def test_metrics_json(self, dataset, trained, tmp_path):
        out = tmp_path / "eval"
        code = main(["eval", "--data", str(dataset),
                     "--checkpoint", str(trained / "fold0.ckpt"),
                     "--out", str(out)])
        assert code == 0
        report = json.loads((out / "metrics.json").read_text())
        assert np.isfinite(report["rmse"])
        assert np.isfinite(report["lll"])
        assert len(report["per_patient"]) == 5
        for row in report["per_patient"]:
            assert np.isfinite(row["rmse"])
            assert np.isfinite(row["lll"])
        assert report["run"]["command"] == "eval"

    def test_fixed_sigma_and_clip(self, dataset, trained, tmp_path):
        out = tmp_path / "eval2"
        code = main(["eval", "--data", str(dataset),
                     "--checkpoint", str(trained / "fold0.ckpt"),
                     "--out", str(out), "--sigma-policy", "fixed",
                     "--sigma", "70", "--clip", "70,1000"])
        assert code == 0
        report = json.loads((out / "metrics.json").read_text())
        assert report["sigma"] == 70.0
        assert report["sigma_policy"]["clip"] == [70.0, 1000.0]

    def test_fixed_policy_without_sigma_is_usage_error(self, dataset, trained,
                                                       tmp_path):
        code = main(["eval", "--data", str(dataset),
                     "--checkpoint", str(trained / "fold0.ckpt"),
                     "--out", str(tmp_path / "x"), "--sigma-policy", "fixed"])
        assert code == 1

    def test_missing_checkpoint_is_data_error(self, dataset, tmp_path):
        code = main(["eval", "--data", str(dataset),
                     "--checkpoint", str(tmp_path / "nope.ckpt"),
                     "--out", str(tmp_path / "x")])
        assert code == 2


class TestPredict:
    def test_csv_structure(self, dataset, trained, tmp_path):
        out = tmp_path / "pred"
        code = main(["predict", "--data", str(dataset),
                     "--checkpoint", str(trained / "fold0.ckpt"),
                     "--out", str(out)])
        assert code == 0
        lines = (out / "predictions.csv").read_text().splitlines()
        assert lines[0].startswith("# {")
        assert lines[1] == "patient_id,week,fvc_true,fvc_pred,slope"
        # 5 patients x 4 visits
        assert len(lines) == 2 + 5 * 4
        first = lines[2].split(",")
        assert first[0] == "SP000"
        # baseline visit reconstructs the baseline exactly
        assert float(first[1]) == 0.0
        assert float(first[2]) == pytest.approx(float(first[3]))


class TestDistfit:
    def test_artifacts_and_determinism(self, dataset, tmp_path):
        out1, out2 = tmp_path / "d1", tmp_path / "d2"
        for out in (out1, out2):
            code = main(["distfit", "--data", str(dataset), "--out", str(out)])
            assert code == 0
        for name in ("distfit.csv", "distfit.json", "distfit.svg"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
        rows = (out1 / "distfit.csv").read_text().splitlines()
        assert rows[1].split(",")[0] == "bin_left"
        payload = json.loads((out1 / "distfit.json").read_text())
        assert payload["laplace"]["b"] > 0
        svg = (out1 / "distfit.svg").read_text()
        assert svg.startswith("<?xml")


class TestDumpFeatures:
    def test_channel_images(self, dataset, trained, tmp_path):
        out = tmp_path / "feat"
        code = main(["dump-features", "--data", str(dataset),
                     "--checkpoint", str(trained / "fold0.ckpt"),
                     "--patient", "SP001", "--out", str(out)])
        assert code == 0
        files = sorted(out.glob("features_SP001_*.pgm"))
        assert len(files) == SMALL_MODEL["gate_channels"]
        img, maxval = pgmio.read_pgm(files[0])
        assert maxval == 255
        assert img.shape == (32, 32)


class TestUsageAndHelp:
    def test_help_exits_zero_everywhere(self, capsys):
        assert main(["--help"]) == 0
        for cmd in ("synth", "mask", "train", "eval", "predict", "distfit",
                    "dump-features"):
            assert main([cmd, "--help"]) == 0
            out = capsys.readouterr().out
            assert "--out" in out or "usage" in out

    def test_unknown_command_exit_one(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag_exit_one(self):
        assert main(["train", "--data", "x"]) == 1

    def test_mask_without_inputs_exit_one(self):
        assert main(["mask"]) == 1

    def test_bad_config_key_exit_one(self, dataset, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"not_a_key": 1}))
        code = main(["train", "--data", str(dataset),
                     "--out", str(tmp_path / "o"), "--config", str(cfg)])
        assert code == 1

    def test_missing_dataset_exit_two(self, tmp_path):
        code = main(["train", "--data", str(tmp_path / "absent"),
                     "--out", str(tmp_path / "o"), "--folds", "2",
                     "--epochs", "1"])
        assert code == 2

    def test_config_flag_override(self, dataset, tmp_path):
        # config sets epochs=1; flag overrides to 2
        cfg = tmp_path / "cfg.json"
        merged = dict(SMALL_MODEL)
        merged["epochs"] = 1
        cfg.write_text(json.dumps(merged))
        out = tmp_path / "run"
        code = main(["train", "--data", str(dataset), "--out", str(out),
                     "--config", str(cfg), "--folds", "2", "--epochs", "2",
                     "--eval-every", "2", "--image-size", "32"])
        assert code == 0
        lines = (out / "trainlog.jsonl").read_text().splitlines()
        header = json.loads(lines[0])
        assert header["config"]["epochs"] == 2
