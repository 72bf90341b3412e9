import json

import numpy as np
import pytest
from PIL import Image

from sarcnet.cli import main
from sarcnet.explain import read_heatmap
from sarcnet.report import load_eval_csv


TINY_MODEL_JSON = {"input_size": 32, "stage_widths": [4, 4, 8, 8],
                   "embed_dim": 4, "epochs": 2, "batch_size": 8,
                   "lr": 0.0005}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generated dataset + extracted features + trained tiny checkpoint."""
    root = tmp_path_factory.mktemp("cliws")
    gen_spec = {"counts": {str(k): 8 for k in (1, 3, 5)}, "seed": 5,
                "image_size": 64}
    spec_path = root / "gen.json"
    spec_path.write_text(json.dumps(gen_spec))
    data_dir = root / "data"
    assert main(["generate", "--spec", str(spec_path),
                 "--out", str(data_dir)]) == 0

    feat_dir = root / "features"
    assert main(["extract", "--manifest", str(data_dir / "manifest.csv"),
                 "--out", str(feat_dir), "--protocol", "p2",
                 "--threads", "2"]) == 0

    cfg_path = root / "model.json"
    cfg_path.write_text(json.dumps(TINY_MODEL_JSON))
    run_dir = root / "run"
    assert main(["train", "--manifest", str(feat_dir / "manifest_features.csv"),
                 "--out", str(run_dir), "--config", str(cfg_path),
                 "--seed", "3"]) == 0
    return {"root": root, "data": data_dir, "features": feat_dir,
            "run": run_dir, "config": cfg_path}


class TestGenerate:
    def test_manifest_row_count(self, workspace):
        rows = (workspace["data"] / "manifest.csv").read_text().strip()
        assert len(rows.splitlines()) == 1 + 24

    def test_refuses_nonempty_dir_without_force(self, workspace, tmp_path):
        spec = tmp_path / "g.json"
        spec.write_text(json.dumps({"counts": {"1": 1}}))
        assert main(["generate", "--spec", str(spec),
                     "--out", str(workspace["data"])]) == 3

    def test_force_allows_overwrite(self, tmp_path):
        spec = tmp_path / "g.json"
        spec.write_text(json.dumps({"counts": {"2": 2}, "seed": 9}))
        out = tmp_path / "d"
        assert main(["generate", "--spec", str(spec), "--out", str(out)]) == 0
        assert main(["generate", "--spec", str(spec), "--out", str(out),
                     "--force"]) == 0

    def test_same_seed_identical_manifest(self, tmp_path):
        spec = tmp_path / "g.json"
        spec.write_text(json.dumps({"counts": {"4": 3}, "seed": 17}))
        for d in ("a", "b"):
            assert main(["generate", "--spec", str(spec),
                         "--out", str(tmp_path / d)]) == 0
        assert (tmp_path / "a" / "manifest.csv").read_bytes() == \
            (tmp_path / "b" / "manifest.csv").read_bytes()

    def test_bad_spec_key_is_config_error(self, tmp_path):
        spec = tmp_path / "g.json"
        spec.write_text(json.dumps({"banana": 1}))
        assert main(["generate", "--spec", str(spec),
                     "--out", str(tmp_path / "x")]) == 2


class TestExtract:
    def test_features_csv_columns(self, workspace):
        lines = (workspace["features"] / "features.csv").read_text().splitlines()
        header = lines[0].split(",")
        assert header[:2] == ["cell_id", "protocol"]
        assert header[2:7] == ["cell_area_px", "aspect_ratio", "max_cv",
                               "peak_height", "peak_distance_px"]
        assert len(header) == 13
        assert len(lines) == 1 + 24

    def test_augmented_manifest_carries_features(self, workspace):
        from sarcnet.data import load_manifest
        records = load_manifest(workspace["features"] / "manifest_features.csv")
        assert all(r.features is not None for r in records)
        assert all("frac_fibers" in r.features for r in records)


class TestTrainArtifacts:
    def test_checkpoint_and_log_exist(self, workspace):
        assert (workspace["run"] / "best.ckpt").exists()
        log_lines = (workspace["run"] / "train_log.csv").read_text().splitlines()
        assert log_lines[0].startswith("epoch,train_loss")
        assert len(log_lines) == 1 + 2  # header + one line per epoch


class TestEvaluateCli:
    def test_eval_outputs(self, workspace, tmp_path):
        out = tmp_path / "eval"
        code = main(["evaluate",
                     "--manifest", str(workspace["features"] / "manifest_features.csv"),
                     "--checkpoint", str(workspace["run"] / "best.ckpt"),
                     "--out", str(out), "--split", "test"])
        assert code == 0
        rows = load_eval_csv(out / "eval.csv")
        assert len(rows) == 5  # ceil(0.2 * 24)
        assert (out / "summary.txt").exists()
        assert list(out.glob("hist_day*.png"))

    def test_protocol_mismatch_is_exit_2(self, workspace, tmp_path):
        code = main(["evaluate",
                     "--manifest", str(workspace["features"] / "manifest_features.csv"),
                     "--checkpoint", str(workspace["run"] / "best.ckpt"),
                     "--out", str(tmp_path / "x"), "--protocol", "p1"])
        assert code == 2

    def test_missing_checkpoint_is_exit_3(self, workspace, tmp_path):
        code = main(["evaluate",
                     "--manifest", str(workspace["features"] / "manifest_features.csv"),
                     "--checkpoint", str(tmp_path / "none.ckpt"),
                     "--out", str(tmp_path / "y")])
        assert code == 3


class TestScoreCli:
    def test_score_prints_raw_and_clamped(self, workspace, capsys):
        from sarcnet.data import load_manifest
        record = load_manifest(workspace["data"] / "manifest.csv")[0]
        code = main(["score", "--image", str(record.image_path),
                     "--mask", str(record.mask_path),
                     "--classmap", str(record.classmap_path),
                     "--checkpoint", str(workspace["run"] / "best.ckpt")])
        assert code == 0
        line = capsys.readouterr().out.strip()
        raw = float(line.split()[0])
        clamped = float(line.split("clamped=")[1])
        assert np.isfinite(raw)
        assert 1.0 <= clamped <= 5.0

    def test_missing_classmap_for_p2_is_exit_2(self, workspace):
        from sarcnet.data import load_manifest
        record = load_manifest(workspace["data"] / "manifest.csv")[0]
        code = main(["score", "--image", str(record.image_path),
                     "--mask", str(record.mask_path),
                     "--checkpoint", str(workspace["run"] / "best.ckpt")])
        assert code == 2


class TestExplainCli:
    def test_overlays_written(self, workspace, tmp_path):
        out = tmp_path / "explain"
        code = main(["explain",
                     "--manifest", str(workspace["features"] / "manifest_features.csv"),
                     "--checkpoint", str(workspace["run"] / "best.ckpt"),
                     "--out", str(out), "--first", "3", "--dump-raw"])
        assert code == 0
        overlays = sorted(out.glob("overlay_*.png"))
        assert len(overlays) == 3
        img = Image.open(overlays[0])
        assert img.size == (32, 32)
        dumps = sorted(out.glob("heatmap_*.hmap"))
        assert len(dumps) == 3
        hm = read_heatmap(dumps[0])
        assert hm.values.shape == (32, 32)

    def test_unknown_cell_id_is_exit_2(self, workspace, tmp_path):
        code = main(["explain",
                     "--manifest", str(workspace["features"] / "manifest_features.csv"),
                     "--checkpoint", str(workspace["run"] / "best.ckpt"),
                     "--out", str(tmp_path / "z"), "--cells", "nope"])
        assert code == 2


class TestReportCli:
    def test_report_from_eval_csv(self, workspace, tmp_path):
        eval_dir = tmp_path / "eval"
        main(["evaluate",
              "--manifest", str(workspace["features"] / "manifest_features.csv"),
              "--checkpoint", str(workspace["run"] / "best.ckpt"),
              "--out", str(eval_dir), "--split", "all"])
        rep_dir = tmp_path / "rep"
        code = main(["report", "--eval-csv", str(eval_dir / "eval.csv"),
                     "--out", str(rep_dir)])
        assert code == 0
        summary = (rep_dir / "summary.txt").read_text()
        assert "higher_mean_day:" in summary
        assert list(rep_dir.glob("hist_day*.png"))
