import numpy as np
import pytest

from sarcnet.errors import ManifestError, NumericError
from sarcnet.report import load_eval_csv, report_from_rows, summary_text, \
    write_eval_csv, write_report_files
from sarcnet.training import EvalReport, day_histogram


def sample_rows(rng, n=40):
    rows = []
    for i in range(n):
        gt = float(rng.integers(1, 6))
        pred = gt + rng.normal(0, 0.3)
        day = 18 if i % 2 == 0 else 32
        rows.append((f"c{i:03d}", gt, float(pred), day))
    return rows


class TestReportFiles:
    def test_full_emission(self, tmp_path, rng):
        report = report_from_rows(sample_rows(rng))
        paths = write_report_files(report, tmp_path / "out")
        assert paths["csv"].exists()
        assert paths["summary"].exists()
        assert paths["hist_day18"].exists()
        assert paths["hist_day32"].exists()
        assert paths["hist_day18"].read_bytes()[:4] == b"\x89PNG"

    def test_csv_round_trip(self, tmp_path, rng):
        rows = sample_rows(rng, 20)
        report = report_from_rows(rows)
        path = tmp_path / "eval.csv"
        write_eval_csv(report, path)
        back = load_eval_csv(path)
        assert len(back) == 20
        for (id_a, gt_a, p_a, d_a), (id_b, gt_b, p_b, d_b) in zip(rows, back):
            assert id_a == id_b and d_a == d_b
            assert gt_a == pytest.approx(gt_b)
            assert p_a == pytest.approx(p_b, abs=1e-6)

    def test_summary_names_higher_day(self, rng):
        rows = [(f"a{i}", 2.0, 2.0 + 0.1 * i, 18) for i in range(10)]
        rows += [(f"b{i}", 4.0, 4.0 + 0.1 * i, 32) for i in range(10)]
        text = summary_text(report_from_rows(rows))
        assert "higher_mean_day: 32" in text
        assert "day18_mean_prediction" in text
        assert "spearman:" in text

    def test_self_consistency_guard_trips_on_tampering(self, tmp_path, rng):
        report = report_from_rows(sample_rows(rng))
        report.metrics["mae"] += 0.5
        with pytest.raises(NumericError):
            write_report_files(report, tmp_path / "out")

    def test_histogram_guard(self, tmp_path, rng):
        report = report_from_rows(sample_rows(rng))
        report.histograms[18] = report.histograms[18] + 1
        with pytest.raises(NumericError):
            write_report_files(report, tmp_path / "out")

    def test_load_eval_csv_rejects_wrong_columns(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("foo,bar\n1,2\n")
        with pytest.raises(ManifestError):
            load_eval_csv(path)

    def test_degenerate_metrics_survive_emission(self, tmp_path):
        rows = [(f"c{i}", 3.0, 2.5, 18) for i in range(5)]  # constant preds+gts
        report = report_from_rows(rows)
        assert report.metrics["spearman"] is None
        paths = write_report_files(report, tmp_path / "out")
        assert "spearman: nan" in paths["summary"].read_text()

    def test_deterministic_png_bytes(self, tmp_path, rng):
        rows = sample_rows(rng, 30)
        a = write_report_files(report_from_rows(rows), tmp_path / "a")
        b = write_report_files(report_from_rows(rows), tmp_path / "b")
        assert a["hist_day18"].read_bytes() == b["hist_day18"].read_bytes()
        assert a["csv"].read_bytes() == b["csv"].read_bytes()
