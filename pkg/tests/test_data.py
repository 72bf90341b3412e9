import numpy as np
import pytest

from sarcnet.data import CellRecord, SplitSpec, batches, ensure_features, \
    feature_matrix, load_manifest, split, target_vector, write_manifest
from sarcnet.errors import DataIOError, DegenerateInputError, ManifestError
from sarcnet.features import P2_COLUMNS, ScalerParams


def manifest_text(rows):
    header = "cell_id,image_path,mask_path,classmap_path,day,expert1,expert2"
    return "\n".join([header] + rows) + "\n"


def fake_records(n, seed=0):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        e1 = int(rng.integers(1, 6))
        e2 = int(np.clip(e1 + rng.integers(-1, 2), 1, 5))
        records.append(CellRecord(f"c{i:05d}", f"img{i}.png", f"m{i}.png",
                                  None, 18 if i % 2 else 32, e1, e2))
    return records


class TestLoadManifest:
    def test_basic_parse_and_averaging(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(manifest_text([
            "a,ia.png,ma.png,ca.png,18,3,4",
            "b,ib.png,mb.png,,32,5,5",
        ]))
        records = load_manifest(path)
        assert len(records) == 2
        assert records[0].ground_truth == pytest.approx(3.5)
        assert records[1].ground_truth == pytest.approx(5.0)
        assert records[0].classmap_path == tmp_path / "ca.png"
        assert records[1].classmap_path is None
        assert records[0].image_path == tmp_path / "ia.png"

    def test_score_zero_excluded(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(manifest_text([
            "a,i.png,m.png,,18,0,3",
            "b,i.png,m.png,,18,3,0",
            "c,i.png,m.png,,18,2,2",
        ]))
        records = load_manifest(path)
        assert [r.cell_id for r in records] == ["c"]

    def test_exclusion_count(self, tmp_path, caplog):
        rows = [f"v{i},i.png,m.png,,18,3,3" for i in range(10)]
        rows += ["z1,i.png,m.png,,18,0,1", "z2,i.png,m.png,,18,1,0"]
        path = tmp_path / "m.csv"
        path.write_text(manifest_text(rows))
        with caplog.at_level("INFO"):
            records = load_manifest(path)
        assert len(records) == 10
        assert "2 excluded" in caplog.text

    def test_missing_column(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("cell_id,image_path\n a,i.png\n")
        with pytest.raises(ManifestError, match="missing columns"):
            load_manifest(path)

    def test_non_integer_score_names_row(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(manifest_text(["a,i.png,m.png,,18,3,3",
                                       "b,i.png,m.png,,18,x,3"]))
        with pytest.raises(ManifestError, match="row 3"):
            load_manifest(path)

    def test_score_above_five_rejected(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(manifest_text(["a,i.png,m.png,,18,6,3"]))
        with pytest.raises(ManifestError, match="outside 0..5"):
            load_manifest(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "absent.csv")

    def test_feature_columns_kept_verbatim(self, tmp_path):
        header = ",".join(["cell_id", "image_path", "mask_path",
                           "classmap_path", "day", "expert1", "expert2",
                           *P2_COLUMNS])
        values = [str(float(i + 1)) for i in range(5)] \
            + ["0.5", "0.1", "0.1", "0.1", "0.1", "0.1"]
        path = tmp_path / "m.csv"
        path.write_text(header + "\n" + "a,i.png,m.png,,18,3,3,"
                        + ",".join(values) + "\n")
        records = load_manifest(path)
        assert records[0].features["cell_area_px"] == 1.0
        assert records[0].features["frac_background"] == 0.5

    def test_ground_truth_on_half_integer_grid(self, tmp_path):
        rows = [f"r{e1}{e2},i.png,m.png,,18,{e1},{e2}"
                for e1 in range(1, 6) for e2 in range(1, 6)]
        path = tmp_path / "m.csv"
        path.write_text(manifest_text(rows))
        for r in load_manifest(path):
            assert (2 * r.ground_truth) == int(2 * r.ground_truth)
            assert 1.0 <= r.ground_truth <= 5.0

    def test_write_round_trip(self, tmp_path):
        records = fake_records(8)
        path = tmp_path / "out.csv"
        write_manifest(records, path)
        back = load_manifest(path)
        assert [r.cell_id for r in back] == [r.cell_id for r in records]
        assert [r.day for r in back] == [r.day for r in records]


class TestSplit:
    def test_100_records_cut(self):
        records = fake_records(100)
        train, val, test = split(records, SplitSpec(seed=1))
        assert (len(train), len(val), len(test)) == (64, 16, 20)

    def test_5761_reproduces_published_counts(self):
        records = fake_records(5761)
        train, val, test = split(records, SplitSpec(seed=7))
        assert (len(train), len(val), len(test)) == (3686, 922, 1153)

    def test_deterministic(self):
        records = fake_records(50)
        a = split(records, SplitSpec(seed=3))
        b = split(records, SplitSpec(seed=3))
        for x, y in zip(a, b):
            assert [r.cell_id for r in x] == [r.cell_id for r in y]

    def test_disjoint_and_exhaustive(self):
        records = fake_records(137)
        train, val, test = split(records, SplitSpec(seed=5))
        ids = [r.cell_id for r in train + val + test]
        assert len(ids) == 137
        assert len(set(ids)) == 137

    def test_stratified_preserves_distribution(self):
        records = fake_records(400, seed=9)
        train, val, test = split(records, SplitSpec(seed=2, stratify=True))
        for cls in sorted({round(r.ground_truth) for r in records}):
            total = sum(round(r.ground_truth) == cls for r in records)
            got = sum(round(r.ground_truth) == cls for r in train)
            expected = total - np.ceil(0.16 * total) - np.ceil(0.2 * total)
            assert abs(got - expected) <= 1

    def test_too_few_records(self):
        with pytest.raises(DegenerateInputError):
            split(fake_records(5), SplitSpec())


def records_with_features(tmp_path, n=10, seed=0):
    """Records whose images exist on disk and whose features are cached."""
    from sarcnet.imageops import save_gray_png
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        img_path = tmp_path / f"i{i}.png"
        save_gray_png(rng.uniform(0.1, 0.9, size=(24, 24)), img_path)
        r = CellRecord(f"c{i}", img_path, tmp_path / "unused_mask.png", None,
                       18, (i % 5) + 1, (i % 5) + 1)
        r.features = {"cell_area_px": 100.0 + i, "aspect_ratio": 1.5,
                      "max_cv": 0.3, "peak_height": 0.2,
                      "peak_distance_px": 10.0}
        records.append(r)
    return records


def identity_scaler(protocol="p1", dim=5):
    return ScalerParams(protocol, np.zeros(dim), np.ones(dim))


class TestBatches:
    def test_batch_sizes(self, tmp_path):
        records = records_with_features(tmp_path, 100 // 10)
        # 10 records, batch 4 -> 4, 4, 2
        sizes = [t.shape[0] for _, _, t in
                 batches(records, 4, 24, identity_scaler())]
        assert sizes == [4, 4, 2]

    def test_order_preserved_without_shuffle(self, tmp_path):
        records = records_with_features(tmp_path, 6)
        _, feats, _ = next(batches(records, 6, 24, identity_scaler()))
        np.testing.assert_allclose(feats.data[:, 0],
                                   [100.0 + i for i in range(6)])

    def test_targets_are_permutation_of_ground_truth(self, tmp_path):
        records = records_with_features(tmp_path, 9)
        collected = []
        for _, _, t in batches(records, 4, 24, identity_scaler(),
                               shuffle_seed=3, epoch=2):
            collected.extend(t.data[:, 0].tolist())
        assert sorted(collected) == sorted(r.ground_truth for r in records)

    def test_epoch_changes_order(self, tmp_path):
        records = records_with_features(tmp_path, 8)
        def order(epoch):
            out = []
            for _, f, _ in batches(records, 8, 24, identity_scaler(),
                                   shuffle_seed=1, epoch=epoch):
                out.extend(f.data[:, 0].tolist())
            return out
        assert order(1) != order(2)
        assert order(1) == order(1)

    def test_missing_image_names_cell(self, tmp_path):
        records = records_with_features(tmp_path, 6)
        records[3].image_path = tmp_path / "gone.png"
        with pytest.raises(DataIOError, match="c3"):
            for _ in batches(records, 2, 24, identity_scaler()):
                pass

    def test_image_tensor_shape(self, tmp_path):
        records = records_with_features(tmp_path, 4)
        imgs, feats, targets = next(batches(records, 4, 16, identity_scaler()))
        assert imgs.shape == (4, 3, 16, 16)
        assert feats.shape == (4, 5)
        assert targets.shape == (4, 1)

    def test_feature_matrix_requires_cache(self, tmp_path):
        r = CellRecord("x", tmp_path / "i.png", tmp_path / "m.png", None,
                       18, 3, 3)
        with pytest.raises(DegenerateInputError, match="ensure_features"):
            feature_matrix([r], "p1")

    def test_target_vector(self):
        records = fake_records(5)
        np.testing.assert_allclose(target_vector(records),
                                   [r.ground_truth for r in records])
