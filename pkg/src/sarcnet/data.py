"""Dataset ingestion, label semantics, deterministic splits, and batching.

A dataset is a CSV manifest with one row per cell. Rows where either
expert withheld a score (value 0, meaning no tagged-protein expression)
are dropped at load time; the regression target is the mean of the two
expert scores, so it lives on the half-integer grid [1, 5].
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features as feat
from .autodiff import Tensor
from .errors import DataIOError, DegenerateInputError, ManifestError
from .imageops import load_image, load_label_map, load_mask, resize_bilinear, \
    to_model_input

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("cell_id", "image_path", "mask_path", "classmap_path",
                    "day", "expert1", "expert2")


@dataclass
class CellRecord:
    """One single-cell sample with its labels and optional cached features."""

    cell_id: str
    image_path: Path
    mask_path: Path
    classmap_path: Path | None
    day: int
    expert1: int
    expert2: int
    features: dict | None = None  # raw feature columns by name

    @property
    def ground_truth(self) -> float:
        return (self.expert1 + self.expert2) / 2.0


def _parse_score(raw: str, column: str, row_num: int) -> int:
    try:
        value = int(raw)
    except (TypeError, ValueError):
        raise ManifestError(
            f"row {row_num}: {column} must be an integer score, got {raw!r}"
        ) from None
    if value < 0 or value > 5:
        raise ManifestError(
            f"row {row_num}: {column} score {value} outside 0..5"
        )
    return value


def load_manifest(path) -> list[CellRecord]:
    """Parse a manifest CSV, dropping rows with any expert score of 0.

    Relative image/mask/classmap paths resolve against the manifest's
    directory. Feature columns, when present, are kept verbatim on the
    record.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    records: list[CellRecord] = []
    excluded = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"manifest {path} missing columns: {missing}")
        feature_cols = [c for c in header if c in feat.P2_COLUMNS]
        for row_num, row in enumerate(reader, start=2):
            e1 = _parse_score(row["expert1"], "expert1", row_num)
            e2 = _parse_score(row["expert2"], "expert2", row_num)
            if e1 == 0 or e2 == 0:
                excluded += 1
                continue
            try:
                day = int(row["day"])
            except (TypeError, ValueError):
                raise ManifestError(
                    f"row {row_num}: day must be an integer, got {row['day']!r}"
                ) from None
            classmap = row.get("classmap_path") or None
            features = None
            if feature_cols:
                try:
                    features = {c: float(row[c]) for c in feature_cols}
                except (TypeError, ValueError):
                    raise ManifestError(
                        f"row {row_num}: non-numeric feature value"
                    ) from None
            records.append(CellRecord(
                cell_id=row["cell_id"],
                image_path=base / row["image_path"],
                mask_path=base / row["mask_path"],
                classmap_path=base / classmap if classmap else None,
                day=day, expert1=e1, expert2=e2, features=features,
            ))
    log.info("loaded %d records from %s (%d excluded for score 0)",
             len(records), path, excluded)
    return records


def write_manifest(records: list[CellRecord], path,
                   feature_columns: tuple = ()) -> None:
    """Write records back out as a manifest CSV (paths kept relative)."""
    path = Path(path)
    base = path.parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(MANIFEST_COLUMNS) + list(feature_columns))
        for r in records:
            def rel(p):
                if p is None:
                    return ""
                try:
                    return Path(p).relative_to(base).as_posix()
                except ValueError:
                    return Path(p).as_posix()
            row = [r.cell_id, rel(r.image_path), rel(r.mask_path),
                   rel(r.classmap_path), r.day, r.expert1, r.expert2]
            if feature_columns:
                row += [repr(float(r.features[c])) for c in feature_columns]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic 3-way split plan.

    Sizing rounds the test and validation counts up (ceil) and gives the
    remainder to training, which reproduces 3686/922/1153 on 5761 rows
    at the default 0.64/0.16/0.20 fractions.
    """

    seed: int = 0
    fractions: tuple = (0.64, 0.16, 0.20)
    stratify: bool = False

    def __post_init__(self):
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9 \
                or any(f <= 0 for f in self.fractions):
            raise DegenerateInputError(
                f"fractions must be 3 positive values summing to 1, "
                f"got {self.fractions}"
            )


def _cut_counts(n: int, fractions: tuple) -> tuple[int, int, int]:
    n_test = math.ceil(fractions[2] * n)
    n_val = math.ceil(fractions[1] * n)
    n_train = n - n_val - n_test
    return n_train, n_val, n_test


def split(records: list[CellRecord], spec: SplitSpec
          ) -> tuple[list[CellRecord], list[CellRecord], list[CellRecord]]:
    """Seeded shuffle + contiguous cut into train/val/test lists.

    Stratified mode applies the same rule per rounded-score class, which
    keeps each split's score distribution within one record of the
    global one."""
    n = len(records)
    if n < 10:
        raise DegenerateInputError(f"need at least 10 records to split, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    if not spec.stratify:
        order = rng.permutation(n)
        n_train, n_val, _ = _cut_counts(n, spec.fractions)
        train = [records[i] for i in order[:n_train]]
        val = [records[i] for i in order[n_train:n_train + n_val]]
        test = [records[i] for i in order[n_train + n_val:]]
        return train, val, test
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(round(r.ground_truth), []).append(i)
    train_idx, val_idx, test_idx = [], [], []
    for key in sorted(groups):
        idx = np.asarray(groups[key])
        idx = idx[rng.permutation(len(idx))]
        n_train, n_val, _ = _cut_counts(len(idx), spec.fractions)
        train_idx += idx[:n_train].tolist()
        val_idx += idx[n_train:n_train + n_val].tolist()
        test_idx += idx[n_train + n_val:].tolist()
    return ([records[i] for i in train_idx],
            [records[i] for i in val_idx],
            [records[i] for i in test_idx])


# ---------------------------------------------------------------------------
# feature access and batching


def compute_record_features(record: CellRecord, protocol: str) -> dict:
    """Extract protocol features from the record's image/mask/classmap."""
    img = load_image(record.image_path)
    mask = load_mask(record.mask_path)
    classmap = None
    if protocol == "p2":
        if record.classmap_path is None:
            raise DataIOError(
                f"cell {record.cell_id}: protocol p2 needs a classmap"
            )
        classmap = load_label_map(record.classmap_path)
    vector = feat.extract_features(img, mask, protocol, classmap)
    return dict(zip(feat.protocol_columns(protocol), vector.values))


def ensure_features(records: list[CellRecord], protocol: str,
                    threads: int = 1) -> None:
    """Fill each record's feature cache for ``protocol`` (parallel-safe)."""
    columns = feat.protocol_columns(protocol)
    todo = [r for r in records
            if r.features is None or any(c not in r.features for c in columns)]
    if not todo:
        return

    def work(record):
        computed = compute_record_features(record, protocol)
        merged = dict(record.features or {})
        merged.update(computed)
        record.features = merged

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, todo))
    else:
        for record in todo:
            work(record)


def feature_matrix(records: list[CellRecord], protocol: str) -> np.ndarray:
    """Raw (unscaled) feature matrix in protocol column order."""
    columns = feat.protocol_columns(protocol)
    rows = []
    for r in records:
        if r.features is None or any(c not in r.features for c in columns):
            raise DegenerateInputError(
                f"cell {r.cell_id} lacks cached {protocol} features; "
                "run ensure_features first"
            )
        rows.append([r.features[c] for c in columns])
    return np.asarray(rows, dtype=np.float64)


def target_vector(records: list[CellRecord]) -> np.ndarray:
    return np.asarray([r.ground_truth for r in records], dtype=np.float64)


def _prepare_image(record: CellRecord, input_size: int,
                   cache: dict | None) -> np.ndarray:
    if cache is not None and record.cell_id in cache:
        return cache[record.cell_id]
    try:
        img = load_image(record.image_path)
    except DataIOError as exc:
        raise DataIOError(f"cell {record.cell_id}: {exc}") from exc
    resized = resize_bilinear(img, input_size, input_size)
    arr = to_model_input(resized).data
    if cache is not None:
        cache[record.cell_id] = arr
    return arr


def batches(records: list[CellRecord], batch_size: int, input_size: int,
            scaler: feat.ScalerParams, shuffle_seed: int | None = None,
            epoch: int = 0, cache: dict | None = None):
    """Yield (images [B,3,S,S], features [B,F], targets [B,1]) tensors.

    The final partial batch is kept. With ``shuffle_seed`` set, the
    order is a permutation derived from (seed, epoch); otherwise the
    record order is preserved. Image preprocessing results may be
    memoized in ``cache`` keyed by cell id.
    """
    if not records:
        raise DegenerateInputError("cannot batch zero records")
    if batch_size < 1:
        raise DegenerateInputError(f"batch_size must be >= 1, got {batch_size}")
    protocol = scaler.protocol
    feats = feat.scale_matrix(feature_matrix(records, protocol), scaler)
    targets = target_vector(records)
    order = np.arange(len(records))
    if shuffle_seed is not None:
        rng = np.random.default_rng(
            np.random.SeedSequence(shuffle_seed, spawn_key=(epoch,)))
        order = rng.permutation(len(records))
    for start in range(0, len(records), batch_size):
        idx = order[start:start + batch_size]
        images = np.stack([_prepare_image(records[i], input_size, cache)
                           for i in idx])
        yield (Tensor(images),
               Tensor(feats[idx].astype(np.float32)),
               Tensor(targets[idx, None].astype(np.float32)))
