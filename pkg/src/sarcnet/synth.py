"""Synthetic single-cell image generator with known ground truth.

Organization levels follow the scoring rubric the package targets:

1. sparse, disorganized puncta
2. dense puncta
3. puncta mixed with short fiber segments (and the odd striped patch)
4. periodic stripes with per-patch random orientation
5. globally aligned periodic stripes

Every cell is an ellipse on a dark noisy background; a class map labels
each pixel by the primitive that produced it, and the stripe period used
for levels 4-5 is recorded as generator ground truth so texture metrics
can be validated against it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CellRecord, write_manifest
from .errors import ConfigError, DataIOError
from .imageops import save_gray_png, save_label_png

LABEL_BACKGROUND = 0
LABEL_DIFFUSE = 1
LABEL_FIBERS = 2
LABEL_DISORG_PUNCTA = 3
LABEL_ORG_PUNCTA = 4
LABEL_ZDISCS = 5

DEFAULT_LEVEL_DAYS = {1: (18,), 2: (18,), 3: (18, 32), 4: (32,), 5: (32,)}


@dataclass
class SyntheticSpec:
    counts: dict[int, int] = field(default_factory=lambda: {k: 20 for k in range(1, 6)})
    image_size: int = 96
    cell_axes_frac: tuple = (0.18, 0.32)   # semi-axis range, fraction of size
    stripe_period: float = 10.0
    stripe_angle: float | None = None      # radians; None = random per cell
    puncta_radius: float = 2.0
    noise_sigma: float = 0.05
    expert_disagreement: float = 0.0
    seed: int = 0
    level_days: dict[int, tuple] = field(
        default_factory=lambda: dict(DEFAULT_LEVEL_DAYS))

    def __post_init__(self):
        self.counts = {int(k): int(v) for k, v in self.counts.items()}
        if any(lv not in (1, 2, 3, 4, 5) for lv in self.counts):
            raise ConfigError(f"levels must be 1..5, got {sorted(self.counts)}")
        if any(v < 0 for v in self.counts.values()):
            raise ConfigError("cell counts must be non-negative")
        if self.image_size < 48:
            raise ConfigError(f"image_size must be >= 48, got {self.image_size}")
        lo, hi = self.cell_axes_frac
        if not 0.0 < lo <= hi <= 0.45:
            raise ConfigError(
                f"cell_axes_frac must satisfy 0 < lo <= hi <= 0.45, "
                f"got {self.cell_axes_frac}"
            )
        if self.stripe_period < 3:
            raise ConfigError(f"stripe_period must be >= 3, got {self.stripe_period}")
        self.level_days = {int(k): tuple(v) for k, v in self.level_days.items()}

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise DataIOError(f"cannot read generation spec {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"bad JSON in generation spec {path}: {exc}") from exc
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown generation spec keys: {sorted(unknown)}")
        if "cell_axes_frac" in raw:
            raw["cell_axes_frac"] = tuple(raw["cell_axes_frac"])
        return cls(**raw)


def _ellipse_mask(size, cy, cx, a, b, rho):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(rho) + dy * math.sin(rho)
    v = -dx * math.sin(rho) + dy * math.cos(rho)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _stamp_disk(img, classmap, mask, cy, cx, radius, intensity, label):
    size = img.shape[0]
    r = int(math.ceil(radius))
    y0, y1 = max(0, int(cy) - r - 1), min(size, int(cy) + r + 2)
    x0, x1 = max(0, int(cx) - r - 1), min(size, int(cx) + r + 2)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    disk = ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2) \
        & mask[y0:y1, x0:x1]
    img[y0:y1, x0:x1][disk] = intensity
    classmap[y0:y1, x0:x1][disk] = label


def _stamp_segment(img, classmap, mask, cy, cx, angle, length, width,
                   intensity, label):
    yy, xx = np.mgrid[0:img.shape[0], 0:img.shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    along = dx * math.cos(angle) + dy * math.sin(angle)
    across = -dx * math.sin(angle) + dy * math.cos(angle)
    seg = (np.abs(along) <= length / 2) & (np.abs(across) <= width / 2) & mask
    img[seg] = intensity
    classmap[seg] = label


def _stamp_stripes(img, classmap, region, angle, period, intensity,
                   rng=None, band_skip=0.0):
    """Bright bands of spacing ``period`` whose normal points at ``angle``.

    ``band_skip`` drops whole bands at random (immature gaps), which keeps
    the covered-area fraction from identifying perfectly striped cells.
    """
    yy, xx = np.mgrid[0:img.shape[0], 0:img.shape[1]].astype(np.float64)
    u = xx * math.cos(angle) + yy * math.sin(angle)
    band_width = min(max(0.35 * period, 1.5), period - 1.0)
    bands = (np.mod(u, period) < band_width) & region
    if band_skip > 0.0 and rng is not None:
        k = np.floor(u / period).astype(np.int64)
        for band_index in np.unique(k[bands]):
            if rng.uniform() < band_skip:
                bands &= k != band_index
    img[bands] = intensity
    classmap[bands] = LABEL_ZDISCS


def _render_cell(level: int, spec: SyntheticSpec, rng: np.random.Generator):
    size = spec.image_size
    lo, hi = spec.cell_axes_frac
    a = rng.uniform(lo, hi) * size
    b = rng.uniform(lo, min(hi, a / size + 1e-9)) * size
    b = min(b, a)
    rho = rng.uniform(0.0, math.pi)
    margin = a + 2.0
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    mask = _ellipse_mask(size, cy, cx, a, b, rho)
    area = int(mask.sum())

    img = np.full((size, size), 0.05)
    classmap = np.full((size, size), LABEL_BACKGROUND, dtype=np.int64)
    img[mask] = 0.25
    classmap[mask] = LABEL_DIFFUSE

    mask_ys, mask_xs = np.nonzero(mask)

    def random_point_in_mask():
        k = rng.integers(len(mask_ys))
        return float(mask_ys[k]), float(mask_xs[k])

    def stamp_puncta(count, organized_prob, radius_scale=1.0):
        # each punctum is labeled organized vs disorganized stochastically;
        # the mixture keeps class fractions from pinning the level exactly
        for _ in range(count):
            py, px = random_point_in_mask()
            radius = spec.puncta_radius * radius_scale * rng.uniform(0.7, 1.3)
            label = LABEL_ORG_PUNCTA if rng.uniform() < organized_prob \
                else LABEL_DISORG_PUNCTA
            _stamp_disk(img, classmap, mask, py, px, radius,
                        rng.uniform(0.8, 0.95), label)

    def stamp_grid_puncta(organized_prob, radius_scale=0.8):
        # quasi-regular placement: dense dots on a jittered grid
        spacing = max(3.5, 3.6 * spec.puncta_radius * radius_scale)
        for gy in np.arange(0, size, spacing):
            for gx in np.arange(0, size, spacing):
                py = gy + rng.uniform(-1.5, 1.5)
                px = gx + rng.uniform(-1.5, 1.5)
                iy, ix = int(py), int(px)
                if 0 <= iy < size and 0 <= ix < size and mask[iy, ix]:
                    radius = spec.puncta_radius * radius_scale \
                        * rng.uniform(0.8, 1.2)
                    label = LABEL_ORG_PUNCTA \
                        if rng.uniform() < organized_prob \
                        else LABEL_DISORG_PUNCTA
                    _stamp_disk(img, classmap, mask, py, px, radius,
                                rng.uniform(0.8, 0.95), label)

    def stamp_fibers(count):
        for _ in range(count):
            py, px = random_point_in_mask()
            _stamp_segment(img, classmap, mask, py, px,
                           rng.uniform(0, math.pi), rng.uniform(8, 16), 1.8,
                           rng.uniform(0.7, 0.85), LABEL_FIBERS)

    # Per-level recipes. The class-area signatures are deliberately
    # non-monotone across levels (puncta coverage peaks at level 2, the
    # z-disc fraction plateaus across levels 4-5), so level ordering is
    # not a linear function of the area fractions; images and nonlinear
    # feature combinations still resolve it.
    period = spec.stripe_period
    if level == 1:
        stamp_puncta(max(3, int(area * 0.005)), organized_prob=0.1,
                     radius_scale=1.3)
        if rng.uniform() < 0.1:
            stamp_fibers(1)
    elif level == 2:
        stamp_grid_puncta(organized_prob=0.9)
        if rng.uniform() < 0.3:
            stamp_fibers(int(rng.integers(1, 3)))
    elif level == 3:
        stamp_puncta(max(5, int(area * 0.008)), organized_prob=0.5)
        stamp_fibers(max(4, int(area * 0.0025)))
        py, px = random_point_in_mask()
        patch = _ellipse_mask(size, py, px, rng.uniform(6, 11),
                              rng.uniform(5, 8), rng.uniform(0, math.pi))
        _stamp_stripes(img, classmap, patch & mask,
                       rng.uniform(0, math.pi), period, 0.85)
    elif level == 4:
        patch_size = max(int(1.6 * period), 12)
        for py0 in range(0, size, patch_size):
            for px0 in range(0, size, patch_size):
                if rng.uniform() < 0.25:
                    continue  # skipped patches leave disordered gaps
                patch = np.zeros_like(mask)
                patch[py0:py0 + patch_size, px0:px0 + patch_size] = True
                patch &= mask
                if patch.any():
                    _stamp_stripes(img, classmap, patch,
                                   rng.uniform(0, math.pi), period, 0.9)
        if rng.uniform() < 0.5:
            stamp_fibers(int(rng.integers(1, 3)))
        stamp_puncta(max(2, int(area * 0.003)), organized_prob=0.7)
    elif level == 5:
        angle = spec.stripe_angle if spec.stripe_angle is not None \
            else rng.uniform(0, math.pi)
        _stamp_stripes(img, classmap, mask, angle, period, 0.9,
                       rng=rng, band_skip=0.15)
        if rng.uniform() < 0.2:
            stamp_fibers(1)
        stamp_puncta(max(1, int(area * 0.002)), organized_prob=0.7)

    img += rng.normal(0.0, spec.noise_sigma, img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    info = {"level": level, "period": period,
            "center": [round(cy, 2), round(cx, 2)],
            "axes": [round(a, 2), round(b, 2)]}
    return img, mask, classmap, info


def generate_synthetic(spec: SyntheticSpec, out_dir) -> list[CellRecord]:
    """Render the dataset to ``out_dir`` and return its records.

    Layout: images/<id>.png (16-bit), masks/<id>.png, classmaps/<id>.png,
    manifest.csv, and generation.json holding per-cell ground truth.
    Generation is per-cell seeded, so a fixed spec seed reproduces the
    directory byte for byte.
    """
    out = Path(out_dir)
    try:
        for sub in ("images", "masks", "classmaps"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create output directory {out}: {exc}") from exc

    records: list[CellRecord] = []
    ground_truth = {}
    for level in sorted(spec.counts):
        days = spec.level_days.get(level, (18,))
        for k in range(spec.counts[level]):
            rng = np.random.default_rng(
                np.random.SeedSequence(spec.seed, spawn_key=(level, k)))
            img, mask, classmap, info = _render_cell(level, spec, rng)
            cell_id = f"c{level}_{k:04d}"
            day = days[k % len(days)]
            expert1 = level
            expert2 = level
            if spec.expert_disagreement > 0 \
                    and rng.uniform() < spec.expert_disagreement:
                expert2 = int(np.clip(level + rng.choice((-1, 1)), 1, 5))
            save_gray_png(img, out / "images" / f"{cell_id}.png", bit_depth=16)
            save_gray_png(mask.astype(np.float64),
                          out / "masks" / f"{cell_id}.png", bit_depth=8)
            save_label_png(classmap, out / "classmaps" / f"{cell_id}.png")
            info.update({"day": day, "expert1": expert1, "expert2": expert2})
            ground_truth[cell_id] = info
            records.append(CellRecord(
                cell_id=cell_id,
                image_path=out / "images" / f"{cell_id}.png",
                mask_path=out / "masks" / f"{cell_id}.png",
                classmap_path=out / "classmaps" / f"{cell_id}.png",
                day=day, expert1=expert1, expert2=expert2,
            ))
    write_manifest(records, out / "manifest.csv")
    try:
        with open(out / "generation.json", "w", encoding="utf-8") as fh:
            json.dump(ground_truth, fh, indent=1, sort_keys=True)
    except OSError as exc:
        raise DataIOError(f"cannot write generation record: {exc}") from exc
    return records
