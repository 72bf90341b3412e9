"""Classical single-cell features.

Set 1: morphology (area, aspect ratio). Set 2: texture-alignment metrics
read off gray-level co-occurrence correlation profiles. Set 3: per-class
area fractions of an externally supplied organization class map. Sets
1+2 form protocol ``p1`` (5 values); adding Set 3 gives ``p2`` (11).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, DimensionError
from .imageops import CellMask, GrayImage

P1_COLUMNS = ("cell_area_px", "aspect_ratio", "max_cv", "peak_height",
              "peak_distance_px")
CLASS_NAMES = ("background", "diffuse_other", "fibers", "disorganized_puncta",
               "organized_puncta", "organized_zdiscs")
P2_COLUMNS = P1_COLUMNS + tuple(f"frac_{name}" for name in CLASS_NAMES)

DEFAULT_GLCM_LEVELS = 8
DEFAULT_D_MAX = 30
DIRECTIONS_DEG = (0, 45, 90, 135)

CV_MEAN_FLOOR = 1e-8
SCALER_STD_FLOOR = 1e-8


def protocol_columns(protocol: str) -> tuple[str, ...]:
    if protocol == "p1":
        return P1_COLUMNS
    if protocol == "p2":
        return P2_COLUMNS
    raise DimensionError(f"unknown protocol {protocol!r}, expected p1|p2")


@dataclass
class FeatureVector:
    protocol: str
    values: np.ndarray
    scaled: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = len(protocol_columns(self.protocol))
        if self.values.shape != (expected,):
            raise DimensionError(
                f"protocol {self.protocol} expects {expected} values, "
                f"got shape {self.values.shape}"
            )
        if not self.scaled:
            self._check_raw_ranges()

    def _check_raw_ranges(self):
        area, aspect, _, _, peak_d = self.values[:5]
        if area <= 0:
            raise DegenerateInputError(f"cell_area_px must be positive, got {area}")
        if aspect < 1.0:
            raise DegenerateInputError(f"aspect_ratio must be >= 1, got {aspect}")
        if peak_d < 1.0:
            raise DegenerateInputError(
                f"peak_distance_px must be >= 1, got {peak_d}"
            )
        if self.protocol == "p2":
            fracs = self.values[5:]
            if np.any(fracs < -1e-9) or np.any(fracs > 1 + 1e-9):
                raise DegenerateInputError("class fractions must lie in [0,1]")
            if abs(fracs.sum() - 1.0) > 1e-6:
                raise DegenerateInputError(
                    f"class fractions sum to {fracs.sum()}, expected 1"
                )


# ---------------------------------------------------------------------------
# Set 1: morphology


def cell_area(mask: CellMask) -> int:
    """Foreground pixel count."""
    return mask.area


def aspect_ratio(mask: CellMask) -> float:
    """Major/minor axis ratio of the moment-matched ellipse.

    Computed as sqrt(lmax/lmin) of the eigenvalues of the 2x2 covariance
    of foreground pixel coordinates, so it is translation-invariant and
    rotation-invariant up to rasterization.
    """
    coords = np.argwhere(mask.membership).astype(np.float64)
    if coords.shape[0] < 3:
        raise DegenerateInputError("aspect_ratio needs at least 3 pixels")
    cov = np.cov(coords.T)
    eigvals = np.linalg.eigvalsh(cov)
    lmin, lmax = float(eigvals[0]), float(eigvals[1])
    if lmin <= 1e-12:
        raise DegenerateInputError("mask pixels are collinear; aspect undefined")
    return math.sqrt(lmax / lmin)


# ---------------------------------------------------------------------------
# Set 2: co-occurrence texture


def quantize_masked(img: GrayImage, mask: CellMask, levels: int) -> np.ndarray:
    """Quantize masked intensities into equal-width bins over their range.

    Returns an (H, W) int array; pixels outside the mask are -1.
    """
    if levels < 2:
        raise DimensionError(f"need at least 2 gray levels, got {levels}")
    if img.pixels.shape != mask.membership.shape:
        raise DimensionError(
            f"image {img.pixels.shape} and mask {mask.membership.shape} differ"
        )
    inside = img.pixels[mask.membership]
    lo, hi = float(inside.min()), float(inside.max())
    if hi - lo <= 0.0:
        raise DegenerateInputError(
            "constant masked region; co-occurrence statistics undefined"
        )
    q = np.floor((img.pixels - lo) / (hi - lo) * levels).astype(np.int64)
    q = np.clip(q, 0, levels - 1)
    q[~mask.membership] = -1
    return q


def glcm_from_quantized(q: np.ndarray, levels: int, dx: int, dy: int) -> np.ndarray:
    """Symmetrized, normalized co-occurrence matrix at displacement (dx, dy).

    dx shifts columns (x), dy shifts rows (y); only ordered pixel pairs
    with both endpoints inside the mask are counted.
    """
    if dx == 0 and dy == 0:
        raise DimensionError("displacement (0,0) is not a valid pairing")
    h, w = q.shape
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    a = q[src_r, src_c]
    b = q[dst_r, dst_c]
    valid = (a >= 0) & (b >= 0)
    if not valid.any():
        raise DegenerateInputError(
            f"no in-mask pixel pair at displacement ({dx},{dy})"
        )
    pairs = a[valid] * levels + b[valid]
    counts = np.bincount(pairs, minlength=levels * levels).reshape(levels, levels)
    counts = counts + counts.T
    return counts.astype(np.float64) / counts.sum()


def glcm(img: GrayImage, mask: CellMask, levels: int, dx: int, dy: int) -> np.ndarray:
    return glcm_from_quantized(quantize_masked(img, mask, levels), levels, dx, dy)


def glcm_correlation(matrix: np.ndarray) -> float:
    """Correlation of the two marginals of a normalized co-occurrence matrix."""
    levels = matrix.shape[0]
    idx = np.arange(levels, dtype=np.float64)
    px = matrix.sum(axis=1)
    py = matrix.sum(axis=0)
    mu_x = float(idx @ px)
    mu_y = float(idx @ py)
    var_x = float(((idx - mu_x) ** 2) @ px)
    var_y = float(((idx - mu_y) ** 2) @ py)
    if var_x <= 0.0 or var_y <= 0.0:
        raise DegenerateInputError(
            "zero marginal variance; co-occurrence correlation undefined"
        )
    cov = float((idx[:, None] * idx[None, :] * matrix).sum()) - mu_x * mu_y
    return cov / math.sqrt(var_x * var_y)


@dataclass
class CorrelationProfile:
    """Co-occurrence correlation vs. pixel distance, per direction."""

    distances: np.ndarray              # (n,) int, ascending
    by_direction: np.ndarray           # (n, 4) values in [-1, 1]
    direction_mean: np.ndarray = field(init=False)

    def __post_init__(self):
        self.direction_mean = self.by_direction.mean(axis=1)


def _direction_offsets(d: int) -> list[tuple[int, int]]:
    offsets = []
    for deg in DIRECTIONS_DEG:
        theta = math.radians(deg)
        offsets.append((round(d * math.cos(theta)), round(d * math.sin(theta))))
    return offsets


def correlation_profile(img: GrayImage, mask: CellMask,
                        d_max: int = DEFAULT_D_MAX,
                        levels: int = DEFAULT_GLCM_LEVELS) -> CorrelationProfile:
    """Correlation curves over distances 1..d_max in 4 directions.

    A distance is dropped when any of its four directional matrices is
    undefined (no valid pair or zero marginal variance); fewer than 4
    surviving distances is an error.
    """
    if d_max < 4:
        raise DimensionError(f"d_max must be >= 4, got {d_max}")
    q = quantize_masked(img, mask, levels)
    dists, rows = [], []
    for d in range(1, d_max + 1):
        vals = []
        try:
            for dx, dy in _direction_offsets(d):
                vals.append(glcm_correlation(glcm_from_quantized(q, levels, dx, dy)))
        except DegenerateInputError:
            continue
        dists.append(d)
        rows.append(vals)
    if len(dists) < 4:
        raise DegenerateInputError(
            f"only {len(dists)} distances have defined correlations; "
            "texture too sparse"
        )
    return CorrelationProfile(np.asarray(dists), np.asarray(rows))


def alignment_metrics(profile: CorrelationProfile) -> dict[str, float]:
    """Anisotropy and periodicity summary of a correlation profile.

    max_cv: largest across-direction coefficient of variation (std over
    |mean| floored at 1e-8) over all distances. The periodicity pair
    scans the direction-mean curve for its first interior local minimum
    and then the first interior local maximum after it: peak_distance is
    that maximum's distance and peak_height the rebound above the
    minimum. A curve with no such rebound reports height 0 at the last
    profiled distance. Ties resolve toward the smaller distance.
    """
    curve = profile.direction_mean
    dists = profile.distances
    n = curve.shape[0]
    stds = profile.by_direction.std(axis=1)
    means = np.abs(curve) + CV_MEAN_FLOOR
    max_cv = float((stds / means).max())

    d_last = float(dists[-1])
    min_idx = None
    for i in range(1, n - 1):
        if curve[i] < curve[i - 1] and curve[i] <= curve[i + 1]:
            min_idx = i
            break
    peak_height, peak_distance = 0.0, d_last
    if min_idx is not None:
        for j in range(min_idx + 1, n - 1):
            if curve[j] > curve[j - 1] and curve[j] >= curve[j + 1]:
                peak_distance = float(dists[j])
                peak_height = float(curve[j] - curve[min_idx])
                break
    return {"max_cv": max_cv, "peak_height": peak_height,
            "peak_distance_px": peak_distance}


# ---------------------------------------------------------------------------
# Set 3: organization class fractions


def class_fractions(classmap: np.ndarray, mask: CellMask) -> np.ndarray:
    """Per-class pixel share inside the mask, ordered as CLASS_NAMES."""
    if classmap.shape != mask.membership.shape:
        raise DimensionError(
            f"classmap {classmap.shape} and mask {mask.membership.shape} differ"
        )
    labels = classmap[mask.membership]
    if labels.min() < 0 or labels.max() >= len(CLASS_NAMES):
        bad = int(labels.min()) if labels.min() < 0 else int(labels.max())
        raise DimensionError(
            f"class label {bad} outside the {len(CLASS_NAMES)}-class set"
        )
    counts = np.bincount(labels, minlength=len(CLASS_NAMES)).astype(np.float64)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# assembly and scaling


def extract_features(img: GrayImage, mask: CellMask, protocol: str,
                     classmap: np.ndarray | None = None,
                     d_max: int = DEFAULT_D_MAX,
                     levels: int = DEFAULT_GLCM_LEVELS) -> FeatureVector:
    """Compute a protocol feature vector from image + mask (+ classmap)."""
    metrics = alignment_metrics(correlation_profile(img, mask, d_max, levels))
    values = [float(cell_area(mask)), aspect_ratio(mask), metrics["max_cv"],
              metrics["peak_height"], metrics["peak_distance_px"]]
    if protocol == "p2":
        if classmap is None:
            raise DimensionError("protocol p2 requires a class map")
        values.extend(class_fractions(classmap, mask))
    elif protocol != "p1":
        raise DimensionError(f"unknown protocol {protocol!r}")
    return FeatureVector(protocol, np.asarray(values))


@dataclass
class ScalerParams:
    """Column-wise standardization parameters fitted on the training split."""

    protocol: str
    mean: np.ndarray
    std: np.ndarray
    fitted_on: str = "train"

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise DegenerateInputError("scaler stds must be strictly positive")


def fit_scaler(vectors: list[FeatureVector], fitted_on: str = "train") -> ScalerParams:
    if not vectors:
        raise DegenerateInputError("cannot fit a scaler on zero vectors")
    protocol = vectors[0].protocol
    if any(v.protocol != protocol for v in vectors):
        raise DimensionError("mixed protocols in scaler fit")
    matrix = np.stack([v.values for v in vectors])
    mean = matrix.mean(axis=0)
    std = np.maximum(matrix.std(axis=0), SCALER_STD_FLOOR)
    return ScalerParams(protocol, mean, std, fitted_on)


def apply_scaler(vector: FeatureVector, params: ScalerParams) -> FeatureVector:
    if vector.protocol != params.protocol:
        raise DimensionError(
            f"vector protocol {vector.protocol} mismatches scaler "
            f"protocol {params.protocol}"
        )
    if vector.scaled:
        raise DimensionError("vector is already scaled")
    return FeatureVector(vector.protocol,
                         (vector.values - params.mean) / params.std,
                         scaled=True)


def invert_scaler(vector: FeatureVector, params: ScalerParams) -> FeatureVector:
    if not vector.scaled:
        raise DimensionError("vector is not scaled")
    if vector.protocol != params.protocol:
        raise DimensionError("protocol mismatch on inverse scaling")
    return FeatureVector(vector.protocol,
                         vector.values * params.std + params.mean,
                         scaled=False)


def scale_matrix(matrix: np.ndarray, params: ScalerParams) -> np.ndarray:
    return (matrix - params.mean) / params.std
