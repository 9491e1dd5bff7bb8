"""Segmentation quality metrics and boundary-tracking error reports.

Overlap metrics (IoU, Dice), image-fidelity metrics (PSNR, SSIM), per-column
boundary extraction, and the depth-tracking error that converts pixel
distances to micrometers at a fixed pixel pitch. `evaluate_dataset` runs a
trained checkpoint over one manifest split and emits a deterministic JSON
report.

Conventions: all quality metrics compare the thresholded prediction mask to
the label mask. PSNR of identical rasters is an infinity marker, replaced by
PSNR_CAP_DB only when averaging. Micrometer errors are always the pixel error
times PIXEL_PITCH_UM in a single multiplication, never re-derived.
"""

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionError, EmptyDatasetError
from .grid import BinaryMask, load_image_png, load_mask_png
from .phantom import load_manifest, manifest_samples

PIXEL_PITCH_UM = 2.61

# Averaging replacement for infinite per-image PSNR values.
PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_DYNAMIC_RANGE = 1.0

INVALID_ROW = -1

REPORT_NAME = "report.json"


def _check_same_shape(a, b) -> None:
    if a.values.shape != b.values.shape:
        raise DimensionError(
            f"shape mismatch: {a.values.shape} vs {b.values.shape}"
        )


def iou(pred: BinaryMask, truth: BinaryMask) -> float:
    """Intersection over union; two empty masks agree perfectly (1.0)."""
    _check_same_shape(pred, truth)
    inter = int(np.count_nonzero(pred.values & truth.values))
    union = int(np.count_nonzero(pred.values | truth.values))
    if union == 0:
        return 1.0
    return inter / union


def dice(pred: BinaryMask, truth: BinaryMask) -> float:
    """Dice coefficient 2|A∩B| / (|A|+|B|); two empty masks give 1.0."""
    _check_same_shape(pred, truth)
    inter = int(np.count_nonzero(pred.values & truth.values))
    total = int(pred.foreground_count() + truth.foreground_count())
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def psnr(pred, truth) -> float:
    """Peak signal-to-noise ratio in dB with dynamic range 1.

    Accepts any raster wrapper pair of matching shape. A zero MSE returns
    math.inf; aggregation replaces that marker with PSNR_CAP_DB.
    """
    _check_same_shape(pred, truth)
    diff = pred.values.astype(np.float64) - truth.values.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    kernel = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def _window_mean(values: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Filter with a centered separable kernel, then drop the border so only
    # windows fully inside the image remain (padding never leaks in).
    half = kernel.size // 2
    out = correlate1d(values, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(pred, truth) -> float:
    """Mean local SSIM over 11x11 Gaussian windows (sigma 1.5, range 1)."""
    _check_same_shape(pred, truth)
    h, w = pred.values.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DimensionError(
            f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} "
            "SSIM window"
        )
    a = pred.values.astype(np.float64)
    b = truth.values.astype(np.float64)
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)

    mu_a = _window_mean(a, kernel)
    mu_b = _window_mean(b, kernel)
    var_a = _window_mean(a * a, kernel) - mu_a * mu_a
    var_b = _window_mean(b * b, kernel) - mu_b * mu_b
    cov = _window_mean(a * b, kernel) - mu_a * mu_b

    c1 = (SSIM_K1 * SSIM_DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_DYNAMIC_RANGE) ** 2
    ssim_map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(np.mean(ssim_map))


@dataclass(frozen=True)
class BoundaryTrace:
    """Per-column row indices of the upper and lower band edges.

    Columns without foreground carry INVALID_ROW in both arrays; a column is
    either valid in both boundaries or in neither.
    """

    epithelium_rows: np.ndarray
    dm_rows: np.ndarray

    def __post_init__(self):
        upper = np.asarray(self.epithelium_rows, dtype=np.int64)
        lower = np.asarray(self.dm_rows, dtype=np.int64)
        if upper.ndim != 1 or upper.shape != lower.shape:
            raise DimensionError("boundary rows must be 1-D arrays of equal length")
        valid = upper != INVALID_ROW
        if not np.array_equal(valid, lower != INVALID_ROW):
            raise DimensionError("boundary validity must agree between layers")
        if np.any(upper[valid] < 0) or np.any(lower[valid] < upper[valid]):
            raise DimensionError("valid columns require 0 <= upper <= lower")
        object.__setattr__(self, "epithelium_rows", upper)
        object.__setattr__(self, "dm_rows", lower)

    @property
    def width(self) -> int:
        return int(self.epithelium_rows.size)

    @property
    def valid_columns(self) -> int:
        return int(np.count_nonzero(self.epithelium_rows != INVALID_ROW))

    def valid(self) -> np.ndarray:
        return self.epithelium_rows != INVALID_ROW


def extract_boundaries(mask: BinaryMask) -> BoundaryTrace:
    """First and last foreground row of every column.

    The first foreground row is the epithelium boundary, the last one the
    Descemet's membrane boundary; empty columns get the invalid marker.
    """
    fg = mask.values != 0
    has = fg.any(axis=0)
    first = np.argmax(fg, axis=0).astype(np.int64)
    last = (mask.height - 1 - np.argmax(fg[::-1, :], axis=0)).astype(np.int64)
    first[~has] = INVALID_ROW
    last[~has] = INVALID_ROW
    return BoundaryTrace(epithelium_rows=first, dm_rows=last)


@dataclass(frozen=True)
class TrackingErrorReport:
    """Mean absolute boundary error in pixels and micrometers.

    Errors average only columns valid in both traces; columns the prediction
    misses but the truth covers are counted separately so hole rate never
    contaminates the distance statistics. With no mutually valid column the
    pixel errors are NaN (serialized as null).
    """

    epithelium_error_px: float
    dm_error_px: float
    epithelium_error_um: float
    dm_error_um: float
    invalid_column_fraction: float
    pixel_pitch_um: float = PIXEL_PITCH_UM


def tracking_error(pred_trace: BoundaryTrace, truth_trace: BoundaryTrace) -> TrackingErrorReport:
    """Average absolute per-column boundary distance, in px and um."""
    if pred_trace.width != truth_trace.width:
        raise DimensionError(
            f"trace width mismatch: {pred_trace.width} vs {truth_trace.width}"
        )
    pred_valid = pred_trace.valid()
    truth_valid = truth_trace.valid()
    both = pred_valid & truth_valid
    if np.any(both):
        epi_px = float(
            np.mean(
                np.abs(pred_trace.epithelium_rows[both] - truth_trace.epithelium_rows[both])
            )
        )
        dm_px = float(
            np.mean(np.abs(pred_trace.dm_rows[both] - truth_trace.dm_rows[both]))
        )
    else:
        epi_px = math.nan
        dm_px = math.nan
    missed = int(np.count_nonzero(~pred_valid & truth_valid))
    return TrackingErrorReport(
        epithelium_error_px=epi_px,
        dm_error_px=dm_px,
        epithelium_error_um=epi_px * PIXEL_PITCH_UM,
        dm_error_um=dm_px * PIXEL_PITCH_UM,
        invalid_column_fraction=missed / pred_trace.width,
    )


# --- dataset-level evaluation ----------------------------------------------


def _file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _finite_mean(values) -> float | None:
    finite = [v for v in values if isinstance(v, float) and math.isfinite(v)]
    if not finite:
        return None
    return float(np.mean(finite))


def _psnr_mean(values) -> float | None:
    capped = [PSNR_CAP_DB if math.isinf(v) else v for v in values]
    if not capped:
        return None
    return float(np.mean(capped))


def evaluate_dataset(checkpoint_path, manifest_path, split: str) -> dict:
    """Run inference over one manifest split and compute every metric.

    Returns the full report as a plain dict: per_image entries in manifest
    order, aggregate means (PSNR infinities capped, NaN errors skipped), and
    provenance hashes of the checkpoint and manifest bytes.
    """
    from . import net

    checkpoint = net.load_checkpoint(checkpoint_path)
    manifest = load_manifest(manifest_path)
    samples = manifest_samples(manifest, split)
    if not samples:
        raise EmptyDatasetError(f"manifest has no samples in split '{split}'")
    base = Path(manifest_path).parent

    per_image = []
    for sample in samples:
        image = load_image_png(base / sample["image_path"])
        label = load_mask_png(base / sample["label_path"])
        _, mask = net.infer_image(checkpoint, image)
        track = tracking_error(extract_boundaries(mask), extract_boundaries(label))
        per_image.append(
            {
                "image_path": sample["image_path"],
                "ssim": ssim(mask, label),
                "psnr_db": psnr(mask, label),
                "iou": iou(mask, label),
                "dice": dice(mask, label),
                "epi_err_px": track.epithelium_error_px,
                "epi_err_um": track.epithelium_error_um,
                "dm_err_px": track.dm_error_px,
                "dm_err_um": track.dm_error_um,
                "invalid_column_fraction": track.invalid_column_fraction,
            }
        )

    epi_px = _finite_mean([r["epi_err_px"] for r in per_image])
    dm_px = _finite_mean([r["dm_err_px"] for r in per_image])
    aggregates = {
        "ssim": _finite_mean([r["ssim"] for r in per_image]),
        "psnr_db": _psnr_mean([r["psnr_db"] for r in per_image]),
        "iou": _finite_mean([r["iou"] for r in per_image]),
        "dice": _finite_mean([r["dice"] for r in per_image]),
        "epi_err_px": epi_px,
        "epi_err_um": None if epi_px is None else epi_px * PIXEL_PITCH_UM,
        "dm_err_px": dm_px,
        "dm_err_um": None if dm_px is None else dm_px * PIXEL_PITCH_UM,
        "invalid_column_fraction": _finite_mean(
            [r["invalid_column_fraction"] for r in per_image]
        ),
    }
    return {
        "per_image": per_image,
        "aggregates": aggregates,
        "provenance": {
            "checkpoint_hash": _file_sha256(checkpoint_path),
            "manifest_hash": _file_sha256(manifest_path),
        },
    }


def _json_safe(value):
    """Replace non-finite floats: inf becomes the string marker, NaN null."""
    if isinstance(value, float):
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def write_report(report: dict, path) -> None:
    """Serialize a report deterministically (sorted keys, strict JSON)."""
    safe = _json_safe(report)
    Path(path).write_text(
        json.dumps(safe, indent=2, sort_keys=True, allow_nan=False) + "\n"
    )
