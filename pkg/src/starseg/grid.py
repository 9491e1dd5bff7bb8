"""Core raster types, strip patching, normalization and binarization.

All rasters are dense 2-D numpy arrays in row-major order with row 0 at the
top of the image (shallowest depth). Boundary extraction and the phantom
generator both rely on that orientation, so it is normative for the whole
package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, DimensionError, EmptyDatasetError, MaskValueError

# Population std is floored here so constant images stay normalizable.
STD_FLOOR = 1e-6

DEFAULT_THRESHOLD = 0.5


def _as_2d_float(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"expected a non-empty 2-D raster, got shape {arr.shape}")
    return arr


class _Grid:
    """Mixin giving raster wrappers height/width accessors."""

    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class GrayImage(_Grid):
    """Intensity raster with finite values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        arr = _as_2d_float(self.values)
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True, eq=False)
class ProbabilityMap(_Grid):
    """Per-pixel probabilities in [0, 1], typically a network output."""

    values: np.ndarray

    def __post_init__(self):
        arr = _as_2d_float(self.values)
        if not np.all(np.isfinite(arr)):
            raise ValueError("probability map contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True, eq=False)
class NormalizedRaster(_Grid):
    """Zero-mean/unit-std network-input raster; values are unbounded reals.

    Distinct from GrayImage on purpose: a normalized raster must never be
    confused with a [0, 1] intensity image.
    """

    values: np.ndarray

    def __post_init__(self):
        arr = _as_2d_float(self.values)
        if not np.all(np.isfinite(arr)):
            raise ValueError("normalized raster contains non-finite values")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True, eq=False)
class BinaryMask(_Grid):
    """Label raster with values in {0, 1}, stored as uint8."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"expected a non-empty 2-D mask, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise MaskValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "values", arr.astype(np.uint8))

    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.values))


@dataclass(frozen=True)
class NormalizationStats:
    """Pooled pixel mean/std of a training split (population convention)."""

    mean: float
    std: float

    def __post_init__(self):
        if not (np.isfinite(self.mean) and np.isfinite(self.std)):
            raise ValueError("normalization stats must be finite")
        if self.std <= 0.0:
            raise ValueError("std must be positive")


@dataclass(frozen=True, eq=False)
class PatchSet:
    """Ordered, contiguous, non-overlapping vertical strips of one raster.

    Strips run left to right and keep the full source height, so each patch
    preserves whole depth columns (A-scans). Concatenating the patches along
    axis 1 reproduces the source raster bit-exactly.
    """

    patches: tuple
    source_height: int
    source_width: int
    strip_width: int

    def __post_init__(self):
        if len(self.patches) == 0:
            raise DimensionError("patch set must contain at least one patch")
        if len(self.patches) * self.strip_width != self.source_width:
            raise DimensionError(
                f"{len(self.patches)} patches of width {self.strip_width} "
                f"do not cover source width {self.source_width}"
            )
        for k, patch in enumerate(self.patches):
            if patch.height != self.source_height or patch.width != self.strip_width:
                raise DimensionError(
                    f"patch {k} has shape {patch.height}x{patch.width}, "
                    f"expected {self.source_height}x{self.strip_width}"
                )
        object.__setattr__(self, "patches", tuple(self.patches))

    def __len__(self) -> int:
        return len(self.patches)


def crop_to_patches(image, strip_width: int) -> PatchSet:
    """Split a raster into full-height vertical strips of width strip_width.

    Works for any raster wrapper (GrayImage, ProbabilityMap, NormalizedRaster,
    BinaryMask); the patches carry the same type as the input.
    """
    if strip_width < 1:
        raise DimensionError(f"strip_width must be >= 1, got {strip_width}")
    if image.width % strip_width != 0:
        raise DimensionError(
            f"strip_width {strip_width} does not divide image width {image.width}"
        )
    cls = type(image)
    n = image.width // strip_width
    patches = tuple(
        cls(image.values[:, k * strip_width : (k + 1) * strip_width]) for k in range(n)
    )
    return PatchSet(
        patches=patches,
        source_height=image.height,
        source_width=image.width,
        strip_width=strip_width,
    )


def reconstruct_from_patches(patch_set: PatchSet):
    """Exact inverse of crop_to_patches; returns the patches' raster type."""
    cls = type(patch_set.patches[0])
    values = np.concatenate([p.values for p in patch_set.patches], axis=1)
    return cls(values)


def compute_dataset_stats(images) -> NormalizationStats:
    """Pooled mean/std over all pixels of all images (population std).

    The std is floored at STD_FLOOR so constant datasets stay usable.
    """
    images = list(images)
    if not images:
        raise EmptyDatasetError("cannot compute statistics of an empty dataset")
    total = 0
    acc = 0.0
    for img in images:
        acc += float(img.values.sum())
        total += img.values.size
    mean = acc / total
    sq = 0.0
    for img in images:
        sq += float(((img.values - mean) ** 2).sum())
    std = max(float(np.sqrt(sq / total)), STD_FLOOR)
    return NormalizationStats(mean=mean, std=std)


def normalize(image: GrayImage, stats: NormalizationStats) -> NormalizedRaster:
    """Map intensities to (value - mean) / std."""
    return NormalizedRaster((image.values - stats.mean) / stats.std)


def denormalize(raster: NormalizedRaster, stats: NormalizationStats) -> np.ndarray:
    """Inverse of normalize; returns a bare array (may stray outside [0, 1])."""
    return raster.values * stats.std + stats.mean


def binarize(probs: ProbabilityMap, threshold: float = DEFAULT_THRESHOLD) -> BinaryMask:
    """Threshold a probability map; pixels with prob >= threshold become 1."""
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"threshold must lie strictly in (0, 1), got {threshold}")
    return BinaryMask((probs.values >= threshold).astype(np.uint8))


# --- PNG interchange -------------------------------------------------------
#
# Images on disk are 8-bit grayscale PNGs; pixel value v maps to intensity
# v / 255. Masks use {0, 255} for {0, 1}; anything else is a load error.


def save_image_png(image: GrayImage, path) -> None:
    arr = np.round(image.values * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_image_png(path) -> GrayImage:
    with Image.open(path) as im:
        if im.mode != "L":
            raise MaskValueError(f"{path}: expected 8-bit grayscale PNG, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    return GrayImage(arr.astype(np.float64) / 255.0)


def save_mask_png(mask: BinaryMask, path) -> None:
    arr = (mask.values * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_mask_png(path) -> BinaryMask:
    with Image.open(path) as im:
        if im.mode != "L":
            raise MaskValueError(f"{path}: expected 8-bit grayscale PNG, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        values = sorted(int(v) for v in np.unique(arr[bad]))
        raise MaskValueError(f"{path}: mask contains illegal pixel values {values}")
    return BinaryMask((arr // 255).astype(np.uint8))
