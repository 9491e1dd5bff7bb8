"""Synthetic M-mode corneal phantom generator with a controllable degradation model.

A phantom is a layered depth-vs-time image: a bright epithelium band at the
top boundary E_i of the corneal band, a dim stroma, a bright deep-membrane
band at the lower boundary D_i, and dark background elsewhere. The label is
the full corneal band [E_i, D_i] per column, so every column's foreground is
one contiguous run. After wobbling the boundaries the generator grows the
band over any discrete center ray that escapes it, so every label is exactly
star-shaped around its centroid-derived center under the loss geometry's ray
convention.

The degradation model reproduces the acquisition artifacts that break plain
cross-entropy training: multiplicative speckle, per-column signal dropout
below a random depth, elliptical hollow regions inside bright structures,
slow horizontal intensity drift, and per-column vertical jitter. Labels are
never degraded; recovering the true band through the artifacts is the task.

All randomness flows through numpy's Philox counter-based generator, seeded
via SeedSequence with an explicit per-stage domain tag, so byte-identical
regeneration is guaranteed for a given (config, seed) on any platform.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grid import BinaryMask, GrayImage, save_image_png, save_mask_png
from .losses import region_center

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# Domain tags separating the phantom and degradation random streams.
_DOMAIN_PHANTOM = 1
_DOMAIN_DEGRADE = 2

# Fixed degradation constants (the per-field magnitudes live in the config).
_DROPOUT_ATTENUATION = 0.12
_HOLLOW_TARGET = 0.02
_HOLLOW_STRENGTH = 0.9
_HOLLOW_CANDIDATE_MIN = 0.25


def _rng(seed: int, domain: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), domain))))


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry and intensity levels of the clean layered phantom."""

    height: int = 512
    width: int = 512
    epithelium_depth_range: tuple = (60, 120)
    cornea_thickness_range: tuple = (140, 240)
    boundary_wobble_amplitude: float = 5.0
    boundary_wobble_wavelength: float = 256.0
    background_intensity: float = 0.05
    epithelium_intensity: float = 0.85
    stroma_intensity: float = 0.35
    dm_intensity: float = 0.75
    band_thickness: int = 12

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ConfigError("phantom must be at least 16x16")
        d0, d1 = self.epithelium_depth_range
        t0, t1 = self.cornea_thickness_range
        amp = self.boundary_wobble_amplitude
        if not (0 < d0 <= d1 and 0 < t0 <= t1):
            raise ConfigError("depth/thickness ranges must be positive with min <= max")
        if amp < 0 or self.boundary_wobble_wavelength <= 0:
            raise ConfigError("wobble amplitude/wavelength must be nonnegative/positive")
        if amp >= t0 / 4.0:
            raise ConfigError(
                f"wobble amplitude {amp} must stay below min thickness / 4 = {t0 / 4.0}"
            )
        if self.band_thickness < 1 or 2 * self.band_thickness + 2 > t0:
            raise ConfigError("band_thickness must fit twice inside the thinnest cornea")
        # Both boundaries must stay strictly inside the frame for any draw.
        if d0 - amp < 1:
            raise ConfigError("epithelium can reach the top edge; increase min depth")
        if d1 + t1 + amp > self.height - 2:
            raise ConfigError("cornea can reach the bottom edge; reduce depth/thickness")
        for name in ("background", "epithelium", "stroma", "dm"):
            level = getattr(self, f"{name}_intensity")
            if not (0.0 <= level <= 1.0):
                raise ConfigError(f"{name}_intensity must lie in [0, 1], got {level}")


@dataclass(frozen=True)
class DegradationConfig:
    """Artifact magnitudes; all zero means the identity transform."""

    speckle_sigma: float = 0.25
    dropout_column_prob: float = 0.35
    dropout_depth_range: tuple = (80, 360)
    hollow_region_count_range: tuple = (2, 5)
    hollow_region_axes_range: tuple = (8, 40)
    intensity_drift_amplitude: float = 0.15
    column_jitter_amplitude: int = 2

    def validate(self) -> None:
        if self.speckle_sigma < 0:
            raise ConfigError("speckle_sigma must be >= 0")
        if not (0.0 <= self.dropout_column_prob <= 1.0):
            raise ConfigError("dropout_column_prob must lie in [0, 1]")
        if self.dropout_depth_range[0] > self.dropout_depth_range[1]:
            raise ConfigError("dropout_depth_range must satisfy min <= max")
        c0, c1 = self.hollow_region_count_range
        a0, a1 = self.hollow_region_axes_range
        if c0 < 0 or c0 > c1 or a0 < 0 or a0 > a1:
            raise ConfigError("hollow region ranges must be nonnegative with min <= max")
        if self.intensity_drift_amplitude < 0:
            raise ConfigError("intensity_drift_amplitude must be >= 0")
        if self.column_jitter_amplitude < 0:
            raise ConfigError("column_jitter_amplitude must be >= 0")

    def is_identity(self) -> bool:
        return (
            self.speckle_sigma == 0
            and self.dropout_column_prob == 0
            and self.hollow_region_count_range[1] == 0
            and self.intensity_drift_amplitude == 0
            and self.column_jitter_amplitude == 0
        )


def zero_degradation() -> DegradationConfig:
    """Config under which degrade() is the bit-exact identity."""
    return DegradationConfig(
        speckle_sigma=0.0,
        dropout_column_prob=0.0,
        dropout_depth_range=(0, 0),
        hollow_region_count_range=(0, 0),
        hollow_region_axes_range=(0, 0),
        intensity_drift_amplitude=0.0,
        column_jitter_amplitude=0,
    )


@dataclass(frozen=True, eq=False)
class SamplePair:
    """Clean image, band label, and the per-column ground-truth boundaries."""

    image: GrayImage
    label: BinaryMask
    epithelium_rows: np.ndarray
    dm_rows: np.ndarray

    def __post_init__(self):
        h, w = self.image.height, self.image.width
        epi = np.asarray(self.epithelium_rows, dtype=np.int64)
        dm = np.asarray(self.dm_rows, dtype=np.int64)
        if epi.shape != (w,) or dm.shape != (w,):
            raise ConfigError("boundary traces must have one entry per column")
        if not np.all((epi > 0) & (dm < h - 1) & (epi < dm)):
            raise ConfigError("boundaries must satisfy 0 < E_i < D_i < height-1")
        rows = np.arange(h)[:, None]
        band = ((rows >= epi[None, :]) & (rows <= dm[None, :])).astype(np.uint8)
        if not np.array_equal(band, self.label.values):
            raise ConfigError("label must equal the column band [E_i, D_i]")
        object.__setattr__(self, "epithelium_rows", epi)
        object.__setattr__(self, "dm_rows", dm)


def _wobble(rng: np.random.Generator, width: int, amplitude: float, wavelength: float) -> np.ndarray:
    """Sum of 2-3 random-phase sinusoids with total amplitude <= amplitude."""
    n = int(rng.integers(2, 4))
    weights = rng.uniform(0.5, 1.0, size=n)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n)
    x = np.arange(width, dtype=np.float64)
    out = np.zeros(width)
    if amplitude == 0:
        return out
    amps = amplitude * weights / weights.sum()
    for k in range(n):
        out += amps[k] * np.sin(2.0 * np.pi * (k + 1) * x / wavelength + phases[k])
    return out


def _edge_sweep(epi: np.ndarray, dm: np.ndarray, center: tuple) -> None:
    """Run the one-step ray condition along both edges to its fixed point.

    Repairing a single escaped ray pixel shifts the staircase one column
    toward the center, so pointwise repair alone needs O(width) passes.
    This in-place sweep walks each edge from the outside toward the center
    column, capping how fast an edge may deepen against the first step of
    the edge pixel's own ray; it is an accelerator only, the exact ray walk
    in generate_phantom still decides convergence.
    """
    cr, cc = center
    w = epi.size
    for side in (range(0, cc + 1), range(w - 1, cc - 1, -1)):
        e_prev = d_prev = None
        for c in side:
            dist = abs(cc - c) + 1
            if e_prev is not None and cr >= e_prev:
                epi[c] = min(epi[c], e_prev + (2 * (cr - e_prev) + dist) // (2 * dist))
            if d_prev is not None and cr <= d_prev:
                dm[c] = max(dm[c], d_prev - (2 * (d_prev - cr) + dist) // (2 * dist))
            e_prev, d_prev = epi[c], dm[c]


def _ray_escapes(band: np.ndarray, epi: np.ndarray, dm: np.ndarray, center: tuple) -> tuple:
    """Pixels where a discrete center ray leaves the band [epi, dm].

    Walks the segment from every band pixel to the center with the same
    integer midpoint rule as the loss geometry's rays and returns the
    (rows, cols) of every visited pixel outside the band; both arrays are
    empty exactly when the band is star-shaped around the center.
    """
    r0_all, c0_all = np.nonzero(band)
    # int32 throughout: 2*k*|d| + n stays below 2^31 for rasters up to ~30k px
    r0 = r0_all.astype(np.int32)
    c0 = c0_all.astype(np.int32)
    dr = center[0] - r0
    dc = center[1] - c0
    adr = np.abs(dr)
    adc = np.abs(dc)
    n = np.maximum(adr, adc)
    sr = np.sign(dr)
    sc = np.sign(dc)

    order = np.argsort(-n, kind="stable")
    r0, c0, adr, adc, n, sr, sc = (a[order] for a in (r0, c0, adr, adc, n, sr, sc))
    bad_rows, bad_cols = [], []
    for k in range(1, int(n[0]) + 1 if n.size else 1):
        m = np.searchsorted(-n, -k, side="right")
        rk = r0[:m] + sr[:m] * ((2 * k * adr[:m] + n[:m]) // (2 * n[:m]))
        ck = c0[:m] + sc[:m] * ((2 * k * adc[:m] + n[:m]) // (2 * n[:m]))
        out = (rk < epi[ck]) | (rk > dm[ck])
        if out.any():
            bad_rows.append(rk[out])
            bad_cols.append(ck[out])
    if not bad_rows:
        empty = np.zeros(0, dtype=np.int32)
        return empty, empty
    return np.concatenate(bad_rows), np.concatenate(bad_cols)


def generate_phantom(config: PhantomConfig, seed: int) -> SamplePair:
    """Deterministically render one clean phantom and its band label."""
    config.validate()
    rng = _rng(seed, _DOMAIN_PHANTOM)
    h, w = config.height, config.width

    depth = rng.uniform(*config.epithelium_depth_range)
    thickness = rng.uniform(*config.cornea_thickness_range)
    amp = config.boundary_wobble_amplitude
    wavelength = config.boundary_wobble_wavelength
    epi = np.rint(depth + _wobble(rng, w, amp, wavelength)).astype(np.int64)
    dm = np.rint(depth + thickness + _wobble(rng, w, amp, wavelength)).astype(np.int64)

    rows = np.arange(h)[:, None]
    # A rounded edge can step against a grazing ray, so grow the band over
    # every escaped ray pixel (which also moves the center) until none remain.
    for _ in range(32):
        band = (rows >= epi[None, :]) & (rows <= dm[None, :])
        center = region_center(BinaryMask(band.astype(np.uint8)))
        esc_rows, esc_cols = _ray_escapes(band, epi, dm, center)
        if esc_rows.size == 0:
            break
        np.minimum.at(epi, esc_cols, esc_rows)
        np.maximum.at(dm, esc_cols, esc_rows)
        _edge_sweep(epi, dm, center)
    else:
        raise ConfigError("boundary wobble too severe for a star-shaped band")

    e = epi[None, :]
    d = dm[None, :]
    bt = config.band_thickness
    img = np.full((h, w), config.background_intensity)
    img[band] = config.stroma_intensity
    img[band & (rows < e + bt)] = config.epithelium_intensity
    img[band & (rows > d - bt)] = config.dm_intensity

    return SamplePair(
        image=GrayImage(img),
        label=BinaryMask(band.astype(np.uint8)),
        epithelium_rows=epi,
        dm_rows=dm,
    )


def degrade(image: GrayImage, config: DegradationConfig, seed: int) -> GrayImage:
    """Apply the artifact stack in fixed order; all-zero config is the identity.

    Order: speckle, column dropout, hollow regions, intensity drift, vertical
    jitter. Stages with zero magnitude are skipped entirely so they neither
    perturb the image nor consume random draws.
    """
    config.validate()
    rng = _rng(seed, _DOMAIN_DEGRADE)
    img = image.values.copy()
    h, w = img.shape

    if config.speckle_sigma > 0:
        img = np.clip(img * (1.0 + config.speckle_sigma * rng.standard_normal((h, w))), 0.0, 1.0)

    if config.dropout_column_prob > 0:
        selected = rng.random(w) < config.dropout_column_prob
        lo, hi = config.dropout_depth_range
        lo = max(0, min(int(lo), h - 1))
        hi = max(lo, min(int(hi), h - 1))
        starts = rng.integers(lo, hi + 1, size=w)
        rows = np.arange(h)[:, None]
        att = selected[None, :] & (rows >= starts[None, :])
        img[att] *= _DROPOUT_ATTENUATION

    if config.hollow_region_count_range[1] > 0:
        c0, c1 = config.hollow_region_count_range
        count = int(rng.integers(c0, c1 + 1))
        a0, a1 = config.hollow_region_axes_range
        rr = np.arange(h)[:, None]
        cc = np.arange(w)[None, :]
        for _ in range(count):
            candidates = np.flatnonzero(img >= _HOLLOW_CANDIDATE_MIN)
            if candidates.size == 0:
                break
            pick = candidates[int(rng.integers(0, candidates.size))]
            cy, cx = divmod(int(pick), w)
            ay = max(1, int(rng.integers(a0, a1 + 1)))
            ax = max(1, int(rng.integers(a0, a1 + 1)))
            inside = ((rr - cy) / ay) ** 2 + ((cc - cx) / ax) ** 2 <= 1.0
            img[inside] = (1.0 - _HOLLOW_STRENGTH) * img[inside] + _HOLLOW_STRENGTH * _HOLLOW_TARGET

    if config.intensity_drift_amplitude > 0:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        gain = 1.0 + config.intensity_drift_amplitude * np.sin(
            2.0 * np.pi * np.arange(w) / w + phase
        )
        img = np.clip(img * gain[None, :], 0.0, 1.0)

    if config.column_jitter_amplitude > 0:
        j = int(config.column_jitter_amplitude)
        offsets = rng.integers(-j, j + 1, size=w)
        rows = (np.arange(h)[:, None] - offsets[None, :]) % h
        img = img[rows, np.arange(w)[None, :]]

    return GrayImage(img)


def split_assignment(count: int, test_fraction: float, val_fraction: float) -> list:
    """Deterministic train/val/test labels by sample index.

    The test block is carved off the end; the validation block is the trailing
    val_fraction of the remaining training portion.
    """
    n_test = int(round(count * test_fraction))
    n_pool = count - n_test
    n_val = int(round(n_pool * val_fraction))
    n_train = n_pool - n_val
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def generate_dataset(
    count: int,
    phantom: PhantomConfig,
    degradation: DegradationConfig,
    seed: int,
    out_dir,
    test_fraction: float = 0.2,
    val_fraction: float = 0.2,
) -> dict:
    """Write `count` image/label PNG pairs plus a manifest; fully seeded.

    Per-sample seeds are seed + index, so generation order (or parallel
    scheduling) cannot change the output bytes.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if not (0.0 <= test_fraction < 1.0) or not (0.0 <= val_fraction < 1.0):
        raise ConfigError("fractions must lie in [0, 1)")
    phantom.validate()
    degradation.validate()

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)

    splits = split_assignment(count, test_fraction, val_fraction)
    samples = []
    for i in range(count):
        sample_seed = seed + i
        pair = generate_phantom(phantom, sample_seed)
        degraded = degrade(pair.image, degradation, sample_seed)
        image_path = f"images/{i:05d}.png"
        label_path = f"labels/{i:05d}.png"
        save_image_png(degraded, out / image_path)
        save_mask_png(pair.label, out / label_path)
        samples.append(
            {
                "image_path": image_path,
                "label_path": label_path,
                "sample_seed": sample_seed,
                "split": splits[i],
            }
        )

    manifest = {
        "version": MANIFEST_VERSION,
        "phantom_config": asdict(phantom),
        "degradation_config": asdict(degradation),
        "seed": seed,
        "samples": samples,
    }
    write_manifest(manifest, out / MANIFEST_NAME)
    return manifest


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> dict:
    manifest = json.loads(Path(path).read_text())
    for key in ("version", "phantom_config", "degradation_config", "seed", "samples"):
        if key not in manifest:
            raise ConfigError(f"{path}: manifest is missing required key '{key}'")
    return manifest


def manifest_samples(manifest: dict, split: str) -> list:
    return [s for s in manifest["samples"] if s["split"] == split]
