"""Segmentation losses: pixel-wise BCE, star-shape topological loss, hybrid.

The topological term encodes a star-shape prior: for a region with center c,
every pixel i of the region must see c along a straight line l_ic that stays
inside the region. Formally, with y the binary truth, y_hat the prediction,
and i ranging over the truth foreground O,

    L_T = sum_i sum_{j in l_ic} B_ij * |y_i - y_hat_i| * |y_hat_i - y_hat_j|

where B_ij = 1 iff y_i == y_j, and l_ic is the Bresenham segment from i to
the region center c, excluding i itself and including c. Predictions that
carve holes or ragged edges inside the band create large |y_hat_i - y_hat_j|
jumps along the rays exactly where |y_i - y_hat_i| is already paying a
penalty, so the term pushes interior probabilities to agree with each other.

The hybrid loss is alpha * L_BCE + beta * L_T with defaults alpha=1, beta=2.
Both losses use sum (not mean) reduction per raster; batch averaging is the
trainer's job. All gradients are analytic, with sign(0) taken as 0 at the
absolute-value kinks, and are validated against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, GeometryMismatchError
from .grid import BinaryMask, ProbabilityMap

# Probabilities are clamped to [CLAMP_EPS, 1 - CLAMP_EPS] before the logs.
CLAMP_EPS = 1e-7

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 2.0


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights of the hybrid loss; the default ratio alpha/beta is 1/2."""

    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("weights must be nonnegative and not both zero")


@dataclass(frozen=True, eq=False)
class LossResult:
    """Scalar loss value plus dL/dy_hat with the prediction's shape."""

    value: float
    gradient: np.ndarray


def bresenham_line(r0: int, c0: int, r1: int, c1: int) -> list:
    """All grid pixels on the Bresenham segment from (r0, c0) to (r1, c1).

    Includes both endpoints. Pixel k (k = 0..n, n = max(|dr|, |dc|)) advances
    round-half-up along each axis:

        r_k = r0 + sign(dr) * floor((2 k |dr| + n) / (2 n))

    which is the classic integer midpoint rule; ties round away from the
    start point. The vectorized ray builder uses the identical formula.
    """
    dr, dc = r1 - r0, c1 - c0
    adr, adc = abs(dr), abs(dc)
    n = max(adr, adc)
    if n == 0:
        return [(r0, c0)]
    sr = 1 if dr >= 0 else -1
    sc = 1 if dc >= 0 else -1
    return [
        (
            r0 + sr * ((2 * k * adr + n) // (2 * n)),
            c0 + sc * ((2 * k * adc + n) // (2 * n)),
        )
        for k in range(n + 1)
    ]


@dataclass(frozen=True, eq=False)
class StarGeometry:
    """Rasterized star-shape geometry of one truth mask.

    owner_rows/owner_cols list the foreground pixels i that contribute rays
    (every ray_stride-th foreground pixel in row-major order). The flattened
    ray arrays store, for each ray pixel j, the index of its owner i and the
    pixel's coordinates; rays exclude i and include the center c. same_label
    caches B_ij = (y_i == y_j) per ray pixel.
    """

    shape: tuple
    center: tuple | None
    owner_rows: np.ndarray
    owner_cols: np.ndarray
    owner: np.ndarray
    ray_rows: np.ndarray
    ray_cols: np.ndarray
    same_label: np.ndarray
    ray_stride: int = 1

    @property
    def empty(self) -> bool:
        return self.center is None

    @property
    def owner_flat(self) -> np.ndarray:
        return self.owner_rows.astype(np.int64) * self.shape[1] + self.owner_cols

    @property
    def ray_flat(self) -> np.ndarray:
        return self.ray_rows.astype(np.int64) * self.shape[1] + self.ray_cols

    def ray_of(self, k: int) -> np.ndarray:
        """Coordinates (m, 2) of owner k's ray pixels, ordered from i to c."""
        sel = self.owner == k
        return np.stack([self.ray_rows[sel], self.ray_cols[sel]], axis=1)

    def star_shaped(self) -> bool:
        """True iff every ray stays inside the truth foreground."""
        return bool(self.same_label.all())

    def mirrored(self) -> "StarGeometry":
        """The geometry of the horizontally mirrored mask (col -> W-1-col)."""
        w = self.shape[1]
        center = None if self.center is None else (self.center[0], w - 1 - self.center[1])
        return StarGeometry(
            shape=self.shape,
            center=center,
            owner_rows=self.owner_rows,
            owner_cols=w - 1 - self.owner_cols,
            owner=self.owner,
            ray_rows=self.ray_rows,
            ray_cols=w - 1 - self.ray_cols,
            same_label=self.same_label,
            ray_stride=self.ray_stride,
        )


def _empty_geometry(shape, ray_stride: int) -> StarGeometry:
    z32 = np.zeros(0, dtype=np.int32)
    return StarGeometry(
        shape=shape,
        center=None,
        owner_rows=z32,
        owner_cols=z32,
        owner=z32,
        ray_rows=z32,
        ray_cols=z32,
        same_label=np.zeros(0, dtype=bool),
        ray_stride=ray_stride,
    )


def region_center(truth: BinaryMask) -> tuple | None:
    """Centroid of the foreground, rounded half-up, snapped to the foreground.

    If the rounded centroid lands outside the region, the nearest foreground
    pixel (Euclidean, ties broken in row-major order) is used instead. Empty
    masks have no center.
    """
    fg_rows, fg_cols = np.nonzero(truth.values)
    if fg_rows.size == 0:
        return None
    cr = int(np.floor(fg_rows.mean() + 0.5))
    cc = int(np.floor(fg_cols.mean() + 0.5))
    if truth.values[cr, cc] == 0:
        d2 = (fg_rows.astype(np.int64) - cr) ** 2 + (fg_cols.astype(np.int64) - cc) ** 2
        k = int(np.argmin(d2))  # first minimum = row-major tie-break
        cr, cc = int(fg_rows[k]), int(fg_cols[k])
    return (cr, cc)


def build_star_geometry(truth: BinaryMask, ray_stride: int = 1) -> StarGeometry:
    """Rasterize the ray l_ic for every (stride-th) foreground pixel i.

    Rays use the same integer midpoint Bresenham rule as bresenham_line, are
    built fully vectorized, exclude i, and include c. A mask with empty
    foreground yields an empty geometry (flagged via center=None).
    """
    if ray_stride < 1:
        raise ValueError(f"ray_stride must be >= 1, got {ray_stride}")
    shape = truth.values.shape
    center = region_center(truth)
    if center is None:
        return _empty_geometry(shape, ray_stride)
    cr, cc = center

    fg_rows, fg_cols = np.nonzero(truth.values)
    # int32 throughout: 2*k*|d| + n stays below 2^31 for rasters up to ~30k px
    orows = fg_rows[::ray_stride].astype(np.int32)
    ocols = fg_cols[::ray_stride].astype(np.int32)

    dr = cr - orows
    dc = cc - ocols
    adr = np.abs(dr)
    adc = np.abs(dc)
    n = np.maximum(adr, adc)  # ray length (0 when i == c)
    sr = np.where(dr >= 0, 1, -1).astype(np.int32)
    sc = np.where(dc >= 0, 1, -1).astype(np.int32)

    total = int(n.sum())
    owner = np.repeat(np.arange(orows.size, dtype=np.int32), n)
    # k = 1..n_i within each owner's segment
    starts = np.zeros(orows.size, dtype=np.int64)
    np.cumsum(n[:-1], out=starts[1:])
    k = (np.arange(total, dtype=np.int32) - np.repeat(starts, n).astype(np.int32)) + 1

    rep_n = np.repeat(n, n)
    ray_rows = orows[owner] + sr[owner] * ((2 * k * adr[owner] + rep_n) // (2 * rep_n))
    ray_cols = ocols[owner] + sc[owner] * ((2 * k * adc[owner] + rep_n) // (2 * rep_n))
    del k, rep_n

    flat = truth.values.ravel()
    owner_label = flat[orows[owner].astype(np.int64) * shape[1] + ocols[owner]]
    same_label = flat[ray_rows.astype(np.int64) * shape[1] + ray_cols] == owner_label

    return StarGeometry(
        shape=shape,
        center=center,
        owner_rows=orows,
        owner_cols=ocols,
        owner=owner,
        ray_rows=ray_rows,
        ray_cols=ray_cols,
        same_label=same_label,
        ray_stride=ray_stride,
    )


def _check_shapes(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} != truth shape {truth.shape}")


def _check_geometry(truth: BinaryMask, geom: StarGeometry) -> None:
    """Reject geometries that cannot have come from this truth mask.

    Order-insensitive so that coordinate-transformed geometries (mirrored())
    stay usable: every owner must be truth foreground, the owner count must
    match the stride subsampling of the foreground, and the center must be a
    foreground pixel.
    """
    if geom.shape != truth.values.shape:
        raise GeometryMismatchError(
            f"geometry shape {geom.shape} != truth shape {truth.values.shape}"
        )
    n_fg = int(np.count_nonzero(truth.values))
    expected_owners = (n_fg + geom.ray_stride - 1) // geom.ray_stride
    if geom.owner_rows.size != expected_owners:
        raise GeometryMismatchError(
            f"geometry has {geom.owner_rows.size} ray owners, expected {expected_owners}"
        )
    if geom.center is None:
        if n_fg > 0:
            raise GeometryMismatchError("empty geometry paired with non-empty truth")
        return
    if truth.values[geom.center] == 0:
        raise GeometryMismatchError("geometry center is not foreground in this truth")
    if not np.all(truth.values[geom.owner_rows, geom.owner_cols] == 1):
        raise GeometryMismatchError("geometry was not built from this truth mask")


def bce_arrays(pred: np.ndarray, truth: np.ndarray) -> tuple:
    """Sum-reduced binary cross entropy and its gradient on bare arrays.

    The prediction is clamped to [CLAMP_EPS, 1 - CLAMP_EPS] before the logs;
    the gradient is the derivative of the clamped expression, hence exactly
    zero wherever the clamp is active.
    """
    _check_shapes(pred, truth)
    t = truth.astype(np.float64)
    p = np.clip(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    value = float(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum())
    inner = (p - t) / (p * (1.0 - p))
    active = (pred >= CLAMP_EPS) & (pred <= 1.0 - CLAMP_EPS)
    grad = np.where(active, inner, 0.0)
    return value, grad


def topological_arrays(pred: np.ndarray, truth: np.ndarray, geom: StarGeometry) -> tuple:
    """Star-shape loss value and gradient on bare arrays.

    Subgradient convention: the derivative of |x| at x = 0 is 0 for both
    absolute-value factors.
    """
    _check_shapes(pred, truth)
    if geom.empty or geom.owner.size == 0:
        return 0.0, np.zeros_like(pred, dtype=np.float64)

    h, w = geom.shape
    p = pred.ravel().astype(np.float64)
    t = truth.ravel().astype(np.float64)
    i_flat = geom.owner_flat
    j_flat = geom.ray_flat
    b = geom.same_label.astype(np.float64)

    a_i = np.abs(t[i_flat] - p[i_flat])  # |y_i - y_hat_i| per owner
    s_i = np.sign(t[i_flat] - p[i_flat])
    p_i_rep = p[i_flat][geom.owner]
    d = p_i_rep - p[j_flat]
    ad = np.abs(d)
    sd = np.sign(d)

    n_owner = i_flat.size
    value = float((a_i[geom.owner] * b * ad).sum())

    grad = np.zeros(h * w)
    # d/dp_i of |y_i - p_i|: -s_i, times the owner's summed b * |p_i - p_j|
    ray_ad = np.bincount(geom.owner, weights=b * ad, minlength=n_owner)
    # d/dp_i of |p_i - p_j|: +sd, weighted by a_i
    ray_sd = np.bincount(geom.owner, weights=b * sd, minlength=n_owner)
    grad[i_flat] += -s_i * ray_ad + a_i * ray_sd  # owner pixels are unique
    # d/dp_j of |p_i - p_j|: -sd, weighted by a_i (j pixels repeat across rays)
    grad -= np.bincount(j_flat, weights=a_i[geom.owner] * b * sd, minlength=h * w)
    return value, grad.reshape(h, w)


def hybrid_arrays(
    pred: np.ndarray, truth: np.ndarray, weights: LossWeights, geom: StarGeometry | None
) -> tuple:
    """alpha * BCE + beta * topological on bare arrays; beta=0 skips the rays."""
    bval, bgrad = bce_arrays(pred, truth)
    if weights.beta == 0:
        return weights.alpha * bval, weights.alpha * bgrad
    if geom is None:
        raise GeometryMismatchError("hybrid loss with beta > 0 needs a star geometry")
    tval, tgrad = topological_arrays(pred, truth, geom)
    value = weights.alpha * bval + weights.beta * tval
    grad = weights.alpha * bgrad + weights.beta * tgrad
    return value, grad


def bce_loss(pred: ProbabilityMap, truth: BinaryMask) -> LossResult:
    """Pixel-wise binary cross entropy, sum reduction."""
    value, grad = bce_arrays(pred.values, truth.values)
    return LossResult(value=value, gradient=grad)


def topological_loss(pred: ProbabilityMap, truth: BinaryMask, geom: StarGeometry) -> LossResult:
    """Star-shape prior loss over the truth foreground and its rays."""
    _check_geometry(truth, geom)
    value, grad = topological_arrays(pred.values, truth.values, geom)
    return LossResult(value=value, gradient=grad)


def hybrid_loss(
    pred: ProbabilityMap,
    truth: BinaryMask,
    weights: LossWeights = LossWeights(),
    geom: StarGeometry | None = None,
) -> LossResult:
    """Weighted sum of BCE and topological losses with analytic gradient.

    With beta > 0 a geometry built from `truth` is required; with beta == 0
    the result equals alpha * bce_loss exactly and `geom` may be omitted.
    """
    if weights.beta != 0 and geom is not None:
        _check_geometry(truth, geom)
    value, grad = hybrid_arrays(pred.values, truth.values, weights, geom)
    return LossResult(value=value, gradient=grad)


def kink_free_pixels(
    pred: np.ndarray, truth: np.ndarray, step: float, geom: StarGeometry | None = None
) -> np.ndarray:
    """Boolean map of pixels whose loss surface is numerically probeable.

    Excludes pixels within 2*step of an absolute-value kink (|y_i - y_hat_i|
    or any |y_hat_i - y_hat_j| along a ray touching the pixel). Near 0 and 1
    the -log curvature explodes and central differences at distance d carry
    relative truncation error ~ step^2 / (3 d^2), so pixels closer than
    60*step to the BCE clamp boundaries are excluded as well.
    """
    margin = 2.0 * step
    boundary = 60.0 * step
    ok = np.abs(truth.astype(np.float64) - pred) >= margin
    ok &= (pred >= CLAMP_EPS + boundary) & (pred <= 1.0 - CLAMP_EPS - boundary)
    if geom is not None and not geom.empty and geom.owner.size > 0:
        p = pred.ravel()
        i_flat = geom.owner_flat
        j_flat = geom.ray_flat
        near = np.abs(p[i_flat][geom.owner] - p[j_flat]) < margin
        flat_ok = ok.ravel()
        flat_ok[i_flat[geom.owner[near]]] = False
        flat_ok[j_flat[near]] = False
        ok = flat_ok.reshape(pred.shape)
    return ok


def finite_difference_check(
    loss_fn,
    pred: ProbabilityMap,
    truth: BinaryMask,
    step: float = 1e-5,
    trials: int = 64,
    seed: int = 0,
    geom: StarGeometry | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn maps (ProbabilityMap, BinaryMask) -> LossResult. `trials` pixels
    are drawn at random; pixels near a kink or near the clamp boundaries
    (see kink_free_pixels) are skipped so only numerically probeable regions
    are compared. Returns 0.0 when nothing was testable.
    """
    if not (0.0 < step <= 1e-2):
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    base = pred.values
    analytic = loss_fn(pred, truth).gradient
    smooth = kink_free_pixels(base, truth.values.astype(np.float64), step, geom=geom)

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 3))))
    order = rng.permutation(base.size)[: int(trials)]
    worst = 0.0
    for flat_idx in order:
        r, c = divmod(int(flat_idx), base.shape[1])
        if not smooth[r, c]:
            continue
        bumped = base.copy()
        bumped[r, c] = base[r, c] + step
        f_plus = loss_fn(ProbabilityMap(bumped), truth).value
        bumped[r, c] = base[r, c] - step
        f_minus = loss_fn(ProbabilityMap(bumped), truth).value
        fd = (f_plus - f_minus) / (2.0 * step)
        a = analytic[r, c]
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst
