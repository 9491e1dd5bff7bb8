"""Topology-regularized segmentation of corneal layer boundaries.

Trains and runs a compact encoder-decoder network with a hybrid loss
(pixel-wise cross entropy plus a star-shape topological prior) to track the
epithelium and Descemet's membrane boundaries in M-mode OCT-style images,
with a synthetic phantom generator, a metric suite, and a real-time-style
streaming harness.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    DivergenceError,
    EmptyDatasetError,
    GeometryMismatchError,
    MaskValueError,
    StarsegError,
)
from .grid import (
    BinaryMask,
    GrayImage,
    NormalizationStats,
    NormalizedRaster,
    PatchSet,
    ProbabilityMap,
    binarize,
    compute_dataset_stats,
    crop_to_patches,
    denormalize,
    load_image_png,
    load_mask_png,
    normalize,
    reconstruct_from_patches,
    save_image_png,
    save_mask_png,
)
from .losses import (
    LossResult,
    LossWeights,
    StarGeometry,
    bce_loss,
    bresenham_line,
    build_star_geometry,
    finite_difference_check,
    hybrid_loss,
    region_center,
    topological_loss,
)
from .metrics import (
    BoundaryTrace,
    TrackingErrorReport,
    dice,
    evaluate_dataset,
    extract_boundaries,
    iou,
    psnr,
    ssim,
    tracking_error,
)
from .net import (
    Checkpoint,
    NetworkConfig,
    TrainingConfig,
    UNet,
    count_params,
    infer_image,
    load_checkpoint,
    train,
)
from .phantom import (
    DegradationConfig,
    PhantomConfig,
    degrade,
    generate_dataset,
    generate_phantom,
    load_manifest,
    zero_degradation,
)
from .stream import StreamStats, measure_inference_frequency, run_stream

__version__ = "0.1.0"
