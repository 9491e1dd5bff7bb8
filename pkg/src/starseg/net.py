"""Encoder-decoder segmentation network, training loop, and checkpointing.

The network is a compact U-Net: `levels` encoder stages of two 3x3
conv+BatchNorm+ReLU blocks with 2x max pooling, a bottleneck, transposed-conv
upsampling with skip concatenation, and a 1x1 conv + sigmoid head producing a
single-channel probability map. Channels start at `base_channels` and double
per level.

Training minimizes the hybrid loss (sum per patch, mean over the batch) with
Adam. The loss and its gradient are evaluated analytically in float64 on the
network's probability outputs; the gradient is then injected into the torch
graph via probs.backward(gradient=...), so the hand-written loss is the one
actually trained against. All randomness (weight init, shuffling) derives
from the config seed; repeated runs produce byte-identical checkpoints on one
platform at a fixed worker count.

Checkpoints are a versioned binary container: magic bytes, format version, a
JSON header (configs, normalization stats, training history), a
length-prefixed tensor name table, and raw little-endian float32 parameter
blocks.
"""

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    DivergenceError,
    EmptyDatasetError,
)
from .grid import (
    DEFAULT_THRESHOLD,
    BinaryMask,
    GrayImage,
    NormalizationStats,
    PatchSet,
    ProbabilityMap,
    binarize,
    compute_dataset_stats,
    crop_to_patches,
    load_image_png,
    load_mask_png,
    normalize,
    reconstruct_from_patches,
)
from .losses import LossWeights, build_star_geometry, hybrid_arrays
from .metrics import dice
from .phantom import load_manifest, manifest_samples

CHECKPOINT_MAGIC = b"SSEGCKPT"
CHECKPOINT_VERSION = 1

DEFAULT_STRIP_WIDTH = 64

# Seed-domain tag for the patch-shuffling stream (phantom uses 1 and 2,
# the finite-difference checker 3).
_DOMAIN_SHUFFLE = 4

# Tensor storage codes in the checkpoint name table.
_STORE_F32 = 0
_STORE_I64 = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Shape of the segmentation network; kernel size is fixed at 3."""

    levels: int = 4
    base_channels: int = 16
    in_channels: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.kernel_size != 3:
            raise ConfigError(f"kernel_size is fixed at 3, got {self.kernel_size}")

    def channel_plan(self) -> list:
        """Encoder channels per level plus the bottleneck width at the end."""
        return [self.base_channels * (1 << i) for i in range(self.levels + 1)]


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters of the training loop.

    The validation split normally comes from the manifest; if the manifest
    has no 'val' samples, the trailing validation_fraction of the train split
    is carved off deterministically instead.
    """

    loss_weights: LossWeights = LossWeights()
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_patches: int = 8
    seed: int = 0
    validation_fraction: float = 0.2
    early_stop_patience: int = 10
    ray_stride: int = 1
    strip_width: int = DEFAULT_STRIP_WIDTH

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("moment decay rates must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_patches < 1:
            raise ConfigError(f"batch_patches must be >= 1, got {self.batch_patches}")
        if not (0.0 <= self.validation_fraction < 1.0):
            raise ConfigError("validation_fraction must lie in [0, 1)")
        if self.early_stop_patience < 1:
            raise ConfigError(
                f"early_stop_patience must be >= 1, got {self.early_stop_patience}"
            )
        if self.ray_stride < 1:
            raise ConfigError(f"ray_stride must be >= 1, got {self.ray_stride}")
        if self.strip_width < 1:
            raise ConfigError(f"strip_width must be >= 1, got {self.strip_width}")


def _conv_block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Symmetric encoder-decoder with skip concatenation and sigmoid head."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        plan = config.channel_plan()
        self.enc = nn.ModuleList()
        in_ch = config.in_channels
        for ch in plan[:-1]:
            self.enc.append(_conv_block(in_ch, ch))
            in_ch = ch
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _conv_block(plan[-2], plan[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for ch in reversed(plan[:-1]):
            self.up.append(nn.ConvTranspose2d(2 * ch, ch, kernel_size=2, stride=2))
            self.dec.append(_conv_block(2 * ch, ch))
        self.head = nn.Conv2d(plan[0], 1, kernel_size=1)

    def _check_downsamplable(self, height: int, width: int) -> None:
        h, w = height, width
        for level in range(self.config.levels):
            if h % 2 != 0 or w % 2 != 0:
                raise DimensionError(
                    f"input {height}x{width} reaches {h}x{w} at level {level}, "
                    "which the 2x pooling there cannot halve; pad to a multiple "
                    f"of {1 << self.config.levels}"
                )
            h //= 2
            w //= 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"expected (batch, {self.config.in_channels}, H, W) input, "
                f"got {tuple(x.shape)}"
            )
        self._check_downsamplable(int(x.shape[2]), int(x.shape[3]))
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([skip, up(x)], dim=1))
        return torch.sigmoid(self.head(x))


def count_params(config: NetworkConfig) -> int:
    """Exact learnable-scalar count of UNet(config), from the layer algebra.

    Each 3x3 conv holds 9*c_in*c_out weights + c_out biases, each norm layer
    2*c (scale and shift; running statistics are buffers, not learnable), each
    2x2 transposed conv 4*c_in*c_out + c_out, the head c0 + 1.
    """
    plan = config.channel_plan()

    def block(c_in: int, c_out: int) -> int:
        conv1 = 9 * c_in * c_out + c_out
        conv2 = 9 * c_out * c_out + c_out
        return conv1 + conv2 + 2 * (2 * c_out)

    total = 0
    in_ch = config.in_channels
    for ch in plan[:-1]:
        total += block(in_ch, ch)
        in_ch = ch
    total += block(plan[-2], plan[-1])
    for ch in plan[:-1]:
        total += 4 * (2 * ch) * ch + ch  # transposed conv 2c -> c
        total += block(2 * ch, ch)
    total += plan[0] * 1 + 1
    return total


# --- checkpoint container ---------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to reconstruct and run a trained model.

    `state` maps tensor names to numpy arrays (float32 parameters and running
    statistics, int64 batch counters). save/load round-trips bit-exactly.
    """

    network_config: NetworkConfig
    training_config: dict
    normalization: NormalizationStats
    history: dict
    state: OrderedDict
    version: int = CHECKPOINT_VERSION
    _model: UNet | None = field(default=None, repr=False, compare=False)

    def build_model(self) -> UNet:
        """Instantiate the network with the stored weights (cached, eval mode).

        Construction forks the torch RNG so loading a checkpoint never
        perturbs the caller's random stream.
        """
        if self._model is None:
            with torch.random.fork_rng():
                torch.manual_seed(0)
                model = UNet(self.network_config)
            tensors = OrderedDict(
                (name, torch.from_numpy(np.ascontiguousarray(arr)))
                for name, arr in self.state.items()
            )
            model.load_state_dict(tensors, strict=True)
            model.eval()
            self._model = model
        return self._model

    def save(self, path) -> None:
        header = {
            "version": self.version,
            "network": asdict(self.network_config),
            "training": self.training_config,
            "normalization": {
                "mean": self.normalization.mean,
                "std": self.normalization.std,
            },
            "history": self.history,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        table = bytearray()
        data = bytearray()
        for name, arr in self.state.items():
            if arr.dtype == np.int64:
                code = _STORE_I64
                stored = arr.astype(np.float32)
                if not np.array_equal(stored.astype(np.int64), arr):
                    raise CheckpointError(
                        f"tensor '{name}' holds integers too large for exact "
                        "float32 storage"
                    )
            elif arr.dtype == np.float32:
                code = _STORE_F32
                stored = arr
            else:
                raise CheckpointError(
                    f"tensor '{name}' has unsupported dtype {arr.dtype}"
                )
            encoded = name.encode("utf-8")
            table += struct.pack("<H", len(encoded)) + encoded
            table += struct.pack("<BB", code, arr.ndim)
            table += struct.pack(f"<{arr.ndim}I", *arr.shape)
            data += stored.astype("<f4").tobytes()
        out = bytearray()
        out += CHECKPOINT_MAGIC
        out += struct.pack("<I", self.version)
        out += struct.pack("<Q", len(blob))
        out += blob
        out += struct.pack("<I", len(self.state))
        out += table
        out += data
        Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> Checkpoint:
    """Parse the binary checkpoint container written by Checkpoint.save."""
    raw = Path(path).read_bytes()
    try:
        return _parse_checkpoint(raw, path)
    except CheckpointError:
        raise
    except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(raw: bytes, path) -> Checkpoint:
    view = memoryview(raw)
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    offset = len(CHECKPOINT_MAGIC)

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, view, offset)
        offset += size
        return values

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    (blob_len,) = take("<Q")
    header = json.loads(bytes(view[offset : offset + blob_len]).decode("utf-8"))
    offset += blob_len

    (count,) = take("<I")
    entries = []
    for _ in range(count):
        (name_len,) = take("<H")
        name = bytes(view[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        code, ndim = take("<BB")
        shape = take(f"<{ndim}I") if ndim else ()
        entries.append((name, code, tuple(int(d) for d in shape)))

    state = OrderedDict()
    for name, code, shape in entries:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(view, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        if code == _STORE_I64:
            state[name] = arr.astype(np.int64)
        elif code == _STORE_F32:
            state[name] = arr.astype(np.float32)
        else:
            raise CheckpointError(f"{path}: unknown tensor storage code {code}")
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")

    return Checkpoint(
        network_config=NetworkConfig(**header["network"]),
        training_config=header["training"],
        normalization=NormalizationStats(**header["normalization"]),
        history=header["history"],
        state=state,
        version=version,
    )


def _state_to_numpy(model: nn.Module) -> OrderedDict:
    out = OrderedDict()
    for name, tensor in model.state_dict().items():
        out[name] = tensor.detach().cpu().numpy().copy()
    return out


# --- training ----------------------------------------------------------------


def _load_split_arrays(manifest: dict, base: Path, split_samples: list) -> list:
    pairs = []
    for sample in split_samples:
        image = load_image_png(base / sample["image_path"])
        label = load_mask_png(base / sample["label_path"])
        pairs.append((image, label))
    return pairs


def _patch_pool(pairs: list, stats: NormalizationStats, strip_width: int) -> tuple:
    """Flatten (image, label) pairs into parallel normalized-patch arrays."""
    xs = []
    ys = []
    for image, label in pairs:
        raster = normalize(image, stats)
        for xp, yp in zip(
            crop_to_patches(raster, strip_width).patches,
            crop_to_patches(label, strip_width).patches,
        ):
            xs.append(xp.values.astype(np.float32))
            ys.append(yp.values)
    return xs, ys


def _batch_loss_and_grad(
    probs: np.ndarray, labels: list, weights: LossWeights, ray_stride: int
) -> tuple:
    """Hybrid loss summed per patch, averaged over the batch, plus gradient."""
    batch = probs.shape[0]
    grads = np.empty_like(probs)
    total = 0.0
    for b in range(batch):
        geom = None
        if weights.beta != 0:
            geom = build_star_geometry(BinaryMask(labels[b]), ray_stride=ray_stride)
        value, grad = hybrid_arrays(probs[b], labels[b], weights, geom)
        total += value
        grads[b] = grad
    return total / batch, grads / batch


def _forward_probs(model: UNet, arrays: list) -> torch.Tensor:
    x = torch.from_numpy(np.stack(arrays)).unsqueeze(1)
    return model(x)


def _validation_pass(
    model: UNet, val_pairs: list, val_norm: list, cfg: TrainingConfig
) -> tuple:
    """Mean per-patch hybrid loss and mean per-image Dice on the val split."""
    model.eval()
    total = 0.0
    patches = 0
    dices = []
    with torch.no_grad():
        for (image, label), raster in zip(val_pairs, val_norm):
            xs = [
                p.values.astype(np.float32)
                for p in crop_to_patches(raster, cfg.strip_width).patches
            ]
            label_patches = crop_to_patches(label, cfg.strip_width)
            probs = _forward_probs(model, xs).squeeze(1).numpy().astype(np.float64)
            if not np.isfinite(probs).all():
                raise DivergenceError("non-finite network output during validation")
            for b, yp in enumerate(label_patches.patches):
                geom = None
                if cfg.loss_weights.beta != 0:
                    geom = build_star_geometry(yp, ray_stride=cfg.ray_stride)
                value, _ = hybrid_arrays(probs[b], yp.values, cfg.loss_weights, geom)
                total += value
                patches += 1
            recon = reconstruct_from_patches(
                PatchSet(
                    patches=tuple(ProbabilityMap(p) for p in probs),
                    source_height=label_patches.source_height,
                    source_width=label_patches.source_width,
                    strip_width=label_patches.strip_width,
                )
            )
            dices.append(dice(binarize(recon, DEFAULT_THRESHOLD), label))
    model.train()
    return total / patches, float(np.mean(dices))


def train(
    manifest_path,
    net_config: NetworkConfig = NetworkConfig(),
    train_config: TrainingConfig = TrainingConfig(),
    quiet: bool = True,
) -> Checkpoint:
    """Train on the manifest's train split, early-stopping on validation loss.

    Weights initialize deterministically from train_config.seed, patch order
    reshuffles every epoch from a seeded stream, and the best-validation
    weights are returned. Raises EmptyDatasetError when the train split is
    empty and DivergenceError when the loss leaves the finite range.
    """
    manifest = load_manifest(manifest_path)
    base = Path(manifest_path).parent
    train_samples = manifest_samples(manifest, "train")
    val_samples = manifest_samples(manifest, "val")
    if not train_samples:
        raise EmptyDatasetError(f"{manifest_path}: manifest has no train samples")
    if not val_samples and train_config.validation_fraction > 0:
        carve = int(round(len(train_samples) * train_config.validation_fraction))
        if carve >= len(train_samples):
            carve = len(train_samples) - 1
        if carve > 0:
            val_samples = train_samples[-carve:]
            train_samples = train_samples[:-carve]

    train_pairs = _load_split_arrays(manifest, base, train_samples)
    val_pairs = _load_split_arrays(manifest, base, val_samples)
    stats = compute_dataset_stats(image for image, _ in train_pairs)
    train_x, train_y = _patch_pool(train_pairs, stats, train_config.strip_width)
    val_norm = [normalize(image, stats) for image, _ in val_pairs]

    torch.manual_seed(train_config.seed)
    model = UNet(net_config)
    model.train()
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_config.learning_rate,
        betas=(train_config.beta1, train_config.beta2),
        eps=train_config.eps,
    )
    shuffle_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence((train_config.seed, _DOMAIN_SHUFFLE)))
    )

    history = {"train_loss": [], "val_loss": [], "val_dice": []}
    best_monitor = np.inf
    best_state = _state_to_numpy(model)
    best_epoch = 0
    since_best = 0

    for epoch in range(train_config.epochs):
        order = shuffle_rng.permutation(len(train_x))
        epoch_total = 0.0
        for start in range(0, len(order), train_config.batch_patches):
            idx = order[start : start + train_config.batch_patches]
            probs = _forward_probs(model, [train_x[i] for i in idx])
            probs_np = probs.detach().squeeze(1).numpy().astype(np.float64)
            if not np.isfinite(probs_np).all():
                raise DivergenceError(
                    f"non-finite network output at epoch {epoch}, "
                    f"patch offset {start}"
                )
            batch_loss, grads = _batch_loss_and_grad(
                probs_np,
                [train_y[i] for i in idx],
                train_config.loss_weights,
                train_config.ray_stride,
            )
            if not np.isfinite(batch_loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, "
                    f"patch offset {start}"
                )
            optimizer.zero_grad(set_to_none=True)
            probs.backward(torch.from_numpy(grads.astype(np.float32)).unsqueeze(1))
            optimizer.step()
            epoch_total += batch_loss * len(idx)
        train_loss = epoch_total / len(train_x)
        history["train_loss"].append(train_loss)

        if val_pairs:
            val_loss, val_dice = _validation_pass(
                model, val_pairs, val_norm, train_config
            )
            history["val_loss"].append(val_loss)
            history["val_dice"].append(val_dice)
            monitor = val_loss
        else:
            monitor = train_loss
        if not np.isfinite(monitor):
            raise DivergenceError(f"non-finite monitored loss at epoch {epoch}")
        if not quiet:
            line = f"epoch {epoch}: train {train_loss:.4f}"
            if val_pairs:
                line += f", val {history['val_loss'][-1]:.4f}"
                line += f", val dice {history['val_dice'][-1]:.4f}"
            print(line, flush=True)

        if monitor < best_monitor:
            best_monitor = monitor
            best_state = _state_to_numpy(model)
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= train_config.early_stop_patience:
                break

    history["best_epoch"] = best_epoch
    history["epochs_run"] = len(history["train_loss"])
    train_dict = asdict(train_config)
    return Checkpoint(
        network_config=net_config,
        training_config=train_dict,
        normalization=stats,
        history=history,
        state=best_state,
    )


# --- inference ----------------------------------------------------------------


def infer_image(
    checkpoint: Checkpoint,
    image: GrayImage,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple:
    """Full pipeline on one image: normalize, patch, forward, rebuild, binarize.

    All patches go through the network as a single batch. Returns the
    reconstructed probability map and its thresholded mask.
    """
    strip_width = int(checkpoint.training_config.get("strip_width", DEFAULT_STRIP_WIDTH))
    model = checkpoint.build_model()
    raster = normalize(image, checkpoint.normalization)
    patch_set = crop_to_patches(raster, strip_width)
    xs = [p.values.astype(np.float32) for p in patch_set.patches]
    with torch.no_grad():
        probs = _forward_probs(model, xs).squeeze(1).numpy().astype(np.float64)
    prob_map = reconstruct_from_patches(
        PatchSet(
            patches=tuple(ProbabilityMap(p) for p in probs),
            source_height=patch_set.source_height,
            source_width=patch_set.source_width,
            strip_width=patch_set.strip_width,
        )
    )
    return prob_map, binarize(prob_map, threshold)
