"""Sequential inference harness with per-frame latency statistics.

Frames pass through the full image-to-mask pipeline strictly one at a time:
the next frame is pulled from the source only after the previous frame's
result has been handed to the caller. That single-in-flight discipline keeps
the temporal ordering a depth-tracking controller needs and makes the
reported latencies guidance latencies, not batch throughput.
"""

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyDatasetError
from .net import Checkpoint, infer_image


@dataclass(frozen=True)
class StreamStats:
    """Latency summary over measured frames (warmup excluded).

    Latencies are seconds per frame for the full pipeline; frequency is
    1 / mean_latency in Hz.
    """

    frame_count: int
    mean_latency: float
    p95_latency: float
    frequency: float
    per_frame_latencies: tuple

    def to_dict(self) -> dict:
        return {
            "frame_count": self.frame_count,
            "mean_latency": self.mean_latency,
            "p95_latency": self.p95_latency,
            "frequency": self.frequency,
            "per_frame_latencies": list(self.per_frame_latencies),
        }


def _stats_from_latencies(latencies: list) -> StreamStats:
    mean = float(np.mean(latencies))
    return StreamStats(
        frame_count=len(latencies),
        mean_latency=mean,
        p95_latency=float(np.percentile(latencies, 95.0)),
        frequency=1.0 / mean,
        per_frame_latencies=tuple(latencies),
    )


def run_stream(
    checkpoint: Checkpoint,
    frames,
    warmup: int = 0,
    on_result=None,
) -> StreamStats:
    """Drive (name, GrayImage) frames through infer_image one at a time.

    `frames` may be any iterable; it is advanced only after the previous
    frame's mask exists and `on_result(name, prob_map, mask)` has returned,
    so a generator source observes strict read/result alternation. The first
    `warmup` frames run but are excluded from the statistics.
    """
    if warmup < 0:
        raise ConfigError(f"warmup must be >= 0, got {warmup}")
    latencies = []
    seen = 0
    for name, image in frames:
        start = time.perf_counter()
        prob_map, mask = infer_image(checkpoint, image)
        elapsed = time.perf_counter() - start
        if seen >= warmup:
            latencies.append(elapsed)
        if on_result is not None:
            on_result(name, prob_map, mask)
        seen += 1
    if not latencies:
        raise EmptyDatasetError(
            f"no frames left to measure: {seen} supplied, {warmup} warmup"
        )
    return _stats_from_latencies(latencies)


def measure_inference_frequency(
    checkpoint: Checkpoint, images: list, warmup: int = 0
) -> StreamStats:
    """Latency statistics of the full pipeline over a list of images."""
    return run_stream(
        checkpoint,
        ((str(k), image) for k, image in enumerate(images)),
        warmup=warmup,
    )
