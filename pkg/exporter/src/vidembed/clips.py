"""Clip sampling and video-level augmentation.

A sample contributes a fixed number of clips, each a fixed-length frame
sequence taken at a fixed temporal step from a seeded random start inside
the labelled segment; indices past the segment end clamp to the last
frame. The augmented view applies a per-clip random crop-resize and color
jitter, seeded per (row, clip), so exports are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class ClipSpec:
    frames_per_clip: int = 32
    step: int = 2
    clips_per_sample: int = 2
    seed: int = 0

    @property
    def span(self) -> int:
        return (self.frames_per_clip - 1) * self.step + 1


def clip_frame_indices(
    spec: ClipSpec, row: int, clip: int, start_frame: int, end_frame: int
) -> np.ndarray:
    """Frame indices for one clip of one manifest row, clamped to the segment."""
    if end_frame <= start_frame:
        raise ValueError(f"segment [{start_frame}, {end_frame}) is empty")
    rng = np.random.default_rng([spec.seed, 101, row, clip])
    last_start = max(start_frame, end_frame - spec.span)
    start = int(rng.integers(start_frame, last_start + 1))
    indices = start + spec.step * np.arange(spec.frames_per_clip)
    return np.minimum(indices, end_frame - 1)


def augment_clip(clip: torch.Tensor, spec: ClipSpec, row: int, clip_index: int) -> torch.Tensor:
    """Random crop-resize plus color jitter over a (T, C, H, W) float clip."""
    rng = np.random.default_rng([spec.seed, 102, row, clip_index])
    _, _, height, width = clip.shape
    scale = float(rng.uniform(0.7, 1.0))
    crop_h = max(1, int(round(height * scale)))
    crop_w = max(1, int(round(width * scale)))
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    cropped = clip[:, :, top : top + crop_h, left : left + crop_w]
    resized = F.interpolate(
        cropped, size=(height, width), mode="bilinear", align_corners=False
    )
    brightness = float(rng.uniform(0.8, 1.2))
    contrast = float(rng.uniform(0.8, 1.2))
    jittered = resized * brightness
    mean = jittered.mean(dim=(1, 2, 3), keepdim=True)
    jittered = (jittered - mean) * contrast + mean
    return jittered.clamp(0.0, 1.0)


def load_frames(path: Path) -> np.ndarray:
    """Frames as (T, H, W, 3) uint8 from an .npy stack or a video file."""
    if path.suffix == ".npy":
        frames = np.load(path)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"{path}: expected a (T, H, W, 3) frame stack")
        return frames.astype(np.uint8)
    try:
        import cv2
    except ImportError as exc:  # pragma: no cover
        raise RuntimeError(
            "decoding video files needs opencv (`pip install vidembed[video]`); "
            ".npy frame stacks work without it"
        ) from exc
    capture = cv2.VideoCapture(str(path))
    frames = []
    while True:
        ok, frame = capture.read()
        if not ok:
            break
        frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
    capture.release()
    if not frames:
        raise ValueError(f"{path}: no decodable frames")
    return np.stack(frames)
