"""Manifest-driven embedding export.

Each manifest row names a video segment and its label; every row yields
one embedding: the mean of the backbone features of its sampled clips.
Plain and augmented exports of the same manifest share row order and
labels (rows are skipped only for unreadable inputs, which does not
depend on the view).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Backbone
from .clips import ClipSpec, augment_clip, clip_frame_indices, load_frames
from .darc_writer import write_darc1

logger = logging.getLogger(__name__)

VIEW_CODES = {"plain": 0, "aug": 1}


@dataclass
class ManifestRow:
    path: Path
    start_frame: int
    end_frame: int
    label: int


def read_manifest(path: Union[str, Path]) -> List[ManifestRow]:
    """CSV with columns path, start_frame, end_frame, label; paths resolve
    relative to the manifest."""
    path = Path(path)
    rows = []
    with path.open(newline="") as handle:
        reader = csv.DictReader(handle)
        required = {"path", "start_frame", "end_frame", "label"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValueError(f"{path}: manifest needs columns {sorted(required)}")
        for record in reader:
            video = Path(record["path"])
            if not video.is_absolute():
                video = path.parent / video
            rows.append(
                ManifestRow(
                    path=video,
                    start_frame=int(record["start_frame"]),
                    end_frame=int(record["end_frame"]),
                    label=int(record["label"]),
                )
            )
    if not rows:
        raise ValueError(f"{path}: manifest is empty")
    return rows


def _prepare_clip(
    frames: np.ndarray,
    indices: np.ndarray,
    backbone: Backbone,
    spec: ClipSpec,
    augmented: bool,
    row: int,
    clip_index: int,
) -> torch.Tensor:
    clip = torch.from_numpy(frames[indices]).float() / 255.0  # (T, H, W, C)
    clip = clip.permute(0, 3, 1, 2)  # (T, C, H, W)
    clip = F.interpolate(
        clip, size=(backbone.input_size, backbone.input_size),
        mode="bilinear", align_corners=False,
    )
    if augmented:
        clip = augment_clip(clip, spec, row, clip_index)
    mean = torch.tensor(backbone.mean).view(1, 3, 1, 1)
    std = torch.tensor(backbone.std).view(1, 3, 1, 1)
    clip = (clip - mean) / std
    return clip.permute(1, 0, 2, 3)  # (C, T, H, W)


def export(
    rows: Sequence[ManifestRow],
    backbone: Backbone,
    view: str,
    out_path: Union[str, Path],
    spec: Optional[ClipSpec] = None,
    class_names: Optional[Sequence[str]] = None,
    batch_size: int = 8,
    meta: Optional[Dict[str, str]] = None,
) -> int:
    """Write one DARC1 embedding row per readable manifest row.

    Returns the number of exported rows; raises if none survive.
    """
    if view not in VIEW_CODES:
        raise ValueError(f"view must be one of {sorted(VIEW_CODES)}")
    spec = spec or ClipSpec()
    augmented = view == "aug"
    clips: List[torch.Tensor] = []
    labels: List[int] = []
    for row_index, row in enumerate(rows):
        try:
            frames = load_frames(row.path)
        except (OSError, ValueError) as exc:
            logger.warning("skipping row %d (%s): %s", row_index, row.path, exc)
            continue
        end = min(row.end_frame, len(frames))
        if end <= row.start_frame:
            logger.warning(
                "skipping row %d (%s): segment [%d, %d) outside the %d frames",
                row_index, row.path, row.start_frame, row.end_frame, len(frames),
            )
            continue
        for clip_index in range(spec.clips_per_sample):
            indices = clip_frame_indices(spec, row_index, clip_index, row.start_frame, end)
            clips.append(
                _prepare_clip(frames, indices, backbone, spec, augmented, row_index, clip_index)
            )
        labels.append(row.label)
    if not labels:
        raise ValueError("no readable rows in the manifest")

    features = []
    for start in range(0, len(clips), batch_size):
        batch = torch.stack(clips[start : start + batch_size])
        features.append(backbone.extract(batch))
    flat = torch.cat(features).numpy().astype(np.float32)
    per_row = flat.reshape(len(labels), spec.clips_per_sample, backbone.dim).mean(axis=1)

    label_array = np.asarray(labels, dtype=np.int64)
    if class_names is None:
        class_names = [f"class_{i}" for i in range(int(label_array.max()) + 1)]
    merged_meta = {"source": "vidembed", "backbone": backbone.name}
    if meta:
        merged_meta.update(meta)
    write_darc1(
        out_path,
        per_row,
        label_array,
        list(class_names),
        VIEW_CODES[view],
        merged_meta,
    )
    return len(labels)
