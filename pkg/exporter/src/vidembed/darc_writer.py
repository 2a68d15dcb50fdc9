"""Minimal standalone DARC1 writer.

Implements the consumer-side wire format so exports can be loaded by any
DARC1 reader: magic b"DARC", version u32 = 1, dim u32, n u64, n_classes
u32, view u8 (0 plain / 1 augmented), class table (len u32 + UTF-8 bytes
each), labels u32, embeddings f32 row-major, all little-endian. Metadata
goes into the ``<path>.meta.json`` sidecar.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

MAGIC = b"DARC"
VERSION = 1


def write_darc1(
    path: Union[str, Path],
    embeddings: np.ndarray,
    labels: np.ndarray,
    class_names: List[str],
    view: int,
    meta: Optional[Dict[str, str]] = None,
) -> None:
    path = Path(path)
    embeddings = np.ascontiguousarray(embeddings, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.ndim != 2:
        raise ValueError("embeddings must be (n, dim)")
    if labels.shape != (embeddings.shape[0],):
        raise ValueError("labels must match embedding rows")
    if not np.isfinite(embeddings).all():
        raise ValueError("embeddings contain NaN or Inf")
    if labels.size and (labels.min() < 0 or labels.max() >= len(class_names)):
        raise ValueError("labels outside the class table")
    if view not in (0, 1):
        raise ValueError("view must be 0 (plain) or 1 (augmented)")
    n, dim = embeddings.shape
    parts = [struct.pack("<4sIIQIB", MAGIC, VERSION, dim, n, len(class_names), view)]
    for name in class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(labels.astype("<u4").tobytes())
    parts.append(embeddings.astype("<f4").tobytes())
    path.write_bytes(b"".join(parts))
    if meta:
        sidecar = path.with_name(path.name + ".meta.json")
        sidecar.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
