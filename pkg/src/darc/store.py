"""Embedding dataset model, the DARC1 on-disk format, and per-class statistics.

DARC1 layout (little-endian throughout):

    magic      4 bytes         b"DARC"
    version    u32             1
    dim        u32             feature channels
    n          u64             sample count
    n_classes  u32             class table size
    view       u8              0 = plain, 1 = augmented view
    class table                n_classes x (len u32, UTF-8 bytes)
    labels     n x u32
    embeddings n x dim x f32   row-major

An optional JSON sidecar ``<path>.meta.json`` carries a flat string map
(keys such as "modality", "split", "source"); its absence is legal and
loads as an empty map. Encoding is deterministic: saving the same dataset
twice produces byte-identical files.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .errors import FormatError, LengthError, ValidationError
from .parallel import parallel_map

MAGIC = b"DARC"
VERSION = 1

_HEADER = struct.Struct("<4sIIQIB")


class View(enum.IntEnum):
    """Whether the upstream extractor saw the raw input or an augmented copy."""

    PLAIN = 0
    AUGMENTED = 1


class CovMode(enum.Enum):
    DIAGONAL = "diagonal"
    FULL = "full"


@dataclass(eq=False)
class EmbeddingDataset:
    """A labelled matrix of feature vectors plus its class table and metadata.

    Immutable by convention after construction; safe to share across threads
    for reading.
    """

    embeddings: np.ndarray  # (n, dim) float32
    labels: np.ndarray  # (n,) integer class indices
    class_names: List[str]
    view: View = View.PLAIN
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.class_names = list(self.class_names)
        self.view = View(self.view)
        self.validate()

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def validate(self) -> None:
        if self.embeddings.ndim != 2:
            raise ValidationError("embeddings must be a 2-D (n, dim) matrix")
        if self.dim <= 0:
            raise ValidationError("dim must be positive")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.n:
            raise ValidationError(
                f"labels length {self.labels.shape} does not match {self.n} embedding rows"
            )
        if self.n_classes < 1:
            raise ValidationError("class table must name at least one class")
        if self.n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            bad = int(self.labels[(self.labels < 0) | (self.labels >= self.n_classes)][0])
            raise ValidationError(f"label {bad} outside [0, {self.n_classes})")
        if not np.isfinite(self.embeddings).all():
            raise ValidationError("embeddings contain NaN or Inf")
        for key, value in self.meta.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise ValidationError("meta must be a flat string-to-string map")

    def class_counts(self) -> np.ndarray:
        """Per-class sample counts, length n_classes."""
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass
class ClassStats:
    """Gaussian summary of one class: sample count, channel means, covariance.

    ``cov`` is a (dim,) vector in diagonal mode or a (dim, dim) matrix in
    full mode, using the unbiased n-1 denominator. Single-sample classes
    carry zero covariance and ``cov_defined=False``.
    """

    class_id: int
    count: int
    mean: np.ndarray  # (dim,) float64
    cov: np.ndarray  # (dim,) or (dim, dim) float64
    cov_defined: bool


@dataclass
class FrequencyPartition:
    """Split of the training classes into common (count > eta) and rare."""

    eta: int
    common_ids: frozenset
    rare_ids: frozenset

    @property
    def n_common(self) -> int:
        return len(self.common_ids)


def save_dataset(dataset: EmbeddingDataset, path: Union[str, Path]) -> None:
    """Write ``dataset`` to ``path`` in the DARC1 format.

    Validates first, so an invalid dataset never touches disk. Writes the
    ``<path>.meta.json`` sidecar only when ``meta`` is non-empty.
    """
    dataset.validate()
    path = Path(path)
    parts = [
        _HEADER.pack(
            MAGIC,
            VERSION,
            dataset.dim,
            dataset.n,
            dataset.n_classes,
            int(dataset.view),
        )
    ]
    for name in dataset.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(dataset.labels.astype("<u4").tobytes())
    parts.append(dataset.embeddings.astype("<f4").tobytes())
    path.write_bytes(b"".join(parts))
    sidecar = _sidecar_path(path)
    if dataset.meta:
        sidecar.write_text(json.dumps(dataset.meta, sort_keys=True, indent=2) + "\n")
    elif sidecar.exists():
        sidecar.unlink()


def load_dataset(path: Union[str, Path]) -> EmbeddingDataset:
    """Read a DARC1 file, returning a dataset that passes all invariants."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise LengthError(f"{path}: file shorter than the DARC1 header")
    magic, version, dim, n, n_classes, view_code = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim == 0:
        raise FormatError(f"{path}: header declares dim = 0")
    offset = _HEADER.size
    class_names = []
    for _ in range(n_classes):
        if offset + 4 > len(blob):
            raise LengthError(f"{path}: truncated inside the class table")
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + name_len > len(blob):
            raise LengthError(f"{path}: truncated inside the class table")
        class_names.append(blob[offset : offset + name_len].decode("utf-8"))
        offset += name_len
    labels_bytes = n * 4
    embed_bytes = n * dim * 4
    expected = offset + labels_bytes + embed_bytes
    if len(blob) != expected:
        raise LengthError(
            f"{path}: payload is {len(blob)} bytes, header implies {expected}"
        )
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=offset).astype(np.int64)
    offset += labels_bytes
    embeddings = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=offset)
    embeddings = embeddings.reshape(n, dim)
    try:
        view = View(view_code)
    except ValueError:
        raise FormatError(f"{path}: unknown view code {view_code}") from None
    meta: Dict[str, str] = {}
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        loaded = json.loads(sidecar.read_text())
        if not isinstance(loaded, dict):
            raise FormatError(f"{sidecar}: sidecar must hold a JSON object")
        meta = {str(k): str(v) for k, v in loaded.items()}
    return EmbeddingDataset(
        embeddings=embeddings, labels=labels, class_names=class_names, view=view, meta=meta
    )


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def compute_class_stats(
    dataset: EmbeddingDataset,
    cov_mode: CovMode = CovMode.DIAGONAL,
    threads: int = 1,
) -> List[ClassStats]:
    """Per-class mean and unbiased covariance over the dataset's channels.

    Accumulates in float64. Classes absent from the labels are skipped, so
    the result covers exactly the classes with at least one sample, in
    ascending class-id order. Classes with a single sample get zero
    covariance flagged ``cov_defined=False``. Independent of ``threads``.
    """
    dataset.validate()
    present = sorted(int(c) for c in np.unique(dataset.labels))

    def one_class(class_id: int) -> ClassStats:
        rows = dataset.embeddings[dataset.labels == class_id].astype(np.float64)
        count = rows.shape[0]
        mean = rows.sum(axis=0) / count
        if count < 2:
            if cov_mode is CovMode.FULL:
                cov = np.zeros((dataset.dim, dataset.dim))
            else:
                cov = np.zeros(dataset.dim)
            return ClassStats(class_id, count, mean, cov, cov_defined=False)
        centered = rows - mean
        if cov_mode is CovMode.FULL:
            cov = centered.T @ centered / (count - 1)
        else:
            cov = (centered * centered).sum(axis=0) / (count - 1)
        return ClassStats(class_id, count, mean, cov, cov_defined=True)

    return parallel_map(one_class, present, threads=threads)


def partition_by_frequency(dataset: EmbeddingDataset, eta: int) -> FrequencyPartition:
    """Classes with more than ``eta`` samples are common; the rest are rare.

    The boundary is strict: a class with exactly ``eta`` samples is rare,
    and eta = 0 makes every present class common. Classes without samples
    belong to neither side.
    """
    if eta < 0:
        raise ValidationError(f"eta must be >= 0, got {eta}")
    counts = dataset.class_counts()
    common = frozenset(int(c) for c in np.flatnonzero(counts > eta))
    rare = frozenset(int(c) for c in np.flatnonzero((counts > 0) & (counts <= eta)))
    return FrequencyPartition(eta=eta, common_ids=common, rare_ids=rare)
