"""Latent-space feature calibration: interpolating samples toward class centers.

Rare classes (at most ``eta`` training samples) are augmented toward the
means of their k nearest common classes; common classes are self-augmented
against the common centers including their own. Every generated row keeps
its anchor's label, and every channel of a generated row stays inside the
closed interval ``anchor +/- |mu_center - anchor|``.

Generation is deterministic and order-independent: each generated sample
owns an RNG stream derived from (seed, domain, class, view, replicate), so
the output is a pure function of the inputs and the seed for any thread
count.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ValidationError
from .parallel import parallel_map
from .store import (
    ClassStats,
    EmbeddingDataset,
    FrequencyPartition,
    View,
    compute_class_stats,
    load_dataset,
    partition_by_frequency,
    save_dataset,
)

logger = logging.getLogger(__name__)

# RNG stream domains; part of the on-disk determinism contract.
_RARE_DOMAIN = 1
_SELF_DOMAIN = 2


class CenterKind(enum.Enum):
    RARE_COMMON = "rare_common"
    SELF_AUGMENT = "self_augment"


class Provenance(enum.IntEnum):
    ORIGINAL_PLAIN = 0
    ORIGINAL_AUG = 1
    GENERATED_RARE_PLAIN = 2
    GENERATED_RARE_AUG = 3
    GENERATED_COMMON_PLAIN = 4
    GENERATED_COMMON_AUG = 5


_GENERATED_TAG = {
    (_RARE_DOMAIN, View.PLAIN): Provenance.GENERATED_RARE_PLAIN,
    (_RARE_DOMAIN, View.AUGMENTED): Provenance.GENERATED_RARE_AUG,
    (_SELF_DOMAIN, View.PLAIN): Provenance.GENERATED_COMMON_PLAIN,
    (_SELF_DOMAIN, View.AUGMENTED): Provenance.GENERATED_COMMON_AUG,
}


@dataclass
class CalibrationConfig:
    """Knobs that fully determine the generated set (together with the data)."""

    eta: int = 400
    k: int = 2
    n_rare: int = 100
    n_com: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.eta < 0:
            raise ConfigError(f"calibration.eta must be >= 0, got {self.eta}")
        if self.k < 1:
            raise ConfigError(f"calibration.k must be >= 1, got {self.k}")
        if self.n_rare < 0 or self.n_com < 0:
            raise ConfigError("calibration.n_rare and n_com must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("calibration.seed must fit in 64 bits")


@dataclass
class CenterSet:
    """The k common-class centers nearest to one anchor, nearest first."""

    anchor: np.ndarray
    center_ids: List[int]
    kind: CenterKind


@dataclass(frozen=True)
class GeneratedSample:
    """One generated row plus the provenance needed to replay it."""

    feature: np.ndarray  # (dim,) float32, already interval-snapped
    class_id: int
    view: View
    replicate: int
    anchor_index: int  # row index in the source view's dataset
    center_class: int


@dataclass(eq=False)
class CalibratedSet:
    """The assembled training matrix: originals of both views plus generated rows.

    Row order is canonical: plain originals in input order, augmented-view
    originals in input order, then generated rows sorted by
    (class, view, replicate).
    """

    features: np.ndarray  # (n, dim) float32
    labels: np.ndarray  # (n,) int64
    class_names: List[str]
    provenance: np.ndarray  # (n,) uint8 Provenance codes
    anchor_index: np.ndarray  # (n,) int64; originals reference their own row
    center_class: np.ndarray  # (n,) int64; -1 for originals

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def topk_common_centers(
    x: np.ndarray,
    stats: Sequence[ClassStats],
    common_ids: Iterable[int],
    k: int,
    kind: CenterKind = CenterKind.RARE_COMMON,
) -> CenterSet:
    """The k common class ids whose means are nearest to ``x`` in L2.

    Ordered by ascending distance, ties broken by ascending class id.
    """
    x = np.asarray(x, dtype=np.float64)
    ids = np.array(sorted(common_ids), dtype=np.int64)
    if k > ids.size:
        raise ConfigError(f"k={k} exceeds the {ids.size} available common classes")
    by_id = {s.class_id: s for s in stats}
    missing = [int(i) for i in ids if int(i) not in by_id]
    if missing:
        raise ValidationError(f"stats are missing common classes {missing}")
    means = np.stack([by_id[int(i)].mean for i in ids])
    sq_dist = ((means - x) ** 2).sum(axis=1)
    order = np.lexsort((ids, sq_dist))
    return CenterSet(anchor=x, center_ids=[int(ids[j]) for j in order[:k]], kind=kind)


def sample_omega(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Per-channel scaling vector: standard Gaussian clamped to [-1, 1]."""
    if dim < 1:
        raise ValidationError(f"dim must be >= 1, got {dim}")
    return np.clip(rng.standard_normal(dim), -1.0, 1.0)


def calibrate_sample(x: np.ndarray, mu: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Interpolate ``x`` toward the center ``mu``: x + omega * (mu - x).

    omega = 0 returns x and omega = 1 returns mu, both exactly; negative
    omega extrapolates away from the center by the mirrored distance.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if not (x.shape == mu.shape == omega.shape):
        raise ValidationError(
            f"shape mismatch: x {x.shape}, mu {mu.shape}, omega {omega.shape}"
        )
    out = x + omega * (mu - x)
    # The clamp puts an atom on omega == 1.0; that endpoint must land on the
    # center itself, which x + 1.0*(mu - x) misses by an ulp in floats.
    return np.where(omega == 1.0, mu, out)


def _snap_into_interval(gen: np.ndarray, anchor32: np.ndarray, bound: np.ndarray) -> np.ndarray:
    """Cast to f32, then pull any channel f32 rounding pushed outside
    ``|row - anchor| <= bound`` back toward the anchor by ulp steps."""
    row = gen.astype(np.float32)
    while True:
        outside = np.abs(row.astype(np.float64) - anchor32) > bound
        if not outside.any():
            return row
        row[outside] = np.nextafter(row[outside], anchor32[outside])


def _generate_for_class(
    dataset: EmbeddingDataset,
    stats: Sequence[ClassStats],
    common_ids: frozenset,
    config: CalibrationConfig,
    domain: int,
    class_id: int,
    view: View,
    replicates: int,
    kind: CenterKind,
) -> List[GeneratedSample]:
    own_rows = np.flatnonzero(dataset.labels == class_id)
    if own_rows.size == 0:
        logger.warning("class %d has no samples in the %s view; skipping", class_id, view.name)
        return []
    by_id = {s.class_id: s for s in stats}
    out = []
    for replicate in range(replicates):
        rng = np.random.default_rng(
            [config.seed, domain, class_id, int(view), replicate]
        )
        anchor_index = int(own_rows[int(rng.integers(own_rows.size))])
        anchor32 = dataset.embeddings[anchor_index]
        anchor = anchor32.astype(np.float64)
        centers = topk_common_centers(anchor, stats, common_ids, config.k, kind)
        center_id = centers.center_ids[int(rng.integers(config.k))]
        omega = sample_omega(dataset.dim, rng)
        mu = by_id[center_id].mean
        gen = calibrate_sample(anchor, mu, omega)
        feature = _snap_into_interval(gen, anchor32, np.abs(mu - anchor))
        out.append(
            GeneratedSample(
                feature=feature,
                class_id=class_id,
                view=view,
                replicate=replicate,
                anchor_index=anchor_index,
                center_class=center_id,
            )
        )
    return out


def _generate(
    dataset_plain: EmbeddingDataset,
    dataset_aug: EmbeddingDataset,
    stats_plain: Sequence[ClassStats],
    stats_aug: Sequence[ClassStats],
    partition: FrequencyPartition,
    config: CalibrationConfig,
    domain: int,
    threads: int,
) -> List[GeneratedSample]:
    if domain == _RARE_DOMAIN:
        class_ids = sorted(partition.rare_ids)
        replicates = config.n_rare
        kind = CenterKind.RARE_COMMON
    else:
        class_ids = sorted(partition.common_ids)
        replicates = config.n_com
        kind = CenterKind.SELF_AUGMENT
    if replicates == 0 or not class_ids:
        return []
    if config.k > partition.n_common:
        raise ConfigError(
            f"k={config.k} exceeds the {partition.n_common} common classes"
        )
    tasks = [
        (class_id, view, dataset, stats)
        for class_id in class_ids
        for view, dataset, stats in (
            (View.PLAIN, dataset_plain, stats_plain),
            (View.AUGMENTED, dataset_aug, stats_aug),
        )
    ]

    def run(task) -> List[GeneratedSample]:
        class_id, view, dataset, stats = task
        return _generate_for_class(
            dataset, stats, partition.common_ids, config, domain,
            class_id, view, replicates, kind,
        )

    chunks = parallel_map(run, tasks, threads=threads)
    return [sample for chunk in chunks for sample in chunk]


def generate_rare(
    dataset_plain: EmbeddingDataset,
    dataset_aug: EmbeddingDataset,
    stats_plain: Sequence[ClassStats],
    stats_aug: Sequence[ClassStats],
    partition: FrequencyPartition,
    config: CalibrationConfig,
    threads: int = 1,
) -> List[GeneratedSample]:
    """Generate n_rare rows per rare class and view, anchored on existing
    rare samples and interpolated toward one of their k nearest common
    centers (computed from the matching view's statistics)."""
    return _generate(
        dataset_plain, dataset_aug, stats_plain, stats_aug,
        partition, config, _RARE_DOMAIN, threads,
    )


def generate_common(
    dataset_plain: EmbeddingDataset,
    dataset_aug: EmbeddingDataset,
    stats_plain: Sequence[ClassStats],
    stats_aug: Sequence[ClassStats],
    partition: FrequencyPartition,
    config: CalibrationConfig,
    threads: int = 1,
) -> List[GeneratedSample]:
    """Self-augment: n_com rows per common class and view, with the neighbor
    set drawn over the common classes including the anchor's own."""
    return _generate(
        dataset_plain, dataset_aug, stats_plain, stats_aug,
        partition, config, _SELF_DOMAIN, threads,
    )


def _check_paired_views(plain: EmbeddingDataset, aug: EmbeddingDataset) -> None:
    if plain.dim != aug.dim:
        raise ValidationError(f"view dims differ: {plain.dim} vs {aug.dim}")
    if plain.class_names != aug.class_names:
        raise ValidationError("views carry different class tables")
    if not np.array_equal(plain.class_counts(), aug.class_counts()):
        raise ValidationError("views carry different per-class sample counts")


def build_calibrated_set(
    dataset_plain: EmbeddingDataset,
    dataset_aug: EmbeddingDataset,
    config: CalibrationConfig,
    threads: int = 1,
) -> CalibratedSet:
    """Assemble the calibrated training set.

    Output rows are both views' originals followed by the rare-common and
    self-augment generations, fully determined by (inputs, config.seed).
    """
    _check_paired_views(dataset_plain, dataset_aug)
    stats_plain = compute_class_stats(dataset_plain, threads=threads)
    stats_aug = compute_class_stats(dataset_aug, threads=threads)
    partition = partition_by_frequency(dataset_plain, config.eta)
    if config.k > partition.n_common:
        raise ConfigError(
            f"k={config.k} exceeds the {partition.n_common} common classes"
        )

    generated = generate_rare(
        dataset_plain, dataset_aug, stats_plain, stats_aug, partition, config, threads
    )
    generated += generate_common(
        dataset_plain, dataset_aug, stats_plain, stats_aug, partition, config, threads
    )
    generated.sort(key=lambda s: (s.class_id, int(s.view), s.replicate))

    n_plain, n_aug = dataset_plain.n, dataset_aug.n
    total = n_plain + n_aug + len(generated)
    dim = dataset_plain.dim
    features = np.empty((total, dim), dtype=np.float32)
    labels = np.empty(total, dtype=np.int64)
    provenance = np.empty(total, dtype=np.uint8)
    anchor_index = np.empty(total, dtype=np.int64)
    center_class = np.full(total, -1, dtype=np.int64)

    features[:n_plain] = dataset_plain.embeddings
    labels[:n_plain] = dataset_plain.labels
    provenance[:n_plain] = Provenance.ORIGINAL_PLAIN
    anchor_index[:n_plain] = np.arange(n_plain)

    features[n_plain : n_plain + n_aug] = dataset_aug.embeddings
    labels[n_plain : n_plain + n_aug] = dataset_aug.labels
    provenance[n_plain : n_plain + n_aug] = Provenance.ORIGINAL_AUG
    anchor_index[n_plain : n_plain + n_aug] = np.arange(n_aug)

    rare_ids = partition.rare_ids
    for offset, sample in enumerate(generated, start=n_plain + n_aug):
        domain = _RARE_DOMAIN if sample.class_id in rare_ids else _SELF_DOMAIN
        features[offset] = sample.feature
        labels[offset] = sample.class_id
        provenance[offset] = _GENERATED_TAG[(domain, sample.view)]
        anchor_index[offset] = sample.anchor_index
        center_class[offset] = sample.center_class

    return CalibratedSet(
        features=features,
        labels=labels,
        class_names=list(dataset_plain.class_names),
        provenance=provenance,
        anchor_index=anchor_index,
        center_class=center_class,
    )


def save_calibrated(calibrated: CalibratedSet, path: Union[str, Path]) -> None:
    """Write the calibrated matrix as DARC1 plus a ``.provenance.csv`` sidecar.

    The sidecar logs (row_index, tag, anchor_index, center_class); omegas are
    not stored because the seed and replicate position suffice to replay them.
    """
    path = Path(path)
    dataset = EmbeddingDataset(
        embeddings=calibrated.features,
        labels=calibrated.labels,
        class_names=calibrated.class_names,
        view=View.PLAIN,
        meta={"split": "train_calibrated"},
    )
    save_dataset(dataset, path)
    with _provenance_path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["row_index", "tag", "anchor_index", "center_class"])
        for i in range(calibrated.n):
            writer.writerow(
                [
                    i,
                    Provenance(calibrated.provenance[i]).name.lower(),
                    int(calibrated.anchor_index[i]),
                    int(calibrated.center_class[i]),
                ]
            )


def load_calibrated(path: Union[str, Path]) -> CalibratedSet:
    path = Path(path)
    dataset = load_dataset(path)
    n = dataset.n
    provenance = np.zeros(n, dtype=np.uint8)
    anchor_index = np.full(n, -1, dtype=np.int64)
    center_class = np.full(n, -1, dtype=np.int64)
    with _provenance_path(path).open(newline="") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            i = int(row["row_index"])
            provenance[i] = Provenance[row["tag"].upper()]
            anchor_index[i] = int(row["anchor_index"])
            center_class[i] = int(row["center_class"])
    return CalibratedSet(
        features=dataset.embeddings,
        labels=dataset.labels,
        class_names=dataset.class_names,
        provenance=provenance,
        anchor_index=anchor_index,
        center_class=center_class,
    )


def _provenance_path(path: Path) -> Path:
    return path.with_name(path.name + ".provenance.csv")
