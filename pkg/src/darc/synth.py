"""Seeded synthetic imbalanced Gaussian-mixture embeddings, plus the
brute-force oracles the test suite checks the fast implementations against.

Class means sit on a seeded sphere; samples are isotropic draws around
them. The augmented view re-noises the same class at the same index, the
way a random input augmentation yields a correlated-but-distinct
embedding. Per-class RNG streams keep generation deterministic for any
thread count, with rows ordered by (class, index).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError
from .parallel import parallel_map
from .store import EmbeddingDataset, View

_MEANS_DOMAIN = 21
_SPLIT_DOMAIN = {"train": 22, "val": 23, "test": 24}
_AUG_DOMAIN = 25
_SHIFT_DOMAIN = 26

_SPLIT_CODE = {"train": 0, "train_aug": 1, "val": 2, "test": 3}


@dataclass
class ClassSpec:
    """One mixture component: training count, center radius, isotropic stddev."""

    count: int
    radius: float
    stddev: float


@dataclass
class MixtureSpec:
    """Recipe for a full synthetic benchmark.

    ``count`` in each class spec is the class's training-set size; val and
    test sizes follow the fractions relative to the train share. When
    ``noise_sigma`` is set, a second "modality" copy of every split is
    produced by adding that much Gaussian noise.
    """

    dim: int
    class_specs: List[ClassSpec]
    seed: int = 0
    noise_sigma: Optional[float] = None
    fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self) -> None:
        self.class_specs = [
            spec if isinstance(spec, ClassSpec) else ClassSpec(**spec)
            for spec in self.class_specs
        ]
        if self.dim < 1:
            raise ValidationError(f"dim must be >= 1, got {self.dim}")
        if len(self.class_specs) < 2:
            raise ValidationError("a mixture needs at least 2 classes")
        for i, spec in enumerate(self.class_specs):
            if spec.count < 1:
                raise ValidationError(f"class {i}: count must be >= 1")
            if spec.stddev <= 0:
                raise ValidationError(f"class {i}: stddev must be > 0")
            if spec.radius < 0:
                raise ValidationError(f"class {i}: radius must be >= 0")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ValidationError("fractions must be three positive values")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValidationError(f"fractions must sum to 1, got {sum(self.fractions)}")

    def split_counts(self, class_id: int) -> Dict[str, int]:
        count = self.class_specs[class_id].count
        f_train, f_val, f_test = self.fractions
        return {
            "train": count,
            "val": max(1, round(count * f_val / f_train)),
            "test": max(1, round(count * f_test / f_train)),
        }

    def to_json(self) -> str:
        payload = {
            "dim": self.dim,
            "class_specs": [
                {"count": s.count, "radius": s.radius, "stddev": s.stddev}
                for s in self.class_specs
            ],
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "fractions": list(self.fractions),
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MixtureSpec":
        payload = json.loads(text)
        payload["fractions"] = tuple(payload.get("fractions", (0.6, 0.2, 0.2)))
        return cls(**payload)


@dataclass
class SynthData:
    train: EmbeddingDataset
    train_aug: EmbeddingDataset
    val: EmbeddingDataset
    test: EmbeddingDataset
    shifted: Optional["ShiftedBundle"] = None


@dataclass
class ShiftedBundle:
    train: EmbeddingDataset
    train_aug: EmbeddingDataset
    val: EmbeddingDataset
    test: EmbeddingDataset

    def datasets(self) -> Dict[str, EmbeddingDataset]:
        return {
            "train": self.train,
            "train_aug": self.train_aug,
            "val": self.val,
            "test": self.test,
        }


def class_means(spec: MixtureSpec) -> np.ndarray:
    """Deterministic class centers on seeded spheres of each class's radius."""
    means = np.empty((len(spec.class_specs), spec.dim))
    for class_id, class_spec in enumerate(spec.class_specs):
        rng = np.random.default_rng([spec.seed, _MEANS_DOMAIN, class_id])
        direction = rng.standard_normal(spec.dim)
        norm = np.linalg.norm(direction)
        if norm < 1e-12:
            direction = np.zeros(spec.dim)
            direction[0] = 1.0
            norm = 1.0
        means[class_id] = direction / norm * class_spec.radius
    return means


def _assemble(
    spec: MixtureSpec,
    blocks: List[np.ndarray],
    view: View,
    split: str,
    modality: str,
) -> EmbeddingDataset:
    features = np.concatenate(blocks, axis=0).astype(np.float32)
    labels = np.concatenate(
        [np.full(len(block), class_id) for class_id, block in enumerate(blocks)]
    )
    return EmbeddingDataset(
        embeddings=features,
        labels=labels,
        class_names=[f"class_{i}" for i in range(len(spec.class_specs))],
        view=view,
        meta={"modality": modality, "split": split, "source": "synth"},
    )


def generate(spec: MixtureSpec, threads: int = 1) -> SynthData:
    """All splits of the benchmark; bit-identical for a fixed spec."""
    means = class_means(spec)

    def class_block(args) -> np.ndarray:
        split, class_id = args
        class_spec = spec.class_specs[class_id]
        n = spec.split_counts(class_id)[split if split != "train_aug" else "train"]
        if split == "train_aug":
            rng = np.random.default_rng([spec.seed, _AUG_DOMAIN, class_id])
        else:
            rng = np.random.default_rng([spec.seed, _SPLIT_DOMAIN[split], class_id])
        draws = means[class_id] + class_spec.stddev * rng.standard_normal((n, spec.dim))
        return draws

    n_classes = len(spec.class_specs)
    splits = {}
    for split in ("train", "train_aug", "val", "test"):
        tasks = [(split, class_id) for class_id in range(n_classes)]
        splits[split] = parallel_map(class_block, tasks, threads=threads)

    def shift_block(args) -> np.ndarray:
        split, class_id, block = args
        rng = np.random.default_rng(
            [spec.seed, _SHIFT_DOMAIN, _SPLIT_CODE[split], class_id]
        )
        return block + spec.noise_sigma * rng.standard_normal(block.shape)

    shifted = None
    if spec.noise_sigma is not None:
        shifted_blocks = {}
        for split in ("train", "train_aug", "val", "test"):
            tasks = [
                (split, class_id, splits[split][class_id])
                for class_id in range(n_classes)
            ]
            shifted_blocks[split] = parallel_map(shift_block, tasks, threads=threads)
        shifted = ShiftedBundle(
            train=_assemble(spec, shifted_blocks["train"], View.PLAIN, "train", "shifted"),
            train_aug=_assemble(
                spec, shifted_blocks["train_aug"], View.AUGMENTED, "train", "shifted"
            ),
            val=_assemble(spec, shifted_blocks["val"], View.PLAIN, "val", "shifted"),
            test=_assemble(spec, shifted_blocks["test"], View.PLAIN, "test", "shifted"),
        )

    return SynthData(
        train=_assemble(spec, splits["train"], View.PLAIN, "train", "base"),
        train_aug=_assemble(spec, splits["train_aug"], View.AUGMENTED, "train", "base"),
        val=_assemble(spec, splits["val"], View.PLAIN, "val", "base"),
        test=_assemble(spec, splits["test"], View.PLAIN, "test", "base"),
        shifted=shifted,
    )


def default_spec(seed: int = 2024) -> MixtureSpec:
    """Desk-scale imbalanced benchmark: 7 common classes of 500 training
    samples and 3 rare classes of 20, in 64 channels, with a noisier
    "modality" copy for cross-modality checks."""
    specs = [ClassSpec(count=500, radius=3.0, stddev=1.0) for _ in range(7)]
    specs += [ClassSpec(count=20, radius=3.0, stddev=1.0) for _ in range(3)]
    return MixtureSpec(
        dim=64, class_specs=specs, seed=seed, noise_sigma=0.5, fractions=(0.5, 0.25, 0.25)
    )


# --- Brute-force oracles (test-only reference implementations) ---------------


def oracle_stats(
    features: np.ndarray, labels: np.ndarray, full_cov: bool = False
) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """Two-pass streaming mean/covariance per class, row by row."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    dim = features.shape[1]
    out: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    for class_id in sorted(set(int(c) for c in labels)):
        rows = [features[i] for i in range(len(labels)) if labels[i] == class_id]
        total = np.zeros(dim)
        for row in rows:
            total = total + row
        mean = total / len(rows)
        if full_cov:
            acc = np.zeros((dim, dim))
        else:
            acc = np.zeros(dim)
        for row in rows:
            diff = row - mean
            if full_cov:
                acc = acc + np.outer(diff, diff)
            else:
                acc = acc + diff * diff
        cov = acc / (len(rows) - 1) if len(rows) > 1 else acc * 0.0
        out[class_id] = (mean, cov)
    return out


def oracle_topk(
    x: np.ndarray, means_by_id: Dict[int, np.ndarray], common_ids, k: int
) -> List[int]:
    """Sort every common center by (Euclidean distance, class id), take k."""
    scored = []
    for class_id in common_ids:
        diff = np.asarray(means_by_id[class_id], dtype=np.float64) - np.asarray(
            x, dtype=np.float64
        )
        scored.append((math.sqrt(float((diff * diff).sum())), class_id))
    scored.sort()
    return [class_id for _, class_id in scored[:k]]


def oracle_mine(losses: Sequence[float], delta: float) -> List[int]:
    """Linear scan for losses strictly above delta times the mean."""
    losses = [float(v) for v in losses]
    threshold = delta * (sum(losses) / len(losses))
    return [i for i, v in enumerate(losses) if v > threshold]
