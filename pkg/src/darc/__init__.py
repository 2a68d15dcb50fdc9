"""Latent-space feature-distribution calibration and attention-gated
classification for embedding datasets."""

from .calibrate import (
    CalibratedSet,
    CalibrationConfig,
    CenterKind,
    CenterSet,
    GeneratedSample,
    Provenance,
    build_calibrated_set,
    calibrate_sample,
    generate_common,
    generate_rare,
    load_calibrated,
    sample_omega,
    save_calibrated,
    topk_common_centers,
)
from .errors import ConfigError, DarcError, FormatError, LengthError, ValidationError
from .evaluate import (
    EvalReport,
    balanced_accuracy,
    cross_modality_eval,
    evaluate,
    predict,
)
from .head import (
    HeadParams,
    OptimizerState,
    TrainConfig,
    TrainResult,
    cosine_lr,
    forward,
    hard_indices,
    init_params,
    load_params,
    loss_and_grad,
    mine_hard_samples,
    optimizer_step,
    save_params,
    train,
)
from .store import (
    ClassStats,
    CovMode,
    EmbeddingDataset,
    FrequencyPartition,
    View,
    compute_class_stats,
    load_dataset,
    partition_by_frequency,
    save_dataset,
)
from .synth import ClassSpec, MixtureSpec, SynthData, default_spec, generate

__version__ = "0.1.0"
