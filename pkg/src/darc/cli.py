"""Command-line surface: synth, stats, calibrate, train, eval, pipeline.

``pipeline`` chains the full second stage: load both training views,
compute statistics, partition, calibrate, train the head, and evaluate on
the val/test (and any cross-modality) sets, writing params.darch1,
calibrated.darc1, metrics.csv, and report_<split>.json under --out. Every
subcommand is deterministic given its inputs and seed. Exit codes: 0 on
success, 1 on any validation/config/I-O failure (with a diagnostic on
stderr), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import calibrate as cal
from . import head as hd
from . import synth as sy
from .errors import ConfigError, DarcError
from .evaluate import EvalReport, cross_modality_eval, evaluate
from .store import (
    CovMode,
    EmbeddingDataset,
    compute_class_stats,
    load_dataset,
    partition_by_frequency,
    save_dataset,
)

DEFAULT_SYNTH_SEED = 2024


@dataclass
class PipelineConfig:
    train: Path
    train_aug: Path
    val: Path
    test: Path
    out: Path
    cross_modality: List[Path] = field(default_factory=list)
    calibration: cal.CalibrationConfig = field(default_factory=cal.CalibrationConfig)
    training: hd.TrainConfig = field(default_factory=hd.TrainConfig)


def desk_training_config(seed: int) -> hd.TrainConfig:
    """Desk-scale training override used by the default synthetic pipeline."""
    return hd.TrainConfig(
        n_max=150, lr_max=5e-3, lr_min=1e-5, batch_size=256,
        n_mine=30, delta=1.2, n_hard=1, seed=seed,
    )


def desk_calibration_config(seed: int) -> cal.CalibrationConfig:
    # heavier rare boost than the generic CLI fallback; 20-sample classes
    # need it for the imbalance effect to show at desk scale
    return cal.CalibrationConfig(eta=400, k=2, n_rare=200, n_com=50, seed=seed)


def _build_section(cls, section: dict, prefix: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{prefix}: must be a JSON object")
    valid = set(cls.__dataclass_fields__)
    for key in section:
        if key not in valid:
            raise ConfigError(f"{prefix}.{key}: unknown field")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"{prefix}: {exc}") from exc


_PIPELINE_KEYS = {
    "train", "train_aug", "val", "test", "out",
    "cross_modality", "calibration", "training",
}


def load_pipeline_config(path: Path) -> PipelineConfig:
    """Parse and validate the pipeline JSON; paths resolve relative to it."""
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    for key in raw:
        if key not in _PIPELINE_KEYS:
            raise ConfigError(f"{key}: unknown config key")
    for key in ("train", "train_aug", "val", "test", "out"):
        if key not in raw:
            raise ConfigError(f"{key}: required config key is missing")
    base = path.parent

    def resolve(value, key) -> Path:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: must be a path string")
        return (base / value).resolve() if not Path(value).is_absolute() else Path(value)

    cross = raw.get("cross_modality", [])
    if not isinstance(cross, list):
        raise ConfigError("cross_modality: must be a list of paths")
    return PipelineConfig(
        train=resolve(raw["train"], "train"),
        train_aug=resolve(raw["train_aug"], "train_aug"),
        val=resolve(raw["val"], "val"),
        test=resolve(raw["test"], "test"),
        out=resolve(raw["out"], "out"),
        cross_modality=[resolve(p, f"cross_modality[{i}]") for i, p in enumerate(cross)],
        calibration=_build_section(
            cal.CalibrationConfig, raw.get("calibration", {}), "calibration"
        ),
        training=_build_section(hd.TrainConfig, raw.get("training", {}), "training"),
    )


def _check_same_table(
    reference: EmbeddingDataset, ref_path, dataset: EmbeddingDataset, path
) -> None:
    if dataset.class_names != reference.class_names:
        raise ConfigError(
            f"class tables differ between {ref_path} and {path}; "
            "evaluation refuses to remap classes"
        )


def _write_report(report: EvalReport, out_path: Path, class_names) -> None:
    out_path.write_text(report.to_json())
    print(f"--- {out_path.name} ---")
    print(report.render_table(class_names))


def run_pipeline(config: PipelineConfig, threads: int = 1) -> None:
    config.out.mkdir(parents=True, exist_ok=True)
    train_ds = load_dataset(config.train)
    aug_ds = load_dataset(config.train_aug)
    val_ds = load_dataset(config.val)
    test_ds = load_dataset(config.test)
    cross_ds = [load_dataset(p) for p in config.cross_modality]
    _check_same_table(train_ds, config.train, val_ds, config.val)
    _check_same_table(train_ds, config.train, test_ds, config.test)
    for p, ds in zip(config.cross_modality, cross_ds):
        _check_same_table(train_ds, config.train, ds, p)

    calibrated = cal.build_calibrated_set(
        train_ds, aug_ds, config.calibration, threads=threads
    )
    cal.save_calibrated(calibrated, config.out / "calibrated.darc1")
    print(f"calibrated set: {calibrated.n} rows ({train_ds.n + aug_ds.n} original)")

    result = hd.train(calibrated, config.training)
    hd.save_params(result.params, config.out / "params.darch1")
    (config.out / "metrics.csv").write_text(hd.metrics_csv(result.metrics))
    if result.metrics:
        last = result.metrics[-1]
        print(
            f"trained {last.epoch} epochs; final loss {last.mean_loss:.4f}, "
            f"train balanced accuracy {last.balanced_accuracy:.4f}"
        )

    partition = partition_by_frequency(train_ds, config.calibration.eta)
    for split, dataset in (("val", val_ds), ("test", test_ds)):
        report = evaluate(result.params, dataset, partition)
        _write_report(report, config.out / f"report_{split}.json", dataset.class_names)
    if cross_ds:
        reports = cross_modality_eval(
            result.params, cross_ds, train_ds.class_names, partition
        )
        used = set()
        for path, report in zip(config.cross_modality, reports):
            tag = report.modality or Path(path).stem
            while tag in used:
                tag += "_x"
            used.add(tag)
            _write_report(report, config.out / f"report_{tag}.json", train_ds.class_names)


def _write_synth(spec: sy.MixtureSpec, out: Path, threads: int) -> Dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    data = sy.generate(spec, threads=threads)
    paths = {}
    for name, dataset in (
        ("train", data.train),
        ("train_aug", data.train_aug),
        ("val", data.val),
        ("test", data.test),
    ):
        paths[name] = out / f"{name}.darc1"
        save_dataset(dataset, paths[name])
    if data.shifted is not None:
        for name, dataset in data.shifted.datasets().items():
            paths[f"shifted_{name}"] = out / f"shifted_{name}.darc1"
            save_dataset(dataset, paths[f"shifted_{name}"])
    (out / "spec.json").write_text(spec.to_json())
    return paths


def cmd_synth(args) -> int:
    if args.spec:
        spec = sy.MixtureSpec.from_json(Path(args.spec).read_text())
        if args.seed is not None:
            spec.seed = args.seed
    else:
        spec = sy.default_spec(args.seed if args.seed is not None else DEFAULT_SYNTH_SEED)
    paths = _write_synth(spec, Path(args.out), args.threads)
    for name, path in paths.items():
        print(f"wrote {name}: {path}")
    return 0


def cmd_stats(args) -> int:
    dataset = load_dataset(args.input)
    mode = CovMode.FULL if args.cov == "full" else CovMode.DIAGONAL
    stats = compute_class_stats(dataset, mode, threads=args.threads)
    payload = {
        "dim": dataset.dim,
        "n": dataset.n,
        "classes": [
            {
                "id": s.class_id,
                "name": dataset.class_names[s.class_id],
                "count": s.count,
                "mean": s.mean.tolist(),
                "cov": s.cov.tolist(),
                "cov_defined": s.cov_defined,
            }
            for s in stats
        ],
    }
    for s in stats:
        print(f"class {s.class_id:>3} ({dataset.class_names[s.class_id]}): n={s.count}")
    if args.eta is not None:
        partition = partition_by_frequency(dataset, args.eta)
        payload["partition"] = {
            "eta": args.eta,
            "common": sorted(partition.common_ids),
            "rare": sorted(partition.rare_ids),
        }
        print(f"common (n > {args.eta}): {sorted(partition.common_ids)}")
        print(f"rare: {sorted(partition.rare_ids)}")
    if args.out:
        Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_calibrate(args) -> int:
    train_ds = load_dataset(args.train)
    aug_ds = load_dataset(args.train_aug)
    config = cal.CalibrationConfig(
        eta=args.eta, k=args.k, n_rare=args.n_rare, n_com=args.n_com, seed=args.seed
    )
    calibrated = cal.build_calibrated_set(train_ds, aug_ds, config, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cal.save_calibrated(calibrated, out / "calibrated.darc1")
    print(f"wrote {out / 'calibrated.darc1'} ({calibrated.n} rows)")
    return 0


def cmd_train(args) -> int:
    calibrated = cal.load_calibrated(args.calibrated)
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        section = raw.get("training", raw) if isinstance(raw, dict) else {}
        config = _build_section(hd.TrainConfig, section, "training")
        if args.seed is not None:
            config.seed = args.seed
    else:
        config = hd.TrainConfig(
            n_max=args.epochs,
            lr_max=args.lr,
            lr_min=args.lr_min,
            batch_size=args.batch_size,
            seed=args.seed if args.seed is not None else 0,
        )
    result = hd.train(calibrated, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hd.save_params(result.params, out / "params.darch1")
    (out / "metrics.csv").write_text(hd.metrics_csv(result.metrics))
    if result.metrics:
        last = result.metrics[-1]
        print(
            f"epoch {last.epoch}: loss {last.mean_loss:.4f}, "
            f"balanced accuracy {last.balanced_accuracy:.4f}"
        )
    print(f"wrote {out / 'params.darch1'}")
    return 0


def cmd_eval(args) -> int:
    params = hd.load_params(args.params)
    dataset = load_dataset(args.data)
    partition = None
    if args.train:
        train_ds = load_dataset(args.train)
        _check_same_table(train_ds, args.train, dataset, args.data)
        partition = partition_by_frequency(train_ds, args.eta)
    report = evaluate(params, dataset, partition)
    print(report.render_table(dataset.class_names))
    if args.out:
        Path(args.out).write_text(report.to_json())
    return 0


def cmd_pipeline(args) -> int:
    if bool(args.config) == bool(args.synth):
        raise ConfigError("pipeline needs exactly one of --config or --synth")
    if args.config:
        config = load_pipeline_config(Path(args.config))
        if args.out:
            config.out = Path(args.out)
        if args.seed is not None:
            config.calibration.seed = args.seed
            config.training.seed = args.seed
    else:
        seed = args.seed if args.seed is not None else DEFAULT_SYNTH_SEED
        out = Path(args.out) if args.out else Path("pipeline_out")
        spec = sy.default_spec(seed)
        paths = _write_synth(spec, out / "data", args.threads)
        config = PipelineConfig(
            train=paths["train"],
            train_aug=paths["train_aug"],
            val=paths["val"],
            test=paths["test"],
            cross_modality=[paths["shifted_test"]],
            calibration=desk_calibration_config(seed),
            training=desk_training_config(seed),
            out=out,
        )
    run_pipeline(config, threads=args.threads)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="darc",
        description="Latent-space feature calibration and attention-gated classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark datasets")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spec", help="mixture spec JSON (defaults to the built-in spec)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="per-class statistics of a DARC1 file")
    p.add_argument("--input", required=True)
    p.add_argument("--cov", choices=["diagonal", "full"], default="diagonal")
    p.add_argument("--eta", type=int, default=None, help="also print the common/rare split")
    p.add_argument("--out", help="write the statistics as JSON")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("calibrate", help="build the calibrated training set")
    p.add_argument("--train", required=True)
    p.add_argument("--train-aug", dest="train_aug", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--eta", type=int, default=400)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--n-rare", dest="n_rare", type=int, default=100)
    p.add_argument("--n-com", dest="n_com", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="train the attention-gated head")
    p.add_argument("--calibrated", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file with a 'training' section")
    p.add_argument("--epochs", type=int, default=1200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-min", dest="lr_min", type=float, default=1e-6)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=256)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained params on a dataset")
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--train", help="training set for the common/rare breakdown")
    p.add_argument("--eta", type=int, default=400)
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run calibrate + train + eval end to end")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--synth", action="store_true", help="use the built-in synthetic spec")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DarcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
