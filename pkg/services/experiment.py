"""
Experiment Orchestration
Experiment files, the training loop, multi-seed LOSO runs, batch-size sweeps,
complexity tables and result files.
"""
import json
import logging
import os
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config.settings import (
    ARCHITECTURE_DEFAULTS,
    METRICS_SCHEMA_VERSION,
    REFERENCE_COMPLEXITY_CONFIG,
    TIOU_THRESHOLDS,
    TRAINING_DEFAULTS,
    runtime_config,
)
from services.autodiff import Tape, Tensor, backward, weighted_cross_entropy
from services.checkpoint import load_checkpoint, save_checkpoint
from services.data_pipeline import (
    Batch,
    LOSOSplit,
    RawRecording,
    WindowConfig,
    WindowedSequence,
    ZScoreNormalizer,
    class_weights,
    load_dataset,
    loso_splits,
    make_batches,
    read_label_map,
    sliding_window,
)
from services.errors import ConfigError, DataError, DivergenceError, NumericError
from services.metrics import (
    MetricsReport,
    SeedAggregate,
    SubjectMetrics,
    aggregate_seeds,
    build_report,
    evaluate_subject,
    normalize_rows,
    unwindow,
    validate_thresholds,
)
from services.models import (
    ComplexityReport,
    HarModel,
    ModelConfig,
    ModelVariant,
    build,
    complexity_of,
    complexity_of_model,
    parse_section,
    predict_proba,
)
from services.optimizer import Adam, LrSchedule

logger = logging.getLogger(__name__)

DEFAULT_SWEEP_BATCHES = [25, 50, 100, 200]


# =====================================================
# EXPERIMENT CONFIG
# =====================================================

class DatasetConfig(BaseModel):
    """CSV files (or directories of CSV files), one per subject"""
    model_config = ConfigDict(extra="forbid")

    paths: List[str]
    sampling_rate: float
    label_map: Optional[Dict[str, int]] = None
    label_map_path: Optional[str] = None
    null_class: Optional[int] = None
    n_classes: Optional[int] = None

    def csv_files(self) -> List[Path]:
        files: List[Path] = []
        for raw in self.paths:
            path = Path(raw)
            if path.is_dir():
                files.extend(sorted(path.glob("*.csv")))
            else:
                files.append(path)
        if not files:
            raise ConfigError("dataset.paths matched no CSV files")
        return files

    def resolved_label_map(self) -> Optional[Dict[str, int]]:
        if self.label_map is not None:
            return self.label_map
        if self.label_map_path is not None:
            return read_label_map(self.label_map_path)
        return None


class ModelSection(BaseModel):
    """Architecture hyperparameters; data-derived sizes are filled in per run"""
    model_config = ConfigDict(extra="forbid")

    variant: ModelVariant = ModelVariant.DCC_LSTM
    # Several variants are trained side by side when set
    variants: List[ModelVariant] = []
    kernel: int = ARCHITECTURE_DEFAULTS["kernel"]
    conv_layers: int = ARCHITECTURE_DEFAULTS["conv_layers"]
    filters: int = ARCHITECTURE_DEFAULTS["filters"]
    lstm_hidden: int = ARCHITECTURE_DEFAULTS["lstm_hidden"]
    lstm_layers: int = ARCHITECTURE_DEFAULTS["lstm_layers"]
    dropout: float = ARCHITECTURE_DEFAULTS["dropout"]
    attn_heads: int = ARCHITECTURE_DEFAULTS["attn_heads"]
    transformer_layers: int = ARCHITECTURE_DEFAULTS["transformer_layers"]
    mlp_ratio: int = ARCHITECTURE_DEFAULTS["mlp_ratio"]
    max_positions: int = ARCHITECTURE_DEFAULTS["max_positions"]

    def selected(self) -> List[ModelVariant]:
        return list(self.variants) or [self.variant]

    def build_config(
        self, variant: ModelVariant, sensor_channels: int, n_classes: int, window_samples: int, seed: int = 0
    ) -> ModelConfig:
        fields = self.model_dump(exclude={"variant", "variants"})
        return ModelConfig(
            sensor_channels=sensor_channels,
            n_classes=n_classes,
            window_samples=window_samples,
            variant=variant,
            seed=seed,
            **fields,
        )


class TrainingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = TRAINING_DEFAULTS["epochs"]
    train_batch: int = TRAINING_DEFAULTS["train_batch"]
    base_lr: float = TRAINING_DEFAULTS["base_lr"]
    decay_factor: float = TRAINING_DEFAULTS["decay_factor"]
    decay_period_epochs: int = TRAINING_DEFAULTS["decay_period_epochs"]
    weight_decay: float = TRAINING_DEFAULTS["weight_decay"]
    decoupled_weight_decay: bool = TRAINING_DEFAULTS["decoupled_weight_decay"]
    seeds: List[int] = list(TRAINING_DEFAULTS["seeds"])
    partial_batch: Literal["keep", "drop"] = TRAINING_DEFAULTS["partial_batch"]
    fold_workers: int = runtime_config.fold_workers

    @model_validator(mode="after")
    def _check(self) -> "TrainingConfig":
        if self.epochs < 1:
            raise ConfigError(f"training.epochs must be >= 1, got {self.epochs}")
        if self.train_batch < 1:
            raise ConfigError(f"training.train_batch must be >= 1, got {self.train_batch}")
        if not self.seeds:
            raise ConfigError("training.seeds must list at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"training.seeds contains duplicates: {self.seeds}")
        if self.weight_decay < 0:
            raise ConfigError(f"training.weight_decay must be >= 0, got {self.weight_decay}")
        if self.fold_workers < 1:
            raise ConfigError(f"training.fold_workers must be >= 1, got {self.fold_workers}")
        self.schedule()
        return self

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.decay_factor, self.decay_period_epochs)


class EvaluationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    thresholds: List[float] = list(TIOU_THRESHOLDS)
    overlap: Literal["last", "majority"] = "last"
    null_in_f1: bool = True
    null_in_map: bool = False

    @model_validator(mode="after")
    def _check(self) -> "EvaluationConfig":
        validate_thresholds(self.thresholds)
        return self


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    dataset: DatasetConfig
    window: WindowConfig
    model: ModelSection = Field(default_factory=ModelSection)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    output_dir: Optional[str] = None

    def eval_batch(self, variant: ModelVariant) -> int:
        """Windows are scored one at a time without inter-window context, in training-sized batches otherwise"""
        return self.training.train_batch if variant.uses_context else 1

    def output_path(self) -> Path:
        return Path(os.getenv("WCTX_OUTPUT_DIR") or self.output_dir or runtime_config.output_dir)

    def window_samples(self) -> int:
        return self.window.window_samples(self.dataset.sampling_rate)

    def with_train_batch(self, batch_size: int) -> "ExperimentConfig":
        training = self.training.model_copy(update={"train_batch": batch_size})
        return self.model_copy(update={"training": training})

    def snapshot(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def parse_experiment(data: Dict[str, Any]) -> ExperimentConfig:
    return parse_section(ExperimentConfig, data, "experiment")


def load_experiment(path: Union[str, Path]) -> ExperimentConfig:
    """Read a TOML experiment file; relative dataset paths resolve against the file's directory"""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"experiment file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    dataset = data.get("dataset")
    if isinstance(dataset, dict):
        dataset["paths"] = [str(path.parent / p) for p in dataset.get("paths", [])]
        if dataset.get("label_map_path"):
            dataset["label_map_path"] = str(path.parent / dataset["label_map_path"])
    config = parse_experiment(data)
    logger.info(f"Loaded experiment '{config.name}' from {path}")
    return config


def load_recordings(config: ExperimentConfig) -> List[RawRecording]:
    return load_dataset(config.dataset.csv_files(), config.dataset.sampling_rate, config.dataset.resolved_label_map())


def infer_n_classes(config: ExperimentConfig, recordings: Sequence[RawRecording]) -> int:
    if config.dataset.n_classes is not None:
        n_classes = config.dataset.n_classes
    else:
        label_map = config.dataset.resolved_label_map()
        observed = max(int(r.labels.max()) for r in recordings) + 1
        n_classes = max(observed, max(label_map.values()) + 1 if label_map else 0)
    for r in recordings:
        if r.labels.min() < 0 or r.labels.max() >= n_classes:
            raise DataError(f"{r.subject_id}: labels outside [0, {n_classes})")
    null = config.dataset.null_class
    if null is not None and not 0 <= null < n_classes:
        raise ConfigError(f"dataset.null_class {null} outside [0, {n_classes})")
    return n_classes


def check_channels(recordings: Sequence[RawRecording]) -> int:
    channels = {r.n_channels for r in recordings}
    if len(channels) != 1:
        raise DataError(f"recordings disagree on channel count: {sorted(channels)}")
    return channels.pop()


# =====================================================
# TRAINING
# =====================================================

class Trainer:
    """Weighted cross-entropy, Adam and the step-decay schedule over time-ordered batches"""

    def __init__(self, model: HarModel, training: TrainingConfig, weights: np.ndarray, tag: str = ""):
        self.model = model
        self.training = training
        self.weights = weights
        self.tag = tag
        self.schedule = training.schedule()
        self.optimizer = Adam(
            model.parameters(),
            weight_decay=training.weight_decay,
            decoupled=training.decoupled_weight_decay,
        )

    def train_step(self, batch: Batch, lr: float, epoch: int) -> float:
        try:
            with Tape() as tape:
                logits = self.model(Tensor(batch.windows))
                loss = weighted_cross_entropy(logits, batch.labels, self.weights)
        except NumericError as e:
            raise DivergenceError(f"{self.tag}: non-finite values in epoch {epoch}: {e}", epoch=epoch, fold=self.tag) from e
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"{self.tag}: loss became {value} in epoch {epoch}", epoch=epoch, fold=self.tag)
        backward(tape, loss)
        self.optimizer.step(lr)
        return value

    def fit(self, batches: Sequence[Batch], epochs: Optional[int] = None) -> List[float]:
        """Train for the configured epochs; returns the window-weighted mean loss per epoch"""
        epochs = epochs or self.training.epochs
        if not batches:
            raise DataError(f"{self.tag}: no training batches")
        self.model.train()
        losses = []
        for epoch in range(epochs):
            lr = self.schedule.lr_at_epoch(epoch)
            total, count = 0.0, 0
            for batch in batches:
                total += self.train_step(batch, lr, epoch) * len(batch)
                count += len(batch)
            losses.append(total / count)
            logger.info(f"[{self.tag}] epoch {epoch + 1}/{epochs} loss={losses[-1]:.4f} lr={lr:.2e}")
        self.model.eval()
        return losses


def predict_sequence(model: HarModel, seq: WindowedSequence, eval_batch: int) -> np.ndarray:
    """Class probabilities [W, n] for every window, scored in consecutive batches"""
    probs = [predict_proba(model, b.windows) for b in make_batches([seq], eval_batch, "keep")]
    return np.concatenate(probs, axis=0)


def evaluate_sequence(
    model: HarModel,
    seq: WindowedSequence,
    config: ExperimentConfig,
    n_classes: int,
    seed: Optional[int] = None,
) -> SubjectMetrics:
    probs = predict_sequence(model, seq, config.eval_batch(model.variant))
    pred = unwindow(seq.ranges, probs, seq.n_samples, overlap=config.evaluation.overlap)
    ev = config.evaluation
    return evaluate_subject(
        seq.subject_id,
        pred,
        seq.sample_labels,
        n_classes,
        thresholds=ev.thresholds,
        null_class=config.dataset.null_class,
        null_in_f1=ev.null_in_f1,
        null_in_map=ev.null_in_map,
        seed=seed,
    )


def fold_seeds(seed: int, fold_index: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for weight init and dropout masks of one (seed, fold) pair"""
    init_seq, dropout_seq = np.random.SeedSequence([seed, fold_index]).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(dropout_seq)


def prepare_fold(
    recordings: Sequence[RawRecording], split: LOSOSplit, window: WindowConfig
) -> Tuple[List[WindowedSequence], WindowedSequence, ZScoreNormalizer]:
    """Normalize with training-subject statistics, then window every subject"""
    by_subject = {r.subject_id: r for r in recordings}
    train = [by_subject[s] for s in split.train_subjects]
    normalizer = ZScoreNormalizer().fit(train)
    train_seqs = [sliding_window(normalizer.transform(r), window) for r in train]
    test_seq = sliding_window(normalizer.transform(by_subject[split.held_out_subject]), window)
    return train_seqs, test_seq, normalizer


class RunRecord(BaseModel):
    """One trained and evaluated (variant, seed, fold)"""
    variant: str
    seed: int
    fold: str
    fold_index: int
    config: Dict[str, Any]
    epoch_losses: List[float]
    metrics: SubjectMetrics
    wall_clock_seconds: float
    complexity: ComplexityReport


@dataclass
class FoldJob:
    config: ExperimentConfig
    variant: ModelVariant
    seed: int
    fold_index: int
    split: LOSOSplit
    recordings: List[RawRecording]
    n_classes: int


def run_fold(job: FoldJob) -> RunRecord:
    """Train on the split's training subjects and score the held-out subject"""
    started = time.perf_counter()
    config = job.config
    tag = f"{job.variant.value} seed={job.seed} fold={job.split.held_out_subject}"
    logger.info(f"[{tag}] fold start, training on {len(job.split.train_subjects)} subjects")

    train_seqs, test_seq, _ = prepare_fold(job.recordings, job.split, config.window)
    batches = make_batches(train_seqs, config.training.train_batch, config.training.partial_batch)
    weights = class_weights(np.concatenate([s.labels for s in train_seqs]), job.n_classes)

    init_rng, dropout_rng = fold_seeds(job.seed, job.fold_index)
    model_config = config.model.build_config(
        job.variant, check_channels(job.recordings), job.n_classes, config.window_samples(), job.seed
    )
    model = build(model_config, init_rng)
    model.reseed_dropout(dropout_rng)

    losses = Trainer(model, config.training, weights, tag).fit(batches)
    metrics = evaluate_sequence(model, test_seq, config, job.n_classes, seed=job.seed)
    complexity = complexity_of_model(
        model, config.eval_batch(job.variant), config.window.window_seconds, config.window.overlap_seconds
    )
    elapsed = time.perf_counter() - started
    logger.info(f"[{tag}] fold end: macro-F1={metrics.macro_f1:.4f} mAP={metrics.map} ({elapsed:.1f}s)")
    return RunRecord(
        variant=job.variant.value,
        seed=job.seed,
        fold=job.split.held_out_subject,
        fold_index=job.fold_index,
        config=config.snapshot(),
        epoch_losses=losses,
        metrics=metrics,
        wall_clock_seconds=elapsed,
        complexity=complexity,
    )


# =====================================================
# LOSO
# =====================================================

class VariantSummary(BaseModel):
    variant: str
    reports: Dict[str, MetricsReport]  # keyed by seed
    aggregate: SeedAggregate
    confusion: List[List[int]]


class LosoResult(BaseModel):
    schema_version: str = METRICS_SCHEMA_VERSION
    experiment: str
    config: Dict[str, Any]
    variants: List[VariantSummary]
    runs: List[RunRecord] = []

    def summary(self, variant: Union[str, ModelVariant]) -> VariantSummary:
        name = variant.value if isinstance(variant, ModelVariant) else variant
        for v in self.variants:
            if v.variant == name:
                return v
        raise KeyError(name)

    def metrics_json(self) -> str:
        """Deterministic metrics document; run timings are left out"""
        return json.dumps(self.model_dump(mode="json", exclude={"runs"}), indent=2, sort_keys=True)


def run_loso(
    config: ExperimentConfig,
    recordings: Optional[Sequence[RawRecording]] = None,
    workers: Optional[int] = None,
) -> LosoResult:
    """
    Every selected variant x seed x held-out subject, then reports per seed and
    the seed aggregate. A DivergenceError in any fold ends the run.
    """
    recordings = list(recordings) if recordings is not None else load_recordings(config)
    n_classes = infer_n_classes(config, recordings)
    check_channels(recordings)
    splits = loso_splits(recordings)
    variants = config.model.selected()

    jobs = [
        FoldJob(config, variant, seed, fold_index, split, recordings, n_classes)
        for variant in variants
        for seed in config.training.seeds
        for fold_index, split in enumerate(splits)
    ]
    workers = workers or config.training.fold_workers
    logger.info(f"Running {len(jobs)} folds ({len(variants)} variants, {len(config.training.seeds)} seeds, {len(splits)} subjects)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(run_fold, jobs))
    else:
        runs = [run_fold(job) for job in jobs]

    summaries = []
    thresholds = config.evaluation.thresholds
    for variant in variants:
        reports: Dict[int, MetricsReport] = {}
        for seed in config.training.seeds:
            subjects = [r.metrics for r in runs if r.variant == variant.value and r.seed == seed]
            reports[seed] = build_report(subjects, n_classes, thresholds, config.dataset.null_class)
        confusion = np.sum([np.asarray(rep.confusion, dtype=np.int64) for rep in reports.values()], axis=0)
        aggregate = aggregate_seeds(reports)
        logger.info(f"{variant.value}: macro-F1={aggregate.macro_f1} mAP={aggregate.map} over seeds {aggregate.seeds}")
        summaries.append(
            VariantSummary(
                variant=variant.value,
                reports={str(seed): rep for seed, rep in reports.items()},
                aggregate=aggregate,
                confusion=confusion.tolist(),
            )
        )
    return LosoResult(experiment=config.name, config=config.snapshot(), variants=summaries, runs=runs)


def write_results(result: LosoResult, output_dir: Union[str, Path]) -> Dict[str, Path]:
    """metrics.json, runs.json, loss_curves.csv and confusion CSVs per variant"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = {"metrics": output_dir / "metrics.json", "runs": output_dir / "runs.json"}
    written["metrics"].write_text(result.metrics_json())
    written["runs"].write_text(
        json.dumps([r.model_dump(mode="json") for r in result.runs], indent=2, sort_keys=True)
    )

    curves = pd.DataFrame(
        [
            {"variant": r.variant, "seed": r.seed, "fold": r.fold, "epoch": e + 1, "loss": loss}
            for r in result.runs
            for e, loss in enumerate(r.epoch_losses)
        ],
        columns=["variant", "seed", "fold", "epoch", "loss"],
    )
    written["loss_curves"] = output_dir / "loss_curves.csv"
    curves.to_csv(written["loss_curves"], index=False)

    for summary in result.variants:
        confusion = np.asarray(summary.confusion)
        labels = [f"class_{c}" for c in range(confusion.shape[0])]
        counts = output_dir / f"confusion_{summary.variant}.csv"
        pd.DataFrame(confusion, index=labels, columns=labels).to_csv(counts, index_label="truth")
        normalized = output_dir / f"confusion_{summary.variant}_normalized.csv"
        pd.DataFrame(normalize_rows(confusion), index=labels, columns=labels).to_csv(normalized, index_label="truth")
        written[f"confusion_{summary.variant}"] = counts
        written[f"confusion_{summary.variant}_normalized"] = normalized
    logger.info(f"Wrote results to {output_dir}")
    return written


# =====================================================
# SWEEP AND COMPLEXITY
# =====================================================

class SweepRow(BaseModel):
    batch_size: int
    variant: str
    context_length_seconds: float
    macro_f1: Optional[float]
    map: Optional[float]


class SweepReport(BaseModel):
    schema_version: str = METRICS_SCHEMA_VERSION
    experiment: str
    rows: List[SweepRow]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.rows])


def run_batch_sweep(
    config: ExperimentConfig,
    batch_sizes: Sequence[int] = DEFAULT_SWEEP_BATCHES,
    recordings: Optional[Sequence[RawRecording]] = None,
) -> SweepReport:
    """One LOSO run per train/test batch size"""
    if not batch_sizes or any(b < 1 for b in batch_sizes):
        raise ConfigError(f"sweep batch sizes must be >= 1, got {list(batch_sizes)}")
    recordings = list(recordings) if recordings is not None else load_recordings(config)
    w, o = config.window.window_seconds, config.window.overlap_seconds
    rows = []
    for batch_size in batch_sizes:
        for variant in config.model.selected():
            if batch_size == 1 and variant.uses_context:
                logger.warning(f"{variant.value} at batch size 1: context length = single window")
        result = run_loso(config.with_train_batch(batch_size), recordings)
        for summary in result.variants:
            variant = ModelVariant(summary.variant)
            context = batch_size * (w - o) if variant.uses_context else w
            rows.append(
                SweepRow(
                    batch_size=batch_size,
                    variant=summary.variant,
                    context_length_seconds=context,
                    macro_f1=summary.aggregate.macro_f1,
                    map=summary.aggregate.map,
                )
            )
    return SweepReport(experiment=config.name, rows=rows)


def complexity_table(
    base: ModelConfig,
    batch: int,
    window_seconds: float,
    overlap_seconds: float,
    variants: Optional[Sequence[ModelVariant]] = None,
) -> List[ComplexityReport]:
    """Parameters, FLOPs, memory and context length for each variant at one configuration"""
    rows = []
    for variant in variants or list(ModelVariant):
        rows.append(complexity_of(base.model_copy(update={"variant": variant}), batch, window_seconds, overlap_seconds))
    return rows


def reference_complexity() -> List[ComplexityReport]:
    ref = REFERENCE_COMPLEXITY_CONFIG
    base = ModelConfig(
        sensor_channels=ref["sensor_channels"],
        n_classes=ref["n_classes"],
        window_samples=ref["window_samples"],
        kernel=ref["kernel"],
        lstm_layers=ref["lstm_layers"],
        attn_heads=ref["attn_heads"],
    )
    return complexity_table(base, ref["batch"], ref["window_seconds"], ref["overlap_seconds"])


def complexity_report(
    config: ExperimentConfig, recordings: Optional[Sequence[RawRecording]] = None
) -> List[ComplexityReport]:
    """Complexity of every variant at the experiment's data shape and training batch size"""
    recordings = list(recordings) if recordings is not None else load_recordings(config)
    base = config.model.build_config(
        config.model.variant, check_channels(recordings), infer_n_classes(config, recordings), config.window_samples()
    )
    return complexity_table(
        base, config.training.train_batch, config.window.window_seconds, config.window.overlap_seconds
    )


def complexity_frame(rows: Sequence[ComplexityReport]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in rows])


# =====================================================
# TRAIN / EVALUATE ON FIXED SUBJECT SETS
# =====================================================

def train_full(
    config: ExperimentConfig,
    recordings: Optional[Sequence[RawRecording]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> Tuple[HarModel, List[float]]:
    """Train the first selected variant on every subject with the first seed and save a checkpoint"""
    recordings = list(recordings) if recordings is not None else load_recordings(config)
    n_classes = infer_n_classes(config, recordings)
    variant = config.model.selected()[0]
    seed = config.training.seeds[0]

    normalizer = ZScoreNormalizer().fit(recordings)
    seqs = [sliding_window(normalizer.transform(r), config.window) for r in recordings]
    batches = make_batches(seqs, config.training.train_batch, config.training.partial_batch)
    weights = class_weights(np.concatenate([s.labels for s in seqs]), n_classes)

    init_rng, dropout_rng = fold_seeds(seed, 0)
    model = build(
        config.model.build_config(variant, check_channels(recordings), n_classes, config.window_samples(), seed),
        init_rng,
    )
    model.reseed_dropout(dropout_rng)
    losses = Trainer(model, config.training, weights, f"{variant.value} seed={seed} all-subjects").fit(batches)

    directory = Path(checkpoint_dir) if checkpoint_dir is not None else config.output_path() / "checkpoint"
    save_checkpoint(
        model,
        directory,
        metadata={
            "normalizer_mean": normalizer.mean.tolist(),
            "normalizer_std": normalizer.std.tolist(),
            "train_batch": config.training.train_batch,
            "subjects": [r.subject_id for r in recordings],
        },
    )
    return model, losses


def evaluate_checkpoint(
    config: ExperimentConfig,
    checkpoint_dir: Union[str, Path],
    recordings: Optional[Sequence[RawRecording]] = None,
) -> MetricsReport:
    """Score a saved model on recordings, normalized with the statistics stored at training time"""
    model, metadata = load_checkpoint(checkpoint_dir)
    trained_samples, window_samples = model.config.window_samples, config.window_samples()
    if trained_samples != window_samples:
        raise ConfigError(
            f"checkpoint {checkpoint_dir} was trained on {trained_samples}-sample windows, "
            f"the experiment cuts {window_samples}-sample windows"
        )
    recordings = list(recordings) if recordings is not None else load_recordings(config)
    channels = check_channels(recordings)
    if channels != model.config.sensor_channels:
        raise DataError(
            f"checkpoint expects {model.config.sensor_channels} channels, recordings have {channels}",
            path=checkpoint_dir,
        )
    if "normalizer_mean" not in metadata:
        raise DataError("checkpoint carries no normalization statistics", path=checkpoint_dir)
    normalizer = ZScoreNormalizer(np.asarray(metadata["normalizer_mean"]), np.asarray(metadata["normalizer_std"]))
    n_classes = model.config.n_classes
    # The batch the model was trained with drives context variants at test time
    eval_config = config.with_train_batch(int(metadata.get("train_batch", config.training.train_batch)))
    subjects = [
        evaluate_sequence(model, sliding_window(normalizer.transform(r), config.window), eval_config, n_classes)
        for r in recordings
    ]
    return build_report(subjects, n_classes, config.evaluation.thresholds, config.dataset.null_class)


def write_json(model: BaseModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.model_dump(mode="json"), indent=2, sort_keys=True))
    return path
