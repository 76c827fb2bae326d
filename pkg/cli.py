"""
cli.py - experiment harness: generate, train, evaluate and report.

Every command writes into a fresh timestamped directory under --out so a
finished run directory is never modified again.
"""

import argparse
import json
import os
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import yaml
from dotenv import load_dotenv
from loguru import logger
from sklearn.decomposition import PCA

import metrics
import plots
from attack import AttackError, AttackSpec, VictimStrategy, build_attack, clean_vs_adv_eval
from history import HistoryWriter, read_history, step_records
from losses import make_objective
from mingre import (EncoderConfig, Lambdas, ReweighterState, attention_summary, build_generator, load_reweighter,
                    save_reweighter)
from stmodel import (RegressorConfig, ShapeError, SpatioTemporalRegressor, build_regressor, predict,
                     read_checkpoint, save_checkpoint)
from trainer import Resume, TrainConfig, TrainingData, TrainingDivergedError, TrainMode, train
from util import config_hash, configure_threads, environment_stamp, seed_everything, setup_logging
from zidata import (FeatureScaler, SeriesDataset, SegmentBatch, ZIDataError, class_partition,
                    generate_synthetic_zid, load_dataset, save_dataset, split_dataset, standardize, window)


EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_HASH_MISMATCH = 3

GRADIENT_FIELDS = ("grad_raw_minority", "grad_raw_majority", "grad_hat_minority", "grad_hat_majority")


class ConfigError(ValueError):
    pass


class BundleError(RuntimeError):
    pass


class HashMismatchError(BundleError):
    pass


# -- configuration ---------------------------------------------------------------

@dataclass
class SyntheticSection:
    num_nodes: int = 16
    length: int = 512
    feature_dim: int = 3
    zero_rate: float = 0.9

    def __post_init__(self):
        if not 0.5 <= self.zero_rate <= 0.99:
            raise ValueError(f"zero_rate out of range: {self.zero_rate} not in [0.5, 0.99]")
        if self.num_nodes < 4 or self.length < 64 or self.feature_dim < 1:
            raise ValueError(f"synthetic dataset needs num_nodes >= 4, length >= 64, feature_dim >= 1: {self}")


@dataclass
class DatasetSection:
    synthetic: Optional[SyntheticSection] = None
    path: Optional[str] = None
    history: int = 8
    horizon: int = 2
    stride: int = 1
    split: List[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])

    def __post_init__(self):
        if (self.synthetic is None) == (self.path is None):
            raise ValueError("exactly one of 'synthetic' or 'path' must be given")
        if min(self.history, self.horizon, self.stride) < 1:
            raise ValueError(f"history, horizon and stride must be >= 1, got "
                             f"{self.history}, {self.horizon}, {self.stride}")
        if len(self.split) != 3:
            raise ValueError(f"split needs three ratios (train, val, test), got {self.split}")


@dataclass
class ModelSection:
    hidden_dim: int = 32
    num_gc_layers: int = 1
    recurrent_dim: int = 32
    dropout: float = 0.0
    view_gate: bool = False


@dataclass
class MinGRESection:
    model_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    dropout: float = 0.0
    learning_rate: float = 1e-3
    lambdas: List[float] = field(default_factory=lambda: [1.0, 1.0, 0.01, 0.01])
    use_encoder: bool = True
    use_reweighting: bool = True
    stage_order: List[str] = field(default_factory=lambda: ["segment", "temporal", "spatial"])

    def __post_init__(self):
        Lambdas.from_list(self.lambdas)
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class MetricSection:
    decimals: int = 4

    def __post_init__(self):
        if not 0 <= self.decimals <= 10:
            raise ValueError(f"decimals must be in [0, 10], got {self.decimals}")


@dataclass
class ExperimentConfig:
    dataset: DatasetSection
    train: TrainConfig
    model: ModelSection = field(default_factory=ModelSection)
    mingre: MinGRESection = field(default_factory=MinGRESection)
    attacks: List[AttackSpec] = field(default_factory=list)
    metrics: MetricSection = field(default_factory=MetricSection)
    output_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        names = [spec.name for spec in self.attacks]
        if len(set(names)) != len(names):
            raise ValueError(f"attack names must be unique, got {names}")
        if "clean" in names:
            raise ValueError("'clean' is reserved for the unattacked row")
        self.train.seed = self.seed

    def to_json(self):
        train = self.train.to_json()
        train.pop("seed")
        return {
            "dataset": asdict(self.dataset),
            "train": train,
            "model": asdict(self.model),
            "mingre": asdict(self.mingre),
            "attacks": [spec.to_json() for spec in self.attacks],
            "metrics": asdict(self.metrics),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


# keys that determine the trained weights; attacks, metrics and output do not
HASHED_SECTIONS = ("dataset", "model", "train", "mingre", "seed")
EXCLUDED_KEYS = {TrainConfig: {"seed"}}


def experiment_hash(config_json) -> str:
    """Hash of the weight-determining sections. train.epochs is left out so a resume may extend a run."""
    hashed = {key: config_json[key] for key in HASHED_SECTIONS}
    hashed["train"] = {k: v for k, v in hashed["train"].items() if k != "epochs"}
    return config_hash(hashed)


def _type_name(tp):
    return getattr(tp, "__name__", str(tp))


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if value is None:
            return None
        return _coerce(inner[0], value, where)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return [_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin in (tuple, Tuple):
        if not isinstance(value, list) or len(value) != len(args):
            raise ConfigError(f"{where}: expected a list of {len(args)} values, got {value!r}")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if is_dataclass(tp):
        return _build(tp, value, where)
    if isinstance(tp, type) and issubclass(tp, Enum):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {type(value).__name__}")
        try:
            return tp.from_string(value)
        except ValueError as e:
            raise ConfigError(f"{where}: {e}") from e
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported option type {_type_name(tp)}")


def _build(cls, data, where):
    """
    Instantiate a config dataclass from a mapping. Unknown keys and wrong
    types are errors; keys left out take the dataclass default.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    allowed = {f.name: f for f in fields(cls) if f.init and f.name not in EXCLUDED_KEYS.get(cls, set())}
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, f in allowed.items():
        if name in data:
            kwargs[name] = _coerce(hints[name], data[name], f"{where}.{name}")
        elif f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(f"{where}: missing required key '{name}'")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_mapping(data, seed=None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    data = dict(data)
    if seed is not None:
        data["seed"] = seed
    return _build(ExperimentConfig, data, "config")


def load_config(path, seed=None) -> ExperimentConfig:
    """Parse and validate a YAML experiment config; --seed overrides the file's seed."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    config = config_from_mapping(data or {}, seed)
    logger.info(f"Loaded config {path} (mode={config.train.mode}, seed={config.seed})")
    return config


# -- results bundle -----------------------------------------------------------------

@dataclass
class ResultsBundle:
    config: Dict[str, Any]
    config_hash: str
    mode: str
    rows: List[Dict[str, Any]] = field(default_factory=list)
    history: Optional[str] = None
    checkpoint: Optional[str] = None
    embeddings: Optional[str] = None
    attention: Optional[str] = None
    silhouette: Optional[Dict[str, float]] = None
    environment: Dict[str, Any] = field(default_factory=dict)

    def references(self) -> Dict[str, str]:
        refs = {"history": self.history, "checkpoint": self.checkpoint,
                "embeddings": self.embeddings, "attention": self.attention}
        return {name: ref for name, ref in refs.items() if ref is not None}

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, data):
        try:
            return cls(**data)
        except TypeError as e:
            raise BundleError(f"malformed results bundle: {e}") from e


def write_bundle(directory, bundle: ResultsBundle) -> str:
    path = os.path.join(directory, "results.json")
    with open(path, "w") as f:
        json.dump(bundle.to_json(), f, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
    logger.success(f"Results bundle written to {path}")
    return path


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def read_bundle(path) -> Tuple[ResultsBundle, str]:
    """
    Load and validate results.json (or the directory holding it).

    Returns:
        (bundle, directory of the bundle) with every reference checked
    """
    if os.path.isdir(path):
        path = os.path.join(path, "results.json")
    if not os.path.exists(path):
        raise BundleError(f"no results bundle at {path}")
    with open(path) as f:
        bundle = ResultsBundle.from_json(json.load(f))
    directory = os.path.dirname(os.path.abspath(path))
    if experiment_hash(bundle.config) != bundle.config_hash:
        raise BundleError(f"bundle {path} config hash does not match its embedded config")
    for name, ref in bundle.references().items():
        if not os.path.exists(os.path.join(directory, ref)):
            raise BundleError(f"bundle {path} references missing {name} file {ref}")
    return bundle, directory


def _finite_or_none(report_json):
    """NaN metrics (no defined instants) become null in the bundle."""
    def clean(value):
        if isinstance(value, float) and not np.isfinite(value):
            return None
        return value
    return {part: {k: clean(v) for k, v in values.items()} for part, values in report_json.items()}


def report_row(mode, attack, report: metrics.MetricReport, decimals=4):
    return {"mode": mode, "attack": attack, **_finite_or_none(report.to_json(decimals))}


# -- pipeline pieces ---------------------------------------------------------------

@dataclass
class PreparedData:
    dataset: SeriesDataset
    train: List[SegmentBatch]
    val: List[SegmentBatch]
    test: List[SegmentBatch]
    scaler: FeatureScaler


def build_dataset(config: ExperimentConfig) -> SeriesDataset:
    section = config.dataset
    if section.path is not None:
        return load_dataset(section.path)
    s = section.synthetic
    return generate_synthetic_zid(s.num_nodes, s.length, s.feature_dim, s.zero_rate, config.seed)


def prepare_data(config: ExperimentConfig) -> PreparedData:
    """Load or generate, split chronologically, standardize on train, window into batches."""
    section = config.dataset
    dataset = build_dataset(config)
    try:
        parts = split_dataset(dataset, section.split)
    except ZIDataError as e:
        raise ConfigError(f"config.dataset.split: {e}") from e
    for name, part in zip(("train", "val", "test"), parts):
        if part.length < section.history + section.horizon:
            raise ZIDataError(f"{name} split has {part.length} steps, fewer than T + Δ = "
                              f"{section.history + section.horizon}")
    (train_set, val_set, test_set), scaler = standardize(*parts)
    batch_size = config.train.batch_size

    def cut(part):
        return window(part, section.history, section.horizon, section.stride, batch_size)

    return PreparedData(dataset, cut(train_set), cut(val_set), cut(test_set), scaler)


def regressor_config(config: ExperimentConfig, dataset: SeriesDataset) -> RegressorConfig:
    m = config.model
    return RegressorConfig(input_dim=dataset.feature_dim, num_nodes=dataset.num_nodes,
                           history=config.dataset.history, horizon=config.dataset.horizon,
                           hidden_dim=m.hidden_dim, num_gc_layers=m.num_gc_layers,
                           recurrent_dim=m.recurrent_dim, dropout=m.dropout, view_gate=m.view_gate,
                           num_views=dataset.graph.num_views, seed=config.seed)


def reweighter_state(config: ExperimentConfig, dataset: SeriesDataset) -> ReweighterState:
    g = config.mingre
    encoder = EncoderConfig(input_dim=dataset.feature_dim, model_dim=g.model_dim, num_heads=g.num_heads,
                            ffn_dim=g.ffn_dim, dropout=g.dropout, use_encoder=g.use_encoder,
                            seed=config.seed, stage_order=list(g.stage_order))
    return ReweighterState.create(encoder, Lambdas.from_list(g.lambdas), g.learning_rate, g.use_reweighting)


def new_run_dir(out, verb) -> str:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    base = os.path.join(out, f"{stamp}-{verb}")
    path, suffix = base, 1
    while os.path.exists(path):
        path = f"{base}-{suffix}"
        suffix += 1
    os.makedirs(path)
    return path


def write_config_snapshot(directory, config: ExperimentConfig):
    with open(os.path.join(directory, "config.yaml"), "w") as f:
        yaml.safe_dump(config.to_json(), f, sort_keys=True)


def _check_hash(found, expected, what, force):
    if found == expected:
        return
    message = f"{what} was produced by a different config (hash {str(found)[:12]} != {expected[:12]})"
    if not force:
        raise HashMismatchError(message + "; pass --force to continue anyway")
    logger.warning(message + "; continuing because of --force")


# -- commands ------------------------------------------------------------------------

def cmd_generate(config: ExperimentConfig, out) -> str:
    """Write the configured synthetic dataset into a new directory and print its zero rate."""
    if config.dataset.synthetic is None:
        raise ConfigError("config.dataset: generate needs a 'synthetic' section")
    dataset = build_dataset(config)
    path = save_dataset(dataset, new_run_dir(out, "dataset"))
    print(f"{path}\tzero_rate={dataset.zero_rate:.4f}")
    return path


def cmd_train(config: ExperimentConfig, out, resume=None, force=False) -> str:
    """
    Train in the configured mode. The run directory receives model.pt (best
    epoch), history.jsonl, config.yaml, a results.json stub and, for MinGRE,
    reweighter.pt.

    Args:
        resume: Optional earlier train run directory; its history is carried
            over and training continues after its last epoch
    """
    data = prepare_data(config)
    config_json = config.to_json()
    digest = experiment_hash(config_json)
    model = build_regressor(regressor_config(config, data.dataset))
    state = reweighter_state(config, data.dataset) if config.train.mode is TrainMode.MINGRE else None

    records, resume_point = [], None
    if resume is not None:
        blob, meta = read_checkpoint(resume)
        _check_hash(meta.get("experiment_hash"), digest, f"checkpoint {resume}", force)
        model.load_state_dict(blob["model"])
        history_path = os.path.join(resume, "history.jsonl")
        records = read_history(history_path) if os.path.exists(history_path) else []
        start_epoch = max((r.epoch for r in records), default=meta.get("epoch", -1)) + 1
        resume_point = Resume(start_epoch, blob.get("optimizer"))
        if state is not None:
            state = load_reweighter(resume, config.mingre.learning_rate)
        logger.info(f"Resuming from {resume} at epoch {start_epoch} with {len(records)} history records")

    run_dir = new_run_dir(out, "train")
    write_config_snapshot(run_dir, config)
    checkpoint_meta = {"experiment_hash": digest, "mode": config.train.mode.to_json(),
                       "scaler": data.scaler.to_json()}
    with HistoryWriter(os.path.join(run_dir, "history.jsonl"), records) as history:
        result = train(model, TrainingData(data.train, data.val, data.dataset.graph), config.train,
                       reweighter=state, history=history, run_dir=run_dir,
                       checkpoint_meta=checkpoint_meta, resume=resume_point)

    if not os.path.exists(os.path.join(run_dir, "model.pt")):
        # nothing improved (or nothing left to run after a resume): keep the restored weights
        meta = dict(checkpoint_meta, seed=config.seed, epoch=result.best_epoch)
        save_checkpoint(run_dir, result.model, meta, result.optimizer)
        if result.reweighter is not None:
            save_reweighter(run_dir, result.reweighter, meta)

    bundle = ResultsBundle(config=config_json, config_hash=digest, mode=config.train.mode.to_json(),
                           history="history.jsonl", checkpoint="model.pt", environment=environment_stamp())
    write_bundle(run_dir, bundle)
    logger.success(f"Training finished: best epoch {result.best_epoch}, val Rec-min {result.best_rec_min:.4f}")
    return run_dir


def _load_model(blob, meta) -> SpatioTemporalRegressor:
    model = SpatioTemporalRegressor(RegressorConfig(**meta["config"]))
    model.load_state_dict(blob["model"])
    return model


def clean_predictions(model, batches: List[SegmentBatch], graph):
    """Stacked clean predictions, labels, embeddings, minority labels and mean α̂ over a split."""
    yhat, labels, embeddings, minority, alpha = [], [], [], [], []
    with torch.no_grad():
        for batch in batches:
            pred = predict(model, batch.X, graph)
            yhat.append(pred.yhat)
            labels.append(batch.Y)
            embeddings.append(pred.embedding)
            minority.append(class_partition(batch).minority_mask)
            alpha.append(pred.nb.alpha.mean(dim=1))
    return {
        "yhat": torch.cat(yhat), "labels": torch.cat(labels), "embedding": torch.cat(embeddings),
        "minority": torch.cat(minority), "alpha": torch.cat(alpha),
    }


def format_table(rows) -> str:
    header = f"{'mode':<12} {'attack':<20} {'Rec-maj':>9} {'Rec-min':>9} {'MAP-maj':>9} {'MAP-min':>9} " \
             f"{'Rec-D':>9} {'MAP-D':>9}"
    lines = [header]
    for row in rows:
        d = row["display"]
        cells = [d[k] for k in ("Rec-maj", "Rec-min", "MAP-maj", "MAP-min", "Rec-D", "MAP-D")]
        lines.append(f"{row['mode']:<12} {row['attack']:<20} " +
                     " ".join(f"{c:>9.4f}" if c is not None else f"{'n/a':>9}" for c in cells))
    return "\n".join(lines)


def cmd_evaluate(config: ExperimentConfig, checkpoint, out, force=False, workers=1) -> str:
    """
    Clean metrics plus metrics under every configured attack on the test
    split, one row per (mode, attack). Attacks run in parallel over a
    read-only model.

    Raises:
        HashMismatchError: checkpoint was trained from a different config and force is off
    """
    blob, meta = read_checkpoint(checkpoint)
    config_json = config.to_json()
    digest = experiment_hash(config_json)
    _check_hash(meta.get("experiment_hash"), digest, f"checkpoint {checkpoint}", force)

    model = _load_model(blob, meta)
    model.eval()
    model.requires_grad_(False)
    data = prepare_data(config)
    graph = data.dataset.graph
    objective = make_objective(config.train.loss, config.train.adv_loss, config.train.weight_rule)
    state = None
    if os.path.exists(os.path.join(checkpoint, "reweighter.pt")):
        state = load_reweighter(checkpoint, config.mingre.learning_rate)
        state.reweighter.eval()
        state.reweighter.requires_grad_(False)
    mode = meta.get("mode", config.train.mode.to_json())
    decimals = config.metrics.decimals
    seed_everything(config.seed)

    clean = clean_predictions(model, data.test, graph)
    rows = [report_row(mode, "clean", metrics.evaluate(clean["yhat"], clean["labels"]), decimals)]

    def run(spec: AttackSpec):
        if spec.strategy is VictimStrategy.MINGRE:
            if state is None:
                logger.warning(f"Attack {spec.name} skipped: checkpoint {checkpoint} has no reweighter")
                return None
            generator = build_generator(state, spec, objective)
        else:
            generator = build_attack(spec, objective)
        evaluation = clean_vs_adv_eval(model, data.test, graph, spec, objective, generator)
        return evaluation.reports()[1]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        reports = list(pool.map(run, config.attacks))
    for spec, report in zip(config.attacks, reports):
        if report is not None:
            rows.append(report_row(mode, spec.name, report, decimals))

    run_dir = new_run_dir(out, "evaluate")
    write_config_snapshot(run_dir, config)
    np.savez(os.path.join(run_dir, "embeddings.npz"), embedding=clean["embedding"].numpy(),
             minority=clean["minority"].numpy(), alpha=clean["alpha"].numpy())
    attention_ref = None
    if state is not None:
        np.savez(os.path.join(run_dir, "attention.npz"), **attention_summary(state.reweighter, data.test))
        attention_ref = "attention.npz"
    silhouette = metrics.class_silhouette(clean["embedding"], clean["minority"])

    history_path = os.path.join(checkpoint, "history.jsonl")
    bundle = ResultsBundle(
        config=config_json, config_hash=digest, mode=mode, rows=rows,
        history=os.path.relpath(history_path, run_dir) if os.path.exists(history_path) else None,
        checkpoint=os.path.relpath(os.path.join(checkpoint, "model.pt"), run_dir),
        embeddings="embeddings.npz", attention=attention_ref,
        silhouette={k: (v if np.isfinite(v) else None) for k, v in silhouette.items()},
        environment=environment_stamp(),
    )
    path = write_bundle(run_dir, bundle)
    table = format_table(rows)
    logger.info(f"Evaluation of {checkpoint}:\n{table}")
    print(table)
    return path


def _report_recall(bundle: ResultsBundle, bundle_dir):
    frame = pd.DataFrame([{
        "mode": row["mode"], "attack": row["attack"],
        "rec_maj": row["display"]["Rec-maj"], "rec_min": row["display"]["Rec-min"],
        "map_maj": row["display"]["MAP-maj"], "map_min": row["display"]["MAP-min"],
    } for row in bundle.rows], columns=["mode", "attack", "rec_maj", "rec_min", "map_maj", "map_min"])
    return frame


def _report_gradients(bundle: ResultsBundle, bundle_dir):
    records = step_records(read_history(os.path.join(bundle_dir, bundle.history)))
    rows = [{"step": r.step, "epoch": r.epoch, **{k: r.values[k] for k in GRADIENT_FIELDS}}
            for r in records if all(r.values.get(k) is not None for k in GRADIENT_FIELDS)]
    return pd.DataFrame(rows, columns=["step", "epoch", *GRADIENT_FIELDS])


def _report_embeddings(bundle: ResultsBundle, bundle_dir):
    with np.load(os.path.join(bundle_dir, bundle.embeddings)) as data:
        embedding, minority, alpha = data["embedding"], data["minority"], data["alpha"]
    flat = embedding.reshape(-1, embedding.shape[-1]).astype(np.float64)
    projected = PCA(n_components=2, random_state=0).fit_transform(flat)
    return pd.DataFrame({"pc1": projected[:, 0], "pc2": projected[:, 1],
                         "minority": minority.reshape(-1).astype(int), "alpha": alpha.reshape(-1)})


def _report_attention(bundle: ResultsBundle, bundle_dir):
    with np.load(os.path.join(bundle_dir, bundle.attention)) as data:
        attention, nonzero = data["pair_attention"], data["pair_nonzero"]
    segments, nodes = np.meshgrid(np.arange(attention.shape[0]), np.arange(attention.shape[1]), indexing="ij")
    return pd.DataFrame({"segment": segments.reshape(-1), "node": nodes.reshape(-1),
                         "attention": attention.reshape(-1), "nonzero": nonzero.reshape(-1)})


REPORT_PARTS = (
    ("recall", "rows", _report_recall, plots.plot_recall_comparison),
    ("gradients", "history", _report_gradients, plots.plot_gradient_distribution),
    ("embeddings", "embeddings", _report_embeddings, plots.plot_embedding_projection),
    ("attention", "attention", _report_attention, plots.plot_attention_heatmap),
)


def cmd_report(bundle_path, out=None) -> str:
    """
    Render the four report figures, each from a CSV written first. Parts
    whose inputs are missing from the bundle are skipped with a warning.
    """
    bundle, bundle_dir = read_bundle(bundle_path)
    report_dir = new_run_dir(out or bundle_dir, "report")
    rendered = 0
    for name, source, build, draw in REPORT_PARTS:
        if not getattr(bundle, source):
            logger.warning(f"Report part '{name}' skipped: bundle has no {source}")
            continue
        frame = build(bundle, bundle_dir)
        if frame.empty:
            logger.warning(f"Report part '{name}' skipped: no {name} data in {source}")
            continue
        csv_path = os.path.join(report_dir, f"{name}.csv")
        frame.to_csv(csv_path, index=False)
        draw(csv_path, os.path.join(report_dir, f"{name}.png"))
        rendered += 1
    logger.success(f"Report with {rendered}/{len(REPORT_PARTS)} figures written to {report_dir}")
    return report_dir


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zistorm", description="Adversarial robustness experiments "
                                     "for spatiotemporal graph regression on zero-inflated counts")
    verbs = parser.add_subparsers(dest="verb", required=True)

    generate = verbs.add_parser("generate", help="write a synthetic dataset")
    train_cmd = verbs.add_parser("train", help="train a model in the configured mode")
    evaluate = verbs.add_parser("evaluate", help="clean and attacked metrics of a checkpoint")
    for sub in (generate, train_cmd, evaluate):
        sub.add_argument("--config", required=True, help="YAML experiment config")
        sub.add_argument("--out", default=None, help="output root (default: config output_dir)")
        sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    for sub in (train_cmd, evaluate):
        sub.add_argument("--force", action="store_true", help="ignore checkpoint/config hash mismatches")
    train_cmd.add_argument("--resume", default=None, help="train run directory to continue from")
    evaluate.add_argument("--checkpoint", required=True, help="train run directory holding model.pt")

    report = verbs.add_parser("report", help="render figures and CSVs from a results bundle")
    report.add_argument("--bundle", required=True, help="results.json or the directory holding it")
    report.add_argument("--out", default=None, help="output root (default: next to the bundle)")
    return parser


def main(argv=None) -> int:
    load_dotenv()
    setup_logging()
    workers = configure_threads()
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "report":
            cmd_report(args.bundle, args.out)
            return EXIT_OK
        config = load_config(args.config, args.seed)
        out = args.out or config.output_dir
        if args.verb == "generate":
            cmd_generate(config, out)
        elif args.verb == "train":
            cmd_train(config, out, resume=args.resume, force=args.force)
        else:
            cmd_evaluate(config, args.checkpoint, out, force=args.force, workers=workers)
    except HashMismatchError as e:
        logger.error(str(e))
        return EXIT_HASH_MISMATCH
    except ConfigError as e:
        logger.error(f"Invalid config: {e}")
        return EXIT_CONFIG
    except (BundleError, ZIDataError, ShapeError, AttackError, TrainingDivergedError,
            FileNotFoundError, OSError, ValueError, RuntimeError) as e:
        logger.error(f"{args.verb} failed: {e}")
        return EXIT_RUNTIME
    return EXIT_OK
