"""
trainer.py - natural training, STPGD adversarial training and the full
MinGRE loop (stage-1 generation, θ step on the adversarial loss, stage-2
reweighter step).

One loop owns its model exclusively. Runs are bitwise reproducible for a
fixed seed when torch runs single-threaded.
"""

import copy
import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
from loguru import logger

import metrics
from attack import AttackSpec, VictimStrategy, build_attack
from history import HistoryWriter, RecordKind, summarize
from losses import AdvLossConfig, ContrastiveSource, LossKind, adv_loss_terms, make_objective
from mingre import (ReweighterState, build_generator, pair_magnitudes, reweight_gradients, save_reweighter,
                    stage2_reweighter_update)
from stmodel import SpatioTemporalRegressor, input_gradient, predict, save_checkpoint
from util import eval_mode, frozen, seed_everything
from zidata import SegmentBatch, SpatioTemporalGraph, class_partition, minority_fraction


class TrainingDivergedError(RuntimeError):
    pass


class TrainMode(enum.Enum):
    NATURAL = "natural"
    AT_RANDOM = "at_random"
    AT_DEGREE = "at_degree"
    AT_PAGERANK = "at_pagerank"
    AT_TNDS = "at_tnds"
    MINGRE = "mingre"

    @classmethod
    def from_string(cls, value):
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"Unknown training mode: {value}")

    @property
    def strategy(self) -> Optional[VictimStrategy]:
        return {
            TrainMode.AT_RANDOM: VictimStrategy.RANDOM,
            TrainMode.AT_DEGREE: VictimStrategy.DEGREE,
            TrainMode.AT_PAGERANK: VictimStrategy.PAGERANK,
            TrainMode.AT_TNDS: VictimStrategy.SALIENCY,
            TrainMode.MINGRE: VictimStrategy.MINGRE,
        }.get(self)

    @property
    def is_adversarial(self) -> bool:
        return self not in (TrainMode.NATURAL, TrainMode.MINGRE)

    def __str__(self):
        return self.value

    def to_json(self):
        return self.value


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    mode: TrainMode = TrainMode.NATURAL
    loss: LossKind = LossKind.WRMSE
    attack: AttackSpec = field(default_factory=AttackSpec)
    adv_loss: AdvLossConfig = field(default_factory=AdvLossConfig)
    seed: int = 0
    clean_ratio: float = 0.0
    patience: int = 10
    weight_rule: str = "linear"
    stage2_loss: Optional[LossKind] = None

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = TrainMode.from_string(self.mode)
        if isinstance(self.loss, str):
            self.loss = LossKind.from_string(self.loss)
        if isinstance(self.stage2_loss, str):
            self.stage2_loss = LossKind.from_string(self.stage2_loss)
        if self.mode is TrainMode.MINGRE and self.loss is not LossKind.ADV:
            raise ValueError("mode 'mingre' requires loss 'adv'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"epochs and batch_size must be positive, got {self.epochs}, {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.clean_ratio <= 1.0:
            raise ValueError(f"clean_ratio must be in [0, 1], got {self.clean_ratio}")
        if self.patience < 1:
            raise ValueError(f"patience must be positive, got {self.patience}")

    def attack_spec(self) -> AttackSpec:
        """The configured attack with its strategy forced by the training mode."""
        spec = copy.deepcopy(self.attack)
        if self.mode.strategy is not None:
            spec.strategy = self.mode.strategy
        return spec

    def to_json(self):
        data = asdict(self)
        data["mode"] = self.mode.to_json()
        data["loss"] = self.loss.to_json()
        data["stage2_loss"] = self.stage2_loss.to_json() if self.stage2_loss else None
        data["attack"] = self.attack.to_json()
        data["adv_loss"] = self.adv_loss.to_json()
        return data


@dataclass
class TrainingData:
    train: List[SegmentBatch]
    val: List[SegmentBatch]
    graph: SpatioTemporalGraph


@dataclass
class TrainResult:
    model: SpatioTemporalRegressor
    history: HistoryWriter
    best_epoch: int
    best_rec_min: float
    stopped_early: bool = False
    reweighter: Optional[ReweighterState] = None
    optimizer: Optional[torch.optim.Optimizer] = None


@dataclass
class Resume:
    start_epoch: int
    optimizer_state: Optional[dict] = None


def validate(model, batches: List[SegmentBatch], graph, objective):
    """Mean objective and ranking metrics on clean batches."""
    losses, predictions, labels = [], [], []
    with torch.no_grad(), eval_mode(model):
        for batch in batches:
            pred = predict(model, batch.X, graph)
            losses.append(float(objective(pred, batch.Y)))
            predictions.append(pred.yhat)
            labels.append(batch.Y)
    if not batches:
        return float("nan"), None
    report = metrics.evaluate(torch.cat(predictions), torch.cat(labels))
    return float(np.mean(losses)), report


def _check_finite(values: Dict, epoch, step):
    loss = values.get("loss")
    if loss is None or not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, step {step}: {values}")


def _snapshot(model, optimizer, state: Optional[ReweighterState]):
    snapshot = {"model": model.state_dict(), "optimizer": optimizer.state_dict()}
    if state is not None:
        snapshot.update(reweighter=state.reweighter.state_dict(), reweighter_optimizer=state.optimizer.state_dict(),
                        reweighter_steps=state.steps)
    return copy.deepcopy(snapshot)


def _restore(snapshot, model, optimizer, state: Optional[ReweighterState]):
    model.load_state_dict(snapshot["model"])
    optimizer.load_state_dict(snapshot["optimizer"])
    if state is not None:
        state.reweighter.load_state_dict(snapshot["reweighter"])
        state.optimizer.load_state_dict(snapshot["reweighter_optimizer"])
        state.steps = snapshot["reweighter_steps"]


def _run(model, data: TrainingData, cfg: TrainConfig, batch_step: Callable, history: Optional[HistoryWriter],
         run_dir, checkpoint_meta, resume: Optional[Resume], on_checkpoint: Optional[Callable] = None,
         reweighter: Optional[ReweighterState] = None) -> TrainResult:
    """
    Epoch loop shared by the three training modes. On return the model, its
    optimizer and the reweighter (when given) all hold the best epoch.
    """
    seed_everything(cfg.seed)
    history = history if history is not None else HistoryWriter()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    start_epoch = 0
    if resume is not None:
        start_epoch = resume.start_epoch
        if resume.optimizer_state is not None:
            optimizer.load_state_dict(resume.optimizer_state)
    objective = make_objective(cfg.loss, cfg.adv_loss, cfg.weight_rule)

    best_key, best_epoch, best_rec_min = None, start_epoch, float("nan")
    best_state = _snapshot(model, optimizer, reweighter)
    epochs_without_improvement = 0
    stopped_early = False
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng(cfg.seed + epoch).permutation(len(data.train))
        skipped = 0
        for index in order:
            values = batch_step(optimizer, data.train[index])
            _check_finite(values, epoch, history.next_step)
            skipped += int(values.get("skipped_terms", 0) > 0)
            history.step(epoch, values)

        val_loss, report = validate(model, data.val, data.graph, objective)
        epoch_values = summarize(r for r in history.records if r.epoch == epoch).get(epoch, {})
        epoch_values.update({"val_loss": val_loss, "skipped_batches": skipped})
        if report is not None:
            epoch_values.update({f"val_{k}": v for k, v in asdict(report).items()})
        history.epoch(epoch, epoch_values)

        rec_min = report.rec_min if report is not None else float("nan")
        key = (rec_min if math.isfinite(rec_min) else -math.inf,
               -val_loss if math.isfinite(val_loss) else -math.inf)
        logger.info(f"Epoch {epoch}: train loss {epoch_values.get('loss', float('nan')):.4f}, "
                    f"val loss {val_loss:.4f}, val Rec-min {rec_min:.4f}")
        if best_key is None or key > best_key:
            best_key, best_epoch, best_rec_min = key, epoch, rec_min
            best_state = _snapshot(model, optimizer, reweighter)
            epochs_without_improvement = 0
            if run_dir is not None:
                meta = dict(checkpoint_meta or {})
                meta.update({
                    "seed": cfg.seed,
                    "epoch": epoch,
                    "loss_history": [r.values.get("loss") for r in history.records
                                     if r.kind == RecordKind.EPOCH.value],
                })
                save_checkpoint(run_dir, model, meta, optimizer)
                if on_checkpoint is not None:
                    on_checkpoint(meta)
        else:
            epochs_without_improvement += 1
            if epochs_without_improvement >= cfg.patience:
                logger.info(f"Early stopping at epoch {epoch}: no Rec-min improvement for {cfg.patience} epochs")
                stopped_early = True
                break

    _restore(best_state, model, optimizer, reweighter)
    return TrainResult(model, history, best_epoch, best_rec_min, stopped_early, reweighter, optimizer)


def natural_train(model, data: TrainingData, cfg: TrainConfig, history: Optional[HistoryWriter] = None,
                  run_dir=None, checkpoint_meta=None, resume: Optional[Resume] = None) -> TrainResult:
    """Epochs over clean batches minimizing the configured loss."""
    objective = make_objective(cfg.loss, cfg.adv_loss, cfg.weight_rule)

    def batch_step(optimizer, batch):
        model.train()
        optimizer.zero_grad()
        loss = objective(predict(model, batch.X, data.graph), batch.Y)
        loss.backward()
        optimizer.step()
        return {"loss": loss.item()}

    return _run(model, data, cfg, batch_step, history, run_dir, checkpoint_meta, resume)


def adversarial_train(model, data: TrainingData, cfg: TrainConfig, history: Optional[HistoryWriter] = None,
                      run_dir=None, checkpoint_meta=None, resume: Optional[Resume] = None) -> TrainResult:
    """
    Min-max training: per batch an STPGD example is generated with the
    mode's victim strategy, then θ takes one descent step on it.
    """
    if not cfg.mode.is_adversarial:
        raise ValueError(f"adversarial_train needs an at_* mode, got {cfg.mode}")
    objective = make_objective(cfg.loss, cfg.adv_loss, cfg.weight_rule)
    spec = cfg.attack_spec()
    generate = build_attack(spec, objective)
    mix_rng = np.random.default_rng(cfg.seed)

    def batch_step(optimizer, batch):
        values = {"strategy": spec.strategy.to_json()}
        if cfg.clean_ratio > 0 and mix_rng.random() < cfg.clean_ratio:
            x = batch.X
            values["clean_batch"] = True
        else:
            example = generate(model, batch, data.graph)
            x = example.x_adv
            values.update({
                "attack_clean_loss": example.clean_loss,
                "attack_adv_loss": example.final_loss,
                "victim_minority_fraction": minority_fraction(example.mask.node_mask, class_partition(batch)),
            })
        model.train()
        optimizer.zero_grad()
        loss = objective(predict(model, x, data.graph), batch.Y)
        loss.backward()
        optimizer.step()
        values["loss"] = loss.item()
        return values

    return _run(model, data, cfg, batch_step, history, run_dir, checkpoint_meta, resume)


def _class_means(magnitudes, partition):
    if partition.is_degenerate:
        return None, None
    return (float(magnitudes[partition.minority_mask].mean()),
            float(magnitudes[partition.majority_mask].mean()))


def mingre_train(model, state: ReweighterState, data: TrainingData, cfg: TrainConfig,
                 history: Optional[HistoryWriter] = None, run_dir=None, checkpoint_meta=None,
                 resume: Optional[Resume] = None) -> TrainResult:
    """
    Full MinGRE adversarial training. Per batch:
      1. stage-1 example generation with the reweighter frozen
      2. θ step on the adversarial loss (NB likelihood plus uncertainty-weighted
         contrastive loss on the configured embeddings) with the reweighter frozen
      3. stage-2 reweighter step with θ frozen
    """
    if cfg.mode is not TrainMode.MINGRE:
        raise ValueError(f"mingre_train needs mode 'mingre', got {cfg.mode}")
    objective = make_objective(cfg.loss, cfg.adv_loss, cfg.weight_rule)
    stage2_objective = make_objective(cfg.stage2_loss or cfg.loss, cfg.adv_loss, cfg.weight_rule)
    spec = cfg.attack_spec()
    generate = build_generator(state, spec, objective)
    source = cfg.adv_loss.contrastive_source

    def batch_step(optimizer, batch):
        partition = class_partition(batch)
        example = generate(model, batch, data.graph)

        model.train()
        optimizer.zero_grad()
        with frozen(state.reweighter):
            pred = predict(model, example.x_adv, data.graph)
            if source is ContrastiveSource.ADVERSARIAL:
                embeddings = pred.embedding
            else:
                clean_embedding = predict(model, batch.X, data.graph).embedding
                embeddings = clean_embedding if source is ContrastiveSource.CLEAN else [clean_embedding, pred.embedding]
            terms = adv_loss_terms(pred.nb, batch.Y, embeddings, partition, cfg.adv_loss)
            terms["total"].backward()
            optimizer.step()

        values = {
            "loss": terms["total"].item(),
            "nb": terms["nb"].item(),
            "attack_clean_loss": example.clean_loss,
            "attack_adv_loss": example.final_loss,
            "victim_minority_fraction": minority_fraction(example.mask.node_mask, partition),
            "skipped_terms": 0,
        }
        if "u_mean" in terms:
            values["u_mean"] = terms["u_mean"].item()
        if terms.get("contrastive", 0) is None:
            values["skipped_terms"] += 1
        elif "contrastive" in terms:
            values["contrastive"] = terms["contrastive"].item()

        with eval_mode(model), frozen(model):
            grad = input_gradient(model, objective, batch.X, batch.Y, data.graph)
            with torch.no_grad():
                weights = state.weights_for(batch)
                if weights is None:
                    weights = state.reweighter(batch.X)
                grad_hat = reweight_gradients(grad, weights)
        raw_min, raw_maj = _class_means(pair_magnitudes(grad), partition)
        hat_min, hat_maj = _class_means(pair_magnitudes(grad_hat), partition)
        if raw_min is not None:
            values.update({"grad_raw_minority": raw_min, "grad_raw_majority": raw_maj,
                           "grad_hat_minority": hat_min, "grad_hat_majority": hat_maj})

        if state.use_reweighting:
            stage2 = stage2_reweighter_update(model, state, batch, data.graph, example, stage2_objective,
                                              per_segment=spec.per_segment)
            values.update({f"stage2_{k}": v for k, v in stage2.terms.items()})
            values["stage2_total"] = stage2.total
            if stage2.gradient_gap is not None:
                values["gradient_gap"] = stage2.gradient_gap
            if stage2.skipped:
                values["skipped_terms"] += 1
        return values

    def save_state(meta):
        save_reweighter(run_dir, state, meta)

    return _run(model, data, cfg, batch_step, history, run_dir, checkpoint_meta, resume,
                on_checkpoint=save_state if run_dir is not None else None, reweighter=state)


def train(model, data: TrainingData, cfg: TrainConfig, reweighter: Optional[ReweighterState] = None,
          **kwargs) -> TrainResult:
    """Dispatch to the loop selected by cfg.mode."""
    if cfg.mode is TrainMode.NATURAL:
        return natural_train(model, data, cfg, **kwargs)
    if cfg.mode is TrainMode.MINGRE:
        if reweighter is None:
            raise ValueError("mode 'mingre' needs a ReweighterState")
        return mingre_train(model, reweighter, data, cfg, **kwargs)
    return adversarial_train(model, data, cfg, **kwargs)
