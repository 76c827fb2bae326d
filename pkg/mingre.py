"""
mingre.py - minority-aware gradient reweighting for adversarial example
generation.

A spatiotemporal encoder (attention across segments, then time, then
nodes) feeds three squeeze-style attention heads that rescale the input
gradient per segment, per time step and per node. The reweighted
gradient chooses the victim nodes and drives the PGD iterate. The
reweighter is trained in a second stage, against a frozen target, to
close the gap between minority and majority gradient magnitudes.
"""

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import torch
import torch.nn as nn
from loguru import logger

from attack import (AdversarialExample, AttackBudget, AttackSpec, VictimContext,
                    VictimStrategy, node_saliency, pgd_loop, select_victims)
from stmodel import input_gradient, predict
from util import config_hash, eval_mode, frozen, train_mode
from zidata import ClassPartition, SegmentBatch, class_partition


@dataclass
class EncoderConfig:
    input_dim: int
    model_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    dropout: float = 0.0
    use_encoder: bool = True
    seed: int = 0
    stage_order: List[str] = field(default_factory=lambda: ["segment", "temporal", "spatial"])

    def __post_init__(self):
        if min(self.input_dim, self.model_dim, self.num_heads, self.ffn_dim) < 1:
            raise ValueError(f"encoder dimensions must be positive: {self}")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by {self.num_heads} heads")
        if sorted(self.stage_order) != ["segment", "spatial", "temporal"]:
            raise ValueError(f"stage_order must be a permutation of segment/temporal/spatial, "
                             f"got {self.stage_order}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_json(self):
        return asdict(self)


@dataclass
class Lambdas:
    task: float = 1.0
    gap: float = 1.0
    minority: float = 0.01
    majority: float = 0.01

    def __post_init__(self):
        if min(self.task, self.gap, self.minority, self.majority) < 0:
            raise ValueError(f"lambdas must be non-negative, got {self}")

    @classmethod
    def from_list(cls, values):
        if len(values) != 4:
            raise ValueError(f"expected four lambdas, got {values}")
        return cls(*[float(v) for v in values])

    def to_list(self):
        return [self.task, self.gap, self.minority, self.majority]


@dataclass
class AttentionWeights:
    att_sg: torch.Tensor  # (B, 1, 1, 1)
    att_te: torch.Tensor  # (1, T, 1, 1)
    att_sp: torch.Tensor  # (1, 1, N, 1)

    @property
    def att1(self) -> torch.Tensor:
        """att_sg + att_sp broadcast to (B, 1, N, 1)."""
        return self.att_sg + self.att_sp

    def att1_pairs(self) -> torch.Tensor:
        """att1 per (segment, node) pair, shape (B, N)."""
        return self.att1[:, 0, :, 0]

    def detach(self):
        return AttentionWeights(self.att_sg.detach(), self.att_te.detach(), self.att_sp.detach())

    @classmethod
    def ones(cls, batch_size, history, num_nodes):
        return cls(torch.ones(batch_size, 1, 1, 1), torch.ones(1, history, 1, 1),
                   torch.ones(1, 1, num_nodes, 1))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, model_dim, num_heads):
        super().__init__()
        if model_dim % num_heads:
            raise ValueError(f"model_dim {model_dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = model_dim // num_heads
        self.query = nn.Linear(model_dim, model_dim, bias=False)
        self.key = nn.Linear(model_dim, model_dim, bias=False)
        self.value = nn.Linear(model_dim, model_dim, bias=False)
        self.out = nn.Linear(model_dim, model_dim, bias=False)
        self.last_attention: Optional[torch.Tensor] = None

    def forward(self, x):
        # x: (..., S, D_h); attention runs over S
        *lead, s, d = x.shape
        flat = x.reshape(-1, s, d)

        def heads(t):
            return t.reshape(flat.shape[0], s, self.num_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(self.query(flat)), heads(self.key(flat)), heads(self.value(flat))
        scores = q @ k.transpose(-1, -2) / self.head_dim ** 0.5
        attention = torch.softmax(scores, dim=-1)
        self.last_attention = attention.detach()
        mixed = (attention @ v).transpose(1, 2).reshape(flat.shape[0], s, d)
        return self.out(mixed).reshape(*lead, s, d)


class SelfAttentionBlock(nn.Module):
    """LN(R + FFN(R)) with R = LN(MHSA(x) + x), attending over the second-to-last axis."""

    def __init__(self, model_dim, num_heads, ffn_dim, dropout=0.0):
        super().__init__()
        self.attention = MultiHeadSelfAttention(model_dim, num_heads)
        self.norm1 = nn.LayerNorm(model_dim)
        self.ffn = nn.Sequential(nn.Linear(model_dim, ffn_dim), nn.ReLU(), nn.Dropout(dropout),
                                 nn.Linear(ffn_dim, model_dim))
        self.norm2 = nn.LayerNorm(model_dim)

    def forward(self, x):
        residual = self.norm1(self.attention(x) + x)
        return self.norm2(residual + self.ffn(residual))


def abd_layer(block: SelfAttentionBlock, Xsg):
    """Attention between datapoints: Xsg is (T, N, B, D_h) and segments attend to each other."""
    return block(Xsg)


# permutation taking (B, T, N, D) to the layout whose second-to-last axis is attended over
_LAYOUTS = {
    "segment": (1, 2, 0, 3),   # (T, N, B, D)
    "temporal": (0, 2, 1, 3),  # (B, N, T, D)
    "spatial": (0, 1, 2, 3),   # (B, T, N, D)
}


def _inverse(perm):
    inverse = [0] * len(perm)
    for i, p in enumerate(perm):
        inverse[p] = i
    return tuple(inverse)


class SpatioTemporalEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.input_proj = nn.Linear(config.input_dim, config.model_dim)
        self.blocks = nn.ModuleDict({
            stage: SelfAttentionBlock(config.model_dim, config.num_heads, config.ffn_dim, config.dropout)
            for stage in config.stage_order
        })

    def run_stage(self, stage, h):
        perm = _LAYOUTS[stage]
        return self.blocks[stage](h.permute(*perm)).permute(*_inverse(perm))

    def forward(self, X):
        h = self.input_proj(X)
        if not self.config.use_encoder:
            return h
        for stage in self.config.stage_order:
            h = self.run_stage(stage, h)
        return h


class AttentionHead(nn.Module):
    """g₃(g₂(g₁(·))) followed by a sigmoid."""

    def __init__(self, model_dim):
        super().__init__()
        hidden = max(model_dim // 2, 1)
        self.mlp = nn.Sequential(nn.Linear(model_dim, model_dim), nn.ReLU(),
                                 nn.Linear(model_dim, hidden), nn.ReLU(),
                                 nn.Linear(hidden, 1))

    def forward(self, pooled):
        return torch.sigmoid(self.mlp(pooled))


class GradientReweighter(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder = SpatioTemporalEncoder(config)
        self.segment_head = AttentionHead(config.model_dim)
        self.temporal_head = AttentionHead(config.model_dim)
        self.spatial_head = AttentionHead(config.model_dim)

    def encode(self, X):
        return self.encoder(X)

    def attention_weights(self, O) -> AttentionWeights:
        b, t, n, _ = O.shape
        att_sg = self.segment_head(O.mean(dim=(1, 2))).reshape(b, 1, 1, 1)
        att_te = self.temporal_head(O.mean(dim=(0, 2))).reshape(1, t, 1, 1)
        att_sp = self.spatial_head(O.mean(dim=(0, 1))).reshape(1, 1, n, 1)
        return AttentionWeights(att_sg, att_te, att_sp)

    def forward(self, X) -> AttentionWeights:
        return self.attention_weights(self.encode(X))


def build_reweighter(config: EncoderConfig) -> GradientReweighter:
    torch.manual_seed(config.seed)
    return GradientReweighter(config)


def encode(reweighter: GradientReweighter, batch: SegmentBatch):
    return reweighter.encode(batch.X)


def attention_weights(reweighter: GradientReweighter, O) -> AttentionWeights:
    return reweighter.attention_weights(O)


def reweight_gradients(grad, weights: AttentionWeights):
    """ĝrad = (att_sg + att_sp) ∘ grad ∘ att_te, broadcast over (B, T, N, D)."""
    for name, tensor in (("att_sg", weights.att_sg), ("att_te", weights.att_te), ("att_sp", weights.att_sp)):
        if tensor.dim() != 4 or any(w not in (1, g) for w, g in zip(tensor.shape, grad.shape)):
            raise ValueError(f"broadcast mismatch: {name} {tuple(tensor.shape)} vs grad {tuple(grad.shape)}")
    return weights.att1 * grad * weights.att_te


def pair_magnitudes(grad):
    """L2 magnitude of the gradient per (segment, node) pair, shape (B, N)."""
    return (grad.pow(2).sum(dim=(1, 3)) + 1e-20).sqrt()


def gradient_gap(grad_hat, partition: ClassPartition):
    """|mean minority pair magnitude − mean majority pair magnitude|."""
    if partition.is_degenerate:
        raise ValueError("gradient gap needs both minority and majority pairs")
    magnitudes = pair_magnitudes(grad_hat)
    minority = magnitudes[partition.minority_mask].mean()
    majority = magnitudes[partition.majority_mask].mean()
    return (minority - majority).abs()


def relative_gradient_gap(grad_hat, partition: ClassPartition):
    """gradient_gap over the mean pair magnitude; unchanged when ĝrad is rescaled as a whole."""
    return gradient_gap(grad_hat, partition) / pair_magnitudes(grad_hat).mean()


def soft_victim_mask(saliency, k, temperature=0.1):
    """
    Differentiable top-k: sigmoid((S − τ) / (temperature · mean S)) with τ
    halfway between the k-th and (k+1)-th largest score. Rescaling S leaves
    it unchanged.

    Args:
        saliency: (N,) or (B, N) node scores
        k: Victim count

    Returns:
        Soft mask shaped like saliency, values in (0, 1)
    """
    n = saliency.shape[-1]
    if k >= n:
        return torch.ones_like(saliency)
    ranked = torch.sort(saliency, dim=-1, descending=True).values
    threshold = 0.5 * (ranked[..., k - 1:k] + ranked[..., k:k + 1])
    scale = saliency.mean(dim=-1, keepdim=True) + 1e-12
    return torch.sigmoid((saliency - threshold) / (temperature * scale))


def mingre_generate(model, reweighter, batch: SegmentBatch, graph, budget: AttackBudget, loss_fn,
                    weights: Optional[AttentionWeights] = None, per_segment=False,
                    reselect_each_iter=False, clip_range=None) -> AdversarialExample:
    """
    Attention-guided STPGD: victims are the top-k nodes of the rectified
    reweighted-gradient saliency, and every iterate steps along
    sign(ĝrad ∘ P).

    Args:
        weights: Injected attention weights; computed from the clean batch
            features by the reweighter when omitted
    """
    if weights is None:
        with torch.no_grad():
            weights = reweighter(batch.X)
    weights = weights.detach()
    k = budget.victim_count(graph.num_nodes)

    def transform(grad):
        return reweight_gradients(grad, weights)

    def choose(direction):
        context = VictimContext(graph, batch.batch_size, node_saliency(direction, per_segment))
        return select_victims(VictimStrategy.MINGRE, context, k)

    with frozen(model), eval_mode(model):
        clean_grad = input_gradient(model, loss_fn, batch.X, batch.Y, graph)
        mask = choose(transform(clean_grad))
        return pgd_loop(model, loss_fn, batch.X, batch.Y, graph, budget, mask, transform=transform,
                        reselect=choose if reselect_each_iter else None, clip_range=clip_range)


def stage1_attack_step(model, reweighter, batch: SegmentBatch, graph, budget: AttackBudget, loss_fn,
                       **kwargs) -> AdversarialExample:
    """Adversarial example generation with the reweighter held fixed."""
    with frozen(reweighter), eval_mode(reweighter):
        return mingre_generate(model, reweighter, batch, graph, budget, loss_fn, **kwargs)


@dataclass
class ReweighterState:
    reweighter: GradientReweighter
    optimizer: torch.optim.Optimizer
    lambdas: Lambdas
    use_reweighting: bool = True
    steps: int = 0

    @classmethod
    def create(cls, config: EncoderConfig, lambdas: Optional[Lambdas] = None, learning_rate=1e-3,
               use_reweighting=True):
        reweighter = build_reweighter(config)
        optimizer = torch.optim.Adam(reweighter.parameters(), lr=learning_rate)
        return cls(reweighter, optimizer, lambdas or Lambdas(), use_reweighting)

    def weights_for(self, batch: SegmentBatch) -> Optional[AttentionWeights]:
        """None lets the reweighter compute weights; injected ones when reweighting is ablated."""
        if self.use_reweighting:
            return None
        return AttentionWeights.ones(batch.batch_size, batch.X.shape[1], batch.num_nodes)


@dataclass
class Stage2Result:
    terms: Dict[str, float]
    total: float
    skipped: List[str] = field(default_factory=list)
    gradient_gap: Optional[float] = None


def stage2_reweighter_update(model, state: ReweighterState, batch: SegmentBatch, graph,
                             adv_example: AdversarialExample, loss_fn, per_segment=False) -> Stage2Result:
    """
    One optimizer step on the reweighter against a frozen target model,
    minimizing

        λ₁·task + λ₂·gap + λ₃·‖1 − att1 on minority pairs‖₂ + λ₄·‖att1 on majority pairs‖₂

    Attention weights are positive, so sign(ĝrad ∘ P) = sign(grad ∘ P) and ψ
    reaches the generated example only through the victim set. The task
    term is therefore evaluated on X + ε·sign(grad) ∘ soft_victim_mask(S),
    with S the saliency of ĝrad. The gap term is taken relative to the mean
    pair magnitude. Neither term changes when every attention weight is
    scaled by the same factor.
    Returns the λ-weighted terms, which sum to the total.
    """
    lambdas = state.lambdas
    reweighter = state.reweighter
    partition = class_partition(batch)
    budget = adv_example.budget
    k = budget.victim_count(batch.num_nodes)

    with frozen(model), eval_mode(model), train_mode(reweighter):
        grad = input_gradient(model, loss_fn, batch.X, batch.Y, graph)
        weights = reweighter(batch.X)
        grad_hat = reweight_gradients(grad, weights)
        soft = soft_victim_mask(node_saliency(grad_hat, per_segment), k)
        soft = soft.expand(batch.batch_size, -1)[:, None, :, None]
        x_relaxed = batch.X + budget.epsilon * torch.sign(grad) * soft
        task = loss_fn(predict(model, x_relaxed, graph), batch.Y)

        terms = {"task": lambdas.task * task.double()}
        skipped = []
        gap_value = None
        if partition.is_degenerate:
            skipped = ["gap", "minority", "majority"]
            logger.warning(f"Stage-2 regularizers skipped: batch has "
                           f"{partition.num_minority} minority / {partition.num_majority} majority pairs")
        else:
            gap_value = float(gradient_gap(grad_hat.detach(), partition))
            att1 = weights.att1_pairs().expand(batch.batch_size, -1)
            terms["gap"] = lambdas.gap * relative_gradient_gap(grad_hat, partition).double()
            terms["minority"] = lambdas.minority * (1.0 - att1[partition.minority_mask]).norm().double()
            terms["majority"] = lambdas.majority * att1[partition.majority_mask].norm().double()

        total = sum(terms.values())
        state.optimizer.zero_grad()
        total.backward()
        state.optimizer.step()
        state.steps += 1

    values = {name: value.item() for name, value in terms.items()}
    return Stage2Result(values, total.item(), skipped, gap_value)


def build_generator(state: ReweighterState, spec: AttackSpec, loss_fn) -> Callable[..., AdversarialExample]:
    """(model, batch, graph) -> AdversarialExample using the current reweighter."""
    budget = spec.budget

    def generate(model, batch: SegmentBatch, graph) -> AdversarialExample:
        return stage1_attack_step(model, state.reweighter, batch, graph, budget, loss_fn,
                                  weights=state.weights_for(batch), per_segment=spec.per_segment,
                                  reselect_each_iter=spec.reselect_each_iter, clip_range=spec.clip_range)

    return generate


def attention_summary(reweighter: GradientReweighter, batches: Sequence[SegmentBatch]):
    """
    Segment and node attention with the label mass they correspond to.

    Returns:
        dict of numpy arrays: segment_start, segment_attention, segment_nonzero
        (one entry per segment), node_attention, node_nonzero (per node,
        averaged over batches) and pair_attention, pair_nonzero (segment x node)
    """
    segment_start, segment_attention, segment_nonzero = [], [], []
    node_attention, node_nonzero = [], []
    pair_attention, pair_nonzero = [], []
    with torch.no_grad(), eval_mode(reweighter):
        for batch in batches:
            weights = reweighter(batch.X)
            segment_start.extend(batch.segment_start_times)
            segment_attention.append(weights.att_sg.flatten())
            segment_nonzero.append((batch.Y > 0).sum(dim=(1, 2)))
            node_attention.append(weights.att_sp.flatten())
            node_nonzero.append((batch.Y > 0).sum(dim=(0, 1)))
            pair_attention.append(weights.att1_pairs().expand(batch.batch_size, -1))
            pair_nonzero.append((batch.Y > 0).sum(dim=1))
    return {
        "segment_start": torch.tensor(segment_start).numpy(),
        "segment_attention": torch.cat(segment_attention).numpy(),
        "segment_nonzero": torch.cat(segment_nonzero).numpy(),
        "node_attention": torch.stack(node_attention).mean(dim=0).numpy(),
        "node_nonzero": torch.stack(node_nonzero).sum(dim=0).numpy(),
        "pair_attention": torch.cat(pair_attention).numpy(),
        "pair_nonzero": torch.cat(pair_nonzero).numpy(),
    }


def save_reweighter(path, state: ReweighterState, meta=None):
    os.makedirs(path, exist_ok=True)
    torch.save({"reweighter": state.reweighter.state_dict(), "optimizer": state.optimizer.state_dict()},
               os.path.join(path, "reweighter.pt"))
    meta = dict(meta or {})
    meta.update({
        "config": state.reweighter.config.to_json(),
        "lambdas": state.lambdas.to_list(),
        "use_reweighting": state.use_reweighting,
        "steps": state.steps,
    })
    meta["config_hash"] = config_hash(meta["config"])
    with open(os.path.join(path, "reweighter.meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    logger.success(f"Reweighter saved to {os.path.join(path, 'reweighter.pt')}")


def load_reweighter(path, learning_rate=1e-3) -> ReweighterState:
    weights_path = os.path.join(path, "reweighter.pt")
    meta_path = os.path.join(path, "reweighter.meta.json")
    if not os.path.exists(weights_path) or not os.path.exists(meta_path):
        raise FileNotFoundError(f"no reweighter checkpoint in {path}")
    with open(meta_path) as f:
        meta = json.load(f)
    state = ReweighterState.create(EncoderConfig(**meta["config"]), Lambdas.from_list(meta["lambdas"]),
                                   learning_rate, meta.get("use_reweighting", True))
    blob = torch.load(weights_path, map_location="cpu", weights_only=True)
    state.reweighter.load_state_dict(blob["reweighter"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.steps = meta.get("steps", 0)
    return state
