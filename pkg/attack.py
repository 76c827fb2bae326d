"""
attack.py - STPGD: ℓ∞-bounded sign-gradient attacks restricted to a
budgeted set of victim nodes, with random / degree / pagerank / saliency
victim selection.
"""

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger

import metrics
from stmodel import input_gradient, predict
from util import eval_mode, frozen
from zidata import SegmentBatch, SpatioTemporalGraph


class AttackError(RuntimeError):
    pass


class VictimStrategy(enum.Enum):
    RANDOM = "random"
    DEGREE = "degree"
    PAGERANK = "pagerank"
    SALIENCY = "saliency"
    MINGRE = "mingre"

    @classmethod
    def from_string(cls, value):
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"Unknown victim strategy: {value}")

    def __str__(self):
        return self.value

    def __repr__(self):
        return f"VictimStrategy.{self.name}"

    def to_json(self):
        return self.value


@dataclass
class AttackBudget:
    epsilon: float = 0.5
    eta: float = 0.1
    step_alpha: Optional[float] = None
    num_iters: int = 10

    def __post_init__(self):
        if self.step_alpha is None:
            self.step_alpha = self.epsilon / 4.0
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")
        if self.step_alpha < 0 or self.step_alpha > self.epsilon:
            raise ValueError(f"step_alpha must be in [0, epsilon], got {self.step_alpha} "
                             f"with epsilon {self.epsilon}")
        if self.num_iters < 1:
            raise ValueError(f"num_iters must be positive, got {self.num_iters}")

    def victim_count(self, num_nodes) -> int:
        return max(1, math.ceil(self.eta * num_nodes))


@dataclass
class PerturbationMask:
    """Victim-node indicator per segment; broadcast along T and D when applied."""
    node_mask: torch.Tensor  # (B, N) bool
    strategy: VictimStrategy

    def as_tensor(self, shape) -> torch.Tensor:
        b, t, n, d = shape
        return self.node_mask[:, None, :, None].expand(b, t, n, d).to(torch.float32)

    @property
    def selected_nodes(self) -> List[List[int]]:
        return [row.nonzero().flatten().tolist() for row in self.node_mask]

    def max_selected(self) -> int:
        return int(self.node_mask.sum(dim=1).max()) if self.node_mask.numel() else 0


@dataclass
class AdversarialExample:
    x_adv: torch.Tensor
    x_clean: torch.Tensor
    mask: PerturbationMask
    budget: AttackBudget
    loss_trace: List[float] = field(default_factory=list)

    @property
    def clean_loss(self) -> float:
        return self.loss_trace[0]

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1]

    def linf(self) -> float:
        return float((self.x_adv.double() - self.x_clean.double()).abs().max()) if self.x_adv.numel() else 0.0


@dataclass
class AttackSpec:
    name: str = "stpgd-saliency"
    strategy: VictimStrategy = VictimStrategy.SALIENCY
    epsilon: float = 0.5
    eta: float = 0.1
    alpha: Optional[float] = None
    iters: int = 10
    seed: int = 0
    per_segment: bool = False
    reselect_each_iter: bool = False
    clip_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if isinstance(self.strategy, str):
            self.strategy = VictimStrategy.from_string(self.strategy)
        if self.clip_range is not None:
            lo, hi = self.clip_range
            if lo >= hi:
                raise ValueError(f"clip_range must be increasing, got {self.clip_range}")
            self.clip_range = (float(lo), float(hi))
        AttackBudget(self.epsilon, self.eta, self.alpha, self.iters)

    @property
    def budget(self) -> AttackBudget:
        return AttackBudget(self.epsilon, self.eta, self.alpha, self.iters)

    def to_json(self):
        data = asdict(self)
        data["strategy"] = self.strategy.to_json()
        data["clip_range"] = list(self.clip_range) if self.clip_range else None
        return data


# -- victim scoring ------------------------------------------------------------------

def node_saliency(grads, per_segment=False) -> torch.Tensor:
    """
    ‖ReLU((1/B) Σ_b ∇L)‖₂ per node, the norm taken over (T, D).

    Args:
        grads: Input gradients (B, T, N, D)
        per_segment: Skip the batch mean and score every segment separately

    Returns:
        (N,) scores, or (B, N) when per_segment
    """
    if grads.dim() != 4:
        raise ValueError(f"gradients must be (B, T, N, D), got shape {tuple(grads.shape)}")
    if grads.shape[0] == 0:
        raise ValueError("empty batch")
    if per_segment:
        return torch.relu(grads).pow(2).sum(dim=(1, 3)).sqrt()
    return torch.relu(grads.mean(dim=0)).pow(2).sum(dim=(0, 2)).sqrt()


def weighted_degree(adjacency) -> np.ndarray:
    return np.asarray(adjacency, dtype=np.float64).sum(axis=1)


def pagerank(adjacency, damping=0.85, tol=1e-8, max_iterations=10_000) -> np.ndarray:
    """
    Power iteration on the weighted random-walk matrix. Dangling nodes
    teleport uniformly.
    """
    adj = np.asarray(adjacency, dtype=np.float64)
    n = adj.shape[0]
    out_weight = adj.sum(axis=1, keepdims=True)
    transition = np.where(out_weight > 0, adj / np.where(out_weight > 0, out_weight, 1.0), 1.0 / n)
    x = np.full(n, 1.0 / n)
    for _ in range(max_iterations):
        x_new = (1.0 - damping) / n + damping * (x @ transition)
        if np.linalg.norm(x_new - x, ord=1) < tol:
            return x_new
        x = x_new
    logger.warning(f"PageRank did not converge within {max_iterations} iterations")
    return x


def top_k_nodes(scores, k) -> List[int]:
    """Indices of the k largest scores; ties go to the lowest node index."""
    scores = torch.as_tensor(scores, dtype=torch.float64)
    order = torch.sort(-scores, stable=True).indices
    return order[:k].tolist()


@dataclass
class VictimContext:
    graph: SpatioTemporalGraph
    batch_size: int
    saliency: Optional[torch.Tensor] = None  # (N,) or (B, N)
    seed: int = 0


def select_victims(strategy, context: VictimContext, k) -> PerturbationMask:
    strategy = VictimStrategy.from_string(strategy) if isinstance(strategy, str) else strategy
    n = context.graph.num_nodes
    if k > n:
        raise ValueError(f"cannot select {k} victims from {n} nodes")
    if k < 1:
        raise ValueError(f"victim count must be positive, got {k}")

    node_mask = torch.zeros(context.batch_size, n, dtype=torch.bool)
    if strategy is VictimStrategy.RANDOM:
        rng = np.random.default_rng(context.seed)
        node_mask[:, rng.choice(n, size=k, replace=False)] = True
    elif strategy is VictimStrategy.DEGREE:
        node_mask[:, top_k_nodes(weighted_degree(context.graph.adjacency_views[0]), k)] = True
    elif strategy is VictimStrategy.PAGERANK:
        node_mask[:, top_k_nodes(pagerank(context.graph.adjacency_views[0]), k)] = True
    elif strategy in (VictimStrategy.SALIENCY, VictimStrategy.MINGRE):
        if context.saliency is None:
            raise ValueError(f"{strategy} selection needs saliency scores")
        saliency = context.saliency.detach()
        if saliency.dim() == 1:
            node_mask[:, top_k_nodes(saliency, k)] = True
        else:
            for b in range(context.batch_size):
                node_mask[b, top_k_nodes(saliency[b], k)] = True
    else:
        raise ValueError(f"Unsupported strategy: {strategy}")
    return PerturbationMask(node_mask, strategy)


# -- PGD ----------------------------------------------------------------------------

def project(x_adv, x, epsilon, P, clip_range=None):
    """
    Elementwise clip into [x−ε, x+ε], then restore x wherever P == 0.

    The ball holds exactly: coordinates that float rounding of x + δ left
    outside it are stepped one ulp at a time back towards x. The optional
    data-range clamp is applied first and never overrides the ball.
    """
    if clip_range is not None:
        x_adv = x_adv.clamp(*clip_range)
    x_adv = x + (x_adv - x).clamp(-epsilon, epsilon)
    outside = (x_adv.double() - x.double()).abs() > epsilon
    while outside.any():
        x_adv = torch.where(outside, torch.nextafter(x_adv, x), x_adv)
        outside = (x_adv.double() - x.double()).abs() > epsilon
    return torch.where(P > 0, x_adv, x)


def pgd_loop(model, loss_fn, X, Y, graph, budget: AttackBudget, mask: PerturbationMask,
             transform: Optional[Callable] = None, reselect: Optional[Callable] = None,
             clip_range=None) -> AdversarialExample:
    """
    Shared iterate X′ ← clip_ε(X′ + α·sign(g ∘ P)) with g the (optionally
    transformed) input gradient at X′.

    Args:
        transform: Maps raw gradient to the ascent direction (MinGRE reweighting)
        reselect: Maps the current direction to a new PerturbationMask each iteration
    """
    x = X.detach()
    x_adv = x.clone()
    P = mask.as_tensor(x.shape)
    trace = []
    for _ in range(budget.num_iters):
        grad = input_gradient(model, loss_fn, x_adv, Y, graph)
        if not torch.isfinite(grad).all():
            raise AttackError("non-finite input gradient during PGD")
        with torch.no_grad():
            trace.append(float(loss_fn(predict(model, x_adv, graph), Y)))
        direction = transform(grad) if transform is not None else grad
        if reselect is not None:
            mask = reselect(direction)
            P = mask.as_tensor(x.shape)
        x_adv = project(x_adv + budget.step_alpha * torch.sign(direction * P), x,
                        budget.epsilon, P, clip_range).detach()
    with torch.no_grad():
        trace.append(float(loss_fn(predict(model, x_adv, graph), Y)))
    return AdversarialExample(x_adv, x, mask, budget, trace)


def stpgd(model, loss_fn, X, Y, graph, budget: AttackBudget, mask: PerturbationMask,
          reselect: Optional[Callable] = None, clip_range=None) -> AdversarialExample:
    """
    Spatiotemporal PGD against a frozen model.

    Returns:
        AdversarialExample whose loss_trace holds the loss at every
        iterate, starting with the clean loss and ending with the final one
    """
    with frozen(model), eval_mode(model):
        return pgd_loop(model, loss_fn, X, Y, graph, budget, mask,
                        reselect=reselect, clip_range=clip_range)


def build_attack(spec: AttackSpec, loss_fn) -> Callable[..., AdversarialExample]:
    """
    Generator (model, batch, graph) -> AdversarialExample for the four
    STPGD victim strategies. Saliency is computed once from the clean
    gradient unless reselect_each_iter is set.
    """
    if spec.strategy is VictimStrategy.MINGRE:
        raise ValueError("MinGRE generators are built by mingre.build_generator")
    budget = spec.budget

    def generate(model, batch: SegmentBatch, graph) -> AdversarialExample:
        k = budget.victim_count(graph.num_nodes)
        saliency = None
        reselect = None
        if spec.strategy is VictimStrategy.SALIENCY:
            with frozen(model), eval_mode(model):
                grad = input_gradient(model, loss_fn, batch.X, batch.Y, graph)
            saliency = node_saliency(grad, spec.per_segment)
            if spec.reselect_each_iter:
                def reselect(direction):
                    context = VictimContext(graph, batch.batch_size, node_saliency(direction, spec.per_segment))
                    return select_victims(spec.strategy, context, k)
        # random draws differ per batch but stay reproducible
        seed = spec.seed + batch.segment_start_times[0]
        context = VictimContext(graph, batch.batch_size, saliency, seed)
        mask = select_victims(spec.strategy, context, k)
        return stpgd(model, loss_fn, batch.X, batch.Y, graph, budget, mask,
                     reselect=reselect, clip_range=spec.clip_range)

    return generate


# -- paired evaluation ---------------------------------------------------------------

@dataclass
class PairedRow:
    batch_index: int
    labels: torch.Tensor
    clean: torch.Tensor
    adversarial: torch.Tensor
    victims: List[List[int]]
    clean_loss: float
    adversarial_loss: float


@dataclass
class PairedEvaluation:
    attack: str
    rows: List[PairedRow]

    def reports(self) -> Tuple["metrics.MetricReport", "metrics.MetricReport"]:
        labels = torch.cat([row.labels for row in self.rows])
        clean = torch.cat([row.clean for row in self.rows])
        adversarial = torch.cat([row.adversarial for row in self.rows])
        return metrics.evaluate(clean, labels), metrics.evaluate(adversarial, labels)


def clean_vs_adv_eval(model, batches: Sequence[SegmentBatch], graph, attack_spec: AttackSpec,
                      loss_fn, generator: Optional[Callable] = None) -> PairedEvaluation:
    """
    Clean and adversarial predictions for every batch under one attack.

    Args:
        generator: Optional (model, batch, graph) -> AdversarialExample; defaults
            to build_attack(attack_spec, loss_fn)
    """
    generator = generator or build_attack(attack_spec, loss_fn)
    rows = []
    with eval_mode(model):
        for i, batch in enumerate(batches):
            example = generator(model, batch, graph)
            with torch.no_grad():
                clean = predict(model, batch.X, graph).yhat
                adversarial = predict(model, example.x_adv, graph).yhat
            rows.append(PairedRow(i, batch.Y, clean, adversarial, example.mask.selected_nodes,
                                  example.clean_loss, example.final_loss))
    logger.info(f"Evaluated attack {attack_spec.name} on {len(rows)} batches")
    return PairedEvaluation(attack_spec.name, rows)
