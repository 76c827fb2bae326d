"""
losses.py - training objectives: weighted RMSE, negative binomial
likelihood, uncertainty weights, supervised contrastive loss and the
combined adversarial loss.
"""

import enum
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Optional

import torch
import torch.nn.functional as F
from loguru import logger

from stmodel import NBParams, Prediction
from zidata import ClassPartition, partition_labels


class NBParameterization(enum.Enum):
    NB2 = "nb2"          # n = 1/α, p = 1/(1+μα): mean μ, variance μ + αμ²
    LITERAL = "literal"  # n = μα/(1-α), p = 1/(1+μα); requires α < 1

    @classmethod
    def from_string(cls, value):
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"Unknown NB parameterization: {value}")

    def __str__(self):
        return self.value

    def to_json(self):
        return self.value


class ContrastiveSource(enum.Enum):
    ADVERSARIAL = "adversarial"
    CLEAN = "clean"
    BOTH = "both"

    @classmethod
    def from_string(cls, value):
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"Unknown contrastive source: {value}")

    def __str__(self):
        return self.value

    def to_json(self):
        return self.value


@dataclass
class LossWeights:
    w: torch.Tensor
    rule: str = "linear"


def weight_rule(Y, rule="linear") -> LossWeights:
    """
    Label-to-weight mapping: 'linear' gives 1 for zeros and 1 + y for
    non-zero counts, 'uniform' gives 1 everywhere.
    """
    if rule == "linear":
        w = torch.where(Y > 0, 1.0 + Y, torch.ones_like(Y))
    elif rule == "uniform":
        w = torch.ones_like(Y)
    else:
        raise ValueError(f"Unknown weight rule: {rule}")
    return LossWeights(w, rule)


def wrmse(Yhat, Y, weights) -> torch.Tensor:
    """(1 / (B·Δ·N)) Σ w·(y − ŷ)²."""
    w = weights.w if isinstance(weights, LossWeights) else weights
    w = torch.as_tensor(w, dtype=Yhat.dtype, device=Yhat.device)
    if Yhat.shape != Y.shape:
        raise ValueError(f"prediction shape {tuple(Yhat.shape)} != label shape {tuple(Y.shape)}")
    if torch.any(w < 0):
        raise ValueError("loss weights must be non-negative")
    return (w.expand_as(Y) * (Y - Yhat) ** 2).mean()


def _check_nb_inputs(mu, alpha):
    if torch.any(mu <= 0) or torch.any(alpha <= 0):
        raise ValueError("NB mean and dispersion must be strictly positive")


def nb_log_pmf(x, mu, alpha, parameterization=NBParameterization.NB2):
    """
    log P(x; n, p) = log Γ(x+n) − log Γ(n) − log Γ(x+1) + n log p + x log(1−p)

    evaluated in log space so counts up to 1e6 stay finite. The arithmetic
    runs in float64 and the result is cast back to mu's dtype: near the
    dispersion floor n = 1/α is huge and log Γ(x+n) − log Γ(n) cancels.
    """
    dtype = mu.dtype
    mu, alpha = mu.double(), torch.as_tensor(alpha, device=mu.device).double()
    x = torch.as_tensor(x, device=mu.device).double()
    mu_alpha = mu * alpha
    if parameterization is NBParameterization.NB2:
        n = 1.0 / alpha
    else:
        if torch.any(alpha >= 1):
            raise ValueError("literal parameterization requires alpha < 1")
        n = mu_alpha / (1.0 - alpha)
    log_p = -torch.log1p(mu_alpha)
    log_one_minus_p = torch.log(mu_alpha) - torch.log1p(mu_alpha)
    log_pmf = (torch.lgamma(x + n) - torch.lgamma(n) - torch.lgamma(x + 1.0)
               + n * log_p + x * log_one_minus_p)
    return log_pmf.to(dtype)


def nb_pmf(x, mu, alpha, parameterization=NBParameterization.NB2):
    mu = torch.as_tensor(mu, dtype=torch.float64)
    alpha = torch.as_tensor(alpha, dtype=torch.float64)
    _check_nb_inputs(mu, alpha)
    x = torch.as_tensor(x, dtype=torch.float64)
    if torch.any(x < 0) or torch.any(x != torch.floor(x)):
        raise ValueError("NB support is the non-negative integers")
    return torch.exp(nb_log_pmf(x, mu, alpha, parameterization))


def nb_nll(params: NBParams, Y, parameterization=NBParameterization.NB2) -> torch.Tensor:
    if torch.isnan(params.mu).any() or torch.isnan(params.alpha).any():
        raise ValueError("NaN in NB parameters")
    _check_nb_inputs(params.mu, params.alpha)
    return -nb_log_pmf(Y, params.mu, params.alpha, parameterization).mean()


def uncertainty_weight(alpha_hat, gamma) -> torch.Tensor:
    """u = 2 / (1 + exp(−α̂/γ)) − 1, computed as tanh(α̂ / 2γ)."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    alpha_hat = torch.as_tensor(alpha_hat)
    if torch.any(alpha_hat < 0):
        raise ValueError("alpha_hat must be non-negative")
    return torch.tanh(alpha_hat / (2.0 * gamma))


def supervised_contrastive(H, class_labels, tau) -> torch.Tensor:
    """
    Supervised contrastive loss over M anchors.

    Args:
        H: Embeddings (M, D_h); normalized to unit length here
        class_labels: Integer class per anchor (M,)
        tau: Temperature

    Returns:
        Mean over anchors with at least one positive of
        −(1/|P(i)|) Σ_p log softmax_{a≠i}(h_i·h_a/τ)[p]
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if H.dim() != 2 or H.shape[0] != class_labels.shape[0]:
        raise ValueError("H must be (M, D_h) with one label per anchor")
    if torch.any(H.norm(dim=1) < 1e-12):
        raise ValueError("zero-norm embedding cannot be normalized")
    features = F.normalize(H, dim=1)
    m = features.shape[0]

    labels = class_labels.reshape(-1, 1)
    self_mask = torch.eye(m, dtype=torch.bool, device=H.device)
    positives = torch.eq(labels, labels.T) & ~self_mask
    num_positives = positives.sum(dim=1)
    valid = num_positives > 0
    if not torch.any(valid):
        raise ValueError("no anchor has a positive; contrastive loss undefined")

    logits = (features @ features.T / tau).masked_fill(self_mask, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    log_prob = log_prob.masked_fill(self_mask, 0.0)
    mean_log_prob_pos = (positives * log_prob).sum(dim=1)[valid] / num_positives[valid]
    return -mean_log_prob_pos.mean()


@dataclass
class AdvLossConfig:
    beta1: float = 1.0
    beta2: float = 0.1
    gamma: float = 1.0
    tau: float = 0.1
    parameterization: NBParameterization = NBParameterization.NB2
    contrastive_source: ContrastiveSource = ContrastiveSource.ADVERSARIAL

    def __post_init__(self):
        if isinstance(self.parameterization, str):
            self.parameterization = NBParameterization.from_string(self.parameterization)
        if isinstance(self.contrastive_source, str):
            self.contrastive_source = ContrastiveSource.from_string(self.contrastive_source)
        if self.beta1 < 0 or self.beta2 < 0 or self.beta1 + self.beta2 <= 0:
            raise ValueError(f"beta1, beta2 must be non-negative with a positive sum, got "
                             f"{self.beta1}, {self.beta2}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    def to_json(self):
        data = asdict(self)
        data["parameterization"] = self.parameterization.to_json()
        data["contrastive_source"] = self.contrastive_source.to_json()
        return data


def adv_loss_terms(params: NBParams, Y, H, partition: ClassPartition,
                   cfg: AdvLossConfig) -> Dict[str, torch.Tensor]:
    """
    Named components of β₁·nb_nll + β₂·ū·supervised_contrastive.

    H may be (B, N, D_h) or a list of such tensors (clean and adversarial
    embeddings); each is flattened to B·N anchors labelled by the partition.
    A batch where the contrastive term is undefined gets 'contrastive'
    set to None and contributes only the NB term.
    """
    nll = nb_nll(params, Y, cfg.parameterization)
    terms = {"nb": nll, "total": cfg.beta1 * nll}
    if cfg.beta2 == 0:
        return terms

    u_mean = uncertainty_weight(params.alpha, cfg.gamma).mean()
    terms["u_mean"] = u_mean
    embeddings = H if isinstance(H, (list, tuple)) else [H]
    labels = partition.labels().to(embeddings[0].device)
    try:
        scl = torch.stack([
            supervised_contrastive(h.reshape(-1, h.shape[-1]), labels, cfg.tau) for h in embeddings
        ]).mean()
    except ValueError as e:
        logger.debug(f"Contrastive term skipped: {e}")
        terms["contrastive"] = None
        return terms
    terms["contrastive"] = scl
    terms["total"] = cfg.beta1 * nll + cfg.beta2 * u_mean * scl
    return terms


def adv_loss(params: NBParams, Y, H, partition: ClassPartition, cfg: AdvLossConfig) -> torch.Tensor:
    return adv_loss_terms(params, Y, H, partition, cfg)["total"]


class LossKind(enum.Enum):
    WRMSE = "wrmse"
    NB = "nb"
    ADV = "adv"

    @classmethod
    def from_string(cls, value):
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"Unknown loss kind: {value}")

    def __str__(self):
        return self.value

    def to_json(self):
        return self.value


def make_objective(kind, adv_cfg: Optional[AdvLossConfig] = None,
                   rule="linear") -> Callable[[Prediction, torch.Tensor], torch.Tensor]:
    """
    Build the scalar objective (Prediction, Y) -> loss shared by attacks
    and training steps.
    """
    kind = LossKind.from_string(kind) if isinstance(kind, str) else kind
    adv_cfg = adv_cfg or AdvLossConfig()

    if kind is LossKind.WRMSE:
        def objective(pred, Y):
            return wrmse(pred.yhat, Y, weight_rule(Y, rule))
    elif kind is LossKind.NB:
        def objective(pred, Y):
            return nb_nll(pred.nb, Y, adv_cfg.parameterization)
    else:
        def objective(pred, Y):
            return adv_loss(pred.nb, Y, pred.embedding, partition_labels(Y), adv_cfg)
    objective.kind = kind
    return objective
