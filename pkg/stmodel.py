"""
stmodel.py - compact spatiotemporal graph regressor.

Per-step graph convolution over the view-averaged normalized adjacency,
a GRU along the history axis, temporal mean pooling into a node embedding
H (B, N, D_h), then two heads reading H: a linear regression head for
Δ-step predictions and a negative binomial decoder for (μ, α).
"""

import json
import os
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger

from util import config_hash


NB_FLOOR = 1e-6


class ShapeError(ValueError):
    pass


@dataclass
class RegressorConfig:
    input_dim: int
    num_nodes: int
    history: int
    horizon: int
    hidden_dim: int = 32
    num_gc_layers: int = 1
    recurrent_dim: int = 32
    dropout: float = 0.0
    view_gate: bool = False
    num_views: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim < 4:
            raise ValueError(f"hidden_dim must be >= 4, got {self.hidden_dim}")
        if min(self.input_dim, self.num_nodes, self.history, self.horizon,
               self.num_gc_layers, self.recurrent_dim, self.num_views) < 1:
            raise ValueError(f"all structural sizes must be positive: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_json(self):
        return asdict(self)


@dataclass
class NBParams:
    mu: torch.Tensor     # (B, Δ, N)
    alpha: torch.Tensor  # (B, Δ, N)


@dataclass
class Prediction:
    yhat: torch.Tensor       # (B, Δ, N)
    embedding: torch.Tensor  # (B, N, D_h)
    nb: NBParams


class GraphConv(nn.Module):
    """Â X W over all time steps at once; Â mixes the K views."""

    def __init__(self, in_dim, out_dim, num_views, view_gate):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        self.view_logits = nn.Parameter(torch.zeros(num_views), requires_grad=view_gate)

    def forward(self, x, support):
        # x: (B, T, N, D), support: (K, N, N)
        gate = torch.softmax(self.view_logits, dim=0)
        mixed = torch.einsum("k,kij->ij", gate, support)
        return self.linear(torch.einsum("ij,btjd->btid", mixed, x))


class NBDecoder(nn.Module):
    def __init__(self, hidden_dim, horizon):
        super().__init__()
        self.horizon = horizon
        self.linear = nn.Linear(hidden_dim, 2 * horizon)

    def forward(self, H) -> NBParams:
        raw = self.linear(H)  # (B, N, 2Δ)
        mu_raw, alpha_raw = raw.split(self.horizon, dim=-1)
        mu = F.softplus(mu_raw) + NB_FLOOR
        alpha = F.softplus(alpha_raw) + NB_FLOOR
        return NBParams(mu.transpose(1, 2), alpha.transpose(1, 2))


class SpatioTemporalRegressor(nn.Module):
    def __init__(self, config: RegressorConfig):
        super().__init__()
        self.config = config
        dims = [config.input_dim] + [config.hidden_dim] * config.num_gc_layers
        self.graph_convs = nn.ModuleList(
            GraphConv(d_in, d_out, config.num_views, config.view_gate)
            for d_in, d_out in zip(dims[:-1], dims[1:])
        )
        self.dropout = nn.Dropout(config.dropout)
        self.gru = nn.GRU(config.hidden_dim, config.recurrent_dim, batch_first=True)
        self.embedding_proj = nn.Linear(config.recurrent_dim, config.hidden_dim)
        self.output_layer = nn.Linear(config.hidden_dim, config.horizon)
        self.decoder = NBDecoder(config.hidden_dim, config.horizon)

    def check_inputs(self, X, support):
        if X.dim() != 4:
            raise ShapeError(f"X must be (B, T, N, D), got shape {tuple(X.shape)}")
        _, _, n, d = X.shape
        if support.shape[-1] != n or support.shape[-2] != n:
            raise ShapeError(f"X has {n} nodes but graph has {support.shape[-1]}")
        if support.shape[0] != self.config.num_views:
            raise ShapeError(f"graph has {support.shape[0]} views, model expects {self.config.num_views}")
        if d != self.config.input_dim:
            raise ShapeError(f"X has {d} feature channels, model expects {self.config.input_dim}")

    def embed(self, X, support):
        self.check_inputs(X, support)
        h = X
        for conv in self.graph_convs:
            h = torch.relu(conv(h, support))
        h = self.dropout(h)
        b, t, n, d_h = h.shape
        seq = h.permute(0, 2, 1, 3).reshape(b * n, t, d_h)
        out, _ = self.gru(seq)
        pooled = out.mean(dim=1).reshape(b, n, -1)
        return torch.tanh(self.embedding_proj(pooled))

    def head(self, H):
        return self.output_layer(H).transpose(1, 2)

    def forward(self, X, support):
        return self.head(self.embed(X, support))

    def predict(self, X, support) -> Prediction:
        H = self.embed(X, support)
        return Prediction(self.head(H), H, self.decoder(H))


def build_regressor(config: RegressorConfig) -> SpatioTemporalRegressor:
    torch.manual_seed(config.seed)
    model = SpatioTemporalRegressor(config)
    logger.debug(f"Built regressor with {count_parameters(model)} parameters")
    return model


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def _support(graph):
    return graph if isinstance(graph, torch.Tensor) else graph.normalized_support()


def forward(model: SpatioTemporalRegressor, X, graph):
    return model(X, _support(graph))


def embed(model: SpatioTemporalRegressor, X, graph):
    return model.embed(X, _support(graph))


def predict(model: SpatioTemporalRegressor, X, graph) -> Prediction:
    return model.predict(X, _support(graph))


def decode_nb(decoder: NBDecoder, H) -> NBParams:
    return decoder(H)


def input_gradient(model: SpatioTemporalRegressor, loss_fn: Callable, X, Y, graph):
    """
    Exact reverse-mode gradient of a scalar loss with respect to the input
    features. Only X receives a gradient; parameter .grad fields are left
    untouched.

    Args:
        model: Target regressor
        loss_fn: Callable (Prediction, Y) -> scalar tensor
        X: Features (B, T, N, D)
        Y: Labels (B, Δ, N)
        graph: SpatioTemporalGraph or a precomputed support tensor

    Returns:
        Gradient tensor shaped like X
    """
    x = X.detach().clone().requires_grad_(True)
    loss = loss_fn(model.predict(x, _support(graph)), Y)
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise ValueError("loss_fn must return a scalar tensor")
    if not loss.requires_grad:
        return torch.zeros_like(X)
    (grad,) = torch.autograd.grad(loss, x, allow_unused=True)
    return torch.zeros_like(X) if grad is None else grad.detach()


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, model, meta, optimizer=None, filename="model.pt"):
    """
    Write `<filename>` (state dicts) and `<stem>.meta.json` into a directory.
    meta is extended with the model config and its hash.
    """
    os.makedirs(path, exist_ok=True)
    state = {"model": model.state_dict()}
    if optimizer is not None:
        state["optimizer"] = optimizer.state_dict()
    torch.save(state, os.path.join(path, filename))
    meta = dict(meta)
    meta["config"] = model.config.to_json()
    meta["config_hash"] = meta.get("config_hash") or config_hash(meta["config"])
    stem = os.path.splitext(filename)[0]
    with open(os.path.join(path, f"{stem}.meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    logger.success(f"Checkpoint saved to {os.path.join(path, filename)}")


def read_checkpoint(path, filename="model.pt"):
    """
    Returns:
        (state dict bundle, meta) as written by save_checkpoint
    """
    stem = os.path.splitext(filename)[0]
    meta_path = os.path.join(path, f"{stem}.meta.json")
    weights_path = os.path.join(path, filename)
    if not os.path.exists(meta_path) or not os.path.exists(weights_path):
        raise FileNotFoundError(f"no checkpoint {filename} in {path}")
    with open(meta_path) as f:
        meta = json.load(f)
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    return state, meta


def load_checkpoint(path, filename="model.pt", optimizer: Optional[torch.optim.Optimizer] = None):
    state, meta = read_checkpoint(path, filename)
    model = SpatioTemporalRegressor(RegressorConfig(**meta["config"]))
    model.load_state_dict(state["model"])
    if optimizer is not None and "optimizer" in state:
        optimizer.load_state_dict(state["optimizer"])
    return model, meta
