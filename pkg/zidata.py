"""
zidata.py - zero-inflated spatiotemporal series: synthetic generation,
ZIST container I/O, chronological splitting, windowing into segment
batches, and minority/majority partitioning.
"""

import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Set, Tuple

import numpy as np
import torch
from loguru import logger

from util import file_sha256


ZIST_MAGIC = b"ZIST"
ZIST_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
DTYPE_NAMES = {0: "float32", 1: "int32"}
FORMAT_VERSION = 1

# Generator constants
NB_DISPERSION = 0.5
AR_COEF = 0.8
LATENT_SCALE = 0.6
BASE_MEAN = 2.5
CYCLE_LENGTH = 24


class ZIDataError(ValueError):
    pass


@dataclass
class SpatioTemporalGraph:
    num_nodes: int
    adjacency_views: List[np.ndarray]
    view_names: List[str]
    _support: Optional[torch.Tensor] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ZIDataError(f"num_nodes must be positive, got {self.num_nodes}")
        if not self.adjacency_views:
            raise ZIDataError("graph needs at least one adjacency view")
        if len(self.view_names) != len(self.adjacency_views):
            raise ZIDataError("one name per adjacency view required")
        views = []
        for name, adj in zip(self.view_names, self.adjacency_views):
            adj = np.asarray(adj, dtype=np.float32)
            if adj.shape != (self.num_nodes, self.num_nodes):
                raise ZIDataError(f"view {name!r} has shape {adj.shape}, expected "
                                  f"({self.num_nodes}, {self.num_nodes})")
            if not np.all(np.isfinite(adj)) or np.any(adj < 0):
                raise ZIDataError(f"view {name!r} must have finite non-negative weights")
            if not np.array_equal(adj, adj.T):
                raise ZIDataError(f"view {name!r} is not symmetric")
            views.append(adj)
        self.adjacency_views = views

    @property
    def num_views(self) -> int:
        return len(self.adjacency_views)

    def normalized_support(self) -> torch.Tensor:
        """
        Symmetrically normalized adjacency with self loops for every view,
        D^-1/2 (A + I) D^-1/2, stacked to shape (K, N, N).
        """
        if self._support is None:
            eye = np.eye(self.num_nodes, dtype=np.float64)
            stacked = []
            for adj in self.adjacency_views:
                a_hat = adj.astype(np.float64) + eye
                d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
                stacked.append(d_inv_sqrt[:, None] * a_hat * d_inv_sqrt[None, :])
            self._support = torch.from_numpy(np.stack(stacked).astype(np.float32))
        return self._support


@dataclass
class SeriesDataset:
    features: np.ndarray      # (L, N, D) float32
    labels: np.ndarray        # (L, N) int32 event counts
    graph: SpatioTemporalGraph
    timestamps: np.ndarray    # (L,) int32, monotone

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int32)
        if self.features.ndim != 3:
            raise ZIDataError(f"features must be (L, N, D), got shape {self.features.shape}")
        length, num_nodes, _ = self.features.shape
        if self.labels.shape != (length, num_nodes):
            raise ZIDataError(f"labels shape {self.labels.shape} does not match features "
                              f"{self.features.shape}")
        if self.timestamps.shape != (length,):
            raise ZIDataError("one timestamp per time step required")
        if num_nodes != self.graph.num_nodes:
            raise ZIDataError(f"features have {num_nodes} nodes, graph has {self.graph.num_nodes}")
        if np.any(self.labels < 0):
            raise ZIDataError("labels must be non-negative counts")
        if not np.all(np.isfinite(self.features)):
            raise ZIDataError("features contain NaN or Inf")
        if length > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ZIDataError("timestamps must be strictly increasing")

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.features.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    @property
    def zero_rate(self) -> float:
        return float(np.mean(self.labels == 0)) if self.labels.size else 0.0


@dataclass
class SegmentBatch:
    X: torch.Tensor                    # (B, T, N, D)
    Y: torch.Tensor                    # (B, Δ, N), non-negative counts as float
    segment_start_times: List[int]

    def __post_init__(self):
        if self.X.dim() != 4 or self.Y.dim() != 3:
            raise ZIDataError("SegmentBatch expects X (B,T,N,D) and Y (B,Δ,N)")
        if self.X.shape[0] != self.Y.shape[0] or self.X.shape[2] != self.Y.shape[2]:
            raise ZIDataError(f"X {tuple(self.X.shape)} and Y {tuple(self.Y.shape)} disagree")
        if self.X.shape[1] < 1 or self.Y.shape[1] < 1:
            raise ZIDataError("history and horizon must both be at least 1")
        if len(self.segment_start_times) != self.X.shape[0]:
            raise ZIDataError("one start time per segment required")

    @property
    def batch_size(self) -> int:
        return self.X.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.X.shape[2]


@dataclass
class ClassPartition:
    """(segment, node) pairs split into minority (any non-zero label) and majority."""
    minority_mask: torch.Tensor  # (B, N) bool

    @property
    def majority_mask(self) -> torch.Tensor:
        return ~self.minority_mask

    @property
    def minority_index(self) -> Set[Tuple[int, int]]:
        return {tuple(pair) for pair in self.minority_mask.nonzero().tolist()}

    @property
    def majority_index(self) -> Set[Tuple[int, int]]:
        return {tuple(pair) for pair in self.majority_mask.nonzero().tolist()}

    @property
    def num_minority(self) -> int:
        return int(self.minority_mask.sum())

    @property
    def num_majority(self) -> int:
        return int(self.majority_mask.sum())

    @property
    def is_degenerate(self) -> bool:
        return self.num_minority == 0 or self.num_majority == 0

    def labels(self) -> torch.Tensor:
        """Flattened class labels (1 = minority) aligned with (B*N) anchors."""
        return self.minority_mask.reshape(-1).long()


# -- synthetic generation -------------------------------------------------

def grid_adjacency(num_nodes):
    rows = int(math.floor(math.sqrt(num_nodes)))
    cols = int(math.ceil(num_nodes / rows))
    adj = np.zeros((num_nodes, num_nodes), dtype=np.float32)
    for i in range(num_nodes):
        r, c = divmod(i, cols)
        for dr, dc in ((0, 1), (1, 0)):
            rr, cc = r + dr, c + dc
            j = rr * cols + cc
            if rr < rows and cc < cols and j < num_nodes:
                adj[i, j] = adj[j, i] = 1.0
    return adj


def geometric_adjacency(num_nodes, rng):
    """Random geometric view: Gaussian-kernel weights within a radius giving ~4 expected neighbours."""
    positions = rng.uniform(0.0, 1.0, size=(num_nodes, 2))
    radius = math.sqrt(4.0 / (math.pi * num_nodes))
    dist = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
    adj = np.where(dist <= radius, np.exp(-(dist / radius) ** 2), 0.0)
    np.fill_diagonal(adj, 0.0)
    adj = adj.astype(np.float32)
    return np.maximum(adj, adj.T)


def generate_synthetic_zid(num_nodes, length, feature_dim, zero_rate_target, seed) -> SeriesDataset:
    """
    Sample a zero-inflated count series over a two-view graph.

    Latent log-intensity follows an AR(1) process in time driven by
    one-hop graph-smoothed noise. Counts are negative binomial draws of
    that intensity, thinned by a Bernoulli gate calibrated to hit the
    requested zero rate.

    Args:
        num_nodes: Number of graph nodes N (>= 4)
        length: Number of time steps L (>= 64)
        feature_dim: Feature channels D (>= 1): lag-1 count, cycle sin/cos,
            then smoothed exogenous channels
        zero_rate_target: Desired fraction of zero labels in [0.5, 0.99]
        seed: RNG seed; identical seeds give bitwise-identical datasets

    Returns:
        SeriesDataset with raw (unstandardized) features
    """
    if not 0.5 <= zero_rate_target <= 0.99:
        raise ZIDataError(f"zero_rate out of range: {zero_rate_target} not in [0.5, 0.99]")
    if num_nodes < 4:
        raise ZIDataError(f"num_nodes must be >= 4, got {num_nodes}")
    if length < 64:
        raise ZIDataError(f"length must be >= 64, got {length}")
    if feature_dim < 1:
        raise ZIDataError(f"feature_dim must be >= 1, got {feature_dim}")

    rng = np.random.default_rng(seed)
    grid = grid_adjacency(num_nodes)
    geometric = geometric_adjacency(num_nodes, rng)
    graph = SpatioTemporalGraph(num_nodes, [grid, geometric], ["grid", "geometric"])

    smoothing = grid + np.eye(num_nodes, dtype=np.float32)
    smoothing = smoothing / smoothing.sum(axis=1, keepdims=True)

    node_bias = rng.normal(0.0, 0.7, size=num_nodes)
    latent = np.zeros((length, num_nodes))
    state = smoothing @ rng.normal(size=num_nodes)
    innovation = math.sqrt(1.0 - AR_COEF ** 2)
    for t in range(length):
        state = AR_COEF * state + innovation * (smoothing @ rng.normal(size=num_nodes))
        latent[t] = state

    phase = 2.0 * math.pi * np.arange(length) / CYCLE_LENGTH
    log_intensity = (math.log(BASE_MEAN) + node_bias[None, :] + LATENT_SCALE * latent
                     + 0.5 * np.sin(phase)[:, None])
    intensity = np.exp(log_intensity)

    # NB2 via gamma-Poisson mixture: mean = intensity, variance = μ + αμ²
    shape = 1.0 / NB_DISPERSION
    counts = rng.poisson(rng.gamma(shape, NB_DISPERSION * intensity))

    raw_zero_rate = float(np.mean(counts == 0))
    keep = (1.0 - zero_rate_target) / max(1.0 - raw_zero_rate, 1e-12)
    if keep > 1.0:
        logger.warning(f"Raw zero rate {raw_zero_rate:.3f} already exceeds target "
                       f"{zero_rate_target:.3f}; gate disabled")
        keep = 1.0
    gate = rng.uniform(size=counts.shape) < keep
    labels = (counts * gate).astype(np.int32)

    channels = [np.vstack([np.zeros((1, num_nodes)), labels[:-1]])]
    if feature_dim >= 2:
        channels.append(np.repeat(np.sin(phase)[:, None], num_nodes, axis=1))
    if feature_dim >= 3:
        channels.append(np.repeat(np.cos(phase)[:, None], num_nodes, axis=1))
    for _ in range(3, feature_dim):
        noise = rng.normal(0.0, 0.3, size=(length, num_nodes))
        channels.append(latent + noise @ smoothing.T)
    features = np.stack(channels, axis=-1).astype(np.float32)

    dataset = SeriesDataset(features, labels, graph, np.arange(length, dtype=np.int32))
    logger.debug(f"Generated synthetic ZID series N={num_nodes} L={length} D={feature_dim} "
                 f"zero_rate={dataset.zero_rate:.4f} (target {zero_rate_target})")
    return dataset


# -- ZIST container ---------------------------------------------------------

def write_tensor(path, array, dtype_code):
    array = np.ascontiguousarray(array, dtype=DTYPE_CODES[dtype_code])
    header = ZIST_MAGIC + struct.pack("<HB", ZIST_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    header += struct.pack("<B", dtype_code)
    with open(path, "wb") as f:
        f.write(header)
        f.write(array.tobytes(order="C"))
        f.flush()


def read_tensor(path):
    """
    Read a ZIST tensor file.

    Returns:
        (array, dtype_code)
    """
    if not os.path.exists(path):
        raise ZIDataError(f"missing file: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != ZIST_MAGIC:
        raise ZIDataError(f"header magic mismatch in {path}")
    offset = 4
    try:
        version, rank = struct.unpack_from("<HB", blob, offset)
        offset += 3
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        (dtype_code,) = struct.unpack_from("<B", blob, offset)
        offset += 1
    except struct.error:
        raise ZIDataError(f"truncated header in {path}")
    if version != ZIST_VERSION:
        raise ZIDataError(f"unsupported ZIST version {version} in {path}")
    if dtype_code not in DTYPE_CODES:
        raise ZIDataError(f"unknown dtype code {dtype_code} in {path}")
    dtype = DTYPE_CODES[dtype_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise ZIDataError(f"payload size mismatch in {path}: expected {expected} bytes, "
                          f"found {len(blob) - offset}")
    array = np.frombuffer(blob, dtype=dtype, offset=offset).reshape(dims).copy()
    return array, dtype_code


def save_dataset(dataset: SeriesDataset, path) -> str:
    os.makedirs(path, exist_ok=True)
    tensors = {
        "features.bin": (dataset.features, 0),
        "labels.bin": (dataset.labels, 1),
        "timestamps.bin": (dataset.timestamps, 1),
    }
    view_files = []
    for k, (name, adj) in enumerate(zip(dataset.graph.view_names, dataset.graph.adjacency_views)):
        filename = f"view_{k}.bin"
        tensors[filename] = (adj, 0)
        view_files.append({"name": name, "file": filename})

    checksums = {}
    for filename, (array, code) in tensors.items():
        target = os.path.join(path, filename)
        write_tensor(target, array, code)
        checksums[filename] = file_sha256(target)

    with open(os.path.join(path, "graph.json"), "w") as f:
        json.dump({"num_nodes": dataset.graph.num_nodes, "views": view_files}, f, indent=2)

    meta = {
        "format_version": FORMAT_VERSION,
        "N": dataset.num_nodes,
        "D": dataset.feature_dim,
        "L_total": dataset.length,
        "K": dataset.graph.num_views,
        "zero_rate": dataset.zero_rate,
        "dtypes": {name: DTYPE_NAMES[code] for name, (_, code) in tensors.items()},
        "checksums": checksums,
    }
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    logger.success(f"Dataset written to {path} (zero_rate={dataset.zero_rate:.4f})")
    return path


def _read_json(path):
    if not os.path.exists(path):
        raise ZIDataError(f"missing file: {path}")
    with open(path) as f:
        return json.load(f)


def load_dataset(path) -> SeriesDataset:
    """
    Load a dataset directory written by save_dataset (or any producer of
    the same layout) and validate every type invariant.
    """
    meta = _read_json(os.path.join(path, "meta.json"))
    graph_meta = _read_json(os.path.join(path, "graph.json"))

    def load(filename, expected_shape):
        array, code = read_tensor(os.path.join(path, filename))
        expected_checksum = meta.get("checksums", {}).get(filename)
        if expected_checksum is not None and file_sha256(os.path.join(path, filename)) != expected_checksum:
            raise ZIDataError(f"checksum mismatch for {filename}")
        if tuple(array.shape) != tuple(expected_shape):
            raise ZIDataError(f"shape mismatch for {filename}: meta says {tuple(expected_shape)}, "
                              f"payload has {tuple(array.shape)}")
        return array

    n, d, length = meta["N"], meta["D"], meta["L_total"]
    features = load("features.bin", (length, n, d))
    labels = load("labels.bin", (length, n))
    timestamps = load("timestamps.bin", (length,))

    views = graph_meta.get("views", [])
    if len(views) != meta["K"]:
        raise ZIDataError(f"meta.json declares K={meta['K']} views, graph.json lists {len(views)}")
    adjacency = [load(view["file"], (n, n)) for view in views]
    graph = SpatioTemporalGraph(n, adjacency, [view["name"] for view in views])
    dataset = SeriesDataset(features, labels, graph, timestamps)
    logger.info(f"Loaded dataset from {path}: N={n} D={d} L={length} zero_rate={dataset.zero_rate:.4f}")
    return dataset


# -- splitting, scaling, windowing ---------------------------------------------

def split_dataset(dataset: SeriesDataset, ratios: Sequence[float]):
    """Chronological split of the time axis (e.g. ratios (0.7, 0.1, 0.2))."""
    if any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ZIDataError(f"split ratios must be positive and sum to 1, got {list(ratios)}")
    bounds = np.floor(np.cumsum([0.0, *ratios]) * dataset.length).astype(int)
    bounds[-1] = dataset.length
    parts = []
    for start, stop in zip(bounds[:-1], bounds[1:]):
        parts.append(SeriesDataset(dataset.features[start:stop], dataset.labels[start:stop],
                                   dataset.graph, dataset.timestamps[start:stop]))
    return tuple(parts)


@dataclass
class FeatureScaler:
    mean: np.ndarray  # (D,)
    std: np.ndarray   # (D,)

    @classmethod
    def fit(cls, dataset: SeriesDataset):
        flat = dataset.features.reshape(-1, dataset.feature_dim).astype(np.float64)
        std = flat.std(axis=0)
        std[std < 1e-8] = 1.0
        return cls(flat.mean(axis=0), std)

    def transform(self, dataset: SeriesDataset) -> SeriesDataset:
        scaled = ((dataset.features - self.mean) / self.std).astype(np.float32)
        return SeriesDataset(scaled, dataset.labels, dataset.graph, dataset.timestamps)

    def to_json(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def standardize(train: SeriesDataset, *others: SeriesDataset):
    """Per-channel z-score of every dataset using train statistics only."""
    scaler = FeatureScaler.fit(train)
    return (scaler.transform(train), *[scaler.transform(d) for d in others]), scaler


def num_segments(length, history, horizon, stride):
    return (length - history - horizon) // stride + 1


def window(dataset: SeriesDataset, T, horizon, stride=1, batch_size=32) -> List[SegmentBatch]:
    """
    Cut the series into (history T, horizon Δ) segments and group them
    into batches in chronological order.

    Segment s uses X = features[s*stride : s*stride+T] and
    Y = labels[s*stride+T : s*stride+T+Δ].
    """
    if T < 1 or horizon < 1:
        raise ZIDataError("history and horizon must both be at least 1")
    if stride < 1:
        raise ZIDataError(f"stride must be >= 1, got {stride}")
    if batch_size < 1:
        raise ZIDataError(f"batch_size must be >= 1, got {batch_size}")
    if T + horizon > dataset.length:
        raise ZIDataError(f"T + Δ = {T + horizon} exceeds series length {dataset.length}")

    starts = [s * stride for s in range(num_segments(dataset.length, T, horizon, stride))]
    batches = []
    for i in range(0, len(starts), batch_size):
        chunk = starts[i:i + batch_size]
        X = np.stack([dataset.features[s:s + T] for s in chunk])
        Y = np.stack([dataset.labels[s + T:s + T + horizon] for s in chunk])
        batches.append(SegmentBatch(torch.from_numpy(X), torch.from_numpy(Y.astype(np.float32)),
                                    [int(dataset.timestamps[s]) for s in chunk]))
    return batches


def partition_labels(Y: torch.Tensor) -> ClassPartition:
    return ClassPartition(Y.amax(dim=1) > 0)


def class_partition(batch: SegmentBatch) -> ClassPartition:
    return partition_labels(batch.Y)


def minority_fraction(node_mask: torch.Tensor, partition: ClassPartition) -> float:
    """Fraction of selected (segment, node) victim pairs that belong to the minority class."""
    selected = node_mask.bool()
    total = int(selected.sum())
    if total == 0:
        return 0.0
    return float((selected & partition.minority_mask).sum()) / total
