import hypothesis.strategies as st
import numpy as np
import pytest
import torch
from hypothesis import given

from zidata import (SegmentBatch, SeriesDataset, SpatioTemporalGraph, ZIDataError, class_partition,
                    generate_synthetic_zid, grid_adjacency, load_dataset, minority_fraction, num_segments,
                    partition_labels, read_tensor, save_dataset, split_dataset, standardize, window,
                    write_tensor)


def tiny_dataset(length=10, num_nodes=3, feature_dim=2):
    features = np.arange(length * num_nodes * feature_dim, dtype=np.float32).reshape(length, num_nodes, feature_dim)
    labels = np.zeros((length, num_nodes), dtype=np.int32)
    labels[::3, 0] = 2
    graph = SpatioTemporalGraph(num_nodes, [grid_adjacency(num_nodes)], ["grid"])
    return SeriesDataset(features, labels, graph, np.arange(length))


def test_generate_hits_zero_rate():
    dataset = generate_synthetic_zid(16, 256, 2, 0.9, seed=7)
    assert 0.85 <= dataset.zero_rate <= 0.95
    assert dataset.features.shape == (256, 16, 2)
    assert dataset.graph.num_views == 2


def test_generate_rejects_zero_rate_out_of_range():
    with pytest.raises(ZIDataError, match="zero_rate out of range"):
        generate_synthetic_zid(16, 256, 2, 1.0, seed=0)


def test_generate_is_deterministic():
    a = generate_synthetic_zid(8, 128, 4, 0.8, seed=3)
    b = generate_synthetic_zid(8, 128, 4, 0.8, seed=3)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
    for va, vb in zip(a.graph.adjacency_views, b.graph.adjacency_views):
        assert np.array_equal(va, vb)


def test_graph_rejects_asymmetric_view():
    adj = np.zeros((3, 3), dtype=np.float32)
    adj[0, 1] = 1.0
    with pytest.raises(ZIDataError, match="not symmetric"):
        SpatioTemporalGraph(3, [adj], ["bad"])


def test_normalized_support_rows(graph):
    support = graph.normalized_support()
    assert support.shape == (2, 8, 8)
    assert torch.allclose(support, support.transpose(1, 2))


def test_dataset_rejects_negative_labels():
    data = tiny_dataset()
    labels = data.labels.copy()
    labels[0, 0] = -1
    with pytest.raises(ZIDataError, match="non-negative"):
        SeriesDataset(data.features, labels, data.graph, data.timestamps)


def test_save_then_load_round_trip(tmp_path, dataset):
    save_dataset(dataset, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert loaded.num_nodes == dataset.num_nodes
    assert loaded.feature_dim == dataset.feature_dim
    assert loaded.length == dataset.length
    assert np.array_equal(loaded.features, dataset.features)
    assert np.array_equal(loaded.labels, dataset.labels)
    assert loaded.graph.view_names == dataset.graph.view_names


def test_truncated_features_reported(tmp_path, dataset):
    path = tmp_path / "ds"
    save_dataset(dataset, path)
    target = path / "features.bin"
    blob = target.read_bytes()
    target.write_bytes(blob[:-8])
    with pytest.raises(ZIDataError, match="payload size mismatch"):
        load_dataset(path)


def test_corrupted_payload_fails_checksum(tmp_path, dataset):
    path = tmp_path / "ds"
    save_dataset(dataset, path)
    target = path / "labels.bin"
    blob = bytearray(target.read_bytes())
    blob[-1] ^= 0xFF
    target.write_bytes(bytes(blob))
    with pytest.raises(ZIDataError, match="checksum mismatch"):
        load_dataset(path)


def test_bad_magic(tmp_path):
    target = tmp_path / "t.bin"
    write_tensor(target, np.zeros((2, 2)), 0)
    blob = bytearray(target.read_bytes())
    blob[0:4] = b"NOPE"
    target.write_bytes(bytes(blob))
    with pytest.raises(ZIDataError, match="magic"):
        read_tensor(target)


def test_tensor_header_layout(tmp_path):
    target = tmp_path / "t.bin"
    write_tensor(target, np.ones((2, 3), dtype=np.int32), 1)
    blob = target.read_bytes()
    assert blob[:4] == b"ZIST"
    # magic, u16 version, u8 rank, 2 x u32 dims, u8 dtype, then payload
    assert len(blob) == 4 + 2 + 1 + 8 + 1 + 6 * 4
    array, code = read_tensor(target)
    assert code == 1 and array.dtype == np.int32


def test_window_segment_count():
    batches = window(tiny_dataset(length=10), 4, 2, stride=1, batch_size=32)
    assert sum(b.batch_size for b in batches) == 5


def test_window_rejects_short_series():
    with pytest.raises(ZIDataError):
        window(tiny_dataset(length=6), 4, 4)


def test_window_indexing():
    data = tiny_dataset(length=10)
    first = window(data, 4, 2, batch_size=1)[0]
    assert np.array_equal(first.X[0].numpy(), data.features[0:4])
    assert np.array_equal(first.Y[0].numpy(), data.labels[4:6].astype(np.float32))
    assert first.segment_start_times == [0]


@given(st.integers(6, 60), st.integers(1, 5), st.integers(1, 4), st.integers(1, 3), st.integers(1, 7))
def test_window_covers_every_segment(length, history, horizon, stride, batch_size):
    if history + horizon > length:
        return
    batches = window(tiny_dataset(length=length), history, horizon, stride, batch_size)
    starts = [s for b in batches for s in b.segment_start_times]
    assert len(starts) == num_segments(length, history, horizon, stride)
    assert starts == sorted(starts)
    assert all(b.batch_size <= batch_size for b in batches)


def test_partition_examples():
    Y = torch.tensor([[[0.0, 0.0], [0.0, 3.0]]])  # (B=1, Δ=2, N=2)
    partition = partition_labels(Y)
    assert (0, 0) in partition.majority_index
    assert (0, 1) in partition.minority_index


def test_all_zero_batch_has_no_minority():
    batch = SegmentBatch(torch.zeros(2, 3, 4, 1), torch.zeros(2, 2, 4), [0, 1])
    partition = class_partition(batch)
    assert partition.minority_index == set()
    assert partition.is_degenerate


@given(st.lists(st.integers(0, 3), min_size=12, max_size=12))
def test_partition_is_disjoint_cover(values):
    Y = torch.tensor(values, dtype=torch.float32).reshape(2, 2, 3)
    partition = partition_labels(Y)
    assert partition.minority_index.isdisjoint(partition.majority_index)
    assert len(partition.minority_index | partition.majority_index) == 6


def test_split_is_chronological():
    data = tiny_dataset(length=20)
    train, val, test = split_dataset(data, (0.5, 0.25, 0.25))
    assert (train.length, val.length, test.length) == (10, 5, 5)
    assert train.timestamps[-1] < val.timestamps[0] < test.timestamps[0]


def test_split_rejects_bad_ratios():
    with pytest.raises(ZIDataError):
        split_dataset(tiny_dataset(), (0.5, 0.4))


def test_standardize_uses_train_statistics():
    data = tiny_dataset(length=20)
    train, test = split_dataset(data, (0.5, 0.5))
    (train_s, test_s), scaler = standardize(train, test)
    flat = train_s.features.reshape(-1, train_s.feature_dim)
    assert np.allclose(flat.mean(axis=0), 0.0, atol=1e-5)
    assert np.allclose(test_s.features, (test.features - scaler.mean) / scaler.std, atol=1e-5)


def test_minority_fraction():
    Y = torch.tensor([[[1.0, 0.0, 0.0, 2.0]]])
    partition = partition_labels(Y)
    mask = torch.tensor([[True, True, False, False]])
    assert minority_fraction(mask, partition) == 0.5
    assert minority_fraction(torch.zeros(1, 4, dtype=torch.bool), partition) == 0.0
