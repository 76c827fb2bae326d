import functools
import json
import statistics

import pytest
import torch

from attack import AttackBudget, AttackSpec, build_attack, node_saliency, top_k_nodes
from conftest import HISTORY, HORIZON, make_batch, make_model
from losses import make_objective
from mingre import (AttentionWeights, EncoderConfig, Lambdas, MultiHeadSelfAttention, ReweighterState,
                    SelfAttentionBlock, SpatioTemporalEncoder, attention_summary, build_generator,
                    build_reweighter, gradient_gap, load_reweighter, mingre_generate, pair_magnitudes,
                    relative_gradient_gap, reweight_gradients, save_reweighter, soft_victim_mask,
                    stage1_attack_step, stage2_reweighter_update)
from stmodel import input_gradient
from trainer import TrainConfig, TrainingData, natural_train
from util import eval_mode, parameter_hash
from zidata import (SegmentBatch, class_partition, generate_synthetic_zid, minority_fraction, partition_labels,
                    standardize, window)


OBJECTIVE = make_objective("wrmse")


def encoder_config(**overrides):
    values = dict(input_dim=3, model_dim=8, num_heads=2, ffn_dim=16, seed=0)
    values.update(overrides)
    return EncoderConfig(**values)


def stage2_setup(lambdas=None, batch=None, learning_rate=1e-3):
    model = make_model()
    state = ReweighterState.create(encoder_config(), lambdas, learning_rate)
    batch = batch if batch is not None else make_batch(batch_size=3, seed=2)
    spec = AttackSpec(name="mingre", strategy="mingre", epsilon=0.3, eta=0.25, iters=2)
    return model, state, batch, spec


# -- encoder -----------------------------------------------------------------------------

def test_encoder_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        encoder_config(model_dim=10, num_heads=4)
    with pytest.raises(ValueError, match="stage_order"):
        encoder_config(stage_order=["segment", "segment", "spatial"])


def test_attention_rows_sum_to_one():
    attention = MultiHeadSelfAttention(16, 4)
    out = attention(torch.randn(3, 5, 16))
    assert out.shape == (3, 5, 16)
    weights = attention.last_attention
    assert weights.shape == (3, 4, 5, 5)
    assert torch.allclose(weights.sum(dim=-1), torch.ones(3, 4, 5), atol=1e-6)


def test_single_segment_attention_is_trivial():
    attention = MultiHeadSelfAttention(8, 2)
    attention(torch.randn(4, 1, 8))
    assert torch.equal(attention.last_attention, torch.ones(4, 2, 1, 1))


def test_attention_block_keeps_shape():
    block = SelfAttentionBlock(8, 2, 16)
    assert block(torch.randn(2, 3, 5, 8)).shape == (2, 3, 5, 8)


def test_encoder_output_shape():
    encoder = SpatioTemporalEncoder(EncoderConfig(input_dim=2, model_dim=16, num_heads=4))
    assert encoder(torch.randn(3, 4, 6, 2)).shape == (3, 4, 6, 16)


def test_encoder_stage_order_and_bypass():
    X = torch.randn(2, 4, 6, 3)
    reordered = SpatioTemporalEncoder(encoder_config(stage_order=["spatial", "segment", "temporal"]))
    assert reordered(X).shape == (2, 4, 6, 8)
    bypass = SpatioTemporalEncoder(encoder_config(use_encoder=False))
    assert torch.equal(bypass(X), bypass.input_proj(X))


# -- attention heads ---------------------------------------------------------------------

def test_attention_weights_shapes_and_range():
    reweighter = build_reweighter(encoder_config())
    weights = reweighter(torch.randn(3, 4, 8, 3))
    assert weights.att_sg.shape == (3, 1, 1, 1)
    assert weights.att_te.shape == (1, 4, 1, 1)
    assert weights.att_sp.shape == (1, 1, 8, 1)
    for tensor in (weights.att_sg, weights.att_te, weights.att_sp):
        assert torch.all(tensor > 0) and torch.all(tensor < 1)
    assert weights.att1_pairs().shape == (3, 8)


def test_constant_encoding_gives_equal_segment_weights():
    reweighter = build_reweighter(encoder_config())
    weights = reweighter.attention_weights(torch.ones(3, 4, 6, 8))
    assert torch.equal(weights.att_sg[0], weights.att_sg[1])
    assert torch.equal(weights.att_sg[1], weights.att_sg[2])


def test_same_seed_same_reweighter():
    assert parameter_hash(build_reweighter(encoder_config())) == parameter_hash(build_reweighter(encoder_config()))


# -- reweighting -------------------------------------------------------------------------

def test_unit_weights_double_the_gradient():
    grad = torch.randn(2, 4, 5, 3)
    weights = AttentionWeights.ones(2, 4, 5)
    assert torch.equal(reweight_gradients(grad, weights), 2 * grad)
    halved = AttentionWeights(weights.att_sg, torch.full((1, 4, 1, 1), 0.5), weights.att_sp)
    assert torch.equal(reweight_gradients(grad, halved), grad)


def test_reweight_rejects_broadcast_mismatch():
    weights = AttentionWeights(torch.ones(2, 1, 1, 1), torch.ones(1, 4, 1, 1), torch.ones(1, 1, 5, 1))
    with pytest.raises(ValueError, match="broadcast mismatch"):
        reweight_gradients(torch.randn(2, 4, 6, 3), weights)


def test_gradient_gap_example():
    grad = torch.tensor([0.2, 0.6]).reshape(1, 1, 2, 1)
    partition = partition_labels(torch.tensor([[[3.0, 0.0]]]))
    assert pair_magnitudes(grad).flatten().tolist() == pytest.approx([0.2, 0.6])
    assert float(gradient_gap(grad, partition)) == pytest.approx(0.4, abs=1e-6)


def test_gradient_gap_needs_both_classes():
    partition = partition_labels(torch.zeros(1, 2, 3))
    with pytest.raises(ValueError):
        gradient_gap(torch.randn(1, 4, 3, 2), partition)


def test_unit_weights_reduce_to_saliency_stpgd(graph, batches):
    budget = AttackBudget(epsilon=0.3, eta=0.25, num_iters=3)
    baseline_attack = build_attack(AttackSpec(strategy="saliency", epsilon=0.3, eta=0.25, iters=3), OBJECTIVE)
    reweighter = build_reweighter(encoder_config())
    for i, batch in enumerate(batches[:20]):
        model = make_model(seed=i % 3)
        weights = AttentionWeights.ones(batch.batch_size, batch.X.shape[1], batch.num_nodes)
        guided = mingre_generate(model, reweighter, batch, graph, budget, OBJECTIVE, weights=weights)
        baseline = baseline_attack(model, batch, graph)
        assert torch.equal(guided.mask.node_mask, baseline.mask.node_mask), f"batch {i}"
        assert torch.equal(guided.x_adv, baseline.x_adv), f"batch {i}"


def minority_node_batch(seed, node, batch_size=3):
    """Random features with counts only at one node."""
    batch = make_batch(batch_size=batch_size, seed=seed)
    Y = torch.zeros_like(batch.Y)
    Y[:, :, node] = 3.0
    return SegmentBatch(batch.X, Y, batch.segment_start_times)


def amplified_weights(batch_size, num_nodes, node, factor=10.0):
    att_sp = torch.ones(1, 1, num_nodes, 1)
    att_sp[0, 0, node, 0] = factor
    return AttentionWeights(torch.zeros(batch_size, 1, 1, 1), torch.ones(1, HISTORY, 1, 1), att_sp)


def test_amplified_minority_node_enters_victim_set(graph):
    budget = AttackBudget(epsilon=0.3, eta=0.25, num_iters=2)
    k = budget.victim_count(8)
    reweighter = build_reweighter(encoder_config())
    promoted = 0
    for seed in range(6):
        model = make_model(seed=seed)
        for node in range(8):
            batch = minority_node_batch(seed, node)
            with eval_mode(model):
                grad = input_gradient(model, OBJECTIVE, batch.X, batch.Y, graph)
            plain = top_k_nodes(node_saliency(grad), k)
            weights = amplified_weights(batch.batch_size, 8, node)
            expected = top_k_nodes(node_saliency(reweight_gradients(grad, weights)), k)
            guided = mingre_generate(model, reweighter, batch, graph, budget, OBJECTIVE, weights=weights)
            assert sorted(guided.mask.selected_nodes[0]) == sorted(expected)
            if node not in plain and node in expected:
                promoted += 1
    assert promoted > 0


# -- stage-2 relaxation ------------------------------------------------------------------

def test_soft_victim_mask_separates_top_k():
    saliency = torch.tensor([[0.1, 0.9, 0.4, 0.7, 0.2], [0.5, 0.3, 0.8, 0.1, 0.6]])
    soft = soft_victim_mask(saliency, 2)
    assert soft.shape == saliency.shape
    for row, scores in zip(soft, saliency):
        top = set(top_k_nodes(scores, 2))
        for node, value in enumerate(row.tolist()):
            assert (value > 0.5) == (node in top)


def test_soft_victim_mask_is_scale_free():
    saliency = torch.rand(6, dtype=torch.float64) + 0.1
    torch.testing.assert_close(soft_victim_mask(saliency, 3), soft_victim_mask(saliency * 37.0, 3))
    assert torch.equal(soft_victim_mask(saliency, 6), torch.ones(6, dtype=torch.float64))


def test_relative_gap_ignores_global_scale():
    grad = torch.randn(2, 4, 5, 3, dtype=torch.float64)
    partition = partition_labels(torch.tensor([[[2.0, 0, 0, 1.0, 0]] * 2] * 2))
    base = relative_gradient_gap(grad, partition)
    assert float(relative_gradient_gap(0.01 * grad, partition)) == pytest.approx(float(base), rel=1e-9)
    assert float(gradient_gap(0.01 * grad, partition)) == pytest.approx(0.01 * float(gradient_gap(grad, partition)),
                                                                       rel=1e-9)


# -- stages --------------------------------------------------------------------------------

def test_stage1_changes_no_parameters(graph):
    model, state, batch, spec = stage2_setup()
    model_before = parameter_hash(model)
    reweighter_before = parameter_hash(state.reweighter)
    example = stage1_attack_step(model, state.reweighter, batch, graph, spec.budget, OBJECTIVE)
    assert parameter_hash(model) == model_before
    assert parameter_hash(state.reweighter) == reweighter_before
    assert example.linf() <= 0.3 + 1e-6
    assert all(p.requires_grad for p in state.reweighter.parameters())


def test_stage2_terms_sum_to_total(graph):
    model, state, batch, spec = stage2_setup()
    example = build_generator(state, spec, OBJECTIVE)(model, batch, graph)
    model_before = parameter_hash(model)
    reweighter_before = parameter_hash(state.reweighter)
    result = stage2_reweighter_update(model, state, batch, graph, example, OBJECTIVE)
    assert set(result.terms) == {"task", "gap", "minority", "majority"}
    assert abs(sum(result.terms.values()) - result.total) <= 1e-9
    assert result.skipped == []
    assert result.gradient_gap is not None
    assert parameter_hash(model) == model_before
    assert parameter_hash(state.reweighter) != reweighter_before
    assert state.steps == 1


def test_stage2_restores_module_modes(graph):
    model, state, batch, spec = stage2_setup()
    example = build_generator(state, spec, OBJECTIVE)(model, batch, graph)
    model.train()
    state.reweighter.eval()
    stage2_reweighter_update(model, state, batch, graph, example, OBJECTIVE)
    assert model.training
    assert not state.reweighter.training
    state.reweighter.train()
    stage2_reweighter_update(model, state, batch, graph, example, OBJECTIVE, per_segment=True)
    assert state.reweighter.training
    assert all(p.requires_grad for p in model.parameters())


def test_stage2_task_term_reaches_every_head(graph):
    model, state, batch, spec = stage2_setup(Lambdas(1.0, 0.0, 0.0, 0.0))
    example = build_generator(state, spec, OBJECTIVE)(model, batch, graph)
    heads = {"segment": state.reweighter.segment_head, "temporal": state.reweighter.temporal_head}
    before = {name: parameter_hash(head) for name, head in heads.items()}
    stage2_reweighter_update(model, state, batch, graph, example, OBJECTIVE)
    for name, head in heads.items():
        assert parameter_hash(head) != before[name], name


def test_stage2_with_only_task_weight(graph):
    model, state, batch, spec = stage2_setup(Lambdas(1.0, 0.0, 0.0, 0.0))
    example = build_generator(state, spec, OBJECTIVE)(model, batch, graph)
    result = stage2_reweighter_update(model, state, batch, graph, example, OBJECTIVE)
    assert result.terms["gap"] == result.terms["minority"] == result.terms["majority"] == 0.0
    assert result.total == pytest.approx(result.terms["task"], abs=1e-12)


def test_stage2_skips_regularizers_on_degenerate_batch(graph):
    batch = SegmentBatch(torch.randn(2, 4, 8, 3), torch.zeros(2, 2, 8), [0, 1])
    model, state, batch, spec = stage2_setup(batch=batch)
    example = build_generator(state, spec, OBJECTIVE)(model, batch, graph)
    result = stage2_reweighter_update(model, state, batch, graph, example, OBJECTIVE)
    assert result.skipped == ["gap", "minority", "majority"]
    assert set(result.terms) == {"task"}
    assert result.gradient_gap is None


def test_ablated_reweighting_injects_unit_weights(batch):
    state = ReweighterState.create(encoder_config(), use_reweighting=False)
    weights = state.weights_for(batch)
    assert torch.equal(weights.att1_pairs(), torch.full((batch.batch_size, 8), 2.0))
    assert ReweighterState.create(encoder_config()).weights_for(batch) is None


def test_lambdas_from_list():
    assert Lambdas.from_list([1, 2, 3, 4]).to_list() == [1.0, 2.0, 3.0, 4.0]
    with pytest.raises(ValueError):
        Lambdas.from_list([1, 2])
    with pytest.raises(ValueError):
        Lambdas(gap=-1.0)


# -- persistence and summaries ----------------------------------------------------------

def test_reweighter_round_trip(tmp_path):
    state = ReweighterState.create(encoder_config(), Lambdas(1.0, 0.5, 0.0, 0.2))
    state.steps = 7
    save_reweighter(tmp_path, state, {"epoch": 2})
    loaded = load_reweighter(tmp_path)
    assert parameter_hash(loaded.reweighter) == parameter_hash(state.reweighter)
    assert loaded.lambdas == state.lambdas
    assert loaded.steps == 7
    meta = json.loads((tmp_path / "reweighter.meta.json").read_text())
    assert meta["epoch"] == 2 and "config_hash" in meta


def test_missing_reweighter_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_reweighter(tmp_path)


def test_attention_summary_shapes(batches):
    summary = attention_summary(build_reweighter(encoder_config()), batches[:2])
    segments = sum(b.batch_size for b in batches[:2])
    assert summary["segment_attention"].shape == (segments,)
    assert summary["segment_nonzero"].shape == (segments,)
    assert summary["node_attention"].shape == (8,)
    assert summary["pair_attention"].shape == (segments, 8)
    assert summary["pair_nonzero"].shape == (segments, 8)
    assert list(summary["segment_start"]) == [s for b in batches[:2] for s in b.segment_start_times]


@functools.lru_cache(maxsize=None)
def trained_sparse_target(seed):
    """16-node series at zero rate 0.9 with a naturally trained target."""
    dataset = generate_synthetic_zid(16, 200, 3, 0.9, seed=seed)
    (scaled,), _ = standardize(dataset)
    windows = window(scaled, HISTORY, HORIZON, stride=1, batch_size=8)
    model = make_model(num_nodes=16, seed=seed)
    natural_train(model, TrainingData(windows[:12], windows[12:14], dataset.graph),
                  TrainConfig(epochs=3, batch_size=8, learning_rate=5e-3, seed=seed))
    model.eval()
    return dataset.graph, windows, model


def current_gap(model, state, batch, graph):
    with eval_mode(model), torch.no_grad():
        weights = state.reweighter(batch.X)
    with eval_mode(model):
        grad = input_gradient(model, OBJECTIVE, batch.X, batch.Y, graph)
    return float(gradient_gap(reweight_gradients(grad, weights), class_partition(batch)))


def sparse_stage2_setup(seed):
    graph, windows, model = trained_sparse_target(seed)
    state = ReweighterState.create(EncoderConfig(input_dim=3, seed=seed), Lambdas())
    spec = AttackSpec(name="mingre", strategy="mingre", epsilon=0.5, eta=0.25, iters=5)
    return graph, windows, model, state, spec


@pytest.mark.slow
def test_stage2_closes_gradient_gap_without_degenerating():
    reductions = []
    for seed in range(5):
        graph, windows, model, state, spec = sparse_stage2_setup(seed)
        batch = next(b for b in windows if not class_partition(b).is_degenerate)
        example = build_generator(state, spec, OBJECTIVE)(model, batch, graph)
        before = current_gap(model, state, batch, graph)
        for _ in range(200):
            stage2_reweighter_update(model, state, batch, graph, example, OBJECTIVE)
        reductions.append(1.0 - current_gap(model, state, batch, graph) / before)

        with torch.no_grad():
            weights = state.reweighter(batch.X)
        for name in ("att_sg", "att_te", "att_sp"):
            assert getattr(weights, name).min() > 1e-3, f"seed {seed}: {name} collapsed"
    assert statistics.median(reductions) >= 0.2, reductions


@pytest.mark.slow
def test_trained_reweighter_includes_minority_nodes():
    differences = []
    for seed in range(5):
        graph, windows, model, state, spec = sparse_stage2_setup(seed)
        generate = build_generator(state, spec, OBJECTIVE)
        for batch in windows[:12]:
            example = generate(model, batch, graph)
            stage2_reweighter_update(model, state, batch, graph, example, OBJECTIVE)

        baseline_attack = build_attack(AttackSpec(strategy="saliency", epsilon=0.5, eta=0.25, iters=5), OBJECTIVE)
        guided, plain = [], []
        for i in range(20):
            batch = windows[i % len(windows)]
            partition = class_partition(batch)
            guided.append(minority_fraction(generate(model, batch, graph).mask.node_mask, partition))
            plain.append(minority_fraction(baseline_attack(model, batch, graph).mask.node_mask, partition))
        differences.append(statistics.median(guided) - statistics.median(plain))
    assert statistics.median(differences) >= 0.0, differences
