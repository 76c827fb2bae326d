import functools
import math

import hypothesis.strategies as st
import numpy as np
import pytest
import torch
from hypothesis import given

from attack import (AttackBudget, AttackSpec, PerturbationMask, VictimContext, VictimStrategy, build_attack,
                    clean_vs_adv_eval, node_saliency, pagerank, project, select_victims, stpgd, top_k_nodes,
                    weighted_degree)
from conftest import HISTORY, HORIZON, make_batch, make_model
from losses import make_objective
from stmodel import input_gradient, predict
from trainer import TrainConfig, TrainingData, natural_train
from util import eval_mode, frozen, parameter_hash
from zidata import SpatioTemporalGraph, generate_synthetic_zid, standardize, window


OBJECTIVE = make_objective("wrmse")


def star_graph(n=5):
    adj = np.zeros((n, n), dtype=np.float32)
    adj[0, 1:] = adj[1:, 0] = 1.0
    return SpatioTemporalGraph(n, [adj], ["star"])


def full_mask(batch_size, num_nodes, nodes):
    mask = torch.zeros(batch_size, num_nodes, dtype=torch.bool)
    mask[:, nodes] = True
    return PerturbationMask(mask, VictimStrategy.SALIENCY)


@functools.lru_cache(maxsize=1)
def sparse_windows():
    """Standardized windows of a 90%-zero series; the lag-count channel reaches large z-scores."""
    dataset = generate_synthetic_zid(8, 256, 3, 0.9, seed=1)
    (scaled,), _ = standardize(dataset)
    return dataset.graph, window(scaled, HISTORY, HORIZON, stride=1, batch_size=2)


# -- budget -----------------------------------------------------------------------------

def test_budget_defaults_and_validation():
    budget = AttackBudget(epsilon=0.4)
    assert budget.step_alpha == pytest.approx(0.1)
    assert budget.victim_count(16) == 2
    assert budget.victim_count(3) == 1
    with pytest.raises(ValueError):
        AttackBudget(epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackBudget(epsilon=0.1, step_alpha=0.2)
    with pytest.raises(ValueError):
        AttackBudget(eta=0.0)
    assert AttackBudget(epsilon=0.0).step_alpha == 0.0


def test_attack_spec_round_trip():
    spec = AttackSpec(name="x", strategy="pagerank", epsilon=0.2, clip_range=[-3, 3])
    data = spec.to_json()
    assert data["strategy"] == "pagerank" and data["clip_range"] == [-3.0, 3.0]
    assert AttackSpec(**{**data, "clip_range": tuple(data["clip_range"])}) == spec
    with pytest.raises(ValueError):
        AttackSpec(clip_range=(1.0, 0.0))


# -- saliency and selection ------------------------------------------------------------

def test_saliency_hand_example():
    grads = torch.tensor([3.0, -4.0]).reshape(1, 2, 1, 1)
    assert float(node_saliency(grads)[0]) == 3.0


def test_saliency_all_negative_is_zero():
    grads = -torch.rand(2, 3, 4, 2) - 0.1
    assert torch.equal(node_saliency(grads), torch.zeros(4))


def test_saliency_matches_loop_reference():
    grads = torch.randn(2, 3, 5, 2, dtype=torch.float64)
    scores = node_saliency(grads)
    for n in range(5):
        total = 0.0
        for t in range(3):
            for d in range(2):
                mean = sum(float(grads[b, t, n, d]) for b in range(2)) / 2
                total += max(mean, 0.0) ** 2
        assert float(scores[n]) == pytest.approx(math.sqrt(total), abs=1e-9)


def test_saliency_per_segment_shape():
    assert node_saliency(torch.randn(3, 2, 4, 1), per_segment=True).shape == (3, 4)


def test_top_k_examples():
    assert set(top_k_nodes([0.5, 0.2, 0.9], 2)) == {2, 0}
    assert top_k_nodes([0.5, 0.5, 0.1], 1) == [0]


def test_pagerank_star_hub():
    graph = star_graph()
    scores = pagerank(graph.adjacency_views[0])
    assert scores.sum() == pytest.approx(1.0, abs=1e-6)
    context = VictimContext(graph, batch_size=2)
    mask = select_victims(VictimStrategy.PAGERANK, context, 1)
    assert mask.selected_nodes == [[0], [0]]


def test_degree_selection():
    graph = star_graph()
    assert weighted_degree(graph.adjacency_views[0])[0] == 4.0
    mask = select_victims("degree", VictimContext(graph, 1), 1)
    assert mask.selected_nodes == [[0]]


def test_random_selection_is_seeded():
    graph = star_graph(8)
    a = select_victims("random", VictimContext(graph, 2, seed=3), 3)
    b = select_victims("random", VictimContext(graph, 2, seed=3), 3)
    assert torch.equal(a.node_mask, b.node_mask)
    assert a.max_selected() == 3


def test_selection_needs_saliency():
    with pytest.raises(ValueError):
        select_victims("saliency", VictimContext(star_graph(), 1), 1)


def test_selection_rejects_oversized_k():
    with pytest.raises(ValueError):
        select_victims("degree", VictimContext(star_graph(), 1), 6)


# -- PGD -----------------------------------------------------------------------------------

def test_projection_clips_to_ball():
    x = torch.zeros(1, 1, 2, 1)
    P = torch.tensor([1.0, 0.0]).reshape(1, 1, 2, 1)
    out = project(x + 0.25, x, 0.1, P)
    assert out.flatten().tolist() == pytest.approx([0.1, 0.0])


def test_full_steps_stay_on_the_ball(graph, batch):
    model = make_model()
    budget = AttackBudget(epsilon=0.1, step_alpha=0.1, num_iters=3)
    example = stpgd(model, OBJECTIVE, batch.X, batch.Y, graph, budget, full_mask(batch.batch_size, 8, [0, 3]))
    delta = (example.x_adv - batch.X)[:, :, [0, 3]].abs()
    assert torch.all((delta < 1e-6) | ((delta - 0.1).abs() < 1e-6))
    others = [1, 2, 4, 5, 6, 7]
    assert torch.equal(example.x_adv[:, :, others], batch.X[:, :, others])


def test_projection_holds_ball_for_large_values():
    x = torch.tensor([7.3, -11.9, 1e4, 0.0]).reshape(1, 1, 4, 1)
    P = torch.ones_like(x)
    for epsilon in (0.1, 0.3, 0.5):
        out = project(x + 1.0, x, epsilon, P)
        assert float((out.double() - x.double()).abs().max()) <= epsilon
        out = project(x - 1.0, x, epsilon, P, clip_range=(-20.0, 20.0))
        assert float((out.double() - x.double()).abs().max()) <= epsilon


def test_full_ascent_on_sparse_windows_stays_in_budget():
    graph, windows = sparse_windows()
    model = make_model()
    for epsilon in (0.5, 0.3, 0.1):
        generate = build_attack(AttackSpec(epsilon=epsilon, eta=1.0, alpha=epsilon, iters=5), OBJECTIVE)
        for batch in windows[::16]:
            example = generate(model, batch, graph)
            assert example.linf() <= epsilon


def test_single_step_is_fgsm(graph, batch):
    model = make_model().eval()
    mask = full_mask(batch.batch_size, 8, [1, 4, 6])
    example = stpgd(model, OBJECTIVE, batch.X, batch.Y, graph, AttackBudget(0.25, 0.5, 0.25, 1), mask)
    with frozen(model), eval_mode(model):
        grad = input_gradient(model, OBJECTIVE, batch.X, batch.Y, graph)
    P = mask.as_tensor(batch.X.shape)
    expected = batch.X + 0.25 * torch.sign(grad * P)
    torch.testing.assert_close(example.x_adv, expected, rtol=0.0, atol=1e-6)
    assert torch.equal(torch.sign(example.x_adv - batch.X), torch.sign(grad * P))


@pytest.mark.parametrize("strategy", ["random", "saliency"])
def test_attack_is_deterministic(graph, batch, strategy):
    spec = AttackSpec(strategy=strategy, epsilon=0.3, eta=0.5, iters=4, seed=11)
    first = build_attack(spec, OBJECTIVE)(make_model(), batch, graph)
    second = build_attack(spec, OBJECTIVE)(make_model(), batch, graph)
    assert torch.equal(first.x_adv, second.x_adv)
    assert torch.equal(first.mask.node_mask, second.mask.node_mask)


def test_empty_mask_is_noop(graph, batch):
    model = make_model()
    mask = PerturbationMask(torch.zeros(batch.batch_size, 8, dtype=torch.bool), VictimStrategy.RANDOM)
    example = stpgd(model, OBJECTIVE, batch.X, batch.Y, graph, AttackBudget(0.5, 0.5), mask)
    assert torch.equal(example.x_adv, batch.X)


@given(st.floats(0.0, 1.0), st.floats(0.05, 1.0), st.floats(0.0, 1.0), st.integers(1, 4), st.integers(0, 10_000),
       st.sampled_from(["random", "degree", "pagerank", "saliency"]))
def test_budget_soundness(epsilon, eta, alpha_fraction, iters, seed, strategy):
    model = make_model(seed=seed % 7)
    graph, windows = sparse_windows()
    batch = windows[seed % len(windows)]
    spec = AttackSpec(name="fuzz", strategy=strategy, epsilon=epsilon, eta=eta,
                      alpha=epsilon * alpha_fraction, iters=iters, seed=seed)
    example = build_attack(spec, OBJECTIVE)(model, batch, graph)
    delta = (example.x_adv.double() - batch.X.double()).abs()
    assert float(delta.max()) <= epsilon + 1e-7
    untouched = ~example.mask.node_mask[:, None, :, None].expand_as(batch.X)
    assert torch.equal(example.x_adv[untouched], batch.X[untouched])
    assert example.mask.max_selected() <= math.ceil(eta * 8)


def test_attack_leaves_model_unchanged(graph, batch):
    model = make_model()
    before = parameter_hash(model)
    flags = [p.requires_grad for p in model.parameters()]
    build_attack(AttackSpec(strategy="saliency"), OBJECTIVE)(model, batch, graph)
    assert parameter_hash(model) == before
    assert [p.requires_grad for p in model.parameters()] == flags
    assert model.training


def test_loss_trace_starts_clean(graph, batch):
    model = make_model().eval()
    example = build_attack(AttackSpec(iters=4), OBJECTIVE)(model, batch, graph)
    assert len(example.loss_trace) == 5
    with torch.no_grad():
        clean = float(OBJECTIVE(predict(model, batch.X, graph), batch.Y))
    assert example.clean_loss == pytest.approx(clean)


def test_zero_budget_changes_nothing(graph, batches):
    model = make_model()
    spec = AttackSpec(name="none", epsilon=0.0)
    evaluation = clean_vs_adv_eval(model, batches[:3], graph, spec, OBJECTIVE)
    assert len(evaluation.rows) == 3
    for row in evaluation.rows:
        assert torch.equal(row.clean, row.adversarial)
    clean, adversarial = evaluation.reports()
    assert clean.to_json() == adversarial.to_json()


def test_full_coverage_strategies_coincide(graph, batches):
    model = make_model()
    results = []
    for strategy in ("random", "saliency"):
        spec = AttackSpec(name=strategy, strategy=strategy, epsilon=0.3, eta=1.0, iters=3)
        evaluation = clean_vs_adv_eval(model, batches[:2], graph, spec, OBJECTIVE)
        assert all(len(nodes) == 8 for row in evaluation.rows for nodes in row.victims)
        results.append(torch.cat([row.adversarial for row in evaluation.rows]))
    assert torch.equal(results[0], results[1])


@pytest.mark.slow
def test_attack_increases_loss_on_trained_model(dataset, batches):
    model = make_model()
    cfg = TrainConfig(epochs=5, batch_size=4, learning_rate=5e-3, seed=0)
    natural_train(model, TrainingData(batches[:15], batches[15:18], dataset.graph), cfg)
    generate = build_attack(AttackSpec(strategy="saliency", epsilon=0.5, eta=0.25, iters=10), OBJECTIVE)
    increased = 0
    total = 0
    for seed in range(100):
        batch = make_batch(batch_size=4, seed=1000 + seed)
        example = generate(model, batch, dataset.graph)
        increased += example.final_loss >= example.clean_loss
        total += 1
    assert increased / total >= 0.95
