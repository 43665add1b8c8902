import math

import numpy as np
import pytest
from scipy import stats

from oracles import adam_reference
from hmsg import autodiff as ad
from hmsg.autodiff import Parameter, Tape, Tensor
from hmsg.datasets import planted_block, planted_partition
from hmsg.exceptions import (
    EmptyMask,
    EmptyPairs,
    InsufficientNonEdges,
    LabelOutOfRange,
    NonFiniteGradient,
    SamplingCapExceeded,
    ShapeMismatch,
)
from hmsg.hetgraph import Schema, build_graph, parse_metapath
from hmsg.model import HmsgModel, ModelConfig, forward, logits
from hmsg.subgraph import generate_all
from hmsg.train import (
    LabelStore,
    PairSet,
    TrainConfig,
    TrainState,
    adam_step,
    cross_entropy_loss,
    history_csv,
    negative_sampling_loss,
    sample_negatives,
    train_semi_supervised,
    train_unsupervised,
)

SMALL = ModelConfig(hidden_dim=8, n_heads=2, subgraph_attn_dim=4)


def labels_of(y, train, n_classes=0):
    return LabelStore("P", y, train, [], [], n_classes)


# ------------------------------------------------------------ cross-entropy

def test_cross_entropy_examples():
    confident = Tensor(np.array([[0.0, -800.0, -800.0], [-800.0, 0.0, -800.0]]))
    assert cross_entropy_loss(confident, labels_of([0, 1], [0, 1], 3), [0, 1]).data == 0.0
    uniform = Tensor(np.zeros((4, 3)))
    loss = cross_entropy_loss(uniform, labels_of([0, 1, 2, 1], [0, 1, 2, 3]), [0, 1, 2, 3])
    assert loss.data == pytest.approx(math.log(3), abs=1e-15)


def test_cross_entropy_matches_loop():
    rng = np.random.default_rng(0)
    z = rng.normal(scale=3, size=(20, 4))
    y = rng.integers(0, 4, size=20)
    mask = np.array([1, 4, 5, 9, 13, 19])
    want = 0.0
    for v in mask:
        m = max(z[v])
        lse = m + math.log(sum(math.exp(c - m) for c in z[v]))
        want += lse - z[v, y[v]]
    got = cross_entropy_loss(Tensor(z), y, mask, reduction="sum")
    assert got.data == pytest.approx(want, rel=1e-13)
    assert cross_entropy_loss(Tensor(z), y, mask).data == pytest.approx(want / len(mask), rel=1e-13)


def test_cross_entropy_uniform_gradient():
    z = Tensor(np.zeros((5, 3)), requires_grad=True)
    y = np.array([0, 2, 1, 1, 0])
    mask = [0, 1, 3]
    with Tape() as tape:
        loss = cross_entropy_loss(z, y, mask)
    (g,) = ad.leaf_gradients(tape, loss, [z])
    for v in mask:
        assert g[v, y[v]] == pytest.approx((1 / 3 - 1) / 3, abs=1e-15)
    assert np.all(g[[2, 4]] == 0)


def test_cross_entropy_errors():
    with pytest.raises(EmptyMask):
        cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 1], [])
    with pytest.raises(LabelOutOfRange):
        cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 5], [1])
    with pytest.raises(ShapeMismatch):
        cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 1, 2], [2])


def test_losses_stay_finite_for_large_inputs():
    z = Tensor(np.array([[1e4, -1e4, 0.0]]))
    assert np.isfinite(cross_entropy_loss(z, [1], [0]).data)
    big = Tensor(np.array([[100.0, 100.0]]))
    assert np.isfinite(negative_sampling_loss(big, Tensor(-big.data), [[0, 0]], [[0, 0]]).data)


# ------------------------------------------------------------ negative sampling

def test_negative_sampling_examples():
    zero = Tensor(np.zeros((2, 4)))
    assert negative_sampling_loss(zero, zero, [[0, 1]], np.empty((0, 2)), "sum").data == pytest.approx(math.log(2))
    assert negative_sampling_loss(zero, zero, [[0, 0]], [[1, 1]], "sum").data == pytest.approx(2 * math.log(2))
    src = Tensor(np.array([[4.0, 2.0], [-4.0, -2.0]]))
    dst = Tensor(np.array([[4.0, 2.0]]))  # scores: +20 and -20
    loss = negative_sampling_loss(src, dst, [[0, 0]], [[1, 0]]).data
    assert loss == pytest.approx(-2 * math.log(1 / (1 + math.exp(-20))), rel=1e-6)
    assert loss == pytest.approx(4.1e-9, rel=0.01)


def test_negative_sampling_matches_loop():
    rng = np.random.default_rng(1)
    zs, zd = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
    pos = rng.integers(0, 5, size=(7, 2))
    neg = rng.integers(0, 5, size=(7, 2))
    want = 0.0
    for v, u in pos:
        want -= math.log(1 / (1 + math.exp(-float(zs[v] @ zd[u]))))
    for v, u in neg:
        want -= math.log(1 / (1 + math.exp(float(zs[v] @ zd[u]))))
    got = negative_sampling_loss(Tensor(zs), Tensor(zd), pos, neg).data
    assert got == pytest.approx(want / len(pos), rel=1e-12)


def test_empty_positives():
    with pytest.raises(EmptyPairs):
        negative_sampling_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), np.empty((0, 2)), [[0, 1]])


# ------------------------------------------------------------ sampler

def bipartite_graph(n_u, n_i, edges):
    return build_graph(Schema(("U", "I"), {"UI": ("U", "I")}), {"U": n_u, "I": n_i}, [("UI", u, v) for u, v in edges])


def test_complete_graph_has_no_negatives():
    g = bipartite_graph(2, 3, [(u, v) for u in range(2) for v in range(3)])
    with pytest.raises(InsufficientNonEdges):
        sample_negatives(g, "UI", 1, np.random.default_rng(0))


def test_single_non_edge_is_forced():
    g = bipartite_graph(2, 2, [(0, 0), (0, 1), (1, 1)])
    assert sample_negatives(g, "UI", 1, np.random.default_rng(0)).tolist() == [[1, 0]]


def test_sampling_cap():
    g = bipartite_graph(20, 20, [(u, v) for u in range(20) for v in range(20) if (u, v) != (3, 4)])
    with pytest.raises(SamplingCapExceeded):
        sample_negatives(g, "UI", 1, np.random.default_rng(0), cap=5)


def test_negatives_uniform_over_non_edges():
    rng = np.random.default_rng(2)
    hit = rng.random((8, 6)) < 0.3
    g = bipartite_graph(8, 6, list(zip(*map(list, np.nonzero(hit)))))
    non_edges = [(u, v) for u in range(8) for v in range(6) if not hit[u, v]]
    rng = np.random.default_rng(3)
    draws = np.concatenate([sample_negatives(g, "UI", len(non_edges), rng) for _ in range(30)])
    assert not any(hit[u, v] for u, v in draws)
    counts = np.zeros((8, 6))
    np.add.at(counts, (draws[:, 0], draws[:, 1]), 1)
    observed = np.array([counts[u, v] for u, v in non_edges])
    assert observed.sum() == len(draws)
    assert stats.chisquare(observed).pvalue > 1e-3


def test_sampler_k_1000():
    rng = np.random.default_rng(4)
    hit = rng.random((40, 40)) < 0.1
    g = bipartite_graph(40, 40, list(zip(*map(list, np.nonzero(hit)))))
    draws = sample_negatives(g, "UI", 1000, np.random.default_rng(5))
    assert draws.shape == (1000, 2) and not hit[draws[:, 0], draws[:, 1]].any()


# ------------------------------------------------------------ adam

def test_adam_zero_gradient_keeps_params():
    p = Parameter("p", np.array([1.0, -2.0]))
    state = TrainState.for_params([p])
    adam_step([p], {"p": np.zeros(2)}, state)
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_first_step_is_about_lr():
    p = Parameter("p", np.array([0.0]))
    state = TrainState.for_params([p])
    adam_step([p], {"p": np.array([3.7])}, state, lr=0.005)
    assert p.data[0] == pytest.approx(-0.005, rel=1e-6)


def test_adam_matches_reference_bitwise():
    A = np.array([[3.0, 0.5], [0.5, 1.0]])
    grad = lambda x: A @ x  # noqa: E731
    p = Parameter("p", np.array([1.0, -1.5]))
    state = TrainState.for_params([p])
    for _ in range(5):
        adam_step([p], {"p": grad(p.data)}, state, lr=0.1, weight_decay=0.01)
    want, _ = adam_reference([1.0, -1.5], grad, 5, lr=0.1, weight_decay=0.01)
    assert np.array_equal(p.data, want)


def test_adam_rejects_bad_gradients():
    p = Parameter("p", np.zeros(2))
    with pytest.raises(ShapeMismatch):
        adam_step([p], {"p": np.zeros(3)}, TrainState.for_params([p]))
    with pytest.raises(NonFiniteGradient):
        adam_step([p], {"p": np.array([np.nan, 0.0])}, TrainState.for_params([p]))


def test_adam_is_repeatable():
    def once():
        p = Parameter("p", np.array([0.3, 0.1]))
        adam_step([p], {"p": np.array([0.2, -5.0])}, TrainState.for_params([p]), weight_decay=0.001)
        return p.data

    assert np.array_equal(once(), once())


# ------------------------------------------------------------ full-model gradient

@pytest.mark.parametrize("aggregator", ["attention", "mean"])
def test_full_model_gradient_check(toy, aggregator):
    mps = [parse_metapath(m, toy.graph.schema) for m in ("PAP", "PSP", "PA", "PS")]
    sgs = generate_all(toy.graph, mps)
    cfg = ModelConfig(hidden_dim=4, n_heads=2, subgraph_attn_dim=3, aggregator=aggregator, seed=1)
    model = HmsgModel.build(cfg, toy.features, sgs, toy.labels.n_classes, "P")

    def loss(*_params):
        res = forward(sgs, toy.features, model, training=False)
        return cross_entropy_loss(logits(res, model), toy.labels, toy.labels.train)

    assert ad.gradient_check(loss, model.parameters()) < 1e-4


# ------------------------------------------------------------ loops

def small_partition(seed=0):
    return planted_partition(n_target=60, n_aux=40, feat_dim=8, seed=seed)


def test_patience_zero_stops_at_first_non_improvement():
    ds = small_partition()
    res = train_semi_supervised(ds.graph, ds.features, ds.labels, ["PAP", "PA"], SMALL,
                                TrainConfig(patience=0, max_epochs=200, lr=0.05))
    vals = [r.val_metric for r in res.history]
    assert all(b < a for a, b in zip(vals[:-2], vals[1:-1]))
    assert vals[-1] >= min(vals[:-1])
    assert res.best_metric == min(vals)


def test_zero_learning_rate_keeps_parameters():
    ds = small_partition()
    init = HmsgModel.build(SMALL, ds.features, generate_all(ds.graph, [parse_metapath("PAP", ds.graph.schema)]),
                           ds.labels.n_classes, "P").state_dict()
    res = train_semi_supervised(ds.graph, ds.features, ds.labels, ["PAP"], SMALL,
                                TrainConfig(lr=0.0, weight_decay=0.0, max_epochs=5, patience=10))
    for k, v in res.model.state_dict().items():
        assert np.array_equal(v, init[k])
    assert len({r.val_metric for r in res.history}) == 1


def test_best_checkpoint_has_minimum_validation_loss():
    ds = small_partition(seed=3)
    res = train_semi_supervised(ds.graph, ds.features, ds.labels, ["PAP", "PSP"], SMALL,
                                TrainConfig(max_epochs=40, patience=5, lr=0.02))
    vals = [r.val_metric for r in res.history]
    assert res.best_metric == min(vals)
    assert res.history[res.best_epoch - 1].val_metric == min(vals)


@pytest.mark.slow
def test_semi_supervised_beats_uniform_loss_within_50_epochs():
    ds = planted_partition(seed=0)
    res = train_semi_supervised(ds.graph, ds.features, ds.labels, ["PAP", "PSP", "PA", "PS"], ModelConfig(),
                                TrainConfig(max_epochs=50, patience=50))
    assert min(r.val_metric for r in res.history) < math.log(3)


@pytest.mark.slow
def test_unsupervised_beats_ln2_within_50_epochs():
    ds = planted_block(seed=0)
    res = train_unsupervised(ds.graph, ds.features, ds.pairs, ["UIU", "IUI", "UI", "IU"], ModelConfig(),
                             TrainConfig(max_epochs=50, patience=50))
    # the loss sums one positive and one negative term per positive pair
    per_pair = [r.train_loss / 2 for r in res.history]
    assert min(per_pair) < math.log(2)


def test_unsupervised_deterministic_and_isolated():
    ds = planted_block(n_users=40, n_items=40, p_in=0.3, seed=1)
    cfg = TrainConfig(max_epochs=6, patience=10)
    a = train_unsupervised(ds.graph, ds.features, ds.pairs, ["UIU", "IUI"], SMALL, cfg)
    b = train_unsupervised(ds.graph, ds.features, ds.pairs, ["UIU", "IUI"], SMALL, cfg)
    assert history_csv(a.history) == history_csv(b.history)
    held = {tuple(p) for p in ds.pairs.held_out().tolist()}
    train_edges = {tuple(e) for e in a.graph.edges("UI").tolist()}
    all_edges = {tuple(e) for e in ds.graph.edges("UI").tolist()}
    assert not held & train_edges
    assert all_edges - train_edges == held


def test_unsupervised_needs_positives():
    ds = planted_block(n_users=20, n_items=20, seed=0)
    empty = PairSet("UI", np.empty((0, 2)), ds.pairs.val_pos, ds.pairs.test_pos, ds.pairs.val_neg, ds.pairs.test_neg)
    with pytest.raises(EmptyPairs):
        train_unsupervised(ds.graph, ds.features, empty, ["UIU"], SMALL, TrainConfig(max_epochs=1))


def test_history_format():
    ds = small_partition()
    res = train_semi_supervised(ds.graph, ds.features, ds.labels, ["PAP"], SMALL, TrainConfig(max_epochs=3))
    lines = res.history_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_metric,elapsed_ms"
    assert [line.split(",")[0] for line in lines[1:]] == ["1", "2", "3"]
    assert all(line.endswith(",0") for line in lines[1:])


def test_label_store_validation():
    with pytest.raises(Exception):
        LabelStore("P", [0, 1, 2], [0, 1], [1], [2])
    with pytest.raises(LabelOutOfRange):
        LabelStore("P", [0, -1, 1], [0, 1], [], [])
