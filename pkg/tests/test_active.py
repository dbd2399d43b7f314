import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cocoon import autodiff as ad
from cocoon.active import (
    ClusterAssignment,
    PropagatedLabelSet,
    annotate_and_propagate,
    assign_clusters,
    class_coverage,
    draw_annotations,
    label_precision_recall,
    random_label_baseline,
    read_csv_hash,
    select_clusters_for_budget,
)
from cocoon.exceptions import ContractError
from cocoon.losses import clustering_objective
from cocoon.models import cluster_distribution
from cocoon.trainer import Adam

from helpers import FIXTURES, direct_counts, toy_params


def assignment_from_sizes(sizes):
    return ClusterAssignment(np.repeat(np.arange(len(sizes)), sizes), len(sizes))


# selection --------------------------------------------------------------------

def test_size_selection_hand_case():
    a = assignment_from_sizes([5, 3, 3, 1])
    assert select_clusters_for_budget(a, 2).tolist() == [0, 1]
    assert select_clusters_for_budget(a, 10).tolist() == [0, 1, 2, 3]


def test_empty_clusters_never_selected():
    a = ClusterAssignment(np.array([0, 0, 2]), 4)
    assert select_clusters_for_budget(a, 4).tolist() == [0, 2]
    assert a.n_active == 2 <= min(4, 3)


@given(st.lists(st.integers(0, 6), min_size=1, max_size=10), st.integers(1, 10))
def test_size_selection_maximises_member_count(sizes, budget):
    if sum(sizes) == 0:
        return
    a = assignment_from_sizes(sizes)
    chosen = select_clusters_for_budget(a, budget)
    active = [k for k, s in enumerate(sizes) if s]
    best = max(sum(sizes[k] for k in combo)
               for combo in itertools.combinations(active, min(budget, len(active))))
    assert sum(sizes[k] for k in chosen) == best
    assert len(chosen) == min(budget, len(active))


def test_random_selection_needs_rng_and_is_subset():
    a = assignment_from_sizes([2, 2, 2, 2])
    with pytest.raises(ContractError):
        select_clusters_for_budget(a, 2, "random")
    got = select_clusters_for_budget(a, 2, "random", np.random.default_rng(0))
    assert len(set(got.tolist())) == 2 and set(got.tolist()) <= {0, 1, 2, 3}
    with pytest.raises(ContractError):
        select_clusters_for_budget(a, 0)
    with pytest.raises(ContractError):
        select_clusters_for_budget(a, 1, "nope")


# propagation ------------------------------------------------------------------

def test_singleton_and_pure_clusters():
    a = ClusterAssignment(np.array([0, 1, 1, 1]), 2)
    oracle = np.array([4, 2, 2, 2])
    for who in (1, 2, 3):
        ls = annotate_and_propagate(a, [0, 1], oracle, draws={0: 0, 1: who})
        assert np.array_equal(ls.labels, oracle)
        assert label_precision_recall(ls, oracle, range(5)).precision == 1.0


def test_majority_label_probability_by_enumeration():
    a = ClusterAssignment(np.zeros(3, dtype=int), 1)
    oracle = np.array([0, 0, 1])
    got = [annotate_and_propagate(a, [0], oracle, draws={0: w}).labels[0] for w in range(3)]
    assert Fraction(got.count(0), 3) == Fraction(2, 3)


def test_unselected_clusters_stay_unlabeled():
    a = ClusterAssignment(np.array([0, 0, 1, 1]), 2)
    ls = annotate_and_propagate(a, [1], np.array([0, 0, 1, 1]), np.random.default_rng(0))
    assert ls.labels.tolist()[:2] == [-1, -1]
    assert ls.n_annotations == 1 and ls.annotated.sum() == 1


def test_propagation_errors():
    a = ClusterAssignment(np.array([0, 0, 2]), 3)
    with pytest.raises(ContractError):
        annotate_and_propagate(a, [1], np.zeros(3), np.random.default_rng(0))
    with pytest.raises(ContractError):
        annotate_and_propagate(a, [0], np.zeros(2), np.random.default_rng(0))
    with pytest.raises(ContractError):
        annotate_and_propagate(a, [0], np.zeros(3), draws={0: 2})
    with pytest.raises(ContractError):
        ClusterAssignment(np.array([0, 5]), 3)


def test_draws_are_independent_of_budget():
    a = assignment_from_sizes([4, 3, 2, 1])
    oracle = np.arange(10) % 3
    d = draw_annotations(a, np.random.default_rng(7))
    small = annotate_and_propagate(a, select_clusters_for_budget(a, 2), oracle, draws=d)
    big = annotate_and_propagate(a, select_clusters_for_budget(a, 3), oracle, draws=d)
    lab = small.labels >= 0
    assert np.array_equal(small.labels[lab], big.labels[lab])


# label quality -----------------------------------------------------------------

def test_perfect_and_empty_cases():
    oracle = np.array([0, 0, 1, 1, 2])
    a = ClusterAssignment(oracle, 3)
    full = annotate_and_propagate(a, [0, 1, 2], oracle, np.random.default_rng(0))
    q = label_precision_recall(full, oracle, range(3))
    assert (q.precision, q.recall, q.empty) == (1.0, 1.0, False)
    none = annotate_and_propagate(a, [], oracle, np.random.default_rng(0))
    q = label_precision_recall(none, oracle, range(3))
    assert (q.precision, q.recall, q.empty) == (0.0, 0.0, True)


def test_mixed_cluster_hand_count():
    a = ClusterAssignment(np.zeros(4, dtype=int), 1)
    oracle = np.array([0, 0, 1, 1])
    ls = annotate_and_propagate(a, [0], oracle, draws={0: 0})
    q = label_precision_recall(ls, oracle, [0, 1])
    assert (q.precision, q.recall) == (0.5, 0.5)


@pytest.mark.parametrize("cluster_ids,oracle,classes", FIXTURES)
def test_quality_matches_exhaustive_enumeration(cluster_ids, oracle, classes):
    a = ClusterAssignment(cluster_ids, 4)
    members = [a.members(k).tolist() for k in range(4)]
    for budget in (1, 2, 4):
        selected = select_clusters_for_budget(a, budget).tolist()
        n = 0
        for combo in itertools.product(*[members[k] for k in selected]):
            draw = dict(zip(selected, combo))
            ls = annotate_and_propagate(a, selected, oracle, draws=draw)
            q = label_precision_recall(ls, oracle, classes)
            p, r = direct_counts(cluster_ids, selected, oracle, draw, classes)
            assert Fraction(q.precision).limit_denominator(10_000) == p
            assert Fraction(q.recall).limit_denominator(10_000) == r
            n += 1
        assert n == math.prod(len(members[k]) for k in selected)


def test_expected_precision_is_weighted_purity():
    # every oracle label is in the eval set, so the labeled count is fixed and
    # mean precision over draws equals sum_k n_k * sum_c (n_kc / n_k)^2 / sum_k n_k
    cluster_ids = np.array([0] * 5 + [1] * 4 + [2] * 3)
    oracle = np.array([0, 0, 0, 1, 2, 1, 1, 2, 2, 0, 0, 0])
    a = ClusterAssignment(cluster_ids, 3)
    selected = [0, 1, 2]
    precisions = []
    for combo in itertools.product(*[a.members(k).tolist() for k in selected]):
        ls = annotate_and_propagate(a, selected, oracle, draws=dict(zip(selected, combo)))
        precisions.append(label_precision_recall(ls, oracle, [0, 1, 2]).precision)
    purity = sum(
        np.sum(np.bincount(oracle[cluster_ids == k]) ** 2) / np.sum(cluster_ids == k)
        for k in selected) / len(oracle)
    assert np.mean(precisions) == pytest.approx(purity, abs=1e-12)
    assert max(precisions) <= 1.0


def test_recall_monotone_in_budget():
    rng = np.random.default_rng(3)
    cluster_ids = rng.integers(0, 8, 200)
    oracle = rng.integers(0, 4, 200)
    a = ClusterAssignment(cluster_ids, 8)
    d = draw_annotations(a, np.random.default_rng(0))
    recalls = [label_precision_recall(
        annotate_and_propagate(a, select_clusters_for_budget(a, b), oracle, draws=d),
        oracle, range(4)).recall for b in range(1, 9)]
    assert all(x <= y for x, y in zip(recalls, recalls[1:]))


# random baseline -----------------------------------------------------------------

def test_random_baseline_contract():
    oracle = np.arange(30) % 3
    ls = random_label_baseline(oracle, 7, np.random.default_rng(0))
    assert ls.n_labeled_examples == 7 == ls.n_annotations
    assert label_precision_recall(ls, oracle, range(3)).precision == 1.0
    full = random_label_baseline(oracle, 30, np.random.default_rng(0))
    assert np.array_equal(full.labels, oracle)
    with pytest.raises(ContractError):
        random_label_baseline(oracle, 31, np.random.default_rng(0))
    with pytest.raises(ContractError):
        random_label_baseline(oracle, 0, np.random.default_rng(0))


def test_rare_class_coverage_probability():
    oracle = np.array([0] * 9000 + [1] * 1000)
    rng = np.random.default_rng(11)
    hits = sum(class_coverage(random_label_baseline(oracle, 10, rng), [1]) == 1.0
               for _ in range(10_000))
    assert hits / 10_000 == pytest.approx(1 - 0.9 ** 10, abs=0.02)


# assignment ----------------------------------------------------------------------

def test_toy_head_finds_two_groups():
    p = toy_params(seed=0, d=2, k=2)
    rng = np.random.default_rng(0)
    emb = np.concatenate([rng.normal([5, 0], 0.3, (20, 2)), rng.normal([0, 5], 0.3, (20, 2))])
    w = p["p_clust.w"]
    opt = Adam([("w", w)], lr=0.05)
    for _ in range(200):
        loss = clustering_objective(cluster_distribution(p, ad.Tensor(emb)), 1.1)
        ad.backward(loss, [w])
        opt.step()
        p.renormalize_clusters()
    a = assign_clusters(p, emb)
    assert a.n_active == 2
    assert len(set(a.cluster_ids[:20])) == 1 and len(set(a.cluster_ids[20:])) == 1


def test_identical_embeddings_identical_assignments():
    p = toy_params(seed=1)
    e = np.tile(np.random.default_rng(0).standard_normal(8), (5, 1))
    a = assign_clusters(p, e)
    assert len(set(a.cluster_ids.tolist())) == 1
    assert a.n_active <= min(5, 5)


def test_csv_roundtrip(tmp_path):
    a = ClusterAssignment(np.array([0, 0, 1, 2]), 3)
    ls = annotate_and_propagate(a, [0, 2], np.array([3, 1, 2, 2]), draws={0: 1, 2: 3})
    path = tmp_path / "labels.csv"
    ls.to_csv(path, config_hash="deadbeef")
    assert read_csv_hash(path) == "deadbeef"
    back = PropagatedLabelSet.from_csv(path, 4)
    assert np.array_equal(back.labels, ls.labels)
    assert np.array_equal(back.annotated, ls.annotated)
    assert np.array_equal(back.source_cluster, ls.source_cluster)
    assert list(ls.provenance()) == ["propagated", "annotated", "", "annotated"]
