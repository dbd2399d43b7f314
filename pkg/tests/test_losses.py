import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cocoon import autodiff as ad
from cocoon.autodiff import Tensor
from cocoon.exceptions import ContractError
from cocoon.losses import (
    LabeledBatch,
    PairBatch,
    balanced_cross_entropy,
    class_cross_entropy,
    clustering_objective,
    interpolate,
    loss_aa,
    loss_av,
    loss_clust,
    loss_coin,
    loss_joint,
    mutual_information_estimate,
    one_hot,
)

from helpers import toy_params, zero_head


def batch(rng, b=3, modality="AA", negatives=None):
    x2 = rng.standard_normal((b, 5 if modality == "AA" else 6))
    return PairBatch(rng.standard_normal((b, 5)), x2, modality, negatives)


def bce_loop(prob, negatives=None):
    """Direct double loop over the balanced cross-entropy definition."""
    b = len(prob)
    p = np.clip(prob, 1e-7, 1 - 1e-7)
    pos = sum(math.log(p[i, i]) for i in range(b)) / b
    if negatives is None:
        pairs = [(i, j) for i in range(b) for j in range(b) if i != j]
    else:
        pairs = [(i, int(negatives[i])) for i in range(b)]
    neg = sum(math.log(1 - p[i, j]) for i, j in pairs) / len(pairs)
    return -(pos + neg)


def test_constant_half_predictor_gives_two_ln2(rng):
    for head, loss, mod in (("p_aa", loss_aa, "AA"), ("p_av", loss_av, "AV")):
        p = zero_head(toy_params(), head)
        assert loss(p, batch(rng, 4, mod)).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_hand_evaluated_two_by_two():
    prob = np.array([[0.8, 0.3], [0.3, 0.8]])
    assert balanced_cross_entropy(prob).item() == pytest.approx(-math.log(0.8) - math.log(0.7),
                                                                abs=1e-12)
    assert -math.log(0.8) - math.log(0.7) == pytest.approx(0.5798, abs=1e-4)


def test_negative_term_count():
    assert PairBatch(np.zeros((32, 5)), np.zeros((32, 5))).n_negatives == 992
    assert PairBatch(np.zeros((32, 5)), np.zeros((32, 5)), negatives=np.roll(np.arange(32), 1)
                     ).n_negatives == 32


@given(st.integers(2, 7), st.integers(0, 10_000))
def test_balanced_ce_matches_loop(b, seed):
    rng = np.random.default_rng(seed)
    prob = rng.uniform(0, 1, (b, b))
    assert balanced_cross_entropy(prob).item() == pytest.approx(bce_loop(prob), rel=1e-12)
    neg = (np.arange(b) + rng.integers(1, b, size=b)) % b
    assert balanced_cross_entropy(prob, neg).item() == pytest.approx(bce_loop(prob, neg), rel=1e-12)


def test_own_positive_as_negative_rejected():
    with pytest.raises(ContractError):
        balanced_cross_entropy(np.full((3, 3), 0.5), np.array([1, 1, 0]))


def test_pair_order_permutation_invariance(rng):
    p = toy_params(seed=2)
    bt = batch(rng, 5, "AV")
    perm = rng.permutation(5)
    shuffled = PairBatch(bt.x1[perm], bt.x2[perm], "AV")
    assert loss_av(p, bt).item() == pytest.approx(loss_av(p, shuffled).item(), abs=1e-10)


@pytest.mark.parametrize("loss,mod", [(loss_aa, "AA"), (loss_av, "AV")])
def test_coincidence_gradients(loss, mod, rng):
    p = toy_params(seed=4)
    bt = batch(rng, 3, mod)
    assert ad.gradient_check(lambda: loss(p, bt), [p[k] for k in p]) < 1e-4


def test_pair_batch_validation():
    with pytest.raises(ContractError):
        PairBatch(np.zeros((1, 5)), np.zeros((1, 5)))
    with pytest.raises(ContractError):
        PairBatch(np.zeros((2, 5)), np.zeros((3, 5)))
    with pytest.raises(ContractError):
        loss_aa(toy_params(), PairBatch(np.zeros((2, 5)), np.zeros((2, 6)), "AV"))


# clustering ------------------------------------------------------------------

@pytest.mark.parametrize("k", [2, 10, 100])
def test_uniform_clusters(k):
    dist = np.full((6, k), 1 / k)
    assert clustering_objective(dist, 1.1).item() == pytest.approx(-0.1 * math.log(k), abs=1e-12)


def test_clustering_hand_cases():
    assert clustering_objective(np.full((3, 10), 0.1), 1.1).item() == pytest.approx(-0.23026,
                                                                                    abs=1e-5)
    two = np.eye(2)
    assert clustering_objective(two, 1.1).item() == pytest.approx(-1.1 * math.log(2), abs=1e-6)
    assert -1.1 * math.log(2) == pytest.approx(-0.76246, abs=1e-5)
    collapsed = np.tile([1.0, 0.0, 0.0], (4, 1))
    assert abs(clustering_objective(collapsed, 1.1).item()) < 1e-5



def test_mutual_information_cases():
    assert mutual_information_estimate(np.tile([0.2, 0.3, 0.5], (4, 1))) == pytest.approx(0,
                                                                                       abs=1e-12)
    assert mutual_information_estimate(np.eye(6)) == pytest.approx(math.log(6), abs=1e-5)


@given(st.integers(0, 10_000))
def test_mi_identity_against_direct_formula(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((8, 5)) * 3
    dist = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    mi = mutual_information_estimate(dist)
    assert -clustering_objective(dist, 1.0).item() == pytest.approx(mi, abs=1e-10)
    # the clamp perturbs probabilities by at most 1e-7, so the plain formula agrees closely
    plain = float((dist * np.log(dist / dist.mean(0))).sum() / len(dist))
    assert mi == pytest.approx(plain, abs=1e-5)


def test_loss_clust_gradient(rng):
    p = toy_params(seed=7)
    x = rng.standard_normal((4, 5))
    assert ad.gradient_check(lambda: loss_clust(p, x), [p[k] for k in p.names(("f", "p_clust"))]
                             ) < 1e-3


# classification --------------------------------------------------------------

def test_class_cross_entropy_cases():
    y = one_hot([0, 2], 3)
    assert class_cross_entropy(y, y).item() <= 1e-6
    assert class_cross_entropy(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]])).item() == \
        pytest.approx(math.log(2))
    with pytest.raises(ContractError):
        class_cross_entropy(np.full((1, 2), 0.5), np.zeros((1, 2)))


def test_class_gradient(rng):
    from cocoon.losses import loss_class
    p = toy_params(seed=8)
    bt = LabeledBatch(rng.standard_normal((4, 5)), one_hot([0, 1, 2, 1], 3))
    assert ad.gradient_check(lambda: loss_class(p, bt), [p[k] for k in p.names(("f", "p_class"))]
                             ) < 1e-4


# interpolation ---------------------------------------------------------------

def test_coin_endpoints_are_exact(rng):
    p = toy_params(seed=9)
    aa, av = batch(rng, 3, "AA"), batch(rng, 3, "AV")
    assert loss_coin(p, aa, av, 0.0).item() == loss_av(p, av).item()
    assert loss_coin(p, aa, av, 1.0).item() == loss_aa(p, aa).item()
    x = rng.standard_normal((4, 5))
    assert loss_joint(p, aa, av, x, 0.1, 0.0).item() == loss_coin(p, aa, av, 0.1).item()
    assert loss_joint(p, aa, av, x, 0.1, 1.0, 1.1).item() == loss_clust(p, x, 1.1).item()
    mixed = loss_coin(p, aa, av, 0.1).item()
    assert mixed == pytest.approx(0.9 * loss_av(p, av).item() + 0.1 * loss_aa(p, aa).item())


def test_interpolate_arithmetic():
    assert interpolate(Tensor(2.0), Tensor(1.0), 0.1).item() == pytest.approx(1.9)
    assert interpolate(Tensor(1.0), Tensor(-0.5), 0.1).item() == pytest.approx(0.85)
    for bad in (-0.1, 1.5):
        with pytest.raises(ContractError):
            interpolate(Tensor(1.0), Tensor(1.0), bad)


def test_weight_range_checked(rng):
    p = toy_params()
    aa, av = batch(rng, 3, "AA"), batch(rng, 3, "AV")
    with pytest.raises(ContractError):
        loss_coin(p, aa, av, 1.2)
    with pytest.raises(ContractError):
        loss_joint(p, aa, av, np.zeros((2, 5)), 0.1, -0.2)
