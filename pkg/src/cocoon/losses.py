"""Coincidence, clustering and classification objectives and their interpolations."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ContractError
from .models import (
    class_distribution,
    cluster_distribution,
    coincidence_prob_matrix,
    embed_audio,
    embed_image,
)

DEFAULT_ALPHA = 0.1
DEFAULT_BETA = 0.1
DEFAULT_GAMMA = 1.1


@dataclass
class PairBatch:
    """B coinciding pairs; negatives are the cross pairings ``(x1[i], x2[j])``, ``i != j``.

    ``negatives`` is ``None`` for the all-pairs construction, or an int array
    giving one ``j != i`` per row for the single-random-negative variant.
    """

    x1: np.ndarray
    x2: np.ndarray
    modality: str = "AA"
    negatives: np.ndarray = None
    labels1: np.ndarray = None
    labels2: np.ndarray = None

    def __post_init__(self):
        if self.modality not in ("AA", "AV"):
            raise ContractError(f"unknown modality {self.modality!r}")
        if len(self.x1) != len(self.x2):
            raise ContractError("x1 and x2 must hold the same number of examples")
        if len(self.x1) < 2:
            raise ContractError("a pair batch needs B >= 2 (no negatives otherwise)")

    def __len__(self):
        return len(self.x1)

    @property
    def n_negatives(self):
        b = len(self)
        return b * (b - 1) if self.negatives is None else b


@dataclass
class LabeledBatch:
    x: np.ndarray
    y: np.ndarray  # (B, C) one-hot

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.ndim != 2 or len(y) != len(self.x):
            raise ContractError("labels must be a (B, C) array matching x")
        if np.any(y.sum(axis=1) <= 0):
            raise ContractError("every label row must be nonzero")
        self.y = y


@dataclass(frozen=True)
class CurriculumWeights:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        _check_unit("alpha", self.alpha)
        _check_unit("beta", self.beta)
        if not self.gamma > 0:
            raise ContractError("gamma must be positive")


def _check_unit(name, value):
    if not 0.0 <= value <= 1.0:
        raise ContractError(f"{name} must lie in [0, 1], got {value}")


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def balanced_cross_entropy(prob, negatives=None):
    """Balanced coincidence cross-entropy of a (B, B) probability matrix.

    Diagonal entries are positives; off-diagonal entries (or the selected
    ``negatives[i]`` column of each row) are negatives.  Each group is averaged
    separately.
    """
    prob = ad.as_tensor(prob)
    b = prob.shape[0]
    if prob.ndim != 2 or prob.shape[1] != b:
        raise ContractError(f"expected a square probability matrix, got {prob.shape}")
    if b < 2:
        raise ContractError("balanced cross-entropy needs B >= 2")
    prob = ad.clamp_prob(prob)
    eye = np.eye(b)
    if negatives is None:
        neg_mask = 1.0 - eye
    else:
        negatives = np.asarray(negatives)
        if np.any(negatives == np.arange(b)):
            raise ContractError("a negative cannot be the row's own positive")
        neg_mask = np.zeros((b, b))
        neg_mask[np.arange(b), negatives] = 1.0
    pos_term = ad.tsum(ad.log(prob) * eye) * (1.0 / b)
    neg_term = ad.tsum(ad.log(1.0 - prob) * neg_mask) * (1.0 / neg_mask.sum())
    return -(pos_term + neg_term)


def _coincidence_loss(params, batch, modality):
    if batch.modality != modality:
        raise ContractError(f"expected a {modality} batch, got {batch.modality}")
    e1 = embed_audio(params, batch.x1)
    if modality == "AA":
        e2, head = embed_audio(params, batch.x2), "p_aa"
    else:
        e2, head = embed_image(params, batch.x2), "p_av"
    return balanced_cross_entropy(coincidence_prob_matrix(params, head, e1, e2), batch.negatives)


def loss_aa(params, batch):
    """Audio/audio coincidence loss."""
    return _coincidence_loss(params, batch, "AA")


def loss_av(params, batch):
    """Audio/image coincidence loss."""
    return _coincidence_loss(params, batch, "AV")


def clustering_objective(dist, gamma=DEFAULT_GAMMA):
    """Mean per-row entropy minus ``gamma`` times the entropy of the mean row."""
    dist = ad.as_tensor(dist)
    if dist.ndim != 2:
        raise ContractError("cluster distributions must be a (B, K) array")
    per_row = ad.mean(ad.entropy(dist, axis=1))
    of_mean = ad.entropy(ad.mean(dist, axis=0))
    return per_row - gamma * of_mean


def loss_clust(params, x, gamma=DEFAULT_GAMMA):
    """Entropy-based clustering loss on a batch of audio examples."""
    return clustering_objective(cluster_distribution(params, embed_audio(params, x)), gamma)


def mutual_information_estimate(distributions):
    """Batch estimate of I(X; K) in nats: mean KL from each row to the mean row.

    Logs use the same probability clamp as the entropies in the loss.
    """
    p = np.asarray(distributions, dtype=np.float64)
    if p.ndim != 2:
        raise ContractError("cluster distributions must be a (B, K) array")
    log_p = np.log(np.clip(p, ad.PROB_FLOOR, ad.PROB_CEIL))
    log_mean = np.log(np.clip(p.mean(axis=0), ad.PROB_FLOOR, ad.PROB_CEIL))
    return float((p * (log_p - log_mean)).sum(axis=1).mean())


def class_cross_entropy(prob, y):
    prob = ad.as_tensor(prob)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != prob.shape:
        raise ContractError(f"labels {y.shape} do not match predictions {prob.shape}")
    if np.any(y.sum(axis=-1) <= 0):
        raise ContractError("every label row must be nonzero")
    return -ad.mean(ad.tsum(ad.log(ad.clamp_prob(prob)) * y, axis=-1))


def loss_class(params, batch):
    """Mean cross-entropy between one-hot labels and the classifier output."""
    return class_cross_entropy(class_distribution(params, embed_audio(params, batch.x)), batch.y)


def loss_coin(params, aa_batch, av_batch, alpha=DEFAULT_ALPHA):
    _check_unit("alpha", alpha)
    if alpha == 0.0:
        return loss_av(params, av_batch)
    if alpha == 1.0:
        return loss_aa(params, aa_batch)
    return interpolate(loss_av(params, av_batch), loss_aa(params, aa_batch), alpha)


def loss_joint(params, aa_batch, av_batch, clust_x, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA,
               gamma=DEFAULT_GAMMA):
    _check_unit("beta", beta)
    if beta == 0.0:
        return loss_coin(params, aa_batch, av_batch, alpha)
    if beta == 1.0:
        return loss_clust(params, clust_x, gamma)
    return interpolate(loss_coin(params, aa_batch, av_batch, alpha),
                       loss_clust(params, clust_x, gamma), beta)


def interpolate(first, second, weight):
    """``(1 - weight) * first + weight * second``; endpoints return the operand itself."""
    _check_unit("weight", weight)
    if weight == 0.0:
        return ad.as_tensor(first)
    if weight == 1.0:
        return ad.as_tensor(second)
    return ad.as_tensor(first) * (1.0 - weight) + ad.as_tensor(second) * weight
