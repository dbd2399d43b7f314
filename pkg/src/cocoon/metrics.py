"""Retrieval, clustering and detection metrics.

Ties are broken by ascending example (or pair) id everywhere, so every metric
is a deterministic function of its inputs.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, UndefinedMetricError
from .utils import canonical_json

logger = logging.getLogger(__name__)

AUC_CLAMP = 1e-6


def average_precision(ranked_relevance):
    """Mean of precision@rank over the ranks that hold a relevant item."""
    rel = np.asarray(ranked_relevance, dtype=bool)
    if not rel.any():
        raise UndefinedMetricError("average precision needs at least one positive")
    ranks = np.flatnonzero(rel) + 1
    hits = np.arange(1, len(ranks) + 1)
    return float(np.mean(hits / ranks))


def rank_by(keys, descending=False):
    """Stable argsort; equal keys keep ascending id order."""
    keys = np.asarray(keys, dtype=np.float64)
    return np.argsort(-keys if descending else keys, kind="stable")


def average_precision_from_scores(scores, relevance, descending=True):
    order = rank_by(scores, descending=descending)
    return average_precision(np.asarray(relevance, dtype=bool)[order])


def cosine_distance_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return 1.0 - an @ bn.T


def qbe_average_precision(pos, neg):
    """AP of within-class pairs (positive x positive) against positive x negative pairs.

    Pairs are sorted by ascending cosine distance; pair ids follow
    enumeration order (positive-positive pairs first, row-major).
    """
    d_pp = cosine_distance_matrix(pos, pos)
    iu = np.triu_indices(len(pos), k=1)
    d_pn = cosine_distance_matrix(pos, neg).ravel()
    dist = np.concatenate([d_pp[iu], d_pn])
    rel = np.concatenate([np.ones(len(iu[0]), bool), np.zeros(len(d_pn), bool)])
    return average_precision_from_scores(dist, rel, descending=False)


def qbe_map(embeddings, labels, class_set=None, pairs_per_class=25, rng=None):
    """Query-by-example mean average precision over ``class_set``.

    For each class, up to ``pairs_per_class`` positive and as many negative
    examples are sampled (without replacement) and their pairwise cosine
    distances ranked.  Classes with fewer than two positives are skipped.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if rng is None:
        rng = np.random.default_rng(0)
    if class_set is None:
        class_set = np.unique(labels)
    aps = []
    for c in class_set:
        pos_idx = np.flatnonzero(labels == c)
        neg_idx = np.flatnonzero(labels != c)
        if len(pos_idx) < 2 or len(neg_idx) == 0:
            logger.warning("qbe_map: skipping class %s with %d positives", c, len(pos_idx))
            continue
        pos_idx = np.sort(rng.choice(pos_idx, min(pairs_per_class, len(pos_idx)), replace=False))
        neg_idx = np.sort(rng.choice(neg_idx, min(pairs_per_class, len(neg_idx)), replace=False))
        aps.append(qbe_average_precision(embeddings[pos_idx], embeddings[neg_idx]))
    if not aps:
        raise UndefinedMetricError("no class had enough positives for QbE")
    return float(np.mean(aps))


# clustering -----------------------------------------------------------------

def _entropy_of_counts(counts):
    counts = counts[counts > 0].astype(np.float64)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def homogeneity_completeness_v(assignment, oracle_labels):
    """(homogeneity, completeness, V-measure) in nats, with the 0/0 conventions set to 1."""
    k = np.asarray(assignment)
    c = np.asarray(oracle_labels)
    if len(k) == 0 or len(k) != len(c):
        raise ContractError("assignment and labels must be nonempty and equally long")
    _, ci = np.unique(c, return_inverse=True)
    _, ki = np.unique(k, return_inverse=True)
    table = np.zeros((ci.max() + 1, ki.max() + 1))
    np.add.at(table, (ci, ki), 1.0)
    n = table.sum()
    h_c = _entropy_of_counts(table.sum(axis=1))
    h_k = _entropy_of_counts(table.sum(axis=0))
    nz = table > 0
    joint = table[nz] / n
    per_cluster = np.broadcast_to(table.sum(axis=0, keepdims=True), table.shape)[nz]
    per_class = np.broadcast_to(table.sum(axis=1, keepdims=True), table.shape)[nz]
    h_c_given_k = -float((joint * np.log(table[nz] / per_cluster)).sum())
    h_k_given_c = -float((joint * np.log(table[nz] / per_class)).sum())
    h = 1.0 if h_c == 0 else 1.0 - h_c_given_k / h_c
    comp = 1.0 if h_k == 0 else 1.0 - h_k_given_c / h_k
    v = 0.0 if h + comp == 0 else 2 * h * comp / (h + comp)
    return h, comp, v


def v_measure(assignment, oracle_labels):
    return homogeneity_completeness_v(assignment, oracle_labels)[2]


# detection ------------------------------------------------------------------

def auc(pos_scores, neg_scores):
    """ROC AUC via the rank statistic; tied positive/negative pairs count one half."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("AUC needs nonempty positive and negative score sets")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    at_or_below = np.searchsorted(neg_sorted, pos, side="right")
    wins = below + 0.5 * (at_or_below - below)
    return float(wins.sum() / (len(pos) * len(neg)))


# Rational approximation of the normal quantile (P. J. Acklam), relative error
# below 1.15e-9, followed by one Halley step against erfc which brings it to
# near machine precision.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def norm_ppf(p):
    """Standard normal quantile for ``0 < p < 1``."""
    if not 0.0 < p < 1.0:
        raise ContractError(f"quantile argument must lie in (0, 1), got {p}")
    if p > 0.5:
        # 1 - p is exact here, and the lower tail avoids cancellation in the refinement
        return -norm_ppf(1.0 - p)
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        x = ((((( _C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    else:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    # Halley refinement
    e = 0.5 * math.erfc(-x / math.sqrt(2)) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def d_prime(auc_value):
    """sqrt(2) * inverse normal CDF of the AUC, clamped to [1e-6, 1 - 1e-6]."""
    a = min(max(float(auc_value), AUC_CLAMP), 1.0 - AUC_CLAMP)
    return math.sqrt(2.0) * norm_ppf(a)


# clip-level classification ----------------------------------------------------

def clip_level_scores(frame_scores, clip_ids):
    """Average frame scores per clip.  Returns (sorted clip ids, (n_clips, C) scores)."""
    frame_scores = np.asarray(frame_scores, dtype=np.float64)
    clip_ids = np.asarray(clip_ids)
    if len(frame_scores) == 0:
        raise ContractError("no frames to aggregate")
    ids, inverse, counts = np.unique(clip_ids, return_inverse=True, return_counts=True)
    sums = np.zeros((len(ids),) + frame_scores.shape[1:])
    np.add.at(sums, inverse, frame_scores)
    return ids, sums / counts.reshape((-1,) + (1,) * (frame_scores.ndim - 1))


def classifier_map(clip_scores, clip_labels, class_set=None):
    """Per-class AP and d' over clips, averaged over classes with a positive clip.

    ``clip_labels`` are integer class ids (one per clip).
    """
    clip_scores = np.asarray(clip_scores, dtype=np.float64)
    clip_labels = np.asarray(clip_labels)
    if class_set is None:
        class_set = range(clip_scores.shape[1])
    aps, dps = [], []
    for c in class_set:
        rel = clip_labels == c
        if not rel.any():
            logger.warning("classifier_map: class %s has no positive clip; skipped", c)
            continue
        aps.append(average_precision_from_scores(clip_scores[:, c], rel))
        if (~rel).any():
            dps.append(d_prime(auc(clip_scores[rel, c], clip_scores[~rel, c])))
    if not aps:
        raise UndefinedMetricError("no class had a positive clip")
    return float(np.mean(aps)), float(np.mean(dps)) if dps else 0.0


def recovery(value, baseline, topline):
    """Fraction of the baseline-to-topline range covered by ``value``."""
    if topline == baseline:
        raise ContractError("recovery needs topline != baseline")
    return (value - baseline) / (topline - baseline)


# reports --------------------------------------------------------------------

@dataclass
class EvalReport:
    """Named metrics plus the metadata needed to compare runs."""

    suite: str
    metrics: dict = field(default_factory=dict)
    split: str = "eval"
    seed: int = 0
    checkpoint_hash: str = ""
    config_hash: str = ""
    timestamp: str = None

    def to_dict(self):
        return {
            "suite": self.suite,
            "metrics": {k: self.metrics[k] for k in sorted(self.metrics)},
            "split": self.split,
            "seed": self.seed,
            "checkpoint_hash": self.checkpoint_hash,
            "config_hash": self.config_hash,
            "timestamp": self.timestamp,
        }

    def to_json(self):
        return canonical_json(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, raw):
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ContractError(f"malformed report: {exc}") from exc

    def csv_header(self):
        return ["suite", "split", "seed", "config_hash", "checkpoint_hash"] + sorted(self.metrics)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.csv_header())
        writer.writerow([self.suite, self.split, self.seed, self.config_hash,
                         self.checkpoint_hash] + [repr(self.metrics[k]) for k in sorted(self.metrics)])
        return buf.getvalue()
