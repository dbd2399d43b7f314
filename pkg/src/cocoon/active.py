"""Cluster assignment, budgeted annotation, label propagation and the random baseline."""

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ContractError
from .models import cluster_distribution

ANNOTATED = "annotated"
PROPAGATED = "propagated"
UNLABELED = -1


@dataclass
class ClusterAssignment:
    cluster_ids: np.ndarray
    n_clusters: int
    distributions: np.ndarray = None

    def __post_init__(self):
        self.cluster_ids = np.asarray(self.cluster_ids, dtype=np.int64)
        if len(self.cluster_ids) and (self.cluster_ids.min() < 0
                                      or self.cluster_ids.max() >= self.n_clusters):
            raise ContractError("cluster ids must lie in [0, K)")

    def __len__(self):
        return len(self.cluster_ids)

    @property
    def sizes(self):
        return np.bincount(self.cluster_ids, minlength=self.n_clusters)

    @property
    def active_clusters(self):
        return np.flatnonzero(self.sizes)

    @property
    def n_active(self):
        return len(self.active_clusters)

    def members(self, cluster):
        return np.flatnonzero(self.cluster_ids == cluster)


@dataclass
class PropagatedLabelSet:
    """Per-example labels (``-1`` = unlabeled) with provenance.

    ``source_cluster`` is the cluster a propagated label came from (``-1`` for
    random-baseline annotations); ``annotated`` marks the examples whose oracle
    label was actually revealed.
    """

    labels: np.ndarray
    annotated: np.ndarray
    source_cluster: np.ndarray
    n_annotations: int

    @property
    def labeled_mask(self):
        return self.labels != UNLABELED

    @property
    def n_labeled_examples(self):
        return int(self.labeled_mask.sum())

    def provenance(self):
        out = np.full(len(self.labels), "", dtype=object)
        out[self.labeled_mask] = PROPAGATED
        out[self.annotated] = ANNOTATED
        return out

    def to_csv(self, path, config_hash=""):
        prov = self.provenance()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if config_hash:
                fh.write(f"# config_hash={config_hash}\n")
            writer.writerow(["example_id", "label_id", "provenance", "source_cluster"])
            for i in np.flatnonzero(self.labeled_mask):
                writer.writerow([i, int(self.labels[i]), prov[i], int(self.source_cluster[i])])

    @classmethod
    def from_csv(cls, path, n_examples):
        labels = np.full(n_examples, UNLABELED, dtype=np.int64)
        source = np.full(n_examples, -1, dtype=np.int64)
        annotated = np.zeros(n_examples, dtype=bool)
        with open(path, newline="") as fh:
            rows = csv.DictReader(line for line in fh if not line.startswith("#"))
            for row in rows:
                i = int(row["example_id"])
                if not 0 <= i < n_examples:
                    raise ContractError(f"example id {i} out of range")
                labels[i] = int(row["label_id"])
                source[i] = int(row["source_cluster"])
                annotated[i] = row["provenance"] == ANNOTATED
        return cls(labels, annotated, source, int(annotated.sum()))


def read_csv_hash(path):
    with open(path) as fh:
        first = fh.readline()
    return first.strip().split("=", 1)[1] if first.startswith("# config_hash=") else ""


def assign_clusters(params, embeddings, keep_distributions=False, batch_size=4096):
    """Argmax cluster per embedding; ties go to the lowest cluster index."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    dists = np.concatenate([cluster_distribution(params, ad.Tensor(embeddings[i:i + batch_size])).data
                            for i in range(0, len(embeddings), batch_size)]) \
        if len(embeddings) else np.zeros((0, params.config.n_clusters))
    return ClusterAssignment(np.argmax(dists, axis=1), params.config.n_clusters,
                             dists if keep_distributions else None)


def select_clusters_for_budget(assignment, budget, strategy="size", rng=None):
    """Pick which clusters get an annotation.

    ``"size"`` takes the ``budget`` largest active clusters (ties toward the lower
    id); ``"random"`` takes a uniform random subset of active clusters.  When the
    budget covers every active cluster all of them are returned.
    """
    if budget < 1:
        raise ContractError("budget must be >= 1")
    active = assignment.active_clusters
    if budget >= len(active):
        return active.copy()
    if strategy == "size":
        sizes = assignment.sizes[active]
        order = np.lexsort((active, -sizes))
        return np.sort(active[order[:budget]])
    if strategy == "random":
        if rng is None:
            raise ContractError("random cluster selection needs an rng")
        return np.sort(rng.choice(active, size=budget, replace=False))
    raise ContractError(f"unknown selection strategy {strategy!r}")


def draw_annotations(assignment, rng):
    """One uniform random member per cluster, drawn for all K clusters at once.

    Drawing for every cluster (selected or not) keeps each cluster's draw
    independent of the budget, so larger budgets label supersets.
    """
    u = rng.random(assignment.n_clusters)
    sizes = assignment.sizes
    picks = {}
    for k in assignment.active_clusters:
        members = assignment.members(k)
        picks[int(k)] = int(members[min(int(u[k] * sizes[k]), sizes[k] - 1)])
    return picks


def annotate_and_propagate(assignment, selected, oracle, rng=None, draws=None):
    """Reveal one member's oracle label per selected cluster and copy it to the cluster.

    ``draws`` may map cluster id -> annotated example id to fix the choice;
    otherwise members are drawn with :func:`draw_annotations`.
    """
    oracle = np.asarray(oracle)
    if len(oracle) != len(assignment):
        raise ContractError("oracle must label every example")
    if draws is None:
        if rng is None:
            raise ContractError("annotation needs an rng or explicit draws")
        draws = draw_annotations(assignment, rng)
    labels = np.full(len(assignment), UNLABELED, dtype=np.int64)
    source = np.full(len(assignment), -1, dtype=np.int64)
    annotated = np.zeros(len(assignment), dtype=bool)
    sizes = assignment.sizes
    for k in selected:
        k = int(k)
        if not 0 <= k < assignment.n_clusters or sizes[k] == 0:
            raise ContractError(f"selected cluster {k} is empty")
        who = draws[k]
        if assignment.cluster_ids[who] != k:
            raise ContractError(f"example {who} is not a member of cluster {k}")
        members = assignment.members(k)
        labels[members] = oracle[who]
        source[members] = k
        annotated[who] = True
    return PropagatedLabelSet(labels, annotated, source, len(selected))


@dataclass
class LabelQuality:
    precision: float
    recall: float
    n_labeled: int
    empty: bool = False


def label_precision_recall(propagated, oracle, eval_class_set):
    """Example-level precision/recall of propagated labels against the oracle.

    Only propagated labels naming a class in ``eval_class_set`` count toward
    precision; recall is relative to every example whose oracle class is in the
    set.  ``n_labeled`` is the number of annotations spent.
    """
    oracle = np.asarray(oracle)
    classes = np.asarray(list(eval_class_set))
    scored = propagated.labeled_mask & np.isin(propagated.labels, classes)
    correct = int((scored & (propagated.labels == oracle)).sum())
    total = int(scored.sum())
    relevant = int(np.isin(oracle, classes).sum())
    precision = correct / total if total else 0.0
    recall = correct / relevant if relevant else 0.0
    return LabelQuality(precision, recall, propagated.n_annotations, empty=total == 0)


def random_label_baseline(oracle, budget, rng):
    """Reveal the oracle label of ``budget`` examples drawn uniformly without replacement."""
    oracle = np.asarray(oracle)
    if budget < 1:
        raise ContractError("budget must be >= 1")
    if budget > len(oracle):
        raise ContractError(f"budget {budget} exceeds the {len(oracle)} available examples")
    chosen = rng.choice(len(oracle), size=budget, replace=False)
    labels = np.full(len(oracle), UNLABELED, dtype=np.int64)
    labels[chosen] = oracle[chosen]
    annotated = np.zeros(len(oracle), dtype=bool)
    annotated[chosen] = True
    return PropagatedLabelSet(labels, annotated, np.full(len(oracle), -1, dtype=np.int64), budget)


def class_coverage(label_set, eval_class_set):
    """Fraction of ``eval_class_set`` that received at least one label."""
    present = set(np.unique(label_set.labels[label_set.labeled_mask]).tolist())
    classes = list(eval_class_set)
    return sum(c in present for c in classes) / len(classes)
