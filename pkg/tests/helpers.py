"""Small shared builders for tests."""

from fractions import Fraction

import numpy as np

from cocoon.models import EncoderConfig, ModelConfig, init_params


def toy_config(d=8, k=5, c=3, audio=(5,), image=(6,), hidden=(7,), head=9):
    return ModelConfig(audio=EncoderConfig(audio, hidden, d), image=EncoderConfig(image, hidden, d),
                       head_hidden=head, n_clusters=k, n_classes=c, class_hidden=head)


def toy_params(seed=0, **kw):
    return init_params(toy_config(**kw), seed)


def zero_head(params, head):
    """Zero a coincidence head's output layer so it predicts exactly 0.5."""
    params[f"{head}.w1"].data = np.zeros_like(params[f"{head}.w1"].data)
    params[f"{head}.b1"].data = np.zeros_like(params[f"{head}.b1"].data)
    return params


def direct_counts(cluster_ids, selected, oracle, draw, classes):
    """Independent count: walk every example once."""
    correct = labeled = 0
    for i, k in enumerate(cluster_ids):
        if k in selected:
            lab = oracle[draw[k]]
            if lab in classes:
                labeled += 1
                correct += lab == oracle[i]
    relevant = sum(o in classes for o in oracle)
    p = Fraction(correct, labeled) if labeled else Fraction(0)
    return p, Fraction(correct, relevant)


FIXTURES = [
    # 20 examples, four clusters of mixed purity, one background label (9)
    (np.array([0] * 6 + [1] * 5 + [2] * 5 + [3] * 4),
     np.array([0, 0, 0, 1, 1, 9, 1, 1, 1, 1, 2, 2, 2, 0, 9, 9, 3, 3, 3, 3]), [0, 1, 2, 3]),
    (np.array([0, 1, 0, 1, 2, 2, 0, 1, 2, 3, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0]),
     np.array([0, 1, 0, 0, 2, 1, 0, 1, 2, 2, 2, 1, 1, 0, 2, 0, 0, 2, 2, 1]), [0, 1, 2]),
]


# acceptance verdicts, printed together at the end of the run by conftest
ACCEPTANCE = []


def verdict(criterion, ok, detail):
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok
