"""Experiment steps shared by the command line, the estimators and the acceptance suite.

Every function takes its randomness from an explicit seed, so calling it twice
with the same inputs gives the same numbers.
"""

import logging

import numpy as np

from . import autodiff as ad
from .active import (
    annotate_and_propagate,
    assign_clusters,
    class_coverage,
    draw_annotations,
    label_precision_recall,
    random_label_baseline,
    select_clusters_for_budget,
)
from .exceptions import ContractError
from .metrics import (
    classifier_map,
    clip_level_scores,
    homogeneity_completeness_v,
    qbe_map,
)
from .models import class_distribution, embed_audio, init_params
from .synth import clip_ids, generate_world, split
from .trainer import TrainingData, run_curriculum

logger = logging.getLogger(__name__)

# Independent named RNG streams under the run seed.
STREAM_QBE = 11
STREAM_DRAWS = 21
STREAM_SELECT = 22
STREAM_RANDOM_LABELS = 23


def build_world(cfg):
    return generate_world(cfg.world)


def split_world(cfg, world):
    train, val, ev = split(world, cfg.split, seed=cfg.seed)
    return {"train": train, "val": val, "eval": ev}


def train(cfg, splits, stages=None, params=None, labels=None, start=0, stop=None,
          on_stage_end=None):
    """Run stages ``start:stop`` of the configured curriculum (or of ``stages``) on ``splits``."""
    curriculum = stages if stages is not None else cfg.curriculum
    data = TrainingData(splits["train"], splits["val"], labels, cfg.world.n_classes)
    return run_curriculum(curriculum, data, seed=cfg.seed, model_config=cfg.model,
                          params=params, start=start, stop=stop, config_hash=cfg.hash,
                          on_stage_end=on_stage_end)


def fresh_params(cfg):
    return init_params(cfg.model, cfg.seed)


def embed(params, world, batch_size=4096):
    if len(world) == 0:
        return np.zeros((0, params.config.d))
    return np.concatenate([embed_audio(params, world.audio[i:i + batch_size]).data
                           for i in range(0, len(world), batch_size)])


def qbe_score(features, world, eval_cfg, seed):
    rng = np.random.default_rng([seed, STREAM_QBE])
    return qbe_map(features, world.labels, world.eval_classes, eval_cfg.pairs_per_class, rng)


def evaluate_qbe(params, world, eval_cfg, seed):
    return {"qbe_map": qbe_score(embed(params, world), world, eval_cfg, seed)}


def evaluate_raw_qbe(world, eval_cfg, seed):
    return {"qbe_map": qbe_score(world.audio, world, eval_cfg, seed)}


def frame_class_scores(params, world):
    return class_distribution(params, ad.Tensor(embed(params, world))).data


def evaluate_classifier(params, world, eval_cfg):
    ids, labels = clip_ids(world, eval_cfg.clip_max_frames)
    _, scores = clip_level_scores(frame_class_scores(params, world), ids)
    m, dp = classifier_map(scores, labels, world.eval_classes)
    return {"map": m, "d_prime": dp, "n_clips": int(len(labels))}


def evaluate_clusters(params, world):
    assignment = assign_clusters(params, embed(params, world))
    h, c, v = homogeneity_completeness_v(assignment.cluster_ids, world.labels)
    return {"n_active": int(assignment.n_active), "v_measure": v, "homogeneity": h,
            "completeness": c}


def simulate_annotation(params, world, budget, strategy="cluster", selection="size", seed=0,
                        assignment=None):
    """Spend ``budget`` annotations on ``world`` and score the resulting labels.

    ``strategy="cluster"`` labels one random member of each selected cluster
    and propagates it; ``"random"`` labels ``budget`` random examples.
    Returns ``(label_set, row)``.
    """
    if budget < 1:
        raise ContractError("budget must be >= 1")
    oracle = world.labels
    row = {"budget": int(budget), "strategy": strategy}
    if strategy == "cluster":
        if params is None and assignment is None:
            raise ContractError("cluster labeling needs a trained clustering model")
        if assignment is None:
            assignment = assign_clusters(params, embed(params, world))
        # one draw per cluster shared by every budget, so larger budgets label supersets
        draws = draw_annotations(assignment, np.random.default_rng([seed, STREAM_DRAWS]))
        chosen = select_clusters_for_budget(assignment, budget, selection,
                                            np.random.default_rng([seed, STREAM_SELECT, budget]))
        labels = annotate_and_propagate(assignment, chosen, oracle, draws=draws)
        row["n_active"] = int(assignment.n_active)
        row["v_measure"] = homogeneity_completeness_v(assignment.cluster_ids, oracle)[2]
    elif strategy == "random":
        rng = np.random.default_rng([seed, STREAM_RANDOM_LABELS, budget])
        labels = random_label_baseline(oracle, budget, rng)
    else:
        raise ContractError(f"unknown labeling strategy {strategy!r}")
    quality = label_precision_recall(labels, oracle, world.eval_classes)
    row.update({"n_annotations": labels.n_annotations,
                "n_labeled_examples": labels.n_labeled_examples,
                "precision": quality.precision, "recall": quality.recall,
                "precision_undefined": quality.empty,
                "coverage": class_coverage(labels, world.eval_classes)})
    return labels, row
