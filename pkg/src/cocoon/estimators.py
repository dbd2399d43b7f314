"""scikit-learn style wrappers around the functional core.

* :class:`CoincidenceEmbedder` learns the audio embedding (and optionally the
  cluster head) from time-aligned audio/image frames.
* :class:`EntropyClustering` fits only a cosine cluster head on fixed vectors.
* :class:`ClusterLabelPropagator` spends an annotation budget on clusters.
* :class:`EmbeddingClassifier` is the shallow classifier on fixed vectors.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .active import (
    ClusterAssignment,
    annotate_and_propagate,
    draw_annotations,
    select_clusters_for_budget,
)
from .exceptions import ContractError
from .losses import DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_GAMMA, class_cross_entropy, \
    clustering_objective, one_hot
from .models import EncoderConfig, ModelConfig, cluster_distribution, embed_audio
from .synth import SynthWorld, WorldConfig
from .trainer import Adam, CurriculumConfig, StageConfig, TrainingData, run_curriculum


def _seed(random_state):
    if random_state is None:
        return 0
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    raise ValueError("random_state must be an int or None")


class CoincidenceEmbedder(TransformerMixin, BaseEstimator):
    """Audio embedding trained to predict which frames co-occur.

    ``fit`` takes flat audio frames plus the image frames recorded at the same
    time, the sequence each frame belongs to and (optionally) its timestamp.
    Training runs the configured ``stages`` of the curriculum; with ``JOINT``
    included the estimator also predicts clusters.
    """

    def __init__(self, d=16, hidden=(64,), head_hidden=128, n_clusters=64, stages=("AV", "COIN",
                 "JOINT"), steps=(1500, 1000, 1000), batch_size=32, learning_rate=1e-3,
                 delta_t=10, negatives="all", alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA,
                 gamma=DEFAULT_GAMMA, cluster_scale=60.0, validation_fraction=0.15,
                 patience=5, eval_every=100, random_state=None):
        self.d = d
        self.hidden = hidden
        self.head_hidden = head_hidden
        self.n_clusters = n_clusters
        self.stages = stages
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.delta_t = delta_t
        self.negatives = negatives
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.cluster_scale = cluster_scale
        self.validation_fraction = validation_fraction
        self.patience = patience
        self.eval_every = eval_every
        self.random_state = random_state

    def _curriculum(self):
        stages = tuple(s.upper() for s in self.stages)
        if "CLASS" in stages:
            raise ValueError("use EmbeddingClassifier for the supervised stage")
        if len(self.steps) != len(stages):
            raise ValueError("steps needs one entry per stage")
        return CurriculumConfig(tuple(
            StageConfig(s, steps_max=int(n), batch_size=self.batch_size,
                        learning_rate=self.learning_rate, delta_t=self.delta_t,
                        negatives=self.negatives, alpha=self.alpha, beta=self.beta,
                        gamma=self.gamma, patience=self.patience, eval_every=self.eval_every)
            for s, n in zip(stages, self.steps)))

    def fit(self, X, y=None, *, image, groups, timestamps=None):
        X = check_array(X, dtype=np.float64)
        image = check_array(image, dtype=np.float64)
        groups = np.asarray(groups)
        if not len(X) == len(image) == len(groups):
            raise ValueError("X, image and groups must have the same number of rows")
        timestamps = np.arange(len(X)) if timestamps is None else np.asarray(timestamps)
        order = np.lexsort((timestamps, groups))
        _, seq = np.unique(groups, return_inverse=True)
        world = SynthWorld(X[order], image[order], np.zeros(len(X), dtype=np.int64),
                           seq[order].astype(np.int64), timestamps[order].astype(np.int64),
                           WorldConfig(n_sequences=int(seq.max()) + 1,
                                       audio_shape=(X.shape[1],), image_shape=(image.shape[1],)))
        seed = _seed(self.random_state)
        ids = np.random.default_rng([seed, 0]).permutation(seq.max() + 1)
        n_val = int(round(self.validation_fraction * len(ids)))
        if n_val < 1 or n_val >= len(ids):
            raise ValueError("validation_fraction leaves an empty split")
        train, val = world.subset(np.sort(ids[n_val:])), world.subset(np.sort(ids[:n_val]))
        config = ModelConfig(EncoderConfig((X.shape[1],), tuple(self.hidden), self.d),
                             EncoderConfig((image.shape[1],), tuple(self.hidden), self.d),
                             head_hidden=self.head_hidden, n_clusters=self.n_clusters,
                             cluster_scale=self.cluster_scale)
        ckpt = run_curriculum(self._curriculum(), TrainingData(train, val), seed=seed,
                              model_config=config)
        self.params_ = ckpt.params
        self.history_ = ckpt.history
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return embed_audio(self.params_, X).data

    def predict_proba(self, X):
        """Cluster posteriors; only meaningful after a JOINT stage."""
        if "JOINT" not in {s.upper() for s in self.stages}:
            raise AttributeError("cluster predictions need the JOINT stage")
        return cluster_distribution(self.params_, ad.Tensor(self.transform(X))).data

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


class EntropyClustering(ClusterMixin, BaseEstimator):
    """Cosine cluster head trained on fixed vectors with the entropy objective.

    The objective is mean per-example posterior entropy minus ``gamma`` times
    the entropy of the mean posterior.
    """

    def __init__(self, n_clusters=64, gamma=DEFAULT_GAMMA, scale=60.0, steps=500,
                 batch_size=256, learning_rate=1e-2, random_state=None):
        self.n_clusters = n_clusters
        self.gamma = gamma
        self.scale = scale
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _dist(self, w, X):
        logits = ad.l2_normalize(ad.as_tensor(X), axis=-1) @ ad.l2_normalize(w, axis=-1).T
        return ad.softmax_scaled(logits, self.scale)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be >= 2")
        rng = np.random.default_rng(_seed(self.random_state))
        w0 = rng.standard_normal((self.n_clusters, X.shape[1]))
        w = ad.Tensor(w0 / np.linalg.norm(w0, axis=1, keepdims=True), requires_grad=True)
        opt = Adam([("w", w)], lr=self.learning_rate)
        self.loss_curve_ = []
        for _ in range(self.steps):
            batch = X[rng.integers(len(X), size=min(self.batch_size, len(X)))]
            loss = clustering_objective(self._dist(w, batch), self.gamma)
            ad.backward(loss, [w])
            opt.step()
            w.data = w.data / np.linalg.norm(w.data, axis=1, keepdims=True)
            self.loss_curve_.append(loss.item())
        self.cluster_centers_ = w.data.copy()
        self.n_features_in_ = X.shape[1]
        self.labels_ = self.predict(X)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return self._dist(ad.Tensor(self.cluster_centers_), X).data

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y=None):
        """Negative clustering objective (higher is better)."""
        return -clustering_objective(ad.Tensor(self.predict_proba(X)), self.gamma).item()


class ClusterLabelPropagator(BaseEstimator):
    """Label one random member of each of ``budget`` clusters and copy its label.

    ``fit(X, y)`` takes the cluster id of every example and the oracle labels
    (consulted only for the annotated members).  ``labels_`` holds the
    propagated labels with ``-1`` for unlabeled examples.
    """

    def __init__(self, budget=16, selection="size", n_clusters=None, random_state=None):
        self.budget = budget
        self.selection = selection
        self.n_clusters = n_clusters
        self.random_state = random_state

    def fit(self, X, y):
        ids = np.asarray(X).ravel().astype(np.int64)
        y = np.asarray(y)
        if len(ids) != len(y):
            raise ValueError("cluster ids and oracle labels must have the same length")
        k = self.n_clusters if self.n_clusters is not None else int(ids.max()) + 1
        assignment = ClusterAssignment(ids, k)
        seed = _seed(self.random_state)
        try:
            chosen = select_clusters_for_budget(assignment, self.budget, self.selection,
                                                np.random.default_rng([seed, 1]))
        except ContractError as exc:
            raise ValueError(str(exc)) from exc
        draws = draw_annotations(assignment, np.random.default_rng([seed, 0]))
        self.label_set_ = annotate_and_propagate(assignment, chosen, y, draws=draws)
        self.selected_clusters_ = chosen
        self.labels_ = self.label_set_.labels
        return self

    def fit_predict(self, X, y):
        return self.fit(X, y).labels_


class EmbeddingClassifier(ClassifierMixin, BaseEstimator):
    """One-hidden-layer softmax classifier on fixed embeddings.

    Rows labeled ``-1`` are ignored during ``fit``, so a propagated label set
    can be passed as-is.
    """

    def __init__(self, hidden=128, steps=500, batch_size=32, learning_rate=1e-3,
                 random_state=None):
        self.hidden = hidden
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        keep = y != -1
        if not keep.any():
            raise ValueError("no labeled rows")
        X, y = X[keep], y[keep]
        self.classes_, yi = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        rng = np.random.default_rng(_seed(self.random_state))
        d, h, c = X.shape[1], self.hidden, len(self.classes_)
        b0, b1 = 1 / np.sqrt(d), 1 / np.sqrt(h)
        self.weights_ = {"w0": rng.uniform(-b0, b0, (d, h)), "b0": np.zeros(h),
                         "w1": rng.uniform(-b1, b1, (h, c)), "b1": np.zeros(c)}
        tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in self.weights_.items()}
        opt = Adam(list(tensors.items()), lr=self.learning_rate)
        targets = one_hot(yi, c)
        self.loss_curve_ = []
        for _ in range(self.steps):
            pick = rng.integers(len(X), size=self.batch_size)
            loss = class_cross_entropy(self._forward(tensors, X[pick]), targets[pick])
            ad.backward(loss, list(tensors.values()))
            opt.step()
            self.loss_curve_.append(loss.item())
        self.weights_ = {k: t.data.copy() for k, t in tensors.items()}
        self.n_features_in_ = d
        return self

    @staticmethod
    def _forward(t, X):
        hidden = ad.relu(ad.as_tensor(X) @ t["w0"] + t["b0"])
        return ad.softmax_scaled(hidden @ t["w1"] + t["b1"])

    def predict_proba(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        return self._forward({k: ad.Tensor(v) for k, v in self.weights_.items()}, X).data

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
