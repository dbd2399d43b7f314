"""Encoders and prediction heads.

Parameters live in a flat, ordered name -> :class:`Tensor` mapping so they can
be serialised, optimised and frozen by prefix:

* ``f.*``        audio encoder (MLP, ReLU hidden layers, linear output)
* ``g.*``        image encoder (same recipe, its own input space)
* ``p_aa.*``     audio/audio coincidence head
* ``p_av.*``     audio/image coincidence head
* ``p_clust.*``  cosine cluster head (unit-norm weight rows)
* ``p_class.*``  classifier head (one hidden ReLU layer + softmax)
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, DimensionError

GROUPS = ("f", "g", "p_aa", "p_av", "p_clust", "p_class")

# Reference sizes of the full-scale audio/image front ends; desk defaults are smaller.
FULL_SCALE_AUDIO_SHAPE = (64, 96)
FULL_SCALE_IMAGE_SHAPE = (128, 128, 3)
FULL_SCALE_EMBEDDING_DIM = 128


@dataclass(frozen=True)
class EncoderConfig:
    input_shape: tuple
    hidden: tuple = (64,)
    d: int = 16

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        if self.d < 2:
            raise ConfigError("embedding dimension d must be >= 2")
        if any(v <= 0 for v in self.input_shape + self.hidden):
            raise ConfigError("encoder widths must be positive")

    @property
    def input_dim(self):
        return int(np.prod(self.input_shape))


@dataclass(frozen=True)
class ModelConfig:
    audio: EncoderConfig = field(default_factory=lambda: EncoderConfig((8, 8)))
    image: EncoderConfig = field(default_factory=lambda: EncoderConfig((4, 4, 3)))
    head_hidden: int = 128
    n_clusters: int = 64
    cluster_scale: float = 60.0
    n_classes: int = 8
    class_hidden: int = 128

    def __post_init__(self):
        if self.audio.d != self.image.d:
            raise ConfigError("audio and image encoders must share the embedding dimension")
        if self.n_clusters < 2:
            raise ConfigError("need at least two clusters")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.cluster_scale <= 0:
            raise ConfigError("cluster_scale must be positive")

    @property
    def d(self):
        return self.audio.d

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        raw["audio"] = EncoderConfig(**raw["audio"])
        raw["image"] = EncoderConfig(**raw["image"])
        return cls(**raw)


class ModelParams:
    """Ordered collection of named parameter tensors plus the config that shaped them."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def names(self, groups=None):
        if groups is None:
            return list(self.tensors)
        return [n for n in self.tensors if n.split(".", 1)[0] in groups]

    def group(self, *groups):
        return [self.tensors[n] for n in self.names(groups)]

    def copy(self):
        return ModelParams(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                         for k, v in self.tensors.items()})

    def arrays(self):
        return {k: v.data for k, v in self.tensors.items()}

    def renormalize_clusters(self):
        w = self.tensors["p_clust.w"]
        w.data = w.data / np.linalg.norm(w.data, axis=1, keepdims=True)


def _linear(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def _mlp(rng, prefix, widths):
    out = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        w, bias = _linear(rng, a, b)
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = bias
    return out


def init_params(config, seed=0):
    """Fan-in scaled uniform weights, zero biases, unit-norm cluster rows."""
    rng = np.random.default_rng(seed)
    d = config.d
    arrays = {}
    arrays.update(_mlp(rng, "f", (config.audio.input_dim,) + config.audio.hidden + (d,)))
    arrays.update(_mlp(rng, "g", (config.image.input_dim,) + config.image.hidden + (d,)))
    for head in ("p_aa", "p_av"):
        arrays.update(_mlp(rng, head, (2 * d, config.head_hidden, 1)))
    w = rng.standard_normal((config.n_clusters, d))
    arrays["p_clust.w"] = w / np.linalg.norm(w, axis=1, keepdims=True)
    arrays.update(_mlp(rng, "p_class", (d, config.class_hidden, config.n_classes)))
    return ModelParams(config, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})


def _flatten_input(x, cfg, name):
    x = ad.as_tensor(x)
    shape = cfg.input_shape
    if x.shape == shape or x.shape == (cfg.input_dim,):
        return x.reshape(cfg.input_dim), False
    if x.shape[1:] == shape or (x.ndim == 2 and x.shape[1] == cfg.input_dim):
        return x.reshape(x.shape[0], cfg.input_dim), True
    raise DimensionError(f"{name}: input shape {x.shape} does not match {shape}")


def _run_mlp(params, prefix, x, n_layers):
    h = x
    for i in range(n_layers):
        h = h @ params[f"{prefix}.w{i}"] + params[f"{prefix}.b{i}"]
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def embed_audio(params, x):
    """Audio embedding f(x); accepts one example or a batch (leading axis)."""
    cfg = params.config.audio
    flat, _ = _flatten_input(x, cfg, "embed_audio")
    return _run_mlp(params, "f", flat, len(cfg.hidden) + 1)


def embed_image(params, x):
    """Image embedding g(x); accepts one example or a batch (leading axis)."""
    cfg = params.config.image
    flat, _ = _flatten_input(x, cfg, "embed_image")
    return _run_mlp(params, "g", flat, len(cfg.hidden) + 1)


def coincidence_logit(params, head, e1, e2):
    """Logit of the ordered pair ``[e1, e2]`` (rows are paired elementwise)."""
    e1, e2 = ad.as_tensor(e1), ad.as_tensor(e2)
    d = params.config.d
    if e1.shape[-1] != d or e2.shape[-1] != d or e1.shape != e2.shape:
        raise DimensionError(f"coincidence head expects two {d}-dim embeddings, "
                             f"got {e1.shape} and {e2.shape}")
    z = ad.concat([e1, e2], axis=-1)
    return _run_mlp(params, head, z, 2)[..., 0]


def coincidence_prob(params, head, e1, e2):
    """Clamped probability that ``(e1, e2)`` coincide, according to ``head``."""
    return ad.clamp_prob(ad.sigmoid(coincidence_logit(params, head, e1, e2)))


def coincidence_prob_matrix(params, head, e1, e2):
    """All-pairs probabilities ``P[i, j] = p_head([e1[i], e2[j]])`` for batches of embeddings.

    The hidden layer splits as ``W [a; b] = W_a a + W_b b`` so each side is
    projected once and combined by broadcasting.
    """
    e1, e2 = ad.as_tensor(e1), ad.as_tensor(e2)
    d = params.config.d
    if e1.ndim != 2 or e2.ndim != 2 or e1.shape[1] != d or e2.shape[1] != d:
        raise DimensionError(f"expected (B, {d}) embeddings, got {e1.shape} and {e2.shape}")
    w0 = params[f"{head}.w0"]
    a = e1 @ w0[:d]
    b = e2 @ w0[d:]
    n1, n2, width = a.shape[0], b.shape[0], a.shape[1]
    hidden = ad.relu(a.reshape(n1, 1, width) + b.reshape(1, n2, width) + params[f"{head}.b0"])
    logits = (hidden @ params[f"{head}.w1"]).reshape(n1, n2) + params[f"{head}.b1"]
    return ad.clamp_prob(ad.sigmoid(logits))


def cluster_logits(params, e):
    """Scaled cosine similarity between embeddings and the cluster weight rows."""
    e_hat = ad.l2_normalize(e, axis=-1)
    w_hat = ad.l2_normalize(params["p_clust.w"], axis=-1)
    return e_hat @ w_hat.T


def cluster_distribution(params, e):
    """Softmax over clusters of ``scale * cos(e, w_k)``."""
    return ad.softmax_scaled(cluster_logits(params, e), params.config.cluster_scale)


def class_distribution(params, e):
    """C-way class distribution from the classifier head."""
    e = ad.as_tensor(e)
    if e.shape[-1] != params.config.d:
        raise DimensionError(f"classifier expects {params.config.d}-dim embeddings, got {e.shape}")
    return ad.softmax_scaled(_run_mlp(params, "p_class", e, 2))
