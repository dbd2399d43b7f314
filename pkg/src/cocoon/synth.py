"""Seeded two-modality world with slowly changing latent classes.

Each sequence is a run of frames sampled at one frame per time step.  A latent
class persists for a geometrically distributed dwell time and then switches.
Every frame, in each modality, is::

    prototype[class] + nuisance[sequence] + noise

Prototypes and nuisance offsets are drawn independently per modality, so the
only thing audio and image frames share is the class.  Audio frames from the
same sequence additionally share the sequence nuisance, which an audio/audio
objective can latch onto.
"""

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, ConfigError, ContractError
from .losses import PairBatch
from .utils import canonical_json, config_hash, file_sha256

WORLD_MAGIC = b"COCOWRLD"
WORLD_VERSION = 1


@dataclass(frozen=True)
class WorldConfig:
    n_classes: int = 8
    n_sequences: int = 2000
    frames_per_sequence: int = 10
    audio_shape: tuple = (8, 8)
    image_shape: tuple = (4, 4, 3)
    class_dwell_mean: float = 25.0
    noise_std: float = 3.0
    nuisance_std: float = 1.0
    class_priors: tuple = None
    background_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "audio_shape", tuple(int(v) for v in self.audio_shape))
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        if self.class_priors is not None:
            object.__setattr__(self, "class_priors", tuple(float(p) for p in self.class_priors))
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.class_dwell_mean < 1:
            raise ConfigError("class_dwell_mean must be >= 1")
        if self.audio_dim < 2 or self.image_dim < 2:
            raise ConfigError("feature dimensions must be >= 2")
        if self.n_sequences < 1 or self.frames_per_sequence < 1:
            raise ConfigError("need at least one sequence with one frame")
        if self.noise_std < 0 or self.nuisance_std < 0:
            raise ConfigError("noise levels must be nonnegative")
        if not 0 <= self.background_rate < 1:
            raise ConfigError("background_rate must lie in [0, 1)")
        if self.class_priors is not None:
            p = np.asarray(self.class_priors)
            if len(p) != self.n_classes or np.any(p <= 0) or abs(p.sum() - 1) > 1e-9:
                raise ConfigError("class_priors must be n_classes positive values summing to 1")

    @property
    def audio_dim(self):
        return int(np.prod(self.audio_shape))

    @property
    def image_dim(self):
        return int(np.prod(self.image_shape))

    @property
    def background_label(self):
        """Label id of the out-of-set class, or ``None`` when disabled."""
        return self.n_classes if self.background_rate > 0 else None

    def label_priors(self):
        p = (np.full(self.n_classes, 1.0 / self.n_classes) if self.class_priors is None
             else np.asarray(self.class_priors))
        if self.background_rate > 0:
            p = np.append(p * (1 - self.background_rate), self.background_rate)
        return p


@dataclass
class SynthWorld:
    """Frames sorted by (sequence, timestamp); labels are oracle latent classes."""

    audio: np.ndarray
    image: np.ndarray
    labels: np.ndarray
    sequence_ids: np.ndarray
    timestamps: np.ndarray
    config: WorldConfig = field(default_factory=WorldConfig)

    def __len__(self):
        return len(self.labels)

    @property
    def eval_classes(self):
        """Class ids that count for evaluation (the background class is excluded)."""
        return list(range(self.config.n_classes))

    def sequences(self):
        """Sorted unique sequence ids and the (start, stop) frame range of each."""
        ids, starts = np.unique(self.sequence_ids, return_index=True)
        stops = np.append(starts[1:], len(self))
        return ids, starts, stops

    def subset(self, sequence_ids):
        mask = np.isin(self.sequence_ids, np.asarray(sequence_ids))
        return SynthWorld(self.audio[mask], self.image[mask], self.labels[mask],
                          self.sequence_ids[mask], self.timestamps[mask], self.config)

    @property
    def hash(self):
        return config_hash(self.config)


@dataclass(frozen=True)
class SamplerConfig:
    delta_t: int = 10
    batch_size: int = 32
    modality: str = "AV"
    negatives: str = "all"

    def __post_init__(self):
        if self.delta_t < 0:
            raise ConfigError("delta_t must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.modality not in ("AA", "AV"):
            raise ConfigError("modality must be AA or AV")
        if self.negatives not in ("all", "random"):
            raise ConfigError("negatives must be 'all' or 'random'")


def _label_track(rng, n_frames, priors, dwell_mean):
    labels = np.empty(n_frames, dtype=np.int64)
    k = len(priors)
    current = rng.choice(k, p=priors)
    t = 0
    while t < n_frames:
        dwell = rng.geometric(1.0 / dwell_mean)
        labels[t:t + dwell] = current
        t += dwell
        others = priors.copy()
        others[current] = 0.0
        current = rng.choice(k, p=others / others.sum())
    return labels


def generate_world(config):
    """Build a :class:`SynthWorld`; ``config.seed`` determines every value."""
    rng = np.random.default_rng(config.seed)
    priors = config.label_priors()
    n_labels = len(priors)
    proto_a = rng.standard_normal((n_labels, config.audio_dim))
    proto_i = rng.standard_normal((n_labels, config.image_dim))
    n_seq, n_t = config.n_sequences, config.frames_per_sequence
    labels = np.concatenate([_label_track(rng, n_t, priors, config.class_dwell_mean)
                             for _ in range(n_seq)])
    seq = np.repeat(np.arange(n_seq), n_t)
    ts = np.tile(np.arange(n_t), n_seq)
    nuis_a = config.nuisance_std * rng.standard_normal((n_seq, config.audio_dim))
    nuis_i = config.nuisance_std * rng.standard_normal((n_seq, config.image_dim))
    audio = proto_a[labels] + nuis_a[seq] + config.noise_std * rng.standard_normal(
        (len(labels), config.audio_dim))
    image = proto_i[labels] + nuis_i[seq] + config.noise_std * rng.standard_normal(
        (len(labels), config.image_dim))
    return SynthWorld(audio, image, labels, seq, ts, config)


def sample_pair_batch(world, config, rng):
    """Draw B coinciding pairs, each from one sequence with ``|t1 - t2| <= delta_t``.

    Sequences are distinct within a batch whenever the world has at least B of
    them.  For audio/audio pairs the two frames are distinct whenever the window
    allows it.
    """
    ids, starts, stops = world.sequences()
    b, dt = config.batch_size, config.delta_t
    if len(ids) == 0:
        raise ContractError("world has no frames")
    lengths = stops - starts
    aa = config.modality == "AA"
    if aa and lengths.max() < 2:
        raise ContractError("audio/audio pairs need sequences with at least two frames")
    eligible = np.flatnonzero(lengths >= 2) if aa else np.arange(len(ids))
    pick = rng.choice(eligible, size=b, replace=len(eligible) < b)
    i1 = np.empty(b, dtype=np.int64)
    i2 = np.empty(b, dtype=np.int64)
    for n, s in enumerate(pick):
        length = lengths[s]
        t1 = rng.integers(length)
        lo, hi = max(0, t1 - dt), min(length - 1, t1 + dt)
        if aa and hi > lo:
            t2 = rng.integers(lo, hi)  # hi - lo candidates once t1 is excluded
            t2 = t2 + 1 if t2 >= t1 else t2
        else:
            t2 = rng.integers(lo, hi + 1)
        i1[n] = starts[s] + t1
        i2[n] = starts[s] + t2
    negatives = None
    if config.negatives == "random":
        negatives = (np.arange(b) + rng.integers(1, b, size=b)) % b
    x2 = world.audio[i2] if aa else world.image[i2]
    return PairBatch(world.audio[i1], x2, config.modality, negatives,
                     world.labels[i1], world.labels[i2])


def split(world, fractions=(0.7, 0.15, 0.15), seed=0):
    """Partition a world by whole sequences into (train, validation, evaluation)."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if len(fractions) != 3 or np.any(fractions <= 0) or abs(fractions.sum() - 1) > 1e-9:
        raise ContractError("fractions must be three positive values summing to 1")
    ids = np.unique(world.sequence_ids)
    order = np.random.default_rng(seed).permutation(ids)
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    if any(len(p) == 0 for p in parts):
        raise ContractError(f"fractions {fractions.tolist()} leave a split empty "
                            f"with {len(ids)} sequences")
    return tuple(world.subset(np.sort(p)) for p in parts)


# container format -----------------------------------------------------------
#
#   magic "COCOWRLD" | int64 version, n_frames, audio_dim, image_dim
#   float64 audio[n_frames, audio_dim] | float64 image[n_frames, image_dim]
#   int64 sequence_ids[n] | int64 timestamps[n] | int64 labels[n]
#
# all little-endian; a JSON manifest next to the file records config and hash.

def manifest_path(path):
    return Path(path).with_suffix(".json")


def save_world(world, path, run_hash=""):
    """Write the container and its manifest; ``run_hash`` names the producing run."""
    path = Path(path)
    n = len(world)
    with open(path, "wb") as fh:
        fh.write(WORLD_MAGIC)
        fh.write(struct.pack("<4q", WORLD_VERSION, n, world.config.audio_dim,
                             world.config.image_dim))
        for arr, dtype in ((world.audio, "<f8"), (world.image, "<f8"),
                           (world.sequence_ids, "<i8"), (world.timestamps, "<i8"),
                           (world.labels, "<i8")):
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    manifest = {
        "format": "cocoon-world",
        "version": WORLD_VERSION,
        "config": asdict(world.config),
        "seed": world.config.seed,
        "config_hash": world.hash,
        "n_frames": n,
        "run_hash": run_hash,
        "sha256": file_sha256(path),
    }
    manifest_path(path).write_text(canonical_json(manifest, indent=2) + "\n")
    return path


def read_manifest(path):
    try:
        return json.loads(manifest_path(path).read_text())
    except OSError as exc:
        raise CheckpointError(f"cannot read world manifest for {path}: {exc}") from exc
    except ValueError as exc:
        raise CheckpointError(f"world manifest for {path} is not valid JSON") from exc


def load_world(path):
    path = Path(path)
    manifest = read_manifest(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read world {path}: {exc}") from exc
    if raw[:8] != WORLD_MAGIC:
        raise CheckpointError(f"{path} is not a world container")
    version, n, a_dim, i_dim = struct.unpack_from("<4q", raw, 8)
    if version != WORLD_VERSION:
        raise CheckpointError(f"unsupported world version {version}")
    expected = 40 + 8 * n * (a_dim + i_dim + 3)
    if len(raw) != expected:
        raise CheckpointError(f"{path} is truncated or corrupt")
    if file_sha256(path) != manifest.get("sha256"):
        raise CheckpointError(f"{path} does not match the checksum in its manifest")
    try:
        config = WorldConfig(**manifest["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"world manifest for {path} is malformed: {exc}") from exc
    if config_hash(config) != manifest["config_hash"]:
        raise CheckpointError("world manifest hash does not match its config")
    off = 40
    audio = np.frombuffer(raw, "<f8", n * a_dim, off).reshape(n, a_dim).copy()
    off += 8 * n * a_dim
    image = np.frombuffer(raw, "<f8", n * i_dim, off).reshape(n, i_dim).copy()
    off += 8 * n * i_dim
    seq = np.frombuffer(raw, "<i8", n, off).copy()
    ts = np.frombuffer(raw, "<i8", n, off + 8 * n).copy()
    labels = np.frombuffer(raw, "<i8", n, off + 16 * n).copy()
    return SynthWorld(audio, image, labels, seq, ts, config)


def with_seed(config, seed):
    return replace(config, seed=seed)


def geometric_priors(n_classes, ratio):
    """Class priors proportional to ``ratio ** k``; ``ratio < 1`` skews mass toward class 0."""
    if not 0 < ratio <= 1:
        raise ConfigError("ratio must lie in (0, 1]")
    p = ratio ** np.arange(n_classes, dtype=np.float64)
    return tuple((p / p.sum()).tolist())


def clip_ids(world, max_frames=None):
    """Clip index per frame: maximal constant-label runs within a sequence.

    Runs longer than ``max_frames`` are chopped into consecutive pieces.
    Returns ``(ids, clip_labels)`` with ids numbered from 0 in frame order.
    """
    n = len(world)
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    boundary = np.ones(n, dtype=bool)
    boundary[1:] = (np.diff(world.labels) != 0) | (np.diff(world.sequence_ids) != 0)
    if max_frames is not None:
        if max_frames < 1:
            raise ContractError("max_frames must be >= 1")
        run = np.cumsum(boundary) - 1
        starts = np.flatnonzero(boundary)
        offset = np.arange(n) - starts[run]
        boundary |= offset % max_frames == 0
    ids = np.cumsum(boundary) - 1
    return ids, world.labels[boundary]
