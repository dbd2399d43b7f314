"""Staged curriculum training with checkpoints.

Stages run in the fixed order AV -> COIN -> JOINT -> CLASS.  Each stage
minimises its own loss with Adam, evaluating a held-out loss every
``eval_every`` steps and stopping after ``patience`` evaluations without
improvement (or at ``steps_max``).
"""

import csv
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .exceptions import CheckpointError, ConfigError, ContractError, HashMismatchError, NumericError
from .losses import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_GAMMA,
    LabeledBatch,
    loss_av,
    loss_class,
    loss_coin,
    loss_joint,
    one_hot,
)
from .models import ModelConfig, ModelParams, init_params
from .synth import SamplerConfig, sample_pair_batch
from .utils import file_sha256

logger = logging.getLogger(__name__)

STAGE_ORDER = ("AV", "COIN", "JOINT", "CLASS")
CKPT_MAGIC = b"COCOCKPT"
CKPT_VERSION = 1
HISTORY_COLUMNS = ("stage", "step", "train_loss", "val_loss", "wall_ms")


class TrainingDivergedError(NumericError):
    def __init__(self, stage, step, cause):
        self.stage, self.step = stage, step
        super().__init__(cause.op if isinstance(cause, NumericError) else "update",
                         f"stage {stage} diverged at step {step}: {cause}")


@dataclass(frozen=True)
class StageConfig:
    loss: str
    steps_max: int = 1000
    patience: int = 5
    eval_every: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA
    delta_t: int = 10
    negatives: str = "all"
    train_image_encoder: bool = True
    val_batches: int = 4

    def __post_init__(self):
        object.__setattr__(self, "loss", self.loss.upper())
        if self.loss not in STAGE_ORDER:
            raise ConfigError(f"unknown stage loss {self.loss!r}")
        if self.steps_max < 0 or self.patience < 1 or self.eval_every < 1:
            raise ConfigError("steps_max >= 0, patience >= 1 and eval_every >= 1 required")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1) or self.gamma <= 0:
            raise ConfigError("alpha, beta must lie in [0, 1] and gamma must be positive")
        if self.negatives not in ("all", "random"):
            raise ConfigError("negatives must be 'all' or 'random'")

    def trainable_groups(self):
        if self.loss == "CLASS":
            return ("f", "p_class")
        groups = ["f", "p_av"]
        if self.loss != "JOINT" or self.train_image_encoder:
            groups.append("g")
        if self.loss in ("COIN", "JOINT"):
            groups.append("p_aa")
        if self.loss == "JOINT":
            groups.append("p_clust")
        return tuple(groups)


@dataclass(frozen=True)
class CurriculumConfig:
    stages: tuple = field(default_factory=lambda: tuple(StageConfig(s) for s in STAGE_ORDER))

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        positions = [STAGE_ORDER.index(s.loss) for s in self.stages]
        if positions != sorted(positions) or len(set(positions)) != len(positions):
            raise ConfigError("stages must follow the order AV -> COIN -> JOINT -> CLASS")

    def truncated(self, n):
        return replace(self, stages=self.stages[:n])

    def only(self, *losses):
        losses = {s.upper() for s in losses}
        return replace(self, stages=tuple(s for s in self.stages if s.loss in losses))


@dataclass
class TrainingData:
    """Worlds for training/validation plus optional labels for the CLASS stage.

    ``labels`` is an int array over ``train`` frames with ``-1`` for unlabeled.
    """

    train: object
    val: object = None
    labels: np.ndarray = None
    n_classes: int = None

    def labeled_indices(self):
        if self.labels is None:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero(np.asarray(self.labels) >= 0)


# optimiser -------------------------------------------------------------------

class Adam:
    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)


# stage execution --------------------------------------------------------------

def _sampler(stage, modality):
    return SamplerConfig(stage.delta_t, stage.batch_size, modality, stage.negatives)


def _sample_batches(stage, world, rng, data):
    if stage.loss == "CLASS":
        idx = data.labeled_indices()
        pick = idx[rng.integers(len(idx), size=stage.batch_size)]
        return LabeledBatch(world.audio[pick], one_hot(data.labels[pick], data.n_classes))
    av = sample_pair_batch(world, _sampler(stage, "AV"), rng)
    if stage.loss == "AV":
        return (av,)
    aa = sample_pair_batch(world, _sampler(stage, "AA"), rng)
    if stage.loss == "COIN":
        return aa, av
    frames = world.audio[rng.integers(len(world), size=stage.batch_size)]
    return aa, av, frames


def stage_loss(stage, params, batches):
    if stage.loss == "AV":
        return loss_av(params, batches[0])
    if stage.loss == "COIN":
        return loss_coin(params, batches[0], batches[1], stage.alpha)
    if stage.loss == "JOINT":
        return loss_joint(params, batches[0], batches[1], batches[2], stage.alpha, stage.beta,
                          stage.gamma)
    return loss_class(params, batches)


@dataclass
class StageState:
    """Everything needed to resume a stage mid-way."""

    step: int = 0
    best_val: float = float("inf")
    bad_evals: int = 0
    done: bool = False
    optimizer: dict = None


def _validation_batches(stage, data, seed):
    rng = np.random.default_rng(seed)
    world = data.val if data.val is not None and stage.loss != "CLASS" else data.train
    return [_sample_batches(stage, world, rng, data) for _ in range(stage.val_batches)]


def _mean_loss(stage, params, batches):
    return float(np.mean([stage_loss(stage, params, b).item() for b in batches]))


def run_stage(stage, params, data, rng, state=None, val_seed=0, on_checkpoint=None,
              checkpoint_every=0):
    """Optimise ``stage.loss`` from ``params``; returns ``(params, history, state)``.

    The input ``params`` are copied, never mutated.  ``rng`` drives batch
    sampling only.  ``on_checkpoint(params, state, rng)`` is called every
    ``checkpoint_every`` steps when both are set.
    """
    if stage.loss == "CLASS":
        if data.labels is None or len(data.labeled_indices()) == 0:
            raise ContractError("the CLASS stage needs a propagated label set")
        if data.n_classes is None:
            raise ContractError("the CLASS stage needs n_classes")
    params = params.copy()
    names = params.names(stage.trainable_groups())
    trainable = [params[n] for n in names]
    opt = Adam([(n, params[n]) for n in names], lr=stage.learning_rate)
    state = StageState() if state is None else state
    if state.optimizer is not None:
        opt.load_state_dict(state.optimizer)
    val = _validation_batches(stage, data, val_seed)
    history = []
    while not state.done and state.step < stage.steps_max:
        t0 = time.perf_counter()
        try:
            batches = _sample_batches(stage, data.train, rng, data)
            loss = stage_loss(stage, params, batches)
            ad.backward(loss, trainable)
            opt.step()
            if stage.loss == "JOINT":
                params.renormalize_clusters()
            if not all(np.all(np.isfinite(p.data)) for p in trainable):
                raise NumericError("update")
        except NumericError as exc:
            raise TrainingDivergedError(stage.loss, state.step, exc) from exc
        state.step += 1
        val_loss = None
        if state.step % stage.eval_every == 0 or state.step == stage.steps_max:
            val_loss = _mean_loss(stage, params, val)
            if val_loss < state.best_val:
                state.best_val, state.bad_evals = val_loss, 0
            else:
                state.bad_evals += 1
                if state.bad_evals >= stage.patience:
                    state.done = True
        history.append({"stage": stage.loss, "step": state.step, "train_loss": loss.item(),
                        "val_loss": val_loss,
                        "wall_ms": round((time.perf_counter() - t0) * 1000, 3)})
        if on_checkpoint is not None and checkpoint_every and state.step % checkpoint_every == 0:
            state.optimizer = opt.state_dict()
            on_checkpoint(params, state, rng)
    state.optimizer = opt.state_dict()
    state.done = True
    return params, history, state


def stage_rng(seed, index):
    return np.random.default_rng([seed, index])


def run_curriculum(config, data, seed=0, model_config=None, params=None, start=0, stop=None,
                   config_hash="", on_stage_end=None, resume=None, on_checkpoint=None,
                   checkpoint_every=0):
    """Run ``config.stages[start:stop]`` in order, carrying parameters forward.

    Stage ``i`` always draws from ``stage_rng(seed, i)``, so running the stages
    one call at a time gives the same result as one call over all of them.
    ``resume`` is a mid-stage :class:`Checkpoint` (as passed to
    ``on_checkpoint``) to continue from; it overrides ``start`` and ``params``.

    Returns the final :class:`Checkpoint` with the concatenated history.
    """
    stop = len(config.stages) if stop is None else stop
    state = rng = None
    if resume is not None:
        start, params = resume.stage_index, resume.params
        meta = resume.meta or {}
        state = StageState(step=resume.step, best_val=meta.get("best_val", float("inf")),
                           bad_evals=meta.get("bad_evals", 0), done=meta.get("done", False),
                           optimizer=resume.optimizer)
        rng = stage_rng(seed, start)
        rng.bit_generator.state = resume.rng_state
    if not 0 <= start < stop <= len(config.stages):
        raise ContractError(f"invalid stage range [{start}, {stop}) for "
                            f"{len(config.stages)} configured stages")
    if any(s.loss == "CLASS" for s in config.stages[start:stop]) and (
            data.labels is None or len(data.labeled_indices()) == 0):
        raise ContractError("the CLASS stage needs a propagated label set")
    if params is None:
        if model_config is None:
            raise ContractError("need either params or a model config")
        params = init_params(model_config, seed)
    ckpt = Checkpoint(params, stage="INIT", stage_index=start - 1, step=0, config_hash=config_hash)
    history = []
    for index in range(start, stop):
        stage = config.stages[index]
        if rng is None:
            rng = stage_rng(seed, index)

        def partial(p, st, r, index=index, stage=stage):
            on_checkpoint(Checkpoint(p, stage=stage.loss, stage_index=index, step=st.step,
                                     config_hash=config_hash, rng_state=r.bit_generator.state,
                                     optimizer=st.optimizer,
                                     meta={"partial": True, "best_val": st.best_val,
                                           "bad_evals": st.bad_evals, "done": st.done}))

        params, hist, state = run_stage(stage, params, data, rng, state=state,
                                        val_seed=seed * 7919 + index,
                                        on_checkpoint=partial if on_checkpoint else None,
                                        checkpoint_every=checkpoint_every)
        history.extend(hist)
        logger.info("stage %s finished after %d steps (best val %.5f)", stage.loss, state.step,
                    state.best_val)
        ckpt = Checkpoint(params, stage=stage.loss, stage_index=index, step=state.step,
                          config_hash=config_hash, rng_state=rng.bit_generator.state,
                          optimizer=state.optimizer, history=hist)
        if on_stage_end is not None:
            on_stage_end(ckpt)
        state = rng = None
    ckpt.history = history
    return ckpt


# checkpoint container -----------------------------------------------------------
#
#   magic "COCOCKPT" | uint32 version | 64 ascii bytes config hash
#   uint64 header length | JSON header | float64 little-endian blobs
#
# The header lists every blob (name, shape) in payload order.

@dataclass
class Checkpoint:
    params: ModelParams
    stage: str = "INIT"
    stage_index: int = -1
    step: int = 0
    config_hash: str = ""
    rng_state: dict = None
    optimizer: dict = None
    meta: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def model_config(self):
        return self.params.config


def save_checkpoint(ckpt, path):
    path = Path(path)
    blobs = [(f"param/{k}", v.data) for k, v in ckpt.params.tensors.items()]
    opt_header = None
    if ckpt.optimizer is not None:
        opt_header = {"t": ckpt.optimizer["t"]}
        for part in ("m", "v"):
            blobs += [(f"opt_{part}/{k}", a) for k, a in ckpt.optimizer[part].items()]
    header = {
        "model_config": ckpt.params.config.to_dict(),
        "stage": ckpt.stage,
        "stage_index": ckpt.stage_index,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "optimizer": opt_header,
        "meta": ckpt.meta,
        "blobs": [{"name": n, "shape": list(a.shape)} for n, a in blobs],
    }
    raw_header = json.dumps(header, sort_keys=True).encode()
    hash_bytes = ckpt.config_hash.encode().ljust(64, b"\0")[:64]
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(hash_bytes)
        fh.write(struct.pack("<Q", len(raw_header)))
        fh.write(raw_header)
        for _, a in blobs:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_hash=None, force=False):
    """Read a checkpoint; refuse one whose config hash differs from ``expected_hash``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    try:
        (version,) = struct.unpack_from("<I", raw, 8)
        config_hash = raw[12:76].rstrip(b"\0").decode()
        (hlen,) = struct.unpack_from("<Q", raw, 76)
        header = json.loads(raw[84:84 + hlen])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path} has a corrupt header") from exc
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if expected_hash is not None and expected_hash != config_hash and not force:
        raise HashMismatchError(f"checkpoint config hash {config_hash[:12]} does not match "
                              f"{expected_hash[:12]} (use force to override)")
    off = 84 + hlen
    arrays = {}
    for blob in header["blobs"]:
        n = int(np.prod(blob["shape"]))
        if off + 8 * n > len(raw):
            raise CheckpointError(f"{path} is truncated")
        arrays[blob["name"]] = np.frombuffer(raw, "<f8", n, off).reshape(blob["shape"]).copy()
        off += 8 * n
    if off != len(raw):
        raise CheckpointError(f"{path} has trailing bytes")
    config = ModelConfig.from_dict(header["model_config"])
    params = ModelParams(config, {k[6:]: ad.Tensor(a, requires_grad=True)
                                  for k, a in arrays.items() if k.startswith("param/")})
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = {"t": header["optimizer"]["t"],
                     "m": {k[6:]: a for k, a in arrays.items() if k.startswith("opt_m/")},
                     "v": {k[6:]: a for k, a in arrays.items() if k.startswith("opt_v/")}}
    return Checkpoint(params, header["stage"], header["stage_index"], header["step"],
                      config_hash, header["rng_state"], optimizer, header["meta"])


def checkpoint_hash(path):
    return file_sha256(path)


def write_history(rows, path, append=False):
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in HISTORY_COLUMNS})


def stage_config_dict(stage):
    return asdict(stage)
