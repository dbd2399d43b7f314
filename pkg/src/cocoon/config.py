"""Experiment configuration: one INI document drives a whole run.

Sections and keys (every key is optional; unknown sections or keys are errors)::

    [run]         seed, out_dir, split
    [world]       WorldConfig fields (shapes and priors as comma lists)
    [model]       audio_hidden, image_hidden, d, head_hidden, n_clusters,
                  cluster_scale, class_hidden
    [sampler]     delta_t, batch_size, negatives  (defaults for every stage)
    [curriculum]  stages = av, coin, joint, class
    [stage.<name>] StageConfig fields for one stage
    [active]      budgets, strategy, selection
    [eval]        pairs_per_class, clip_max_frames, split

The world seed defaults to the run seed.  ``out_dir`` is not part of the
hash, so moving a run (or overriding it with ``COCOON_OUT``) keeps its
artifacts valid.
"""

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .exceptions import ConfigError
from .models import EncoderConfig, ModelConfig
from .synth import SamplerConfig, WorldConfig
from .trainer import STAGE_ORDER, CurriculumConfig, StageConfig
from .utils import config_hash

OUT_ENV = "COCOON_OUT"
SPLIT_NAMES = ("train", "val", "eval")
# Desk-scale step budgets per stage; each stage may still stop early on patience.
STAGE_STEPS = {"AV": 1500, "COIN": 1000, "JOINT": 1000, "CLASS": 500}
STAGE_EVAL_EVERY = 100


@dataclass(frozen=True)
class ActiveConfig:
    budgets: tuple = (16,)
    strategy: str = "cluster"
    selection: str = "size"

    def __post_init__(self):
        object.__setattr__(self, "budgets", tuple(int(b) for b in self.budgets))
        if not self.budgets or min(self.budgets) < 1:
            raise ConfigError("budgets must be a nonempty list of positive integers")
        if self.strategy not in ("cluster", "random"):
            raise ConfigError("strategy must be 'cluster' or 'random'")
        if self.selection not in ("size", "random"):
            raise ConfigError("selection must be 'size' or 'random'")


@dataclass(frozen=True)
class EvalConfig:
    pairs_per_class: int = 25
    clip_max_frames: int = 10
    split: str = "eval"

    def __post_init__(self):
        if self.pairs_per_class < 2:
            raise ConfigError("pairs_per_class must be >= 2")
        if self.clip_max_frames < 1:
            raise ConfigError("clip_max_frames must be >= 1")
        if self.split not in SPLIT_NAMES:
            raise ConfigError(f"eval split must be one of {SPLIT_NAMES}")


def default_curriculum(sampler=None, **overrides):
    sampler = sampler or SamplerConfig()
    stages = []
    for s in STAGE_ORDER:
        kw = _stage_base(s, sampler)
        kw.update(overrides)
        stages.append(StageConfig(s, **kw))
    return CurriculumConfig(tuple(stages))


def _stage_base(loss, sampler):
    return dict(steps_max=STAGE_STEPS[loss], eval_every=STAGE_EVAL_EVERY,
                delta_t=sampler.delta_t, batch_size=sampler.batch_size,
                negatives=sampler.negatives)


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    curriculum: CurriculumConfig = field(default_factory=default_curriculum)
    active: ActiveConfig = field(default_factory=ActiveConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    split: tuple = (0.7, 0.15, 0.15)
    out_dir: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(v) for v in self.split))
        if len(self.split) != 3 or min(self.split) <= 0 or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError("split must be three positive fractions summing to 1")
        if self.model.n_classes != self.world.n_classes:
            raise ConfigError("model n_classes must equal world n_classes")
        if self.model.audio.input_shape != self.world.audio_shape or \
                self.model.image.input_shape != self.world.image_shape:
            raise ConfigError("encoder input shapes must match the world feature shapes")

    def to_dict(self):
        out = dataclasses.asdict(self)
        out.pop("out_dir")
        return out

    @property
    def hash(self):
        return config_hash(self.to_dict())

    def output_root(self):
        return Path(os.environ.get(OUT_ENV) or self.out_dir)

    def stage(self, loss):
        for s in self.curriculum.stages:
            if s.loss == loss.upper():
                return s
        raise ConfigError(f"stage {loss!r} is not part of the configured curriculum")

    def to_ini(self):
        return _to_ini(self)


# parsing --------------------------------------------------------------------

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(raw, like, key):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            return low in _TRUE
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            items = [v.strip() for v in raw.split(",") if v.strip()]
            kind = float if like and isinstance(like[0], float) else int
            return tuple(kind(v) for v in items)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {type(like).__name__}") from None


def _section_values(parser, name, defaults, special=None):
    """Parse ``[name]`` against a dict of default values; unknown keys are rejected."""
    special = special or {}
    out = {}
    if not parser.has_section(name):
        return out
    for key, raw in parser.items(name):
        if key in special:
            out[key] = special[key](raw)
        elif key in defaults:
            out[key] = _parse_value(raw, defaults[key], f"[{name}] {key}")
        else:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
    return out


def _defaults(cls):
    obj = cls() if cls is not StageConfig else StageConfig("AV")
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(cls)}


def _priors(raw):
    raw = raw.strip()
    if raw.lower() in ("", "none", "uniform"):
        return None
    try:
        return tuple(float(v) for v in raw.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse class_priors = {raw!r}") from None


def _stages(raw):
    names = [v.strip().upper() for v in raw.split(",") if v.strip()]
    unknown = [n for n in names if n not in STAGE_ORDER]
    if unknown:
        raise ConfigError(f"unknown stages {unknown}")
    return names


KNOWN_SECTIONS = {"run", "world", "model", "sampler", "curriculum", "active", "eval"} | {
    f"stage.{s.lower()}" for s in STAGE_ORDER}


def parse_config(text):
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    extra = set(parser.sections()) - KNOWN_SECTIONS
    if extra:
        raise ConfigError(f"unknown sections {sorted(extra)}")

    run = _section_values(parser, "run", {"seed": 0, "out_dir": "", "split": (0.7,)})
    seed = run.get("seed", 0)

    world_defaults = _defaults(WorldConfig)
    world_kw = _section_values(parser, "world", world_defaults, {"class_priors": _priors})
    world_kw.setdefault("seed", seed)
    try:
        world = WorldConfig(**world_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc

    model_kw = _section_values(parser, "model", {
        "audio_hidden": (64,), "image_hidden": (64,), "d": 16, "head_hidden": 128,
        "n_clusters": 64, "cluster_scale": 60.0, "class_hidden": 128})
    d = model_kw.pop("d", 16)
    audio = EncoderConfig(world.audio_shape, model_kw.pop("audio_hidden", (64,)), d)
    image = EncoderConfig(world.image_shape, model_kw.pop("image_hidden", (64,)), d)
    model = ModelConfig(audio=audio, image=image, n_classes=world.n_classes, **model_kw)

    sampler_kw = _section_values(parser, "sampler", {"delta_t": 10, "batch_size": 32,
                                                     "negatives": "all"})
    sampler = SamplerConfig(**sampler_kw)

    names = list(STAGE_ORDER)
    if parser.has_section("curriculum"):
        cur = _section_values(parser, "curriculum", {}, {"stages": _stages})
        names = cur.get("stages", names)
    stage_defaults = _defaults(StageConfig)
    stage_defaults.pop("loss")
    stages = []
    for name in names:
        kw = _stage_base(name, sampler)
        kw.update(_section_values(parser, f"stage.{name.lower()}", stage_defaults))
        stages.append(StageConfig(name, **kw))
    for s in STAGE_ORDER:
        if s not in names and parser.has_section(f"stage.{s.lower()}"):
            raise ConfigError(f"[stage.{s.lower()}] given but {s} is not in the curriculum")
    curriculum = CurriculumConfig(tuple(stages))

    active = ActiveConfig(**_section_values(parser, "active", _defaults(ActiveConfig)))
    eval_cfg = EvalConfig(**_section_values(parser, "eval", _defaults(EvalConfig)))

    kw = dict(world=world, model=model, sampler=sampler, curriculum=curriculum,
              active=active, eval=eval_cfg, seed=seed)
    if "split" in run:
        kw["split"] = run["split"]
    if run.get("out_dir"):
        kw["out_dir"] = run["out_dir"]
    return ExperimentConfig(**kw)


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def _to_ini(cfg):
    lines = ["[run]", f"seed = {cfg.seed}", f"out_dir = {cfg.out_dir}",
             f"split = {_fmt(cfg.split)}", "", "[world]"]
    for f in dataclasses.fields(WorldConfig):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.world, f.name))}")
    m = cfg.model
    lines += ["", "[model]", f"audio_hidden = {_fmt(m.audio.hidden)}",
              f"image_hidden = {_fmt(m.image.hidden)}", f"d = {m.d}",
              f"head_hidden = {m.head_hidden}", f"n_clusters = {m.n_clusters}",
              f"cluster_scale = {_fmt(m.cluster_scale)}", f"class_hidden = {m.class_hidden}",
              "", "[sampler]", f"delta_t = {cfg.sampler.delta_t}",
              f"batch_size = {cfg.sampler.batch_size}", f"negatives = {cfg.sampler.negatives}",
              "", "[curriculum]",
              "stages = " + ", ".join(s.loss.lower() for s in cfg.curriculum.stages)]
    for s in cfg.curriculum.stages:
        lines += ["", f"[stage.{s.loss.lower()}]"]
        for f in dataclasses.fields(StageConfig):
            if f.name != "loss":
                lines.append(f"{f.name} = {_fmt(getattr(s, f.name))}")
    lines += ["", "[active]", f"budgets = {_fmt(cfg.active.budgets)}",
              f"strategy = {cfg.active.strategy}", f"selection = {cfg.active.selection}",
              "", "[eval]"]
    for f in dataclasses.fields(EvalConfig):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.eval, f.name))}")
    return "\n".join(lines) + "\n"


def with_seed(cfg, seed):
    """Same experiment under another seed (world seed follows)."""
    return replace(cfg, seed=seed, world=replace(cfg.world, seed=seed))
