import csv
import time

import numpy as np
import pytest

from cocoon import trainer
from cocoon.exceptions import CheckpointError, ConfigError, ContractError, HashMismatchError, \
    NumericError
from cocoon.models import EncoderConfig, ModelConfig, init_params
from cocoon.synth import WorldConfig, generate_world, split
from cocoon.trainer import (
    Checkpoint,
    CurriculumConfig,
    StageConfig,
    TrainingData,
    TrainingDivergedError,
    load_checkpoint,
    run_curriculum,
    run_stage,
    save_checkpoint,
    stage_rng,
    write_history,
)

MODEL = ModelConfig(EncoderConfig((8, 8), (16,), 8), EncoderConfig((4, 4, 3), (16,), 8),
                    head_hidden=16, n_clusters=6, n_classes=4, class_hidden=16)


@pytest.fixture(scope="module")
def data():
    world = generate_world(WorldConfig(n_classes=4, n_sequences=60, frames_per_sequence=20,
                                       noise_std=1.0))
    train, val, _ = split(world, seed=0)
    return TrainingData(train, val, labels=train.labels.copy(), n_classes=4)


def same_params(a, b, names=None):
    return all(np.array_equal(a[k].data, b[k].data) for k in (names or a.names()))


def quick(loss, **kw):
    base = dict(steps_max=20, eval_every=10, patience=50, batch_size=8)
    base.update(kw)
    return StageConfig(loss, **base)


def test_zero_steps_returns_params_unchanged(data):
    p = init_params(MODEL, 0)
    out, hist, state = run_stage(quick("AV", steps_max=0), p, data, stage_rng(0, 0))
    assert same_params(p, out) and hist == [] and state.step == 0


def test_input_params_are_not_mutated(data):
    p = init_params(MODEL, 0)
    before = p.copy()
    run_stage(quick("COIN"), p, data, stage_rng(0, 1))
    assert same_params(p, before)


@pytest.mark.parametrize("stage,frozen", [
    (quick("AV"), ("p_aa", "p_clust", "p_class")),
    (quick("COIN"), ("p_clust", "p_class")),
    (quick("JOINT", train_image_encoder=False), ("g", "p_class")),
    (quick("CLASS"), ("g", "p_aa", "p_av", "p_clust")),
])
def test_only_stage_groups_move(stage, frozen, data):
    p = init_params(MODEL, 1)
    out, _, _ = run_stage(stage, p, data, stage_rng(0, 0))
    assert same_params(p, out, p.names(frozen))
    moved = [g for g in stage.trainable_groups() if not same_params(p, out, p.names((g,)))]
    assert "f" in moved


def test_joint_keeps_cluster_rows_unit_norm(data):
    out, _, _ = run_stage(quick("JOINT", learning_rate=1e-2), init_params(MODEL, 0), data,
                          stage_rng(0, 2))
    assert np.allclose(np.linalg.norm(out["p_clust.w"].data, axis=1), 1.0, atol=1e-12)


def test_noiseless_world_av_loss_drops():
    world = generate_world(WorldConfig(n_classes=4, n_sequences=60, frames_per_sequence=20,
                                       noise_std=0.0, nuisance_std=0.0))
    d = TrainingData(world, world)
    stage = StageConfig("AV", steps_max=200, eval_every=200, patience=5)
    val = trainer._validation_batches(stage, d, 0)
    p = init_params(MODEL, 0)
    before = trainer._mean_loss(stage, p, val)
    out, _, _ = run_stage(stage, p, d, stage_rng(0, 0))
    assert trainer._mean_loss(stage, out, val) < before


def test_same_seed_same_final_loss(data):
    runs = [run_stage(quick("AV"), init_params(MODEL, 3), data, stage_rng(3, 0)) for _ in range(2)]
    assert runs[0][1][-1]["train_loss"] == runs[1][1][-1]["train_loss"]
    assert same_params(runs[0][0], runs[1][0])


def test_early_stopping_on_flat_validation(data, monkeypatch):
    monkeypatch.setattr(trainer, "_mean_loss", lambda *a: 1.0)
    _, hist, state = run_stage(quick("AV", steps_max=1000, eval_every=5, patience=3),
                               init_params(MODEL, 0), data, stage_rng(0, 0))
    # first evaluation sets the best value, the next three fail to improve
    assert state.step == 20 and len(hist) == 20 and state.done


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(data):
    p = init_params(MODEL, 0)
    p["f.w0"].data[:] = np.inf
    with pytest.raises(TrainingDivergedError) as err:
        run_stage(quick("AV"), p, data, stage_rng(0, 0))
    assert isinstance(err.value, NumericError) and err.value.stage == "AV"


def test_class_stage_needs_labels(data):
    bare = TrainingData(data.train, data.val)
    with pytest.raises(ContractError):
        run_stage(quick("CLASS"), init_params(MODEL, 0), bare, stage_rng(0, 3))
    with pytest.raises(ContractError):
        run_curriculum(CurriculumConfig((quick("AV"), quick("CLASS"))), bare, model_config=MODEL)


def test_curriculum_order_enforced():
    with pytest.raises(ConfigError):
        CurriculumConfig((StageConfig("COIN"), StageConfig("AV")))
    with pytest.raises(ConfigError):
        CurriculumConfig((StageConfig("AV"), StageConfig("AV")))
    with pytest.raises(ConfigError):
        StageConfig("XYZ")


def test_truncated_curriculum_equals_single_stage(data):
    cur = CurriculumConfig(tuple(quick(s) for s in ("AV", "COIN", "JOINT")))
    ckpt = run_curriculum(cur.truncated(1), data, seed=4, model_config=MODEL)
    single, _, _ = run_stage(quick("AV"), init_params(MODEL, 4), data, stage_rng(4, 0),
                             val_seed=4 * 7919)
    assert same_params(ckpt.params, single)


def test_stagewise_equals_single_call(data):
    cur = CurriculumConfig(tuple(quick(s) for s in ("AV", "COIN", "JOINT")))
    whole = run_curriculum(cur, data, seed=2, model_config=MODEL)
    p = None
    for i in range(3):
        p = run_curriculum(cur, data, seed=2, model_config=MODEL, params=p, start=i,
                           stop=i + 1).params
    assert same_params(whole.params, p)
    assert whole.stage == "JOINT" and whole.params["p_clust.w"].shape[0] == MODEL.n_clusters


def test_resume_matches_unbroken_run(data, tmp_path):
    cur = CurriculumConfig(tuple(quick(s, steps_max=30) for s in ("AV", "COIN", "JOINT")))
    whole = run_curriculum(cur, data, seed=5, model_config=MODEL)
    path = tmp_path / "mid.ckpt"

    def keep(ckpt):
        if ckpt.stage == "COIN" and ckpt.step == 15:
            save_checkpoint(ckpt, path)

    run_curriculum(cur, data, seed=5, model_config=MODEL, on_checkpoint=keep, checkpoint_every=5)
    resumed = run_curriculum(cur, data, seed=5, resume=load_checkpoint(path))
    assert same_params(whole.params, resumed.params)


def test_checkpoint_roundtrip_and_integrity(data, tmp_path):
    out, _, state = run_stage(quick("COIN"), init_params(MODEL, 0), data, stage_rng(0, 1))
    rng = stage_rng(0, 1)
    ckpt = Checkpoint(out, "COIN", 1, state.step, "a" * 64, rng.bit_generator.state,
                      state.optimizer, {"note": "x"})
    path = save_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = load_checkpoint(path, expected_hash="a" * 64)
    assert same_params(out, back.params) and back.model_config == MODEL
    assert back.stage == "COIN" and back.step == state.step and back.meta == {"note": "x"}
    assert back.rng_state == rng.bit_generator.state
    assert all(np.array_equal(back.optimizer["m"][k], state.optimizer["m"][k])
               for k in state.optimizer["m"])
    with pytest.raises(HashMismatchError):
        load_checkpoint(path, expected_hash="b" * 64)
    assert load_checkpoint(path, expected_hash="b" * 64, force=True).stage == "COIN"
    raw = path.read_bytes()
    for bad in (raw[:-8], raw + b"\0", b"XXXXXXXX" + raw[8:], raw[:50]):
        path.write_bytes(bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_history_csv(tmp_path):
    rows = [{"stage": "AV", "step": 1, "train_loss": 1.5, "val_loss": None, "wall_ms": 2.0}]
    path = tmp_path / "h.csv"
    write_history(rows, path)
    write_history(rows, path, append=True)
    got = list(csv.DictReader(open(path)))
    assert len(got) == 2 and got[0]["val_loss"] == "" and got[0]["stage"] == "AV"


def test_tiny_world_end_to_end_under_a_minute():
    t0 = time.perf_counter()
    world = generate_world(WorldConfig(n_classes=4, n_sequences=200, frames_per_sequence=10))
    train, val, _ = split(world, seed=0)
    cur = CurriculumConfig(tuple(StageConfig(s, steps_max=100) for s in ("AV", "COIN", "JOINT",
                                                                         "CLASS")))
    ckpt = run_curriculum(cur, TrainingData(train, val, train.labels, 4), model_config=MODEL)
    assert ckpt.stage == "CLASS"
    assert time.perf_counter() - t0 < 60
