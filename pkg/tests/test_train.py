import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reeflora import LoraConfig, build_model, count_trainable
from reeflora.checkpoint import Checkpoint, frozen_fingerprint, snapshot
from reeflora.errors import ConfigError, ContractError, DataError, GeometryError, TrainingError
from reeflora.optim import OptimizerState, adamw_step
from reeflora.params import ParamSet
from reeflora.tensor import Tensor
from reeflora.train import SWEEP_COLUMNS, TrainConfig, evaluate, rank_sweep, train

from conftest import write_tiles

QUICK = TrainConfig(learning_rate=1e-3, batch_size=4, max_iterations=100, eval_interval=50)


def one_param(value, grad=None):
    p = ParamSet([("w", Tensor(np.array([value]), requires_grad=True))])
    if grad is not None:
        p["w"].grad = np.array([grad])
    return p


# -- optimizer -------------------------------------------------------------------

def test_adamw_hand_examples():
    p = one_param(1.0, 1.0)
    adamw_step(p, None, OptimizerState.for_params(p), lr=0.1, weight_decay=0.0)
    assert p["w"].data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert abs(p["w"].data[0] - 0.9) < 1e-8

    p = one_param(1.0, 0.0)
    adamw_step(p, None, OptimizerState.for_params(p), lr=0.1, weight_decay=0.5)
    assert p["w"].data[0] == 0.95


@given(st.integers(0, 2**32 - 1))
def test_adamw_lr_zero_is_identity(seed):
    rs = np.random.default_rng(seed)
    p = ParamSet([("a", Tensor(rs.normal(size=(3, 2)), requires_grad=True)),
                  ("b", Tensor(rs.normal(size=4), requires_grad=False))])
    p["a"].grad = rs.normal(size=(3, 2))
    before = {k: v.data.copy() for k, v in p.items()}
    adamw_step(p, None, OptimizerState.for_params(p), lr=0.0, weight_decay=0.1)
    assert all(p[k].data.tobytes() == before[k].tobytes() for k in p)


def test_adamw_zero_grad_no_decay_is_fixed_point():
    rs = np.random.default_rng(0)
    p = ParamSet([("a", Tensor(rs.normal(size=5), requires_grad=True))])
    state = OptimizerState.for_params(p)
    before = p["a"].data.copy()
    for _ in range(5):
        adamw_step(p, {"a": np.zeros(5)}, state, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p["a"].data, before)


def test_adamw_matches_reference_loop():
    rs = np.random.default_rng(1)
    theta = rs.normal(size=6)
    p = ParamSet([("a", Tensor(theta.copy(), requires_grad=True))])
    state = OptimizerState.for_params(p)
    m = v = np.zeros(6)
    ref = theta.copy()
    for t in range(1, 6):
        g = rs.normal(size=6)
        adamw_step(p, {"a": g}, state, lr=0.01, weight_decay=0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8) - 0.01 * 0.1 * ref
    np.testing.assert_allclose(p["a"].data, ref, rtol=1e-13)
    assert state.step == 5


def test_adamw_contract_errors():
    p = ParamSet([("a", Tensor(np.zeros(3), requires_grad=True)), ("f", Tensor(np.zeros(2)))])
    state = OptimizerState.for_params(p)
    assert set(state.m) == {"a"}
    with pytest.raises(ContractError):
        adamw_step(p, {"a": np.zeros(4)}, state, lr=0.1)
    with pytest.raises(ContractError):
        adamw_step(p, {"a": np.zeros(3), "f": np.zeros(2)}, state, lr=0.1)
    with pytest.raises(ContractError):
        adamw_step(p, {}, state, lr=0.1)
    state.m["a"] = np.zeros(5)
    with pytest.raises(ContractError):
        adamw_step(p, {"a": np.zeros(3)}, state, lr=0.1)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(precision="f16")
    d = TrainConfig().to_dict()
    assert (d["learning_rate"], d["weight_decay"], d["batch_size"], d["max_iterations"]) == (5e-6, 5e-4, 16, 30_000)
    assert TrainConfig.from_dict(d) == TrainConfig()


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip_is_byte_identical(tmp_path, toy_config, lora4):
    model = build_model(toy_config, lora4, 0)
    state = OptimizerState.for_params(model.params)
    state.step = 3
    for k in state.m:
        state.m[k] += 0.5
    ck = snapshot(model, QUICK.to_dict(), state, 7, 0.625)
    path = ck.save(tmp_path / "a.ckpt")
    loaded = Checkpoint.load(path)
    assert loaded.save(tmp_path / "b.ckpt").read_bytes() == path.read_bytes()
    assert loaded.iteration == 7 and loaded.best_val_match_ratio == 0.625 and loaded.optimizer.step == 3
    assert loaded.lora_config == lora4 and loaded.model_config == toy_config
    assert set(loaded.optimizer.m) == set(model.trainable())
    probe = np.random.default_rng(0).random((2, 64, 64, 3)).astype(np.float32)
    assert loaded.model().logits(probe).data.tobytes() == model.logits(probe).data.tobytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_corruption(tmp_path, toy_config, lora4):
    buf = snapshot(build_model(toy_config, lora4, 0), {}, None, 0, None).to_bytes()
    with pytest.raises(DataError, match="magic"):
        Checkpoint.from_bytes(b"XXXXXXXX" + buf[8:])
    with pytest.raises(DataError):
        Checkpoint.from_bytes(buf[:-10])
    with pytest.raises(DataError, match="trailing"):
        Checkpoint.from_bytes(buf + b"\0")
    with pytest.raises(DataError, match="missing.ckpt"):
        Checkpoint.load(tmp_path / "missing.ckpt")


# -- training --------------------------------------------------------------------

def test_training_freezes_backbone_and_is_deterministic(tmp_path, toy_config, toy_manifest):
    lc = LoraConfig(rank=4)
    before = frozen_fingerprint(build_model(toy_config, lc, QUICK.seed).params)
    a = train(toy_config, lc, QUICK, toy_manifest, toy_manifest, tmp_path / "a")
    b = train(toy_config, lc, QUICK, toy_manifest, toy_manifest, tmp_path / "b")
    assert frozen_fingerprint(a.latest.params) == before
    assert (tmp_path / "a" / "latest.ckpt").read_bytes() == (tmp_path / "b" / "latest.ckpt").read_bytes()
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()
    # adapters actually moved
    start = build_model(toy_config, lc, QUICK.seed).params
    assert a.latest.params["blocks.0.attn.query.lora_B"].data.any()
    assert not np.array_equal(a.latest.params["head.weight"].data, start["head.weight"].data)
    assert len(a.latest.optimizer.m) == len(a.latest.params.trainable())

    log = [json.loads(x) for x in (tmp_path / "a" / "log.jsonl").read_text().splitlines()]
    assert [e["iter"] for e in log] == list(range(1, 101))
    assert set(log[0]) == {"iter", "loss", "lr"}
    assert [e["iter"] for e in a.evals] == [50, 100]


def test_rank_zero_trains_head_only(toy_config, toy_manifest):
    lc = LoraConfig(rank=0)
    start = build_model(toy_config, lc, 0).params
    res = train(toy_config, lc, replace(QUICK, max_iterations=20), toy_manifest, toy_manifest)
    end = res.latest.params
    assert set(end.trainable()) == {"head.weight", "head.bias"}
    for name in end:
        same = end[name].data.tobytes() == start[name].data.tobytes()
        assert same == (not name.startswith("head.")), name


def test_seed_changes_the_run(toy_config, toy_manifest, lora4):
    cfg = replace(QUICK, max_iterations=10)
    a = train(toy_config, lora4, cfg, toy_manifest, toy_manifest)
    b = train(toy_config, lora4, replace(cfg, seed=1), toy_manifest, toy_manifest)
    assert a.latest.to_bytes() != b.latest.to_bytes()


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning",
                            "ignore:invalid value encountered:RuntimeWarning")
def test_nan_loss_aborts(toy_config, toy_manifest, lora4):
    with pytest.raises(TrainingError, match="non-finite"):
        train(toy_config, lora4, replace(QUICK, learning_rate=1e30, max_iterations=20), toy_manifest, toy_manifest)


def test_unreadable_tile_strictness(tmp_path, toy_config, lora4):
    m = write_tiles(tmp_path / "d", 6, 64)
    (tmp_path / "d" / "t2.png").write_bytes(b"broken")
    cfg = replace(QUICK, max_iterations=3)
    with pytest.raises(DataError, match="t2.png"):
        train(toy_config, lora4, cfg, m, m)
    res = train(toy_config, lora4, replace(cfg, strict=False), m, m)
    assert res.latest.iteration == 3


def test_evaluate_geometry_error_before_inference(tmp_path, toy_config, lora4):
    ck = snapshot(build_model(toy_config, lora4, 0), QUICK.to_dict(), None, 0, None)
    wrong = write_tiles(tmp_path / "w", 2, 32)
    with pytest.raises(GeometryError, match="32x32"):
        evaluate(ck, wrong)
    with pytest.raises(GeometryError):
        train(toy_config, lora4, QUICK, wrong, wrong)


def test_overfit_smoke_and_loss_windows(tmp_path, toy_config, toy_manifest, lora4):
    cfg = TrainConfig(learning_rate=1e-3, batch_size=8, max_iterations=2000, eval_interval=100)
    res = train(toy_config, lora4, cfg, toy_manifest, toy_manifest, tmp_path)
    assert max(e["match_ratio"] for e in res.evals) == 1.0
    assert evaluate(res.best, toy_manifest).match_ratio == 1.0
    # mean loss over consecutive 200-iteration windows after the first 200 never rises
    loss = np.array([e["loss"] for e in res.log])
    windows = loss[200:].reshape(-1, 200).mean(axis=1)
    assert np.all(np.diff(windows) <= 0), windows
    # reload from disk and evaluate twice: identical reports
    ck = Checkpoint.load(tmp_path / "best.ckpt")
    assert evaluate(ck, toy_manifest).to_dict() == evaluate(ck, toy_manifest).to_dict()


def test_rank_sweep(tmp_path, toy_config, toy_manifest):
    cfg = replace(QUICK, max_iterations=5, eval_interval=5)
    table = rank_sweep(toy_config, LoraConfig(), cfg, [6, 0, 3], toy_manifest, toy_manifest, toy_manifest,
                       tmp_path)
    rows = table.rows
    assert [r["rank"] for r in rows] == [0, 3, 6]
    counts = [r["trainable_params"] for r in rows]
    assert counts[0] == count_trainable(toy_config, LoraConfig(rank=0)).trainable == 32 * 8 + 8
    assert all(a < b for a, b in zip(counts, counts[1:]))
    assert all(r["status"] == "ok" for r in rows)
    again = rank_sweep(toy_config, LoraConfig(), cfg, [0, 3, 6], toy_manifest, toy_manifest, toy_manifest)
    assert again.to_dict() == table.to_dict()
    assert table.to_csv().splitlines()[0] == ",".join(SWEEP_COLUMNS)
    assert (tmp_path / "rank_3" / "best.ckpt").exists()


def test_rank_sweep_marks_failures_and_continues(toy_config, toy_manifest):
    cfg = replace(QUICK, max_iterations=2)
    # rank 32 is not < min(d, k) = 32 for the toy attention projections
    table = rank_sweep(toy_config, LoraConfig(), cfg, [0, 32], toy_manifest, toy_manifest, toy_manifest)
    assert [r["status"] for r in table.rows] == ["ok", "failed"]
    assert "rank" in table.rows[1]["error"]
    with pytest.raises(ContractError):
        rank_sweep(toy_config, LoraConfig(), cfg, [3, 3], toy_manifest, toy_manifest, toy_manifest)
