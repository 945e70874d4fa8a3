import math

import numpy as np
import pytest
from conftest import tiny_problem

from magcrn import tensor as T
from magcrn import train as TR
from magcrn.errors import CorruptCheckpoint, EmptySplit, IoError, NonFiniteLoss, VersionMismatch
from magcrn.nn import init_parameters


def closed_form(e, lr_max=1e-2, lr_min=1e-7, period=20):
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * (e % period) / period))


# -- loss and schedule -------------------------------------------------------------------


def test_mae_loss_examples():
    t = np.array([[1.0, -2.0], [3.0, 0.5]])
    assert TR.mae_loss(T.Tensor(t), t).item() == 0.0
    assert TR.mae_loss(T.Tensor(t - 0.75), t).item() == pytest.approx(0.75, abs=1e-15)
    assert TR.mae_loss(T.Tensor([[2.0, 2.0]]), [[1.0, 3.0]]).item() == 1.0


def test_cosine_lr_examples():
    cfg = TR.TrainConfig()
    assert TR.cosine_lr(0, cfg) == 1e-2
    assert abs(TR.cosine_lr(10, cfg) - 5.00005e-3) < 1e-15
    assert TR.cosine_lr(20, cfg) == 1e-2
    assert TR.cosine_lr(19, cfg) == pytest.approx(1e-7 + 0.5 * (1e-2 - 1e-7) * (1 + math.cos(19 * math.pi / 20)),
                                                  abs=1e-15)


def test_cosine_lr_matches_closed_form():
    cfg = TR.TrainConfig()
    for e in range(201):
        assert abs(TR.cosine_lr(e, cfg) - closed_form(e)) <= 1e-12


def test_train_config_validation():
    from magcrn.errors import InvalidConfig

    with pytest.raises(InvalidConfig):
        TR.TrainConfig(lr_min=1.0, lr_max=0.1).validate()
    with pytest.raises(InvalidConfig):
        TR.TrainConfig(patience=0).validate()


# -- Adam --------------------------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    p = {"x": T.Tensor(3.0)}
    state = TR.AdamState.zeros_like(p)
    TR.adam_step(p, {"x": np.array(0.37)}, state, lr=0.01)
    # m_hat = g, v_hat = g^2 after bias correction: step = lr * g / (|g| + eps)
    assert p["x"].item() == pytest.approx(3.0 - 0.01 * 0.37 / (0.37 + 1e-8), abs=1e-15)


def test_adam_zero_gradient_keeps_parameters():
    p = {"a": T.Tensor([1.0, -2.0])}
    state = TR.AdamState.zeros_like(p)
    TR.adam_step(p, {"a": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(p["a"].data, [1.0, -2.0])
    assert state.step == 1


def test_adam_symmetric_parameters_stay_equal():
    p = {"a": T.Tensor([0.5, 0.5]), "b": T.Tensor([0.5, 0.5])}
    state = TR.AdamState.zeros_like(p)
    rng = np.random.default_rng(0)
    for _ in range(10):
        g = rng.standard_normal(2)
        TR.adam_step(p, {"a": g, "b": g.copy()}, state, lr=0.05)
    np.testing.assert_array_equal(p["a"].data, p["b"].data)


def test_small_step_decreases_batch_loss():
    cfg, train, _ = tiny_problem()
    params = init_parameters(cfg)
    batch = train.subset(np.arange(8))
    named = params.named_parameters()
    with T.GradTape() as tape:
        before = TR.batch_loss(params, batch)
    tape.backward(before)
    TR.adam_step(named, {k: p.grad for k, p in named.items()}, TR.AdamState.zeros_like(named), lr=1e-4)
    with T.no_grad():
        after = TR.batch_loss(params, batch)
    assert after.item() < before.item()


# -- early stopping ----------------------------------------------------------------------


def test_early_stopping_bookkeeping():
    stop = TR.EarlyStopping(patience=2)
    seen = []
    for epoch, v in enumerate([5, 4, 4.5, 4.2, 1.0]):
        stop.update(epoch, v)
        seen.append(epoch)
        if stop.should_stop:
            break
    assert seen == [0, 1, 2, 3]  # four epochs run
    assert stop.best_epoch == 1 and stop.best == 4


def test_train_loop_returns_best_epoch_parameters(monkeypatch):
    cfg, train, val = tiny_problem()
    params = init_parameters(cfg)
    scripted = iter([5.0, 4.0, 4.5, 4.2, 1.0])
    monkeypatch.setattr(TR, "validation_mae", lambda p, b: next(scripted))
    snapshots = []
    result = TR.train_loop(params, train, val, TR.TrainConfig(patience=2, max_epochs=50),
                           on_epoch=lambda row: snapshots.append(params.state_dict()))
    assert len(result.history) == 4 and result.stopped_early
    assert result.best_epoch == 1
    best = result.best_params.state_dict()
    for k in best:
        np.testing.assert_array_equal(best[k], snapshots[1][k])
    assert any(not np.array_equal(best[k], snapshots[3][k]) for k in best)


def test_history_deterministic_and_round_trips(tmp_path):
    cfg, train, val = tiny_problem()
    tc = TR.TrainConfig(max_epochs=3)
    a = TR.train_loop(init_parameters(cfg), train, val, tc)
    b = TR.train_loop(init_parameters(cfg), train, val, tc)
    assert a.history == b.history
    TR.write_history(a.history, tmp_path / "h.tsv")
    assert TR.read_history(tmp_path / "h.tsv") == a.history
    assert [r["lr"] for r in a.history] == [TR.cosine_lr(e, tc) for e in range(3)]


def test_non_finite_loss_aborts():
    cfg, train, val = tiny_problem()
    params = init_parameters(cfg)
    params.head.out_layer.bias.data = np.full(cfg.H, np.inf)
    with pytest.raises(NonFiniteLoss):
        TR.train_loop(params, train, val, TR.TrainConfig(max_epochs=1))


def test_empty_split_rejected():
    cfg, train, val = tiny_problem()
    with pytest.raises(EmptySplit):
        TR.train_loop(init_parameters(cfg), train, val.subset(np.arange(0)), TR.TrainConfig(max_epochs=1))


# -- checkpoints -------------------------------------------------------------------------


@pytest.fixture
def trained(tmp_path):
    cfg, train, val = tiny_problem()
    result = TR.train_loop(init_parameters(cfg), train, val, TR.TrainConfig(max_epochs=2))
    path = tmp_path / "run.magcrn"
    TR.save_checkpoint(path, TR.checkpoint_from_result(result, meta={"note": "x"}))
    return result, path


def test_checkpoint_round_trip_bit_exact(trained):
    result, path = trained
    ck = TR.load_checkpoint(path)
    want = result.best_params.state_dict()
    assert set(ck.params) == set(want)
    for k in want:
        assert ck.params[k].tobytes() == want[k].tobytes()
    assert ck.meta["note"] == "x"
    assert ck.epoch == result.state.epoch and ck.best_val == result.best_val
    restored = TR.params_from_checkpoint(ck)
    for k, v in restored.state_dict().items():
        assert v.tobytes() == want[k].tobytes()


def test_truncated_checkpoint_is_corrupt(trained):
    _, path = trained
    blob = path.read_bytes()
    for cut in (len(blob) - 1, len(blob) - 9, len(blob) // 2, 12):
        path.write_bytes(blob[:cut])
        with pytest.raises(CorruptCheckpoint):
            TR.load_checkpoint(path)


def test_version_byte_altered(trained):
    _, path = trained
    blob = bytearray(path.read_bytes())
    blob[len(TR.MAGIC_PREFIX)] = ord("9")
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatch):
        TR.load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x").write_bytes(b"hello world")
    with pytest.raises(CorruptCheckpoint):
        TR.load_checkpoint(tmp_path / "x")
    with pytest.raises(IoError):
        TR.load_checkpoint(tmp_path / "missing")


def test_resume_reproduces_unbroken_history(tmp_path):
    cfg, train, val = tiny_problem()
    full = TR.train_loop(init_parameters(cfg), train, val, TR.TrainConfig(max_epochs=6, period=4))
    first = TR.train_loop(init_parameters(cfg), train, val, TR.TrainConfig(max_epochs=3, period=4))
    TR.save_checkpoint(tmp_path / "mid.magcrn", TR.checkpoint_from_result(first))
    state = TR.state_from_checkpoint(TR.load_checkpoint(tmp_path / "mid.magcrn"))
    rest = TR.train_loop(state.params, train, val, TR.TrainConfig(max_epochs=6, period=4), resume=state)
    assert first.history + rest.history == full.history
    for k, v in full.best_params.state_dict().items():
        assert rest.best_params.state_dict()[k].tobytes() == v.tobytes()
