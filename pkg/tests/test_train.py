import math

import numpy as np
import pytest

from dagpred.datasets import SynthConfig, generate_synthetic
from dagpred.encoding import EncodingConfig
from dagpred.errors import EmptyDataset, OutOfRange, ShapeMismatch
from dagpred.model import ModelConfig, init_params
from dagpred.train import (
    AdamWState,
    Schedule,
    TargetScaler,
    TrainConfig,
    adamw_step,
    ema_update,
    fit,
    lr_at,
    write_run_dir,
)

ENC = EncodingConfig.accuracy()
TINY = ModelConfig(channels=16, blocks=1, dropout=0.0, readout="SumNodes", input_dim=32)


def test_presets():
    acc, lat = TrainConfig.accuracy(), TrainConfig.latency()
    assert (acc.epochs, acc.warmup_epochs, acc.schedule) == (3000, 300, Schedule.COSINE)
    assert (lat.epochs, lat.warmup_epochs, lat.schedule) == (50, 5, Schedule.LINEAR_DECAY)
    assert acc.betas == (0.9, 0.999) and acc.weight_decay == 0.01 and acc.ema_decay == 0.99


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, warmup_epochs=10)
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-3, lr_peak=1e-4)


def test_lr_schedule_values():
    cfg = TrainConfig.accuracy()
    assert lr_at(0, cfg) == 1e-6
    assert lr_at(300, cfg) == pytest.approx(1e-4, abs=1e-18)
    assert lr_at(1650, cfg) == pytest.approx(5e-5, abs=1e-18)
    assert lr_at(3000, cfg) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(150, cfg) == pytest.approx((1e-6 + 1e-4) / 2, abs=1e-18)
    lin = TrainConfig.latency()
    assert lr_at(5, lin) == pytest.approx(1e-4)
    assert lr_at(27.5, lin) == pytest.approx(5e-5)
    with pytest.raises(OutOfRange):
        lr_at(-1, cfg)
    with pytest.raises(OutOfRange):
        lr_at(3001, cfg)


def test_lr_continuous_at_warmup_boundary():
    cfg = TrainConfig.accuracy()
    assert abs(lr_at(300 - 1e-9, cfg) - lr_at(300, cfg)) < 1e-12


def test_adamw_first_step():
    theta = {"w": np.zeros(1)}
    adamw_step(theta, {"w": np.ones(1)}, AdamWState(), 0.1, TrainConfig(weight_decay=0.0))
    assert theta["w"][0] == pytest.approx(-0.1, abs=1e-8)


def test_adamw_zero_gradient_no_decay():
    theta = {"w": np.array([0.7])}
    adamw_step(theta, {"w": np.zeros(1)}, AdamWState(), 0.1, TrainConfig(weight_decay=0.0))
    assert theta["w"][0] == 0.7


def test_adamw_decay_only():
    theta = {"w": np.ones(1)}
    adamw_step(theta, {"w": np.zeros(1)}, AdamWState(), 0.1, TrainConfig(weight_decay=0.01))
    assert theta["w"][0] == pytest.approx(0.999, abs=1e-15)


def test_adamw_no_decay_set_is_untouched():
    cfg = TrainConfig()
    params = {k: t.data for k, t in init_params(TINY).items()}
    for k in params:
        params[k] += 0.5
    before = {k: v.copy() for k, v in params.items()}
    state = AdamWState()
    for _ in range(5):
        adamw_step(params, {}, state, 1e-2, cfg)
    for k in params:
        last = k.rsplit(".", 1)[-1]
        if last in ("gamma", "beta") or last.startswith("bias"):
            assert np.array_equal(params[k], before[k])
        else:
            assert not np.array_equal(params[k], before[k])


def test_adamw_shape_check():
    with pytest.raises(ShapeMismatch):
        adamw_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamWState(), 0.1, TrainConfig())


def test_ema_values():
    ema, p = {"w": np.zeros(1)}, {"w": np.ones(1)}
    ema_update(ema, p, 0.99)
    assert ema["w"][0] == pytest.approx(0.01, abs=1e-15)
    ema_update(ema, p, 0.99)
    assert ema["w"][0] == pytest.approx(0.0199, abs=1e-15)
    fixed = {"w": np.array([3.0])}
    ema_update(fixed, {"w": np.array([3.0])}, 0.99)
    assert fixed["w"][0] == pytest.approx(3.0, abs=1e-15)
    with pytest.raises(ShapeMismatch):
        ema_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.99)


def test_ema_converges_geometrically():
    ema, p = {"w": np.zeros(1)}, {"w": np.ones(1)}
    for k in range(1, 50):
        ema_update(ema, p, 0.99)
        assert 1 - ema["w"][0] == pytest.approx(0.99 ** k, rel=1e-12)


def test_target_scaler():
    s = TargetScaler.fit([2.0, 4.0, 6.0])
    np.testing.assert_allclose(s.transform([2.0, 6.0]), [0.0, 1.0])
    np.testing.assert_allclose(s.inverse(s.transform([3.3])), [3.3])
    assert TargetScaler.fit([5.0]).span == 1.0


@pytest.fixture(scope="module")
def records():
    return generate_synthetic(SynthConfig(n_graphs=40, seed=11))


def test_fit_zero_epochs_returns_init(records):
    cfg = TrainConfig(epochs=0, warmup_epochs=0)
    res = fit(records[:10], records[10:], TINY, cfg, ENC)
    init = init_params(TINY, cfg.seed)
    assert res.history == []
    for k, t in init.items():
        assert np.array_equal(res.final[k], t.data)


def test_fit_is_deterministic(records):
    cfg = TrainConfig(epochs=3, warmup_epochs=1, seed=4, batch_size=8)
    mc = ModelConfig(channels=16, blocks=1, dropout=0.1, readout="SumNodes", input_dim=32)
    a = fit(records[:30], records[30:], mc, cfg, ENC)
    b = fit(records[:30], records[30:], mc, cfg, ENC)
    assert [(h.train_mse, h.val_metric) for h in a.history] == \
        [(h.train_mse, h.val_metric) for h in b.history]
    assert all(np.array_equal(a.final[k], b.final[k]) for k in a.final)


def test_fit_history_and_selection(records):
    cfg = TrainConfig(epochs=4, warmup_epochs=1, batch_size=10)
    res = fit(records[:30], records[30:], TINY, cfg, ENC)
    assert [h.epoch for h in res.history] == [0, 1, 2, 3]
    best = max(h.val_metric for h in res.history)
    assert res.history[res.best_epoch].val_metric == best
    assert res.history[res.best_ema_epoch].val_metric_ema == max(h.val_metric_ema for h in res.history)
    pred = res.predictor("final").predict([r.to_dag() for r in records[30:]])
    assert pred.shape == (10,) and np.isfinite(pred).all()


def test_fit_empty():
    with pytest.raises(EmptyDataset):
        fit([], [], TINY, TrainConfig(epochs=1, warmup_epochs=0), ENC)


def test_memorization(records):
    rec = records[:1]
    cfg = TrainConfig(epochs=200, warmup_epochs=10, seed=0)
    mc = ModelConfig(channels=32, blocks=2, dropout=0.0, readout="SumNodes", input_dim=32)
    res = fit(rec, [], mc, cfg, ENC, scaler=TargetScaler(0.0, 2 * rec[0].target))
    assert res.history[0].train_mse > 0.01
    assert res.history[-1].train_mse < 1e-4


def test_run_dir(records, tmp_path):
    cfg = TrainConfig(epochs=3, warmup_epochs=1)
    res = fit(records[:20], records[20:], TINY, cfg, ENC)
    out = write_run_dir(res, tmp_path / "run")
    lines = (out / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_mse,val_metric" and len(lines) == 4
    for name in ("ckpt_final.json", "ckpt_best.json", "ckpt_best_ema.json", "config.json"):
        assert (out / name).is_file()
