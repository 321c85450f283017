import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stmlp import numcore as nc
from stmlp.datapipe import RawSeries, window_and_split
from stmlp.model import ModelConfig, STMLP, load_checkpoint
from stmlp.numcore import Tensor
from stmlp.synthetic import sinusoid_series
from stmlp.training import (AdamState, DivergenceError, TrainConfig, adam_step, clip_grad_norm, evaluate_mae,
                            fit, masked_mae_loss, multistep_lr)


def tiny_problem(seed=0, n_steps=300):
    series = sinusoid_series(n_nodes=3, n_steps=n_steps, noise=0.05, seed=seed)
    splits = window_and_split(series, T=4, Q=4)
    cfg = ModelConfig(n_nodes=3, T=4, Q=4, d_td=4, d_dw=4, d_su=4, d_d=8, use_sp=False, n_C=1)
    return cfg, splits


# loss -------------------------------------------------------------------------------

def test_loss_examples():
    assert masked_mae_loss(Tensor([[1.0, 2.0]]), np.array([[1.0, 2.0]])).item() == 0.0
    assert masked_mae_loss(Tensor([1.0, 2.0]), np.array([0.0, 4.0])).item() == 2.0
    with pytest.warns(RuntimeWarning):
        assert masked_mae_loss(Tensor([1.0, 2.0]), np.zeros(2)).item() == 0.0


def test_loss_shape_mismatch():
    with pytest.raises(nc.ShapeError):
        masked_mae_loss(Tensor([1.0, 2.0]), np.ones(3))


# optimizer --------------------------------------------------------------------------

def test_adam_zero_grad_no_decay_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState.for_params([p])
    for _ in range(3):
        adam_step([p], [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    p = Tensor(np.array([0.5]), requires_grad=True)
    adam_step([p], [np.array([1.0])], AdamState.for_params([p]), lr=0.002)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    np.testing.assert_allclose(p.data, [0.5 - 0.002 / (1 + 1e-8)], rtol=1e-15)


def test_adam_weight_decay_pulls_toward_zero():
    p = Tensor(np.array([3.0, -3.0]), requires_grad=True)
    state = AdamState.for_params([p])
    for _ in range(5):
        adam_step([p], [np.zeros(2)], state, lr=0.01, weight_decay=0.1)
    assert np.all(np.abs(p.data) < 3.0)
    assert p.data[0] > 0 > p.data[1]


def test_adam_rejects_non_finite():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState.for_params([p])
    with pytest.raises(nc.NonFiniteError):
        adam_step([p], [np.array([np.nan])], state, lr=0.1)
    assert p.data[0] == 1.0 and state.step == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e6, 1e6)), min_size=1, max_size=4),
       st.floats(0.01, 100))
def test_clip_bound(grads, max_norm):
    grads = [g.copy() for g in grads]
    before = np.sqrt(sum((g * g).sum() for g in grads))
    returned = clip_grad_norm(grads, max_norm)
    after = np.sqrt(sum((g * g).sum() for g in grads))
    assert returned == pytest.approx(before)
    assert after <= max_norm + 1e-9
    if before <= max_norm:
        assert after == before


# schedule -----------------------------------------------------------------------------

@pytest.mark.parametrize("epoch,lr", [(0, 0.002), (1, 0.001), (49, 0.001), (50, 0.0005), (80, 0.00025), (199, 0.00025)])
def test_multistep_values(epoch, lr):
    assert multistep_lr(epoch, 0.002, [1, 50, 80], 0.5) == pytest.approx(lr, rel=1e-15)


def test_multistep_gamma_one_constant():
    assert {multistep_lr(e, 0.002, [1, 50, 80], 1.0) for e in range(100)} == {0.002}


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(milestones=[50, 1])
    with pytest.raises(ValueError):
        TrainConfig(gamma=0.0)


# fit ------------------------------------------------------------------------------------

def test_zero_epochs_returns_initial_params():
    cfg, splits = tiny_problem()
    m = STMLP(cfg, seed=1)
    init = m.state_dict()
    res = fit(m, splits, TrainConfig(num_epochs=0))
    assert res.history == []
    for k, v in init.items():
        assert np.array_equal(res.model.state_dict()[k], v)


def test_best_validation_snapshot(tmp_path):
    cfg, splits = tiny_problem()
    res = fit(STMLP(cfg, seed=1), splits, TrainConfig(num_epochs=6, milestones=[3]), out_dir=tmp_path)
    vals = [r.val_mae for r in res.history]
    assert res.best_val_mae == min(vals)
    assert evaluate_mae(res.model, splits.val) == pytest.approx(res.best_val_mae, rel=1e-12)
    best = load_checkpoint(tmp_path / "best.stmp")
    assert evaluate_mae(best, splits.val) == pytest.approx(res.best_val_mae, rel=1e-12)
    # only the last three epoch files are kept
    assert sorted(p.name for p in tmp_path.glob("epoch_*.stmp")) == ["epoch_003.stmp", "epoch_004.stmp",
                                                                     "epoch_005.stmp"]
    with open(tmp_path / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "train_loss", "val_mae", "lr", "seconds"]
    assert [float(r["lr"]) for r in rows] == [0.002] * 3 + [0.001] * 3


def test_fit_is_deterministic():
    cfg, splits = tiny_problem()
    tc = TrainConfig(num_epochs=2, seed=11)
    a = fit(STMLP(cfg, seed=11), splits, tc)
    b = fit(STMLP(cfg, seed=11), splits, tc)
    for k, v in a.model.state_dict().items():
        assert np.array_equal(b.model.state_dict()[k], v), k
    assert [r.train_loss for r in a.history] == [r.train_loss for r in b.history]


def test_different_seeds_differ():
    cfg, splits = tiny_problem()
    a = fit(STMLP(cfg, seed=1), splits, TrainConfig(num_epochs=1, seed=1))
    b = fit(STMLP(cfg, seed=2), splits, TrainConfig(num_epochs=1, seed=2))
    assert not np.array_equal(a.model.params["head.W"].data, b.model.params["head.W"].data)


def test_divergence_reports_epoch_and_step():
    cfg, splits = tiny_problem()
    m = STMLP(cfg, seed=1)
    m.params["head.b"].data[:] = np.inf
    with pytest.raises(DivergenceError) as info:
        fit(m, splits, TrainConfig(num_epochs=1))
    assert (info.value.epoch, info.value.step) == (0, 0)


def test_empty_train_split_rejected():
    cfg, splits = tiny_problem()
    splits.train.starts = splits.train.starts[:0]
    with pytest.raises(ValueError):
        fit(STMLP(cfg), splits, TrainConfig(num_epochs=1))


def test_masked_targets_keep_loss_finite():
    values = sinusoid_series(n_nodes=3, n_steps=300).values.copy()
    values[::7, 1] = 0.0
    series = RawSeries(values, sinusoid_series().start_timestamp, 5)
    splits = window_and_split(series, T=4, Q=4)
    cfg = ModelConfig(n_nodes=3, T=4, Q=4, d_td=4, d_dw=4, d_su=4, d_d=8, use_sp=False, n_C=1)
    res = fit(STMLP(cfg, seed=0), splits, TrainConfig(num_epochs=1))
    assert np.isfinite(res.history[0].train_loss)


# overfit task -----------------------------------------------------------------------------

@pytest.mark.slow
def test_overfit_reaches_small_train_mae(overfit_result):
    res, splits = overfit_result
    assert res.history[-1].steps <= 2000
    assert evaluate_mae(res.model, splits.train) < 0.05


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="Adam on an L1 objective plateaus noisily; about 20% of epoch "
                                       "averages tick up on this task")
def test_overfit_loss_mostly_monotone(overfit_result):
    res, _ = overfit_result
    losses = np.array([r.train_loss for r in res.history])[5:]
    upticks = int((np.diff(losses) > 0).sum())
    assert upticks <= 0.10 * (len(losses) - 1)
