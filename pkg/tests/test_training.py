import math

import numpy as np
import pytest

from beaconloc.cells import ModelSpec
from beaconloc.errors import DataError, NumericError, ValidationError
from beaconloc.models import Checkpoint, load_checkpoint, save_checkpoint
from beaconloc.simulator import MotionNoiseConfig, simulate_split
from beaconloc.training import (
    TrainConfig, clip_by_global_norm, evaluate, predict, rmsprop_step, train, write_history,
)
from oracles import scalar_rmsprop

TINY = ModelSpec(kind="mepfrnn", hidden_dim=6, n_particles=3, embed_dim=4)


def test_rmsprop_hand_example():
    new, state = rmsprop_step(np.zeros(3), np.ones(3), lr=0.1)
    assert np.allclose(new, -0.1 / (math.sqrt(0.01) + 1e-8))
    assert new[0] == pytest.approx(-1.0, abs=1e-6)
    assert state.steps == 1


def test_rmsprop_zero_gradient_is_identity():
    p = np.array([1.5, -2.0])
    new, _ = rmsprop_step(p, np.zeros(2))
    assert np.array_equal(new, p)


def test_rmsprop_matches_scalar_oracle():
    grads = [0.3, -1.2, 0.7]
    p, state = np.array([0.5]), None
    for g in grads:
        p, state = rmsprop_step(p, np.array([g]), state, lr=0.01, decay=0.9, eps=1e-6)
    assert p[0] == pytest.approx(scalar_rmsprop(0.5, grads, 0.01, 0.9, 1e-6), rel=1e-14)


def test_rmsprop_rejects_bad_input():
    with pytest.raises(NumericError):
        rmsprop_step(np.zeros(2), np.array([1.0, np.nan]))
    with pytest.raises(ValidationError):
        rmsprop_step(np.zeros(2), np.zeros(3))


def test_clip_by_global_norm():
    g, n = clip_by_global_norm(np.array([3.0, 4.0]), 1.0)
    assert n == 5.0 and np.allclose(g, [0.6, 0.8])
    g, _ = clip_by_global_norm(np.array([0.3, 0.4]), 1.0)
    assert np.allclose(g, [0.3, 0.4])


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)


@pytest.fixture(scope="module")
def tiny_data(world10):
    cfg = MotionNoiseConfig()
    return simulate_split(world10, cfg, 6, 3, 0, n_steps=8), simulate_split(world10, cfg, 3, 3, 1, n_steps=8)


def _strip(history):
    # repr so that nan rows compare equal
    return [repr({k: v for k, v in row.items() if k != "wall_time"}) for row in history]


def test_zero_lr_leaves_params_bit_identical(tiny_data, world10):
    tr, va = tiny_data
    ck = Checkpoint.fresh(TINY, 0)
    best, hist = train(ck, tr, va, TrainConfig(learning_rate=0.0, max_epochs=3, batch_size=4, eval_every=1), world10)
    assert np.array_equal(best.params.flat, ck.params.flat)
    assert len(hist) == 4


def test_best_is_min_over_history_and_reproducible(tiny_data, world10):
    tr, va = tiny_data
    cfg = TrainConfig(learning_rate=5e-3, max_epochs=6, batch_size=3, eval_every=2, seed=4)
    best, hist = train(Checkpoint.fresh(TINY, 1), tr, va, cfg, world10)
    vals = [r["val_mse_c"] for r in hist if not math.isnan(r["val_mse_c"])]
    assert best.provenance["best_val_mse_c"] == min(vals)
    bests = [r["best_val_mse_c"] for r in hist]
    assert all(b1 <= b0 for b0, b1 in zip(bests, bests[1:]))
    from beaconloc.training import validation_mse
    assert validation_mse(best, va, world10, cfg.eval_seed) == min(vals)
    _, again = train(Checkpoint.fresh(TINY, 1), tr, va, cfg, world10)
    assert _strip(again) == _strip(hist)


def test_history_file(tmp_path, tiny_data, world10):
    tr, va = tiny_data
    _, hist = train(Checkpoint.fresh(TINY, 0), tr, va, TrainConfig(max_epochs=1, eval_every=1), world10)
    path = write_history(hist, tmp_path / "h.csv", "seed=0")
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed=0"
    assert lines[1] == "epoch,train_loss,val_mse_c,best_val_mse_c,wall_time"
    assert len(lines) == 2 + len(hist)


def test_measurement_mismatch_rejected(tiny_data, world10):
    tr, va = tiny_data
    spec = ModelSpec(kind="mepfrnn", hidden_dim=4, n_particles=2, embed_dim=3, k_measure=3)
    with pytest.raises(DataError):
        train(Checkpoint.fresh(spec, 0), tr, va, TrainConfig(max_epochs=1), world10)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_parameters_abort(tiny_data, world10):
    tr, va = tiny_data
    ck = Checkpoint.fresh(TINY, 0)
    ck.params.view("head.w")[...] = np.inf
    with pytest.raises(NumericError):
        train(ck, tr, va, TrainConfig(max_epochs=1), world10)


def test_evaluate_deterministic(tiny_data, world10):
    tr, va = tiny_data
    ck = Checkpoint.fresh(TINY, 0)
    a, b = evaluate(ck, va, world10, seed=5), evaluate(ck, va, world10, seed=5)
    assert np.array_equal(a.mse_c_per_traj, b.mse_c_per_traj)
    assert evaluate(ck, va.subset([0]), world10).mse_c_std == 0.0
    assert predict(ck, va, world10, 5).shape == va.poses.shape


@pytest.mark.parametrize("kind", ["gru_heavy", "gru_ensemble", "pfrnn"])
def test_other_kinds_train_one_epoch(kind, tiny_data, world10, tmp_path):
    tr, va = tiny_data
    spec = ModelSpec(kind=kind, hidden_dim=4, n_particles=2, ensemble_size=2, embed_dim=3,
                     env_channels=(2, 2, 2)).for_environment(world10)
    best, hist = train(Checkpoint.fresh(spec, 0), tr, va, TrainConfig(max_epochs=1, eval_every=1), world10)
    assert np.isfinite(hist[-1]["train_loss"])
    path = save_checkpoint(best, tmp_path / "m.ckpt")
    assert load_checkpoint(path).equals(best)
