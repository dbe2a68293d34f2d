"""End-to-end acceptance checks, one test per criterion.

Each test records its outcome in ``conftest.ACCEPTANCE``; the terminal
summary prints one ``criterion N: PASS/FAIL`` line per entry.
"""
import math
import time

import numpy as np
import pytest
from scipy import stats

import conftest
from beaconloc import autodiff as ad
from beaconloc.cells import (
    ModelSpec, count_params, mepfrnn_encode_inputs, mepfrnn_step, pfrnn_encode_env, pfrnn_encode_inputs,
    pfrnn_step, propagate_heads, readout,
)
from beaconloc.environment import BUNDLED_MAPS, Environment, load_map, parse_map, serialize_map
from beaconloc.filters import filter_dataset, init_particles, pf_step, run_filter
from beaconloc.losses import evaluate_poses, loss_l, loss_l_graph, mse_c, wmse
from beaconloc.models import Checkpoint, Model, load_checkpoint, save_checkpoint
from beaconloc.resampling import ParticleBelief, soft_resample, stochastic_resample
from beaconloc.simulator import (
    MotionNoiseConfig, TrajectoryDataset, generate_trajectory, make_rng, simulate_split,
)
from beaconloc.training import TrainConfig, train, validation_mse
from oracles import chi_square_homogeneity, fd_resolution, relative_error


def record(n, ok, detail):
    conftest.ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ----------------------------------------------------------------- 1 gradients


def _fd_check(kind, env, ds, n_sample=200, h=1e-5, tol=1e-4):
    """Max relative error of analytic vs central-difference gradients.

    The relative error uses ``max(|a|, |b|, floor)`` in the denominator with
    ``floor = resolution / tol``: a component only counts as wrong when its
    absolute disagreement exceeds what the difference quotient can resolve.
    Returns the parameter count, sample size, that error and the error with
    a fixed 1e-8 floor.
    """
    spec = ModelSpec(kind=kind, hidden_dim=8, n_particles=4, ensemble_size=3, embed_dim=8,
                     env_channels=(2, 3, 3)).for_environment(env)
    ckpt = Checkpoint.fresh(spec, 1)
    model = Model(ckpt, env)
    pinned = []
    model.run(ds.speeds, ds.measurements, make_rng(9), record=pinned)

    def loss_at(flat, track=False):
        pv = type(ckpt.params)(flat, ckpt.params.index)
        P = pv.as_vars() if track else pv.views()
        est = model.run(ds.speeds, ds.measurements, make_rng(9), P=P, training=False, pinned=pinned)
        loss = loss_l_graph(est, ds.poses, spec.beta)
        if track:
            ad.backward(loss)
            return pv.gather_grads(P)
        return float(ad.value_of(loss))

    base = ckpt.params.flat.copy()
    grad = loss_at(base, track=True)
    floor = fd_resolution(loss_at(base), h) / tol
    sel = np.random.default_rng(0).choice(len(base), min(n_sample, len(base)), replace=False)
    errs, raw = [], []
    for i in sel:
        f = base.copy()
        f[i] += h
        lp = loss_at(f)
        f[i] -= 2 * h
        lm = loss_at(f)
        fd = (lp - lm) / (2 * h)
        errs.append(relative_error(grad[i], fd, floor))
        raw.append(relative_error(grad[i], fd))
    return len(base), len(sel), float(np.max(errs)), float(np.max(raw))


def test_criterion_1_gradients(world10):
    t0 = time.perf_counter()
    ds = simulate_split(world10, MotionNoiseConfig(), 2, seed=5, n_steps=3)
    parts, worst = [], 0.0
    for kind in ("gru_heavy", "pfrnn", "mepfrnn"):
        n, k, err, raw = _fd_check(kind, world10, ds)
        assert k >= 200
        parts.append(f"{kind} {err:.1e} [{raw:.1e}]")
        worst = max(worst, err)
    dt = time.perf_counter() - t0
    record(1, worst < 1e-4 and dt < 60,
           f"max rel err {worst:.2e} ({', '.join(parts)}; bracketed: fixed 1e-8 floor), {dt:.1f}s")


# ----------------------------------------------------------------- 2 resampling


def test_criterion_2_resampling_distribution():
    t0 = time.perf_counter()
    k, rows = 8, 12_500  # 10^5 ancestor draws
    w = np.random.default_rng(1).dirichlet(np.ones(k))
    h = np.random.default_rng(2).normal(size=(rows, k, 1))
    b = ParticleBelief(h, np.tile(np.log(w), (rows, 1)))
    expected = w * rows * k
    soft = soft_resample(b, 1.0, make_rng(3), jitter_sigma=0.0)
    hard = stochastic_resample(b, make_rng(4), jitter_sigma=0.0)
    c_soft = np.bincount(soft.indices.ravel(), minlength=k)
    c_hard = np.bincount(hard.indices.ravel(), minlength=k)
    crit = stats.chi2.ppf(0.99, k - 1)
    gof = [stats.chisquare(c, expected).statistic for c in (c_soft, c_hard)]
    homog, dof = chi_square_homogeneity(c_soft, c_hard)

    pre = (h[..., 0] * w).sum(-1)
    ok_mean = True
    means = []
    for out in (soft, hard):
        post = (np.exp(out.log_weights) * out.hidden[..., 0]).sum(-1)
        diff = post - pre
        se = diff.std(ddof=1) / math.sqrt(rows)
        means.append(abs(diff.mean()) / se)
        ok_mean &= abs(diff.mean()) <= 3 * se
    ok = max(gof) < crit and homog < stats.chi2.ppf(0.99, dof) and ok_mean
    record(2, ok and time.perf_counter() - t0 < 60,
           f"chi2 soft {gof[0]:.1f} hard {gof[1]:.1f} between {homog:.1f} (99% bound {crit:.1f}); "
           f"mean shift {means[0]:.2f} and {means[1]:.2f} sigma")


# ----------------------------------------------------------------- 3 log-weight invariant


def _cell_rollout(kind, env, ds):
    spec = ModelSpec(kind=kind, hidden_dim=16, n_particles=8, embed_dim=8, env_channels=(2, 3, 3)).for_environment(env)
    P = Checkpoint.fresh(spec, 2).params.views()
    rng = make_rng(6)
    e_env = pfrnn_encode_env(env.rasterize(), P) if kind == "pfrnn" else None
    belief = ParticleBelief(rng.standard_normal((len(ds), spec.n_particles, spec.hidden_dim)),
                            np.full((len(ds), spec.n_particles), -math.log(spec.n_particles)))
    _, heads = readout(belief, P, spec)
    worst = 0.0
    for t in range(ds.n_steps):
        x = propagate_heads(heads, ds.speeds[:, t], spec.coord_scale)
        y = ds.measurements[:, t]
        if kind == "pfrnn":
            belief = pfrnn_step(belief, pfrnn_encode_inputs(x, y, e_env, P), P, rng)
        else:
            belief = mepfrnn_step(belief, mepfrnn_encode_inputs(x, y, P)[1], y, P, rng)
        worst = max(worst, float(np.max(np.abs(ad.log_sum_exp(belief.log_weights)))))
        _, heads = readout(belief, P, spec)
        belief = soft_resample(belief, spec.alpha_mix, rng)
        heads = ad.gather_rows(heads, belief.indices)
        worst = max(worst, float(np.max(np.abs(ad.log_sum_exp(belief.log_weights)))))
    return worst


def test_criterion_3_log_weight_invariant(world10):
    cfg = MotionNoiseConfig()
    ds = simulate_split(world10, cfg, 3, seed=8, n_steps=100)
    worst = {kind: _cell_rollout(kind, world10, ds) for kind in ("pfrnn", "mepfrnn")}
    rng = make_rng(7)
    p = init_particles(world10, 500, rng, cfg)
    pf_worst = 0.0
    for t in range(ds.n_steps):
        p = pf_step(p, ds.speeds[0, t], ds.measurements[0, t], world10, cfg, rng)
        pf_worst = max(pf_worst, abs(float(ad.log_sum_exp(p.log_weights))))
    worst["pf"] = pf_worst
    m = max(worst.values())
    record(3, m < 1e-6, "max |LSE| " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# ----------------------------------------------------------------- 4 filter particle-count trend


@pytest.mark.slow
def test_criterion_4_particle_count_trend(world10):
    t0 = time.perf_counter()
    cfg = MotionNoiseConfig()
    ds = simulate_split(world10, cfg, 100, seed=7, split=2)
    res = {}
    for kind, n in (("pf", 200), ("pf", 10000), ("mkf", 50), ("mkf", 10000)):
        res[kind, n] = evaluate_poses(filter_dataset(kind, world10, ds, n, cfg, seed=1), ds.poses).mse_c
    r_pf = res["pf", 10000] / res["pf", 200]
    r_mkf = res["mkf", 10000] / res["mkf", 50]
    dt = time.perf_counter() - t0
    record(4, r_pf < 0.2 and r_mkf < 0.2 and dt < 1800,
           f"PF {res['pf', 200]:.2f} -> {res['pf', 10000]:.2f} (ratio {r_pf:.3f}); "
           f"MKF {res['mkf', 50]:.2f} -> {res['mkf', 10000]:.3f} (ratio {r_mkf:.4f}); {dt:.0f}s")


# ----------------------------------------------------------------- 5 noiseless PF


def test_criterion_5_noiseless_pf():
    env = Environment(10, 10, (), [(1.0, 1.0), (9.0, 1.0), (1.0, 9.0), (9.0, 9.0), (5.0, 5.5)])
    quiet = MotionNoiseConfig.noiseless()
    # slow straight run that never reaches a wall, so no heading is ever redrawn
    traj = generate_trajectory(env, make_rng(5), quiet, 100, initial_pose=(2.0, 3.0, 0.3), speed=0.05)
    est = run_filter("pf", env, traj.speeds, traj.measurements, 200, quiet, make_rng(1),
                     initial_pose=traj.initial_pose.as_array(), jitter_sigma=0.0)
    err = mse_c(est, traj.poses)
    record(5, err < 1e-20, f"MSE_c {err:.1e} over {len(traj)} steps")


# ----------------------------------------------------------------- 6 parameter counts


def test_criterion_6_parameter_counts():
    envs = {name: load_map(name) for name in BUNDLED_MAPS}
    me = {name: count_params(ModelSpec(kind="mepfrnn").for_environment(e)) for name, e in envs.items()}
    pf = [count_params(ModelSpec(kind="pfrnn").for_environment(envs[n])) for n in ("world10", "world18", "world27")]
    ok = len(set(me.values())) == 1 and pf[0] < pf[1] < pf[2]
    record(6, ok, f"mePFRNN {sorted(set(me.values()))} on {len(me)} maps; PFRNN 10/18/27: {pf}")


# ----------------------------------------------------------------- 7 loss contrast


def test_criterion_7_loss_contrast():
    pred = np.array([[2.0, 3.0, 2 * math.pi - 0.01]])
    true = np.array([[2.0, 3.0, 0.01]])
    w, l = wmse(pred, true, 0.1), loss_l(pred, true, 0.1)
    shifted = pred.copy()
    shifted[:, 2] += 2 * math.pi
    drift = abs(loss_l(shifted, true, 0.1) - l)
    ok = abs(w - 3.9227) <= 1e-3 and l < 1e-4 and drift < 1e-15
    record(7, ok, f"wMSE {w:.4f}, L {l:.2e}, L shift drift {drift:.1e}")


# ----------------------------------------------------------------- 8 training smoke


@pytest.mark.slow
def test_criterion_8_training_smoke(world10):
    t0 = time.perf_counter()
    cfg = MotionNoiseConfig()
    tr = simulate_split(world10, cfg, 200, seed=7, split=0)
    va = simulate_split(world10, cfg, 50, seed=7, split=1)
    spec = ModelSpec(kind="mepfrnn", hidden_dim=32, n_particles=8)
    tcfg = TrainConfig(max_epochs=30)
    best, hist = train(Checkpoint.fresh(spec, 0), tr, va, tcfg, world10)
    initial = hist[0]["val_mse_c"]
    final = validation_mse(best, va, world10, tcfg.eval_seed)
    _, again = train(Checkpoint.fresh(spec, 0), tr, va, tcfg, world10)
    strip = [repr({k: v for k, v in r.items() if k != "wall_time"}) for r in hist]
    same = strip == [repr({k: v for k, v in r.items() if k != "wall_time"}) for r in again]
    dt = time.perf_counter() - t0
    ratio = final / initial
    record(8, ratio < 0.5 and same and dt < 1800,
           f"val MSE_c {initial:.2f} -> {final:.2f} (ratio {ratio:.3f}); history reproducible: {same}; {dt:.0f}s")


# ----------------------------------------------------------------- 9 round trips


def test_criterion_9_round_trips(tmp_path, world10):
    maps_ok = True
    for name in BUNDLED_MAPS:
        env = load_map(name)
        again = parse_map(serialize_map(env), name=name)
        maps_ok &= env == again and serialize_map(again) == serialize_map(env)
    ds = simulate_split(world10, MotionNoiseConfig(), 5, seed=3, n_steps=20)
    ds_ok = TrajectoryDataset.load(ds.save(tmp_path / "d.npz")).equals(ds)
    ck_ok = True
    for kind in ("gru_heavy", "gru_ensemble", "pfrnn", "mepfrnn"):
        spec = ModelSpec(kind=kind, hidden_dim=4, n_particles=3, ensemble_size=2, embed_dim=3,
                         env_channels=(2, 2, 2)).for_environment(world10)
        ck = Checkpoint.fresh(spec, 11)
        if ck.buffers:
            ck.buffers["bn"]["mean"] += np.random.default_rng(0).normal(size=spec.hidden_dim)
        ck_ok &= load_checkpoint(save_checkpoint(ck, tmp_path / f"{kind}.ckpt")).equals(ck)
    record(9, maps_ok and ds_ok and ck_ok, f"maps {maps_ok}, dataset {ds_ok}, checkpoints {ck_ok}")
