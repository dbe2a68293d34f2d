"""Non-parametric baselines: bootstrap particle filter (PF) and a multiparticle
Kalman filter (MKF) built as a weighted, resampled bank of position EKFs.

Both share the simulator's motion model. The measurement likelihood is a
Gaussian per beacon distance whose variance matches the uniform measurement
noise (sigma = halfwidth / sqrt(3)).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericError
from .resampling import ParticleBelief, sample_indices, stochastic_resample, uniform_log_weights
from .simulator import TWO_PI, MotionNoiseConfig, wrap_angle

SIGMA_FLOOR = 1e-6
EIG_FLOOR = 1e-9
# a likelihood below this log value is exactly zero as a float64
LOG_UNDERFLOW = float(np.log(np.finfo(np.float64).tiny))


def likelihood_sigma(cfg):
    return max(cfg.measurement_noise_halfwidth / math.sqrt(3.0), SIGMA_FLOOR)


@dataclass
class PfParticles:
    """Poses (n, 3) as ``[x, y, alpha]`` and normalized log-weights (n,)."""

    poses: np.ndarray
    log_weights: np.ndarray

    def __len__(self):
        return len(self.poses)


def init_particles(env, n, rng, cfg=MotionNoiseConfig(), initial_pose=None):
    """Uniform over free space with uniform heading, or all at ``initial_pose``."""
    if initial_pose is not None:
        poses = np.tile(np.asarray(initial_pose, dtype=np.float64), (n, 1))
    else:
        c = env.sample_free_positions(n, rng, cfg.object_radius)
        poses = np.column_stack([c, rng.uniform(0.0, TWO_PI, n)])
    return PfParticles(poses, uniform_log_weights((n,)))


def propagate(env, poses, speed, rng, cfg):
    """Apply the motion model (heading jitter, speed noise, collision redraw) to every row."""
    n = len(poses)
    alpha = wrap_angle(poses[:, 2] + TWO_PI * rng.uniform(-cfg.heading_noise_fraction,
                                                          cfg.heading_noise_fraction, n))
    dist = speed + rng.uniform(-cfg.speed_noise_halfwidth, cfg.speed_noise_halfwidth, n)
    xy = poses[:, :2] + dist[:, None] * np.column_stack([np.cos(alpha), np.sin(alpha)])
    bad = np.flatnonzero(env.colliding_mask(xy, cfg.object_radius))
    for _ in range(cfg.max_retries):
        if len(bad) == 0:
            break
        alpha[bad] = rng.uniform(0.0, TWO_PI, len(bad))
        xy[bad] = poses[bad, :2] + dist[bad, None] * np.column_stack([np.cos(alpha[bad]), np.sin(alpha[bad])])
        bad = bad[env.colliding_mask(xy[bad], cfg.object_radius)]
    xy[bad] = poses[bad, :2]  # wedged particles stay put
    return np.column_stack([xy, alpha])


def measurement_log_likelihood(env, positions, measurement, cfg):
    pred = env.nearest_distances_batch(positions, cfg.k_measure)
    r = (np.asarray(measurement)[None, :] - pred) / likelihood_sigma(cfg)
    return -0.5 * np.sum(r * r, axis=1)


def _normalize(lw):
    lw = np.asarray(lw, dtype=np.float64)
    if not np.any(np.isfinite(lw)) or np.any(np.isnan(lw)):
        # all likelihoods underflowed: restart from uniform weights
        return uniform_log_weights(lw.shape)
    return lw - ad.log_sum_exp(lw)


def pf_update(particles, control_speed, measurement, env, cfg, rng):
    """Propagate and reweight without resampling."""
    poses = propagate(env, particles.poses, control_speed, rng, cfg)
    ll = measurement_log_likelihood(env, poses[:, :2], measurement, cfg)
    if not np.max(ll) >= LOG_UNDERFLOW:
        # every likelihood is zero in linear terms: start over from uniform weights
        return PfParticles(poses, uniform_log_weights(ll.shape))
    return PfParticles(poses, _normalize(particles.log_weights + ll))


def resample_particles(particles, env, rng, jitter_sigma=0.02):
    out = stochastic_resample(ParticleBelief(particles.poses, particles.log_weights), rng, jitter_sigma)
    poses = out.hidden
    poses[:, 0] = np.clip(poses[:, 0], 0.0, env.width)
    poses[:, 1] = np.clip(poses[:, 1], 0.0, env.height)
    poses[:, 2] = wrap_angle(poses[:, 2])
    return PfParticles(poses, out.log_weights)


def pf_step(particles, control_speed, measurement, env, cfg, rng, jitter_sigma=0.02):
    """Propagate, reweight by the measurement likelihood, normalize, resample."""
    updated = pf_update(particles, control_speed, measurement, env, cfg, rng)
    return resample_particles(updated, env, rng, jitter_sigma)


def weighted_pose(positions, headings, log_weights):
    w = np.exp(np.asarray(log_weights) - ad.log_sum_exp(np.asarray(log_weights)))
    c = w @ positions
    alpha = math.atan2(float(w @ np.sin(headings)), float(w @ np.cos(headings)))
    return np.array([c[0], c[1], alpha % TWO_PI])


def estimate(particles):
    """Weighted mean position; heading from the weighted mean of (sin, cos)."""
    return weighted_pose(particles.poses[:, :2], particles.poses[:, 2], particles.log_weights)


# --------------------------------------------------------------------------- multiparticle Kalman filter


@dataclass
class KalmanBank:
    """Bank of position EKFs, each with its own heading hypothesis.

    means (n, 2), covs (n, 2, 2), headings (n,), log_weights (n,).
    """

    means: np.ndarray
    covs: np.ndarray
    headings: np.ndarray
    log_weights: np.ndarray

    def __len__(self):
        return len(self.means)


def init_bank(env, n, rng, cfg=MotionNoiseConfig(), initial_pose=None, init_std=0.5):
    if initial_pose is not None:
        p = np.asarray(initial_pose, dtype=np.float64)
        means = np.tile(p[:2], (n, 1))
        headings = np.full(n, p[2])
        covs = np.tile(np.eye(2) * EIG_FLOOR, (n, 1, 1))
    else:
        means = env.sample_free_positions(n, rng, cfg.object_radius)
        headings = rng.uniform(0.0, TWO_PI, n)
        covs = np.tile(np.eye(2) * init_std ** 2, (n, 1, 1))
    return KalmanBank(means, covs, headings, uniform_log_weights((n,)))


def _repair_covariance(covs):
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    # closed-form smallest eigenvalue of a symmetric 2x2
    half_tr = 0.5 * (covs[:, 0, 0] + covs[:, 1, 1])
    gap = np.hypot(0.5 * (covs[:, 0, 0] - covs[:, 1, 1]), covs[:, 0, 1])
    bad = np.flatnonzero(half_tr - gap < EIG_FLOOR)
    if len(bad):
        vals, vecs = np.linalg.eigh(covs[bad])
        vals = np.maximum(vals, EIG_FLOOR)
        covs[bad] = np.einsum("nij,nj,nkj->nik", vecs, vals, vecs)
    return covs


def mkf_update(bank, control_speed, measurement, env, cfg, rng):
    """EKF predict/update for every member and reweight by the innovation likelihood."""
    poses = np.column_stack([bank.means, bank.headings])
    moved = propagate(env, poses, control_speed, rng, cfg)
    means, headings = moved[:, :2], moved[:, 2]

    # process noise: speed jitter along the heading, heading jitter across it
    d = np.column_stack([np.cos(headings), np.sin(headings)])
    perp = np.column_stack([-d[:, 1], d[:, 0]])
    var_along = cfg.speed_noise_halfwidth ** 2 / 3.0
    var_across = (control_speed * TWO_PI * cfg.heading_noise_fraction) ** 2 / 3.0
    q = var_along * d[:, :, None] * d[:, None, :] + var_across * perp[:, :, None] * perp[:, None, :]
    covs = bank.covs + q

    k = cfg.k_measure
    idx = env.nearest_beacon_indices(means, k)
    diff = means[:, None, :] - env.beacons[idx]
    dist = np.maximum(np.hypot(diff[..., 0], diff[..., 1]), 1e-9)
    H = diff / dist[..., None]
    innov = np.asarray(measurement)[None, :] - dist
    sig2 = likelihood_sigma(cfg) ** 2

    # With R = sig2 * I the k x k innovation covariance S = H C H^T + R only
    # enters through 2 x 2 quantities: J = I + C H^T H / sig2 gives
    # S^-1 = (I - H J^-1 C H^T / sig2) / sig2 and det S = sig2^k det J.
    Ht = np.swapaxes(H, 1, 2)
    J = np.eye(2)[None] + covs @ (Ht @ H) / sig2
    det_j = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    if not np.all(det_j > 0):
        raise NumericError("innovation covariance is not positive definite")
    J_inv = np.stack([np.stack([J[:, 1, 1], -J[:, 0, 1]], -1),
                      np.stack([-J[:, 1, 0], J[:, 0, 0]], -1)], 1) / det_j[:, None, None]
    prior = covs
    gain = J_inv @ prior @ Ht / sig2
    Ht_nu = np.einsum("nij,nj->ni", Ht, innov)
    means = means + np.einsum("nij,nj->ni", gain, innov)
    ikh = np.eye(2)[None] - gain @ H
    covs = ikh @ prior @ np.swapaxes(ikh, 1, 2) + sig2 * gain @ np.swapaxes(gain, 1, 2)
    covs = _repair_covariance(covs)

    corr = np.einsum("ni,nij,nj->n", Ht_nu, J_inv @ prior, Ht_nu) / sig2
    maha = (np.sum(innov * innov, axis=1) - corr) / sig2
    logdet = k * math.log(sig2) + np.log(det_j)
    lw = bank.log_weights - 0.5 * (maha + logdet)
    means[:, 0] = np.clip(means[:, 0], 0.0, env.width)
    means[:, 1] = np.clip(means[:, 1], 0.0, env.height)
    return KalmanBank(means, covs, headings, _normalize(lw))


def resample_bank(bank, env, rng, jitter_sigma=0.02):
    n = len(bank)
    w = np.exp(bank.log_weights - ad.log_sum_exp(bank.log_weights))
    idx = sample_indices(w[None, :], rng)[0]
    means = bank.means[idx].copy()
    headings = bank.headings[idx].copy()
    if jitter_sigma > 0:
        means += rng.normal(0.0, jitter_sigma, means.shape)
        headings = wrap_angle(headings + rng.normal(0.0, jitter_sigma, n))
    means[:, 0] = np.clip(means[:, 0], 0.0, env.width)
    means[:, 1] = np.clip(means[:, 1], 0.0, env.height)
    return KalmanBank(means, bank.covs[idx].copy(), headings, uniform_log_weights((n,)))


def mkf_step(bank, control_speed, measurement, env, cfg, rng, jitter_sigma=0.02):
    updated = mkf_update(bank, control_speed, measurement, env, cfg, rng)
    return resample_bank(updated, env, rng, jitter_sigma)


def estimate_bank(bank):
    return weighted_pose(bank.means, bank.headings, bank.log_weights)


# --------------------------------------------------------------------------- runners


class FilterStepper:
    """Stateful PF or MKF over one trajectory; ``step`` returns the pose estimate."""

    def __init__(self, kind, env, n, cfg=MotionNoiseConfig(), rng=None, jitter_sigma=0.02):
        if kind not in ("pf", "mkf"):
            raise ValueError(f"unknown filter kind {kind!r}")
        self.kind, self.env, self.n, self.cfg = kind, env, n, cfg
        self.rng = rng if rng is not None else np.random.Generator(np.random.Philox(0))
        self.jitter_sigma = jitter_sigma
        self.reset()

    def reset(self, initial_pose=None):
        init = init_particles if self.kind == "pf" else init_bank
        self.state = init(self.env, self.n, self.rng, self.cfg, initial_pose)

    def step(self, speed, measurement):
        if self.kind == "pf":
            upd = pf_update(self.state, speed, measurement, self.env, self.cfg, self.rng)
            est = estimate(upd)
            self.state = resample_particles(upd, self.env, self.rng, self.jitter_sigma)
        else:
            upd = mkf_update(self.state, speed, measurement, self.env, self.cfg, self.rng)
            est = estimate_bank(upd)
            self.state = resample_bank(upd, self.env, self.rng, self.jitter_sigma)
        return est


def run_filter(kind, env, speeds, measurements, n, cfg, rng, initial_pose=None, jitter_sigma=0.02):
    """Filter one trajectory; returns (N, 3) pose estimates."""
    stepper = FilterStepper(kind, env, n, cfg, rng, jitter_sigma)
    stepper.reset(initial_pose)
    return np.array([stepper.step(u, y) for u, y in zip(speeds, measurements)])


def filter_dataset(kind, env, ds, n, cfg, seed=0, exact_init=False, jitter_sigma=0.02):
    """Run a filter over every trajectory of ``ds`` -> (T, N, 3) estimates.

    Trajectory ``i`` uses its own generator derived from ``(seed, i)``.
    """
    from .simulator import make_rng, substream_seed
    out = np.empty_like(ds.poses)
    for i in range(len(ds)):
        rng = make_rng(substream_seed(seed, i))
        init = ds.initial[i] if exact_init else None
        out[i] = run_filter(kind, env, ds.speeds[i], ds.measurements[i], n, cfg, rng, init, jitter_sigma)
    return out
