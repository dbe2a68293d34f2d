"""RMSProp training with validation-driven checkpointing, and model evaluation."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataError, NumericError, ValidationError
from .losses import LOSS_GRAPHS, evaluate_poses
from .models import Checkpoint, Model, estimates_to_poses
from .simulator import make_rng, substream_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 150
    max_epochs: int = 5000
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 5
    patience: int = 200
    clip_norm: float = 10.0
    micro_batch: int = 50
    bptt_window: int = 0
    eval_seed: int = 12345

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.micro_batch < 1:
            raise ValidationError("batch_size and micro_batch must be >= 1")
        if self.eval_every < 1:
            raise ValidationError("eval_every must be >= 1")


@dataclass
class RMSPropState:
    square_avg: np.ndarray
    steps: int = 0


def rmsprop_step(params, grads, state=None, lr=5e-4, decay=0.99, eps=1e-8):
    """One RMSProp update; returns ``(new_params, new_state)``.

    ``s <- decay * s + (1 - decay) * g**2``;
    ``p <- p - lr * g / (sqrt(s) + eps)``.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValidationError(f"parameter shape {params.shape} does not match gradient shape {grads.shape}")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NumericError(f"non-finite gradient in {len(bad)} entries (first at index {bad[0]})")
    if state is None:
        state = RMSPropState(np.zeros_like(params))
    s = decay * state.square_avg + (1.0 - decay) * grads * grads
    new = params - lr * grads / (np.sqrt(s) + eps)
    return new, RMSPropState(s, state.steps + 1)


def clip_by_global_norm(g, max_norm):
    norm = float(np.linalg.norm(g))
    if max_norm and norm > max_norm:
        return g * (max_norm / norm), norm
    return g, norm


def batch_loss_and_grad(model, ds, idx, P_leaves, rng, loss_kind, beta, bptt_window=0):
    """Loss (batch mean) and flat gradient for the trajectories ``idx``."""
    speeds, meas, poses = ds.speeds[idx], ds.measurements[idx], ds.poses[idx]
    est = model.run(speeds, meas, rng, P=P_leaves, training=True)
    if bptt_window and bptt_window < ds.n_steps:
        # truncated BPTT: the loss only sees the last window of steps
        est = ad.getitem(est, (slice(None), slice(-bptt_window, None)))
        poses = poses[:, -bptt_window:]
    loss = LOSS_GRAPHS[loss_kind](est, poses, beta)
    ad.backward(loss)
    return float(loss.value), model.ckpt.params.gather_grads(P_leaves)


def predict(ckpt, ds, env=None, seed=12345, batch=250):
    """Deterministic untracked inference over a dataset -> (T, N, 3) poses."""
    model = Model(ckpt, env)
    rng = make_rng(seed)
    out = []
    for start in range(0, len(ds), batch):
        sl = slice(start, start + batch)
        out.append(estimates_to_poses(model.run(ds.speeds[sl], ds.measurements[sl], rng)))
    return np.concatenate(out, axis=0)


def validation_mse(ckpt, ds, env=None, seed=12345):
    pred = predict(ckpt, ds, env, seed)
    d = pred[..., :2] - ds.poses[..., :2]
    return float(np.mean(np.sum(d * d, axis=-1)))


def evaluate(ckpt, ds, env=None, seed=12345, beta=None):
    """Metrics over ``ds``; ``ms_per_step`` is wall time per trajectory-step."""
    beta = ckpt.spec.beta if beta is None else beta
    t0 = time.perf_counter()
    pred = predict(ckpt, ds, env, seed)
    elapsed = time.perf_counter() - t0
    return evaluate_poses(pred, ds.poses, beta, 1000.0 * elapsed / (len(ds) * ds.n_steps))


def train(ckpt, train_ds, val_ds, cfg=TrainConfig(), env=None, history_path=None, progress=None):
    """Fit ``ckpt`` in place of a copy; returns ``(best_checkpoint, history)``.

    ``history`` rows are dicts with ``epoch``, ``train_loss``, ``val_mse_c``,
    ``best_val_mse_c`` and ``wall_time``. Epoch 0 is the untrained model.
    """
    if train_ds.k_measure != ckpt.spec.k_measure or val_ds.k_measure != ckpt.spec.k_measure:
        raise DataError(f"dataset measures {train_ds.k_measure} beacons, model expects {ckpt.spec.k_measure}")
    if env is not None and train_ds.env_id and env.name and train_ds.env_id != env.name:
        raise DataError(f"dataset environment {train_ds.env_id!r} does not match {env.name!r}")
    work = ckpt.copy()
    model = Model(work, env)
    spec = work.spec
    loss_kind = spec.training_loss
    shuffle_rng = make_rng(substream_seed(cfg.seed, 0))
    noise_rng = make_rng(substream_seed(cfg.seed, 1))
    opt = None
    t_start = time.perf_counter()

    best_val = validation_mse(work, val_ds, env, cfg.eval_seed)
    best = work.copy()
    history = [{"epoch": 0, "train_loss": float("nan"), "val_mse_c": best_val,
                "best_val_mse_c": best_val, "wall_time": 0.0}]
    since_best = 0
    n = len(train_ds)
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grad = np.zeros_like(work.params.flat)
            loss_sum = 0.0
            for ms in range(0, len(batch), cfg.micro_batch):
                idx = batch[ms:ms + cfg.micro_batch]
                leaves = work.params.as_vars()
                loss, g = batch_loss_and_grad(model, train_ds, idx, leaves, noise_rng, loss_kind,
                                              spec.beta, cfg.bptt_window)
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                w = len(idx) / len(batch)
                loss_sum += w * loss
                grad += w * g
            grad, _ = clip_by_global_norm(grad, cfg.clip_norm)
            new, opt = rmsprop_step(work.params.flat, grad, opt, cfg.learning_rate,
                                    cfg.rmsprop_decay, cfg.rmsprop_eps)
            work.params.flat[...] = new
            losses.append(loss_sum)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mse_c": float("nan"),
               "best_val_mse_c": best_val, "wall_time": time.perf_counter() - t_start}
        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            val = validation_mse(work, val_ds, env, cfg.eval_seed)
            row["val_mse_c"] = val
            if val < best_val:
                best_val, best, since_best = val, work.copy(), 0
            else:
                since_best += cfg.eval_every
            row["best_val_mse_c"] = best_val
        history.append(row)
        if progress is not None:
            progress(row)
        log.debug("epoch %d loss %.4f val %.4f", epoch, row["train_loss"], row["val_mse_c"])
        if since_best >= cfg.patience:
            log.info("early stop at epoch %d (no improvement for %d epochs)", epoch, since_best)
            break
    best.provenance = {"train_config": asdict(cfg), "best_val_mse_c": best_val}
    if history_path is not None:
        write_history(history, history_path)
    return best, history


HISTORY_FIELDS = ("epoch", "train_loss", "val_mse_c", "best_val_mse_c", "wall_time")


def write_history(history, path, header_comment=None):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_FIELDS})
    return path
