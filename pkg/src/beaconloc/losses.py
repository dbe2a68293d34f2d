"""Trajectory losses and evaluation metrics.

Metric functions take ``pred`` and ``true`` pose arrays of shape (N, 3)
holding ``[c_x, c_y, alpha]``. The ``*_graph`` variants build autodiff
graphs from model estimates of shape (B, N, 4) ``[c_x, c_y, sin, cos]``
against ground truth (B, N, 3) and return the batch-mean loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ShapeError


def _check(pred, true):
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape[:-1] != true.shape[:-1] or len(pred) == 0:
        raise ShapeError(f"prediction shape {pred.shape} does not match ground truth {true.shape}")
    return pred, true


def squared_errors(pred_coords, true_coords):
    pred, true = _check(pred_coords, true_coords)
    d = pred[..., :2] - true[..., :2]
    return np.sum(d * d, axis=-1)


def mse_c(pred_coords, true_coords):
    return float(np.mean(squared_errors(pred_coords, true_coords)))


def wmse(pred, true, beta=0.1):
    pred, true = _check(pred, true)
    # raw difference, deliberately not wrapped
    return mse_c(pred, true) + beta * float(np.mean((pred[:, 2] - true[:, 2]) ** 2))


def loss_l(pred, true, beta=0.1):
    pred, true = _check(pred, true)
    ds = np.sin(pred[:, 2]) - np.sin(true[:, 2])
    dc = np.cos(pred[:, 2]) - np.cos(true[:, 2])
    return mse_c(pred, true) + beta * float(np.mean(ds * ds + dc * dc))


def fse(pred_last, true_last):
    p = np.asarray(pred_last, dtype=np.float64)
    t = np.asarray(true_last, dtype=np.float64)
    return float(math.hypot(p[0] - t[0], p[1] - t[1]))


# --------------------------------------------------------------------------- training graphs


def _coord_term(est, true):
    d = ad.sub(ad.getitem(est, (Ellipsis, slice(0, 2))), true[..., :2])
    return ad.sum(ad.square(d), axis=-1)


def loss_l_graph(est, true, beta=0.1):
    true = np.asarray(true, dtype=np.float64)
    coords = _coord_term(est, true)
    ds = ad.sub(ad.getitem(est, (Ellipsis, 2)), np.sin(true[..., 2]))
    dc = ad.sub(ad.getitem(est, (Ellipsis, 3)), np.cos(true[..., 2]))
    per_step = ad.add(coords, ad.mul(ad.add(ad.square(ds), ad.square(dc)), beta))
    return ad.mean(per_step)


def wmse_graph(est, true, beta=0.1):
    true = np.asarray(true, dtype=np.float64)
    coords = _coord_term(est, true)
    alpha = ad.mod(ad.atan2(ad.getitem(est, (Ellipsis, 2)), ad.getitem(est, (Ellipsis, 3))), 2 * math.pi)
    da = ad.sub(alpha, true[..., 2])
    return ad.mean(ad.add(coords, ad.mul(ad.square(da), beta)))


LOSS_GRAPHS = {"l": loss_l_graph, "wmse": wmse_graph}


# --------------------------------------------------------------------------- reports


@dataclass
class EvalReport:
    """Per-trajectory metrics; summary properties give mean and std over trajectories."""

    mse_c_per_traj: np.ndarray
    fse_per_traj: np.ndarray
    wmse_per_traj: np.ndarray
    loss_l_per_traj: np.ndarray
    ms_per_step: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def mse_c(self):
        return float(np.mean(self.mse_c_per_traj))

    @property
    def mse_c_std(self):
        return float(np.std(self.mse_c_per_traj))

    @property
    def fse(self):
        return float(np.mean(self.fse_per_traj))

    @property
    def fse_std(self):
        return float(np.std(self.fse_per_traj))

    @property
    def wmse(self):
        return float(np.mean(self.wmse_per_traj))

    @property
    def loss_l(self):
        return float(np.mean(self.loss_l_per_traj))

    def summary(self):
        return {
            "mse_c": self.mse_c, "mse_c_std": self.mse_c_std,
            "fse": self.fse, "fse_std": self.fse_std,
            "wmse": self.wmse, "loss_l": self.loss_l,
            "ms_per_step": self.ms_per_step, "n_traj": len(self.mse_c_per_traj),
        }


def evaluate_poses(pred, true, beta=0.1, ms_per_step=float("nan")):
    """Build an :class:`EvalReport` from (T, N, 3) predicted and true poses."""
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    return EvalReport(
        np.array([mse_c(p, t) for p, t in zip(pred, true)]),
        np.array([fse(p[-1], t[-1]) for p, t in zip(pred, true)]),
        np.array([wmse(p, t, beta) for p, t in zip(pred, true)]),
        np.array([loss_l(p, t, beta) for p, t in zip(pred, true)]),
        ms_per_step,
    )
