"""Multinomial and soft resampling of particle beliefs in log-weight space.

Both resamplers accept plain arrays or autodiff nodes for the hidden states
and log-weights. Ancestor indices are treated as constants; gradients flow
through the gathered rows and, for soft resampling, the importance ratio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericError, ValidationError


@dataclass
class ParticleBelief:
    """K particles (rows of ``hidden``) with normalized log-weights.

    ``hidden`` has shape (..., K, H) and ``log_weights`` (..., K); leading
    axes index independent beliefs. ``indices`` holds the ancestor indices
    drawn by the last resampling, if any.
    """

    hidden: object
    log_weights: object
    indices: np.ndarray | None = None

    @property
    def n_particles(self):
        return ad.value_of(self.log_weights).shape[-1]

    def weights(self):
        return np.exp(ad.value_of(self.log_weights))


def uniform_log_weights(shape):
    k = shape[-1]
    return np.full(shape, -math.log(k))


def normalization_error(log_weights):
    """``max |LogSumExp(w)|`` over all beliefs; 0 for a normalized belief."""
    lse = ad.log_sum_exp(ad.value_of(log_weights), axis=-1)
    return float(np.max(np.abs(lse)))


def sample_indices(probs, rng):
    """Multinomial ancestor draw: ``K`` indices per row of ``probs`` (B, K)."""
    probs = np.asarray(probs, dtype=np.float64)
    b, k = probs.shape
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    cdf[:, -1] = 1.0
    u = rng.random((b, k))
    offset = np.arange(b, dtype=np.float64)[:, None]
    flat = np.searchsorted((cdf + offset).ravel(), (u + offset).ravel(), side="right")
    idx = flat.reshape(b, k) - np.arange(b)[:, None] * k
    return np.clip(idx, 0, k - 1)


def _as_batched(belief):
    lw = belief.log_weights
    squeeze = ad.value_of(lw).ndim == 1
    if squeeze:
        lw = ad.reshape(lw, (1,) + ad.value_of(lw).shape)
        h = belief.hidden
        h = ad.reshape(h, (1,) + ad.value_of(h).shape)
    else:
        h = belief.hidden
    return h, lw, squeeze


def _finish(h, lw, idx, squeeze):
    if squeeze:
        h = ad.reshape(h, ad.value_of(h).shape[1:])
        lw = ad.reshape(lw, ad.value_of(lw).shape[1:])
        idx = idx[0]
    return ParticleBelief(h, lw, idx)


def _check_weights(lw):
    v = ad.value_of(lw)
    if np.any(np.isnan(v)) or np.any(np.isposinf(v)) or np.any(np.all(np.isneginf(v), axis=-1)):
        raise NumericError("non-finite particle log-weights")


def _jitter(h, rng, jitter_sigma):
    if jitter_sigma > 0:
        return ad.add(h, rng.normal(0.0, jitter_sigma, size=ad.value_of(h).shape))
    return h


def stochastic_resample(belief, rng, jitter_sigma=0.02, indices=None):
    """Draw ancestors from the weights, reset weights to ``1/K``, jitter rows."""
    h, lw, squeeze = _as_batched(belief)
    _check_weights(lw)
    lwv = ad.value_of(lw)
    if indices is None:
        w = np.exp(lwv - ad.log_sum_exp(lwv, axis=-1, keepdims=True))
        idx = sample_indices(w, rng)
    else:
        idx = np.asarray(indices).reshape(lwv.shape)
    h = _jitter(ad.gather_rows(h, idx), rng, jitter_sigma)
    return _finish(h, uniform_log_weights(lwv.shape), idx, squeeze)


def soft_resample(belief, alpha_mix, rng, jitter_sigma=0.02, indices=None):
    """Resample from ``alpha_mix * w + (1 - alpha_mix) / K`` with importance correction.

    The corrected weights ``w_i / q_i`` of the selected particles are
    renormalized, so the result is again a distribution.
    """
    if not 0.0 < alpha_mix <= 1.0:
        raise ValidationError(f"alpha_mix must lie in (0, 1], got {alpha_mix}")
    h, lw, squeeze = _as_batched(belief)
    _check_weights(lw)
    k = ad.value_of(lw).shape[-1]
    lw = ad.normalize_log_weights(lw)
    if alpha_mix == 1.0:
        log_q = lw
    else:
        log_q = ad.logaddexp(ad.add(lw, math.log(alpha_mix)), math.log((1.0 - alpha_mix) / k))
    if indices is None:
        idx = sample_indices(np.exp(ad.value_of(log_q)), rng)
    else:
        idx = np.asarray(indices).reshape(ad.value_of(lw).shape)
    ratio = ad.sub(ad.gather_rows(lw, idx), ad.gather_rows(log_q, idx))
    new_lw = ad.normalize_log_weights(ratio)
    h = _jitter(ad.gather_rows(h, idx), rng, jitter_sigma)
    return _finish(h, new_lw, idx, squeeze)
