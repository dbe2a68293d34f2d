"""Sequence runner for the recurrent cells, plus checkpoint persistence.

Checkpoint layout (little-endian)::

    b"BEACONLOC-CKPT v1\\n"
    <one line of JSON: spec, parameter index, buffer index, provenance>
    <float64 parameters><float64 buffers>
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .cells import (
    ModelSpec, ParamVector, build_index, build_model, gru_step, head_outputs, init_buffers,
    mepfrnn_encode_inputs, mepfrnn_step, pfrnn_encode_env, pfrnn_encode_inputs, pfrnn_step,
    propagate_heads, readout,
)
from .errors import DataError
from .resampling import ParticleBelief, soft_resample, uniform_log_weights

MAGIC = b"BEACONLOC-CKPT v1\n"


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: ParamVector
    buffers: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, spec, seed=0):
        return cls(spec, build_model(spec, seed), init_buffers(spec))

    def copy(self):
        bufs = {k: {n: a.copy() for n, a in v.items()} for k, v in self.buffers.items()}
        return Checkpoint(self.spec, self.params.copy(), bufs, dict(self.provenance))

    def equals(self, other):
        if self.spec != other.spec or not self.params.equals(other.params):
            return False
        if set(self.buffers) != set(other.buffers):
            return False
        return all(np.array_equal(self.buffers[k][n], other.buffers[k][n])
                   for k in self.buffers for n in self.buffers[k])


def save_checkpoint(ckpt, path):
    path = Path(path)
    bufs, chunks, off = {}, [], 0
    for name in sorted(ckpt.buffers):
        bufs[name] = {}
        for stat in sorted(ckpt.buffers[name]):
            arr = np.asarray(ckpt.buffers[name][stat], dtype="<f8")
            bufs[name][stat] = [off, list(arr.shape)]
            chunks.append(arr.ravel())
            off += arr.size
    header = {
        "spec": ckpt.spec.to_dict(),
        "index": {k: [o, list(s)] for k, (o, s) in ckpt.params.index.items()},
        "n_params": len(ckpt.params),
        "buffers": bufs,
        "n_buffer": off,
        "provenance": {"version": __version__, **ckpt.provenance},
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.asarray(ckpt.params.flat, dtype="<f8").tobytes())
        for c in chunks:
            fh.write(c.tobytes())
    return path


def load_checkpoint(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(MAGIC):
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    end = data.index(b"\n", len(MAGIC))
    header = json.loads(data[len(MAGIC):end])
    spec = ModelSpec.from_dict(header["spec"])
    index = {k: (o, tuple(s)) for k, (o, s) in header["index"].items()}
    expected, total = build_index(spec)
    if index != expected or header["n_params"] != total:
        raise DataError("checkpoint parameter index does not match its model spec")
    raw = np.frombuffer(data, dtype="<f8", offset=end + 1)
    if raw.size != header["n_params"] + header["n_buffer"]:
        raise DataError("checkpoint payload has the wrong length")
    flat = raw[:total].astype(np.float64)
    bufs = {}
    for name, stats in header["buffers"].items():
        bufs[name] = {}
        for stat, (off, shape) in stats.items():
            n = int(np.prod(shape))
            bufs[name][stat] = raw[total + off: total + off + n].astype(np.float64).reshape(shape)
    prov = header.get("provenance", {})
    return Checkpoint(spec, ParamVector(flat, index), bufs, prov)


class Model:
    """Runs a cell over trajectories.

    Parameters
    ----------
    checkpoint : Checkpoint
    env : Environment, optional
        Needed by kinds with an environment encoder.
    """

    def __init__(self, checkpoint, env=None):
        self.ckpt = checkpoint
        self.spec = checkpoint.spec
        self.env_image = None
        if self.spec.uses_env:
            if env is None:
                raise DataError(f"model kind {self.spec.kind!r} needs an environment")
            img = env.rasterize()
            if img.shape[1:] != tuple(self.spec.grid_shape):
                raise DataError(f"environment grid {img.shape[1:]} does not match spec grid {self.spec.grid_shape}")
            self.env_image = img

    @property
    def n_params(self):
        return len(self.ckpt.params)

    def initial_state(self, batch, rng):
        spec = self.spec
        m = spec.members
        if spec.has_particles:
            h = rng.standard_normal((batch, m, spec.hidden_dim))
            return {"belief": ParticleBelief(h, uniform_log_weights((batch, m))), "heads": None, "t": 0}
        return {"h": np.zeros((batch, m, spec.hidden_dim)), "heads": None, "t": 0}

    def step(self, state, speeds, y, rng, P=None, training=False, e_env=None, pinned=None, record=None):
        """Advance one time step.

        ``speeds`` (B,), ``y`` (B, k). Returns ``(state, estimate)`` with the
        estimate of shape (B, 4). ``pinned``/``record`` replay or capture the
        resampling ancestor indices.
        """
        spec = self.spec
        if P is None:
            P = self.ckpt.params.views()
        if spec.uses_env and e_env is None:
            e_env = pfrnn_encode_env(self.env_image, P)
        running = self.ckpt.buffers.get("bn")
        speeds = np.asarray(speeds, dtype=np.float64)
        heads_prev = state["heads"]
        if heads_prev is None:
            h0 = state["belief"].hidden if spec.has_particles else state["h"]
            heads_prev = head_outputs(h0, P, spec)
            if spec.detach_state:
                heads_prev = ad.value_of(heads_prev)
        x = propagate_heads(heads_prev, speeds, spec.coord_scale)
        t = state["t"] + 1
        if spec.has_particles:
            belief = state["belief"]
            if spec.kind == "pfrnn":
                v = pfrnn_encode_inputs(x, y, e_env, P)
                belief = pfrnn_step(belief, v, P, rng, spec.leaky_slope, running, training)
            else:
                _, e = mepfrnn_encode_inputs(x, y, P, spec.leaky_slope)
                belief = mepfrnn_step(belief, e, y, P, rng, spec.leaky_slope, running, training)
            est, heads = readout(belief, P, spec)
            heads_v = ad.value_of(heads) if spec.detach_state else heads
            if t % spec.resample_every == 0:
                idx = None if pinned is None else pinned[t - 1]
                belief = soft_resample(belief, spec.alpha_mix, rng, spec.jitter_sigma, indices=idx)
                if record is not None:
                    record.append(belief.indices)
                heads_v = ad.gather_rows(heads_v, belief.indices)
            elif record is not None:
                record.append(None)
            return {"belief": belief, "heads": heads_v, "t": t}, est
        v = pfrnn_encode_inputs(x, y, e_env, P)
        h = gru_step(state["h"], v, P)
        est, heads = readout(h, P, spec)
        return {"h": h, "heads": ad.value_of(heads) if spec.detach_state else heads, "t": t}, est

    def run(self, speeds, measurements, rng, P=None, training=False, pinned=None, record=None):
        """Estimates for a batch: ``speeds`` (B, N), ``measurements`` (B, N, k) -> (B, N, 4)."""
        speeds = np.asarray(speeds, dtype=np.float64)
        measurements = np.asarray(measurements, dtype=np.float64)
        if P is None:
            P = self.ckpt.params.views()
        e_env = pfrnn_encode_env(self.env_image, P) if self.spec.uses_env else None
        state = self.initial_state(speeds.shape[0], rng)
        ests = []
        for i in range(speeds.shape[1]):
            state, est = self.step(state, speeds[:, i], measurements[:, i], rng, P, training,
                                   e_env, pinned, record)
            ests.append(est)
        return ad.stack(ests, axis=1)

    def predict_poses(self, speeds, measurements, rng):
        """Untracked inference returning (B, N, 3) poses with heading in [0, 2*pi)."""
        out = self.run(speeds, measurements, rng)
        return estimates_to_poses(out)


def estimates_to_poses(est):
    est = ad.value_of(est)
    alpha = np.mod(np.arctan2(est[..., 2], est[..., 3]), 2 * math.pi)
    return np.concatenate([est[..., :2], alpha[..., None]], axis=-1)


class ModelStepper:
    """Single-trajectory stepping interface used for timing."""

    def __init__(self, checkpoint, env=None, seed=0):
        self.model = Model(checkpoint, env)
        self.rng = np.random.Generator(np.random.Philox(seed))
        self.P = checkpoint.params.views()
        self.e_env = pfrnn_encode_env(self.model.env_image, self.P) if self.model.spec.uses_env else None
        self.reset()

    def reset(self, initial_pose=None):
        self.state = self.model.initial_state(1, self.rng)

    def step(self, speed, measurement):
        self.state, est = self.model.step(self.state, [speed], np.asarray(measurement)[None, :], self.rng,
                                          self.P, False, self.e_env)
        return estimates_to_poses(est)[0]
