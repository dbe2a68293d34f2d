"""Recurrent filtering cells: GRU, PFRNN and mePFRNN.

All step functions take a weight dict ``P`` mapping parameter names to
arrays (inference) or :class:`~beaconloc.autodiff.Var` leaves (training).
Batched shapes: ``B`` trajectories, ``K`` particles (or ``M`` ensemble
members for GRU kinds), ``H`` hidden features, ``E`` embedding features,
``k`` measured beacon distances.

Per-particle state inputs have 4 features: scaled coordinates and the sine
and cosine of the heading.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .errors import SpecError
from .resampling import ParticleBelief

KINDS = ("gru_heavy", "gru_ensemble", "pfrnn", "mepfrnn")
STATE_FEATURES = 4
HEAD_OUT = 4  # (c_x, c_y, sin alpha, cos alpha)
CONV_KERNEL = 3
CONV_STRIDE = 2
CONV_PADDING = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; every parameter shape derives from these fields.

    ``grid_shape`` (rows, cols) is only used by kinds with an environment
    encoder (``pfrnn`` and the GRU kinds).

    ``detach_state`` cuts the gradient path through the per-particle state
    inputs fed back from the previous readout. Off by default, so gradients
    are exact; turning it on trades exactness for shorter graphs.
    """

    kind: str = "mepfrnn"
    hidden_dim: int = 64
    n_particles: int = 30
    ensemble_size: int = 1
    embed_dim: int = 32
    env_channels: tuple = (8, 16, 16)
    grid_shape: tuple | None = None
    k_measure: int = 5
    beta: float = 0.1
    alpha_mix: float = 0.5
    leaky_slope: float = 0.01
    jitter_sigma: float = 0.02
    coord_scale: float = 10.0
    resample_every: int = 1
    loss: str | None = None
    detach_state: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown model kind {self.kind!r}; expected one of {KINDS}", key="kind")
        for name in ("hidden_dim", "n_particles", "ensemble_size", "embed_dim", "k_measure", "resample_every"):
            if int(getattr(self, name)) < 1:
                raise SpecError(f"{name} must be >= 1", key=name)
        if not 0.0 < self.alpha_mix <= 1.0:
            raise SpecError("alpha_mix must lie in (0, 1]", key="alpha_mix")
        if self.beta < 0:
            raise SpecError("beta must be >= 0", key="beta")
        if self.loss not in (None, "wmse", "l"):
            raise SpecError(f"loss must be 'wmse' or 'l', got {self.loss!r}", key="loss")
        object.__setattr__(self, "env_channels", tuple(int(c) for c in self.env_channels))
        if self.grid_shape is not None:
            object.__setattr__(self, "grid_shape", tuple(int(g) for g in self.grid_shape))
        if self.uses_env and len(self.env_channels) != 3:
            raise SpecError("env_channels must list three convolution widths", key="env_channels")
        if self.grid_shape is not None:
            if len(self.grid_shape) != 2:
                raise SpecError("grid_shape must be (rows, cols)", key="grid_shape")
            if self.uses_env and min(self.grid_shape) < CONV_KERNEL:
                raise SpecError(f"grid {self.grid_shape} smaller than the {CONV_KERNEL}x{CONV_KERNEL} "
                                "convolution receptive field", key="grid_shape")

    @property
    def uses_env(self):
        return self.kind != "mepfrnn"

    @property
    def has_particles(self):
        return self.kind in ("pfrnn", "mepfrnn")

    @property
    def members(self):
        """Size of the particle/member axis."""
        if self.kind == "gru_heavy":
            return 1
        if self.kind == "gru_ensemble":
            return self.ensemble_size
        return self.n_particles

    @property
    def training_loss(self):
        if self.loss is not None:
            return self.loss
        return "l" if self.kind == "mepfrnn" else "wmse"

    def to_dict(self):
        d = asdict(self)
        d["env_channels"] = list(self.env_channels)
        d["grid_shape"] = None if self.grid_shape is None else list(self.grid_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            key = sorted(unknown)[0]
            raise SpecError(f"unknown model spec key {key!r}", key=key)
        d = dict(d)
        if d.get("grid_shape") is not None:
            d["grid_shape"] = tuple(d["grid_shape"])
        if "env_channels" in d:
            d["env_channels"] = tuple(d["env_channels"])
        return cls(**d)

    def for_environment(self, env):
        """Copy with ``grid_shape`` taken from ``env`` when the kind encodes the map."""
        if self.uses_env:
            return replace(self, grid_shape=(env.height, env.width))
        return self


def conv_output_size(n):
    return (n + 2 * CONV_PADDING - CONV_KERNEL) // CONV_STRIDE + 1


def _conv_flat_size(spec):
    if spec.grid_shape is None:
        raise SpecError(f"kind {spec.kind!r} needs grid_shape (rows, cols)", key="grid_shape")
    h, w = spec.grid_shape
    for _ in range(3):
        h, w = conv_output_size(h), conv_output_size(w)
    return spec.env_channels[-1] * h * w


def param_shapes(spec):
    """Ordered ``(name, shape, fan_in)`` for every trainable tensor."""
    H, E, k, M = spec.hidden_dim, spec.embed_dim, spec.k_measure, spec.members
    out = []

    def linear(name, n_in, n_out, lead=()):
        out.append((f"{name}.w", lead + (n_in, n_out), n_in))
        out.append((f"{name}.b", lead + (n_out,), n_in))

    if spec.uses_env:
        c_in = 2
        for i, c_out in enumerate(spec.env_channels):
            fan = c_in * CONV_KERNEL * CONV_KERNEL
            out.append((f"conv{i}.w", (c_out, c_in, CONV_KERNEL, CONV_KERNEL), fan))
            out.append((f"conv{i}.b", (c_out,), fan))
            c_in = c_out
        linear("env_fc", _conv_flat_size(spec), E)
        linear("obs", k, E)
        linear("motion", STATE_FEATURES, E)
        linear("obs_env", E, E)
        linear("motion_env", E, E)
    V = 2 * E
    if spec.kind == "pfrnn":
        linear("a", V, H)
        linear("o", V, H)
        linear("c", 2 * H, H)
        linear("z", 2 * H, H)
        linear("mu", 2 * H, H)
        linear("sigma", 2 * H, H)
        out.append(("bn.gamma", (H,), None))
        out.append(("bn.beta", (H,), None))
        linear("w", 2 * H, 1)
        linear("head", H, HEAD_OUT)
    elif spec.kind == "mepfrnn":
        D = E + k
        linear("enc_x", STATE_FEATURES, E)
        linear("enc_y", k, E)
        linear("enc_u", 2 * E, E)
        linear("z", H + D, H)
        linear("r", H + D, H)
        linear("mu", H + D, H)
        linear("sigma", H + D, H)
        out.append(("bn.gamma", (H,), None))
        out.append(("bn.beta", (H,), None))
        linear("mlp1", D, E)
        linear("mlp2", E, 1)
        linear("head", H, HEAD_OUT)
    else:
        linear("gru_z", V + H, H, (M,))
        linear("gru_r", V + H, H, (M,))
        linear("gru_h", V, H, (M,))
        linear("gru_u", H, H, (M,))
        linear("head", H, HEAD_OUT, (M,))
    return out


def count_params(spec):
    return int(sum(int(np.prod(shape)) for _, shape, _ in param_shapes(spec)))


@dataclass
class ParamVector:
    """Flat float64 parameter vector plus a name -> (offset, shape) index."""

    flat: np.ndarray
    index: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.flat)

    def view(self, name):
        off, shape = self.index[name]
        return self.flat[off:off + int(np.prod(shape))].reshape(shape)

    def views(self):
        return {name: self.view(name) for name in self.index}

    def as_vars(self):
        return {name: ad.parameter(self.view(name)) for name in self.index}

    def gather_grads(self, leaves):
        """Flat gradient vector from the leaves returned by :meth:`as_vars`."""
        g = np.zeros_like(self.flat)
        for name, (off, shape) in self.index.items():
            leaf_grad = leaves[name].grad
            if leaf_grad is not None:
                g[off:off + int(np.prod(shape))] = leaf_grad.ravel()
        return g

    def copy(self):
        return ParamVector(self.flat.copy(), dict(self.index))

    def equals(self, other):
        return self.index == other.index and np.array_equal(self.flat, other.flat)


def build_index(spec):
    index, off = {}, 0
    for name, shape, _ in param_shapes(spec):
        index[name] = (off, tuple(shape))
        off += int(np.prod(shape))
    return index, off


def build_model(spec, seed=0):
    """Initialize parameters: U(-1/sqrt(fan_in), 1/sqrt(fan_in)); BN gamma=1, beta=0."""
    rng = np.random.Generator(np.random.Philox(seed))
    index, total = build_index(spec)
    pv = ParamVector(np.zeros(total), index)
    for name, shape, fan_in in param_shapes(spec):
        v = pv.view(name)
        if name == "bn.gamma":
            v[...] = 1.0
        elif name == "bn.beta":
            v[...] = 0.0
        else:
            bound = 1.0 / math.sqrt(fan_in)
            v[...] = rng.uniform(-bound, bound, size=shape)
    return pv


def init_buffers(spec):
    if not spec.has_particles:
        return {}
    return {"bn": {"mean": np.zeros(spec.hidden_dim), "var": np.ones(spec.hidden_dim)}}


# --------------------------------------------------------------------------- encoders


def _linear(x, P, name):
    return ad.affine(x, P[f"{name}.w"], P[f"{name}.b"])


def _bmm(x, w):
    """Per-member linear map: ``x`` (B, M, in) times ``w`` (M, in, out)."""
    xv = ad.value_of(x)
    b, m, n = xv.shape
    y = ad.matmul(ad.reshape(x, (b, m, 1, n)), w)
    return ad.reshape(y, (b, m, ad.value_of(w).shape[-1]))


def _broadcast_particles(x, k):
    """(B, F) -> (B, K, F)."""
    b, f = ad.value_of(x).shape
    return ad.broadcast_to(ad.reshape(x, (b, 1, f)), (b, k, f))


def pfrnn_encode_env(env_grid, P):
    """Conv->ReLU x3 -> Flatten -> Linear -> ReLU on a (2, rows, cols) grid."""
    x = env_grid
    for i in range(3):
        x = ad.relu(ad.conv2d(x, P[f"conv{i}.w"], P[f"conv{i}.b"], stride=CONV_STRIDE, padding=CONV_PADDING))
    flat = ad.reshape(x, (1, -1))
    return ad.reshape(ad.relu(_linear(flat, P, "env_fc")), (-1,))


def pfrnn_encode_inputs(x, y, e_env, P):
    """Per-particle input ``v = [n_hat * n, m_hat * m]``.

    ``x`` (B, K, 4) state features, ``y`` (B, k) measurements, ``e_env`` (E,).
    """
    k_particles = ad.value_of(x).shape[1]
    n = _broadcast_particles(ad.relu(_linear(y, P, "obs")), k_particles)
    m = ad.relu(_linear(x, P, "motion"))
    n_hat = ad.relu(_linear(e_env, P, "obs_env"))
    m_hat = ad.relu(_linear(e_env, P, "motion_env"))
    return ad.concat([ad.mul(n_hat, n), ad.mul(m_hat, m)], axis=-1)


def mepfrnn_encode_inputs(x, y, P, slope=0.01):
    """Motion embedding ``e_u`` and cell input ``e = [e_u, y]``.

    ``x`` (B, K, 4), ``y`` (B, k). The raw measurement enters the cell input.
    """
    k_particles = ad.value_of(x).shape[1]
    bx = ad.relu(_linear(x, P, "enc_x"))
    by = _broadcast_particles(ad.relu(_linear(y, P, "enc_y")), k_particles)
    e_u = ad.leaky_relu(_linear(ad.concat([bx, by], axis=-1), P, "enc_u"), slope)
    e = ad.concat([e_u, _broadcast_particles(y, k_particles)], axis=-1)
    return e_u, e


# --------------------------------------------------------------------------- cells


def _stochastic_hidden(mu, sigma, P, rng, slope, running, training):
    pre = ad.gaussian_sample(mu, sigma, rng)
    normed = ad.batch_norm(pre, P["bn.gamma"], P["bn.beta"], axis=(0, 1),
                           running=running, training=training)
    return ad.leaky_relu(normed, slope)


def _gated(z, d, h):
    """``(1 - z) * d + z * h``."""
    return ad.add(ad.mul(ad.sub(1.0, z), d), ad.mul(z, h))


def pfrnn_step(belief, v, P, rng, slope=0.01, running=None, training=True):
    """PFRNN particle update; returns the belief before resampling."""
    h, w = belief.hidden, belief.log_weights
    a = ad.relu(_linear(v, P, "a"))
    o = ad.relu(_linear(v, P, "o"))
    ah = ad.concat([a, h], axis=-1)
    c = ad.mul(ad.sigmoid(_linear(ah, P, "c")), h)
    z = ad.sigmoid(_linear(ah, P, "z"))
    ac = ad.concat([a, c], axis=-1)
    d = _stochastic_hidden(_linear(ac, P, "mu"), _linear(ac, P, "sigma"), P, rng, slope, running, training)
    h_new = _gated(z, d, h)
    p = _linear(ad.concat([o, h_new], axis=-1), P, "w")
    p = ad.reshape(p, ad.value_of(p).shape[:-1])
    return ParticleBelief(h_new, ad.normalize_log_weights(ad.add(p, w)))


def mepfrnn_step(belief, e, y, P, rng, slope=0.01, running=None, training=True):
    """mePFRNN particle update; returns the belief before resampling.

    The weight increment is the squared output of a two-layer MLP applied to
    each particle's cell input ``e`` (which carries ``y``).
    """
    h, w = belief.hidden, belief.log_weights
    he = ad.concat([h, e], axis=-1)
    z = ad.sigmoid(_linear(he, P, "z"))
    r = ad.sigmoid(_linear(he, P, "r"))
    re = ad.concat([ad.mul(r, h), e], axis=-1)
    d = _stochastic_hidden(_linear(re, P, "mu"), _linear(re, P, "sigma"), P, rng, slope, running, training)
    h_new = _gated(z, d, h)
    s = _linear(ad.leaky_relu(_linear(e, P, "mlp1"), slope), P, "mlp2")
    s = ad.square(ad.reshape(s, ad.value_of(s).shape[:-1]))
    return ParticleBelief(h_new, ad.normalize_log_weights(ad.add(s, w)))


def gru_step(h, v, P, prefix="gru"):
    """Standard GRU update on (B, M, H) with per-member weights."""
    vh = ad.concat([v, h], axis=-1)
    z = ad.sigmoid(ad.add(_bmm(vh, P[f"{prefix}_z.w"]), P[f"{prefix}_z.b"]))
    r = ad.sigmoid(ad.add(_bmm(vh, P[f"{prefix}_r.w"]), P[f"{prefix}_r.b"]))
    uh = ad.add(_bmm(h, P[f"{prefix}_u.w"]), P[f"{prefix}_u.b"])
    h_hat = ad.tanh(ad.add(ad.add(_bmm(v, P[f"{prefix}_h.w"]), P[f"{prefix}_h.b"]), ad.mul(r, uh)))
    return ad.add(ad.mul(ad.sub(1.0, z), h), ad.mul(z, h_hat))


def head_outputs(h, P, spec):
    """Per-particle (or per-member) head: (B, K, 4) = (c_x, c_y, sin, cos)."""
    if spec.has_particles:
        raw = _linear(h, P, "head")
    else:
        raw = ad.add(_bmm(h, P["head.w"]), P["head.b"])
    scale = np.array([spec.coord_scale, spec.coord_scale, 1.0, 1.0])
    return ad.mul(raw, scale)


def readout(belief_or_h, P, spec):
    """State estimate (B, 4): weight-averaged head outputs.

    For particle kinds the weights are ``exp(log_weights)``; GRU members are
    averaged uniformly.
    """
    if isinstance(belief_or_h, ParticleBelief):
        heads = head_outputs(belief_or_h.hidden, P, spec)
        lw = belief_or_h.log_weights
        shape = ad.value_of(lw).shape
        w = ad.reshape(ad.exp(lw), shape + (1,))
        return ad.sum(ad.mul(w, heads), axis=-2), heads
    heads = head_outputs(belief_or_h, P, spec)
    return ad.mean(heads, axis=-2), heads


def propagate_heads(heads, speeds, coord_scale):
    """Noiseless motion of per-particle head outputs with the known speed.

    ``heads`` (B, K, 4), ``speeds`` (B,). Returns state features (B, K, 4):
    scaled coordinates, sin and cos of the heading. Differentiable when
    ``heads`` is a graph node.
    """
    alpha = ad.atan2(ad.getitem(heads, (Ellipsis, 2)), ad.getitem(heads, (Ellipsis, 3)))
    ca, sa = ad.cos(alpha), ad.sin(alpha)
    u = np.asarray(speeds, dtype=np.float64)[:, None]
    cx = ad.add(ad.getitem(heads, (Ellipsis, 0)), ad.mul(ca, u))
    cy = ad.add(ad.getitem(heads, (Ellipsis, 1)), ad.mul(sa, u))
    return ad.stack([ad.mul(cx, 1.0 / coord_scale), ad.mul(cy, 1.0 / coord_scale), sa, ca], axis=-1)


# --------------------------------------------------------------------------- GRU baseline sizing


def _gru_spec_with(spec, kind, hidden, members):
    return replace(spec, kind=kind, hidden_dim=int(hidden), ensemble_size=int(members), n_particles=1)


def gru_hidden_for_budget(template, kind, budget, members=1):
    """Largest hidden size whose GRU-kind model stays within ``budget`` parameters."""
    lo, hi = 1, 1
    while count_params(_gru_spec_with(template, kind, hi, members)) <= budget:
        hi *= 2
        if hi > 1 << 16:
            break
    while lo < hi - 1:
        mid = (lo + hi) // 2
        if count_params(_gru_spec_with(template, kind, mid, members)) <= budget:
            lo = mid
        else:
            hi = mid
    return lo


def baseline_gru_specs(pfrnn_spec):
    """HeavyGRU and EnsembleGRU specs sized against a PFRNN spec.

    HeavyGRU gets about ``K x #params(PFRNN)`` parameters in one cell;
    EnsembleGRU gets ``K`` members whose total is about ``#params(PFRNN)``.
    """
    if pfrnn_spec.kind != "pfrnn":
        raise SpecError("baseline sizing needs a pfrnn spec", key="kind")
    base = count_params(pfrnn_spec)
    k = pfrnn_spec.n_particles
    heavy_h = gru_hidden_for_budget(pfrnn_spec, "gru_heavy", k * base)
    ens_h = gru_hidden_for_budget(pfrnn_spec, "gru_ensemble", base, members=k)
    return (_gru_spec_with(pfrnn_spec, "gru_heavy", heavy_h, 1),
            _gru_spec_with(pfrnn_spec, "gru_ensemble", ens_h, k))
