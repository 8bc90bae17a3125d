"""Discrete-time dynamics of hybrid-plasticity spiking layers.

A layer carries a slow, globally trained weight matrix whose contribution
decays over the presentation window, plus a fast plasticity trace P built
from pre/post co-activity and scaled by per-layer meta-parameters. The
three-line recurrence per timestep m (m = 1..T, zero initial state):

    P(m) = P(m-1) * exp(-dt/tau_w) + eta_j * x_j(m) * (rho(u_i(m-1)) + beta_i)
    u(m) = (1 - s(m-1)) * (1 - k_u) * u(m-1)
           + k_u * sum_j (w_ij * g_m + alpha_i * P_ij(m)) * x_j(m)
    s(m) = H(u(m) - v_th)

with g_m = exp(-m*dt/tau_w). rho is evaluated at the previous potential,
which keeps the update one-pass causal. All arithmetic is float64.

Arrays may carry a leading batch dimension: activity vectors are shaped
(n,) or (B, n) and traces (post, pre) or (B, post, pre); every operation
broadcasts over the batch axis.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError

__all__ = [
    "SimConstants",
    "Rule",
    "Rho",
    "MetaParams",
    "LayerParams",
    "Layer",
    "LayerState",
    "Network",
    "Tape",
    "OutputRecord",
    "step_layer",
    "forward",
    "sigmoid",
    "heaviside",
]

# Decay factors closer to 1 than this are snapped to exactly 1.0 so that
# tau_w -> infinity degenerates to time-constant weights.
_NO_DECAY_EPS = 1e-15


def sigmoid(z):
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def heaviside(u, v_th):
    """Spike indicator H(u - v_th); fires on u >= v_th."""
    return (np.asarray(u) >= v_th).astype(np.float64)


@dataclass(frozen=True)
class SimConstants:
    """Simulation constants shared by every layer of a network.

    dt and tau_w are in ms, T counts timesteps per presentation, k_u is the
    membrane integration ratio dt/tau_u, v_th the firing threshold and a the
    surrogate-gradient window width. ``no_decay`` freezes both the
    weight-decay factor g_m and the trace decay at exactly 1.0.
    """

    dt: float = 1.0
    T: int = 8
    k_u: float = 0.6
    v_th: float = 0.3
    tau_w: float = 40.0
    a: float = 0.5
    no_decay: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if not self.T >= 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not 0.0 < self.k_u <= 1.0:
            raise ValueError(f"k_u must be in (0, 1], got {self.k_u}")
        if not self.tau_w > 0:
            raise ValueError(f"tau_w must be > 0, got {self.tau_w}")
        if not self.a > 0:
            raise ValueError(f"a must be > 0, got {self.a}")

    @property
    def trace_decay(self) -> float:
        """Per-step decay exp(-dt/tau_w) of traces and GP weights."""
        if self.no_decay:
            return 1.0
        d = math.exp(-self.dt / self.tau_w)
        return 1.0 if 1.0 - d < _NO_DECAY_EPS else d

    def gp_decay(self, step_index: int) -> float:
        """g_m = exp(-step_index * dt / tau_w), restarting at each trial."""
        if self.no_decay or self.trace_decay == 1.0:
            return 1.0
        return math.exp(-step_index * self.dt / self.tau_w)


class Rule(enum.Enum):
    HEBBIAN = "hebbian"
    STDP = "stdp"
    LABEL_CLAMP = "label_clamp"


class Rho(enum.Enum):
    HEAVISIDE = "heaviside"
    SIGMOID = "sigmoid"


@dataclass
class MetaParams:
    """Layer-wise meta-parameters of the local plasticity module.

    alpha gates the trace's contribution to the effective weight (one entry
    per postsynaptic neuron), eta is the per-presynaptic local learning
    rate, beta the sliding threshold (<= 0 by convention, not enforced).
    """

    alpha: np.ndarray
    eta: np.ndarray
    beta: np.ndarray
    rule: Rule = Rule.HEBBIAN
    rho: Rho = Rho.HEAVISIDE

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.eta = np.asarray(self.eta, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)

    def copy(self) -> "MetaParams":
        return MetaParams(self.alpha.copy(), self.eta.copy(), self.beta.copy(),
                          rule=self.rule, rho=self.rho)


@dataclass
class LayerParams:
    """Slow (globally trained) parameters of one connection layer."""

    w: np.ndarray
    gp_mask: np.ndarray | None = None
    in_is_analog: bool = False

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 2:
            raise DimensionError(f"w must be [post, pre], got shape {self.w.shape}")
        if not np.isfinite(self.w).all():
            raise NumericError("w contains non-finite entries")
        if self.gp_mask is not None:
            self.gp_mask = np.asarray(self.gp_mask, dtype=bool)
            if self.gp_mask.shape != self.w.shape:
                raise DimensionError(
                    f"gp_mask shape {self.gp_mask.shape} != w shape {self.w.shape}")

    @property
    def post(self) -> int:
        return self.w.shape[0]

    @property
    def pre(self) -> int:
        return self.w.shape[1]


@dataclass
class Layer:
    """One connection layer: slow params, meta-params, optional STDP config.

    ``plastic=False`` removes the trace machinery entirely; by the
    alpha = 0 reduction this is behaviourally identical to alpha = eta = 0
    and skips all trace compute.
    """

    params: LayerParams
    meta: MetaParams
    stdp: "object | None" = None  # plasticity.StdpParams when rule is STDP
    plastic: bool = True

    @property
    def pre(self) -> int:
        return self.params.pre

    @property
    def post(self) -> int:
        return self.params.post


@dataclass
class LayerState:
    """Per-layer dynamical state at one timestep."""

    u: np.ndarray
    s: np.ndarray
    P: np.ndarray | None = None
    x_pre: np.ndarray | None = None
    x_post: np.ndarray | None = None

    @staticmethod
    def zeros(layer: Layer, batch_shape: tuple[int, ...] = ()) -> "LayerState":
        post, pre = layer.post, layer.pre
        u = np.zeros(batch_shape + (post,))
        s = np.zeros(batch_shape + (post,))
        P = x_pre = x_post = None
        if layer.plastic:
            P = np.zeros(batch_shape + (post, pre))
            if layer.meta.rule is Rule.STDP:
                x_pre = np.zeros(batch_shape + (pre,))
                x_post = np.zeros(batch_shape + (post,))
        return LayerState(u=u, s=s, P=P, x_pre=x_pre, x_post=x_post)


class Network:
    """A stack of hybrid-plasticity layers sharing one SimConstants.

    Instances are single-writer: training mutates parameters in place, so a
    given instance must not be shared mutably across workers. Independent
    clones may run in parallel and merge gradients by explicit reduction.
    """

    def __init__(self, layers: list[Layer], constants: SimConstants):
        for i in range(1, len(layers)):
            if layers[i].pre != layers[i - 1].post:
                raise DimensionError(
                    f"layer {i} expects {layers[i].pre} inputs, "
                    f"layer {i - 1} outputs {layers[i - 1].post}")
        self.layers = layers
        self.c = constants

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].pre] + [l.post for l in self.layers]

    @property
    def n_out(self) -> int:
        return self.layers[-1].post

    @staticmethod
    def init(dims: list[int], constants: SimConstants, rng: np.random.Generator,
             plastic: "bool | list[bool]" = True, rule: Rule = Rule.HEBBIAN,
             rho: Rho = Rho.HEAVISIDE, in_is_analog: bool = False,
             alpha0: float = 0.01, eta0: float = 0.01, beta0: float = 0.0,
             stdp: "object | None" = None) -> "Network":
        """Build a network with Glorot-uniform weights and small meta-params.

        The paper is silent on initialization; weights are U(+-sqrt(6/(fan_in
        + fan_out))), alpha = eta = 0.01, beta = 0, all seed-controlled.
        """
        if len(dims) < 2:
            raise ValueError("need at least [in, out] dims")
        if isinstance(plastic, bool):
            plastic = [plastic] * (len(dims) - 1)
        if len(plastic) != len(dims) - 1:
            raise DimensionError("plastic flags must match the layer count")
        layers = []
        for i in range(len(dims) - 1):
            pre, post = dims[i], dims[i + 1]
            bound = math.sqrt(6.0 / (pre + post))
            w = rng.uniform(-bound, bound, size=(post, pre))
            params = LayerParams(w=w, in_is_analog=(i == 0 and in_is_analog))
            meta = MetaParams(alpha=np.full(post, alpha0),
                              eta=np.full(pre, eta0),
                              beta=np.full(post, beta0), rule=rule, rho=rho)
            layers.append(Layer(params=params, meta=meta, plastic=plastic[i],
                                stdp=copy.copy(stdp) if rule is Rule.STDP else None))
        return Network(layers, constants)

    def clone(self) -> "Network":
        layers = []
        for l in self.layers:
            params = LayerParams(
                w=l.params.w.copy(),
                gp_mask=None if l.params.gp_mask is None else l.params.gp_mask.copy(),
                in_is_analog=l.params.in_is_analog)
            layers.append(Layer(params=params, meta=l.meta.copy(),
                                stdp=copy.copy(l.stdp), plastic=l.plastic))
        return Network(layers, self.c)

    def with_weights(self, weights: list[np.ndarray]) -> "Network":
        """Shallow clone sharing meta-params but carrying replacement weights.

        Used by the inner lookahead: evaluate at w' without touching w.
        """
        if len(weights) != len(self.layers):
            raise DimensionError("one weight matrix per layer required")
        layers = []
        for l, w in zip(self.layers, weights):
            params = LayerParams(w=w, gp_mask=l.params.gp_mask,
                                 in_is_analog=l.params.in_is_analog)
            layers.append(Layer(params=params, meta=l.meta, stdp=l.stdp,
                                plastic=l.plastic))
        return Network(layers, self.c)

    def weights(self) -> list[np.ndarray]:
        return [l.params.w for l in self.layers]


def _rho_of(u, meta: MetaParams, c: SimConstants):
    if meta.rho is Rho.HEAVISIDE:
        return heaviside(u, c.v_th)
    return sigmoid((np.asarray(u) - c.v_th) / c.a)


def _spike_of(u, c: SimConstants, soft: bool):
    if soft:
        return sigmoid((np.asarray(u) - c.v_th) / c.a)
    return heaviside(u, c.v_th)


def _check_activity(inp, pre: int, analog: bool, soft: bool):
    inp = np.asarray(inp, dtype=np.float64)
    if inp.shape[-1] != pre:
        raise DimensionError(f"input has {inp.shape[-1]} entries, layer expects {pre}")
    if not analog and not soft:
        bad = (inp != 0.0) & (inp != 1.0)
        if bad.any():
            raise DimensionError("non-analog layer fed non-binary activity")
    return inp


def step_layer(state: LayerState, inp, layer: Layer, c: SimConstants,
               step_index: int, soft: bool = False, clamp=None):
    """Advance one layer by one timestep; returns (new_state, spikes).

    ``step_index`` is 1-based within the presentation. ``clamp`` supplies
    the one-hot post-term for LABEL_CLAMP layers during support
    presentations. In soft mode the spike output is sigmoid((u - v_th)/a),
    which makes the whole rollout differentiable for gradient checking.
    """
    from . import plasticity  # local import to avoid a cycle

    if step_index < 1:
        raise ValueError("step_index starts at 1")
    inp = _check_activity(inp, layer.pre, layer.params.in_is_analog, soft)
    meta = layer.meta

    P = x_pre = x_post = None
    if layer.plastic:
        if meta.rule is Rule.STDP:
            x_pre, x_post = plasticity.stdp_traces(
                state.x_pre, state.x_post, inp, state.s, layer.stdp, c)
            P = plasticity.stdp_update(state.P, x_pre, x_post, layer.stdp, c)
        elif meta.rule is Rule.LABEL_CLAMP and clamp is not None:
            P = plasticity.clamp_update(state.P, inp, clamp, meta, c)
        else:
            P = plasticity.hebbian_update(state.P, inp, state.u, meta, c)

    g = c.gp_decay(step_index)
    cur = inp @ (layer.params.w * g).T
    if layer.plastic:
        pc = np.matmul(P, inp[..., None])[..., 0]
        cur = cur + meta.alpha * pc
    u = (1.0 - state.s) * (1.0 - c.k_u) * state.u + c.k_u * cur
    if not np.isfinite(u).all():
        raise NumericError("membrane potential became non-finite")
    s = _spike_of(u, c, soft)
    return LayerState(u=u, s=s, P=P, x_pre=x_pre, x_post=x_post), s


@dataclass
class LayerTape:
    """Per-layer forward record; arrays are indexed [step, (batch,) units].

    ``p_current`` stores P(m) @ x(m) per step (what the membrane actually
    consumed); the full trace matrices are kept only when the materialized
    path ran (STDP, carried-in state) and can otherwise be reconstructed.
    """

    x: np.ndarray
    u: np.ndarray
    s: np.ndarray
    p_current: np.ndarray | None = None
    P: np.ndarray | None = None
    x_pre: np.ndarray | None = None
    x_post: np.ndarray | None = None


@dataclass
class OutputRecord:
    """Per-step membrane potentials and spikes of the output layer."""

    u: np.ndarray
    s: np.ndarray
    stop_step: np.ndarray | None = None  # rank mode, 1-based, per sample


@dataclass
class Tape:
    """Everything the backward pass needs from one rollout."""

    layers: list[LayerTape]
    g: np.ndarray
    steps: int
    soft: bool
    coding: str = "rate"
    clamp: np.ndarray | None = None
    stop_step: np.ndarray | None = None
    batch_shape: tuple[int, ...] = ()

    def output_record(self) -> OutputRecord:
        out = self.layers[-1]
        return OutputRecord(u=out.u, s=out.s, stop_step=self.stop_step)

    def plasticity_matrices(self, net: Network, layer_index: int) -> np.ndarray:
        """Reconstruct P(m) for every step of one layer.

        Returns [steps, (batch,) post, pre]. Used by analysis code; the
        training path never materializes these.
        """
        lt = self.layers[layer_index]
        layer = net.layers[layer_index]
        if lt.P is not None:
            return lt.P
        if not layer.plastic:
            raise ValueError("layer is not plastic")
        from . import plasticity

        c = net.c
        state = LayerState.zeros(layer, self.batch_shape)
        out = np.zeros((self.steps,) + state.P.shape)
        P = state.P
        u_prev = state.u
        for m in range(self.steps):
            if layer.meta.rule is Rule.LABEL_CLAMP and self.clamp is not None:
                P = plasticity.clamp_update(P, lt.x[m], self.clamp, layer.meta, c)
            else:
                P = plasticity.hebbian_update(P, lt.x[m], u_prev, layer.meta, c)
            u_prev = lt.u[m]
            out[m] = P
        return out


def _track_rank_stop(s_out, soft, stop, m):
    fired = (s_out >= 0.5) if soft else (s_out == 1.0)
    fired_any = fired.any(axis=-1)
    newly = (stop == 0) & fired_any
    return np.where(newly, m, stop)


def _forward_materialized(net: Network, input_seq, soft, coding, clamp, init_states):
    c = net.c
    batch_shape = input_seq.shape[1:-1]
    states = init_states or [LayerState.zeros(l, batch_shape) for l in net.layers]
    T = input_seq.shape[0]

    recs = [{"x": [], "u": [], "s": [], "P": [], "xpre": [], "xpost": [], "pc": []}
            for _ in net.layers]
    gs = []
    stop = np.zeros(batch_shape or (), dtype=np.int64)
    steps_done = 0
    for m in range(1, T + 1):
        x = input_seq[m - 1]
        gs.append(c.gp_decay(m))
        for li, layer in enumerate(net.layers):
            layer_clamp = clamp if layer.meta.rule is Rule.LABEL_CLAMP else None
            states[li], s = step_layer(states[li], x, layer, c, m, soft=soft,
                                       clamp=layer_clamp)
            r = recs[li]
            r["x"].append(x)
            r["u"].append(states[li].u)
            r["s"].append(s)
            if layer.plastic:
                r["P"].append(states[li].P.copy())
                r["pc"].append(np.matmul(states[li].P, x[..., None])[..., 0])
                if layer.meta.rule is Rule.STDP:
                    r["xpre"].append(states[li].x_pre.copy())
                    r["xpost"].append(states[li].x_post.copy())
            x = s
        steps_done = m
        if coding == "rank":
            stop = _track_rank_stop(states[-1].s, soft, stop, m)
            if (stop > 0).all():
                break

    layer_tapes = []
    for li in range(len(net.layers)):
        r = recs[li]
        layer_tapes.append(LayerTape(
            x=np.stack(r["x"]), u=np.stack(r["u"]), s=np.stack(r["s"]),
            p_current=np.stack(r["pc"]) if r["pc"] else None,
            P=np.stack(r["P"]) if r["P"] else None,
            x_pre=np.stack(r["xpre"]) if r["xpre"] else None,
            x_post=np.stack(r["xpost"]) if r["xpost"] else None))
    stop_step = None
    if coding == "rank":
        stop_step = np.where(stop == 0, steps_done, stop)
    tape = Tape(layers=layer_tapes, g=np.asarray(gs), steps=steps_done, soft=soft,
                coding=coding, clamp=None if clamp is None else np.asarray(clamp),
                stop_step=stop_step, batch_shape=batch_shape)
    return tape, states


def _forward_factored(net: Network, input_seq, soft, coding, clamp):
    """Rollout with the Hebbian trace evaluated as a sum of decayed outer
    products: the trace-driven current at step m is

        pc_i(m) = sum_{k<=m} d^(m-k) * <eta * x(k), x(m)> * post_i(k-1)

    which never materializes a [batch, post, pre] trace. Exact for zero
    initial P up to float reassociation (the materialized path agrees to
    better than 1e-12).
    """
    c = net.c
    d = c.trace_decay
    batch_shape = input_seq.shape[1:-1]
    T = input_seq.shape[0]
    L = len(net.layers)

    u = [np.zeros(batch_shape + (l.post,)) for l in net.layers]
    s = [np.zeros(batch_shape + (l.post,)) for l in net.layers]
    # Histories for the factored trace: eta*x(k) and the post-term of step k.
    xh = [np.zeros((T,) + batch_shape + (l.pre,)) if l.plastic else None
          for l in net.layers]
    ph = [np.zeros((T,) + batch_shape + (l.post,)) if l.plastic else None
          for l in net.layers]
    d_pow = d ** np.arange(T, dtype=np.float64)

    recs = [{"x": [], "u": [], "s": [], "pc": []} for _ in net.layers]
    gs = []
    stop = np.zeros(batch_shape or (), dtype=np.int64)
    steps_done = 0

    for m in range(1, T + 1):
        x = input_seq[m - 1]
        g = c.gp_decay(m)
        gs.append(g)
        for li, layer in enumerate(net.layers):
            meta = layer.meta
            x = _check_activity(x, layer.pre, layer.params.in_is_analog, soft)
            cur = x @ (layer.params.w * g).T
            if layer.plastic:
                if meta.rule is Rule.LABEL_CLAMP and clamp is not None:
                    post_term = np.broadcast_to(
                        np.asarray(clamp, dtype=np.float64),
                        batch_shape + (layer.post,))
                else:
                    post_term = _rho_of(u[li], meta, c) + meta.beta
                xh[li][m - 1] = meta.eta * x
                ph[li][m - 1] = post_term
                ips = np.einsum("k...j,...j->k...", xh[li][:m], x)
                decays = d_pow[m - 1::-1]
                coef = ips * decays.reshape((m,) + (1,) * (ips.ndim - 1))
                pc = np.einsum("k...,k...i->...i", coef, ph[li][:m])
                cur = cur + meta.alpha * pc
                recs[li]["pc"].append(pc)
            u_new = (1.0 - s[li]) * (1.0 - c.k_u) * u[li] + c.k_u * cur
            if not np.isfinite(u_new).all():
                raise NumericError("membrane potential became non-finite")
            s_new = _spike_of(u_new, c, soft)
            recs[li]["x"].append(x)
            recs[li]["u"].append(u_new)
            recs[li]["s"].append(s_new)
            u[li], s[li] = u_new, s_new
            x = s_new
        steps_done = m
        if coding == "rank":
            stop = _track_rank_stop(s[-1], soft, stop, m)
            if (stop > 0).all():
                break

    layer_tapes = []
    for li in range(L):
        r = recs[li]
        layer_tapes.append(LayerTape(
            x=np.stack(r["x"]), u=np.stack(r["u"]), s=np.stack(r["s"]),
            p_current=np.stack(r["pc"]) if r["pc"] else None))
    stop_step = None
    if coding == "rank":
        stop_step = np.where(stop == 0, steps_done, stop)
    return Tape(layers=layer_tapes, g=np.asarray(gs), steps=steps_done, soft=soft,
                coding=coding, clamp=None if clamp is None else np.asarray(clamp),
                stop_step=stop_step, batch_shape=batch_shape)


def forward(net: Network, input_seq, coding: str = "rate", soft: bool = False,
            clamp=None, init_states: list[LayerState] | None = None,
            return_states: bool = False, materialize: bool = False):
    """Roll the network over an input sequence and record the tape.

    input_seq: [T, n_in] or [T, B, n_in]. In rank mode the rollout stops at
    the first step where every sample's output layer has spiked (per-sample
    stop steps are recorded); otherwise it runs the full T steps.

    ``init_states`` opts into state carry-over (few-shot support
    presentations); carried-in state forces the materialized path, as does
    ``materialize=True`` or an STDP layer.
    """
    if coding not in ("rate", "rank"):
        raise ValueError(f"unknown coding mode {coding!r}")
    input_seq = np.asarray(input_seq, dtype=np.float64)
    if input_seq.ndim < 2:
        raise DimensionError("input_seq must be [T, ..., n_in]")
    if input_seq.shape[0] != net.c.T:
        raise DimensionError(
            f"input_seq has {input_seq.shape[0]} steps, constants say T={net.c.T}")

    needs_material = materialize or init_states is not None or return_states or any(
        l.plastic and l.meta.rule is Rule.STDP for l in net.layers)
    if needs_material:
        tape, states = _forward_materialized(net, input_seq, soft, coding, clamp,
                                             init_states)
        if return_states:
            return tape, states
        return tape
    return _forward_factored(net, input_seq, soft, coding, clamp)
