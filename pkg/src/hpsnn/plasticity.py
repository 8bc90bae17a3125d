"""Local learning rules pluggable into the plasticity trace.

Three rules: a Hebbian variant gated by the previous membrane potential, a
spike-timing rule built on exponentially decaying pre/post traces, and a
label-clamped Hebbian matrix used for few-shot classification (class means
of L2-normalized features mixed with the globally trained current).

All functions are pure over the passed state; callers own the arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import MetaParams, SimConstants, _rho_of
from .errors import DegenerateInputError, DimensionError

__all__ = [
    "StdpParams",
    "LabelHebbState",
    "hebbian_update",
    "clamp_update",
    "stdp_traces",
    "stdp_update",
    "label_hebbian_accumulate",
    "mixed_output",
]


@dataclass
class StdpParams:
    """Spike-timing rule constants; the amplitudes are meta-learnable."""

    tau_s: float = 20.0
    A_pre: float = 0.1
    A_post: float = 0.1

    def __post_init__(self):
        if not self.tau_s > 0:
            raise ValueError(f"tau_s must be > 0, got {self.tau_s}")

    def trace_decay(self, c: SimConstants) -> float:
        return math.exp(-c.dt / self.tau_s)


def _check_outer_shapes(P, pre, post_like):
    P = np.asarray(P, dtype=np.float64)
    pre = np.asarray(pre, dtype=np.float64)
    if P.shape[-1] != pre.shape[-1]:
        raise DimensionError(
            f"trace has {P.shape[-1]} presynaptic columns, input has {pre.shape[-1]}")
    if post_like is not None:
        post_like = np.asarray(post_like, dtype=np.float64)
        if P.shape[-2] != post_like.shape[-1]:
            raise DimensionError(
                f"trace has {P.shape[-2]} rows, post vector has {post_like.shape[-1]}")
    return P, pre, post_like


def hebbian_update(P, pre, u_prev, m: MetaParams, c: SimConstants):
    """One step of the Hebbian trace: decay plus gated outer product.

    P' = P * exp(-dt/tau_w) + outer(rho(u_prev) + beta, eta * pre). The
    post-term is evaluated at the previous step's membrane potential.
    """
    P, pre, u_prev = _check_outer_shapes(P, pre, u_prev)
    post_term = _rho_of(u_prev, m, c) + m.beta
    return P * c.trace_decay + post_term[..., :, None] * (m.eta * pre)[..., None, :]


def clamp_update(P, pre, clamp, m: MetaParams, c: SimConstants):
    """Label-clamped Hebbian step: the one-hot target replaces the post-term.

    Used while support samples are presented so the trace stores
    label-to-feature associations directly.
    """
    P, pre, clamp = _check_outer_shapes(P, pre, clamp)
    return P * c.trace_decay + clamp[..., :, None] * (m.eta * pre)[..., None, :]


def stdp_traces(x_pre, x_post, pre_spikes, post_spikes, sp: StdpParams,
                c: SimConstants):
    """Advance the pre/post spike-history traces by one step.

    x' = x * exp(-dt/tau_s) + spikes. The post trace accumulates the
    previous step's output spikes (the current step's are not defined until
    the membrane update that consumes this trace has run).
    """
    x_pre = np.asarray(x_pre, dtype=np.float64)
    x_post = np.asarray(x_post, dtype=np.float64)
    pre_spikes = np.asarray(pre_spikes, dtype=np.float64)
    post_spikes = np.asarray(post_spikes, dtype=np.float64)
    if x_pre.shape != pre_spikes.shape:
        raise DimensionError("pre trace and pre spikes differ in shape")
    if x_post.shape != post_spikes.shape:
        raise DimensionError("post trace and post spikes differ in shape")
    ds = sp.trace_decay(c)
    return x_pre * ds + pre_spikes, x_post * ds + post_spikes


def stdp_update(P, x_pre, x_post, sp: StdpParams, c: SimConstants):
    """Trace-difference plasticity step, applied every timestep.

    P' = P * exp(-dt/tau_w) + A_pre * x_pre_j - A_post * x_post_i, with the
    pre trace broadcast across rows and the post trace across columns.
    """
    P, x_pre, x_post = _check_outer_shapes(P, x_pre, x_post)
    inc = sp.A_pre * x_pre[..., None, :] - sp.A_post * x_post[..., :, None]
    return P * c.trace_decay + inc


@dataclass
class LabelHebbState:
    """Accumulated label-feature associations for few-shot readout.

    ``w_lp`` rows converge to the mean of the L2-normalized features seen
    per class; ``lambda1`` mixes the globally trained current with the
    association readout. ``keep_samples`` retains raw features for the
    exact-recompute audit mode.
    """

    w_lp: np.ndarray
    counts: np.ndarray
    lambda1: float = 0.1
    frozen: bool = False
    keep_samples: bool = False
    _samples: list = field(default_factory=list)

    @staticmethod
    def zeros(n_classes: int, n_features: int, lambda1: float = 0.1,
              keep_samples: bool = False) -> "LabelHebbState":
        return LabelHebbState(w_lp=np.zeros((n_classes, n_features)),
                              counts=np.zeros(n_classes, dtype=np.int64),
                              lambda1=lambda1, keep_samples=keep_samples)


def label_hebbian_accumulate(state: LabelHebbState, feature, label) -> LabelHebbState:
    """Fold one labelled feature into the class-mean association matrix.

    The write uses rate 1/(N_k * ||feature||) with N_k the class count after
    insertion, rescaling the previous row by (N_k - 1)/N_k, so each row is
    exactly the running mean of normalized class features. A frozen state
    passes through unchanged (per-phase gating).
    """
    if state.frozen:
        return state
    feature = np.asarray(feature, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if feature.ndim != 1 or label.ndim != 1:
        raise DimensionError("feature and label must be vectors")
    if label.shape[0] != state.w_lp.shape[0]:
        raise DimensionError("label length does not match class count")
    if feature.shape[0] != state.w_lp.shape[1]:
        raise DimensionError("feature length does not match stored width")
    k = int(np.argmax(label))
    if label[k] != 1.0 or label.sum() != 1.0:
        raise DegenerateInputError("label must be one-hot")
    norm = float(np.linalg.norm(feature))
    if norm == 0.0:
        raise DegenerateInputError("zero-norm feature cannot be stored")

    w_lp = state.w_lp.copy()
    counts = state.counts.copy()
    counts[k] += 1
    n = counts[k]
    w_lp[k] = w_lp[k] * ((n - 1) / n) + feature / (n * norm)
    new = LabelHebbState(w_lp=w_lp, counts=counts, lambda1=state.lambda1,
                         frozen=state.frozen, keep_samples=state.keep_samples,
                         _samples=list(state._samples))
    if state.keep_samples:
        new._samples.append((k, feature.copy()))
    return new


def recompute_label_hebbian(state: LabelHebbState) -> np.ndarray:
    """Exact recompute of w_lp from the kept raw samples (audit mode)."""
    if not state.keep_samples:
        raise ValueError("state was not built with keep_samples=True")
    w = np.zeros_like(state.w_lp)
    counts = np.zeros(state.w_lp.shape[0], dtype=np.int64)
    for k, feat in state._samples:
        w[k] += feat / np.linalg.norm(feat)
        counts[k] += 1
    nz = counts > 0
    w[nz] /= counts[nz, None]
    return w


def mixed_output(i_gp, state: LabelHebbState, query):
    """Output potential mixing the trained current with the association readout.

    u = lambda1 * i_gp + (1 - lambda1) * (w_lp @ query).
    """
    i_gp = np.asarray(i_gp, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if query.shape[-1] != state.w_lp.shape[1]:
        raise DimensionError("query length does not match stored width")
    if i_gp.shape[-1] != state.w_lp.shape[0]:
        raise DimensionError("i_gp length does not match class count")
    i_lp = query @ state.w_lp.T
    return state.lambda1 * i_gp + (1.0 - state.lambda1) * i_lp
