"""Output decoding: rate counts, first-spike rank order, and the
rank-penalty / synaptic-decay equivalence.

Rank-order inference is event driven: the rollout stops at the first step
where any output neuron fires and the winner is that neuron (lowest index
on simultaneous firsts). When nothing fires within T the decision falls
back to the final membrane potentials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Network, OutputRecord, Tape, forward
from .errors import DataError, DimensionError
from .grad import mse_loss

__all__ = [
    "DecodeResult",
    "decode_rate",
    "infer_rank",
    "rank_to_tau",
    "rank_equivalence_check",
    "rate_loss",
    "rank_loss",
]

# Rank-mode training representation: membrane scaled by the threshold and
# clamped to this bounded range (the coding scheme's q function).
_RANK_Q_MAX = 2.0


@dataclass
class DecodeResult:
    """Decoded classification outcome for one sample."""

    scores: np.ndarray
    predicted: int
    latency: int
    mode: str


def decode_rate(record: OutputRecord, c) -> DecodeResult:
    """Average spike count per output neuron over the full window."""
    s = np.asarray(record.s, dtype=np.float64)
    if s.size == 0 or s.shape[0] == 0:
        raise DataError("empty output record")
    if s.ndim != 2:
        raise DimensionError("decode_rate expects a single sample [T, n_out]")
    scores = s.mean(axis=0)
    return DecodeResult(scores=scores, predicted=int(np.argmax(scores)),
                        latency=s.shape[0], mode="rate")


def rate_scores(record: OutputRecord) -> np.ndarray:
    """Batched rate scores [.., n_out] = mean spikes over steps."""
    return np.asarray(record.s, dtype=np.float64).mean(axis=0)


def infer_rank(net: Network, input_seq) -> DecodeResult:
    """Event-driven early-exit inference for one sample.

    Runs its own private rollout; stops at the first step where any output
    neuron fires and predicts the winner = argmax of the stop-step scores
    (the scaled membrane), which is always one of the neurons that fired
    there; exact score ties break toward the lowest index. Falls back to
    argmax of the final membrane with latency T when nothing fires.
    """
    input_seq = np.asarray(input_seq, dtype=np.float64)
    if input_seq.ndim != 2:
        raise DimensionError("infer_rank expects a single sample [T, n_in]")
    tape = forward(net, input_seq, coding="rank")
    out = tape.layers[-1]
    stop = int(tape.stop_step)
    u_stop = out.u[stop - 1]
    scores = u_stop / net.c.v_th
    predicted = int(np.argmax(scores))
    return DecodeResult(scores=scores, predicted=predicted, latency=stop,
                        mode="rank")


def infer_rank_batch(net: Network, input_seq):
    """Vectorized rank inference: returns (predicted [B], latency [B]).

    Semantics per sample match infer_rank; the rollout runs until every
    sample has stopped (later steps of already-stopped samples are ignored).
    """
    tape = forward(net, input_seq, coding="rank")
    out = tape.layers[-1]
    stop = np.asarray(tape.stop_step)
    steps_idx = stop - 1
    batch = np.arange(out.u.shape[1])
    u_stop = out.u[steps_idx, batch]
    predicted = np.argmax(u_stop, axis=-1)
    return predicted, stop


def rank_to_tau(r: float) -> float:
    """Synaptic decay constant equivalent to rank penalty r, in units of dt."""
    if not 0.0 < r < 1.0:
        raise ValueError(f"rank penalty must be in (0, 1), got {r}")
    if r > 1.0 - 1e-12:
        raise ValueError(f"rank penalty {r} too close to 1 (decay overflows)")
    return 1.0 / (-math.log(r))


def rank_equivalence_check(weights, spike_raster, r: float):
    """Evaluate the input current under rank-penalty and decay weighting.

    ``spike_raster`` is a binary [window, pre] array with at most one spike
    per presynaptic neuron (the theorem's precondition; violations raise).
    Returns (I_rank, I_decay, max_abs_diff) where
        I_rank_i  = sum_j r^order(j) * w_ij          over spiking j
        I_decay_i = sum_j exp(-order(j)/tau) * w_ij  with tau = rank_to_tau(r)
    and order(j) is the spike's step offset from the window start.
    """
    weights = np.asarray(weights, dtype=np.float64)
    raster = np.asarray(spike_raster, dtype=np.float64)
    if weights.ndim == 1:
        weights = weights[None, :]
    if raster.ndim != 2 or raster.shape[1] != weights.shape[1]:
        raise DimensionError("raster must be [window, pre] matching weights")
    counts = raster.sum(axis=0)
    if (counts > 1).any():
        raise DataError("a presynaptic neuron fired more than once in the window")
    tau = rank_to_tau(r)
    spiked = counts == 1.0
    order = np.argmax(raster, axis=0).astype(np.float64)
    rank_w = np.where(spiked, r ** order, 0.0)
    decay_w = np.where(spiked, np.exp(-order / tau), 0.0)
    i_rank = weights @ rank_w
    i_decay = weights @ decay_w
    return i_rank, i_decay, float(np.max(np.abs(i_rank - i_decay)))


# ---------------------------------------------------------------------------
# Training losses per coding scheme: produce the per-step output adjoints
# consumed by bptt.


def rate_loss(tape: Tape, target):
    """MSE between rate scores and one-hot targets.

    Returns (loss, d_out_u, d_out_s); the spike record carries all of the
    gradient (score = mean of spikes).
    """
    record = tape.output_record()
    scores = rate_scores(record)
    loss, dscores = mse_loss(scores, target)
    steps = record.s.shape[0]
    d_out_s = np.repeat(dscores[None] / steps, steps, axis=0)
    return loss, None, d_out_s


def rank_loss(tape: Tape, target, v_th: float):
    """MSE between the stop-step bounded membrane readout and the target.

    q(u) = clip(u / v_th, 0, q_max); only the stop step of each sample
    carries gradient.
    """
    record = tape.output_record()
    if record.stop_step is None:
        raise DataError("rank_loss needs a rank-mode tape")
    u = np.asarray(record.u)
    steps = u.shape[0]
    stop = np.asarray(record.stop_step)
    if u.ndim == 2:  # single sample
        u_stop = u[int(stop) - 1]
        q = np.clip(u_stop / v_th, 0.0, _RANK_Q_MAX)
        loss, dq = mse_loss(q, target)
        inside = (u_stop / v_th > 0.0) & (u_stop / v_th < _RANK_Q_MAX)
        d_out_u = np.zeros_like(u)
        d_out_u[int(stop) - 1] = dq * inside / v_th
        return loss, d_out_u, None
    batch = np.arange(u.shape[1])
    u_stop = u[stop - 1, batch]
    q = np.clip(u_stop / v_th, 0.0, _RANK_Q_MAX)
    loss, dq = mse_loss(q, target)
    inside = (u_stop / v_th > 0.0) & (u_stop / v_th < _RANK_Q_MAX)
    d_out_u = np.zeros_like(u)
    d_out_u[stop - 1, batch] = dq * inside / v_th
    return loss, d_out_u, None
