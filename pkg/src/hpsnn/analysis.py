"""Effectiveness-analysis quantities: the implicit bilinear energy of the
recorded activity, its change under one Hebbian increment, the augmented
readout of a label-association matrix, and hidden-representation distances
between clean and corrupted inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import Network, Rho, Tape, forward, heaviside
from .errors import DimensionError

__all__ = [
    "EnergyReport",
    "energy_in",
    "energy_delta_under_hebb",
    "augmented_info",
    "hidden_distance",
    "export_embeddings",
]


@dataclass
class EnergyReport:
    """Per-layer, per-step bilinear energy terms and their total."""

    terms: np.ndarray  # [layers, steps]
    total: float


def _effective_weights(tape: Tape, net: Network, li: int, P_all=None):
    """Instantaneous weights w*g_m + alpha (.) P(m) per step for one layer."""
    layer = net.layers[li]
    steps = tape.steps
    w = layer.params.w
    out = np.empty((steps,) + tape.batch_shape + w.shape)
    if layer.plastic:
        P_all = tape.plasticity_matrices(net, li) if P_all is None else P_all
    for m in range(steps):
        eff = w * tape.g[m]
        if layer.plastic:
            eff = eff + layer.meta.alpha[:, None] * P_all[m]
        out[m] = eff
    return out


def energy_in(tape: Tape, net: Network, effective: bool = True) -> EnergyReport:
    """Bilinear energy -sum_t sum_l x(t) . W^l(t) . s(t) of the rollout.

    ``effective=True`` uses the instantaneous weights including the trace
    part; False is the GP-only ablation. Batched tapes are summed over the
    batch as well.
    """
    L = len(net.layers)
    terms = np.zeros((L, tape.steps))
    for li in range(L):
        lt = tape.layers[li]
        layer = net.layers[li]
        if effective and layer.plastic:
            eff = _effective_weights(tape, net, li)
            for m in range(tape.steps):
                cur = np.matmul(eff[m], lt.x[m][..., None])[..., 0]
                terms[li, m] = -float((lt.s[m] * cur).sum())
        else:
            for m in range(tape.steps):
                cur = lt.x[m] @ (layer.params.w * tape.g[m]).T
                terms[li, m] = -float((lt.s[m] * cur).sum())
    return EnergyReport(terms=terms, total=float(terms.sum()))


def energy_delta_under_hebb(tape: Tape, net: Network) -> float:
    """Energy change from one Hebbian weight increment, activity held fixed.

    The increment accumulated over the recorded window is
    dW_ij = sum_t eta_j x_j(t) H(u_i(t) - v_th); with rho = Heaviside,
    beta = 0 and eta >= 0 the change -sum_t s(t) . dW . x(t) is never
    positive. Preconditions are enforced.
    """
    total = 0.0
    c = net.c
    for li, layer in enumerate(net.layers):
        if not layer.plastic:
            continue
        meta = layer.meta
        if meta.rho is not Rho.HEAVISIDE:
            raise ValueError("energy argument requires rho = HEAVISIDE")
        if np.any(meta.beta != 0.0):
            raise ValueError("energy argument requires beta = 0")
        if np.any(meta.eta < 0.0):
            raise ValueError("energy argument requires eta >= 0")
        lt = tape.layers[li]
        dW = None
        for m in range(tape.steps):
            post = heaviside(lt.u[m], c.v_th)
            inc_cur = post[..., :, None] * (meta.eta * lt.x[m])[..., None, :]
            dW = inc_cur if dW is None else dW + inc_cur
        for m in range(tape.steps):
            cur = np.matmul(dW, lt.x[m][..., None])[..., 0]
            total += -float((lt.s[m] * cur).sum())
    return total


def augmented_info(w_lp, query, true_class: int | None = None):
    """Association readout w_lp @ query with a per-class decomposition.

    Returns (values, within, cross): ``values`` is the full readout vector,
    ``within`` the contribution of the true class (nan when not given) and
    ``cross`` the summed contribution of the others.
    """
    w_lp = np.asarray(w_lp, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if w_lp.ndim != 2 or query.shape[-1] != w_lp.shape[1]:
        raise DimensionError("w_lp must be [classes, features] matching query")
    values = w_lp @ query
    if true_class is None:
        return values, float("nan"), float(values.sum())
    within = float(values[true_class])
    cross = float(values.sum() - values[true_class])
    return values, within, cross


def hidden_distance(net: Network, clean_seqs, corrupted_seqs):
    """Distance between first-hidden-layer membranes at the last step.

    Inputs are encoded sequences [T, B, n_in] for paired clean/corrupted
    samples. Returns (mean_euclidean, mean_cosine_similarity,
    excluded_count); pairs with a zero-norm representation are excluded
    from the cosine mean and counted.
    """
    clean_seqs = np.asarray(clean_seqs, dtype=np.float64)
    corrupted_seqs = np.asarray(corrupted_seqs, dtype=np.float64)
    if clean_seqs.shape != corrupted_seqs.shape:
        raise DimensionError("clean and corrupted batches must align")
    t_clean = forward(net, clean_seqs)
    t_corr = forward(net, corrupted_seqs)
    h_clean = t_clean.layers[0].u[-1]
    h_corr = t_corr.layers[0].u[-1]
    if h_clean.ndim == 1:
        h_clean = h_clean[None]
        h_corr = h_corr[None]
    diff = h_clean - h_corr
    euclid = float(np.mean(np.linalg.norm(diff, axis=-1)))
    n_clean = np.linalg.norm(h_clean, axis=-1)
    n_corr = np.linalg.norm(h_corr, axis=-1)
    ok = (n_clean > 0) & (n_corr > 0)
    excluded = int((~ok).sum())
    if ok.any():
        cos = np.sum(h_clean[ok] * h_corr[ok], axis=-1) / (n_clean[ok] * n_corr[ok])
        cosine = float(np.mean(cos))
    else:
        cosine = float("nan")
    return euclid, cosine, excluded


def export_embeddings(net: Network, seqs, labels, path) -> int:
    """Write first-hidden-layer firing rates as CSV rows; returns row count.

    Columns: sample_id, label, rate_1..rate_H with rates averaged over the
    window (the raw material for downstream 2-D embedding plots).
    """
    n_hidden = net.layers[0].post
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "label"]
                        + [f"rate_{i + 1}" for i in range(n_hidden)])
        count = 0
        if len(labels):
            tape = forward(net, seqs)
            rates = tape.layers[0].s.mean(axis=0)
            if rates.ndim == 1:
                rates = rates[None]
            for i, (label, row) in enumerate(zip(labels, rates)):
                writer.writerow([i, int(label)] + [repr(float(r)) for r in row])
                count += 1
    return count
