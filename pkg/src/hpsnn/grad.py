"""Reverse-mode differentiation of the unrolled spiking recurrence.

``bptt`` is the exact adjoint of the forward graph recorded on a Tape:
the membrane recurrence, the plasticity-trace recurrence (including the
sensitivities of alpha, eta, beta and the STDP amplitudes), and the
decayed weight term. Spike nonlinearities use a rectangle surrogate of
width ``a`` and height 1/a in spike mode; in soft mode every nonlinearity
is a sigmoid and the adjoint is exact, including the reset-gate path that
spike mode treats as constant.

``fd_gradient`` is the central-difference oracle used to verify ``bptt``
in soft mode. ``adam_step`` is the bias-corrected adaptive-moment update.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .core import (Layer, MetaParams, Network, Rho, Rule, SimConstants, Tape,
                   forward, sigmoid)
from .errors import DimensionError, NumericError

__all__ = [
    "GradBundle",
    "OptimizerState",
    "surrogate_deriv",
    "bptt",
    "fd_gradient",
    "adam_step",
    "mse_loss",
]


def surrogate_deriv(u, c: SimConstants):
    """Rectangle surrogate for the spike derivative.

    1/a on the closed window |u - v_th| <= a/2, zero outside; unit integral.
    """
    u = np.asarray(u, dtype=np.float64)
    return (np.abs(u - c.v_th) <= c.a / 2.0) / c.a


def _spike_deriv(u, s, c: SimConstants, soft: bool):
    if soft:
        return s * (1.0 - s) / c.a
    return surrogate_deriv(u, c)


def _rho_deriv(u, meta: MetaParams, c: SimConstants):
    if meta.rho is Rho.HEAVISIDE:
        return surrogate_deriv(u, c)
    sg = sigmoid((np.asarray(u) - c.v_th) / c.a)
    return sg * (1.0 - sg) / c.a


def _sum_batch(arr, batch_ndim: int):
    if batch_ndim == 0:
        return arr
    return arr.sum(axis=tuple(range(batch_ndim)))


def _outer_acc(cbar, x, batch_ndim: int):
    """Sum over the batch of outer(cbar, x); GEMM when batched."""
    if batch_ndim == 0:
        return np.outer(cbar, x)
    cb = cbar.reshape(-1, cbar.shape[-1])
    xb = x.reshape(-1, x.shape[-1])
    return cb.T @ xb


@dataclass
class GradBundle:
    """Gradients mirroring the network's parameters.

    dw entries under an inactive gp_mask are zeroed. The STDP amplitude
    gradients are populated only for layers running that rule.
    """

    dw: list[np.ndarray]
    dalpha: list[np.ndarray]
    deta: list[np.ndarray]
    dbeta: list[np.ndarray]
    dA_pre: list[float | None] = field(default_factory=list)
    dA_post: list[float | None] = field(default_factory=list)
    dlambda1: float | None = None

    @staticmethod
    def zeros_like(net: Network) -> "GradBundle":
        return GradBundle(
            dw=[np.zeros_like(l.params.w) for l in net.layers],
            dalpha=[np.zeros_like(l.meta.alpha) for l in net.layers],
            deta=[np.zeros_like(l.meta.eta) for l in net.layers],
            dbeta=[np.zeros_like(l.meta.beta) for l in net.layers],
            dA_pre=[0.0 if l.plastic and l.meta.rule is Rule.STDP else None
                    for l in net.layers],
            dA_post=[0.0 if l.plastic and l.meta.rule is Rule.STDP else None
                     for l in net.layers])

    def add_(self, other: "GradBundle") -> "GradBundle":
        for i in range(len(self.dw)):
            self.dw[i] += other.dw[i]
            self.dalpha[i] += other.dalpha[i]
            self.deta[i] += other.deta[i]
            self.dbeta[i] += other.dbeta[i]
            if self.dA_pre[i] is not None:
                self.dA_pre[i] += other.dA_pre[i]
                self.dA_post[i] += other.dA_post[i]
        if self.dlambda1 is not None and other.dlambda1 is not None:
            self.dlambda1 += other.dlambda1
        return self

    def scale_(self, c: float) -> "GradBundle":
        for i in range(len(self.dw)):
            self.dw[i] *= c
            self.dalpha[i] *= c
            self.deta[i] *= c
            self.dbeta[i] *= c
            if self.dA_pre[i] is not None:
                self.dA_pre[i] *= c
                self.dA_post[i] *= c
        if self.dlambda1 is not None:
            self.dlambda1 *= c
        return self

    def check_finite(self):
        for i in range(len(self.dw)):
            ok = (np.isfinite(self.dw[i]).all() and np.isfinite(self.dalpha[i]).all()
                  and np.isfinite(self.deta[i]).all()
                  and np.isfinite(self.dbeta[i]).all())
            if not ok:
                raise NumericError(f"non-finite gradient in layer {i}")
        return self


def bptt(net: Network, tape: Tape, d_out_u=None, d_out_s=None,
         return_input_grad: bool = False):
    """Exact adjoint of the recorded rollout.

    ``d_out_u`` / ``d_out_s`` are loss gradients on the output layer's
    membrane record and spike record, shaped [steps, (batch,) n_out]; either
    may be omitted. Returns a GradBundle (plus the external-input adjoint
    when requested).
    """
    steps = tape.steps
    c = net.c
    d = c.trace_decay
    batch_ndim = len(tape.batch_shape)
    n_out = net.n_out
    soft = tape.soft

    def _prep(arr, name):
        if arr is None:
            return None
        arr = np.asarray(arr, dtype=np.float64)
        want = (steps,) + tape.batch_shape + (n_out,)
        if arr.shape != want:
            raise DimensionError(f"{name} must have shape {want}, got {arr.shape}")
        return arr

    d_out_u = _prep(d_out_u, "d_out_u")
    d_out_s = _prep(d_out_s, "d_out_s")

    for li, (layer, lt) in enumerate(zip(net.layers, tape.layers)):
        if lt.x.shape[0] != steps or lt.u.shape[-1] != layer.post:
            raise DimensionError(f"tape/parameter mismatch at layer {li}")

    out = GradBundle.zeros_like(net)
    L = len(net.layers)

    # Per-layer adjoint carries across steps.
    zeros_post = [np.zeros(tape.batch_shape + (l.post,)) for l in net.layers]
    ubar_carry = [z.copy() for z in zeros_post]
    sbar_carry = [z.copy() for z in zeros_post]
    pbar_carry = [None] * L     # STDP only (materialized)
    xpbar_carry = [None] * L
    xqbar_carry = [None] * L
    for li, layer in enumerate(net.layers):
        if layer.plastic and layer.meta.rule is Rule.STDP:
            pbar_carry[li] = np.zeros(tape.batch_shape + (layer.post, layer.pre))
            xpbar_carry[li] = np.zeros(tape.batch_shape + (layer.pre,))
            xqbar_carry[li] = np.zeros(tape.batch_shape + (layer.post,))

    # Hebbian layers need all cbar(m) before their trace contractions can be
    # folded, so the u/s adjoint sweep records cbar per step and the factored
    # trace pass runs afterwards. The rho backflow couples the trace adjoint
    # back into u(m-1), which makes the sweep iterative when alpha != 0:
    # u-adjoints at step m depend on trace adjoints at steps > m, which are
    # linear in cbar at steps > m, already final when we reach m. We therefore
    # interleave: process steps in reverse, and at each step fold the factored
    # contraction over the (already final) future cbar values.
    cbar_hist = [np.zeros((steps,) + tape.batch_shape + (l.post,))
                 for l in net.layers]
    post_terms = [None] * L
    ip_kern = [None] * L
    dpow = d ** np.arange(steps, dtype=np.float64)
    for li, layer in enumerate(net.layers):
        if not layer.plastic or layer.meta.rule is Rule.STDP:
            continue
        lt = tape.layers[li]
        if layer.meta.rule is Rule.LABEL_CLAMP and tape.clamp is not None:
            pt = np.broadcast_to(tape.clamp, (steps,) + tape.batch_shape
                                 + (layer.post,)).copy()
        else:
            u_prev = np.concatenate(
                [np.zeros((1,) + tape.batch_shape + (layer.post,)), lt.u[:-1]])
            pt = (np.asarray(_rho_core(u_prev, layer.meta, c)) + layer.meta.beta)
        post_terms[li] = pt
        XE = layer.meta.eta * lt.x
        ip_kern[li] = np.einsum("m...j,k...j->mk...", XE, lt.x)

    dinput = np.zeros(tape.layers[0].x.shape) if return_input_grad else None

    for m in range(steps, 0, -1):
        mi = m - 1
        xbar_above = None
        for li in range(L - 1, -1, -1):
            layer = net.layers[li]
            lt = tape.layers[li]
            meta = layer.meta
            g = tape.g[mi]

            sbar = sbar_carry[li]
            sbar_carry[li] = zeros_post[li].copy()
            if li == L - 1:
                if d_out_s is not None:
                    sbar = sbar + d_out_s[mi]
            if xbar_above is not None:
                sbar = sbar + xbar_above

            ubar = ubar_carry[li] + sbar * _spike_deriv(lt.u[mi], lt.s[mi], c, soft)
            if li == L - 1 and d_out_u is not None:
                ubar = ubar + d_out_u[mi]

            cbar = c.k_u * ubar
            cbar_hist[li][mi] = cbar
            out.dw[li] += g * _outer_acc(cbar, lt.x[mi], batch_ndim)

            want_xbar = li > 0 or return_input_grad
            xbar = g * (cbar @ layer.params.w) if want_xbar else None

            t_m = None
            if layer.plastic:
                out.dalpha[li] += _sum_batch(cbar * lt.p_current[mi], batch_ndim)
                if meta.rule is Rule.STDP:
                    A_cb = meta.alpha * cbar
                    pbar = pbar_carry[li] + A_cb[..., :, None] * lt.x[mi][..., None, :]
                    rs = pbar.sum(axis=-2)   # over post
                    cs = pbar.sum(axis=-1)   # over pre
                    out.dA_pre[li] += float((rs * lt.x_pre[mi]).sum())
                    out.dA_post[li] += float(-(cs * lt.x_post[mi]).sum())
                    ds = layer.stdp.trace_decay(c)
                    xpbar = layer.stdp.A_pre * rs + xpbar_carry[li]
                    xqbar = -layer.stdp.A_post * cs + xqbar_carry[li]
                    if want_xbar:
                        xbar = xbar + np.matmul(
                            (A_cb)[..., None, :],
                            tape.layers[li].P[mi])[..., 0, :] + xpbar
                    if m > 1:
                        sbar_carry[li] += xqbar
                    xpbar_carry[li] = ds * xpbar
                    xqbar_carry[li] = ds * xqbar
                    pbar_carry[li] = d * pbar
                else:
                    # Factored Hebbian/label-clamp contractions over step pairs.
                    A_fut = meta.alpha * cbar_hist[li][mi:]
                    dec_f = dpow[: steps - mi].reshape(
                        (steps - mi,) + (1,) * batch_ndim)
                    coef_t = ip_kern[li][mi, mi:] * dec_f
                    t_m = np.einsum("k...,k...i->...i", coef_t, A_fut)
                    if meta.rule is not Rule.LABEL_CLAMP:
                        out.dbeta[li] += _sum_batch(t_m, batch_ndim)
                    sc_q = np.einsum("k...i,...i->k...", A_fut, post_terms[li][mi])
                    qx = np.einsum("k...,k...j->...j", sc_q * dec_f,
                                   lt.x[mi:])
                    out.deta[li] += _sum_batch(lt.x[mi] * qx, batch_ndim)
                    if want_xbar:
                        xbar = xbar + meta.eta * qx
                        A_m = meta.alpha * cbar
                        sc_p = np.einsum("k...i,...i->k...", post_terms[li][: mi + 1],
                                         A_m)
                        dec_p = dpow[mi::-1].reshape((mi + 1,) + (1,) * batch_ndim)
                        pcx = np.einsum("k...,k...j->...j", sc_p * dec_p,
                                        meta.eta * lt.x[: mi + 1])
                        xbar = xbar + pcx

            # Carries into step m-1.
            if m > 1:
                s_prev = lt.s[mi - 1]
                u_prev = lt.u[mi - 1]
                ubar_carry[li] = (1.0 - s_prev) * (1.0 - c.k_u) * ubar
                if t_m is not None and meta.rule is Rule.HEBBIAN:
                    ubar_carry[li] = ubar_carry[li] + _rho_deriv(u_prev, meta, c) * t_m
                if soft:
                    sbar_carry[li] += -(1.0 - c.k_u) * u_prev * ubar
            else:
                ubar_carry[li] = zeros_post[li].copy()

            xbar_above = xbar if li > 0 else None
            if li == 0 and return_input_grad:
                dinput[mi] = xbar

    for li, layer in enumerate(net.layers):
        if layer.params.gp_mask is not None:
            out.dw[li] *= layer.params.gp_mask

    out.check_finite()
    if return_input_grad:
        return out, dinput
    return out


def _rho_core(u, meta, c):
    from .core import _rho_of
    return _rho_of(u, meta, c)


def mse_loss(pred, target):
    """Mean-squared error over all entries; returns (loss, dloss/dpred)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# Parameter flattening helpers shared by the optimizer and the FD oracle.


def weight_params(net: Network) -> dict[str, np.ndarray]:
    return {f"w{i}": l.params.w for i, l in enumerate(net.layers)}


def meta_params(net: Network) -> dict[str, np.ndarray]:
    out = {}
    for i, l in enumerate(net.layers):
        if not l.plastic:
            continue
        out[f"alpha{i}"] = l.meta.alpha
        out[f"eta{i}"] = l.meta.eta
        out[f"beta{i}"] = l.meta.beta
        if l.meta.rule is Rule.STDP:
            out[f"A_pre{i}"] = np.asarray(l.stdp.A_pre, dtype=np.float64)
            out[f"A_post{i}"] = np.asarray(l.stdp.A_post, dtype=np.float64)
    return out


def weight_grads(bundle: GradBundle) -> dict[str, np.ndarray]:
    return {f"w{i}": g for i, g in enumerate(bundle.dw)}


def meta_grads(bundle: GradBundle, net: Network) -> dict[str, np.ndarray]:
    out = {}
    for i, l in enumerate(net.layers):
        if not l.plastic:
            continue
        out[f"alpha{i}"] = bundle.dalpha[i]
        out[f"eta{i}"] = bundle.deta[i]
        out[f"beta{i}"] = bundle.dbeta[i]
        if l.meta.rule is Rule.STDP:
            out[f"A_pre{i}"] = np.asarray(bundle.dA_pre[i])
            out[f"A_post{i}"] = np.asarray(bundle.dA_post[i])
    return out


_PARAM_NAME = re.compile(r"^(w|alpha|eta|beta|A_pre|A_post)(\d+)$")


def assign_params(net: Network, values: dict[str, np.ndarray]):
    for name, val in values.items():
        m = _PARAM_NAME.match(name)
        if m is None:
            raise KeyError(name)
        kind, idx = m.group(1), int(m.group(2))
        layer = net.layers[idx]
        if kind == "w":
            layer.params.w = np.asarray(val, dtype=np.float64)
        elif kind == "alpha":
            layer.meta.alpha = np.asarray(val, dtype=np.float64)
        elif kind == "eta":
            layer.meta.eta = np.asarray(val, dtype=np.float64)
        elif kind == "beta":
            layer.meta.beta = np.asarray(val, dtype=np.float64)
        elif kind == "A_pre":
            layer.stdp.A_pre = float(val)
        else:
            layer.stdp.A_post = float(val)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    """First/second moment accumulators plus hyper-parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params: dict[str, np.ndarray], lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "OptimizerState":
        return OptimizerState(
            m={k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()},
            v={k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()},
            lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              st: OptimizerState):
    """One bias-corrected adaptive-moment update; returns (params, state).

    Entries with zero gradient (including gp_mask-zeroed weight entries)
    keep both their value and their moments untouched by construction.
    """
    t = st.t + 1
    new_params = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.shape} ({k})")
        st.m[k] = st.beta1 * st.m[k] + (1.0 - st.beta1) * g
        st.v[k] = st.beta2 * st.v[k] + (1.0 - st.beta2) * (g * g)
        mhat = st.m[k] / (1.0 - st.beta1 ** t)
        vhat = st.v[k] / (1.0 - st.beta2 ** t)
        new_params[k] = p - st.lr * mhat / (np.sqrt(vhat) + st.eps)
    st.t = t
    return new_params, st


# ---------------------------------------------------------------------------
# Finite differences


def fd_gradient(net: Network, input_seq, loss_fn, eps: float = 1e-5,
                coding: str = "rate", clamp=None, soft: bool = True) -> GradBundle:
    """Central-difference gradient of loss_fn(tape) per scalar parameter.

    Soft-spike mode is required (finite differences of a step function are
    meaningless); raises on eps <= 0.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")

    def evaluate():
        tape = forward(net, input_seq, coding=coding, soft=soft, clamp=clamp)
        return float(loss_fn(tape))

    out = GradBundle.zeros_like(net)

    def central(arr, grad_arr):
        flat = arr.reshape(-1)
        gflat = grad_arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = evaluate()
            flat[i] = orig - eps
            lo = evaluate()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)

    for li, layer in enumerate(net.layers):
        central(layer.params.w, out.dw[li])
        if layer.plastic:
            if layer.meta.rule is Rule.STDP:
                for attr, tgt in (("A_pre", "dA_pre"), ("A_post", "dA_post")):
                    orig = getattr(layer.stdp, attr)
                    setattr(layer.stdp, attr, orig + eps)
                    hi = evaluate()
                    setattr(layer.stdp, attr, orig - eps)
                    lo = evaluate()
                    setattr(layer.stdp, attr, orig)
                    getattr(out, tgt)[li] = (hi - lo) / (2.0 * eps)
            central(layer.meta.alpha, out.dalpha[li])
            central(layer.meta.eta, out.deta[li])
            central(layer.meta.beta, out.dbeta[li])
    for li, layer in enumerate(net.layers):
        if layer.params.gp_mask is not None:
            out.dw[li] *= layer.params.gp_mask
    return out


def max_rel_error(a: GradBundle, b: GradBundle) -> float:
    """max |a-b| / max(|a|, |b|, 1) over every parameter entry.

    The unit floor makes near-zero entries compare on an absolute scale,
    where pure relative error is below the FD noise floor anyway.
    """
    worst = 0.0

    def cmp(x, y):
        nonlocal worst
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), 1.0)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)) if x.size else 0.0)

    for i in range(len(a.dw)):
        cmp(a.dw[i], b.dw[i])
        cmp(a.dalpha[i], b.dalpha[i])
        cmp(a.deta[i], b.deta[i])
        cmp(a.dbeta[i], b.dbeta[i])
        if a.dA_pre[i] is not None and b.dA_pre[i] is not None:
            cmp(a.dA_pre[i], b.dA_pre[i])
            cmp(a.dA_post[i], b.dA_post[i])
    return worst
