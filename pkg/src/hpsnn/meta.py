"""Bi-level optimization: one-step weight lookahead inside, meta-parameter
updates outside, alternating with ordinary weight training.

The lookahead builds w' = w - xi * grad_w(train loss) without touching the
network; the meta step evaluates the validation loss at (w', theta) and
updates theta only, treating w' as a constant with respect to theta
(first-order approximation). Weight and meta phases use separate Adam
states and never write each other's parameters (asserted via checksums).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import coding as coding_mod
from .core import Network, forward
from .grad import (GradBundle, OptimizerState, adam_step, assign_params, bptt,
                   meta_grads, meta_params, weight_grads, weight_params)

__all__ = [
    "SpikeTask",
    "TaskBatch",
    "TrainLoopConfig",
    "LogRow",
    "inner_lookahead",
    "meta_step",
    "alternating_train",
]


@dataclass
class SpikeTask:
    """One episode: encoded train and validation splits."""

    train_inputs: np.ndarray
    train_targets: np.ndarray
    val_inputs: np.ndarray
    val_targets: np.ndarray
    task_id: int = 0


@dataclass
class TaskBatch:
    tasks: list[SpikeTask]
    xi: float = 0.05

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("task batch must be nonempty")
        for t in self.tasks:
            if t.train_inputs.shape[1] == 0 or t.val_inputs.shape[1] == 0:
                raise ValueError("tasks need nonempty train and validation splits")


def _loss_and_douts(net, tape, targets, coding):
    if coding == "rank":
        loss, du, ds = coding_mod.rank_loss(tape, targets, net.c.v_th)
    else:
        loss, du, ds = coding_mod.rate_loss(tape, targets)
    return loss, du, ds


def _checksums(arrays):
    return tuple(zlib.crc32(np.ascontiguousarray(a).tobytes()) for a in arrays)


def _theta_arrays(net):
    out = []
    for l in net.layers:
        out += [l.meta.alpha, l.meta.eta, l.meta.beta]
    return out


def eval_loss_and_grads(net: Network, inputs, targets, coding="rate",
                        mask=None):
    """Forward + backward on one batch; returns (loss, accuracy, GradBundle)."""
    tape = forward(net, inputs, coding=coding)
    loss, du, ds = _loss_and_douts(net, tape, targets, coding)
    bundle = bptt(net, tape, d_out_u=du, d_out_s=ds)
    if mask is not None:
        for i, m in enumerate(mask):
            if m is not None:
                bundle.dw[i] *= m
    if coding == "rank":
        rec = tape.output_record()
        batch = np.arange(rec.u.shape[1])
        u_stop = rec.u[np.asarray(rec.stop_step) - 1, batch]
        pred = np.argmax(u_stop, axis=-1)
    else:
        pred = np.argmax(coding_mod.rate_scores(tape.output_record()), axis=-1)
    acc = float(np.mean(pred == np.argmax(targets, axis=-1)))
    return loss, acc, bundle


def inner_lookahead(net: Network, train_inputs, train_targets, xi: float,
                    coding: str = "rate") -> list[np.ndarray]:
    """One-step lookahead weights w - xi * grad_w(train loss).

    The network is left untouched; gp_mask (if any) restricts the step.
    Meta-parameters are read but never written.
    """
    if not xi > 0:
        raise ValueError(f"xi must be > 0, got {xi}")
    theta_before = _checksums(_theta_arrays(net))
    tape = forward(net, train_inputs, coding=coding)
    loss, du, ds = _loss_and_douts(net, tape, train_targets, coding)
    bundle = bptt(net, tape, d_out_u=du, d_out_s=ds)
    lookahead = []
    for l, dw in zip(net.layers, bundle.dw):
        step = dw if l.params.gp_mask is None else dw * l.params.gp_mask
        lookahead.append(l.params.w - xi * step)
    assert _checksums(_theta_arrays(net)) == theta_before, \
        "inner_lookahead must not modify meta-parameters"
    return lookahead


def meta_step(net: Network, batch: TaskBatch, opt: OptimizerState,
              coding: str = "rate") -> float:
    """One meta update of theta over a task batch; returns the mean val loss.

    Per task: lookahead weights from its train split, validation loss and
    theta-gradient at (w', theta), accumulated in task order (deterministic
    reduction), then a single Adam step on theta. Weights are untouched.
    """
    w_before = _checksums(net.weights())
    total = GradBundle.zeros_like(net)
    losses = []
    for task in batch.tasks:
        w_prime = inner_lookahead(net, task.train_inputs, task.train_targets,
                                  batch.xi, coding=coding)
        shadow = net.with_weights(w_prime)
        tape = forward(shadow, task.val_inputs, coding=coding)
        loss, du, ds = _loss_and_douts(shadow, tape, task.val_targets, coding)
        total.add_(bptt(shadow, tape, d_out_u=du, d_out_s=ds))
        losses.append(loss)
    params = meta_params(net)
    grads = meta_grads(total, net)
    new_params, _ = adam_step(params, grads, opt)
    assign_params(net, new_params)
    assert _checksums(net.weights()) == w_before, \
        "meta_step must not modify weights"
    return float(np.mean(losses))


@dataclass
class TrainLoopConfig:
    iterations: int
    lr: float = 1e-3
    meta_lr: float = 1e-3
    xi: float = 0.05
    meta_every: int = 10     # 0 disables meta updates
    task_batch: int = 5
    coding: str = "rate"


@dataclass
class LogRow:
    iteration: int
    phase: str
    task_id: int
    loss: float
    accuracy: float
    alpha_norm: float
    eta_norm: float
    beta_norm: float
    beta_min: float
    beta_max: float


def _theta_stats(net):
    alpha = np.concatenate([l.meta.alpha for l in net.layers])
    eta = np.concatenate([l.meta.eta for l in net.layers])
    beta = np.concatenate([l.meta.beta for l in net.layers])
    return (float(np.linalg.norm(alpha)), float(np.linalg.norm(eta)),
            float(np.linalg.norm(beta)), float(beta.min()), float(beta.max()))


def alternating_train(net: Network, task_source, cfg: TrainLoopConfig,
                      w_opt: OptimizerState | None = None,
                      theta_opt: OptimizerState | None = None) -> list[LogRow]:
    """Alternate weight batches with meta batches until the budget runs out.

    ``task_source`` provides ``train_batch(i) -> (inputs, targets, task_id)``
    and, when meta updates are enabled, ``meta_task_batch(i, n) -> TaskBatch``.
    Weight updates honor gp_mask; the two phases share nothing but the net.
    """
    if w_opt is None:
        w_opt = OptimizerState.for_params(weight_params(net), lr=cfg.lr)
    if theta_opt is None:
        theta_opt = OptimizerState.for_params(meta_params(net), lr=cfg.meta_lr)
    log: list[LogRow] = []
    for it in range(cfg.iterations):
        inputs, targets, task_id = task_source.train_batch(it)
        loss, acc, bundle = eval_loss_and_grads(net, inputs, targets,
                                                coding=cfg.coding)
        params = weight_params(net)
        grads = weight_grads(bundle)
        for i, l in enumerate(net.layers):
            if l.params.gp_mask is not None:
                grads[f"w{i}"] = grads[f"w{i}"] * l.params.gp_mask
        new_params, _ = adam_step(params, grads, w_opt)
        assign_params(net, new_params)
        log.append(LogRow(it, "train", task_id, loss, acc, *_theta_stats(net)))

        if cfg.meta_every and (it + 1) % cfg.meta_every == 0:
            batch = task_source.meta_task_batch(it, cfg.task_batch)
            if batch is not None:
                batch.xi = cfg.xi
                mloss = meta_step(net, batch, theta_opt, coding=cfg.coding)
                log.append(LogRow(it, "meta", -1, mloss, float("nan"),
                                  *_theta_stats(net)))
    return log
