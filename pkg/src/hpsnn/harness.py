"""Experiment harnesses behind the CLI: classification training with the
alternating bi-level loop, corruption sweeps, synthetic few-shot episodes,
shuffled-pixel continual learning, rank-coding statistics and the cost
model report.

Every harness draws from named child streams of the run seed, writes CSV
metrics plus a JSON manifest under the run's output directory, and leaves
eval encoding streams independent of training so reruns are byte-stable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis, chipcost, coding, data as data_mod, meta as meta_mod
from .checkpoint import load_network, save_network
from .config import RunConfig, config_text
from .core import Network, Rho, Rule, SimConstants, forward
from .errors import ConfigError, DataError
from .grad import (OptimizerState, adam_step, assign_params, bptt,
                   fd_gradient, max_rel_error, mse_loss, weight_params,
                   meta_params)
from .meta import TaskBatch, SpikeTask, TrainLoopConfig, alternating_train
from .plasticity import LabelHebbState, label_hebbian_accumulate, mixed_output

log = logging.getLogger(__name__)

__all__ = ["run_experiment"]


def seed_streams(seed: int, names: list[str]) -> dict[str, np.random.Generator]:
    """Named deterministic child streams of one run seed (fixed order)."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg: RunConfig, out_dir: Path, inputs: list[Path]):
    manifest = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "config": config_text(cfg),
        "inputs": {str(p): sha256_of(p) for p in sorted(inputs)},
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_csv(path, header: list[str], rows: list[list]):
    def render(v):
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([render(v) for v in row])


def save_curve(path, series: dict[str, list[float]], xlabel: str, ylabel: str):
    """Courtesy SVG line plot; the CSV next to it is the normative output."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in series.items():
        ax.plot(range(len(ys)), ys, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if series:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# Encoding and classification plumbing


def encode_batch(images_flat, T: int, encoding: str, rng) -> np.ndarray:
    """Encode [B, 784] pixel rows into [steps, B, n] inputs."""
    if encoding == "bernoulli":
        return data_mod.bernoulli_encode(images_flat, T, rng)
    if encoding == "analog":
        return np.repeat(images_flat[None], T, axis=0)
    if encoding == "rows":
        imgs = images_flat.reshape(-1, 28, 28)
        return data_mod.sequential_rows(imgs)
    raise ConfigError(f"unknown encoding {encoding!r}")


class ClassificationTaskSource:
    """Mini-batch and meta-episode provider over one labelled image pool.

    The pool splits into a train shard and a held-out meta-validation shard
    (val_fraction). Batch sampling, training encodes and meta encodes each
    use their own stream, so enabling or disabling meta updates does not
    shift the training batch sequence.
    """

    def __init__(self, images_flat, labels, n_classes, cfg_T, encoding,
                 batch, meta_batch, val_fraction, streams, permutation=None):
        self.x = images_flat
        self.y = labels
        self.n_classes = n_classes
        self.T = cfg_T
        self.encoding = encoding
        self.batch = batch
        self.meta_batch = meta_batch
        self.rng_batch = streams["batch"]
        self.rng_encode = streams["encode"]
        self.rng_meta = streams["meta"]
        n = len(labels)
        order = streams["split"].permutation(n)
        n_val = max(1, int(round(val_fraction * n))) if val_fraction > 0 else 0
        self.val_idx = order[:n_val]
        self.train_idx = order[n_val:]
        self.permutation = permutation

    def _encode(self, idx, rng):
        imgs = self.x[idx]
        if self.permutation is not None:
            imgs = imgs[:, self.permutation.perm]
        seq = encode_batch(imgs, self.T, self.encoding, rng)
        return seq, one_hot(self.y[idx], self.n_classes)

    def train_batch(self, it):
        idx = self.rng_batch.choice(self.train_idx, size=self.batch, replace=False)
        seq, targets = self._encode(idx, self.rng_encode)
        return seq, targets, 0

    def meta_task_batch(self, it, n_tasks):
        if self.val_idx.size == 0:
            return None
        tasks = []
        for t in range(n_tasks):
            tr = self.rng_meta.choice(self.train_idx, size=self.meta_batch,
                                      replace=False)
            va = self.rng_meta.choice(self.val_idx,
                                      size=min(self.meta_batch, self.val_idx.size),
                                      replace=False)
            tr_seq, tr_y = self._encode(tr, self.rng_meta)
            va_seq, va_y = self._encode(va, self.rng_meta)
            tasks.append(SpikeTask(tr_seq, tr_y, va_seq, va_y, task_id=t))
        return TaskBatch(tasks=tasks)


def evaluate_accuracy(net: Network, images_flat, labels, T, encoding, seed,
                      chunk=500, permutation=None) -> float:
    """Rate-decoded test accuracy with a dedicated encode stream."""
    rng = np.random.default_rng(seed)
    correct = 0
    for lo in range(0, len(labels), chunk):
        imgs = images_flat[lo:lo + chunk]
        if permutation is not None:
            imgs = imgs[:, permutation.perm]
        seq = encode_batch(imgs, T, encoding, rng)
        tape = forward(net, seq)
        scores = coding.rate_scores(tape.output_record())
        correct += int((np.argmax(scores, axis=-1) == labels[lo:lo + chunk]).sum())
    return correct / len(labels)


def evaluate_rank(net: Network, images_flat, labels, T, encoding, seed,
                  chunk=500):
    """Event-driven accuracy, mean latency and per-sample latencies."""
    rng = np.random.default_rng(seed)
    correct = 0
    latencies = []
    preds = []
    for lo in range(0, len(labels), chunk):
        seq = encode_batch(images_flat[lo:lo + chunk], T, encoding, rng)
        pred, lat = coding.infer_rank_batch(net, seq)
        correct += int((pred == labels[lo:lo + chunk]).sum())
        latencies.append(lat)
        preds.append(pred)
    lat = np.concatenate(latencies)
    return correct / len(labels), float(lat.mean()), lat, np.concatenate(preds)


def _flat_images(dataset, limit=0):
    imgs = dataset.images.reshape(len(dataset), -1)
    labels = dataset.labels
    if limit:
        imgs, labels = imgs[:limit], labels[:limit]
    return imgs, labels


def build_network(cfg: RunConfig, rng, plastic=None) -> Network:
    c = cfg.sim_constants()
    if plastic is None:
        plastic = cfg.plastic if cfg.plastic is not None else True
    net = Network.init(cfg.layers, c, rng, plastic=plastic,
                       in_is_analog=cfg.encoding in ("rows", "analog"),
                       alpha0=cfg.alpha0, eta0=cfg.eta0, beta0=cfg.beta0)
    if cfg.w_init_scale is not None:
        for layer, scale in zip(net.layers, cfg.w_init_scale):
            layer.params.w *= scale
    return net


# ---------------------------------------------------------------------------
# Experiments


def run_train(cfg: RunConfig, out_dir: Path) -> dict:
    train_set = data_mod.load_mnist(cfg.data_dir, "train")
    test_set = data_mod.load_mnist(cfg.data_dir, "test")
    tr_x, tr_y = _flat_images(train_set, cfg.limit_train)
    te_x, te_y = _flat_images(test_set, cfg.limit_test)
    if cfg.encoding == "rows" and cfg.T != 28:
        raise ConfigError("row encoding requires T = 28")

    streams = seed_streams(cfg.seed, ["init", "split", "batch", "encode",
                                      "meta", "eval"])
    eval_seed = int(streams["eval"].integers(2 ** 63))
    net = build_network(cfg, streams["init"])
    source = ClassificationTaskSource(
        tr_x, tr_y, train_set.n_classes, cfg.T, cfg.encoding, cfg.batch,
        cfg.meta_batch, cfg.val_fraction, streams)

    iters_per_epoch = max(1, len(source.train_idx) // cfg.batch)
    loop_cfg = TrainLoopConfig(iterations=iters_per_epoch, lr=cfg.lr,
                               meta_lr=cfg.meta_lr, xi=cfg.xi,
                               meta_every=cfg.meta_every,
                               task_batch=cfg.task_batch, coding=cfg.coding)
    w_opt = OptimizerState.for_params(weight_params(net), lr=cfg.lr)
    t_opt = OptimizerState.for_params(meta_params(net), lr=cfg.meta_lr)

    rows = []
    test_curve = []
    started = time.monotonic()
    for epoch in range(cfg.epochs):
        log_rows = alternating_train(net, source, loop_cfg, w_opt, t_opt)
        for r in log_rows:
            rows.append([epoch, r.iteration, r.phase, r.task_id, r.loss,
                         r.accuracy, r.alpha_norm, r.eta_norm, r.beta_norm,
                         r.beta_min, r.beta_max])
        acc = evaluate_accuracy(net, te_x, te_y, cfg.T, cfg.encoding, eval_seed)
        test_curve.append(acc)
        rows.append([epoch, -1, "test", -1, float("nan"), acc,
                     *rows[-1][6:]])
        log.info("epoch %d: test accuracy %.4f", epoch, acc)
    elapsed = time.monotonic() - started

    write_csv(out_dir / "metrics.csv",
              ["epoch", "iteration", "phase", "task_id", "loss", "accuracy",
               "alpha_norm", "eta_norm", "beta_norm", "beta_min", "beta_max"],
              rows)
    save_network(net, out_dir / "checkpoint.hpsn")
    train_losses = [r[4] for r in rows if r[2] == "train"]
    save_curve(out_dir / "loss_curve.svg", {"train_loss": train_losses},
               "iteration", "mse")
    summary = {"test_accuracy": test_curve[-1] if test_curve else float("nan"),
               "test_curve": test_curve, "elapsed_s": elapsed}
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True))
    return summary


def run_eval(cfg: RunConfig, out_dir: Path) -> dict:
    net = load_network(cfg.checkpoint)
    test_set = data_mod.load_mnist(cfg.data_dir, "test")
    te_x, te_y = _flat_images(test_set, cfg.limit_test)
    streams = seed_streams(cfg.seed, ["eval"])
    acc = evaluate_accuracy(net, te_x, te_y, net.c.T, cfg.encoding,
                            int(streams["eval"].integers(2 ** 63)))
    write_csv(out_dir / "metrics.csv", ["metric", "value"],
              [["test_accuracy", float(acc)]])
    return {"test_accuracy": acc}


def run_gradcheck(cfg: RunConfig, out_dir: Path) -> dict:
    """BPTT vs central differences on small soft-spike networks."""
    streams = seed_streams(cfg.seed, ["net", "data"])
    worst = 0.0
    rows = []
    for dims, T, analog in (([3, 4, 2], 4, False), ([8, 16, 4], 6, False),
                            ([5, 6, 3], 4, True)):
        c = SimConstants(dt=1.0, T=T, k_u=0.6, v_th=0.3, tau_w=40.0, a=0.5)
        net = Network.init(dims, c, streams["net"], plastic=True,
                           rho=Rho.SIGMOID, in_is_analog=analog)
        for l in net.layers:
            l.meta.alpha = streams["net"].uniform(0.05, 0.2, l.post)
            l.meta.eta = streams["net"].uniform(0.05, 0.2, l.pre)
            l.meta.beta = streams["net"].uniform(-0.1, 0.1, l.post)
        if analog:
            x = streams["data"].uniform(0.0, 1.0, size=(T, dims[0]))
        else:
            x = (streams["data"].random((T, dims[0])) < 0.5).astype(float)
        target = one_hot(streams["data"].integers(0, dims[-1], size=1),
                         dims[-1])[0]

        def loss_fn(tape):
            scores = tape.layers[-1].s.mean(axis=0)
            return mse_loss(scores, target)[0]

        tape = forward(net, x, soft=True)
        loss, dscores = mse_loss(tape.layers[-1].s.mean(axis=0), target)
        d_out_s = np.repeat(dscores[None] / tape.steps, tape.steps, axis=0)
        analytic = bptt(net, tape, d_out_s=d_out_s)
        numeric = fd_gradient(net, x, loss_fn, eps=1e-5)
        err = max_rel_error(analytic, numeric)
        worst = max(worst, err)
        rows.append(["-".join(map(str, dims)), T, int(analog), float(err)])
    write_csv(out_dir / "metrics.csv", ["net", "T", "analog", "max_rel_error"],
              rows)
    print(f"gradcheck max relative error: {worst:.3e} (threshold 1e-06)")
    return {"max_rel_error": worst, "passed": bool(worst < 1e-6)}


def run_robustness(cfg: RunConfig, out_dir: Path) -> dict:
    """Corruption sweeps plus hidden-representation distances for one model."""
    net = load_network(cfg.checkpoint)
    test_set = data_mod.load_mnist(cfg.data_dir, "test")
    te_x, te_y = _flat_images(test_set, cfg.limit_test)
    te_imgs = te_x.reshape(-1, 28, 28)
    streams = seed_streams(cfg.seed, ["noise", "eval", "distpick", "distenc"])
    eval_seed = int(streams["eval"].integers(2 ** 63))
    T = net.c.T

    rows = []
    for ci in cfg.ci_levels:
        imgs = data_mod.crop_center(te_imgs, ci).reshape(len(te_y), -1)
        acc = evaluate_accuracy(net, imgs, te_y, T, cfg.encoding, eval_seed)
        rows.append(["crop", ci, float(acc)])
    for nl in cfg.nl_levels:
        noise_seed = int(streams["noise"].integers(2 ** 63))
        imgs = data_mod.salt_pepper(te_imgs, nl, noise_seed).reshape(len(te_y), -1)
        acc = evaluate_accuracy(net, imgs, te_y, T, cfg.encoding, eval_seed)
        rows.append(["noise", nl, float(acc)])
    write_csv(out_dir / "metrics.csv", ["kind", "level", "accuracy"], rows)

    # Paired clean/corrupted hidden distances at the midpoint level 8.
    n = min(cfg.distance_samples, len(te_y))
    pick = streams["distpick"].choice(len(te_y), size=n, replace=False)
    clean = te_imgs[pick]
    cropped = data_mod.crop_center(clean, 8)
    enc_seed = int(streams["distenc"].integers(2 ** 63))
    clean_seq = encode_batch(clean.reshape(n, -1), T, cfg.encoding,
                             np.random.default_rng(enc_seed))
    crop_seq = encode_batch(cropped.reshape(n, -1), T, cfg.encoding,
                            np.random.default_rng(enc_seed))
    euclid, cosine, excluded = analysis.hidden_distance(net, clean_seq, crop_seq)
    write_csv(out_dir / "distance.csv",
              ["metric", "value"],
              [["euclidean", float(euclid)], ["cosine", float(cosine)],
               ["excluded", excluded]])
    save_curve(out_dir / "robustness.svg",
               {"crop": [r[2] for r in rows if r[0] == "crop"],
                "noise": [r[2] for r in rows if r[0] == "noise"]},
               "level index", "accuracy")
    return {"rows": rows, "euclidean": euclid, "cosine": cosine}


@dataclass
class FewshotModel:
    w: np.ndarray      # [way, dim] trained readout
    lambda1: float
    learn_lambda: bool

    def episode_state(self, episode) -> LabelHebbState:
        state = LabelHebbState.zeros(episode.way, self.w.shape[1],
                                     lambda1=self.lambda1)
        for feat, label in episode.support:
            state = label_hebbian_accumulate(state, feat, label)
        return state

    def query_scores(self, state, feats):
        i_gp = feats @ self.w.T
        return np.stack([mixed_output(i_gp[i], state, feats[i])
                         for i in range(feats.shape[0])])


def _fewshot_episode_eval(model, episode):
    state = model.episode_state(episode)
    feats = np.stack([f for f, _ in episode.query])
    targets = np.stack([y for _, y in episode.query])
    scores = model.query_scores(state, feats)
    acc = float(np.mean(np.argmax(scores, -1) == np.argmax(targets, -1)))
    loss = mse_loss(scores, targets)[0]
    return loss, acc


def _fewshot_grads(model, episode, w_override=None):
    """Query-loss gradients for (w, lambda1) with the support store fixed."""
    w = model.w if w_override is None else w_override
    state = model.episode_state(episode)
    feats = np.stack([f for f, _ in episode.query])
    targets = np.stack([y for _, y in episode.query])
    i_gp = feats @ w.T
    i_lp = feats @ state.w_lp.T
    scores = model.lambda1 * i_gp + (1.0 - model.lambda1) * i_lp
    loss, dscores = mse_loss(scores, targets)
    dw = model.lambda1 * (dscores.T @ feats)
    dlam = float(np.sum(dscores * (i_gp - i_lp)))
    return loss, dw, dlam


def run_fewshot(cfg: RunConfig, out_dir: Path) -> dict:
    """Synthetic N-way S-shot episodes: label-clamped store vs trained readout.

    Meta-training alternates readout steps on query loss with mixing-factor
    steps evaluated at lookahead weights; train and eval class sets are
    disjoint. The single-route baseline fixes lambda1 = 1.
    """
    streams = seed_streams(cfg.seed, ["train_data", "eval_data", "episodes",
                                      "eval_episodes", "init"])
    train_feats = data_mod.synthetic_fewshot(cfg.fs_classes, cfg.feature_dim,
                                             cfg.spread, streams["train_data"],
                                             samples_per_class=cfg.shot + cfg.query + 10)
    eval_feats = data_mod.synthetic_fewshot(cfg.fs_classes, cfg.feature_dim,
                                            cfg.spread, streams["eval_data"],
                                            samples_per_class=cfg.shot + cfg.query + 10)

    results = {}
    rows = []
    for tag, learn_lambda in (("hp", True), ("gp", False)):
        rng_init = np.random.default_rng(streams["init"].integers(2 ** 63))
        bound = np.sqrt(6.0 / (cfg.way + cfg.feature_dim))
        model = FewshotModel(
            w=rng_init.uniform(-bound, bound, (cfg.way, cfg.feature_dim)),
            lambda1=0.1 if learn_lambda else 1.0,
            learn_lambda=learn_lambda)
        w_opt = OptimizerState.for_params({"w": model.w}, lr=cfg.lr)
        lam_opt = OptimizerState.for_params({"lam": np.zeros(())}, lr=cfg.meta_lr)
        rng_ep = np.random.default_rng(streams["episodes"].integers(2 ** 63))
        for it in range(cfg.episodes):
            ep = data_mod.sample_episode(train_feats, cfg.way, cfg.shot,
                                         cfg.query, rng_ep)
            loss, dw, _ = _fewshot_grads(model, ep)
            new_params, _ = adam_step({"w": model.w}, {"w": dw}, w_opt)
            model.w = new_params["w"]
            if learn_lambda and cfg.meta_every and (it + 1) % cfg.meta_every == 0:
                dlam_total = 0.0
                mloss = 0.0
                for _ in range(cfg.task_batch):
                    ep2 = data_mod.sample_episode(train_feats, cfg.way, cfg.shot,
                                                  cfg.query, rng_ep)
                    # Lookahead on the support loss, then the mixing gradient.
                    sup_feats = np.stack([f for f, _ in ep2.support])
                    sup_targets = np.stack([y for _, y in ep2.support])
                    state = model.episode_state(ep2)
                    i_gp = sup_feats @ model.w.T
                    i_lp = sup_feats @ state.w_lp.T
                    sup_scores = model.lambda1 * i_gp + (1 - model.lambda1) * i_lp
                    _, dsup = mse_loss(sup_scores, sup_targets)
                    dw_sup = model.lambda1 * (dsup.T @ sup_feats)
                    w_prime = model.w - cfg.xi * dw_sup
                    l2, _, dlam = _fewshot_grads(model, ep2, w_override=w_prime)
                    dlam_total += dlam
                    mloss += l2
                new_lam, _ = adam_step({"lam": np.asarray(model.lambda1)},
                                       {"lam": np.asarray(dlam_total)}, lam_opt)
                model.lambda1 = float(np.clip(new_lam["lam"], 0.0, 1.0))
            if (it + 1) % 50 == 0:
                l, a = _fewshot_episode_eval(model, ep)
                rows.append([tag, it, float(l), float(a), float(model.lambda1)])

        rng_ev = np.random.default_rng(streams["eval_episodes"].integers(2 ** 63))
        accs = []
        for _ in range(200):
            ep = data_mod.sample_episode(eval_feats, cfg.way, cfg.shot,
                                         cfg.query, rng_ev)
            accs.append(_fewshot_episode_eval(model, ep)[1])
        results[tag] = float(np.mean(accs))
        rows.append([tag, -1, float("nan"), results[tag], float(model.lambda1)])

    write_csv(out_dir / "metrics.csv",
              ["model", "iteration", "loss", "accuracy", "lambda1"], rows)
    return {"hp_accuracy": results["hp"], "gp_accuracy": results["gp"]}


def run_continual(cfg: RunConfig, out_dir: Path) -> dict:
    """Shuffled-pixel task sequence: sparse-GP-plus-trace vs dense GP."""
    train_set = data_mod.load_mnist(cfg.data_dir, "train")
    test_set = data_mod.load_mnist(cfg.data_dir, "test")
    tr_x, tr_y = _flat_images(train_set)
    te_x, te_y = _flat_images(test_set, cfg.limit_test)

    streams = seed_streams(cfg.seed, ["perm", "mask", "init", "order",
                                      "encode", "theta", "eval"])
    perms = data_mod.make_permutation_tasks(cfg.tasks, streams["perm"])
    eval_seed = int(streams["eval"].integers(2 ** 63))
    n_classes = train_set.n_classes
    iters = max(1, (cfg.samples_per_task // cfg.batch) * cfg.task_epochs)

    results = {}
    per_task_rows = []
    for tag in ("hp", "gp"):
        rng_init = np.random.default_rng(streams["init"].integers(2 ** 63))
        rng_order = np.random.default_rng(streams["order"].integers(2 ** 63))
        rng_encode = np.random.default_rng(streams["encode"].integers(2 ** 63))
        rng_mask = np.random.default_rng(streams["mask"].integers(2 ** 63))
        rng_theta = np.random.default_rng(streams["theta"].integers(2 ** 63))
        net = build_network(cfg, rng_init, plastic=(tag == "hp"))
        task_masks: list[list[np.ndarray]] = []

        for t, perm in enumerate(perms):
            if tag == "hp":
                masks = [data_mod.sparse_gp_mask(l.params.w.shape, cfg.density,
                                                 rng_mask)
                         for l in net.layers]
                task_masks.append(masks)
                for l, m in zip(net.layers, masks):
                    l.params.gp_mask = m
            w_opt = OptimizerState.for_params(weight_params(net), lr=cfg.lr)
            pool = rng_order.choice(len(tr_y), size=cfg.samples_per_task,
                                    replace=False)
            for it in range(iters):
                idx = rng_order.choice(pool, size=cfg.batch, replace=False)
                seq = encode_batch(tr_x[idx][:, perm.perm], cfg.T,
                                   cfg.encoding, rng_encode)
                targets = one_hot(tr_y[idx], n_classes)
                loss, acc, bundle = meta_mod.eval_loss_and_grads(net, seq, targets)
                grads = {f"w{i}": (bundle.dw[i] if l.params.gp_mask is None
                                   else bundle.dw[i] * l.params.gp_mask)
                         for i, l in enumerate(net.layers)}
                new_params, _ = adam_step(weight_params(net), grads, w_opt)
                assign_params(net, new_params)
            # Meta phase: weights frozen, trace parameters adapt on replayed
            # validation episodes from the tasks seen so far.
            if tag == "hp" and t < cfg.theta_tasks:
                t_opt = OptimizerState.for_params(meta_params(net), lr=cfg.meta_lr)
                for _ in range(20):
                    s = int(rng_theta.integers(0, t + 1))
                    for l, m in zip(net.layers, task_masks[s]):
                        l.params.gp_mask = m
                    tasks = []
                    for _ in range(2):
                        tr = rng_theta.choice(len(tr_y), size=cfg.meta_batch,
                                              replace=False)
                        va = rng_theta.choice(len(tr_y), size=cfg.meta_batch,
                                              replace=False)
                        tr_seq = encode_batch(tr_x[tr][:, perms[s].perm], cfg.T,
                                              cfg.encoding, rng_theta)
                        va_seq = encode_batch(tr_x[va][:, perms[s].perm], cfg.T,
                                              cfg.encoding, rng_theta)
                        tasks.append(SpikeTask(tr_seq, one_hot(tr_y[tr], n_classes),
                                               va_seq, one_hot(tr_y[va], n_classes),
                                               task_id=s))
                    meta_mod.meta_step(net, TaskBatch(tasks, xi=cfg.xi), t_opt)
                for l, m in zip(net.layers, task_masks[t]):
                    l.params.gp_mask = m

        accs = [evaluate_accuracy(net, te_x, te_y, cfg.T, cfg.encoding,
                                  eval_seed, permutation=perm)
                for perm in perms]
        for t, a in enumerate(accs):
            per_task_rows.append([tag, t, float(a)])
        results[tag] = float(np.mean(accs))

    write_csv(out_dir / "metrics.csv", ["model", "task", "accuracy"],
              per_task_rows + [["hp", -1, results["hp"]],
                               ["gp", -1, results["gp"]]])
    return {"hp_avg": results["hp"], "gp_avg": results["gp"]}


def run_costmodel(cfg: RunConfig, out_dir: Path) -> dict:
    spec = chipcost.FCoreSpec(max_fan_in=cfg.max_fan_in,
                              max_neurons=cfg.max_neurons, F=cfg.clock_hz)
    rows = chipcost.compare_modes(cfg.cost_dims, spec, cfg.cost_T,
                                  density=cfg.density)
    write_csv(out_dir / "metrics.csv",
              ["mode", "rc", "total_clocks", "tc", "core_count"],
              [[r["mode"], float(r["rc"]), float(r["total_clocks"]),
                float(r["tc"]), r["core_count"]] for r in rows])
    return {"rows": rows}


def run_rankstats(cfg: RunConfig, out_dir: Path) -> dict:
    net = load_network(cfg.checkpoint)
    test_set = data_mod.load_mnist(cfg.data_dir, "test")
    te_x, te_y = _flat_images(test_set, cfg.limit_test)
    streams = seed_streams(cfg.seed, ["eval"])
    eval_seed = int(streams["eval"].integers(2 ** 63))
    T = net.c.T
    rate_acc = evaluate_accuracy(net, te_x, te_y, T, cfg.encoding, eval_seed)
    rank_acc, mean_lat, lat, preds = evaluate_rank(net, te_x, te_y, T,
                                                   cfg.encoding, eval_seed)
    hist_rows = []
    for cls in range(net.n_out):
        for step in range(1, T + 1):
            count = int(((te_y == cls) & (lat == step)).sum())
            hist_rows.append([cls, step, count])
    write_csv(out_dir / "latency_hist.csv", ["class", "latency", "count"],
              hist_rows)
    write_csv(out_dir / "metrics.csv", ["metric", "value"],
              [["rate_accuracy", float(rate_acc)],
               ["rank_accuracy", float(rank_acc)],
               ["mean_latency", float(mean_lat)]])
    return {"rate_accuracy": rate_acc, "rank_accuracy": rank_acc,
            "mean_latency": mean_lat}


_RUNNERS = {
    "train": run_train,
    "eval": run_eval,
    "gradcheck": run_gradcheck,
    "robustness": run_robustness,
    "fewshot": run_fewshot,
    "continual": run_continual,
    "costmodel": run_costmodel,
    "rankstats": run_rankstats,
}

_DATA_EXPERIMENTS = {"train", "eval", "robustness", "continual", "rankstats"}


def input_files(cfg: RunConfig) -> list[Path]:
    paths = []
    if cfg.experiment in _DATA_EXPERIMENTS:
        directory = Path(cfg.data_dir)
        if not directory.is_dir():
            raise DataError(f"dataset directory does not exist: {directory}")
        paths += sorted(p for p in directory.iterdir() if p.is_file())
    if cfg.checkpoint:
        p = Path(cfg.checkpoint)
        if not p.exists():
            raise DataError(f"checkpoint does not exist: {p}")
        paths.append(p)
    return paths


def run_experiment(cfg: RunConfig) -> dict:
    cfg.validate()
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = input_files(cfg)
    write_manifest(cfg, out_dir, inputs)
    result = _RUNNERS[cfg.experiment](cfg, out_dir)
    return result
