"""End-to-end optimization: Adam, schedule, training loop, checkpoints.

Every source of randomness in a run derives from the root seed through
named streams (batch order, dropout, k-means), each keyed by epoch and
step, so a training run is a pure function of (config, dataset) and can
be resumed or replayed exactly.  The ablation runner reuses one dataset
across arms so the comparison differs only in the model configuration.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .clustering import ClusteringError, ClusterState
from .config import (ConfigError, GeneratorConfig, TrainConfig, config_dict,
                     resolve_configs, stream_rng, with_updates)
from .heads import combined_loss
from .model import ActivityModel
from .tensor import find_first_nonfinite, zero_grads

CHECKPOINT_MAGIC = b"GACK"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Training aborted; the message names the first bad op when known."""


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable or does not match the config."""


def adam_step(params, grads, moments, lr, beta1=0.9, beta2=0.999, eps=1e-8,
              t=1):
    """One Adam update with bias correction, in place on ``params``.

    ``params`` maps names to Tensors, ``grads`` names to arrays, and
    ``moments`` holds the running first/second moment dicts under keys
    "m" and "v" (created on first use).  ``t`` is the 1-based step count.
    """
    if t < 1:
        raise TrainingError(f"adam step count must be >= 1, got {t}")
    m, v = moments.setdefault("m", {}), moments.setdefault("v", {})
    for name, p in params.items():
        g = grads[name]
        m[name] = beta1 * m.get(name, 0.0) + (1.0 - beta1) * g
        v[name] = beta2 * v.get(name, 0.0) + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1 ** t)
        v_hat = v[name] / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, moments


def lr_at(epoch, cfg):
    """Piecewise-constant schedule: divide by the factor after each decay epoch."""
    if epoch < 0:
        raise TrainingError(f"epoch must be >= 0, got {epoch}")
    drops = sum(1 for d in cfg.decay_epochs if epoch >= d)
    return cfg.lr / cfg.decay_factor ** drops


def clip_gradients(grads, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        grads = {k: g * factor for k, g in grads.items()}
    return grads, total


def _stack_clips(clips):
    feats = np.stack([c.individuals for c in clips])
    scenes = np.stack([c.scene for c in clips])
    y_g = np.array([c.y_g for c in clips], dtype=np.int64)
    y_a = np.stack([c.y_a for c in clips]).astype(np.int64)
    seeds = [c.seed for c in clips]
    return feats, scenes, y_g, y_a, seeds


def _accuracy(logits, labels):
    return float((logits.argmax(axis=-1) == labels).mean())


def evaluate_model(model, clips, lam=1.0, batch_size=64):
    """Deterministic metrics for a model: loss plus both accuracies."""
    if not clips:
        raise TrainingError("evaluate: empty dataset")
    feats, scenes, y_g, y_a, seeds = _stack_clips(clips)
    losses, g_hits, a_hits = [], [], []
    with tz.no_grad():
        for lo in range(0, len(clips), batch_size):
            hi = min(lo + batch_size, len(clips))
            out = model.forward(feats[lo:hi], scenes[lo:hi], seeds[lo:hi],
                                train=False)
            g, a = model.logits(out)
            loss = combined_loss(g, y_g[lo:hi], a, y_a[lo:hi], lam)
            losses.append(loss.item() * (hi - lo))
            g_hits.append((g.data.argmax(-1) == y_g[lo:hi]).sum())
            a_hits.append((a.data.argmax(-1) == y_a[lo:hi]).sum())
    return {"loss": float(sum(losses) / len(clips)),
            "group_acc": float(sum(g_hits) / len(clips)),
            "ind_acc": float(sum(a_hits) / (len(clips) * y_a.shape[1]))}


@dataclass
class Checkpoint:
    """A full training snapshot; round-trips through disk byte-identically."""

    gen: GeneratorConfig
    train: TrainConfig
    epoch: int
    step: int
    params: dict
    m: dict
    v: dict
    cluster_states: list

    def metrics_on(self, clips, batch_size=64):
        return evaluate_model(restore_model(self), clips,
                              lam=self.train.lam, batch_size=batch_size)


def snapshot(model, moments, epoch, step):
    """Copy the live training state into a Checkpoint."""
    params = {k: p.data.copy() for k, p in model.parameters().items()}
    m = {k: np.array(g, dtype=np.float64) for k, g in
         moments.get("m", {}).items()}
    v = {k: np.array(g, dtype=np.float64) for k, g in
         moments.get("v", {}).items()}
    states = [b.cluster_state for b in model.blocks]
    return Checkpoint(gen=model.gen, train=model.cfg, epoch=epoch, step=step,
                      params=params, m=m, v=v, cluster_states=states)


def _write_blob(fh, name, arr):
    data = np.ascontiguousarray(arr, dtype="<f8")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def save_checkpoint(ck, path):
    """Write a versioned binary container: JSON header plus named f64 blobs."""
    header = {
        "config": config_dict(ck.gen, ck.train),
        "epoch": ck.epoch,
        "step": ck.step,
        "cluster_seeds": [None if s is None else int(s.seed)
                          for s in ck.cluster_states],
    }
    blobs = {}
    for k, arr in ck.params.items():
        blobs[f"param/{k}"] = arr
    for k, arr in ck.m.items():
        blobs[f"adam_m/{k}"] = arr
    for k, arr in ck.v.items():
        blobs[f"adam_v/{k}"] = arr
    for i, state in enumerate(ck.cluster_states):
        if state is not None:
            blobs[f"cluster/{i}/centroids"] = state.centroids
            blobs[f"cluster/{i}/counts"] = state.counts.astype(np.float64)
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(blobs)))
        for name in sorted(blobs):
            _write_blob(fh, name, blobs[name])
    return path


def _read_exact(fh, nbytes, path, what):
    data = fh.read(nbytes)
    if len(data) != nbytes:
        raise CheckpointError(f"{path}: truncated while reading {what}")
    return data


def load_checkpoint(path):
    """Read a checkpoint container back into memory."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        version, header_len = struct.unpack(
            "<II", _read_exact(fh, 8, path, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(_read_exact(fh, header_len, path, "config"))
        (n_blobs,) = struct.unpack("<I", _read_exact(fh, 4, path, "blob count"))
        blobs = {}
        for _ in range(n_blobs):
            (name_len,) = struct.unpack(
                "<I", _read_exact(fh, 4, path, "blob name"))
            name = _read_exact(fh, name_len, path, "blob name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, path, name))
            shape = struct.unpack(f"<{ndim}I",
                                  _read_exact(fh, 4 * ndim, path, name))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 8 * count, path, name),
                                 dtype="<f8").reshape(shape)
            blobs[name] = data.astype(np.float64)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last blob")
    gen, train = resolve_configs(
        {k: v if not isinstance(v, list) else tuple(v)
         for k, v in header["config"].items()})
    params, m, v = {}, {}, {}
    for name, arr in blobs.items():
        if name.startswith("param/"):
            params[name[len("param/"):]] = arr
        elif name.startswith("adam_m/"):
            m[name[len("adam_m/"):]] = arr
        elif name.startswith("adam_v/"):
            v[name[len("adam_v/"):]] = arr
    states = []
    for i, seed in enumerate(header["cluster_seeds"]):
        if seed is None:
            states.append(None)
        else:
            states.append(ClusterState(
                centroids=blobs[f"cluster/{i}/centroids"],
                counts=blobs[f"cluster/{i}/counts"].astype(np.int64),
                seed=int(seed)))
    return Checkpoint(gen=gen, train=train, epoch=int(header["epoch"]),
                      step=int(header["step"]), params=params, m=m, v=v,
                      cluster_states=states)


def restore_model(ck):
    """Rebuild the model a checkpoint was saved from."""
    model = ActivityModel(ck.gen, ck.train)
    live = model.parameters()
    missing = sorted(set(live) - set(ck.params))
    extra = sorted(set(ck.params) - set(live))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match config (missing {missing[:3]}, "
            f"unexpected {extra[:3]})")
    for name, p in live.items():
        if p.data.shape != ck.params[name].shape:
            raise CheckpointError(
                f"parameter {name}: checkpoint shape "
                f"{ck.params[name].shape} != model shape {p.data.shape}")
        p.data = ck.params[name].copy()
    for block, state in zip(model.blocks, ck.cluster_states):
        block.cluster_state = state
    return model


def evaluate(checkpoint, clips, batch_size=64):
    """Metrics for a saved checkpoint on a dataset."""
    return checkpoint.metrics_on(clips, batch_size=batch_size)


def _chunk_bounds(n, workers):
    size = (n + workers - 1) // workers
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def train(gen_cfg, cfg, train_clips, val_clips, on_epoch=None):
    """Optimize a fresh model; returns (per-epoch history, best checkpoint).

    Deterministic given the configs and clip lists.  ``on_epoch`` is called
    with each history row as it is produced.  Aborts with TrainingError
    naming the first non-finite op if the loss diverges.
    """
    if not train_clips:
        raise TrainingError("train: empty dataset")
    gen_cfg.validate()
    cfg.validate()
    model = ActivityModel(gen_cfg, cfg)
    params = model.parameters()
    moments = {}
    feats, scenes, y_g, y_a, seeds = _stack_clips(train_clips)
    n = len(train_clips)
    parallel = cfg.workers > 1 and cfg.cluster_mode != "minibatch"
    history = []
    best = None
    step = 0

    def chunk_loss(lo, hi, rng):
        out = model.forward(feats[idx[lo:hi]], scenes[idx[lo:hi]],
                            [seeds[i] for i in idx[lo:hi]],
                            train=True, rng=rng)
        g, a = model.logits(out)
        return combined_loss(g, y_g[idx[lo:hi]], a, y_a[idx[lo:hi]], cfg.lam)

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = stream_rng(cfg.seed, f"order:epoch{epoch}")
        idx = order.permutation(n)
        epoch_loss = 0.0
        for s, lo in enumerate(range(0, n, cfg.batch_size)):
            hi = min(lo + cfg.batch_size, n)
            bounds = _chunk_bounds(hi - lo, cfg.workers) if parallel \
                else [(0, hi - lo)]
            rngs = [stream_rng(cfg.seed, f"dropout:epoch{epoch}:step{s}:chunk{c}")
                    for c in range(len(bounds))]
            try:
                if parallel and len(bounds) > 1:
                    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                        parts = list(pool.map(
                            lambda args: chunk_loss(lo + args[0][0],
                                                    lo + args[0][1], args[1]),
                            zip(bounds, rngs)))
                else:
                    parts = [chunk_loss(lo + a, lo + b, r)
                             for (a, b), r in zip(bounds, rngs)]
            except ClusteringError as e:
                raise TrainingError(
                    f"non-finite activations at epoch {epoch} step {s}"
                    f" ({e})") from None
            loss = parts[0] if len(parts) == 1 else None
            if loss is None:
                loss = tz.scale(parts[0], (bounds[0][1] - bounds[0][0]) / (hi - lo))
                for (a, b), part in zip(bounds[1:], parts[1:]):
                    loss = loss + tz.scale(part, (b - a) / (hi - lo))
            value = loss.item()
            if not np.isfinite(value):
                bad = find_first_nonfinite(loss)
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {s}"
                    f" (first bad op: {bad})")
            loss.backward()
            # params outside the active graph (e.g. centroid attention with
            # inter off) get zero gradients, a fixed point for Adam
            grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data)
                     for k, p in params.items()}
            grads, _ = clip_gradients(grads, cfg.grad_clip)
            step += 1
            adam_step(params, grads, moments, lr, t=step)
            zero_grads(params)
            epoch_loss += value * (hi - lo)
        try:
            metrics = evaluate_model(model, val_clips, lam=cfg.lam) \
                if val_clips else {"loss": float("nan"),
                                   "group_acc": float("nan"),
                                   "ind_acc": float("nan")}
        except ClusteringError as e:
            raise TrainingError(
                f"non-finite activations evaluating epoch {epoch} ({e})"
            ) from None
        row = {"epoch": epoch, "lr": lr, "train_loss": epoch_loss / n,
               "val_loss": metrics["loss"], "group_acc": metrics["group_acc"],
               "ind_acc": metrics["ind_acc"]}
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if val_clips and (best is None or row["group_acc"] > best[0]):
            best = (row["group_acc"], snapshot(model, moments, epoch, step))
    if best is None:
        best = (float("nan"), snapshot(model, moments, cfg.epochs - 1, step))
    return history, best[1]


ABLATION_PLANS = {
    "variants": [(f"variant={v}", {"variant": v})
                 for v in ("baseline", "spatial", "stacked", "parallel",
                           "ours")],
    "clusters": [(f"clusters={c}", {"C": c}) for c in (1, 2, 3, 4, 6)],
    "blocks": [(f"blocks={b}", {"blocks": b}) for b in (0, 1, 2)],
    "toggles": [("intra=off,inter=off", {"intra": False, "inter": False}),
                ("intra=on,inter=off", {"intra": True, "inter": False}),
                ("intra=off,inter=on", {"intra": False, "inter": True}),
                ("intra=on,inter=on", {"intra": True, "inter": True})],
}


def run_ablation(plan, gen_cfg, base_cfg, train_clips, val_clips,
                 on_arm=None):
    """Train one model per arm of ``plan`` on a shared dataset.

    Returns rows of {arm, group_acc, ind_acc, seed}, one per arm, evaluated
    with each arm's best checkpoint.  The clip lists are shared so every
    arm sees identical data in identical order.
    """
    if plan not in ABLATION_PLANS:
        raise ConfigError(
            f"unknown ablation plan {plan!r}; options: {sorted(ABLATION_PLANS)}")
    rows = []
    for arm, delta in ABLATION_PLANS[plan]:
        cfg = with_updates(base_cfg, **delta)
        _, best = train(gen_cfg, cfg, train_clips, val_clips)
        metrics = evaluate(best, val_clips)
        row = {"arm": arm, "group_acc": metrics["group_acc"],
               "ind_acc": metrics["ind_acc"], "seed": cfg.seed}
        rows.append(row)
        if on_arm is not None:
            on_arm(row)
    return rows


def ablation_csv_lines(rows):
    """Render ablation rows as CSV with a fixed header.

    Arm names may contain commas (the toggle plan's do), so fields are
    quoted by the csv module where needed.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["arm", "group_acc", "ind_acc", "seed"])
    for r in rows:
        writer.writerow([r["arm"], f"{r['group_acc']:.4f}",
                         f"{r['ind_acc']:.4f}", r["seed"]])
    return buf.getvalue().splitlines()
