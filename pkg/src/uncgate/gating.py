"""Proprioceptive scenario gating.

The gate reads the two stream embeddings, emits two logits, and turns
them into fusion weights with a temperature softmax.  It is trained by
MSE against target weights derived from each stream's realized error on
the training scenes, with both predictors frozen.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import NonFiniteLoss, ShapeMismatch
from .predictor import EMBED_WIDTH

GATE_WIDTHS = (2 * EMBED_WIDTH, 512, 256, 128, 64, 32, 2)
DEFAULT_TEMPERATURE = 0.6
TARGET_TEMPERATURE = 0.1


@dataclass(frozen=True)
class GateDecision:
    w_base: float
    w_unc: float
    logits: tuple[float, float]


def gate_spec(seed=0, dropout=0.0) -> dc.MlpSpec:
    # Last layer starts at zero: an untrained gate weighs both streams equally.
    return dc.MlpSpec(GATE_WIDTHS, dropout_rate=dropout, seed=seed, zero_last=True)


def init_gate(seed=0) -> dc.Params:
    return dc.init_mlp(gate_spec(seed))


def _inputs(emb_base, emb_unc) -> np.ndarray:
    eb, eu = np.atleast_2d(emb_base), np.atleast_2d(emb_unc)
    if eb.shape[1] != EMBED_WIDTH or eu.shape[1] != EMBED_WIDTH or eb.shape[0] != eu.shape[0]:
        raise ShapeMismatch(f"gate expects two (B, {EMBED_WIDTH}) embeddings, got {eb.shape} and {eu.shape}")
    return np.concatenate([eb, eu], axis=1)


def gate_weights(params: dc.Params, emb_base, emb_unc, temperature=DEFAULT_TEMPERATURE):
    """``(logits (B, 2), weights (B, 2))`` with columns ``(base, unc)``."""
    logits = dc.mlp_forward(gate_spec(), dc.leaves(params), dc.Tensor(_inputs(emb_base, emb_unc)))
    w = dc.softmax_temperature(logits, temperature)
    return logits.data, w.data


def gate_forward(params: dc.Params, emb_base, emb_unc, temperature=DEFAULT_TEMPERATURE) -> GateDecision:
    logits, w = gate_weights(params, emb_base, emb_unc, temperature)
    if len(w) != 1:
        raise ShapeMismatch("gate_forward takes one scene; use gate_weights for batches")
    return GateDecision(float(w[0, 0]), float(w[0, 1]), (float(logits[0, 0]), float(logits[0, 1])))


def make_target_weights(err_base, err_unc, temperature=TARGET_TEMPERATURE) -> np.ndarray:
    """Softmax of negative per-stream errors; the lower error gets the larger weight."""
    errs = np.stack(np.broadcast_arrays(np.asarray(err_base, float), np.asarray(err_unc, float)), axis=-1)
    return dc.softmax_rows(-errs, temperature)


def hard_target_weights(err_base, err_unc) -> np.ndarray:
    eb, eu = np.broadcast_arrays(np.asarray(err_base, float), np.asarray(err_unc, float))
    w = np.where(eb < eu, 1.0, np.where(eb > eu, 0.0, 0.5))
    return np.stack([w, 1.0 - w], axis=-1)


def fuse_trajectories(cands_base, cands_unc, weights, mode: str = "convex") -> np.ndarray:
    """Pair candidates by head index and combine them with the gate weights.

    ``weights`` is a :class:`GateDecision`, a ``(2,)`` pair or ``(B, 2)``
    rows matching a leading batch axis.  ``mode="hard"`` keeps the stream
    with the larger weight.
    """
    cb, cu = np.asarray(cands_base, float), np.asarray(cands_unc, float)
    if cb.shape != cu.shape:
        raise ShapeMismatch(f"candidate sets differ: {cb.shape} vs {cu.shape}")
    if isinstance(weights, GateDecision):
        weights = (weights.w_base, weights.w_unc)
    w = np.asarray(weights, float)
    if mode == "hard":
        w = np.where(w[..., :1] >= w[..., 1:], [1.0, 0.0], [0.0, 1.0])
    elif mode != "convex":
        raise ValueError(f"unknown fusion mode {mode!r}")
    extra = (1,) * (cb.ndim - w.ndim + 1)
    wb = w[..., 0].reshape(w.shape[:-1] + extra)
    wu = w[..., 1].reshape(w.shape[:-1] + extra)
    return wb * cb + wu * cu


@dataclass
class GateConfig:
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 40
    clip_norm: float = 3.0
    temperature: float = DEFAULT_TEMPERATURE
    target_temperature: float = TARGET_TEMPERATURE
    hard_targets: bool = False
    dropout: float = 0.0
    seed: int = 0
    lr_schedule: str = "cosine"


@dataclass
class GateResult:
    params: dc.Params
    best_epoch: int
    train_mse: list[float]
    val_mse: list[float]

    def write_curve(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mse"])
            for i, (a, b) in enumerate(zip(self.train_mse, self.val_mse)):
                w.writerow([i, f"{a:.10g}", f"{b:.10g}"])


def targets_for(err_base, err_unc, cfg: GateConfig) -> np.ndarray:
    if cfg.hard_targets:
        return hard_target_weights(err_base, err_unc)
    return make_target_weights(err_base, err_unc, cfg.target_temperature)


def _mse(params, x, y, temperature) -> float:
    _, w = gate_weights(params, x[:, :EMBED_WIDTH], x[:, EMBED_WIDTH:], temperature)
    return float(np.mean((w - y) ** 2))


def train_gate(x_train, y_train, x_val, y_val, cfg: GateConfig) -> GateResult:
    """Fit gate weights to target weights by MSE.

    ``x_*`` are ``(N, 1024)`` concatenated frozen embeddings, ``y_*`` the
    ``(N, 2)`` targets.  Keeps the parameters with the lowest validation MSE.
    """
    spec = gate_spec(cfg.seed, cfg.dropout)
    params = dc.init_mlp(spec)
    state = dc.AdamState()
    rng = np.random.default_rng([cfg.seed, 303])
    best = (_mse(params, x_val, y_val, cfg.temperature), -1, params)
    tr_curve, va_curve = [], []
    step = 0
    total = cfg.epochs * -(-len(x_train) // cfg.batch_size)
    for epoch in range(cfg.epochs):
        losses = []
        for idx in dc.iterate_minibatches(len(x_train), cfg.batch_size, rng):
            leaves = dc.leaves(params)
            logits = dc.mlp_forward(spec, leaves, dc.Tensor(x_train[idx]), training=True, rng=rng)
            loss = dc.mse_loss(dc.softmax_temperature(logits, cfg.temperature), y_train[idx])
            try:
                grads = dc.backward(loss, leaves)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"gate batch {step}: {exc}", batch_index=step) from exc
            lr = dc.scheduled_lr(cfg.lr, step, total, cfg.lr_schedule)
            params, state = dc.adam_step(params, grads, state, lr, cfg.clip_norm)
            losses.append(float(loss.data[0, 0]))
            step += 1
        tr_curve.append(float(np.mean(losses)))
        v = _mse(params, x_val, y_val, cfg.temperature)
        va_curve.append(v)
        if v < best[0]:
            best = (v, epoch, params)
    return GateResult(best[2], best[1], tr_curve, va_curve)


def save_gate(path, result: GateResult, cfg: GateConfig):
    dc.save_checkpoint(path, result.params, {"stage": "gate", "best_epoch": result.best_epoch,
                                             "temperature": cfg.temperature,
                                             "target_temperature": cfg.target_temperature})
