"""Per-vertex online-map surrogate.

An MLP reads each observed vertex's context (distance to ego, occlusion,
element class, local tangent) and emits a residual correction to the
noisy position together with covariance parameters.  The last layer
starts at zero, so an untrained mapper returns the observation itself
with unit scales.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .errors import EmptyInput, NonFiniteLoss
from .scenegen import CONTEXT_WIDTH, Scene
from .uncertainty import LOSS_TERMS, LOSSES, PolylineMap, cov_matrix

OUTPUTS = 5  # dx, dy, log_sigma1, log_sigma2, rho_raw
HIDDEN = 64
# distance is rescaled so every context column is O(1)
CONTEXT_SCALE = np.array([1 / 20.0, 1, 1, 1, 1, 1, 1])


@dataclass
class MapperConfig:
    loss_kind: str = "gaussian_cov"
    lr: float = 1.5e-4
    batch_size: int = 8
    epochs: int = 40
    lambda_reg: float = 1e-3
    clip_norm: float = 3.0
    loss_weight: float = 0.03
    seed: int = 0


def mlp_spec(seed=0) -> dc.MlpSpec:
    return dc.MlpSpec((CONTEXT_WIDTH, HIDDEN, HIDDEN, OUTPUTS), seed=seed, zero_last=True)


def init_mapper(seed=0) -> dc.Params:
    return dc.init_mlp(mlp_spec(seed))


@dataclass
class VertexBatch:
    """Vertices of several scenes stacked row-wise."""

    observed: np.ndarray  # (N, 2)
    context: np.ndarray  # (N, CONTEXT_WIDTH)
    target: np.ndarray  # (N, 2) true positions
    offsets: np.ndarray  # (S + 1,) row ranges per scene

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene]) -> "VertexBatch":
        if not scenes:
            raise EmptyInput("no scenes")
        obs, true, ctx = [], [], []
        for s in scenes:
            o, t, c, _ = s.vertices()
            obs.append(o), true.append(t), ctx.append(c)
        sizes = [len(o) for o in obs]
        return cls(np.concatenate(obs), np.concatenate(ctx), np.concatenate(true),
                   np.concatenate([[0], np.cumsum(sizes)]))

    def rows(self, scene_idx) -> np.ndarray:
        return np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in scene_idx])

    @property
    def n_scenes(self) -> int:
        return len(self.offsets) - 1


def _forward(params: dict, observed, context, training=False):
    spec = mlp_spec()
    x = dc.Tensor(np.asarray(context, float) * CONTEXT_SCALE)
    return dc.mlp_forward(spec, params, x, training=training)


def mapper_forward(params: dc.Params, observed, context) -> tuple[np.ndarray, np.ndarray]:
    """``(mu (N, 2), cov_params (N, 3))`` for each observed vertex."""
    observed = np.asarray(observed, float)
    out = _forward(dc.leaves(params), observed, context).data
    return observed + out[:, :2], out[:, 2:].copy()


def predicted_map(params: dc.Params, scene: Scene) -> PolylineMap:
    obs, _, ctx, _ = scene.vertices()
    mu, cp = mapper_forward(params, obs, ctx)
    sizes = [len(e.observed_xy) for e in scene.elements]
    return PolylineMap.from_arrays(mu, cp, sizes, [e.cls for e in scene.elements])


def covariance_world(cov_params: np.ndarray, loss_kind: str) -> np.ndarray:
    """``(N, 2, 2)`` covariance implied by the mapper output under a loss family.

    Independent families drop the correlation; Laplace scales ``b`` map to
    standard deviations ``sqrt(2) b``.
    """
    p = np.array(cov_params, dtype=float, copy=True)
    if loss_kind != "gaussian_cov":
        p[:, 2] = 0.0
    if loss_kind == "laplace_indep":
        p[:, :2] += 0.5 * math.log(2.0)
    return cov_matrix(p)


def batch_loss(params: dict[str, dc.Tensor], batch: VertexBatch, rows, cfg: MapperConfig):
    obs = batch.observed[rows]
    out = _forward(params, obs, batch.context[rows], training=True)
    mu = obs + out.data[:, :2]
    res = LOSSES[cfg.loss_kind](mu, out.data[:, 2:], batch.target[rows], cfg.lambda_reg)
    n = len(rows)
    w = cfg.loss_weight / n
    # d(mu)/d(out[:, :2]) is the identity
    grad = np.concatenate([res.grad_mu, res.grad_params], axis=1) * w
    return dc.custom([out], res.loss * w, [grad], op=f"nll:{cfg.loss_kind}"), res.loss / n


def evaluate_nll(params: dc.Params, batch: VertexBatch, loss_kind: str) -> float:
    """Mean per-vertex NLL of the true vertices, without regularization."""
    mu, cp = mapper_forward(params, batch.observed, batch.context)
    return float(np.mean(LOSS_TERMS[loss_kind](mu, cp, batch.target)))


@dataclass
class MapperResult:
    params: dc.Params
    best_epoch: int
    train_loss: list[float]
    val_nll: list[float]

    def write_curve(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_nll", "val_nll"])
            for i, (a, b) in enumerate(zip(self.train_loss, self.val_nll)):
                w.writerow([i, f"{a:.10g}", f"{b:.10g}"])


def train_mapper(train: VertexBatch, val: VertexBatch, cfg: MapperConfig) -> MapperResult:
    """Minibatch Adam over scenes; keeps the parameters with the best validation NLL."""
    if cfg.loss_kind not in LOSSES:
        raise ValueError(f"unknown loss kind {cfg.loss_kind!r}")
    params = init_mapper(cfg.seed)
    state = dc.AdamState()
    rng = np.random.default_rng([cfg.seed, 101])
    best = (evaluate_nll(params, val, cfg.loss_kind), -1, params)
    train_curve, val_curve = [], []
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in dc.iterate_minibatches(train.n_scenes, cfg.batch_size, rng):
            rows = train.rows(idx)
            leaves = dc.leaves(params)
            try:
                loss, raw = batch_loss(leaves, train, rows, cfg)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"mapper batch {step}: {exc}", batch_index=step) from exc
            grads = dc.backward(loss, leaves)
            params, state = dc.adam_step(params, grads, state, cfg.lr, cfg.clip_norm)
            losses.append(raw)
            step += 1
        train_curve.append(float(np.mean(losses)))
        v = evaluate_nll(params, val, cfg.loss_kind)
        val_curve.append(v)
        if not np.isfinite(v):
            raise NonFiniteLoss(f"validation NLL became {v} at epoch {epoch}", batch_index=step)
        if v < best[0]:
            best = (v, epoch, params)
    return MapperResult(best[2], best[1], train_curve, val_curve)


def save_mapper(path, result: MapperResult, cfg: MapperConfig):
    dc.save_checkpoint(path, result.params, {"stage": "mapper", "loss_kind": cfg.loss_kind,
                                             "best_epoch": result.best_epoch})


def major_axis_angle(cov: np.ndarray) -> np.ndarray:
    """Orientation in radians of the largest-eigenvalue eigenvector of each 2x2 matrix."""
    w, v = np.linalg.eigh(np.asarray(cov).reshape(-1, 2, 2))
    major = v[:, :, 1]
    return np.arctan2(major[:, 1], major[:, 0])


def axis_angle_error(a, b) -> np.ndarray:
    """Angle between undirected axes, in [0, pi/2]."""
    d = np.mod(np.asarray(a) - np.asarray(b), np.pi)
    return np.minimum(d, np.pi - d)


def load_mapper(path) -> tuple[dc.Params, dict]:
    return dc.load_checkpoint(Path(path))
