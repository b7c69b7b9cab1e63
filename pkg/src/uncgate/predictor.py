"""Dual-stream residual-MLP trajectory predictor.

Both streams share one architecture:

* history encoder: MLP over the ego-frame history;
* map encoder: per-vertex MLP followed by a mean over vertices; the
  ``base`` stream sees the vertex mean only, ``unc`` also sees
  ``(sigma1, sigma2, rho)``;
* decoder: trunk MLP whose output is the stream embedding, then a linear
  head emitting ``K x T x 2`` offsets added to a constant-velocity rollout.

The head starts at zero, so an untrained stream predicts constant
velocity for every candidate.  Everything is computed in the ego frame
(origin at the last history point, x along the last history segment).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .errors import EmptyMap, NonFiniteLoss, ShapeMismatch
from .mapper import covariance_world, mapper_forward
from .scenegen import N_FUTURE, N_HISTORY, Scene
from .uncertainty import moments_from_matrix

K = 6
HORIZON = N_FUTURE
EMBED_WIDTH = 512
COORD_SCALE = 10.0  # metres per unit of network input
STREAMS = ("base", "unc")
MAP_INPUT = {"base": 2, "unc": 5}


@dataclass(frozen=True)
class PredictorArch:
    hist_hidden: int = 64
    map_hidden: int = 64
    trunk_hidden: int = 128
    dropout: float = 0.1
    output_scale: float = 5.0

    def specs(self, stream: str, seed: int) -> dict[str, dc.MlpSpec]:
        d = self.dropout
        return {
            "hist": dc.MlpSpec((2 * (N_HISTORY - 1), self.hist_hidden, self.hist_hidden), dropout_rate=d, seed=seed),
            # map encoder gets its own seed offset so both streams share every other init
            "map": dc.MlpSpec((MAP_INPUT[stream], self.map_hidden, self.map_hidden), dropout_rate=d,
                              seed=seed + 1),
            "trunk": dc.MlpSpec((self.hist_hidden + self.map_hidden, self.trunk_hidden, self.trunk_hidden),
                                dropout_rate=d, seed=seed + 2),
            "head": dc.MlpSpec((self.trunk_hidden, K * HORIZON * 2), seed=seed + 3, zero_last=True),
        }


def init_predictor(stream: str, seed: int = 0, arch: PredictorArch = PredictorArch()) -> dc.Params:
    params: dc.Params = {}
    for name, spec in arch.specs(stream, seed).items():
        params.update(dc.init_mlp(spec, prefix=f"{name}."))
    return params


# ---------------------------------------------------------------------------
# Coordinate normalization


@dataclass(frozen=True)
class EgoFrame:
    origin: np.ndarray
    rotation: np.ndarray  # world -> ego

    @classmethod
    def from_history(cls, history) -> "EgoFrame":
        h = np.asarray(history, float)
        d = h[-1] - h[-2]
        if np.hypot(*d) < 1e-9:
            d = h[-1] - h[0]
        phi = np.arctan2(d[1], d[0])
        c, s = np.cos(phi), np.sin(phi)
        return cls(h[-1].copy(), np.array([[c, s], [-s, c]]))

    def to_ego(self, pts):
        return (np.asarray(pts, float) - self.origin) @ self.rotation.T

    def to_world(self, pts):
        return np.asarray(pts, float) @ self.rotation + self.origin

    def cov_to_ego(self, cov):
        R = self.rotation
        return R @ cov @ R.T


@dataclass
class StreamInput:
    """One scene in the ego frame, ready for either stream."""

    scene_id: str
    frame: EgoFrame
    history: np.ndarray  # (N_HISTORY, 2) ego frame
    future: np.ndarray | None  # (HORIZON, 2) ego frame
    map_mu: np.ndarray  # (V, 2) ego frame
    map_moments: np.ndarray  # (V, 3) sigma1, sigma2, rho in the ego frame
    delta_theta: float = float("nan")

    def map_features(self, stream: str) -> np.ndarray:
        if stream == "base":
            return self.map_mu / COORD_SCALE
        return np.concatenate([self.map_mu / COORD_SCALE, self.map_moments], axis=1)


def prepare_inputs(scene: Scene, mapper_params: dc.Params | None, loss_kind: str = "gaussian_cov") -> StreamInput:
    """Run the frozen mapper on a scene and express everything in the ego frame.

    Without mapper parameters the noisy observations are used with unit
    isotropic scales.
    """
    obs, _, ctx, _ = scene.vertices()
    if len(obs) == 0:
        raise EmptyMap(f"scene {scene.id} has no map vertices")
    if mapper_params is None:
        mu, cov = obs, np.broadcast_to(np.eye(2), (len(obs), 2, 2))
    else:
        mu, cp = mapper_forward(mapper_params, obs, ctx)
        cov = covariance_world(cp, loss_kind)
    frame = EgoFrame.from_history(scene.history)
    cov_e = np.einsum("ij,njk,lk->nil", frame.rotation, cov, frame.rotation)
    return StreamInput(scene.id, frame, frame.to_ego(scene.history), frame.to_ego(scene.future_gt),
                       frame.to_ego(mu), moments_from_matrix(cov_e), scene.delta_theta_gt)


def constant_velocity(history_ego: np.ndarray) -> np.ndarray:
    v = history_ego[-1] - history_ego[-2]
    return history_ego[-1] + np.arange(1, HORIZON + 1)[:, None] * v


# ---------------------------------------------------------------------------
# Forward pass


@dataclass
class StreamOutput:
    candidates: np.ndarray  # (B, K, HORIZON, 2) ego frame
    embedding: np.ndarray  # (B, EMBED_WIDTH)
    head: dc.Tensor
    cv: np.ndarray  # (B, HORIZON, 2)


def _pool_matrix(sizes: Sequence[int]) -> np.ndarray:
    P = np.zeros((len(sizes), int(sum(sizes))))
    start = 0
    for i, n in enumerate(sizes):
        P[i, start:start + n] = 1.0 / n
        start += n
    return P


def encode_map(stream: str, params: dict[str, dc.Tensor], feats: Sequence[np.ndarray],
               arch: PredictorArch = PredictorArch(), training=False, rng=None, seed=0) -> dc.Tensor:
    """Mean over per-vertex embeddings, one row per scene."""
    sizes = [len(f) for f in feats]
    if any(n == 0 for n in sizes):
        raise EmptyMap("map without vertices")
    spec = arch.specs(stream, seed)["map"]
    x = dc.Tensor(np.concatenate(feats, axis=0))
    h = dc.mlp_forward(spec, params, x, training, rng, prefix="map.", activate_last=True)
    return dc.matmul(dc.Tensor(_pool_matrix(sizes)), h)


def encode_map_base(params: dc.Params, mu) -> np.ndarray:
    """Pooled embedding of one map from vertex means ``(V, 2)`` (ego frame)."""
    mu = np.asarray(mu, float)
    return encode_map("base", dc.leaves(params), [mu / COORD_SCALE]).data[0]


def encode_map_unc(params: dc.Params, mu, moments) -> np.ndarray:
    """Pooled embedding from vertex means and ``(sigma1, sigma2, rho)`` rows."""
    feats = np.concatenate([np.asarray(mu, float) / COORD_SCALE, np.asarray(moments, float)], axis=1)
    return encode_map("unc", dc.leaves(params), [feats]).data[0]


def canonical_order(candidates: np.ndarray) -> np.ndarray:
    """Sort each scene's candidates by final lateral offset in the ego frame.

    Heads of independently trained streams are not aligned, so pairing them
    by raw head index mixes unrelated hypotheses.  After this reordering,
    slot ``k`` of either stream holds its ``k``-th rightmost endpoint.
    """
    c = np.asarray(candidates, float)
    order = np.argsort(c[..., -1, 1], axis=-1, kind="stable")
    return np.take_along_axis(c, order[..., None, None], axis=-3)


def stream_forward(stream: str, params: dict[str, dc.Tensor], batch: Sequence[StreamInput],
                   arch: PredictorArch = PredictorArch(), training=False, rng=None,
                   canonical=False) -> StreamOutput:
    """Ego-frame forward pass.  ``canonical`` reorders candidates for fusion;
    training keeps raw head order so the loss gradient maps onto the head."""
    specs = arch.specs(stream, 0)
    hist = np.stack([b.history[:-1].ravel() for b in batch]) / COORD_SCALE
    if hist.shape[1] != specs["hist"].layer_widths[0]:
        raise ShapeMismatch(f"history width {hist.shape[1]}")
    h_hist = dc.mlp_forward(specs["hist"], params, dc.Tensor(hist), training, rng, prefix="hist.",
                            activate_last=True)
    h_map = encode_map(stream, params, [b.map_features(stream) for b in batch], arch, training, rng)
    trunk = dc.mlp_forward(specs["trunk"], params, dc.concat_cols([h_hist, h_map]), training, rng,
                           prefix="trunk.", activate_last=True)
    head = dc.mlp_forward(specs["head"], params, trunk, prefix="head.")
    cv = np.stack([constant_velocity(b.history) for b in batch])
    cands = cv[:, None] + arch.output_scale * head.data.reshape(len(batch), K, HORIZON, 2)
    if canonical:
        cands = canonical_order(cands)
    emb = dc.pad_cols(trunk, EMBED_WIDTH).data
    return StreamOutput(cands, emb, head, cv)


def predict_stream(stream: str, params: dc.Params, batch: Sequence[StreamInput],
                   arch: PredictorArch = PredictorArch()) -> tuple[np.ndarray, np.ndarray]:
    """World-frame candidates ``(B, K, HORIZON, 2)`` and embeddings ``(B, 512)``."""
    out = stream_forward(stream, dc.leaves(params), batch, arch, canonical=True)
    world = np.stack([b.frame.to_world(c.reshape(-1, 2)).reshape(K, HORIZON, 2)
                      for b, c in zip(batch, out.candidates)])
    return world, out.embedding


# ---------------------------------------------------------------------------
# Winner-take-all loss


def wta_ade(candidates: np.ndarray, gt: np.ndarray):
    """Mean over scenes of the best candidate's ADE, and its gradient w.r.t. candidates."""
    diff = candidates - gt[:, None]
    dist = np.linalg.norm(diff, axis=-1)  # (B, K, T)
    ade = dist.mean(axis=-1)
    best = np.argmin(ade, axis=1)
    B = len(gt)
    rows = np.arange(B)
    loss = float(ade[rows, best].mean())
    grad = np.zeros_like(candidates)
    d = diff[rows, best]
    n = dist[rows, best][..., None]
    unit = np.divide(d, n, out=np.zeros_like(d), where=n > 0)
    grad[rows, best] = unit / (HORIZON * B)
    return loss, grad, best


def wta_loss(out: StreamOutput, gt: np.ndarray, arch: PredictorArch = PredictorArch()) -> tuple[dc.Tensor, np.ndarray]:
    loss, grad, best = wta_ade(out.candidates, gt)
    g_head = arch.output_scale * grad.reshape(len(gt), -1)
    return dc.custom([out.head], loss, [g_head], op="wta_ade"), best


# ---------------------------------------------------------------------------
# Training


@dataclass
class PredictorConfig:
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 120
    clip_norm: float = 3.0
    seed: int = 0
    lr_schedule: str = "cosine"
    arch: PredictorArch = field(default_factory=PredictorArch)


@dataclass
class PredictorResult:
    params: dc.Params
    best_epoch: int
    train_loss: list[float]
    val_min_ade: list[float]

    def write_curve(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_wta_ade", "val_min_ade"])
            for i, (a, b) in enumerate(zip(self.train_loss, self.val_min_ade)):
                w.writerow([i, f"{a:.10g}", f"{b:.10g}"])


def evaluate_min_ade(stream: str, params: dc.Params, data: Sequence[StreamInput],
                     arch: PredictorArch = PredictorArch(), chunk: int = 256) -> np.ndarray:
    """Per-scene minADE in metres (ego frame, rigid-invariant)."""
    out = []
    for i in range(0, len(data), chunk):
        part = data[i:i + chunk]
        o = stream_forward(stream, dc.leaves(params), part, arch)
        gt = np.stack([b.future for b in part])
        out.append(np.linalg.norm(o.candidates - gt[:, None], axis=-1).mean(-1).min(1))
    return np.concatenate(out)


def train_predictor(stream: str, train: Sequence[StreamInput], val: Sequence[StreamInput],
                    cfg: PredictorConfig) -> PredictorResult:
    """Winner-take-all training; keeps the parameters with the best validation minADE."""
    arch = cfg.arch
    params = init_predictor(stream, cfg.seed, arch)
    state = dc.AdamState()
    rng = np.random.default_rng([cfg.seed, 202])
    gt_all = np.stack([b.future for b in train])
    best = (float(np.mean(evaluate_min_ade(stream, params, val, arch))) if val else np.inf, -1, params)
    train_curve, val_curve = [], []
    step = 0
    total = cfg.epochs * -(-len(train) // cfg.batch_size)
    for epoch in range(cfg.epochs):
        losses = []
        for idx in dc.iterate_minibatches(len(train), cfg.batch_size, rng):
            leaves = dc.leaves(params)
            out = stream_forward(stream, leaves, [train[i] for i in idx], arch, training=True, rng=rng)
            loss, _ = wta_loss(out, gt_all[idx], arch)
            try:
                grads = dc.backward(loss, leaves)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"predictor batch {step}: {exc}", batch_index=step) from exc
            lr = dc.scheduled_lr(cfg.lr, step, total, cfg.lr_schedule)
            params, state = dc.adam_step(params, grads, state, lr, cfg.clip_norm)
            losses.append(float(loss.data[0, 0]))
            step += 1
        train_curve.append(float(np.mean(losses)))
        v = float(np.mean(evaluate_min_ade(stream, params, val, arch))) if val else train_curve[-1]
        val_curve.append(v)
        if v < best[0]:
            best = (v, epoch, params)
    return PredictorResult(best[2], best[1], train_curve, val_curve)


def save_predictor(path, stream: str, result: PredictorResult, arch: PredictorArch = PredictorArch()):
    dc.save_checkpoint(path, result.params, {"stage": f"predictor-{stream}", "stream": stream,
                                             "best_epoch": result.best_epoch, "arch": arch.__dict__})
