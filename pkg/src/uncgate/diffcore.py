"""Small reverse-mode differentiation engine over 2-D float64 arrays.

Every value flowing through a model is a :class:`Tensor` holding a 2-D
numpy array.  Operations record their parents and a closure that maps the
output gradient to parent gradients; :func:`backward` walks the recorded
graph in reverse topological order.

Parameters live outside the graph as plain ``dict[str, ndarray]`` so they
can be checkpointed and updated functionally by :func:`adam_step`.  A
forward pass wraps them with :func:`leaves`.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import GraphCycle, InvalidTemperature, MissingCheckpoint, NonFiniteLoss, ShapeMismatch

Params = dict[str, np.ndarray]


class Tensor:
    """2-D array node in the computation graph."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2:
            raise ShapeMismatch(f"Tensor must be 2-D, got shape {data.shape}")
        self.data = data
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    return Tensor(arr)


def leaves(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap a parameter dict as gradient-tracking leaf tensors."""
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    # Only row broadcasting ((1, n) against (m, n)) and scalars ((1, 1)) occur.
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and shape[1] == grad.shape[1]:
        return grad.sum(axis=0, keepdims=True)
    if shape == (1, 1):
        return np.array([[grad.sum()]])
    if shape[1] == 1 and shape[0] == grad.shape[0]:
        return grad.sum(axis=1, keepdims=True)
    raise ShapeMismatch(f"cannot unbroadcast {grad.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, parents=(a, b), backward_fn=bw, op="add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, parents=(a, b), backward_fn=bw, op="mul")


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data * c, parents=(a,), backward_fn=lambda g: (g * c,), op="scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, parents=(a, b), backward_fn=bw, op="matmul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(a.data * mask, parents=(a,), backward_fn=lambda g: (g * mask,), op="relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor(y, parents=(a,), backward_fn=lambda g: (g * (1.0 - y * y),), op="tanh")


def dropout(a: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training."""
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return Tensor(a.data * keep, parents=(a,), backward_fn=lambda g: (g * keep,), op="dropout")


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ShapeMismatch(f"concat over differing row counts {sorted(rows)}")
    widths = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + widths)
    out = np.concatenate([t.data for t in tensors], axis=1)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return Tensor(out, parents=tuple(tensors), backward_fn=bw, op="concat")


def pad_cols(a: Tensor, width: int) -> Tensor:
    """Zero-pad columns on the right up to ``width``."""
    n = a.shape[1]
    if n > width:
        raise ShapeMismatch(f"cannot pad width {n} down to {width}")
    out = np.zeros((a.shape[0], width))
    out[:, :n] = a.data
    return Tensor(out, parents=(a,), backward_fn=lambda g: (g[:, :n],), op="pad")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.shape[1]

    def bw(g):
        full = np.zeros((a.shape[0], n))
        full[:, start:stop] = g
        return (full,)

    return Tensor(a.data[:, start:stop], parents=(a,), backward_fn=bw, op="slice")


def total(a: Tensor) -> Tensor:
    return Tensor(np.array([[a.data.sum()]]), parents=(a,),
                  backward_fn=lambda g: (np.full(a.shape, g[0, 0]),), op="sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor(np.array([[a.data.mean()]]), parents=(a,),
                  backward_fn=lambda g: (np.full(a.shape, g[0, 0] / n),), op="mean")


def softmax_temperature(logits: Tensor, temperature: float) -> Tensor:
    """Row-wise softmax of ``logits / temperature``."""
    if not (temperature > 0 and np.isfinite(temperature)):
        raise InvalidTemperature(f"temperature must be positive, got {temperature}")
    y = softmax_rows(logits.data, temperature)

    def bw(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - inner) / temperature,)

    return Tensor(y, parents=(logits,), backward_fn=bw, op="softmax")


def softmax_rows(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse shapes {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size

    def bw(g):
        return (g[0, 0] * 2.0 * diff / n,)

    return Tensor(np.array([[np.mean(diff * diff)]]), parents=(pred,), backward_fn=bw, op="mse")


def custom(inputs: Sequence[Tensor], value: float, grads: Sequence[np.ndarray], op="custom") -> Tensor:
    """Scalar node whose input gradients were computed analytically elsewhere."""
    grads = tuple(np.asarray(g, dtype=np.float64) for g in grads)
    for t, g in zip(inputs, grads):
        if t.shape != g.shape:
            raise ShapeMismatch(f"custom gradient {g.shape} for input {t.shape}")

    def bw(g):
        return tuple(g[0, 0] * gi for gi in grads)

    return Tensor(np.array([[value]]), parents=tuple(inputs), backward_fn=bw, op=op)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphCycle(f"cycle through {node!r}")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            if not p.requires_grad:
                continue
            ps = state.get(id(p))
            if ps == 1:
                raise GraphCycle(f"cycle through {p!r}")
            if ps is None:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Mapping[str, Tensor]) -> Params:
    """Gradients of scalar ``loss`` for every tensor in ``wrt``.

    Tensors not reachable from ``loss`` get zero gradients.
    """
    if loss.shape != (1, 1):
        raise ShapeMismatch(f"backward needs a scalar loss, got {loss.shape}")
    if not np.isfinite(loss.data[0, 0]):
        raise NonFiniteLoss(f"loss is {loss.data[0, 0]}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None) if node.backward_fn is not None else grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            k = id(parent)
            grads[k] = grads[k] + pg if k in grads else pg
    return {name: grads.get(id(t), np.zeros_like(t.data)) for name, t in wrt.items()}


# ---------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected stack.  ``layer_widths`` includes the input width,
    so ``(1024, 512, 2)`` is two linear layers."""

    layer_widths: tuple[int, ...]
    activation: str = "relu"
    dropout_rate: float = 0.0
    seed: int = 0
    zero_last: bool = False

    def __post_init__(self):
        if len(self.layer_widths) < 2 or any(int(w) <= 0 for w in self.layer_widths):
            raise ShapeMismatch(f"bad layer widths {self.layer_widths}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate {self.dropout_rate} outside [0, 1)")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"relu": relu, "tanh": tanh}


def init_mlp(spec: MlpSpec, prefix: str = "") -> Params:
    """He-uniform weights scaled by fan-in, zero biases."""
    rng = np.random.default_rng(spec.seed)
    params: Params = {}
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if spec.zero_last and i == spec.n_layers - 1:
            w = np.zeros_like(w)
        params[f"{prefix}W{i}"] = w
        params[f"{prefix}b{i}"] = np.zeros((1, fan_out))
    return params


def mlp_forward(spec: MlpSpec, params: Mapping[str, Tensor], x: Tensor, training=False,
                rng=None, prefix="", activate_last=False) -> Tensor:
    """Linear layers with activation and dropout between them.

    No activation follows the last layer unless ``activate_last``.
    """
    if x.shape[1] != spec.layer_widths[0]:
        raise ShapeMismatch(f"input width {x.shape[1]} != {spec.layer_widths[0]}")
    act = _ACTIVATIONS[spec.activation]
    h = x
    for i in range(spec.n_layers):
        h = matmul(h, params[f"{prefix}W{i}"]) + params[f"{prefix}b{i}"]
        if i < spec.n_layers - 1 or activate_last:
            h = act(h)
            h = dropout(h, spec.dropout_rate, training, rng)
    return h


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    t: int = 0


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float | None) -> Params:
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return dict(grads)
    c = max_norm / norm
    return {k: g * c for k, g in grads.items()}


def scheduled_lr(base_lr: float, step: int, total_steps: int, schedule: str = "cosine") -> float:
    """Learning rate for ``step`` of ``total_steps``; cosine decays to zero."""
    if schedule == "constant" or total_steps <= 0:
        return base_lr
    if schedule != "cosine":
        raise ValueError(f"unknown lr schedule {schedule!r}")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def adam_step(params: Params, grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              clip_norm: float | None = None, betas=(0.9, 0.999), eps=1e-8) -> tuple[Params, AdamState]:
    """Clip by global norm, then one Adam update.  Inputs are not mutated."""
    b1, b2 = betas
    grads = clip_by_global_norm(grads, clip_norm)
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m = b1 * state.m.get(k, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# Checkpoints: npz-compatible zip with fixed timestamps so identical
# parameters always give identical bytes.

_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(params[name], dtype=np.float64),
                                      allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH), buf.getvalue())
        blob = json.dumps(dict(meta or {}), sort_keys=True, indent=1).encode()
        zf.writestr(zipfile.ZipInfo("__meta__.json", date_time=_EPOCH), blob)


def load_checkpoint(path) -> tuple[Params, dict]:
    params: Params = {}
    meta: dict = {}
    try:
        zf = zipfile.ZipFile(path)
    except FileNotFoundError as exc:
        raise MissingCheckpoint(f"no checkpoint at {path}") from exc
    with zf:
        for name in zf.namelist():
            data = zf.read(name)
            if name == "__meta__.json":
                meta = json.loads(data)
            else:
                params[name[:-4]] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    return params, meta


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
