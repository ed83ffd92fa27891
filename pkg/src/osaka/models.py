"""MLP parameter containers, forward pass and inner-loop adaptation."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ndcore as nd
from .ndcore import Tape, Tensor

CHECKPOINT_MAGIC = b"OSKA"
CHECKPOINT_VERSION = 1


class AdaptationError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"inner adaptation diverged at step {step}: {cause}")
        self.step = step


class SpecMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class NetSpec:
    input_dim: int = 16
    hidden_dims: tuple = (64, 64)
    output_dim: int = 5
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> tuple:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1


@dataclass(frozen=True)
class ModelParams:
    """Weights ``(W, b)`` per layer plus log inner-loop step sizes.

    ``W`` has shape ``(fan_in, fan_out)``. ``log_inner_lr`` holds either one
    entry per layer or a single shared entry.
    """

    spec: NetSpec
    layers: tuple
    log_inner_lr: tuple

    def tensors(self) -> list:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        out.extend(self.log_inner_lr)
        return out

    def weight_tensors(self) -> list:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def with_tensors(self, tensors: Sequence) -> "ModelParams":
        tensors = [nd.tensor(t) for t in tensors]
        n = len(self.layers)
        layers = tuple((tensors[2 * i], tensors[2 * i + 1]) for i in range(n))
        lrs = tuple(tensors[2 * n :]) or self.log_inner_lr
        return ModelParams(self.spec, layers, lrs)

    def with_weights(self, tensors: Sequence) -> "ModelParams":
        return self.with_tensors(list(tensors) + list(self.log_inner_lr))

    def watch(self, tape: Tape) -> "ModelParams":
        return self.with_tensors([tape.watch(t) for t in self.tensors()])

    def detach(self) -> "ModelParams":
        return self.with_tensors([t.detach() for t in self.tensors()])

    def inner_lr(self, layer: int) -> Tensor:
        idx = layer if len(self.log_inner_lr) > 1 else 0
        return nd.exp(self.log_inner_lr[idx])

    def inner_lr_values(self) -> np.ndarray:
        return np.exp([float(t.data) for t in self.log_inner_lr])

    def flat(self, include_lr: bool = True) -> np.ndarray:
        ts = self.tensors() if include_lr else self.weight_tensors()
        return np.concatenate([t.data.ravel() for t in ts])

    def from_flat(self, vec: np.ndarray, include_lr: bool = True) -> "ModelParams":
        ts = self.tensors() if include_lr else self.weight_tensors()
        out, pos = [], 0
        for t in ts:
            n = t.data.size
            out.append(Tensor(np.array(vec[pos : pos + n]).reshape(t.shape)))
            pos += n
        if pos != len(vec):
            raise SpecMismatchError(f"flat vector has {len(vec)} entries, expected {pos}")
        return self.with_tensors(out) if include_lr else self.with_weights(out)

    @property
    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors())


def init_params(spec: NetSpec, inner_lr: float = 0.1, shared_lr: bool = False) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if inner_lr <= 0:
        raise ValueError("inner_lr must be positive")
    rng = np.random.default_rng(spec.seed)
    layers = []
    for fan_in, fan_out in zip(spec.dims[:-1], spec.dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((Tensor(w), Tensor(np.zeros(fan_out))))
    n_lr = 1 if shared_lr else spec.n_layers
    lrs = tuple(Tensor(np.log(inner_lr)) for _ in range(n_lr))
    return ModelParams(spec, tuple(layers), lrs)


def _activate(h: Tensor, kind: str) -> Tensor:
    return nd.relu(h) if kind == "relu" else nd.tanh(h)


def forward(params: ModelParams, x) -> Tensor:
    x = nd.tensor(x)
    if x.data.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise nd.DimensionError(
            f"input shape {x.shape} does not match input_dim {params.spec.input_dim}"
        )
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = nd.add(nd.matmul(h, w), b)
        if i < last:
            h = _activate(h, params.spec.activation)
    return h


def loss_fn(params: ModelParams, x, y, kind: str = "ce") -> Tensor:
    logits = forward(params, x)
    if kind == "ce":
        return nd.softmax_cross_entropy(logits, y)
    return nd.mse(logits, np.asarray(y, dtype=np.float64).reshape(logits.shape))


def _is_tracked_on(params: ModelParams, tape: Optional[Tape]) -> bool:
    return tape is not None and any(t.tape is tape for t in params.tensors())


def inner_adapt(
    phi: ModelParams,
    x,
    y,
    steps: int = 1,
    head_only: bool = False,
    taped: bool = False,
    loss: str = "ce",
) -> ModelParams:
    """Run ``steps`` SGD steps from ``phi`` with the per-layer step sizes.

    When ``phi`` is tracked on the active tape the updates are recorded on it,
    so the result stays differentiable in ``phi`` and ``log_inner_lr``. With
    ``taped`` the inner gradients are differentiated too (exact second order);
    otherwise they are treated as constants (first order). Untracked input
    gives an untracked result.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    tape = nd.active_tape()
    if _is_tracked_on(phi, tape):
        return _adapt(phi, tape, x, y, steps, head_only, taped, loss)
    if taped:
        raise nd.ContractError("exact mode needs phi tracked on the active tape")
    if loss == "ce":
        return _adapt_plain(phi, x, y, steps, head_only)
    with Tape() as own:
        theta = _adapt(phi.watch(own), own, x, y, steps, head_only, False, loss)
    return theta.detach()


def _adapt(phi, tape, x, y, steps, head_only, create_graph, loss) -> ModelParams:
    theta = phi
    n = len(phi.layers)
    first = n - 1 if head_only else 0
    for step in range(steps):
        try:
            value = loss_fn(theta, x, y, loss)
            targets = [t for w, b in theta.layers[first:] for t in (w, b)]
            grads = tape.grad(value, targets, create_graph=create_graph, retain_graph=True)
        except (nd.NonFiniteError, FloatingPointError) as exc:
            raise AdaptationError(step, exc) from exc
        layers = list(theta.layers[:first])
        for i in range(first, n):
            w, b = theta.layers[i]
            gw, gb = grads[2 * (i - first)], grads[2 * (i - first) + 1]
            lr = theta.inner_lr(i)
            layers.append((nd.sub(w, nd.mul(lr, gw)), nd.sub(b, nd.mul(lr, gb))))
        theta = ModelParams(theta.spec, tuple(layers), theta.log_inner_lr)
    return theta


def _ce_grads_plain(layers, activation, x, y, first):
    """Loss and CE gradients of the layers from ``first`` on, by hand.

    Same arithmetic as the tape ops; used for untracked adaptation where the
    per-op bookkeeping dominates the cost of these small networks.
    """
    hs, pre = [x], []
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = hs[-1] @ w + b
        pre.append(z)
        if i < last:
            hs.append(np.maximum(z, 0.0) if activation == "relu" else np.tanh(z))
    z = pre[-1]
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = len(y)
    value = -logp[np.arange(n), y].mean()
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(layers)
    for i in range(last, first - 1, -1):
        grads[i] = (hs[i].T @ delta, delta.sum(axis=0))
        if i > first:
            back = delta @ layers[i][0].T
            if activation == "relu":
                delta = back * (pre[i - 1] > 0)
            else:
                delta = back * (1.0 - hs[i] ** 2)
    return value, grads


def _adapt_plain(phi, x, y, steps, head_only) -> ModelParams:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != phi.spec.input_dim:
        raise nd.DimensionError(
            f"input shape {x.shape} does not match input_dim {phi.spec.input_dim}"
        )
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= phi.spec.output_dim):
        raise IndexError("label out of range")
    layers = [(w.data, b.data) for w, b in phi.layers]
    lrs = phi.inner_lr_values()
    n = len(layers)
    first = n - 1 if head_only else 0
    for step in range(steps):
        with np.errstate(all="ignore"):
            value, grads = _ce_grads_plain(layers, phi.spec.activation, x, y, first)
        if not np.isfinite(value):
            raise AdaptationError(step, nd.NonFiniteError("non-finite inner loss"))
        for i in range(first, n):
            lr = lrs[i] if len(lrs) > 1 else lrs[0]
            w, b = layers[i]
            layers[i] = (w - lr * grads[i][0], b - lr * grads[i][1])
    # a non-finite gradient shows up in the weights; the loss check above
    # catches it one step later, this catches it on the last step
    if not all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in layers[first:]):
        raise AdaptationError(steps - 1, nd.NonFiniteError("non-finite fast weights"))
    return ModelParams(
        phi.spec,
        tuple((Tensor(w), Tensor(b)) for w, b in layers),
        tuple(Tensor(t.data) for t in phi.log_inner_lr),
    )


def param_distance(a: ModelParams, b: ModelParams) -> float:
    if a.spec.dims != b.spec.dims or len(a.log_inner_lr) != len(b.log_inner_lr):
        raise SpecMismatchError("parameter sets have different layouts")
    return float(np.linalg.norm(a.flat() - b.flat()))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    header = json.dumps(
        {**asdict(params.spec), "hidden_dims": list(params.spec.hidden_dims),
         "n_inner_lr": len(params.log_inner_lr)},
        sort_keys=True,
    ).encode()
    body = params.flat().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(body)


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an OSKA checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(raw[12 : 12 + hlen])
    n_lr = meta.pop("n_inner_lr")
    spec = NetSpec(**meta)
    template = init_params(spec, shared_lr=(n_lr == 1))
    vec = np.frombuffer(raw[12 + hlen :], dtype="<f8").astype(np.float64)
    return template.from_flat(vec)
