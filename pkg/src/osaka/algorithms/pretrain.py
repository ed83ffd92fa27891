"""MAML pre-training with a meta-learned inner step size."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..models import AdaptationError, ModelParams, NetSpec, forward, init_params, inner_adapt
from ..ndcore import NonFiniteError, Tape, softmax_cross_entropy
from ..stream import Pools, StreamConfig, pretrain_episode
from .optim import AdamState, adam_step

DIVERGENCE_LOSS = 1e3


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"meta-training diverged in epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class PretrainConfig:
    epochs: int = 30
    steps_per_epoch: int = 100
    batch_size: int = 8
    shots: int = 5
    inner_steps: int = 1
    inner_lr_init: float = 0.1
    eta: float = 0.001
    first_order: bool = False
    shared_lr: bool = False
    head_only: bool = False  # ANIL pre-training
    seed: int = 0


@dataclass
class PretrainResult:
    params: ModelParams
    epoch_loss: list = field(default_factory=list)  # mean post-adaptation query loss
    epoch_acc: list = field(default_factory=list)


def meta_loss(
    phi: ModelParams, episode, inner_steps: int, exact: bool, head_only: bool = False
) -> tuple:
    """Mean post-adaptation query loss over the episode's tasks, and accuracy.

    ``phi`` must be tracked on the active tape for the loss to be
    differentiable.
    """
    total, correct, count = None, 0, 0
    for i in range(episode.n_tasks):
        theta = inner_adapt(
            phi, episode.support_x[i], episode.support_y[i], inner_steps, head_only, taped=exact
        )
        logits = forward(theta, episode.query_x[i])
        value = softmax_cross_entropy(logits, episode.query_y[i])
        total = value if total is None else total + value
        correct += int((logits.data.argmax(axis=1) == episode.query_y[i]).sum())
        count += len(episode.query_y[i])
    return total * (1.0 / episode.n_tasks), correct / count


def pretrain_maml(
    spec: NetSpec, stream_cfg: StreamConfig, pools: Pools, cfg: PretrainConfig
) -> PretrainResult:
    """Meta-train an initialization and per-layer inner step sizes with ADAM."""
    phi = init_params(spec, cfg.inner_lr_init, shared_lr=cfg.shared_lr)
    result = PretrainResult(phi)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5052]))
    adam = AdamState.zeros_like([t.data for t in phi.tensors()])
    for epoch in range(cfg.epochs):
        losses, accs = [], []
        for _ in range(cfg.steps_per_epoch):
            episode = pretrain_episode(stream_cfg, pools, cfg.batch_size, cfg.shots, rng)
            try:
                with Tape() as tape:
                    w = phi.watch(tape)
                    value, acc = meta_loss(
                        w, episode, cfg.inner_steps, not cfg.first_order, cfg.head_only
                    )
                    grads = [g.data for g in tape.grad(value, w.tensors())]
            except (NonFiniteError, FloatingPointError, AdaptationError) as exc:
                raise TrainingError(epoch, str(exc)) from exc
            loss = float(value.data)
            if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
                raise TrainingError(epoch, f"meta-loss {loss}")
            phi = phi.with_tensors(adam_step(adam, [t.data for t in phi.tensors()], grads, cfg.eta))
            losses.append(loss)
            accs.append(acc)
        result.epoch_loss.append(float(np.mean(losses)))
        result.epoch_acc.append(float(np.mean(accs)))
    result.params = phi
    return result


def adaptation_accuracy(
    phi: ModelParams, stream_cfg: StreamConfig, pools: Pools, n_tasks: int, shots: int,
    inner_steps: int = 1, seed: int = 0, head_only: bool = False,
) -> float:
    """Query accuracy after ``inner_steps`` adaptation on fresh pre-training tasks."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4556]))
    episode = pretrain_episode(stream_cfg, pools, n_tasks, shots, rng)
    correct = count = 0
    for i in range(n_tasks):
        theta = inner_adapt(phi, episode.support_x[i], episode.support_y[i], inner_steps, head_only)
        pred = forward(theta, episode.query_x[i]).data.argmax(axis=1)
        correct += int((pred == episode.query_y[i]).sum())
        count += len(pred)
    return correct / count
