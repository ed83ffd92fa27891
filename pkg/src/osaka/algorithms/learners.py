"""Online learners for the continual-learning phase.

Every learner is driven as ``predict(x)`` followed by ``update(batch)``; the
prediction at step t only uses state built from steps < t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .. import ndcore as nd
from ..models import ModelParams, NetSpec, forward, init_params, inner_adapt, loss_fn
from ..ndcore import Tape
from ..stream import Batch
from .optim import AdamState, BgdState, adam_step, bgd_step

KINDS = (
    "online_adam",
    "fine_tuning",
    "maml",
    "anil",
    "bgd",
    "meta_bgd",
    "cmaml",
    "cmaml_no_pap",
)
NEEDS_CHECKPOINT = ("fine_tuning", "maml", "anil")


class ConfigError(ValueError):
    pass


@dataclass
class LearnerConfig:
    """Learner block of a run config. ``lam`` is stored under ``lambda`` in JSON."""

    kind: str = "cmaml"
    eta: float = 0.001
    inner_lr_init: float = 0.1
    inner_steps: int = 1
    gamma: float = 1.0
    lam: float = 1.0
    first_order: bool = True
    mc_samples: int = 5
    beta: float = 1.0
    sigma0: float = 0.01
    pretrain_checkpoint: Optional[str] = None
    # ablation switches (C-MAML rows: +pre, +UM, +PAP)
    pretrained: bool = True
    um: bool = True
    pap: bool = True
    um_slope: float = 1.0
    buffer_split: float = 0.5
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown learner kind {self.kind!r}")
        if self.kind == "cmaml_no_pap":
            self.pap = False
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if self.kind.startswith("cmaml"):
            if self.lam <= 0:
                raise ConfigError("lambda must be > 0")
            # -inf is accepted to force a detection on every step
            if not (self.gamma > 0 or self.gamma == -math.inf):
                raise ConfigError("gamma must be > 0")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def uses_checkpoint(self) -> bool:
        return self.pretrained and self.kind in NEEDS_CHECKPOINT + ("cmaml", "cmaml_no_pap")

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        for key in ("gamma", "lam"):
            if isinstance(d.get(key), str):
                d[key] = float(d[key])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown learner fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["lambda"] = d.pop("lam")
        for key in ("gamma", "lambda"):
            if isinstance(d[key], float) and math.isinf(d[key]):
                d[key] = "inf" if d[key] > 0 else "-inf"
        return d


@dataclass
class StepDiagnostics:
    detected_boundary: bool = False
    modulation: float = float("nan")


def update_modulation(loss: float, lam: float, slope: float = 1.0) -> float:
    """Logistic gate centred at ``lam``: 1 / (1 + exp(-slope * (loss - lam)))."""
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    z = slope * (loss - lam)
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def shift_detected(incurred: float, virtual: float, gamma: float) -> bool:
    """Boundary rule: the fresh model from phi beats the running one by at least gamma."""
    return incurred - virtual >= gamma


def _ce(params: ModelParams, x, y) -> float:
    return float(loss_fn(params, x, y).data)


def _grads(params: ModelParams, x, y, weights_only: bool = False) -> list:
    with Tape() as tape:
        w = params.watch(tape)
        value = loss_fn(w, x, y)
        targets = w.weight_tensors() if weights_only else w.tensors()
        return [g.data for g in tape.grad(value, targets)]


class Learner:
    """Base class: holds the predictive parameters and caches the last forward."""

    kind = "base"

    def __init__(self):
        self._cache_x = None
        self._cache_logits = None

    def current_params(self) -> ModelParams:
        raise NotImplementedError

    def predict(self, x: np.ndarray) -> np.ndarray:
        logits = forward(self.current_params(), x).data
        self._cache_x, self._cache_logits = x, logits
        return logits

    def incurred_loss(self, batch: Batch) -> float:
        if self._cache_x is batch.x:
            logits = self._cache_logits
        else:
            logits = forward(self.current_params(), batch.x).data
        return float(nd.softmax_cross_entropy(logits, batch.y).data)

    def update(self, batch: Batch) -> StepDiagnostics:
        raise NotImplementedError


class AdamLearner(Learner):
    """Online ADAM on the incoming batch; covers Online ADAM and Fine tuning."""

    def __init__(self, params: ModelParams, eta: float, kind: str = "online_adam"):
        super().__init__()
        self.kind = kind
        self.params = params
        self.eta = eta
        self.adam = AdamState.zeros_like([t.data for t in params.weight_tensors()])

    def current_params(self):
        return self.params

    def update(self, batch):
        grads = _grads(self.params, batch.x, batch.y, weights_only=True)
        new = adam_step(self.adam, [t.data for t in self.params.weight_tensors()], grads, self.eta)
        self.params = self.params.with_weights(new)
        return StepDiagnostics()


class MamlLearner(Learner):
    """Frozen slow weights; fast weights re-adapted from phi on each batch."""

    def __init__(self, phi: ModelParams, inner_steps: int = 1, head_only: bool = False):
        super().__init__()
        self.kind = "anil" if head_only else "maml"
        self.phi = phi
        self.theta = phi
        self.inner_steps = inner_steps
        self.head_only = head_only

    def current_params(self):
        return self.theta

    def update(self, batch):
        self.theta = inner_adapt(self.phi, batch.x, batch.y, self.inner_steps, self.head_only)
        return StepDiagnostics()


class BgdLearner(Learner):
    kind = "bgd"

    def __init__(self, params: ModelParams, cfg: LearnerConfig, rng):
        super().__init__()
        self.template = params
        self.state = BgdState.init(params.flat(include_lr=False), cfg.sigma0, cfg.mc_samples, cfg.beta)
        self.rng = rng

    def mean_params(self) -> ModelParams:
        return self.template.from_flat(self.state.mu, include_lr=False)

    def current_params(self):
        return self.mean_params()

    def _grad_at(self, vec, batch):
        params = self.template.from_flat(vec, include_lr=False)
        return np.concatenate([g.ravel() for g in _grads(params, batch.x, batch.y, True)])

    def update(self, batch):
        self.state = bgd_step(self.state, lambda v: self._grad_at(v, batch), self.rng)
        return StepDiagnostics()


class MetaBgdLearner(BgdLearner):
    """BGD posterior over the initialization, first-order fast weights on top."""

    kind = "meta_bgd"

    def __init__(self, params, cfg, rng):
        super().__init__(params, cfg, rng)
        self.inner_steps = cfg.inner_steps
        self.prev: Optional[Batch] = None
        self.theta = self.mean_params()

    def current_params(self):
        return self.theta

    def _grad_at(self, vec, batch):
        phi = self.template.from_flat(vec, include_lr=False)
        if self.prev is not None:
            phi = inner_adapt(phi, self.prev.x, self.prev.y, self.inner_steps)
        return np.concatenate([g.ravel() for g in _grads(phi, batch.x, batch.y, True)])

    def update(self, batch):
        self.state = bgd_step(self.state, lambda v: self._grad_at(v, batch), self.rng)
        self.prev = batch
        self.theta = inner_adapt(self.mean_params(), batch.x, batch.y, self.inner_steps)
        return StepDiagnostics()


class CmamlLearner(Learner):
    """Continual-MAML at CL time.

    With ``pap`` the fast weights keep fine-tuning while no context shift is
    detected and incoming batches are buffered; a detected shift consolidates
    the buffer into the slow weights with a modulated ADAM step and resets the
    fast weights. Without ``pap`` the fast weights are reset every step and the
    slow weights are updated on steps where no shift is detected.
    """

    def __init__(self, phi: ModelParams, cfg: LearnerConfig, rng):
        super().__init__()
        self.kind = "cmaml" if cfg.pap else "cmaml_no_pap"
        self.cfg = cfg
        self.phi = phi
        self.theta = phi
        self.buffer: list[Batch] = []
        self.prev: Optional[Batch] = None
        self.rng = rng
        self.adam = AdamState.zeros_like([t.data for t in phi.tensors()])

    def current_params(self):
        return self.theta

    def modulation(self, loss: float) -> float:
        if not self.cfg.um:
            return 1.0
        return update_modulation(loss, self.cfg.lam, self.cfg.um_slope)

    def _adapt(self, params, x, y):
        return inner_adapt(params, x, y, self.cfg.inner_steps)

    def _meta_step(self, adapt_x, adapt_y, eval_x, eval_y, lr_scale_from_loss: Optional[float]):
        """ADAM step on phi for L(adapt(phi; adapt data); eval data).

        Returns the modulation factor used. ``adapt_x`` may be None, in which
        case the loss is taken at phi itself.
        """
        exact = not self.cfg.first_order
        with Tape() as tape:
            w = self.phi.watch(tape)
            theta = w
            if adapt_x is not None:
                theta = inner_adapt(w, adapt_x, adapt_y, self.cfg.inner_steps, taped=exact)
            value = loss_fn(theta, eval_x, eval_y)
            grads = [g.data for g in tape.grad(value, w.tensors())]
        gate_loss = float(value.data) if lr_scale_from_loss is None else lr_scale_from_loss
        factor = self.modulation(gate_loss)
        new = adam_step(self.adam, [t.data for t in self.phi.tensors()], grads, self.cfg.eta * factor)
        self.phi = self.phi.with_tensors(new)
        return factor

    def update(self, batch):
        return self._step_pap(batch) if self.cfg.pap else self._step_no_pap(batch)

    def _step_pap(self, batch):
        loss_prev = self.incurred_loss(batch)
        virtual = self._adapt(self.phi, batch.x, batch.y)
        if not shift_detected(loss_prev, _ce(virtual, batch.x, batch.y), self.cfg.gamma):
            self.theta = self._adapt(self.theta, batch.x, batch.y)
            self.buffer.append(batch)
            return StepDiagnostics(False)
        factor = float("nan")
        if self.buffer:
            x = np.concatenate([b.x for b in self.buffer])
            y = np.concatenate([b.y for b in self.buffer])
            perm = self.rng.permutation(len(y))
            n_train = min(max(int(round(len(y) * self.cfg.buffer_split)), 1), len(y) - 1)
            tr, te = perm[:n_train], perm[n_train:]
            if len(te) == 0:  # single-example buffer: train and test coincide
                tr = te = perm
            factor = self._meta_step(x[tr], y[tr], x[te], y[te], None)
        self.buffer = []
        self.theta = self._adapt(self.phi, batch.x, batch.y)
        return StepDiagnostics(True, factor)

    def _step_no_pap(self, batch):
        loss_prev = self.incurred_loss(batch)
        self.theta = self._adapt(self.phi, batch.x, batch.y)
        detected = shift_detected(loss_prev, _ce(self.theta, batch.x, batch.y), self.cfg.gamma)
        factor = float("nan")
        if not detected:
            prev = self.prev
            factor = self._meta_step(
                None if prev is None else prev.x,
                None if prev is None else prev.y,
                batch.x,
                batch.y,
                loss_prev,
            )
        self.prev = batch
        return StepDiagnostics(detected, factor)


def make_learner(
    cfg: LearnerConfig,
    spec: NetSpec,
    checkpoint: Optional[ModelParams] = None,
    seed: int = 0,
) -> Learner:
    """Build a learner. ``seed`` drives the random init and the learner's RNG."""
    ss = np.random.SeedSequence([seed, 0x4C52])
    init_seed, rng_seed = ss.generate_state(2)
    rng = np.random.default_rng(rng_seed)

    def fresh():
        s = NetSpec(spec.input_dim, spec.hidden_dims, spec.output_dim, spec.activation, int(init_seed))
        return init_params(s, cfg.inner_lr_init)

    if cfg.uses_checkpoint and checkpoint is None:
        raise ConfigError(f"learner {cfg.label!r} needs a pre-training checkpoint")
    base = checkpoint if cfg.uses_checkpoint else fresh()

    if cfg.kind == "online_adam":
        return AdamLearner(fresh(), cfg.eta, "online_adam")
    if cfg.kind == "fine_tuning":
        return AdamLearner(base, cfg.eta, "fine_tuning")
    if cfg.kind in ("maml", "anil"):
        return MamlLearner(base, cfg.inner_steps, head_only=cfg.kind == "anil")
    if cfg.kind == "bgd":
        return BgdLearner(fresh(), cfg, rng)
    if cfg.kind == "meta_bgd":
        return MetaBgdLearner(base, cfg, rng)
    return CmamlLearner(base, cfg, rng)
