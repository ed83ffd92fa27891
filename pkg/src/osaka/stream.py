"""Synthetic OSAKA environment.

Inputs are the sum of a *content* prototype, a *style* vector and isotropic
noise. Pre-training contexts label a subset of content prototypes; the
``ood_inputs`` family does the same on a shifted prototype pool; the
``ood_targets`` family keeps the pre-training input distribution but labels
the style factor instead, so the input marginal is unchanged while p(y|x)
is not.

At continual-learning time the context follows a Markov chain that stays put
with probability ``alpha`` and otherwise draws a fresh context (family by the
mixture weights, then class subset and label bijection uniformly).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Optional

import numpy as np

FAMILIES = ("pretrain", "ood_inputs", "ood_targets")
_STREAM_KEY = 0x5354  # SeedSequence tag separating the stream RNG from others


@dataclass(frozen=True)
class PoolConfig:
    n_pretrain: int = 64
    n_ood: int = 64
    n_styles: int = 16
    shift: float = 1.0
    style_scale: float = 1.0
    seed: int = 1234


@dataclass(frozen=True)
class StreamConfig:
    alpha: float = 0.98
    episode_length: int = 10_000
    mixture: tuple = (0.5, 0.25, 0.25)
    ways: int = 5
    samples_per_step: int = 10
    dim: int = 16
    noise: float = 0.3
    pools: PoolConfig = field(default_factory=PoolConfig)
    seed: int = 0
    # >0 switches to a pre-enumerated list of this many contexts per family
    fixed_contexts: int = 0

    def __post_init__(self):
        if isinstance(self.pools, dict):
            object.__setattr__(self, "pools", PoolConfig(**self.pools))
        object.__setattr__(self, "mixture", tuple(float(m) for m in self.mixture))
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if len(self.mixture) != 3 or abs(sum(self.mixture) - 1.0) > 1e-12:
            raise ValueError(f"mixture must have 3 weights summing to 1, got {self.mixture}")
        if min(self.mixture) < 0:
            raise ValueError("mixture weights must be non-negative")
        if self.ways < 2 or self.samples_per_step < 1 or self.episode_length < 1:
            raise ValueError("ways >= 2, samples_per_step >= 1, episode_length >= 1 required")
        p = self.pools
        if min(p.n_pretrain, p.n_ood, p.n_styles) < self.ways:
            raise ValueError("every pool needs at least `ways` entries")

    def with_seed(self, seed: int) -> "StreamConfig":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class Pools:
    content: np.ndarray  # pre-training prototypes
    ood: np.ndarray  # shifted prototypes for ood_inputs
    styles: np.ndarray
    fixed: Optional[tuple] = None  # per-family tuple of ContextSpec lists

    def content_for(self, family: str) -> np.ndarray:
        return self.ood if family == "ood_inputs" else self.content


@dataclass(frozen=True)
class ContextSpec:
    family: str
    class_subset: tuple  # prototype ids (content or style, see factor)
    label_map: tuple  # label_map[j] is the label of class_subset[j]
    noise: float

    @property
    def factor(self) -> str:
        return "style" if self.family == "ood_targets" else "content"

    @property
    def key(self) -> tuple:
        return (self.family, self.class_subset, self.label_map)


class Batch(NamedTuple):
    """What a learner is allowed to see at one timestep."""

    x: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class StepBatch:
    x: np.ndarray
    y: np.ndarray
    t: int
    context_id: int
    family: str
    is_boundary: bool

    def visible(self) -> Batch:
        return Batch(self.x, self.y)


@dataclass(frozen=True)
class PretrainEpisode:
    support_x: np.ndarray  # (B, k, d)
    support_y: np.ndarray  # (B, k)
    query_x: np.ndarray
    query_y: np.ndarray
    contexts: tuple

    @property
    def n_tasks(self) -> int:
        return self.support_x.shape[0]


# ----------------------------------------------------------------- pools


def build_pools(cfg: StreamConfig, rng: Optional[np.random.Generator] = None) -> Pools:
    p = cfg.pools
    if rng is None:
        rng = np.random.default_rng(p.seed)
    content = rng.standard_normal((p.n_pretrain, cfg.dim))
    ood = p.shift + rng.standard_normal((p.n_ood, cfg.dim))
    styles = p.style_scale * rng.standard_normal((p.n_styles, cfg.dim))
    pools = Pools(content, ood, styles)
    if cfg.fixed_contexts > 0:
        fixed = tuple(
            tuple(_fresh_context(cfg, pools, fam, rng) for _ in range(cfg.fixed_contexts))
            for fam in FAMILIES
        )
        pools = replace(pools, fixed=fixed)
    return pools


def _pool_size(cfg: StreamConfig, family: str) -> int:
    p = cfg.pools
    return {"pretrain": p.n_pretrain, "ood_inputs": p.n_ood, "ood_targets": p.n_styles}[family]


def _fresh_context(cfg: StreamConfig, pools: Pools, family: str, rng) -> ContextSpec:
    subset = rng.choice(_pool_size(cfg, family), size=cfg.ways, replace=False)
    labels = rng.permutation(cfg.ways)
    return ContextSpec(family, tuple(int(s) for s in subset), tuple(int(v) for v in labels), cfg.noise)


def draw_context(cfg: StreamConfig, pools: Pools, rng, exclude: Optional[ContextSpec] = None):
    """Fresh context: family from the mixture, then subset and bijection."""
    while True:
        family = FAMILIES[int(rng.choice(3, p=cfg.mixture))]
        if pools.fixed is None:
            return _fresh_context(cfg, pools, family, rng)
        options = [c for c in pools.fixed[FAMILIES.index(family)] if c != exclude]
        if options:
            return options[int(rng.integers(len(options)))]


def next_context(
    prev: Optional[ContextSpec], cfg: StreamConfig, pools: Pools, rng
) -> ContextSpec:
    if prev is not None and rng.random() < cfg.alpha:
        return prev
    return draw_context(cfg, pools, rng, exclude=prev)


# --------------------------------------------------------------- sampling


def _class_order(n: int, ways: int, rng) -> np.ndarray:
    # class-balanced: successive random permutations of the label set
    rounds = -(-n // ways)
    return np.concatenate([rng.permutation(ways) for _ in range(rounds)])[:n]


def sample_step(ctx: ContextSpec, pools: Pools, n: int, rng) -> tuple:
    """Draw ``n`` labelled examples from a context; returns ``(x, y)``."""
    order = _class_order(n, len(ctx.class_subset), rng)
    chosen = np.asarray(ctx.class_subset)[order]
    content_pool = pools.content_for(ctx.family)
    if ctx.factor == "content":
        content_ids = chosen
        style_ids = rng.integers(len(pools.styles), size=n)
    else:
        style_ids = chosen
        content_ids = rng.integers(len(content_pool), size=n)
    x = content_pool[content_ids] + pools.styles[style_ids]
    if ctx.noise > 0:
        x = x + ctx.noise * rng.standard_normal(x.shape)
    y = np.asarray(ctx.label_map)[order]
    return x, y.astype(np.int64)


def pretrain_episode(
    cfg: StreamConfig, pools: Pools, batch_size: int, shots: int, rng
) -> PretrainEpisode:
    """``batch_size`` pre-training tasks split into ``shots`` support examples
    and ``samples_per_step - shots`` query examples each."""
    if not 1 <= shots < cfg.samples_per_step:
        raise ValueError(f"shots must lie in [1, {cfg.samples_per_step})")
    xs, ys, ctxs = [], [], []
    for _ in range(batch_size):
        ctx = _fresh_context(cfg, pools, "pretrain", rng)
        x, y = sample_step(ctx, pools, cfg.samples_per_step, rng)
        xs.append(x)
        ys.append(y)
        ctxs.append(ctx)
    x, y = np.stack(xs), np.stack(ys)
    return PretrainEpisode(x[:, :shots], y[:, :shots], x[:, shots:], y[:, shots:], tuple(ctxs))


# ----------------------------------------------------------------- stream


def stream_rng(cfg: StreamConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, _STREAM_KEY]))


class Stream:
    """Materialized CL episode of ``episode_length`` steps.

    Context ids are assigned in order of first appearance, so a revisited
    context keeps its id.
    """

    def __init__(self, cfg: StreamConfig, pools: Optional[Pools] = None):
        self.cfg = cfg
        self.pools = pools if pools is not None else build_pools(cfg)
        rng = stream_rng(cfg)
        T, n, d = cfg.episode_length, cfg.samples_per_step, cfg.dim
        self.x = np.empty((T, n, d))
        self.y = np.empty((T, n), dtype=np.int64)
        self.context_id = np.empty(T, dtype=np.int64)
        self.family = np.empty(T, dtype=object)
        self.contexts: list[ContextSpec] = []
        ids: dict = {}
        ctx = None
        for t in range(T):
            ctx = next_context(ctx, cfg, self.pools, rng)
            cid = ids.setdefault(ctx.key, len(ids))
            if cid == len(self.contexts):
                self.contexts.append(ctx)
            self.x[t], self.y[t] = sample_step(ctx, self.pools, n, rng)
            self.context_id[t] = cid
            self.family[t] = ctx.family
        self.is_boundary = np.zeros(T, dtype=bool)
        self.is_boundary[1:] = self.context_id[1:] != self.context_id[:-1]

    def __len__(self) -> int:
        return self.cfg.episode_length

    def __getitem__(self, t: int) -> StepBatch:
        return StepBatch(
            self.x[t], self.y[t], t, int(self.context_id[t]), self.family[t],
            bool(self.is_boundary[t]),
        )

    def __iter__(self) -> Iterator[StepBatch]:
        for t in range(len(self)):
            yield self[t]

    def write_truth_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "context_id", "is_boundary"])
            for t in range(len(self)):
                w.writerow([t, int(self.context_id[t]), int(self.is_boundary[t])])


def stream_iterator(cfg: StreamConfig, pools: Optional[Pools] = None) -> Iterator[StepBatch]:
    return iter(Stream(cfg, pools))


# --------------------------------------------------------------- profiles


def profile_to_dict(cfg: StreamConfig) -> dict:
    d = asdict(cfg)
    d["episode_length"] = cfg.episode_length
    d["mixture"] = list(cfg.mixture)
    return d


def profile_from_dict(d: dict) -> StreamConfig:
    d = dict(d)
    if "pools" in d and isinstance(d["pools"], dict):
        d["pools"] = PoolConfig(**d["pools"])
    return StreamConfig(**d)


def load_profile(path) -> StreamConfig:
    return profile_from_dict(json.loads(Path(path).read_text()))


def save_profile(cfg: StreamConfig, path) -> None:
    Path(path).write_text(json.dumps(profile_to_dict(cfg), indent=2, sort_keys=True))


# ---------------------------------------------- sinusoid regression family


@dataclass(frozen=True)
class SinusoidContext:
    amplitude: float
    phase: float


def sinusoid_stream(
    episode_length: int, alpha: float, samples_per_step: int, seed: int
) -> Iterator[tuple]:
    """Regression stream for MSE-mode smoke tests; yields ``(x, y, ctx)``
    with ``x`` of shape (n, 1) on [-5, 5] and ``y = A sin(x + p)``."""
    rng = np.random.default_rng(seed)
    ctx = None
    for _ in range(episode_length):
        if ctx is None or rng.random() >= alpha:
            ctx = SinusoidContext(float(rng.uniform(0.1, 5.0)), float(rng.uniform(0, np.pi)))
        x = rng.uniform(-5.0, 5.0, size=(samples_per_step, 1))
        yield x, ctx.amplitude * np.sin(x + ctx.phase), ctx
