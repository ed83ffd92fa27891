"""Episode execution, online cumulative metrics and multi-seed aggregation."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ndcore import softmax_cross_entropy
from .models import forward, inner_adapt
from .stream import FAMILIES, Batch, Pools, Stream, StreamConfig, _fresh_context, sample_step

TRACE_COLUMNS = (
    "t", "loss", "acc", "context_id", "family", "true_boundary", "detected_boundary", "modulation",
)
Z95 = 1.96


class MetricError(ValueError):
    pass


class TraceFormatError(ValueError):
    pass


@dataclass
class EpisodeTrace:
    loss: np.ndarray
    acc: np.ndarray
    context_id: np.ndarray
    family: np.ndarray
    true_boundary: np.ndarray
    detected_boundary: np.ndarray
    modulation: np.ndarray
    failed_at: Optional[int] = None  # step whose update raised, if any
    failure: str = ""

    def __len__(self) -> int:
        return len(self.loss)

    @property
    def complete(self) -> bool:
        return self.failed_at is None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for t in range(len(self)):
                w.writerow([
                    t, repr(float(self.loss[t])), repr(float(self.acc[t])),
                    int(self.context_id[t]), self.family[t], int(self.true_boundary[t]),
                    int(self.detected_boundary[t]), repr(float(self.modulation[t])),
                ])
            if self.failed_at is not None:
                fh.write(f"# failed at step {self.failed_at}: {self.failure}\n")

    @classmethod
    def read_csv(cls, path) -> "EpisodeTrace":
        rows = []
        failed_at, failure = None, ""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != TRACE_COLUMNS:
                raise TraceFormatError(f"{path}:1: unexpected header {header}")
            for lineno, row in enumerate(reader, start=2):
                if row and row[0].startswith("#"):
                    text = ",".join(row)
                    if "failed at step" in text:
                        failed_at = int(text.split("failed at step")[1].split(":")[0])
                        failure = text.split(":", 1)[1].strip()
                    continue
                if len(row) != len(TRACE_COLUMNS):
                    raise TraceFormatError(f"{path}:{lineno}: expected {len(TRACE_COLUMNS)} fields")
                try:
                    rows.append((
                        float(row[1]), float(row[2]), int(row[3]), row[4],
                        bool(int(row[5])), bool(int(row[6])), float(row[7]),
                    ))
                except ValueError as exc:
                    raise TraceFormatError(f"{path}:{lineno}: {exc}") from None
                if row[4] not in FAMILIES:
                    raise TraceFormatError(f"{path}:{lineno}: unknown family {row[4]!r}")
        cols = list(zip(*rows)) if rows else [()] * 7
        return cls(
            np.array(cols[0], dtype=float), np.array(cols[1], dtype=float),
            np.array(cols[2], dtype=np.int64), np.array(cols[3], dtype=object),
            np.array(cols[4], dtype=bool), np.array(cols[5], dtype=bool),
            np.array(cols[6], dtype=float), failed_at, failure,
        )


def run_episode(learner, stream: Stream) -> EpisodeTrace:
    """Predict, score, then update, for every step of the stream."""
    T = len(stream)
    loss = np.zeros(T)
    acc = np.zeros(T)
    detected = np.zeros(T, dtype=bool)
    modulation = np.full(T, np.nan)
    failed_at, failure = None, ""
    for t in range(T):
        x, y = stream.x[t], stream.y[t]
        try:
            logits = learner.predict(x)
            loss[t] = float(softmax_cross_entropy(logits, y).data)
        except (ArithmeticError, RuntimeError) as exc:
            # an unscorable prediction ends the episode before step t
            failed_at, failure = t, f"{type(exc).__name__}: {exc}"
            T = t
            break
        acc[t] = float(np.mean(np.argmax(logits, axis=1) == y))
        try:
            diag = learner.update(Batch(x, y))
        except (ArithmeticError, RuntimeError) as exc:
            failed_at, failure = t, f"{type(exc).__name__}: {exc}"
            T = t + 1
            break
        detected[t] = diag.detected_boundary
        modulation[t] = diag.modulation
    return EpisodeTrace(
        loss[:T], acc[:T], stream.context_id[:T].copy(), stream.family[:T].copy(),
        stream.is_boundary[:T].copy(), detected[:T], modulation[:T], failed_at, failure,
    )


def cumulative_accuracy(trace: EpisodeTrace, family: Optional[str] = None) -> float:
    sel = trace.acc if family is None else trace.acc[trace.family == family]
    if len(sel) == 0:
        raise MetricError(f"no steps selected (family={family!r})")
    return float(np.mean(sel))


def fast_weights_baseline(
    phi, cfg: StreamConfig, pools: Pools, family: str, n_tasks: int = 500,
    inner_steps: int = 1, head_only: bool = False, seed: int = 0,
) -> float:
    """Offline accuracy of a frozen initialization that adapts on one batch of
    a fresh ``family`` context and predicts the next batch of that context.

    This is exactly what a frozen learner can do online in the middle of a
    context, so it is the reference point for MAML and ANIL on a family.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4657]))
    n = cfg.samples_per_step
    correct = 0
    for _ in range(n_tasks):
        ctx = _fresh_context(cfg, pools, family, rng)
        xs, ys = sample_step(ctx, pools, n, rng)
        xq, yq = sample_step(ctx, pools, n, rng)
        theta = inner_adapt(phi, xs, ys, inner_steps, head_only)
        correct += int((forward(theta, xq).data.argmax(axis=1) == yq).sum())
    return correct / (n_tasks * n)


def boundary_metrics(
    true_flags: Sequence[bool], detected_flags: Sequence[bool], window: int = 0
) -> tuple:
    """Precision, recall and F1 of detected boundaries.

    A detection at t is a true positive if a true boundary lies within
    ``window`` steps of t; each true boundary can be claimed once.
    Conventions: precision is 1 with no detections, recall is 1 with no true
    boundaries, F1 is 0 when both precision and recall are 0.
    """
    true_idx = np.flatnonzero(np.asarray(true_flags, dtype=bool))
    det_idx = np.flatnonzero(np.asarray(detected_flags, dtype=bool))
    if window == 0:
        tp = len(np.intersect1d(true_idx, det_idx))
    else:
        claimed = set()
        tp = 0
        for d in det_idx:
            for t in true_idx[np.abs(true_idx - d) <= window]:
                if t not in claimed:
                    claimed.add(t)
                    tp += 1
                    break
    precision = 1.0 if len(det_idx) == 0 else tp / len(det_idx)
    recall = 1.0 if len(true_idx) == 0 else tp / len(true_idx)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def trace_boundary_metrics(trace: EpisodeTrace, window: int = 0) -> tuple:
    return boundary_metrics(trace.true_boundary, trace.detected_boundary, window)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunSummary:
    total: float
    family_acc: dict
    family_steps: dict
    precision: float
    recall: float
    f1: float
    seed: int = 0
    config_hash: str = ""

    def metrics(self) -> dict:
        out = {"total": self.total, "precision": self.precision, "recall": self.recall, "f1": self.f1}
        for fam, value in self.family_acc.items():
            out[fam] = value
        return out


def summarize(trace: EpisodeTrace, seed: int = 0, cfg_hash: str = "", window: int = 0) -> RunSummary:
    family_acc, family_steps = {}, {}
    for fam in FAMILIES:
        n = int(np.sum(trace.family == fam))
        family_steps[fam] = n
        family_acc[fam] = cumulative_accuracy(trace, fam) if n else float("nan")
    p, r, f1 = trace_boundary_metrics(trace, window)
    return RunSummary(cumulative_accuracy(trace), family_acc, family_steps, p, r, f1, seed, cfg_hash)


def aggregate(runs: Sequence[RunSummary]) -> dict:
    """Per-metric mean, sample std, 95% CI half-width and n over runs."""
    if len(runs) < 2:
        raise MetricError("aggregation needs at least 2 runs")
    keys = list(runs[0].metrics())
    out = {}
    for key in keys:
        values = np.array([r.metrics()[key] for r in runs], dtype=float)
        values = values[~np.isnan(values)]
        n = len(values)
        if n < 2:
            out[key] = {"mean": float(values.mean()) if n else float("nan"),
                        "std": float("nan"), "ci95": float("nan"), "n": n}
            continue
        mean = float(values.mean())
        # centring on the first run keeps identical runs at exactly zero spread
        std = float((values - values[0]).std(ddof=1))
        out[key] = {"mean": mean, "std": std, "ci95": Z95 * std / math.sqrt(n), "n": n}
    return out


def write_summary_json(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
