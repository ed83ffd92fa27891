"""Experiment runner for the OSAKA stream: pretrain, run, search and report.

One JSON config drives every command. Exit codes: 0 ok, 1 configuration
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .algorithms import (
    ConfigError,
    LearnerConfig,
    PretrainConfig,
    TrainingError,
    adaptation_accuracy,
    make_learner,
    pretrain_maml,
)
from .eval import (
    EpisodeTrace,
    MetricError,
    TraceFormatError,
    aggregate,
    config_hash,
    run_episode,
    summarize,
    write_summary_json,
)
from .models import NetSpec, load_checkpoint, save_checkpoint
from .stream import FAMILIES, Stream, StreamConfig, build_pools, profile_from_dict, profile_to_dict

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# Hyperparameter grid used by random search when the config does not give one.
DEFAULT_SPACE = {
    "eta": [1e-4, 5e-4, 1e-3, 5e-3, 1e-2],
    "batch_size": [1, 2, 4, 8, 16],
    "inner_lr_init": [5e-4, 1e-3, 5e-3, 0.01, 0.05, 0.1, 0.5],
    "inner_steps": [1, 2, 4, 8, 16],
    "first_order": [True, False],
    "mc_samples": [5],
    "beta": [0.5, 1.0, 10.0],
    "sigma0": [0.001, 0.01, 0.1],
    "gamma": [0.25, 0.5, 1.0, 2.0, 3.0, 5.0],
    "lambda": [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0],
}

# Which grid entries each learner kind actually consumes. ``batch_size`` is a
# pre-training setting; it only matters to kinds that load a checkpoint.
KIND_PARAMS = {
    "online_adam": ("eta",),
    "fine_tuning": ("eta", "batch_size"),
    "maml": ("inner_steps", "batch_size"),
    "anil": ("inner_steps", "batch_size"),
    "bgd": ("mc_samples", "beta", "sigma0"),
    "meta_bgd": ("inner_lr_init", "inner_steps", "mc_samples", "beta", "sigma0"),
    "cmaml": ("eta", "inner_steps", "first_order", "gamma", "lambda", "batch_size"),
    "cmaml_no_pap": ("eta", "inner_steps", "first_order", "gamma", "lambda", "batch_size"),
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    stream: StreamConfig
    learners: list
    seeds: list
    output_dir: Path
    pretrain: dict = field(default_factory=dict)  # name -> PretrainConfig
    model: dict = field(default_factory=dict)
    seed: int = 0
    search: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    # fixed at load time so --output-dir overrides keep finding checkpoints
    checkpoint_dir: Optional[Path] = None
    base_dir: Path = Path(".")

    def net_spec(self) -> NetSpec:
        return NetSpec(
            input_dim=self.stream.dim,
            hidden_dims=tuple(self.model.get("hidden_dims", (64, 64))),
            output_dim=self.stream.ways,
            activation=self.model.get("activation", "relu"),
            seed=int(self.model.get("seed", 0)),
        )

    def checkpoint_path(self, name: str) -> Path:
        return (self.checkpoint_dir or self.output_dir / "checkpoints") / f"{name}.oska"

    def episode_seed(self, s: int) -> int:
        return self.seed + int(s)


def load_config(path, seed_override: Optional[str] = None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", EXIT_CONFIG) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON: {exc}", EXIT_CONFIG) from None
    if seed_override is None:
        seed_override = os.environ.get("OSAKA_SEED")
    try:
        return _parse_config(raw, Path(path).parent, seed_override)
    except (TypeError, ValueError, KeyError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_CONFIG) from None


def _parse_config(raw: dict, base: Path, seed_override: Optional[str]) -> ExperimentConfig:
    version = raw.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported config version {version}")
    seed = int(raw.get("seed", 0))
    if seed_override not in (None, ""):
        seed = int(seed_override)
    stream = profile_from_dict(raw.get("stream", {}))
    learners = [LearnerConfig.from_dict(d) for d in raw.get("learners", [])]
    labels = [lc.label for lc in learners]
    if len(set(labels)) != len(labels):
        raise ValueError(f"learner labels must be unique, got {labels}")
    seeds = [int(s) for s in raw.get("seeds", [0])]
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    known = {f.name for f in fields(PretrainConfig)}
    pretrain = {}
    for name, block in raw.get("pretrain", {}).items():
        unknown = set(block) - known
        if unknown:
            raise ValueError(f"pretrain.{name}: unknown fields {sorted(unknown)}")
        pretrain[name] = PretrainConfig(**block)
    out = Path(raw.get("output_dir", "runs/default"))
    if not out.is_absolute():
        out = base / out
    return ExperimentConfig(
        stream=stream, learners=learners, seeds=seeds, output_dir=out, pretrain=pretrain,
        model=raw.get("model", {}), seed=seed, search=raw.get("search", {}), raw=raw,
        checkpoint_dir=out / "checkpoints", base_dir=base,
    )


def _checkpoint_name(lc: LearnerConfig) -> str:
    return lc.pretrain_checkpoint or ("anil" if lc.kind == "anil" else "maml")


def resolve_checkpoint(cfg: ExperimentConfig, lc: LearnerConfig) -> Optional[Path]:
    """Path of the checkpoint a learner needs, or None if it trains from scratch."""
    if not lc.uses_checkpoint:
        return None
    ref = _checkpoint_name(lc)
    if ref in cfg.pretrain or not ref.endswith(".oska"):
        return cfg.checkpoint_path(ref)
    path = Path(ref)
    return path if path.is_absolute() else cfg.base_dir / path


# ---------------------------------------------------------------- workers


def _pretrain_job(spec: NetSpec, stream: StreamConfig, pc: PretrainConfig):
    pools = build_pools(stream)
    result = pretrain_maml(spec, stream, pools, pc)
    acc = adaptation_accuracy(result.params, stream, pools, 500, pc.shots, pc.inner_steps,
                              seed=pc.seed + 1, head_only=pc.head_only)
    return result, acc


def _episode_job(job: dict) -> dict:
    """Run one (learner, seed) episode. Top-level so worker processes can import it."""
    stream = profile_from_dict(job["stream"]).with_seed(job["seed"])
    lc = LearnerConfig.from_dict(job["learner"])
    spec = NetSpec(**job["spec"])
    ckpt = load_checkpoint(job["checkpoint"]) if job["checkpoint"] else None
    learner = make_learner(lc, spec, ckpt, job["seed"])
    trace = run_episode(learner, Stream(stream, build_pools(stream)))
    summary = summarize(trace, job["seed"], job["hash"]) if len(trace) else None
    return {"trace": trace, "summary": summary}


def _map(fn, jobs: list, n_workers: int) -> list:
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, jobs))


def _spec_dict(spec: NetSpec) -> dict:
    d = asdict(spec)
    d["hidden_dims"] = list(spec.hidden_dims)
    return d


# ---------------------------------------------------------------- pretrain


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    if not cfg.pretrain:
        raise CliError("config has no 'pretrain' block", EXIT_CONFIG)
    names = args.only or list(cfg.pretrain)
    unknown = set(names) - set(cfg.pretrain)
    if unknown:
        raise CliError(f"unknown pretrain entries {sorted(unknown)}", EXIT_CONFIG)
    cfg.checkpoint_path("x").parent.mkdir(parents=True, exist_ok=True)
    spec = cfg.net_spec()
    for name in names:
        pc = replace(cfg.pretrain[name], seed=cfg.pretrain[name].seed + cfg.seed)
        if args.first_order:
            pc = replace(pc, first_order=True)
        try:
            result, acc = _pretrain_job(spec, cfg.stream, pc)
        except TrainingError as exc:
            raise CliError(f"pretrain {name}: {exc}", EXIT_RUNTIME) from None
        path = cfg.checkpoint_path(name)
        save_checkpoint(result.params, path)
        manifest = {
            "name": name,
            "checkpoint": path.name,
            "spec": _spec_dict(spec),
            "pretrain": asdict(pc),
            "stream": profile_to_dict(cfg.stream),
            "epochs": pc.epochs,
            "epoch_meta_loss": result.epoch_loss,
            "epoch_query_acc": result.epoch_acc,
            "final_meta_loss": result.epoch_loss[-1] if result.epoch_loss else None,
            "post_adaptation_acc": acc,
            "inner_lr": result.params.inner_lr_values().tolist(),
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        print(f"{name}: wrote {path} (post-adaptation accuracy {acc:.3f})")
    return EXIT_OK


# ---------------------------------------------------------------- run


def _check_checkpoints(cfg: ExperimentConfig, learners) -> dict:
    paths = {}
    for lc in learners:
        path = resolve_checkpoint(cfg, lc)
        if path is not None and not path.exists():
            raise CliError(
                f"learner {lc.label!r} needs checkpoint {path}; run `osaka pretrain` first",
                EXIT_CONFIG,
            )
        paths[lc.label] = str(path) if path else None
    return paths


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, learners=None) -> dict:
    """Run every (learner, seed) episode; returns {label: [result per seed]}."""
    learners = learners or cfg.learners
    if jobs < 1:
        raise CliError("--jobs must be >= 1", EXIT_CONFIG)
    if not learners:
        raise CliError("config lists no learners", EXIT_CONFIG)
    ckpts = _check_checkpoints(cfg, learners)
    spec = _spec_dict(cfg.net_spec())
    stream = profile_to_dict(cfg.stream)
    work = []
    for lc in learners:
        h = config_hash({"learner": lc.to_dict(), "stream": stream, "spec": spec})
        for s in cfg.seeds:
            work.append({
                "key": (lc.label, s), "learner": lc.to_dict(), "stream": stream, "spec": spec,
                "checkpoint": ckpts[lc.label], "seed": cfg.episode_seed(s), "hash": h,
            })
    results = _map(_episode_job, work, jobs)
    out = {}
    for job, res in zip(work, results):
        out.setdefault(job["key"][0], []).append((job["key"][1], res))
    return out


def _with_output(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "output_dir", None):
        return replace(cfg, output_dir=Path(args.output_dir))
    return cfg


def cmd_run(args) -> int:
    cfg = _with_output(load_config(args.config), args)
    if args.alpha is not None:
        try:
            cfg = replace(cfg, stream=replace(cfg.stream, alpha=args.alpha))
        except ValueError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from None
    results = run_experiment(cfg, args.jobs)
    failed = []
    for lc in cfg.learners:
        runs = results[lc.label]
        tdir = cfg.output_dir / "traces" / lc.label
        tdir.mkdir(parents=True, exist_ok=True)
        for s, res in runs:
            res["trace"].write_csv(tdir / f"seed_{s}.csv")
            if not res["trace"].complete:
                failed.append(f"{lc.label}/seed {s}: {res['trace'].failure}")
        scored = [(s, res["summary"]) for s, res in runs if res["summary"] is not None]
        summaries = [sm for _, sm in scored]
        doc = {
            "learner": lc.to_dict(),
            "stream": profile_to_dict(cfg.stream),
            "seeds": [s for s, _ in runs],
            "runs": [dict(asdict(sm), seed=s) for s, sm in scored],
            "aggregate": aggregate(summaries) if len(summaries) > 1 else None,
        }
        sdir = cfg.output_dir / "summary"
        sdir.mkdir(parents=True, exist_ok=True)
        write_summary_json(doc, sdir / f"{lc.label}.json")
        if summaries:
            total = np.mean([sm.total for sm in summaries])
            print(f"{lc.label:16s} total accuracy {total:.4f} over {len(summaries)} seed(s)")
    if failed:
        for line in failed:
            print(f"episode failed: {line}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------- search


def search_space(cfg: ExperimentConfig) -> dict:
    space = cfg.search.get("space", DEFAULT_SPACE)
    if not space or any(len(v) == 0 for v in space.values()):
        raise CliError("search space is empty", EXIT_CONFIG)
    return space


def sample_trial(space: dict, kinds: list, rng) -> dict:
    """A kind uniformly, then every grid entry the kind uses uniformly."""
    kind = kinds[int(rng.integers(len(kinds)))]
    params = {"kind": kind}
    for key in KIND_PARAMS[kind]:
        if key in space:
            values = space[key]
            params[key] = values[int(rng.integers(len(values)))]
    return params


def _trial_pretrain_name(cfg: ExperimentConfig, lc_params: dict) -> Optional[str]:
    if "batch_size" not in lc_params:
        return None
    base_name = "anil" if lc_params["kind"] == "anil" else "maml"
    return f"{base_name}_bs{lc_params['batch_size']}"


def cmd_search(args) -> int:
    cfg = _with_output(load_config(args.config), args)
    if args.budget < 1:
        raise CliError("budget must be >= 1", EXIT_CONFIG)
    space = search_space(cfg)
    kinds = cfg.search.get("kinds", [lc.kind for lc in cfg.learners] or ["cmaml"])
    if not kinds or any(k not in KIND_PARAMS for k in kinds):
        raise CliError(f"bad search kinds {kinds}", EXIT_CONFIG)
    seeds = cfg.search.get("seeds", cfg.seeds[:2] if len(cfg.seeds) >= 2 else [0, 1])[:2]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5345]))
    trials = [sample_trial(space, kinds, rng) for _ in range(args.budget)]

    # pre-train one checkpoint per distinct meta-batch size a trial asks for
    cfg.checkpoint_path("x").parent.mkdir(parents=True, exist_ok=True)
    base_pc = {name: pc for name, pc in cfg.pretrain.items()}
    learners = []
    for i, params in enumerate(trials):
        fields_ = {k: v for k, v in params.items() if k != "batch_size"}
        name = _trial_pretrain_name(cfg, params)
        lc = LearnerConfig.from_dict({**fields_, "name": f"trial{i:04d}"})
        if name and lc.uses_checkpoint:
            root = "anil" if lc.kind == "anil" else "maml"
            pc = base_pc.get(root, PretrainConfig(head_only=lc.kind == "anil"))
            pc = replace(pc, batch_size=int(params["batch_size"]), seed=pc.seed + cfg.seed)
            path = cfg.checkpoint_path(name)
            if not path.exists():
                try:
                    result, _ = _pretrain_job(cfg.net_spec(), cfg.stream, pc)
                except TrainingError as exc:
                    raise CliError(f"pretrain {name}: {exc}", EXIT_RUNTIME) from None
                save_checkpoint(result.params, path)
            lc = replace(lc, pretrain_checkpoint=name)
        learners.append(lc)

    chance = 1.0 / cfg.stream.ways
    first = run_experiment(replace(cfg, seeds=seeds[:1]), args.jobs, learners)
    def score(res):
        return res["summary"].total if res["summary"] is not None else 0.0

    keep = [lc for lc in learners if score(first[lc.label][0][1]) > chance]
    second = run_experiment(replace(cfg, seeds=seeds[1:]), args.jobs, keep) if keep and len(seeds) > 1 else {}

    rows = []
    for i, (lc, params) in enumerate(zip(learners, trials)):
        a0 = score(first[lc.label][0][1])
        runs = second.get(lc.label, [])
        a1 = score(runs[0][1]) if runs else None
        gated = lc.label not in {k.label for k in keep}
        mean = a0 if a1 is None else (a0 + a1) / 2
        rows.append({"trial": i, "params": params, "acc_seed0": a0, "acc_seed1": a1,
                     "mean": mean, "gated": gated, "learner": lc})
    rows.sort(key=lambda r: (-r["mean"], r["trial"]))

    sdir = cfg.output_dir / "search"
    sdir.mkdir(parents=True, exist_ok=True)
    with open(sdir / "trials.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "trial", "kind", "params", "acc_seed0", "acc_seed1", "mean", "gated"])
        for rank, r in enumerate(rows, start=1):
            w.writerow([
                rank, r["trial"], r["params"]["kind"], json.dumps(r["params"], sort_keys=True),
                repr(r["acc_seed0"]), "" if r["acc_seed1"] is None else repr(r["acc_seed1"]),
                repr(r["mean"]), int(r["gated"]),
            ])
    best = rows[0]
    best_lc = replace(best["learner"], name=None)
    ready = dict(cfg.raw)
    ready["learners"] = [best_lc.to_dict()]
    if best_lc.pretrain_checkpoint:
        ready.setdefault("pretrain", {})
        root = "anil" if best_lc.kind == "anil" else "maml"
        pc = base_pc.get(root, PretrainConfig(head_only=best_lc.kind == "anil"))
        ready["pretrain"][best_lc.pretrain_checkpoint] = asdict(
            replace(pc, batch_size=int(best["params"]["batch_size"]))
        )
    (sdir / "best_config.json").write_text(json.dumps(ready, indent=2, sort_keys=True) + "\n")
    print(f"best trial {best['trial']} ({best['params']}) mean accuracy {best['mean']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- report


def smooth(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average; ``window=1`` returns the input unchanged."""
    values = np.asarray(values, dtype=float)
    if window <= 1:
        return values.copy()
    csum = np.cumsum(np.insert(values, 0, 0.0))
    out = np.empty_like(values)
    for t in range(len(values)):
        lo = max(0, t + 1 - window)
        out[t] = (csum[t + 1] - csum[lo]) / (t + 1 - lo)
    return out


def load_run_dir(run_dir: Path) -> dict:
    """{label: [(seed, trace)]} from ``traces/<label>/seed_<s>.csv``."""
    tdir = run_dir / "traces"
    if not tdir.is_dir():
        raise CliError(f"{run_dir}: no traces/ directory", EXIT_CONFIG)
    out = {}
    for ldir in sorted(p for p in tdir.iterdir() if p.is_dir()):
        files = sorted(ldir.glob("seed_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
        runs = []
        for f in files:
            try:
                runs.append((int(f.stem.split("_")[1]), EpisodeTrace.read_csv(f)))
            except TraceFormatError as exc:
                raise CliError(f"report error: {exc}", EXIT_RUNTIME) from None
        if runs:
            out[ldir.name] = runs
    if not out:
        raise CliError(f"{run_dir}: no trace files found", EXIT_CONFIG)
    return out


REPORT_COLUMNS = ("total",) + FAMILIES


def bold_flags(stats: dict, column: str) -> dict:
    """A learner is bold iff its 95% CI excludes every other learner's mean."""
    flags = {}
    for label, agg in stats.items():
        m, ci = agg[column]["mean"], agg[column]["ci95"]
        others = [a[column]["mean"] for k, a in stats.items() if k != label]
        flags[label] = (
            bool(others) and not math.isnan(ci)
            and all(not (m - ci <= o <= m + ci) for o in others)
        )
    return flags


def _stats(runs) -> dict:
    summaries = [summarize(tr, s) for s, tr in runs]
    if len(summaries) >= 2:
        return aggregate(summaries)
    return {k: {"mean": v, "std": float("nan"), "ci95": float("nan"), "n": 1}
            for k, v in summaries[0].metrics().items()}


def format_table(stats: dict) -> str:
    bold = {c: bold_flags(stats, c) for c in REPORT_COLUMNS}
    width = max(len(k) for k in stats) + 2
    head = "learner".ljust(width) + "".join(c.rjust(18) for c in REPORT_COLUMNS) + "   n"
    lines = ["online cumulative accuracy (%), mean ± std over seeds; ** = 95% CI excludes all other means",
             head, "-" * len(head)]
    for label, agg in stats.items():
        cells = []
        for c in REPORT_COLUMNS:
            m, sd = agg[c]["mean"] * 100, agg[c]["std"] * 100
            cell = f"{m:.1f} ± {sd:.1f}" if not math.isnan(sd) else f"{m:.1f}"
            cells.append((f"**{cell}**" if bold[c][label] else cell).rjust(18))
        lines.append(label.ljust(width) + "".join(cells) + f"{agg['total']['n']:4d}")
    return "\n".join(lines) + "\n"


def pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "osaka"
    return plt


def write_curves_svg(data: dict, path: Path, window: int) -> dict:
    """Seed-averaged per-step accuracy, smoothed; returns the plotted curves."""
    plt = pyplot()
    curves = {}
    fig, ax = plt.subplots(figsize=(8, 4))
    for label, runs in data.items():
        T = min(len(tr) for _, tr in runs)
        mean = np.mean([tr.acc[:T] for _, tr in runs], axis=0)
        curves[label] = smooth(mean, window)
        ax.plot(np.arange(T), curves[label], label=label, linewidth=1)
    ax.set_xlabel("time step")
    ax.set_ylabel(f"accuracy (moving average, {window} steps)")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return curves


def write_pr_svg(points: list, path: Path) -> None:
    """Boundary precision/recall per run, coloured by gamma."""
    plt = pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    if points:
        gammas = np.array([p[2] for p in points], dtype=float)
        sc = ax.scatter([p[1] for p in points], [p[0] for p in points], c=gammas, cmap="viridis", s=14)
        fig.colorbar(sc, ax=ax, label="gamma")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _gammas(run_dir: Path) -> dict:
    out = {}
    for f in sorted((run_dir / "summary").glob("*.json")) if (run_dir / "summary").is_dir() else []:
        doc = json.loads(f.read_text())
        lc = doc.get("learner", {})
        if str(lc.get("kind", "")).startswith("cmaml"):
            out[f.stem] = float(lc.get("gamma"))
    return out


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    data = load_run_dir(run_dir)
    stats = {label: _stats(runs) for label, runs in data.items()}
    rdir = run_dir / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    table = format_table(stats)
    (rdir / "table.txt").write_text(table)
    print(table, end="")
    write_curves_svg(data, rdir / "accuracy_curves.svg", args.smooth)
    gammas = _gammas(run_dir)
    points = []
    for label, runs in data.items():
        if label in gammas:
            for _, tr in runs:
                s = summarize(tr)
                points.append((s.precision, s.recall, gammas[label]))
    write_pr_svg(points, rdir / "boundary_pr.svg")
    return EXIT_OK


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="osaka", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="meta-train checkpoints listed under 'pretrain'")
    sp.add_argument("-c", "--config", required=True)
    sp.add_argument("--first-order", action="store_true", help="first-order meta-gradients")
    sp.add_argument("--only", nargs="+", help="pretrain entries to build (default: all)")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("run", help="run every learner over every seed")
    sp.add_argument("-c", "--config", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--alpha", type=float, help="override the stream's stay probability")
    sp.add_argument("-o", "--output-dir", help="write here instead of the config's output_dir")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("search", help="random hyperparameter search over the grid")
    sp.add_argument("-c", "--config", required=True)
    sp.add_argument("--budget", type=int, required=True)
    sp.add_argument("-o", "--output-dir", help="write here instead of the config's output_dir")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("report", help="summary table and SVG plots for a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--smooth", type=int, default=100, help="moving-average window (1 = raw)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"osaka: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, MetricError) as exc:
        print(f"osaka: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
