"""Sweep C-MAML's shift threshold gamma and modulation centre lambda over their
search grids, holding everything else at the default config.

    python scripts/sensitivity.py --seeds 5 --jobs 4

Writes runs/sensitivity/{gamma,lambda}.csv and matching bar charts (SVG).
Needs the MAML checkpoint from scripts/run_main.sh.
"""

import argparse
import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from osaka import cli

ROOT = Path(__file__).resolve().parents[1]


def sweep(cfg, base, field_name, grid, jobs):
    learners = [replace(base, name=f"{field_name}_{v}", **{field_name: v}) for v in grid]
    results = cli.run_experiment(cfg, jobs, learners)
    rows = []
    for lc, value in zip(learners, grid):
        runs = [r["summary"] for _, r in results[lc.label]]
        rows.append({
            field_name: value,
            "total": float(np.mean([s.total for s in runs])),
            "total_std": float(np.std([s.total for s in runs], ddof=1)) if len(runs) > 1 else float("nan"),
            "precision": float(np.mean([s.precision for s in runs])),
            "recall": float(np.mean([s.recall for s in runs])),
            "f1": float(np.mean([s.f1 for s in runs])),
        })
    return rows


def write(rows, name, out):
    with open(out / f"{name}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    plt = cli.pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    labels = [str(r[name]) for r in rows]
    ax.bar(labels, [r["total"] for r in rows], yerr=[r["total_std"] for r in rows], capsize=3)
    ax.set_xlabel(name)
    ax.set_ylabel("cumulative accuracy (± std)")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out / f"{name}.svg", format="svg", metadata={"Date": None})
    plt.close(fig)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("-c", "--config", default=str(ROOT / "configs" / "default.json"))
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()

    cfg = cli.load_config(args.config)
    cfg = replace(cfg, seeds=list(range(args.seeds)))
    base = next(lc for lc in cfg.learners if lc.kind == "cmaml")
    out = ROOT / "runs" / "sensitivity"
    out.mkdir(parents=True, exist_ok=True)
    for name, grid in (("gamma", cli.DEFAULT_SPACE["gamma"]), ("lambda", cli.DEFAULT_SPACE["lambda"])):
        field_name = "lam" if name == "lambda" else name
        rows = sweep(cfg, base, field_name, grid, args.jobs)
        for r in rows:
            r[name] = r.pop(field_name)
        rows = [{name: r[name], **{k: v for k, v in r.items() if k != name}} for r in rows]
        write(rows, name, out)
        for r in rows:
            print(f"{name}={r[name]:<5} total {r['total']:.3f}  P {r['precision']:.3f}  "
                  f"R {r['recall']:.3f}  F1 {r['f1']:.3f}")


if __name__ == "__main__":
    main()
