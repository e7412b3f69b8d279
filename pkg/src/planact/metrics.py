"""Run metrics: JSONL logging, Wilson intervals, event recall, reports.

Every number written here carries the run id and seed it came from so
reports stay traceable.  The report renderer turns a run directory's
metrics.jsonl + eval.json into a CSV table and static PNG plots.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field


def wilson_interval(successes: int, trials: int, z: float = 1.96):
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    if not 0 <= successes <= trials:
        raise ValueError("successes outside [0, trials]")
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = (
        z
        * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials))
        / denom
    )
    return max(0.0, center - half), min(1.0, center + half)


class MetricsWriter:
    """Append-only JSONL event log; one flat object per line."""

    def __init__(self, path: str, run_id: str = "", seed: int | None = None):
        self.path = path
        self.run_id = run_id
        self.seed = seed
        self._fh = open(path, "a")

    def write(self, **fields) -> None:
        row = dict(fields)
        if self.run_id:
            row.setdefault("run_id", self.run_id)
        if self.seed is not None:
            row.setdefault("seed", self.seed)
        self._fh.write(json.dumps(row) + "\n")
        self._fh.flush()

    def log_step(self, step: int, stage: str, loss: float) -> None:
        self.write(step=step, stage=stage, loss=float(loss))

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str) -> list:
    rows = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows


# -------------------------------------------------------------- event recall


def match_events(true_times, candidate_times, tol: int):
    """Greedy one-to-one matching of true events to candidates within tol."""
    remaining = sorted(candidate_times)
    hits = 0
    for t in sorted(true_times):
        best = None
        for c in remaining:
            if abs(c - t) <= tol:
                if best is None or abs(c - t) < abs(best - t):
                    best = c
        if best is not None:
            hits += 1
            remaining.remove(best)
    return hits


def extraction_quality(events, keysteps, settle: int, window: int) -> dict:
    """Recall/precision of extracted candidates against logged sim events.

    events: list of EventLog; keysteps: matching list of KeystepSet.  Grip
    events (grasps + releases) are matched against grip-sourced candidates
    within settle+2 steps; align events against grip/turn candidates
    (gap fills excluded) within `window` steps.
    """
    by_ep = {k.episode_id: k for k in keysteps}
    grip_true = grip_hit = 0
    align_true = align_hit = 0
    grip_cand = grip_cand_hit = 0
    for ev in events:
        ks = by_ep.get(ev.episode_id)
        if ks is None:
            raise ValueError(f"no keysteps for episode {ev.episode_id}")
        grips = [c.timestep for c in ks.candidates if c.source == "grip"]
        everything = [c.timestep for c in ks.candidates if c.source != "fill"]
        true_grips = list(ev.grasp_times) + list(ev.release_times)
        grip_true += len(true_grips)
        grip_hit += match_events(true_grips, grips, settle + 2)
        align_true += len(ev.align_times)
        align_hit += match_events(ev.align_times, everything, window)
        grip_cand += len(grips)
        grip_cand_hit += match_events(grips, true_grips, settle + 2)
    return {
        "grip_recall": grip_hit / grip_true if grip_true else 1.0,
        "grip_precision": grip_cand_hit / grip_cand if grip_cand else 1.0,
        "align_recall": align_hit / align_true if align_true else 1.0,
        "n_grip_events": grip_true,
        "n_align_events": align_true,
    }


# ------------------------------------------------------------------ reports


@dataclass
class MetricsReport:
    title: str
    arms: list = field(default_factory=list)
    eval_seeds: list = field(default_factory=list)
    notes: str = ""
    complete: bool = True

    def to_json(self) -> str:
        return json.dumps(
            {
                "title": self.title,
                "notes": self.notes,
                "complete": self.complete,
                "eval_seeds": self.eval_seeds,
                "arms": self.arms,
            },
            indent=2,
        )

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")


def steps_to_threshold(evals, threshold: float):
    """First step whose success rate reaches threshold; None if never.

    evals: iterable of (step, success_rate), unordered.
    """
    best = None
    for step, rate in evals:
        if rate >= threshold and (best is None or step < best):
            best = step
    return best


def render_report(run_dir: str, out_csv: str | None = None,
                  plot_dir: str | None = None) -> dict:
    """metrics.jsonl (+eval.json when present) -> report.csv + PNG plots."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    rows = read_metrics(metrics_path) if os.path.exists(metrics_path) else []
    out_csv = out_csv or os.path.join(run_dir, "report.csv")
    plot_dir = plot_dir or os.path.join(run_dir, "plots")
    os.makedirs(plot_dir, exist_ok=True)

    losses: dict = {}
    for r in rows:
        if "loss" in r and "step" in r:
            losses.setdefault(r.get("stage", "train"), []).append(
                (r["step"], r["loss"])
            )

    written = {"csv": out_csv, "plots": []}
    with open(out_csv, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["kind", "stage", "key", "value"])
        for stage, pts in sorted(losses.items()):
            w.writerow(["loss_final", stage, pts[-1][0], pts[-1][1]])
            w.writerow(["loss_min", stage,
                        min(p[0] for p in pts), min(p[1] for p in pts)])
        eval_path = os.path.join(run_dir, "eval.json")
        if os.path.exists(eval_path):
            with open(eval_path) as ef:
                ev = json.load(ef)
            for task, t in ev.get("tasks", {}).items():
                lo, hi = wilson_interval(t["successes"], t["trials"])
                w.writerow(["success_rate", task, t["trials"], t["rate"]])
                w.writerow(["wilson_low", task, t["trials"], round(lo, 4)])
                w.writerow(["wilson_high", task, t["trials"], round(hi, 4)])

    if losses:
        fig, ax = plt.subplots(figsize=(6, 4))
        for stage, pts in sorted(losses.items()):
            xs, ys = zip(*sorted(pts))
            ax.plot(xs, ys, label=stage)
        ax.set_xlabel("step")
        ax.set_ylabel("masked CE loss")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(plot_dir, "loss.png")
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written["plots"].append(path)
    return written
