"""Keystep extraction from kinematic cues.

Candidates come from three sources: gripper-transition anchors (the last
quasi-static frame before motion resumes after a flip), kinematic turning
points (windowed low-speed runs), and gap fillers (minimal action-change
frames inserted wherever coverage is too sparse).  Grip anchors outrank
turning points, which outrank fillers; a minimum temporal gap is enforced
on the survivors before fillers are added.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .trajectory import Episode, SpeedProfile, quantile, speed_profile

SOURCE_PRIORITY = {"grip": 0, "turn": 1, "fill": 2}

KEYSTEP_COLUMNS = (
    "episode_id",
    "row_index",
    "timestep",
    "frame_id",
    "source",
    "speed_ema",
    "gripper_state",
)


@dataclass
class ExtractorConfig:
    alpha: float = 0.3
    q_high: float = 0.75
    q_low: float = 0.25
    settle: int = 3
    window: int = 5
    min_gap: int = 8
    max_gap: int = 40
    gripper_threshold: float = 0.5
    speed_dims: tuple[int, ...] | None = None

    def validate(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0,1], got {self.alpha}")
        if not 0.0 < self.q_low < self.q_high < 1.0:
            raise ValueError(
                f"need 0 < q_low < q_high < 1, got {self.q_low}, {self.q_high}"
            )
        if self.settle < 0:
            raise ValueError(f"settle must be >= 0, got {self.settle}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.min_gap < 1:
            raise ValueError(f"min_gap must be >= 1, got {self.min_gap}")
        if self.max_gap <= self.min_gap:
            raise ValueError(
                f"max_gap must exceed min_gap, got {self.max_gap} <= {self.min_gap}"
            )


@dataclass
class KeystepCandidate:
    timestep: int
    source: str
    speed_ema: float
    gripper_state: int


@dataclass
class KeystepSet:
    episode_id: str
    candidates: list[KeystepCandidate]
    thresholds: tuple[float, float]

    def timesteps(self) -> list[int]:
        return [c.timestep for c in self.candidates]

    def validate(self, min_gap: int) -> None:
        ts = self.timesteps()
        for a, b in zip(ts, ts[1:]):
            if b <= a:
                raise ValueError(f"{self.episode_id}: timesteps not increasing")
            if b - a < min_gap:
                raise ValueError(
                    f"{self.episode_id}: candidates at {a},{b} closer than {min_gap}"
                )


def gripper_bits(ep: Episode, threshold: float) -> list[int]:
    return [1 if a.gripper > threshold else 0 for a in ep.actions]


def adaptive_thresholds(
    sp: SpeedProfile, cfg: ExtractorConfig
) -> tuple[float, float]:
    """Per-episode thresholds: quantiles of the smoothed speed."""
    tau_high = quantile(sp.smoothed, cfg.q_high)
    tau_low = quantile(sp.smoothed, cfg.q_low)
    return tau_high, tau_low


def gripper_flips(ep: Episode, cfg: ExtractorConfig) -> list[int]:
    """Times t >= 1 where the binarized gripper channel changes state."""
    bits = gripper_bits(ep, cfg.gripper_threshold)
    return [t for t in range(1, len(bits)) if bits[t] != bits[t - 1]]


def _candidate(ep: Episode, sp: SpeedProfile, t: int, source: str,
               threshold: float) -> KeystepCandidate:
    return KeystepCandidate(
        timestep=t,
        source=source,
        speed_ema=float(sp.smoothed[t]),
        gripper_state=1 if ep.actions[t].gripper > threshold else 0,
    )


def grip_anchors(
    ep: Episode,
    sp: SpeedProfile,
    flips: Sequence[int],
    tau_high: float,
    cfg: ExtractorConfig,
) -> list[KeystepCandidate]:
    """One candidate per flip: the frame before smoothed speed re-exceeds
    tau_high after the settle window, or T when it never does."""
    T = ep.T
    out = []
    for t_c in flips:
        t_star = None
        for t in range(t_c + cfg.settle + 1, T + 1):
            if sp.smoothed[t] > tau_high:
                t_star = t
                break
        anchor = T if t_star is None else t_star - 1
        out.append(_candidate(ep, sp, anchor, "grip", cfg.gripper_threshold))
    return out


def turning_points(
    ep: Episode, sp: SpeedProfile, tau_low: float, cfg: ExtractorConfig
) -> list[KeystepCandidate]:
    """Every t whose trailing window of W smoothed speeds stays <= tau_low."""
    W = cfg.window
    T = ep.T
    out = []
    for t in range(W - 1, T + 1):
        window_max = max(float(sp.smoothed[i]) for i in range(t - W + 1, t + 1))
        if window_max <= tau_low:
            out.append(_candidate(ep, sp, t, "turn", cfg.gripper_threshold))
    return out


def action_change(ep: Episode, t: int) -> float:
    """L2 distance between consecutive full command vectors, defined t >= 1.

    Uses the same left-to-right squared-sum convention as the speed norms.
    """
    a = ep.actions[t].command_vector()
    b = ep.actions[t - 1].command_vector()
    acc = 0.0
    for j in range(a.shape[0]):
        d = float(a[j]) - float(b[j])
        acc = acc + d * d
    return float(np.sqrt(acc))


def gap_fill(
    ep: Episode,
    sp: SpeedProfile,
    selected: Sequence[int],
    cfg: ExtractorConfig,
) -> list[KeystepCandidate]:
    """Insert minimal-action-change frames until no gap exceeds max_gap.

    `selected` must be ascending and include the sentinels 0 and T.  Interior
    picks are restricted to [u+min_gap, w-min_gap] so an inserted frame can
    never undercut the minimum-gap invariant against either gap endpoint; a
    gap whose restricted interior is empty is left as it is.
    """
    times = sorted(set(int(t) for t in selected))
    fills: list[int] = []
    gaps = list(zip(times, times[1:]))
    while gaps:
        u, w = gaps.pop(0)
        if w - u <= cfg.max_gap:
            continue
        lo = u + cfg.min_gap
        hi = w - cfg.min_gap
        if lo > hi:
            continue
        best_t = None
        best_val = None
        for t in range(max(lo, 1), hi + 1):
            val = action_change(ep, t)
            if best_val is None or val < best_val:
                best_val = val
                best_t = t
        if best_t is None:
            continue
        fills.append(best_t)
        gaps.insert(0, (best_t, w))
        gaps.insert(0, (u, best_t))
    return [
        _candidate(ep, sp, t, "fill", cfg.gripper_threshold) for t in sorted(fills)
    ]


def dedup_min_gap(
    candidates: Iterable[KeystepCandidate], min_gap: int
) -> list[KeystepCandidate]:
    """Greedy dedup: higher priority first, then earlier; keep a candidate
    iff it sits >= min_gap from everything already kept."""
    ordered = sorted(
        candidates, key=lambda c: (SOURCE_PRIORITY[c.source], c.timestep)
    )
    kept: list[KeystepCandidate] = []
    for cand in ordered:
        if all(abs(cand.timestep - k.timestep) >= min_gap for k in kept):
            kept.append(cand)
    return sorted(kept, key=lambda c: c.timestep)


def _merge_by_timestep(cands: Iterable[KeystepCandidate]) -> list[KeystepCandidate]:
    best: dict[int, KeystepCandidate] = {}
    for c in cands:
        cur = best.get(c.timestep)
        if cur is None or SOURCE_PRIORITY[c.source] < SOURCE_PRIORITY[cur.source]:
            best[c.timestep] = c
    return [best[t] for t in sorted(best)]


def extract_keysteps(ep: Episode, cfg: ExtractorConfig) -> KeystepSet:
    """Full extraction pipeline for one episode."""
    cfg.validate()
    ep.validate()
    sp = speed_profile(ep, cfg.alpha, cfg.speed_dims)
    tau_high, tau_low = adaptive_thresholds(sp, cfg)
    flips = gripper_flips(ep, cfg)
    merged = _merge_by_timestep(
        grip_anchors(ep, sp, flips, tau_high, cfg)
        + turning_points(ep, sp, tau_low, cfg)
    )
    survivors = dedup_min_gap(merged, cfg.min_gap)
    boundary = sorted({0, ep.T} | {c.timestep for c in survivors})
    fills = gap_fill(ep, sp, boundary, cfg)
    final = sorted(survivors + fills, key=lambda c: c.timestep)
    ks = KeystepSet(episode_id=ep.id, candidates=final,
                    thresholds=(tau_high, tau_low))
    ks.validate(cfg.min_gap)
    return ks


def keystep_rows(ep: Episode, ks: KeystepSet) -> list[dict]:
    """CSV row dicts for one episode (row_index assigned at write time)."""
    rows = []
    for c in ks.candidates:
        obs = ep.observations[c.timestep]
        rows.append(
            {
                "episode_id": ks.episode_id,
                "timestep": c.timestep,
                "frame_id": obs.frame_id or f"{ep.id}/{c.timestep}",
                "source": c.source,
                "speed_ema": repr(c.speed_ema),
                "gripper_state": c.gripper_state,
            }
        )
    return rows


def write_keysteps_csv(
    items: Iterable[tuple[Episode, KeystepSet]], path: str
) -> int:
    """Write the normative keystep CSV; returns the number of rows."""
    row_index = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(KEYSTEP_COLUMNS)
        for ep, ks in items:
            for row in keystep_rows(ep, ks):
                values = [
                    row["episode_id"],
                    row_index,
                    row["timestep"],
                    row["frame_id"],
                    row["source"],
                    row["speed_ema"],
                    row["gripper_state"],
                ]
                for v in values:
                    if isinstance(v, str) and ("\n" in v or "\r" in v):
                        raise ValueError(
                            f"CSV field may not contain newlines: {v!r}"
                        )
                writer.writerow(values)
                row_index += 1
    return row_index


def keysteps_from_rows(rows) -> dict:
    """Regroup CSV rows into per-episode KeystepSets.

    Thresholds are not stored in the CSV, so the reconstructed sets carry
    NaNs there; downstream sequence building only reads the candidates.
    """
    groups: dict[str, list[dict]] = {}
    for row in rows:
        groups.setdefault(row["episode_id"], []).append(row)
    out = {}
    for ep_id, group in groups.items():
        cands = [
            KeystepCandidate(
                timestep=r["timestep"],
                source=r["source"],
                speed_ema=r["speed_ema"],
                gripper_state=r["gripper_state"],
            )
            for r in sorted(group, key=lambda r: r["timestep"])
        ]
        out[ep_id] = KeystepSet(
            episode_id=ep_id,
            candidates=cands,
            thresholds=(float("nan"), float("nan")),
        )
    return out


def read_keysteps_csv(path: str) -> list[dict]:
    """Read a keystep CSV back into row dicts, validating the header."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty CSV, header required") from None
        if tuple(header) != KEYSTEP_COLUMNS:
            raise ValueError(
                f"{path}: bad header {header!r}, expected {list(KEYSTEP_COLUMNS)}"
            )
        rows = []
        for rec in reader:
            if len(rec) != len(KEYSTEP_COLUMNS):
                raise ValueError(f"{path}: row width {len(rec)} != expected")
            row = dict(zip(KEYSTEP_COLUMNS, rec))
            row["row_index"] = int(row["row_index"])
            row["timestep"] = int(row["timestep"])
            row["speed_ema"] = float(row["speed_ema"])
            row["gripper_state"] = int(row["gripper_state"])
            rows.append(row)
    # filtered files keep their original row_index values, so require the
    # order to be preserved rather than contiguity
    idx = [row["row_index"] for row in rows]
    for a, b in zip(idx, idx[1:]):
        if b <= a:
            raise ValueError(f"{path}: row_index not strictly increasing")
    return rows
