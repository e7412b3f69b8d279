"""Exhaustive reference implementation of keystep extraction.

Everything here is recomputed per timestep with plain Python scalars and
no incremental state or shared helper logic; the fast extractor is required
to agree with this module exactly, so the two can check each other.  Only
the data types are shared.
"""

from __future__ import annotations

import math

from .keysteps import ExtractorConfig, KeystepCandidate, KeystepSet
from .trajectory import Episode

_PRIO = {"grip": 0, "turn": 1, "fill": 2}


def _speeds(ep: Episode, cfg: ExtractorConfig) -> list[float]:
    n_dim = ep.actions[0].delta.shape[0]
    dims = list(cfg.speed_dims) if cfg.speed_dims is not None else list(range(n_dim))
    raw = []
    for a in ep.actions:
        acc = 0.0
        for j in dims:
            x = float(a.delta[j])
            acc = acc + x * x
        raw.append(math.sqrt(acc))
    return raw


def _ema(raw: list[float], alpha: float) -> list[float]:
    sm = [raw[0]]
    for t in range(1, len(raw)):
        sm.append(alpha * raw[t] + (1.0 - alpha) * sm[t - 1])
    return sm


def _quantile(values: list[float], q: float) -> float:
    xs = sorted(values)
    pos = q * (len(xs) - 1)
    lo = int(math.floor(pos))
    hi = int(math.ceil(pos))
    frac = pos - lo
    return xs[lo] + frac * (xs[hi] - xs[lo])


def _command(ep: Episode, t: int) -> list[float]:
    a = ep.actions[t]
    return [float(x) for x in a.delta] + [float(a.gripper)] + [float(x) for x in a.aux]


def brute_force_keysteps(ep: Episode, cfg: ExtractorConfig) -> KeystepSet:
    cfg.validate()
    ep.validate()
    T = ep.T
    raw = _speeds(ep, cfg)
    sm = _ema(raw, cfg.alpha)
    tau_high = _quantile(sm, cfg.q_high)
    tau_low = _quantile(sm, cfg.q_low)
    bits = [1 if float(a.gripper) > cfg.gripper_threshold else 0 for a in ep.actions]

    def cand(t: int, source: str) -> KeystepCandidate:
        return KeystepCandidate(
            timestep=t, source=source, speed_ema=sm[t], gripper_state=bits[t]
        )

    # gripper anchors
    grip: list[KeystepCandidate] = []
    for t_c in [t for t in range(1, T + 1) if bits[t] != bits[t - 1]]:
        anchor = T
        for t in range(t_c + cfg.settle + 1, T + 1):
            if sm[t] > tau_high:
                anchor = t - 1
                break
        grip.append(cand(anchor, "grip"))

    # turning points
    turn: list[KeystepCandidate] = []
    for t in range(cfg.window - 1, T + 1):
        window_max = max(sm[t - cfg.window + 1 : t + 1])
        if window_max <= tau_low:
            turn.append(cand(t, "turn"))

    # merge by timestep, grip wins
    by_t: dict[int, KeystepCandidate] = {}
    for c in grip + turn:
        old = by_t.get(c.timestep)
        if old is None or _PRIO[c.source] < _PRIO[old.source]:
            by_t[c.timestep] = c

    # min-gap dedup, priority then earliness
    kept: list[KeystepCandidate] = []
    for c in sorted(by_t.values(), key=lambda c: (_PRIO[c.source], c.timestep)):
        ok = True
        for k in kept:
            if abs(c.timestep - k.timestep) < cfg.min_gap:
                ok = False
                break
        if ok:
            kept.append(c)

    # gap filling over survivor boundaries, rescanning until stable
    boundary = sorted({0, T} | {c.timestep for c in kept})
    fills: list[int] = []
    while True:
        times = sorted(set(boundary) | set(fills))
        split = None
        for u, w in zip(times, times[1:]):
            if w - u > cfg.max_gap:
                lo = u + cfg.min_gap
                hi = w - cfg.min_gap
                best = None
                for t in range(lo, hi + 1):
                    if t < 1:
                        continue
                    va = _command(ep, t)
                    vb = _command(ep, t - 1)
                    acc = 0.0
                    for x, y in zip(va, vb):
                        d = x - y
                        acc = acc + d * d
                    dv = math.sqrt(acc)
                    if best is None or dv < best[0]:
                        best = (dv, t)
                if best is not None:
                    split = best[1]
                    break
        if split is None:
            break
        fills.append(split)

    final = sorted(kept + [cand(t, "fill") for t in fills],
                   key=lambda c: c.timestep)
    return KeystepSet(episode_id=ep.id, candidates=final,
                      thresholds=(tau_high, tau_low))
