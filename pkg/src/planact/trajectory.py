"""Episode data model, JSONL serialization, and kinematic speed profiles.

An episode pairs T+1 observations with T+1 action commands.  The speed
profile is the per-step L2 norm of selected delta components, smoothed
with an exponential moving average; downstream extraction thresholds are
quantiles of the smoothed signal, so both the norm and the quantile use
one fixed, reproducible arithmetic convention (see `quantile`).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter

# Render grids must tile into PATCH x PATCH cells for the vision codec.
PATCH = 8


class EpisodeError(ValueError):
    """Raised when an episode record violates a structural invariant."""


@dataclass
class Observation:
    timestep: int
    image: np.ndarray
    frame_id: str | None = None


@dataclass
class Action:
    delta: np.ndarray
    gripper: float
    aux: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def command_vector(self) -> np.ndarray:
        """Full commanded vector: delta components, gripper, then aux."""
        return np.concatenate([self.delta, [self.gripper], self.aux])


@dataclass
class Episode:
    id: str
    instruction: str
    observations: list[Observation]
    actions: list[Action]

    @property
    def T(self) -> int:
        return len(self.observations) - 1

    def validate(self) -> None:
        if len(self.observations) != len(self.actions):
            raise EpisodeError(
                f"episode {self.id}: observations/actions length mismatch "
                f"({len(self.observations)} vs {len(self.actions)})"
            )
        if self.T < 1:
            raise EpisodeError(f"episode {self.id}: T must be >= 1, got {self.T}")
        shape = self.observations[0].image.shape
        if len(shape) != 2:
            raise EpisodeError(f"episode {self.id}: image must be 2-D, got {shape}")
        h, w = shape
        if h % PATCH or w % PATCH:
            raise EpisodeError(
                f"episode {self.id}: image dims {h}x{w} not divisible by {PATCH}"
            )
        dim = self.actions[0].delta.shape[0]
        aux_dim = self.actions[0].aux.shape[0]
        for t, (obs, act) in enumerate(zip(self.observations, self.actions)):
            if obs.image.shape != shape:
                raise EpisodeError(
                    f"episode {self.id}: image shape varies at t={t} "
                    f"({obs.image.shape} vs {shape})"
                )
            if obs.timestep != t:
                raise EpisodeError(f"episode {self.id}: timestep field off at t={t}")
            if act.delta.shape != (dim,) or act.aux.shape != (aux_dim,):
                raise EpisodeError(f"episode {self.id}: action dims vary at t={t}")
            if not np.all(np.isfinite(act.delta)):
                raise EpisodeError(f"episode {self.id}: delta not finite at t={t}")
            if not 0.0 <= act.gripper <= 1.0:
                raise EpisodeError(
                    f"episode {self.id}: gripper out of [0,1] at t={t}"
                )


@dataclass
class SpeedProfile:
    raw: np.ndarray
    smoothed: np.ndarray
    alpha: float


def _masked_norms(deltas: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    # Left-to-right accumulation over the selected columns; this fixes the
    # rounding order so an independent scalar reimplementation matches
    # bit for bit (np.linalg.norm pairs terms differently).
    acc = np.zeros(deltas.shape[0])
    for j in dims:
        col = deltas[:, j]
        acc = acc + col * col
    return np.sqrt(acc)


def speed_profile(
    ep: Episode, alpha: float, dims: Sequence[int] | None = None
) -> SpeedProfile:
    """Per-step speed (L2 norm of the selected delta components) plus EMA.

    smoothed[0] = raw[0]; smoothed[t] = alpha*raw[t] + (1-alpha)*smoothed[t-1].
    `dims` selects delta components (default: all of them).
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    n_dim = ep.actions[0].delta.shape[0]
    if dims is None:
        dims = range(n_dim)
    dims = list(dims)
    if not dims:
        raise ValueError("dims mask selects no components")
    for j in dims:
        if not 0 <= j < n_dim:
            raise ValueError(f"dims index {j} out of range for delta dim {n_dim}")
    deltas = np.stack([a.delta for a in ep.actions])
    raw = _masked_norms(deltas, dims)
    if raw.shape[0] == 1:
        smoothed = raw.copy()
    else:
        # One-pole IIR filter; with this initial state the filter performs
        # exactly alpha*x[t] + (1-alpha)*y[t-1] in the same FP order as the
        # plain recurrence, and y[0] is pinned to raw[0] by construction.
        b = np.array([alpha])
        a = np.array([1.0, -(1.0 - alpha)])
        zi = np.array([(1.0 - alpha) * raw[0]])
        tail, _ = lfilter(b, a, raw[1:], zi=zi)
        smoothed = np.concatenate([raw[:1], tail])
    return SpeedProfile(raw=raw, smoothed=smoothed, alpha=alpha)


def quantile(values: Iterable[float], q: float) -> float:
    """Linear-interpolation quantile: sorted[lo] + frac*(sorted[hi]-sorted[lo]).

    Implemented directly (not via np.quantile) so the interpolation rounding
    is a fixed expression independent of library internals.
    """
    xs = sorted(float(v) for v in values)
    if not xs:
        raise ValueError("quantile of empty list")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0,1], got {q}")
    pos = q * (len(xs) - 1)
    lo = int(math.floor(pos))
    hi = int(math.ceil(pos))
    frac = pos - lo
    return xs[lo] + frac * (xs[hi] - xs[lo])


def episode_to_json(ep: Episode) -> dict:
    obs_out = []
    for o in ep.observations:
        rec: dict = {"t": o.timestep, "image": o.image.astype(int).tolist()}
        if o.frame_id is not None:
            rec["frame_id"] = o.frame_id
        obs_out.append(rec)
    act_out = [
        {
            "t": t,
            "delta": [float(x) for x in a.delta],
            "gripper": float(a.gripper),
            "aux": [float(x) for x in a.aux],
        }
        for t, a in enumerate(ep.actions)
    ]
    return {
        "id": ep.id,
        "instruction": ep.instruction,
        "T": ep.T,
        "observations": obs_out,
        "actions": act_out,
    }


def episode_from_json(rec: dict) -> Episode:
    try:
        observations = [
            Observation(
                timestep=int(o["t"]),
                image=np.asarray(o["image"], dtype=np.int16),
                frame_id=o.get("frame_id"),
            )
            for o in rec["observations"]
        ]
        actions = [
            Action(
                delta=np.asarray(a["delta"], dtype=float),
                gripper=float(a["gripper"]),
                aux=np.asarray(a.get("aux", []), dtype=float),
            )
            for a in rec["actions"]
        ]
        ep = Episode(
            id=str(rec["id"]),
            instruction=str(rec["instruction"]),
            observations=observations,
            actions=actions,
        )
    except KeyError as exc:
        raise EpisodeError(f"episode record missing field {exc}") from exc
    if int(rec["T"]) != ep.T:
        raise EpisodeError(f"episode {ep.id}: stored T={rec['T']} but found {ep.T}")
    ep.validate()
    return ep


def load_episodes(path: str) -> list[Episode]:
    """Read an episode JSONL file, validating every record."""
    episodes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EpisodeError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            episodes.append(episode_from_json(rec))
    return episodes


def save_episodes(episodes: Iterable[Episode], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_json(ep)) + "\n")


def iter_episodes(path: str):
    """Stream episodes one at a time (same validation as load_episodes)."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EpisodeError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            yield episode_from_json(rec)
