"""Training-sequence construction for both model stages.

Stage 1 (planner) sequences predict the vision tokens of the next
structured frame from the instruction plus a short frame history; stage 2
(policy) sequences predict the next action chunk from the instruction plus
an interleaved observation/action history.  A sliding-window augmentation
shifts the stage-1 anchor backwards so each target frame is seen from
several context alignments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .keysteps import KeystepSet
from .tokens import CodecBundle
from .trajectory import Episode

STAGES = ("planner", "policy")


@dataclass
class BuildConfig:
    history: int = 4
    interval: int = 5
    slide: int = 5
    horizon: int = 8
    stride: int = 0  # 0 means one chunk per horizon, no overlap

    @property
    def effective_stride(self) -> int:
        return self.stride if self.stride > 0 else self.horizon

    def validate(self) -> None:
        if self.history < 1:
            raise ValueError("history must be >= 1")
        if self.interval < 1 or self.horizon < 1:
            raise ValueError("interval and horizon must be >= 1")
        if not 1 <= self.slide <= self.interval:
            raise ValueError("slide must be in [1, interval]")
        if self.stride < 0:
            raise ValueError("stride must be >= 0")


@dataclass
class TrainingSequence:
    tokens: list
    loss_mask: list
    stage: str
    meta: dict = field(default_factory=dict)
    aux_mask: list | None = None  # context-frame tokens, optional weak loss

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if len(self.loss_mask) != len(self.tokens):
            raise ValueError("loss_mask length differs from tokens")
        if self.aux_mask is not None and len(self.aux_mask) != len(self.tokens):
            raise ValueError("aux_mask length differs from tokens")
        if not any(self.loss_mask):
            raise ValueError("loss_mask is empty")

    def validate_regions(self, space) -> None:
        want = "vision" if self.stage == "planner" else "action"
        for tok, m in zip(self.tokens, self.loss_mask):
            if m and space.region_of(int(tok)) != want:
                raise ValueError(
                    f"{self.stage} loss on {space.region_of(int(tok))} token"
                )


def planner_context_times(anchor: int, cfg: BuildConfig) -> list:
    """Up to `history` frame times spaced by `interval`, all before the
    target; an anchor too early for any strictly-prior frame falls back to
    frame 0."""
    ref = anchor - cfg.interval
    if ref < 0:
        return [0]
    times = [max(0, ref - j * cfg.interval) for j in range(cfg.history)]
    times.reverse()
    out: list = []
    for t in times:
        if not out or t != out[-1]:
            out.append(t)
    return out


def build_planner_samples(
    ep: Episode, ks: KeystepSet, cfg: BuildConfig, codecs: CodecBundle
) -> list:
    cfg.validate()
    if ks.episode_id != ep.id:
        raise ValueError("keysteps belong to a different episode")
    if not ks.candidates:
        raise ValueError(f"episode {ep.id} has no keysteps")
    space = codecs.space
    lang = [int(t) for t in codecs.lang.encode(ep.instruction)]
    frame_tokens: dict = {}

    def frame(t: int) -> list:
        if t not in frame_tokens:
            frame_tokens[t] = [
                int(x) for x in codecs.vision.encode_image(ep.observations[t].image)
            ]
        return frame_tokens[t]

    samples = []
    for cand in ks.candidates:
        target = frame(cand.timestep)
        for d in range(cfg.slide):
            anchor = cand.timestep - d
            if anchor < 0:
                continue
            tokens = [space.bos] + lang + [space.sep]
            aux = [False] * len(tokens)
            for t in planner_context_times(anchor, cfg):
                ft = frame(t)
                tokens.extend(ft)
                aux.extend([True] * len(ft))
            tokens.append(space.sep)
            aux.append(False)
            mask = [False] * len(tokens)
            tokens.extend(target)
            mask.extend([True] * len(target))
            aux.extend([False] * len(target))
            tokens.append(space.eos)
            mask.append(False)
            aux.append(False)
            samples.append(
                TrainingSequence(
                    tokens=tokens,
                    loss_mask=mask,
                    stage="planner",
                    meta={
                        "episode_id": ep.id,
                        "anchor": anchor,
                        "keystep": cand.timestep,
                    },
                    aux_mask=aux,
                )
            )
    return samples


def policy_history_times(t_now: int, cfg: BuildConfig) -> list:
    """Frame times spaced by the chunk horizon, ending at t_now, at most
    `history` of them, never negative."""
    n = min(cfg.history, t_now // cfg.horizon + 1)
    return [t_now - j * cfg.horizon for j in range(n - 1, -1, -1)]


def policy_prefix_tokens(
    codecs: CodecBundle,
    instruction: str,
    images,
    action_vectors,
    t_now: int,
    cfg: BuildConfig,
) -> list:
    """Shared prompt layout for stage-2 training and closed-loop inference.

    images[u] is the frame after u executed steps; action_vectors[u] the
    command vector executed at step u.  The prefix ends with the trailing
    SEP so a decoder continues straight into action tokens.
    """
    space = codecs.space
    tokens = [space.bos]
    tokens.extend(int(t) for t in codecs.lang.encode(instruction))
    tokens.append(space.sep)
    times = policy_history_times(t_now, cfg)
    for i, u in enumerate(times):
        tokens.extend(int(x) for x in codecs.vision.encode_image(images[u]))
        if i + 1 < len(times):
            chunk = np.asarray(action_vectors[u : u + cfg.horizon], dtype=float)
            tokens.extend(int(x) for x in codecs.action.encode_chunk(chunk))
    tokens.append(space.sep)
    return tokens


def build_policy_samples(
    ep: Episode, cfg: BuildConfig, codecs: CodecBundle
) -> list:
    cfg.validate()
    if cfg.horizon != codecs.action.chunk_horizon:
        raise ValueError("config horizon differs from the action codec")
    samples = []
    images = [o.image for o in ep.observations]
    vectors = np.stack([a.command_vector() for a in ep.actions])
    space = codecs.space
    n_steps = len(ep.actions)
    for t in range(0, n_steps - cfg.horizon + 1, cfg.effective_stride):
        tokens = policy_prefix_tokens(codecs, ep.instruction, images, vectors, t, cfg)
        mask = [False] * len(tokens)
        target = codecs.action.encode_chunk(vectors[t : t + cfg.horizon])
        tokens.extend(int(x) for x in target)
        mask.extend([True] * len(target))
        tokens.append(space.eos)
        mask.append(False)
        samples.append(
            TrainingSequence(
                tokens=tokens,
                loss_mask=mask,
                stage="policy",
                meta={"episode_id": ep.id, "anchor": t},
            )
        )
    return samples


def collate(seqs, pad_to: int, pad_id: int) -> dict:
    """Right-pad to a rectangular batch; padded mask positions are false."""
    n = len(seqs)
    tokens = np.full((n, pad_to), pad_id, dtype=np.int32)
    mask = np.zeros((n, pad_to), dtype=bool)
    aux = np.zeros((n, pad_to), dtype=bool)
    lengths = np.zeros(n, dtype=np.int32)
    for i, s in enumerate(seqs):
        L = len(s.tokens)
        if L > pad_to:
            raise ValueError(f"sequence length {L} exceeds pad_to {pad_to}")
        tokens[i, :L] = s.tokens
        mask[i, :L] = s.loss_mask
        if s.aux_mask is not None:
            aux[i, :L] = s.aux_mask
        lengths[i] = L
    return {"tokens": tokens, "mask": mask, "aux_mask": aux, "lengths": lengths}


def save_sequences(seqs, path: str) -> None:
    with open(path, "w") as f:
        for s in seqs:
            row = {
                "stage": s.stage,
                "tokens": [int(t) for t in s.tokens],
                "mask": [int(bool(m)) for m in s.loss_mask],
                "meta": s.meta,
            }
            if s.aux_mask is not None:
                row["aux_mask"] = [int(bool(m)) for m in s.aux_mask]
            f.write(json.dumps(row) + "\n")


def load_sequences(path: str) -> list:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                aux = row.get("aux_mask")
                out.append(
                    TrainingSequence(
                        tokens=row["tokens"],
                        loss_mask=[bool(m) for m in row["mask"]],
                        stage=row["stage"],
                        meta=row.get("meta", {}),
                        aux_mask=None if aux is None else [bool(m) for m in aux],
                    )
                )
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out
