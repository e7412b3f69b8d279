"""Action-serving HTTP endpoint wrapping a trained policy checkpoint.

POST /act takes an instruction plus an observation history and returns
one action chunk; GET /health reports checkpoint and config hashes.  A
history entry carries one image and the actions executed since the
previous entry, so the first entry (the episode's first retained frame,
at time zero) must have an empty prev_actions.  Under greedy decoding
the response is byte-identical to an offline policy_step call on the
same history; requests are served sequentially per model instance.
"""

from __future__ import annotations

import hashlib
import json
import threading

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .model import TrainConfig, policy_step
from .sequences import BuildConfig, policy_history_times

INT16_MAX = 32767


class HistoryEntry(BaseModel):
    image: list[list[int]]
    prev_actions: list[list[float]] = Field(default_factory=list)


class ActRequest(BaseModel):
    instruction: str
    history: list[HistoryEntry] = Field(min_length=1)


def _params_sha256(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


def _config_sha256(train_cfg: TrainConfig, build_cfg: BuildConfig,
                   space) -> str:
    blob = json.dumps(
        {
            "train": vars(train_cfg),
            "build": vars(build_cfg),
            "space": [space.lang_size, space.vision_size, space.action_size],
        },
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def _error(status: int, detail) -> JSONResponse:
    return JSONResponse(status_code=status, content={"detail": detail})


def create_app(
    params: dict,
    train_cfg: TrainConfig,
    build_cfg: BuildConfig,
    codecs,
    image_hw: tuple = (32, 32),
    meta: dict | None = None,
) -> FastAPI:
    app = FastAPI(title="action service")
    lock = threading.Lock()
    dims = codecs.action.dims
    horizon = codecs.action.chunk_horizon
    checkpoint_hash = _params_sha256(params)
    config_hash = _config_sha256(train_cfg, build_cfg, codecs.space)

    @app.exception_handler(RequestValidationError)
    async def invalid(request: Request, exc: RequestValidationError):
        # schema errors surface the offending field path, as 400 not 422
        detail = [
            {"loc": [str(p) for p in e["loc"]], "msg": e["msg"]}
            for e in exc.errors()
        ]
        return _error(400, detail)

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "checkpoint_sha256": checkpoint_hash,
            "config_sha256": config_hash,
            "vocab_size": codecs.space.vocab_size,
            "horizon": horizon,
            "dims": dims,
            "meta": meta or {},
        }

    @app.post("/act")
    def act(req: ActRequest):
        if req.history[0].prev_actions:
            return _error(400, [{
                "loc": ["history", "0", "prev_actions"],
                "msg": "first history entry must have no prev_actions",
            }])
        frames = {}
        actions: list = []
        for i, entry in enumerate(req.history):
            for j, row in enumerate(entry.prev_actions):
                if len(row) != dims:
                    return _error(400, [{
                        "loc": ["history", str(i), "prev_actions", str(j)],
                        "msg": f"expected {dims} action dims, got {len(row)}",
                    }])
                actions.append(row)
            img = entry.image
            if len(img) != image_hw[0] or any(
                len(r) != image_hw[1] for r in img
            ):
                return _error(400, [{
                    "loc": ["history", str(i), "image"],
                    "msg": f"expected {image_hw[0]}x{image_hw[1]} image",
                }])
            if any(abs(v) > INT16_MAX for r in img for v in r):
                return _error(400, [{
                    "loc": ["history", str(i), "image"],
                    "msg": "pixel value out of int16 range",
                }])
            frames[len(actions)] = np.asarray(img, dtype=np.int16)
        t_now = len(actions)
        needed = policy_history_times(t_now, build_cfg)
        missing = [t for t in needed if t not in frames]
        if missing:
            return _error(400, [{
                "loc": ["history"],
                "msg": f"missing frames at timesteps {missing} "
                       f"(need {needed})",
            }])
        with lock:
            try:
                chunk, info = policy_step(
                    params, codecs, build_cfg, train_cfg,
                    req.instruction, frames,
                    np.asarray(actions, dtype=float)
                    if actions else np.zeros((0, dims)),
                    with_info=True,
                )
            except ValueError as exc:
                return _error(400, [{"loc": ["history"], "msg": str(exc)}])
        body = {"actions": chunk.tolist(), "horizon": horizon}
        if info["fallback"]:
            body["warning"] = "undecodable action tokens; zero chunk emitted"
        return body

    return app


def run_server(app: FastAPI, port: int) -> None:
    import uvicorn

    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
