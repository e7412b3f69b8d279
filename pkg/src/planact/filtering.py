"""Offline refinement of keystep CSVs.

A remote visual filter (HTTP client speaking a fixed JSON schema), a
deterministic near-duplicate stub for tests and offline runs, and a
byte-preserving CSV rewrite.  Filtering only ever deletes rows; the
surviving lines are copied verbatim.
"""

from __future__ import annotations

import base64
import importlib.resources
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import requests

from .keysteps import KEYSTEP_COLUMNS

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "PLANACT_FILTER_ENDPOINT"
API_KEY_ENV = "PLANACT_FILTER_API_KEY"

FILTER_PROMPT = (
    importlib.resources.files("planact")
    .joinpath("data/filter_prompt.txt")
    .read_text(encoding="utf-8")
)


class FilterTransportError(RuntimeError):
    """Network-level failure after retries; safe to retry the batch later."""


class FilterValidationError(ValueError):
    """Schema-invalid response; carries the raw payload for audit."""

    def __init__(self, message: str, payload=None):
        super().__init__(message)
        self.payload = payload


@dataclass
class FilterRequest:
    instruction: str
    candidates: list[tuple[int, np.ndarray]]
    prompt: str = FILTER_PROMPT

    def validate(self) -> None:
        rows = [r for r, _ in self.candidates]
        if any(b <= a for a, b in zip(rows, rows[1:])):
            raise ValueError(f"candidate row indices not strictly increasing: {rows}")
        if self.prompt != FILTER_PROMPT:
            raise ValueError("prompt does not match the bundled template")


@dataclass
class FilterResponse:
    filtered_ok: bool
    problems: list[str] = field(default_factory=list)
    kept_rows: list[int] = field(default_factory=list)

    def validate_against(self, req: FilterRequest, payload=None) -> None:
        rows = [r for r, _ in req.candidates]
        allowed = set(rows)
        for r in self.kept_rows:
            if r not in allowed:
                raise FilterValidationError(
                    f"kept row {r} not among candidates {sorted(allowed)}", payload
                )
        for a, b in zip(self.kept_rows, self.kept_rows[1:]):
            if b <= a:
                raise FilterValidationError(
                    f"kept_rows not strictly increasing: {self.kept_rows}", payload
                )


def _image_b64(image: np.ndarray) -> str:
    from PIL import Image

    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {arr.shape}")
    png = io.BytesIO()
    Image.fromarray(arr.astype(np.uint8), mode="L").save(png, format="PNG")
    return base64.b64encode(png.getvalue()).decode("ascii")


def _parse_response(payload, req: FilterRequest) -> FilterResponse:
    if not isinstance(payload, dict):
        raise FilterValidationError(f"response is not an object: {type(payload)}",
                                    payload)
    missing = {"filtered_ok", "problems", "kept_rows"} - set(payload)
    if missing:
        raise FilterValidationError(f"response missing fields {sorted(missing)}",
                                    payload)
    try:
        resp = FilterResponse(
            filtered_ok=bool(payload["filtered_ok"]),
            problems=[str(p) for p in payload["problems"]],
            kept_rows=[int(r) for r in payload["kept_rows"]],
        )
    except (TypeError, ValueError) as exc:
        raise FilterValidationError(f"response fields ill-typed: {exc}",
                                    payload) from exc
    resp.validate_against(req, payload)
    return resp


def filter_remote(
    req: FilterRequest,
    endpoint: str | None = None,
    timeout: float = 30.0,
    api_key: str | None = None,
    retries: int = 2,
    backoff: float = 0.5,
    session=None,
) -> FilterResponse:
    """POST the request to a visual filter service and validate the reply.

    Endpoint and API key fall back to the PLANACT_FILTER_ENDPOINT and
    PLANACT_FILTER_API_KEY environment variables.  Transport failures are
    retried `retries` times with exponential backoff and then raised;
    schema violations are never retried.
    """
    req.validate()
    endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
    if not endpoint:
        raise ValueError(f"no endpoint given and {ENDPOINT_ENV} unset")
    api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
    body = {
        "prompt": req.prompt,
        "instruction": req.instruction,
        "candidates": [
            {"row_index": r, "image_b64": _image_b64(img)}
            for r, img in req.candidates
        ],
    }
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    post = session.post if session is not None else requests.post

    last_exc: Exception | None = None
    for attempt in range(retries + 1):
        try:
            reply = post(endpoint, json=body, headers=headers, timeout=timeout)
        except requests.RequestException as exc:
            last_exc = exc
            if attempt < retries:
                time.sleep(backoff * (2**attempt))
                continue
            raise FilterTransportError(
                f"filter endpoint unreachable after {retries + 1} attempts: {exc}"
            ) from exc
        if reply.status_code >= 500:
            last_exc = RuntimeError(f"server error {reply.status_code}")
            if attempt < retries:
                time.sleep(backoff * (2**attempt))
                continue
            raise FilterTransportError(
                f"filter endpoint kept failing: HTTP {reply.status_code}"
            )
        if reply.status_code != 200:
            raise FilterValidationError(
                f"filter endpoint rejected the request: HTTP {reply.status_code}",
                getattr(reply, "text", None),
            )
        try:
            payload = reply.json()
        except ValueError as exc:
            raise FilterValidationError(
                f"response is not JSON: {exc}", getattr(reply, "text", None)
            ) from exc
        return _parse_response(payload, req)
    raise FilterTransportError(f"unreachable: {last_exc}")


def filter_stub(req: FilterRequest, near_dup_threshold: float = 0.01) -> FilterResponse:
    """Deterministic near-duplicate pruning standing in for the remote filter.

    Keeps the first candidate, then drops any candidate whose mean absolute
    pixel difference to the previously kept one falls below the threshold
    (a fraction of the batch's pixel dynamic range).
    """
    req.validate()
    if not req.candidates:
        return FilterResponse(filtered_ok=True)
    shapes = {img.shape for _, img in req.candidates}
    if len(shapes) != 1:
        raise ValueError(f"candidate images differ in shape: {shapes}")
    stack = np.stack([np.asarray(img, dtype=float) for _, img in req.candidates])
    dyn = float(stack.max() - stack.min())
    if dyn == 0.0:
        dyn = 1.0
    kept: list[int] = []
    problems: list[str] = []
    prev_img = None
    for (row, _), img in zip(req.candidates, stack):
        if prev_img is None:
            kept.append(row)
            prev_img = img
            continue
        mad = float(np.mean(np.abs(img - prev_img))) / dyn
        if mad < near_dup_threshold:
            problems.append(f"row {row} visually too close to row {kept[-1]}")
        else:
            kept.append(row)
            prev_img = img
    return FilterResponse(filtered_ok=True, problems=problems, kept_rows=kept)


def rewrite_csv(original: str, resp: FilterResponse, out: str) -> None:
    """Write header plus exactly the kept rows, each line byte-identical."""
    with open(original, "r", encoding="utf-8", newline="") as fh:
        lines = fh.readlines()
    if not lines:
        raise ValueError(f"{original}: empty file, header required")
    header = lines[0]
    if [c.strip() for c in header.rstrip("\r\n").split(",")] != list(KEYSTEP_COLUMNS):
        raise ValueError(f"{original}: header does not match keystep schema")
    data = lines[1:]
    for r in resp.kept_rows:
        if not 0 <= r < len(data):
            raise ValueError(f"kept row {r} out of range (file has {len(data)} rows)")
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(header)
        for r in resp.kept_rows:
            fh.write(data[r])


def filter_keysteps_csv(
    csv_path: str,
    episodes: dict,
    out_path: str,
    decide,
) -> FilterResponse:
    """Filter a whole keystep CSV grouped per episode, then rewrite once.

    `episodes` maps episode id -> Episode (for candidate images); `decide`
    maps FilterRequest -> FilterResponse (stub or remote).  Returns the
    combined response over global row indices.
    """
    from .keysteps import read_keysteps_csv

    rows = read_keysteps_csv(csv_path)
    groups: dict[str, list[dict]] = {}
    for row in rows:
        groups.setdefault(row["episode_id"], []).append(row)

    all_kept: list[int] = []
    all_problems: list[str] = []
    for ep_id, group in groups.items():
        ep = episodes.get(ep_id)
        if ep is None:
            raise ValueError(f"{csv_path}: episode {ep_id} not found in episodes")
        cands = [
            (row["row_index"], ep.observations[row["timestep"]].image)
            for row in group
        ]
        req = FilterRequest(instruction=ep.instruction, candidates=cands)
        resp = decide(req)
        resp.validate_against(req)
        all_kept.extend(resp.kept_rows)
        all_problems.extend(resp.problems)
    combined = FilterResponse(
        filtered_ok=True, problems=all_problems, kept_rows=sorted(all_kept)
    )
    rewrite_csv(csv_path, combined, out_path)
    return combined
