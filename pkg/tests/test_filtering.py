import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planact.filtering import (
    FILTER_PROMPT,
    FilterRequest,
    FilterResponse,
    FilterTransportError,
    FilterValidationError,
    filter_keysteps_csv,
    filter_remote,
    filter_stub,
    rewrite_csv,
)
from planact.keysteps import ExtractorConfig, extract_keysteps, write_keysteps_csv

from conftest import make_episode


def img(fill, shape=(8, 8)):
    return np.full(shape, fill, dtype=np.int16)


def req_of(images, rows=None):
    rows = rows if rows is not None else list(range(len(images)))
    return FilterRequest(
        instruction="put the red block on the blue pad",
        candidates=list(zip(rows, images)),
    )


def test_prompt_is_bundled_and_pinned():
    assert FILTER_PROMPT.startswith(
        "You are filtering candidate structured frames"
    )
    assert "kept_rows: [int, ...]" in FILTER_PROMPT
    with pytest.raises(ValueError, match="prompt"):
        FilterRequest("x", [(0, img(0))], prompt="something else").validate()


def test_request_rows_must_increase():
    with pytest.raises(ValueError, match="increasing"):
        req_of([img(0), img(1)], rows=[3, 1]).validate()


def test_stub_total_redundancy():
    resp = filter_stub(req_of([img(2)] * 4))
    assert resp.kept_rows == [0]
    assert resp.filtered_ok
    assert len(resp.problems) == 3


def test_stub_all_distinct_kept():
    images = [img(v) for v in (0, 40, 80, 120)]
    resp = filter_stub(req_of(images), near_dup_threshold=0.01)
    assert resp.kept_rows == [0, 1, 2, 3]
    assert resp.problems == []


def test_stub_middle_near_duplicate_dropped():
    # 2x2 fixtures: dynamic range 10; middle differs from first by MAD 0.25/10
    a = np.array([[0, 0], [0, 10]], dtype=np.int16)
    b = a.copy()
    b[0, 0] = 1  # MAD vs a = 0.25 -> 0.025 of range
    c = np.array([[10, 10], [10, 0]], dtype=np.int16)
    resp = filter_stub(req_of([a, b, c]), near_dup_threshold=0.05)
    assert resp.kept_rows == [0, 2]
    assert resp.problems == ["row 1 visually too close to row 0"]


def test_stub_chain_compares_to_last_kept():
    # drifting images: each consecutive pair is under threshold, but the
    # comparison anchor stays at the last KEPT frame, so drift accumulates
    images = [img(v) for v in (0, 2, 4, 6, 8)]
    resp = filter_stub(req_of(images), near_dup_threshold=0.5)
    assert resp.kept_rows == [0, 2, 4]


def test_stub_dim_mismatch():
    with pytest.raises(ValueError, match="shape"):
        filter_stub(req_of([img(0), img(0, shape=(16, 16))]))


def test_stub_empty_request():
    resp = filter_stub(req_of([]))
    assert resp.kept_rows == []


@given(
    fills=st.lists(st.integers(0, 10), min_size=1, max_size=8),
    thr=st.floats(0.001, 0.5),
)
@settings(max_examples=50, deadline=None)
def test_stub_idempotent(fills, thr):
    images = [img(v) for v in fills]
    first = filter_stub(req_of(images), near_dup_threshold=thr)
    kept_images = [images[r] for r in first.kept_rows]
    second = filter_stub(req_of(kept_images, rows=first.kept_rows),
                         near_dup_threshold=thr)
    assert second.kept_rows == first.kept_rows


class FakeReply:
    def __init__(self, payload=None, status=200, text=""):
        self._payload = payload
        self.status_code = status
        self.text = text or json.dumps(payload)

    def json(self):
        if isinstance(self._payload, Exception):
            raise self._payload
        if self._payload is None:
            raise ValueError("no json")
        return self._payload


class FakeSession:
    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers})
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply


def good_payload(kept):
    return {"filtered_ok": True, "problems": [], "kept_rows": kept}


def test_remote_accepts_conformant_response():
    session = FakeSession([FakeReply(good_payload([0, 2, 3]))])
    req = req_of([img(v) for v in (0, 1, 2, 3)])
    resp = filter_remote(req, endpoint="http://filter.test/v1", session=session)
    assert resp.kept_rows == [0, 2, 3]
    body = session.calls[0]["json"]
    assert body["prompt"] == FILTER_PROMPT
    assert [c["row_index"] for c in body["candidates"]] == [0, 1, 2, 3]
    assert all("image_b64" in c for c in body["candidates"])


def test_remote_rejects_malformed_json():
    session = FakeSession([FakeReply(ValueError("bad json"), text="<html>")])
    with pytest.raises(FilterValidationError):
        filter_remote(req_of([img(0)]), endpoint="http://filter.test", session=session)


def test_remote_rejects_subset_violation():
    session = FakeSession([FakeReply(good_payload([5]))])
    req = req_of([img(v) for v in (0, 1, 2)])
    with pytest.raises(FilterValidationError) as err:
        filter_remote(req, endpoint="http://filter.test", session=session)
    assert err.value.payload == good_payload([5])


def test_remote_rejects_order_violation():
    session = FakeSession([FakeReply(good_payload([2, 0]))])
    req = req_of([img(v) for v in (0, 1, 2)])
    with pytest.raises(FilterValidationError):
        filter_remote(req, endpoint="http://filter.test", session=session)


def test_remote_rejects_missing_fields():
    session = FakeSession([FakeReply({"kept_rows": [0]})])
    with pytest.raises(FilterValidationError, match="missing"):
        filter_remote(req_of([img(0)]), endpoint="http://filter.test",
                      session=session)


def test_remote_retries_then_succeeds():
    import requests as _requests

    session = FakeSession(
        [_requests.ConnectionError("down"), FakeReply(good_payload([0]))]
    )
    resp = filter_remote(req_of([img(0)]), endpoint="http://filter.test",
                         session=session, backoff=0.0)
    assert resp.kept_rows == [0]
    assert len(session.calls) == 2


def test_remote_transport_error_after_retries():
    import requests as _requests

    session = FakeSession([_requests.ConnectionError("down")] * 3)
    with pytest.raises(FilterTransportError):
        filter_remote(req_of([img(0)]), endpoint="http://filter.test",
                      session=session, retries=2, backoff=0.0)
    assert len(session.calls) == 3


def test_remote_env_endpoint(monkeypatch):
    session = FakeSession([FakeReply(good_payload([0]))])
    monkeypatch.setenv("PLANACT_FILTER_ENDPOINT", "http://from.env/v1")
    monkeypatch.setenv("PLANACT_FILTER_API_KEY", "sekrit")
    filter_remote(req_of([img(0)]), session=session)
    assert session.calls[0]["url"] == "http://from.env/v1"
    assert session.calls[0]["headers"]["Authorization"] == "Bearer sekrit"


def test_remote_no_endpoint_error(monkeypatch):
    monkeypatch.delenv("PLANACT_FILTER_ENDPOINT", raising=False)
    with pytest.raises(ValueError, match="endpoint"):
        filter_remote(req_of([img(0)]))


class _CannedHandler(BaseHTTPRequestHandler):
    payload = good_payload([0])

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        assert body["prompt"].startswith("You are filtering")
        out = json.dumps(self.payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


def test_remote_against_live_http_server():
    server = HTTPServer(("127.0.0.1", 0), _CannedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        port = server.server_address[1]
        resp = filter_remote(
            req_of([img(0)]), endpoint=f"http://127.0.0.1:{port}/filter"
        )
        assert resp.kept_rows == [0]
    finally:
        server.shutdown()


def _csv_fixture(tmp_path, n_eps=2):
    rng = np.random.default_rng(3)
    eps = []
    for i in range(n_eps):
        T = int(rng.integers(30, 80))
        deltas = rng.normal(0, 0.3, size=(T + 1, 2))
        grips = (rng.random(T + 1) > 0.5).astype(float)
        eps.append(make_episode(deltas, grips, ep_id=f"ep{i}"))
    cfg = ExtractorConfig()
    items = [(ep, extract_keysteps(ep, cfg)) for ep in eps]
    path = tmp_path / "keysteps.csv"
    write_keysteps_csv(items, str(path))
    return eps, str(path)


def test_rewrite_identity(tmp_path):
    _, path = _csv_fixture(tmp_path)
    raw = open(path, "rb").read()
    n_rows = raw.decode().count("\n") - 1
    out = tmp_path / "out.csv"
    rewrite_csv(path, FilterResponse(True, [], list(range(n_rows))), str(out))
    assert open(out, "rb").read() == raw


def test_rewrite_empty(tmp_path):
    _, path = _csv_fixture(tmp_path)
    out = tmp_path / "out.csv"
    rewrite_csv(path, FilterResponse(True, [], []), str(out))
    content = open(out, "rb").read()
    header = open(path, "rb").read().split(b"\n")[0] + b"\n"
    assert content == header


def test_rewrite_selected_rows_verbatim(tmp_path):
    path = tmp_path / "fixture.csv"
    header = ",".join(
        ["episode_id", "row_index", "timestep", "frame_id", "source",
         "speed_ema", "gripper_state"]
    )
    rows = [f"ep0,{i},{i * 3},ep0/{i * 3},turn,0.0{i},0" for i in range(5)]
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    out = tmp_path / "out.csv"
    rewrite_csv(str(path), FilterResponse(True, [], [1, 3]), str(out))
    expected = header + "\n" + rows[1] + "\n" + rows[3] + "\n"
    assert open(out, "r").read() == expected
    # original untouched
    assert open(path, "r").read() == header + "\n" + "\n".join(rows) + "\n"


def test_rewrite_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="header"):
        rewrite_csv(str(path), FilterResponse(True, [], []), str(tmp_path / "o.csv"))


def test_rewrite_out_of_range(tmp_path):
    _, path = _csv_fixture(tmp_path)
    with pytest.raises(ValueError, match="out of range"):
        rewrite_csv(path, FilterResponse(True, [], [10_000]),
                    str(tmp_path / "o.csv"))


@given(seed=st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_rewrite_random_subsets_schema_preserved(tmp_path_factory, seed):
    tmp_path = tmp_path_factory.mktemp("rw")
    _, path = _csv_fixture(tmp_path)
    lines = open(path, "r", newline="").readlines()
    n_rows = len(lines) - 1
    rng = np.random.default_rng(seed)
    kept = sorted(
        int(i) for i in rng.choice(n_rows, size=rng.integers(0, n_rows + 1),
                                   replace=False)
    )
    out = tmp_path / f"out{seed}.csv"
    rewrite_csv(path, FilterResponse(True, [], kept), str(out))
    out_lines = open(out, "r", newline="").readlines()
    assert out_lines[0] == lines[0]
    assert out_lines[1:] == [lines[1 + r] for r in kept]


def test_filter_keysteps_csv_pipeline(tmp_path):
    eps, path = _csv_fixture(tmp_path)
    out = tmp_path / "filtered.csv"
    resp = filter_keysteps_csv(
        path, {ep.id: ep for ep in eps}, str(out),
        lambda req: filter_stub(req, near_dup_threshold=0.01),
    )
    from planact.keysteps import read_keysteps_csv

    rows = read_keysteps_csv(str(out))
    assert [r["row_index"] for r in rows] == resp.kept_rows
    # surviving lines byte-match the originals
    orig_lines = open(path, "r", newline="").readlines()
    out_lines = open(out, "r", newline="").readlines()
    assert out_lines[1:] == [orig_lines[1 + r] for r in resp.kept_rows]
