import dataclasses

import numpy as np
import pytest
from fastapi.testclient import TestClient

from planact.config import section
from planact.model import policy_step, train_stage2
from planact.sequences import build_policy_samples
from planact.server import create_app


@pytest.fixture(scope="module")
def served(tiny_pipeline):
    cfg = tiny_pipeline["cfg"]
    codecs = tiny_pipeline["codecs"]
    build_cfg = section(cfg, "build")
    train_cfg = section(cfg, "train")
    samples = [
        s
        for ep in tiny_pipeline["episodes"]
        for s in build_policy_samples(ep, build_cfg, codecs)
    ]
    params = train_stage2(
        None, samples, dataclasses.replace(train_cfg, steps=6),
        codecs.space.vocab_size, codecs.space.pad,
    )
    app = create_app(params, train_cfg, build_cfg, codecs,
                     image_hw=(32, 32), meta={"run": "test"})
    client = TestClient(app)
    return client, params, train_cfg, build_cfg, codecs


def _request_at(ep, t_now, exec_k=2):
    """Rolling-client request: one entry per exec_k actions, up to t_now."""
    entries = []
    prev = 0
    for u in range(0, t_now + 1, exec_k):
        entries.append({
            "image": ep.observations[u].image.tolist(),
            "prev_actions": [
                a.command_vector().tolist() for a in ep.actions[prev:u]
            ],
        })
        prev = u
    return {"instruction": ep.instruction, "history": entries}


class TestHealth:
    def test_ok(self, served):
        client = served[0]
        r = client.get("/health")
        assert r.status_code == 200
        body = r.json()
        assert body["status"] == "ok"
        assert len(body["checkpoint_sha256"]) == 64
        assert len(body["config_sha256"]) == 64
        assert body["horizon"] == 4
        assert body["dims"] == 3
        assert body["meta"] == {"run": "test"}

    def test_hash_tracks_params(self, served, tiny_pipeline):
        client, params, train_cfg, build_cfg, codecs = served
        other = {k: v.copy() for k, v in params.items()}
        other["emb"] = other["emb"] + 1e-9
        app2 = create_app(other, train_cfg, build_cfg, codecs)
        r2 = TestClient(app2).get("/health").json()
        assert r2["checkpoint_sha256"] != \
            client.get("/health").json()["checkpoint_sha256"]
        assert r2["config_sha256"] == \
            client.get("/health").json()["config_sha256"]


class TestAct:
    def test_chunk_shape(self, served, tiny_pipeline):
        client = served[0]
        ep = tiny_pipeline["episodes"][0]
        r = client.post("/act", json=_request_at(ep, 4))
        assert r.status_code == 200
        acts = r.json()["actions"]
        assert len(acts) == 4
        assert all(len(row) == 3 for row in acts)

    def test_single_frame_request(self, served, tiny_pipeline):
        client = served[0]
        ep = tiny_pipeline["episodes"][1]
        r = client.post("/act", json=_request_at(ep, 0))
        assert r.status_code == 200

    def test_matches_offline_policy_step(self, served, tiny_pipeline):
        client, params, train_cfg, build_cfg, codecs = served
        for ep in tiny_pipeline["episodes"][:2]:
            for t_now in (0, 2, 4, 6):
                resp = client.post("/act", json=_request_at(ep, t_now))
                assert resp.status_code == 200
                got = np.asarray(resp.json()["actions"], dtype=float)
                obs = [o.image for o in ep.observations[: t_now + 1]]
                acts = [
                    a.command_vector() for a in ep.actions[:t_now]
                ]
                want = policy_step(params, codecs, build_cfg, train_cfg,
                                   ep.instruction, obs, acts)
                assert np.array_equal(got, want)

    def test_deterministic(self, served, tiny_pipeline):
        client = served[0]
        req = _request_at(tiny_pipeline["episodes"][0], 2)
        a = client.post("/act", json=req).json()["actions"]
        b = client.post("/act", json=req).json()["actions"]
        assert a == b


class TestRejections:
    def test_missing_instruction(self, served):
        client = served[0]
        r = client.post("/act", json={"history": [{"image": [[0]]}]})
        assert r.status_code == 400
        assert any("instruction" in e["loc"] for e in r.json()["detail"])

    def test_empty_history(self, served):
        client = served[0]
        r = client.post("/act", json={"instruction": "x", "history": []})
        assert r.status_code == 400

    def test_wrong_image_size(self, served, tiny_pipeline):
        client = served[0]
        req = _request_at(tiny_pipeline["episodes"][0], 0)
        req["history"][0]["image"] = [[0] * 64 for _ in range(64)]
        r = client.post("/act", json=req)
        assert r.status_code == 400
        assert "32x32" in r.json()["detail"][0]["msg"]

    def test_ragged_image(self, served, tiny_pipeline):
        client = served[0]
        req = _request_at(tiny_pipeline["episodes"][0], 0)
        req["history"][0]["image"] = [[0] * 32 for _ in range(32)]
        req["history"][0]["image"][5] = [0] * 31
        assert client.post("/act", json=req).status_code == 400

    def test_pixel_out_of_range(self, served, tiny_pipeline):
        client = served[0]
        req = _request_at(tiny_pipeline["episodes"][0], 0)
        req["history"][0]["image"][0][0] = 70000
        r = client.post("/act", json=req)
        assert r.status_code == 400
        assert "int16" in r.json()["detail"][0]["msg"]

    def test_wrong_action_dims(self, served, tiny_pipeline):
        client = served[0]
        req = _request_at(tiny_pipeline["episodes"][0], 2)
        req["history"][1]["prev_actions"][0] = [0.0, 0.0]
        r = client.post("/act", json=req)
        assert r.status_code == 400
        detail = r.json()["detail"][0]
        assert detail["loc"] == ["history", "1", "prev_actions", "0"]

    def test_first_entry_with_actions(self, served, tiny_pipeline):
        client = served[0]
        ep = tiny_pipeline["episodes"][0]
        req = {
            "instruction": ep.instruction,
            "history": [{
                "image": ep.observations[2].image.tolist(),
                "prev_actions": [
                    a.command_vector().tolist() for a in ep.actions[:2]
                ],
            }],
        }
        r = client.post("/act", json=req)
        assert r.status_code == 400
        assert "first history entry" in r.json()["detail"][0]["msg"]

    def test_missing_needed_frame(self, served, tiny_pipeline):
        # t_now=8 with history 2 and horizon 4 needs frames at 4 and 8
        client = served[0]
        ep = tiny_pipeline["episodes"][0]
        req = {
            "instruction": ep.instruction,
            "history": [
                {"image": ep.observations[0].image.tolist(),
                 "prev_actions": []},
                {"image": ep.observations[8].image.tolist(),
                 "prev_actions": [
                     a.command_vector().tolist() for a in ep.actions[:8]
                 ]},
            ],
        }
        r = client.post("/act", json=req)
        assert r.status_code == 400
        assert "missing frames" in r.json()["detail"][0]["msg"]
        assert "[4]" in r.json()["detail"][0]["msg"]


def test_fallback_sets_warning(served, tiny_pipeline, monkeypatch):
    import planact.server as srv

    client = served[0]

    def fake(*args, **kwargs):
        return np.zeros((4, 3)), {"fallback": True, "n_tokens": 0}

    monkeypatch.setattr(srv, "policy_step", fake)
    r = client.post("/act", json=_request_at(tiny_pipeline["episodes"][0], 0))
    assert r.status_code == 200
    assert "warning" in r.json()
    assert r.json()["actions"] == np.zeros((4, 3)).tolist()
