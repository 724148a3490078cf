import math

import pytest
from fastapi.testclient import TestClient

from promptguard.config import data_path
from promptguard.service import create_app

from conftest import make_pipeline


@pytest.fixture
def client():
    return TestClient(create_app(make_pipeline()))


def test_generate_ok(client):
    r = client.post("/v1/generate", json={"prompt": "my kid is bullied at school", "population": "minors"})
    assert r.status_code == 200
    body = r.json()
    assert set(body) == {"output", "refused", "trace_id", "report"} and body["refused"] is False


def test_generate_refusal_is_200(client):
    r = client.post("/v1/generate", json={"prompt": "kill yourself"})
    assert r.status_code == 200 and r.json()["refused"] is True


@pytest.mark.parametrize("body", [{}, {"prompt": ""}, {"prompt": 5}, {"prompt": "x", "options": []}])
def test_generate_400(client, body):
    r = client.post("/v1/generate", json=body)
    assert r.status_code == 400 and r.json()["error"]


def test_generate_400_non_json(client):
    r = client.post("/v1/generate", content=b"not json", headers={"content-type": "application/json"})
    assert r.status_code == 400


@pytest.mark.parametrize("body", [
    {"prompt": "hi", "plan_id": "nope"},
    {"prompt": "hi", "population": "martians"},
    {"prompt": "hi", "options": {"epsilon": 2}},
])
def test_generate_422(client, body):
    assert client.post("/v1/generate", json=body).status_code == 422


def test_generate_503():
    c = TestClient(create_app(make_pipeline(rules=[{"match": "", "mode": "error"}])))
    assert c.post("/v1/generate", json={"prompt": "hello there"}).status_code == 503


def test_health_trace_bounds(client):
    assert client.get("/v1/health").json() == {"status": "ok", "pattern_version": 1, "constitution_version": "1.0.0"}
    trace_id = client.post("/v1/generate", json={"prompt": "hello there"}).json()["trace_id"]
    r = client.get(f"/v1/trace/{trace_id}")
    assert r.status_code == 200 and r.headers["content-type"].startswith("application/x-ndjson")
    assert len(r.text.splitlines()) > 3
    assert client.get("/v1/trace/" + "0" * 32).status_code == 404
    b = client.get("/v1/bounds", params={"population": "lgbtq", "alpha": 0.1}).json()
    assert b["dataset_size"] == 10 and b["safety_bound"] == pytest.approx(math.exp(-0.1 * math.sqrt(10)))
    assert client.get("/v1/bounds", params={"population": "nope"}).status_code == 422
    assert client.get("/v1/bounds", params={"population": "lgbtq", "epsilon": 3}).status_code == 422


def test_reload(client, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{broken\n")
    r = client.post("/v1/patterns/reload", json={"path": str(bad)})
    assert r.status_code == 422 and r.json()["pattern_version"] == 1
    r = client.post("/v1/patterns/reload")
    assert r.status_code == 200 and r.json()["pattern_version"] == 2
    good = tmp_path / "good.jsonl"
    good.write_text(data_path("patterns.jsonl").read_text())
    assert client.post("/v1/patterns/reload", json={"path": str(good)}).json()["pattern_version"] == 3
    assert client.get("/v1/health").json()["pattern_version"] == 3
