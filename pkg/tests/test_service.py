import json

import pytest
from fastapi.testclient import TestClient

from tled.service.app import app


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


def run_request(workspace, **solver):
    cfg = json.loads((workspace / "run.json").read_text())
    cfg["solver"].update(solver)
    return {"config": cfg, "base_dir": str(workspace)}


def test_health(client):
    assert client.get("/health").json() == {"status": "ok"}


class TestMetrics:
    def test_three_four_five(self, client):
        r = client.post("/metrics", json={"a": [[0, 0, 0]], "b": [[3, 4, 0]]})
        assert r.status_code == 200
        body = r.json()
        assert body["hausdorff_mm"] == 5.0 and body["threshold_mm"] == 1.7

    def test_percentile_validated(self, client):
        assert client.post("/metrics", json={"a": [[0, 0, 0]], "b": [[1, 0, 0]], "percentile": 0}).status_code == 422

    def test_empty_set(self, client):
        r = client.post("/metrics", json={"a": [], "b": [[1, 0, 0]]})
        assert r.status_code == 422 and r.json()["kind"] == "MetricsError"


class TestSolve:
    def test_solve_and_warp(self, client, workspace):
        r = client.post("/solve", json=run_request(workspace))
        assert r.status_code == 200 and r.json()["converged"]
        w = client.post("/warp", json=run_request(workspace))
        assert w.status_code == 200 and w.json()["volume_path"].endswith("warped.json")

    def test_not_converged_is_reported(self, client, workspace):
        r = client.post("/solve", json=run_request(workspace, max_iterations=5))
        assert r.status_code == 200 and not r.json()["converged"]

    def test_instability_is_conflict(self, client, workspace):
        r = client.post("/solve", json=run_request(workspace, dt_safety=1.5))
        assert r.status_code == 409

    def test_invalid_config(self, client, workspace):
        req = run_request(workspace)
        del req["config"]["geometry"]
        r = client.post("/solve", json=req)
        assert r.status_code == 422 and r.json()["kind"] == "ConfigError"


def test_verify(client):
    r = client.post("/verify", json={"suites": "metrics"})
    assert r.status_code == 200
    body = r.json()
    assert body["passed"] and set(body["timings_s"]) == {"metrics"}


def test_verify_unknown_suite(client):
    assert client.post("/verify", json={"suites": "bogus"}).status_code == 422
