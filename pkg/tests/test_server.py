"""HTTP API contract tests over a finished experiment."""

import hashlib
import os

import pytest
from fastapi.testclient import TestClient

from skelcap.server import ServiceError, build_app, load_service


@pytest.fixture(scope="module")
def client(tiny_experiment):
    app = build_app(tiny_experiment["out"])
    with TestClient(app) as c:
        yield c


def tree_hashes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


def test_health_reports_checkpoint_versions(client):
    body = client.get("/api/health").json()
    assert body["status"] == "ok"
    assert body["checkpoint_versions"] == {"baseline": 1, "stage1": 1, "stage2": 1}


def test_examples_pagination(client):
    full = client.get("/api/examples", params={"split": "val", "limit": 28}).json()
    assert len(full) == 28
    assert set(full[0]) == {"image_id", "concepts", "clean", "noisy"}
    page = client.get("/api/examples", params={"split": "val", "offset": 10, "limit": 5}).json()
    assert page == full[10:15]
    resp = client.get("/api/examples", params={"limit": 0})
    assert resp.status_code == 200
    assert resp.json() == []
    beyond = client.get("/api/examples", params={"offset": 999, "limit": 5}).json()
    assert beyond == []


def test_examples_validation(client):
    resp = client.get("/api/examples", params={"split": "nope"})
    assert resp.status_code == 400
    assert resp.json()["detail"][0]["field"] == "split"
    resp = client.get("/api/examples", params={"offset": -1})
    assert resp.status_code == 400
    resp = client.get("/api/examples", params={"limit": "many"})
    assert resp.status_code == 400
    assert any("limit" in d["field"] for d in resp.json()["detail"])


def test_predict_shape(client):
    image_id = client.get("/api/examples", params={"limit": 1}).json()[0]["image_id"]
    body = client.get(f"/api/predict/{image_id}").json()
    assert set(body) == {"image_id", "baseline_caption", "skeleton", "skeleton_caption", "log_probs"}
    assert body["image_id"] == image_id
    assert isinstance(body["baseline_caption"], list)
    assert body["skeleton"] and all(isinstance(t, str) for t in body["skeleton"])
    assert len(body["log_probs"]) >= len(body["skeleton_caption"])


def test_predict_unknown_image_404(client):
    resp = client.get("/api/predict/no-such-image")
    assert resp.status_code == 404


def test_regenerate_matches_predict(client):
    image_id = client.get("/api/examples", params={"limit": 1}).json()[0]["image_id"]
    predicted = client.get(f"/api/predict/{image_id}").json()
    resp = client.post(
        "/api/regenerate", json={"image_id": image_id, "skeleton": predicted["skeleton"]}
    )
    assert resp.status_code == 200
    body = resp.json()
    assert body["caption"] == predicted["skeleton_caption"]
    assert body["skeleton"] == predicted["skeleton"]
    assert body["log_probs"] == predicted["log_probs"]


def test_regenerate_is_pure(client):
    image_id = client.get("/api/examples", params={"limit": 1}).json()[0]["image_id"]
    payload = {"image_id": image_id, "skeleton": ["person", "dog", "run"]}
    first = client.post("/api/regenerate", json=payload).json()
    second = client.post("/api/regenerate", json=payload).json()
    assert first == second


def test_regenerate_empty_skeleton_allowed(client):
    image_id = client.get("/api/examples", params={"limit": 1}).json()[0]["image_id"]
    resp = client.post("/api/regenerate", json={"image_id": image_id, "skeleton": []})
    assert resp.status_code == 200
    assert "caption" in resp.json()


def test_regenerate_rejects_reserved_tokens(client):
    image_id = client.get("/api/examples", params={"limit": 1}).json()[0]["image_id"]
    for bad in (["SEP"], ["<sep>", "dog"], ["<pad>"]):
        resp = client.post("/api/regenerate", json={"image_id": image_id, "skeleton": bad})
        assert resp.status_code == 400
        assert resp.json()["detail"][0]["field"] == "skeleton"


def test_regenerate_rejects_out_of_vocab(client):
    image_id = client.get("/api/examples", params={"limit": 1}).json()[0]["image_id"]
    resp = client.post("/api/regenerate", json={"image_id": image_id, "skeleton": ["zyzzyva"]})
    assert resp.status_code == 400


def test_regenerate_validation_errors(client):
    image_id = client.get("/api/examples", params={"limit": 1}).json()[0]["image_id"]
    resp = client.post("/api/regenerate", json={"image_id": image_id})
    assert resp.status_code == 400
    assert any(d["field"].endswith("skeleton") for d in resp.json()["detail"])
    resp = client.post(
        "/api/regenerate",
        json={"image_id": image_id, "skeleton": [], "options": {"beam": 0}},
    )
    assert resp.status_code == 400
    resp = client.post(
        "/api/regenerate",
        json={"image_id": image_id, "skeleton": [], "mystery": 1},
    )
    assert resp.status_code == 400
    resp = client.post(
        "/api/regenerate", json={"image_id": "no-such-image", "skeleton": ["dog"]}
    )
    assert resp.status_code == 404


def test_regenerate_mode_mismatch(client):
    image_id = client.get("/api/examples", params={"limit": 1}).json()[0]["image_id"]
    resp = client.post(
        "/api/regenerate",
        json={"image_id": image_id, "skeleton": ["dog"], "options": {"mode": "ske_dec"}},
    )
    assert resp.status_code == 400
    assert resp.json()["detail"][0]["field"] == "options.mode"


def test_request_storm_leaves_files_untouched(client, tiny_experiment):
    before = tree_hashes(tiny_experiment["out"])
    image_id = client.get("/api/examples", params={"limit": 1}).json()[0]["image_id"]
    for _ in range(3):
        client.get(f"/api/predict/{image_id}")
        client.post("/api/regenerate", json={"image_id": image_id, "skeleton": ["dog", "run"]})
        client.post("/api/regenerate", json={"image_id": image_id, "skeleton": ["SEP"]})
    assert tree_hashes(tiny_experiment["out"]) == before


def test_load_service_requires_plan(tmp_path):
    with pytest.raises(ServiceError, match="plan"):
        load_service(str(tmp_path))
