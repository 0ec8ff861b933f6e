"""Protocol conformance: the shim must pass the published wire fixtures,
including the 400 error shapes, and answer 503 with the documented shape
for capabilities whose model is not loaded."""

from fastapi.testclient import TestClient

from cforge_shim.app import build_app
from cforge_shim.models import ShimConfig

from wire_check import load_fixtures, run_steps


def _request_via(client: TestClient):
    def request(method: str, path: str, payload: dict | None):
        if method == "GET":
            response = client.get(path)
        else:
            response = client.post(path, json=payload)
        if "application/json" in response.headers.get("content-type", ""):
            return response.status_code, response.json()
        return response.status_code, response.content

    return request


def test_shim_passes_wire_fixture_steps(tmp_path):
    app = build_app(ShimConfig(store_dir=str(tmp_path / "store"), embedding_dim=96))
    fixtures = load_fixtures()
    with TestClient(app, raise_server_exceptions=False) as client:
        capabilities = set(client.get("/v1/capabilities").json()["capabilities"])
        assert capabilities == {"txt2img", "edit", "embed", "age", "attributes", "concepts"}
        failures = run_steps(
            _request_via(client),
            fixtures["steps"],
            embedding_dim=96,
            capabilities=capabilities,
        )
    assert failures == []


def test_reduced_shim_returns_503_shapes(tmp_path):
    config = ShimConfig(store_dir=str(tmp_path / "store"))
    config.specs["txt2img"] = None
    config.specs["attributes"] = None
    app = build_app(config)
    fixtures = load_fixtures()
    with TestClient(app, raise_server_exceptions=False) as client:
        capabilities = set(client.get("/v1/capabilities").json()["capabilities"])
        assert "txt2img" not in capabilities and "attributes" not in capabilities
        failures = run_steps(_request_via(client), fixtures["unavailable_steps"])
    assert failures == []


def test_failed_loader_is_503_not_crash(tmp_path):
    config = ShimConfig(store_dir=str(tmp_path / "store"))
    config.specs["embed"] = {"kind": "clip-embed"}  # no model-path configured
    app = build_app(config)
    with TestClient(app, raise_server_exceptions=False) as client:
        assert "embed" not in client.get("/v1/capabilities").json()["capabilities"]
        response = client.post(
            "/v1/embed",
            json={"image-ref": "0" * 64},
        )
        assert response.status_code == 503
        assert response.json()["error"]["code"] == "capability-unavailable"


def test_unknown_hyperparameter_keys_rejected_with_accepted_list(tmp_path):
    app = build_app(ShimConfig(store_dir=str(tmp_path / "store")))
    with TestClient(app, raise_server_exceptions=False) as client:
        ref = client.post("/v1/txt2img", json={"prompt": "p", "seed": 1}).json()["image-ref"]
        response = client.post(
            "/v1/edit",
            json={"parent-image-ref": ref, "attribute": "smile",
                  "hyperparams": {"mystery_knob": 3.0}, "seed": 1},
        )
        assert response.status_code == 400
        message = response.json()["error"]["message"]
        assert "mystery_knob" in message
        assert "edit_strength" in message  # accepted keys are listed


def test_unparseable_body_is_400(tmp_path):
    app = build_app(ShimConfig(store_dir=str(tmp_path / "store")))
    with TestClient(app, raise_server_exceptions=False) as client:
        response = client.post(
            "/v1/txt2img", content=b"not json", headers={"content-type": "application/json"}
        )
        assert response.status_code == 400
        assert response.json()["error"]["code"] == "malformed-request"
