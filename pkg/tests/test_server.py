import base64

import numpy as np
import pytest
from fastapi.testclient import TestClient

from carmtwin.server import create_app
from carmtwin.xray import decode_pgm


@pytest.fixture(scope="module")
def client():
    app = create_app()
    with TestClient(app) as c:
        yield c


@pytest.fixture(scope="module")
def session(client):
    resp = client.post("/sessions", json={
        "phantom": "default",
        "pixel_pitch_mm": 2.0,
        "grid_spacing_mm": 4.0,
        "grid_radius_mm": 160.0,
    })
    assert resp.status_code == 200
    body = resp.json()
    assert body["phantom"] == "torso"
    assert "heart" in body["prompts"]
    return body["session_id"]


def say(client, sid, text):
    resp = client.post(f"/sessions/{sid}/utterance", json={"text": text})
    assert resp.status_code == 200
    return resp.json()


class TestServerDefaults:
    def test_cli_style_defaults_apply_unless_overridden(self):
        app = create_app(defaults={
            "pixel_pitch_mm": 4.0,
            "corruption": {"blur_sigma_px": 1.5, "seed": 7},
        })
        with TestClient(app) as c:
            sid = c.post("/sessions", json={}).json()["session_id"]
            rt = app.state.sessions[sid]
            assert rt.state.config.pixel_pitch_mm == 4.0
            assert rt.state.segmenter.cfg.blur_sigma_px == 1.5
            # explicit request fields win over server defaults
            sid2 = c.post("/sessions", json={"pixel_pitch_mm": 2.0}).json()["session_id"]
            assert app.state.sessions[sid2].state.config.pixel_pitch_mm == 2.0


class TestSessionLifecycle:
    def test_unknown_session_404(self, client):
        assert client.get("/sessions/nope/state").status_code == 404

    def test_bad_phantom_400(self, client):
        resp = client.post("/sessions", json={"phantom": "/does/not/exist.ctv"})
        assert resp.status_code == 400

    def test_shoot_confirm_and_fetch_image(self, client, session):
        report = say(client, session, "take a shot")
        assert report["ok"]
        assert report["state"]["pending"]["acquire"] is True
        report = client.post(f"/sessions/{session}/confirm").json()
        assert report["image_id"] == "img-0002"
        state = client.get(f"/sessions/{session}/state").json()
        assert state["current_image_id"] == "img-0002"

        img = client.get(f"/sessions/{session}/image/current").json()
        assert img["id"] == "img-0002"
        pgm = base64.b64decode(img["pgm_base64"])
        pixels = decode_pgm(pgm)
        assert pixels.shape == (img["height"], img["width"])
        assert pixels.max() > 0

        raw = client.get(f"/sessions/{session}/image/current.pgm")
        assert raw.status_code == 200
        assert raw.content == pgm
        sidecar = client.get(f"/sessions/{session}/image/current.sidecar")
        assert "projection:" in sidecar.text

    def test_overlay_round_trip(self, client, session):
        body = client.get(f"/sessions/{session}/overlay",
                          params={"prompt": "heart"}).json()
        scores = np.frombuffer(base64.b64decode(body["scores_base64"]), dtype="<f4")
        scores = scores.reshape(body["height"], body["width"])
        assert scores.max() == 1.0
        assert body["threshold"] == 0.5

    def test_highlight_utterance(self, client, session):
        report = say(client, session, "show me the heart")
        assert report["succeeded"]
        assert report["overlay_prompt"] == "heart"

    def test_move_stages_then_cancel(self, client, session):
        report = say(client, session, "roll over 30 degrees")
        assert report["staged"] is not None
        report = client.post(f"/sessions/{session}/cancel").json()
        assert report["state"]["pending"] is None
        assert report["state"]["carm"]["roll"] == 0

    def test_twin_endpoint_needs_views(self, client, session):
        body = client.get(f"/sessions/{session}/twin", params={"prompt": "heart"}).json()
        assert body["available"] is False  # single view so far

    def test_collimate_then_twin_and_pointcloud(self, client, session):
        say(client, session, "orbit over 90 degrees")
        client.post(f"/sessions/{session}/confirm")
        say(client, session, "take a shot")
        client.post(f"/sessions/{session}/confirm")
        report = say(client, session, "focus in on the heart")
        assert report["succeeded"], report["message"]
        assert report["collimation"] is not None
        assert report["twin_summary"]["n_points"] > 0

        body = client.get(f"/sessions/{session}/twin", params={"prompt": "heart"}).json()
        assert body["available"] and body["cached"]
        assert body["summary"]["prompt"] == "heart"

        cloud = client.get(f"/sessions/{session}/pointcloud", params={"prompt": "heart"})
        assert cloud.status_code == 200
        line = cloud.text.splitlines()[0].split()
        assert len(line) == 5

    def test_transcript_accumulates(self, client, session):
        body = client.get(f"/sessions/{session}/transcript").json()
        assert len(body["turns"]) >= 4
        assert all("action" in t for t in body["turns"])
