import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from carmtwin.errors import (
    SegmentationProtocolError,
    SegmentationUnavailableError,
    SegmentationValidationError,
)
from carmtwin.geometry import CArmState, make_intrinsics, projection_from_carm
from carmtwin.metrics import dice, threshold_heatmap
from carmtwin.segmentation import (
    CorruptionConfig,
    build_segment_request,
    decode_heatmap_response,
    encode_heatmap_response,
    parse_segment_request,
    segment_external,
    segment_oracle,
)
from carmtwin.xray import project_gt_mask, render_drr


@pytest.fixture(scope="module")
def sphere_image(sphere_volume):
    intr = make_intrinsics(430, 2.0, 1200)  # 215 px detector, quick
    P = projection_from_carm(CArmState(), intr)
    return render_drr(sphere_volume, P, image_id="sphere-ap", acquired_at=1)


@pytest.fixture(scope="module")
def sphere_vocab(sphere_volume):
    from carmtwin.phantom import load_vocabulary

    return load_vocabulary("prompts:\n  ball: [ball]\n", sphere_volume)


@pytest.fixture(scope="module")
def torso_ap_image(torso, small_intrinsics):
    P = projection_from_carm(CArmState(), small_intrinsics)
    return render_drr(torso, P, image_id="torso-ap", acquired_at=1)


class TestOracle:
    def test_identity_matches_gt_exactly(self, sphere_volume, sphere_vocab, sphere_image):
        hm = segment_oracle(sphere_volume, sphere_vocab, sphere_image, "ball")
        gt = project_gt_mask(sphere_volume, {1}, sphere_image.projection)
        assert dice(threshold_heatmap(hm.scores), gt) == 1.0
        assert np.array_equal(hm.scores.astype(bool), gt)

    def test_unknown_prompt_all_zero(self, sphere_volume, sphere_vocab, sphere_image):
        hm = segment_oracle(sphere_volume, sphere_vocab, sphere_image, "flux capacitor")
        assert not hm.scores.any()

    def test_dilate_grows_by_annulus(self, sphere_volume, sphere_vocab, sphere_image):
        base = segment_oracle(sphere_volume, sphere_vocab, sphere_image, "ball")
        grown = segment_oracle(
            sphere_volume, sphere_vocab, sphere_image, "ball",
            CorruptionConfig(dilate_erode_px=3),
        )
        a0 = float(threshold_heatmap(base.scores).sum())
        a1 = float(threshold_heatmap(grown.scores).sum())
        r = np.sqrt(a0 / np.pi)
        annulus = np.pi * ((r + 3) ** 2 - r**2)
        assert abs((a1 - a0) - annulus) / annulus < 0.10

    def test_erode_shrinks(self, sphere_volume, sphere_vocab, sphere_image):
        base = segment_oracle(sphere_volume, sphere_vocab, sphere_image, "ball")
        shrunk = segment_oracle(
            sphere_volume, sphere_vocab, sphere_image, "ball",
            CorruptionConfig(dilate_erode_px=-2),
        )
        assert threshold_heatmap(shrunk.scores).sum() < threshold_heatmap(base.scores).sum()

    def test_deterministic_given_seed_image_prompt(self, torso, torso_vocab, torso_ap_image):
        cfg = CorruptionConfig(blur_sigma_px=1.5, dilate_erode_px=1, dropout_prob=0.5, seed=9)
        a = segment_oracle(torso, torso_vocab, torso_ap_image, "heart", cfg)
        b = segment_oracle(torso, torso_vocab, torso_ap_image, "heart", cfg)
        assert np.array_equal(a.scores, b.scores)

    def test_confusion_map_substitutes_structure(self, torso, torso_vocab, torso_ap_image):
        cfg = CorruptionConfig(confusion_map={"heart": "liver"})
        confused = segment_oracle(torso, torso_vocab, torso_ap_image, "heart", cfg)
        liver = segment_oracle(torso, torso_vocab, torso_ap_image, "liver")
        assert np.array_equal(confused.scores, liver.scores)
        assert confused.prompt == "heart"

    def test_dropout_substitutes_other_structure(self, torso, torso_vocab, torso_ap_image):
        cfg = CorruptionConfig(dropout_prob=1.0, seed=4)
        hm = segment_oracle(torso, torso_vocab, torso_ap_image, "heart", cfg)
        gt = segment_oracle(torso, torso_vocab, torso_ap_image, "heart")
        assert not np.array_equal(hm.scores, gt.scores)
        assert hm.scores.any()

    def test_identity_dice_one_for_every_prompt(self, torso, torso_vocab, torso_ap_image):
        for prompt in torso_vocab.prompts():
            hm = segment_oracle(torso, torso_vocab, torso_ap_image, prompt)
            gt = project_gt_mask(torso, torso_vocab.entries[prompt], torso_ap_image.projection)
            assert dice(threshold_heatmap(hm.scores), gt) == 1.0, prompt

    def test_monotone_degradation_in_blur_and_morphology(self, torso, torso_vocab, torso_ap_image):
        prompts = ["heart", "liver", "left lung", "vertebrae", "pelvis"]
        gts = {
            p: project_gt_mask(torso, torso_vocab.entries[p], torso_ap_image.projection)
            for p in prompts
        }

        def mean_dice(cfg_for_seed):
            vals = []
            for seed in range(20):
                cfg = cfg_for_seed(seed)
                for p in prompts:
                    hm = segment_oracle(torso, torso_vocab, torso_ap_image, p, cfg)
                    vals.append(dice(threshold_heatmap(hm.scores), gts[p]))
            return float(np.mean(vals))

        blur_series = [
            mean_dice(lambda s, b=b: CorruptionConfig(blur_sigma_px=b, seed=s))
            for b in (0.0, 1.0, 2.0, 4.0)
        ]
        for prev, nxt in zip(blur_series, blur_series[1:]):
            assert nxt <= prev + 0.02

        for sign in (+1, -1):
            series = [
                mean_dice(lambda s, n=n: CorruptionConfig(dilate_erode_px=sign * n, seed=s))
                for n in (0, 1, 2, 4)
            ]
            for prev, nxt in zip(series, series[1:]):
                assert nxt <= prev + 0.02


class _MockHandler(BaseHTTPRequestHandler):
    behavior = "echo_constant"
    constant = 0.7
    delay_s = 0.0

    def do_POST(self):
        import time

        n = int(self.headers.get("Content-Length", 0))
        blob = self.rfile.read(n)
        pixels, sidecar, prompt = parse_segment_request(blob)
        if self.delay_s:
            time.sleep(self.delay_s)
        h, w = pixels.shape
        if self.behavior == "wrong_dims":
            body = encode_heatmap_response(np.zeros((h + 3, w)))
        elif self.behavior == "out_of_range":
            body = encode_heatmap_response(np.full((h, w), 1.5))
        elif self.behavior == "garbage":
            body = b"not a heatmap at all"
        else:
            body = encode_heatmap_response(np.full((h, w), self.constant))
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture()
def mock_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _MockHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server, f"http://127.0.0.1:{server.server_address[1]}/segment"
    server.shutdown()


class TestExternalClient:
    def test_constant_echo_round_trip(self, sphere_image, mock_server):
        _MockHandler.behavior = "echo_constant"
        _MockHandler.delay_s = 0.0
        _, url = mock_server
        hm = segment_external(url, sphere_image, "ball", timeout_s=10)
        assert hm.model_tag == "external"
        assert hm.shape == (sphere_image.height, sphere_image.width)
        assert np.allclose(hm.scores, 0.7, atol=1e-6)

    def test_wrong_dimensions_rejected(self, sphere_image, mock_server):
        _MockHandler.behavior = "wrong_dims"
        _MockHandler.delay_s = 0.0
        _, url = mock_server
        with pytest.raises(SegmentationProtocolError):
            segment_external(url, sphere_image, "ball", timeout_s=10)

    def test_out_of_range_scores_rejected(self, sphere_image, mock_server):
        _MockHandler.behavior = "out_of_range"
        _MockHandler.delay_s = 0.0
        _, url = mock_server
        with pytest.raises(SegmentationValidationError):
            segment_external(url, sphere_image, "ball", timeout_s=10)

    def test_garbage_response_rejected(self, sphere_image, mock_server):
        _MockHandler.behavior = "garbage"
        _MockHandler.delay_s = 0.0
        _, url = mock_server
        with pytest.raises(SegmentationProtocolError):
            segment_external(url, sphere_image, "ball", timeout_s=10)

    def test_timeout_maps_to_unavailable(self, sphere_image, mock_server):
        _MockHandler.behavior = "echo_constant"
        _MockHandler.delay_s = 2.0
        _, url = mock_server
        with pytest.raises(SegmentationUnavailableError):
            segment_external(url, sphere_image, "ball", timeout_s=0.3)

    def test_unreachable_endpoint(self, sphere_image):
        with pytest.raises(SegmentationUnavailableError):
            segment_external("http://127.0.0.1:9/segment", sphere_image, "ball", timeout_s=0.3)


class TestWireCodec:
    def test_request_round_trip(self, sphere_image):
        blob = build_segment_request(sphere_image, "lower lumbar vertebrae")
        pixels, sidecar, prompt = parse_segment_request(blob)
        assert prompt == "lower lumbar vertebrae"
        assert pixels.shape == (sphere_image.height, sphere_image.width)
        assert sidecar["id"] == sphere_image.id
        assert np.max(np.abs(pixels - sphere_image.pixels)) <= 0.5 / 65535

    def test_heatmap_codec_round_trip(self):
        rng = np.random.default_rng(0)
        scores = rng.random((13, 9))
        back = decode_heatmap_response(encode_heatmap_response(scores))
        assert back.shape == (13, 9)
        assert np.max(np.abs(back - scores)) < 1e-6

    def test_truncated_payload_rejected(self):
        blob = encode_heatmap_response(np.zeros((4, 4)))[:-5]
        with pytest.raises(SegmentationProtocolError):
            decode_heatmap_response(blob)
