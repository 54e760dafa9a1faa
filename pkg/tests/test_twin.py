import numpy as np
import pytest

from eq1_oracle import candidate_grid as oracle_grid
from eq1_oracle import reconstruct_bruteforce

from carmtwin.errors import (
    EmptyReconstructionError,
    InvalidParameterError,
    NoDetectionError,
)
from carmtwin.geometry import CArmState, make_intrinsics, projection_from_carm
from carmtwin.metrics import bbox_pr
from carmtwin.phantom import gt_centroid_bbox, load_vocabulary
from carmtwin.segmentation import SegmentationHeatmap, segment_oracle
from carmtwin.twin import (
    FallbackResult,
    ImageHistory,
    TwinState,
    candidate_grid,
    dedup_views,
    export_point_cloud,
    reconstruct,
    select_views,
    single_image_fallback,
    summarize,
    update_twin,
)
from carmtwin.xray import XRayImage, render_drr


def mk_view(image_id, tick, alpha=0.0, beta=0.0, det=8, sid=50.0, sdd=100.0):
    intr = make_intrinsics(det, 1.0, sdd)
    P = projection_from_carm(
        CArmState(alpha=alpha, beta=beta, source_isocenter_dist=sid, source_detector_dist=sdd),
        intr,
    )
    return XRayImage(
        pixels=np.zeros((det, det)), projection=P, acquired_at=tick, id=image_id
    )


def history(*views):
    h = ImageHistory()
    for v in sorted(views, key=lambda im: im.acquired_at):
        h = h.append(v)
    return h


class TestSelectViews:
    def test_single_image_history(self):
        cur = mk_view("a", 1)
        sel = select_views(history(cur), "a")
        assert sel.n == 1
        assert sel.primary == "a"

    def test_near_duplicate_dropped_for_most_recent(self):
        cur = mk_view("ap-new", 10, alpha=0)
        old_ap = mk_view("ap-old", 3, alpha=5)
        lat = mk_view("lat", 7, alpha=90)
        sel = select_views(history(cur, old_ap, lat), "ap-new")
        assert sel.primary == "ap-new"
        assert sel.secondary == ("lat",)

    def test_cap_at_n_max(self):
        views = [mk_view(f"v{i}", i + 1, alpha=i * 34.0, beta=(i % 2) * 40.0) for i in range(8)]
        # make sure they are mutually >= 30 apart before asserting the cap
        from carmtwin.geometry import viewing_angle

        ok = [views[0]]
        for v in views[1:]:
            if all(viewing_angle(v.projection.pose, o.projection.pose) >= 30 for o in ok):
                ok.append(v)
        if len(ok) > 5:
            sel = select_views(history(*ok), ok[-1].id)
            assert sel.n == 5

    def test_six_orthogonalish_views_capped(self):
        angles = [(0, 0), (90, 0), (0, 60), (180 - 45, -60), (45, 60), (135, 0)]
        views = [mk_view(f"v{i}", i + 1, alpha=a, beta=b) for i, (a, b) in enumerate(angles)]
        sel = select_views(history(*views), "v5", min_angle=30, n_max=5)
        assert sel.n <= 5

    def test_current_survives_dedup_even_if_older(self):
        cur = mk_view("cur", 5, alpha=0)
        newer_dup = mk_view("dup", 9, alpha=4)
        lat = mk_view("lat", 7, alpha=90)
        sel = select_views(history(cur, newer_dup, lat), "cur")
        assert sel.primary == "cur"
        assert "dup" not in sel.ids

    def test_selected_pairs_respect_min_angle(self):
        rng = np.random.default_rng(11)
        from carmtwin.geometry import viewing_angle

        for _ in range(50):
            n = int(rng.integers(1, 10))
            views = [
                mk_view(f"v{i}", i + 1, alpha=float(rng.uniform(-180, 180)),
                        beta=float(rng.uniform(-80, 80)))
                for i in range(n)
            ]
            cur = views[int(rng.integers(n))]
            sel = select_views(history(*views), cur.id)
            assert 1 <= sel.n <= 5
            poses = [im.projection.pose for im in sel.images]
            for i in range(len(poses)):
                for j in range(i + 1, len(poses)):
                    assert viewing_angle(poses[i], poses[j]) >= 30 - 1e-9

    def test_dedup_guarantees(self):
        rng = np.random.default_rng(23)
        from carmtwin.geometry import viewing_angle

        for _ in range(50):
            n = int(rng.integers(2, 12))
            views = [
                mk_view(f"v{i}", i + 1, alpha=float(rng.uniform(-30, 30)),
                        beta=float(rng.uniform(-20, 20)))
                for i in range(n)
            ]
            cur = views[-1]
            survivors = dedup_views(views, cur.id)
            ids = {im.id for im in survivors}
            assert cur.id in ids
            for i, a in enumerate(survivors):
                for b in survivors[i + 1:]:
                    assert viewing_angle(a.projection.pose, b.projection.pose) >= 10 - 1e-9
            for img in views:
                if img.id in ids:
                    continue
                blockers = [
                    s for s in survivors
                    if viewing_angle(s.projection.pose, img.projection.pose) < 10
                ]
                assert any(s.id == cur.id or s.acquired_at > img.acquired_at for s in blockers)


def random_scene(rng, n_views, det=64, grid_half_cells=8, spacing=4.0):
    intr = make_intrinsics(det, 1.0, 200)
    images, heatmaps = [], []
    for i in range(n_views):
        state = CArmState(
            alpha=float(rng.uniform(-180, 180)),
            beta=float(rng.uniform(-80, 80)),
            roll=float(rng.uniform(-180, 180)),
            isocenter=rng.uniform(-10, 10, 3),
            source_isocenter_dist=100.0,
            source_detector_dist=200.0,
        )
        P = projection_from_carm(state, intr)
        img = XRayImage(np.zeros((det, det)), P, acquired_at=i + 1, id=f"v{i}")
        images.append(img)
        heatmaps.append(
            SegmentationHeatmap(rng.random((det, det)), prompt="blob", image_id=img.id)
        )
    from carmtwin.twin import ViewSelection

    sel = ViewSelection(primary="v0", secondary=tuple(f"v{i}" for i in range(1, n_views)),
                        images=tuple(images))
    iso = rng.uniform(-5, 5, 3)
    pts = np.array(oracle_grid(iso, grid_half_cells, spacing))
    return sel, heatmaps, pts, spacing


class TestReconstructBruteForceEquivalence:
    @pytest.mark.parametrize("literal_mean", [False, True])
    def test_matches_oracle_exactly(self, literal_mean):
        rng = np.random.default_rng(17 if literal_mean else 5)
        for _ in range(25):
            n_views = int(rng.integers(2, 6))
            sel, heatmaps, pts, spacing = random_scene(rng, n_views)
            matrices = [img.projection.matrix for img in sel.images]
            grids = [hm.scores for hm in heatmaps]
            kept, supports, means = reconstruct_bruteforce(
                pts, matrices, grids, sel.images[0].width, sel.images[0].height,
                mean_over_membership_only=literal_mean,
            )
            try:
                result = reconstruct(
                    sel, heatmaps, grid_spacing_mm=spacing,
                    candidate_points=pts, mean_over_membership_only=literal_mean,
                )
            except EmptyReconstructionError:
                assert kept == []
                continue
            assert result.points.shape[0] == len(kept)
            assert np.array_equal(result.points, pts[kept])
            assert np.array_equal(result.support, np.array(supports))
            assert np.array_equal(result.mean_score, np.array(means))


@pytest.fixture(scope="module")
def sphere_scene(sphere_volume):
    intr = make_intrinsics(430, 1.0, 1200)
    vol_voc = load_vocabulary("prompts:\n  ball: [ball]\n", sphere_volume)
    images, heatmaps = [], []
    for i, alpha in enumerate((0.0, 90.0)):
        P = projection_from_carm(CArmState(alpha=alpha), intr)
        img = render_drr(sphere_volume, P, image_id=f"s{i}", acquired_at=i + 1)
        images.append(img)
        heatmaps.append(segment_oracle(sphere_volume, vol_voc, img, "ball"))
    from carmtwin.twin import ViewSelection

    sel = ViewSelection("s0", ("s1",), tuple(images))
    return sel, heatmaps, sphere_volume


class TestReconstructGeometry:

    def test_sphere_centroid_and_recall(self, sphere_scene):
        sel, heatmaps, vol = sphere_scene
        result = reconstruct(sel, heatmaps, grid_spacing_mm=3.0, grid_radius_mm=48.0)
        gt_centroid, gt_box = gt_centroid_bbox(vol, {1})
        assert np.linalg.norm(result.centroid - gt_centroid) <= 6.0
        _, recall = bbox_pr(result.bbox, gt_box)
        assert recall >= 0.9

    def test_all_zero_heatmap_gives_empty_error_with_diagnostics(self, sphere_scene):
        sel, heatmaps, _ = sphere_scene
        det = sel.images[1].height
        dead = SegmentationHeatmap(
            np.zeros((det, det)), prompt="ball", image_id=sel.images[1].id
        )
        with pytest.raises(EmptyReconstructionError) as exc:
            reconstruct(sel, [heatmaps[0], dead], grid_spacing_mm=3.0, grid_radius_mm=48.0)
        assert exc.value.per_view_mask_areas[sel.images[1].id] == 0
        assert exc.value.per_view_mask_areas[sel.images[0].id] > 0

    def test_all_ones_heatmaps_fill_visible_grid(self, sphere_scene):
        sel, heatmaps, _ = sphere_scene
        det = sel.images[0].height
        ones = [
            SegmentationHeatmap(np.ones((det, det)), prompt="ball", image_id=img.id)
            for img in sel.images
        ]
        result = reconstruct(sel, ones, grid_spacing_mm=6.0, grid_radius_mm=30.0)
        # every grid point projecting into both finite frusta is kept
        pts = candidate_grid((0, 0, 0), 30.0, 6.0)
        assert result.points.shape[0] == pts.shape[0]

    def test_third_view_never_grows_bbox(self, sphere_volume):
        intr = make_intrinsics(430, 1.0, 1200)
        vol_voc = load_vocabulary("prompts:\n  ball: [ball]\n", sphere_volume)
        imgs, hms = [], []
        for i, (alpha, beta) in enumerate(((0.0, 0.0), (90.0, 0.0), (0.0, 90.0))):
            P = projection_from_carm(CArmState(alpha=alpha, beta=beta), intr)
            img = render_drr(sphere_volume, P, image_id=f"m{i}", acquired_at=i + 1)
            imgs.append(img)
            hms.append(segment_oracle(sphere_volume, vol_voc, img, "ball"))
        from carmtwin.twin import ViewSelection

        two = reconstruct(ViewSelection("m0", ("m1",), tuple(imgs[:2])), hms[:2],
                          grid_spacing_mm=3.0, grid_radius_mm=48.0)
        three = reconstruct(ViewSelection("m0", ("m1", "m2"), tuple(imgs)), hms,
                            grid_spacing_mm=3.0, grid_radius_mm=48.0)
        pad = 3.0
        assert np.all(three.bbox.lo >= two.bbox.lo - pad)
        assert np.all(three.bbox.hi <= two.bbox.hi + pad)

    def test_needs_two_views(self, sphere_scene):
        sel, heatmaps, _ = sphere_scene
        from carmtwin.twin import ViewSelection

        single = ViewSelection("s0", (), (sel.images[0],))
        with pytest.raises(InvalidParameterError):
            reconstruct(single, heatmaps[:1])

    def test_export_and_summary(self, sphere_scene):
        sel, heatmaps, _ = sphere_scene
        result = reconstruct(sel, heatmaps, grid_spacing_mm=6.0, grid_radius_mm=42.0)
        text = export_point_cloud(result)
        rows = [ln.split() for ln in text.strip().splitlines()]
        assert len(rows) == result.n_points
        first = rows[0]
        assert float(first[0]) == result.points[0, 0]
        assert int(first[3]) == result.support[0]
        summary = summarize(result)
        assert summary["prompt"] == "ball"
        assert summary["views_used"] == ["s0", "s1"]


class TestSingleImageFallback:
    def make_image(self, det_mm=430, pitch=0.3):
        intr = make_intrinsics(det_mm, pitch, 1200)
        P = projection_from_carm(CArmState(), intr)
        n = int(intr.detector_size_px[0])
        return XRayImage(np.zeros((n, n)), P, acquired_at=1, id="f0"), intr

    def test_centered_mask_zero_translation(self):
        img, intr = self.make_image()
        n = img.height
        scores = np.zeros((n, n))
        c = n // 2
        scores[c - 8 : c + 8, c - 8 : c + 8] = 1.0  # symmetric about 716.5? n odd: 1433
        hm = SegmentationHeatmap(scores, prompt="x", image_id="f0")
        res = single_image_fallback(img, hm, sid_mm=750)
        # detector is odd-sized (1433), principal point at 716.5 = c + 0.5
        assert np.allclose(res.centroid_px, intr.principal_point, atol=0.51)
        assert np.linalg.norm(res.translation_mm) < 0.51 * 0.3 * (750 / 1200) * 2

    def test_offset_mask_similar_triangles(self):
        img, intr = self.make_image()
        n = img.height
        scores = np.zeros((n, n))
        cu, cv = intr.principal_point
        # block of width 21 centered 100 px right of the principal point
        r0 = int(cv - 10)
        c0 = int(cu + 100 - 10)
        scores[r0 : r0 + 21, c0 : c0 + 21] = 1.0
        hm = SegmentationHeatmap(scores, prompt="x", image_id="f0")
        res = single_image_fallback(img, hm, sid_mm=750)
        assert res.translation_mm[0] == pytest.approx(100 * 0.3 * 750 / 1200, abs=0.2)
        assert abs(res.translation_mm[1]) < 0.2
        assert abs(res.translation_mm[2]) < 1e-9

    def test_empty_heatmap_raises(self):
        img, _ = self.make_image(det_mm=64, pitch=1.0)
        hm = SegmentationHeatmap(np.zeros((64, 64)), prompt="x", image_id="f0")
        with pytest.raises(NoDetectionError):
            single_image_fallback(img, hm)


class TestTwinState:
    def test_append_grows_history(self):
        s = TwinState()
        s = update_twin(s, mk_view("a", 1))
        assert len(s.history) == 1

    def test_duplicate_id_rejected(self):
        s = update_twin(TwinState(), mk_view("a", 1))
        with pytest.raises(InvalidParameterError):
            update_twin(s, mk_view("a", 2))

    def test_new_view_invalidates_stale_cache(self, sphere_volume):
        intr = make_intrinsics(430, 1.0, 1200)
        vol_voc = load_vocabulary("prompts:\n  ball: [ball]\n", sphere_volume)
        s = TwinState()
        imgs = []
        for i, alpha in enumerate((0.0, 90.0)):
            P = projection_from_carm(CArmState(alpha=alpha), intr)
            img = render_drr(sphere_volume, P, image_id=f"c{i}", acquired_at=i + 1)
            imgs.append(img)
            s = update_twin(s, img)
        sel = s.select()
        hms = [segment_oracle(sphere_volume, vol_voc, im, "ball") for im in sel.images]
        res = reconstruct(sel, hms, grid_spacing_mm=6.0, grid_radius_mm=42.0)
        s = s.remember("ball", res)
        assert s.cached("ball") is not None
        # near-duplicate of the lateral replaces it in any fresh selection
        P = projection_from_carm(CArmState(alpha=86.0), intr)
        dup = render_drr(sphere_volume, P, image_id="c2", acquired_at=3)
        s = update_twin(s, dup)
        assert s.cached("ball") is None

    def test_orthogonal_view_extends_selection(self):
        s = update_twin(TwinState(), mk_view("a", 1, alpha=0))
        assert s.select().n == 1
        s = update_twin(s, mk_view("b", 2, alpha=90))
        assert s.select().n == 2
