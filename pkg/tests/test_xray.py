import numpy as np
import pytest

from carmtwin.errors import DegenerateCollimationError, EmptyStructureError
from carmtwin.geometry import Box3, CArmState, make_intrinsics, project, projection_from_carm
from carmtwin.phantom import build_synthetic_phantom, load_phantom_spec, resolve_prompt
from carmtwin.xray import (
    CollimationBox,
    DetectorRect,
    load_image_pair,
    project_collimation,
    project_gt_mask,
    render_drr,
    save_image_pair,
)


def build(yaml_text):
    return build_synthetic_phantom(load_phantom_spec(yaml_text))


AIR = """
name: air
dims: [40, 40, 40]
spacing_mm: [3, 3, 3]
origin_mm: [-60, -60, -60]
structures: []
"""

HALF_SLAB = """
name: slab
dims: [40, 40, 40]
spacing_mm: [3, 3, 3]
origin_mm: [-60, -60, -60]
structures:
  - {label: slab, attenuation: 0.5, kind: box, center: [30, 0, 0], size: [60, 120, 120]}
"""


@pytest.fixture(scope="module")
def small_P():
    intr = make_intrinsics(100, 1.0, 200)
    return projection_from_carm(CArmState(source_isocenter_dist=100, source_detector_dist=200), intr)


class TestRenderDrr:
    def test_all_air_is_all_zero(self, small_P):
        img = render_drr(build(AIR), small_P)
        assert not img.pixels.any()

    def test_half_slab_step_edge(self, small_P):
        img = render_drr(build(HALF_SLAB), small_P)
        cu = small_P.intrinsics.principal_point[0]
        # rays with u > cu head into +x and traverse the slab
        mid_row = img.pixels[img.height // 2]
        lit = np.nonzero(mid_row > 0.5)[0]
        assert lit.size > 0
        assert abs(lit.min() - cu) <= 1.0
        assert not mid_row[: int(cu) - 1].any()

    def test_deterministic(self, small_P):
        v = build(HALF_SLAB)
        a = render_drr(v, small_P)
        b = render_drr(v, small_P)
        assert np.array_equal(a.pixels, b.pixels)

    def test_monotone_in_material(self, small_P):
        base = build(HALF_SLAB)
        more = build(
            HALF_SLAB
            + "  - {label: extra, attenuation: 0.3, kind: box, center: [-30, 0, 0], size: [40, 40, 40]}\n"
        )
        a = render_drr(base, small_P).pixels
        b = render_drr(more, small_P).pixels
        assert np.all(b >= a - 1e-12)

    def test_collimated_pixels_zero_outside(self, small_P):
        v = build(HALF_SLAB)
        box = CollimationBox(Box3([-20, -20, -20], [20, 20, 20]), source_prompt="slab")
        img = render_drr(v, small_P, collimation=box)
        assert img.collimation_px is not None
        outside = ~img.collimation_px.pixel_mask(img.width, img.height)
        assert not img.pixels[outside].any()
        plain = render_drr(v, small_P)
        inside = img.collimation_px.pixel_mask(img.width, img.height)
        assert np.array_equal(img.pixels[inside], plain.pixels[inside])

    def test_degenerate_collimation_renders_uncollimated(self, small_P, caplog):
        v = build(HALF_SLAB)
        # box entirely behind the source (source sits at z=+100)
        box = CollimationBox(Box3([-10, -10, 500], [10, 10, 600]), source_prompt="x")
        with caplog.at_level("WARNING"):
            img = render_drr(v, small_P, collimation=box)
        assert img.collimation_px is None
        assert any("uncollimated" in r.message for r in caplog.records)


class TestProjectGtMask:
    def test_centered_sphere_projects_to_disk(self, sphere_volume):
        intr = make_intrinsics(430, 1.0, 1200)
        P = projection_from_carm(CArmState(), intr)
        mask = project_gt_mask(sphere_volume, {1}, P)
        area = float(mask.sum())
        radius = np.sqrt(area / np.pi)
        expected = 30 * intr.focal_px / 750.0
        assert abs(radius - expected) <= 2.0

    def test_union_distributes_over_or(self, torso, torso_vocab, ap_projection):
        a = resolve_prompt(torso_vocab, "l3 vertebra bone")
        b = resolve_prompt(torso_vocab, "l4 vertebra bone")
        union = project_gt_mask(torso, a | b, ap_projection)
        ored = project_gt_mask(torso, a, ap_projection) | project_gt_mask(torso, b, ap_projection)
        assert np.array_equal(union, ored)

    def test_empty_labels_error(self, sphere_volume, small_P):
        intr = make_intrinsics(100, 1.0, 200)
        P = projection_from_carm(CArmState(source_isocenter_dist=100, source_detector_dist=200), intr)
        v = build(
            AIR.replace("structures: []",
                        "structures:\n  - {label: gone, attenuation: 0.1, kind: box, center: [500, 0, 0], size: [4, 4, 4]}")
        )
        with pytest.raises(EmptyStructureError):
            project_gt_mask(v, {v.name_to_id["gone"]}, P)

    def test_mask_ignores_collimation(self, sphere_volume):
        intr = make_intrinsics(430, 1.0, 1200)
        P = projection_from_carm(CArmState(), intr)
        before = project_gt_mask(sphere_volume, {1}, P)
        render_drr(
            sphere_volume, P,
            collimation=CollimationBox(Box3([-5, -5, -5], [5, 5, 5]), source_prompt="ball"),
        )
        after = project_gt_mask(sphere_volume, {1}, P)
        assert np.array_equal(before, after)


class TestProjectCollimation:
    def test_cube_width_matches_corner_projection(self):
        intr = make_intrinsics(430, 0.3, 1200)
        P = projection_from_carm(CArmState(), intr)
        box = CollimationBox(Box3([-30, -30, -30], [30, 30, 30]), source_prompt="cube")
        rect = project_collimation(box, P)
        # near face sits 30 mm toward the source: width = 60 * f / (SID - 30)
        expected = 60.0 * intr.focal_px / (750.0 - 30.0)
        assert rect.u1 - rect.u0 == pytest.approx(expected, abs=4)
        assert rect.v1 - rect.v0 == pytest.approx(expected, abs=4)

    def test_huge_box_clips_to_full_detector(self):
        intr = make_intrinsics(100, 1.0, 200)
        P = projection_from_carm(CArmState(source_isocenter_dist=100, source_detector_dist=200), intr)
        box = CollimationBox(Box3([-500, -500, -500], [500, 500, 500]), source_prompt="all")
        rect = project_collimation(box, P)
        assert rect.as_tuple() == (0.0, 0.0, 100.0, 100.0)

    def test_box_off_frustum_is_degenerate(self):
        intr = make_intrinsics(100, 1.0, 200)
        P = projection_from_carm(CArmState(source_isocenter_dist=100, source_detector_dist=200), intr)
        box = CollimationBox(Box3([2000, -10, -10], [2020, 10, 10]), source_prompt="left")
        with pytest.raises(DegenerateCollimationError):
            project_collimation(box, P)

    def test_all_corners_behind_source_degenerate(self):
        intr = make_intrinsics(100, 1.0, 200)
        P = projection_from_carm(CArmState(source_isocenter_dist=100, source_detector_dist=200), intr)
        box = CollimationBox(Box3([-10, -10, 150], [10, 10, 170]), source_prompt="behind")
        with pytest.raises(DegenerateCollimationError):
            project_collimation(box, P)

    def test_every_projected_interior_point_inside_rect(self):
        rng = np.random.default_rng(3)
        intr = make_intrinsics(200, 1.0, 1000)
        for _ in range(20):
            state = CArmState(
                alpha=rng.uniform(-180, 180), beta=rng.uniform(-60, 60),
                roll=rng.uniform(-180, 180),
            )
            P = projection_from_carm(state, intr)
            lo = rng.uniform(-80, 0, 3)
            hi = lo + rng.uniform(5, 80, 3)
            box = CollimationBox(Box3(lo, hi), source_prompt="rand")
            corners = box.bounds.corners()
            # unclipped rectangle: recompute bounds without detector clip
            from carmtwin.geometry import project_many

            u, v, w = project_many(P, corners)
            if not np.all(w > 1e-12):
                continue
            u0, u1, v0, v1 = u.min(), u.max(), v.min(), v.max()
            pts = rng.uniform(lo, hi, size=(200, 3))
            for p in pts:
                uv = project(P, p)
                assert u0 - 1e-9 <= uv[0] <= u1 + 1e-9
                assert v0 - 1e-9 <= uv[1] <= v1 + 1e-9


class TestInterchange:
    def test_round_trip(self, sphere_volume, tmp_path):
        intr = make_intrinsics(64, 2.0, 1200)
        P = projection_from_carm(CArmState(alpha=30, beta=5, roll=-10), intr)
        rect = DetectorRect(4.0, 6.0, 60.0, 58.0)
        pixels = np.zeros((32, 32))
        pixels[10:20, 10:20] = 0.73
        img_in = render_drr(sphere_volume, P, image_id="img-0007", acquired_at=42)
        pgm, sidecar = save_image_pair(img_in, tmp_path / "shot.pgm")
        back = load_image_pair(pgm, sidecar)
        assert back.id == "img-0007"
        assert back.acquired_at == 42
        assert np.array_equal(back.projection.matrix, img_in.projection.matrix)
        assert np.max(np.abs(back.pixels - img_in.pixels)) <= 0.5 / 65535
        assert back.collimation_px is None

    def test_round_trip_with_collimation(self, sphere_volume, tmp_path):
        intr = make_intrinsics(430, 2.0, 1200)
        P = projection_from_carm(CArmState(), intr)
        box = CollimationBox(Box3([-20, -20, -20], [20, 20, 20]), source_prompt="ball")
        img = render_drr(sphere_volume, P, collimation=box, image_id="img-0008", acquired_at=7)
        pgm, sidecar = save_image_pair(img, tmp_path / "c.pgm")
        back = load_image_pair(pgm, sidecar)
        assert back.collimation_px == img.collimation_px
