"""Experiment driver: single-image segmentation metrics, the random-subset
reconstruction study, and corruption sweeps, with deterministic CSV output.

The 3D ground truth for a reconstruction sample is restricted to the
structure's overlap with the primary view: only ground-truth voxels whose
centers project inside the primary image bounds count toward the reference
centroid and box.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, EmptyReconstructionError
from .geometry import Box3, CArmState, IntrinsicMatrix, project_many, viewing_angle
from .metrics import MetricRow, centroid_error_2d, dice, mean_sd, threshold_heatmap
from .phantom import LabeledVolume, PromptVocabulary, resolve_prompt, structure_mask
from .segmentation import CorruptionConfig, OracleSegmenter
from .twin import ViewSelection, reconstruct
from .xray import XRayImage, project_gt_mask, render_drr
from .geometry import projection_from_carm

_W_EPS = 1e-12


def load_views_file(path) -> list[CArmState]:
    """One view per line: "alpha beta [roll [x y z]]"; # comments allowed."""
    views = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = [float(x) for x in line.split()]
            alpha, beta = vals[0], vals[1]
            roll = vals[2] if len(vals) > 2 else 0.0
            iso = np.array(vals[3:6]) if len(vals) >= 6 else np.zeros(3)
            views.append(CArmState(alpha=alpha, beta=beta, roll=roll, isocenter=iso))
    return views


def generate_random_views(
    n: int, seed: int = 0, beta_range: float = 45.0, roll_range: float = 30.0
) -> list[CArmState]:
    rng = np.random.default_rng(seed)
    return [
        CArmState(
            alpha=float(rng.uniform(-180, 180)),
            beta=float(rng.uniform(-beta_range, beta_range)),
            roll=float(rng.uniform(-roll_range, roll_range)),
        )
        for _ in range(n)
    ]


def render_study_views(
    v: LabeledVolume, views: list[CArmState], intrinsics: IntrinsicMatrix
) -> list[XRayImage]:
    return [
        render_drr(v, projection_from_carm(state, intrinsics, timestamp=i + 1),
                   image_id=f"view-{i:03d}", acquired_at=i + 1)
        for i, state in enumerate(views)
    ]


def frustum_restricted_gt(v: LabeledVolume, labels, img: XRayImage):
    """(centroid, Box3) over GT voxels visible in the image, or None."""
    mask = structure_mask(v, labels)
    idx = np.argwhere(mask)
    if idx.size == 0:
        return None
    pts = v.origin_mm + (idx + 0.5) * v.spacing_mm
    u, vv, w = project_many(img.projection, pts)
    inside = (w > _W_EPS) & (u >= 0) & (u < img.width) & (vv >= 0) & (vv < img.height)
    if not np.any(inside):
        return None
    vis = pts[inside]
    half = v.spacing_mm / 2.0
    return vis.mean(axis=0), Box3(vis.min(axis=0) - half, vis.max(axis=0) + half)


@dataclass
class SingleImageSample:
    prompt: str
    image_id: str
    dice: float
    centroid2d_mm: float | None

    def row(self):
        return [self.prompt, self.image_id, repr(self.dice),
                "" if self.centroid2d_mm is None else repr(self.centroid2d_mm)]


@dataclass
class SubsetSample:
    prompt: str
    primary_id: str
    subset_ids: tuple[str, ...]
    n: int
    dice_primary: float
    n_points: int | None = None
    centroid3d_mm: float | None = None
    bbox_precision: float | None = None
    bbox_recall: float | None = None
    undefined_reason: str | None = None

    @property
    def defined(self) -> bool:
        return self.undefined_reason is None

    def row(self):
        fmt = lambda x: "" if x is None else repr(x)
        return [
            self.prompt, self.primary_id, "+".join(self.subset_ids), str(self.n),
            repr(self.dice_primary), fmt(self.n_points), fmt(self.centroid3d_mm),
            fmt(self.bbox_precision), fmt(self.bbox_recall),
            self.undefined_reason or "",
        ]


def run_single_image_study(
    v: LabeledVolume,
    voc: PromptVocabulary,
    images: list[XRayImage],
    prompts: list[str],
    cfg: CorruptionConfig = CorruptionConfig(),
) -> tuple[list[MetricRow], list[SingleImageSample]]:
    """Per-prompt DICE and 2D centroid error of the oracle across views."""
    segmenter = OracleSegmenter(v, voc, cfg)
    samples = []
    for prompt in prompts:
        ids = resolve_prompt(voc, prompt)
        if not ids:
            continue
        for img in images:
            gt = project_gt_mask(v, ids, img.projection)
            hm = segmenter.segment(img, prompt)
            d = dice(threshold_heatmap(hm.scores), gt)
            err = centroid_error_2d(hm.scores, gt,
                                    img.projection.intrinsics.pixel_pitch_mm)
            samples.append(SingleImageSample(prompt, img.id, d, err))
    rows = []
    for prompt in sorted({s.prompt for s in samples}):
        mine = [s for s in samples if s.prompt == prompt]
        defined = [s for s in mine if s.centroid2d_mm is not None]
        rows.append(MetricRow(
            prompt=prompt,
            n_samples=len(mine),
            n_undefined=len(mine) - len(defined),
            dice=mean_sd([s.dice for s in mine]),
            centroid2d_mm=mean_sd([s.centroid2d_mm for s in defined]) if defined else None,
        ))
    return rows, samples


def _qualifying(images, subset_idx, min_angle) -> bool:
    poses = [images[i].projection.pose for i in subset_idx]
    return all(
        viewing_angle(poses[i], poses[j]) >= min_angle
        for i in range(len(poses))
        for j in range(i + 1, len(poses))
    )


def run_subset_study(
    v: LabeledVolume,
    voc: PromptVocabulary,
    images: list[XRayImage],
    prompts: list[str],
    cfg: CorruptionConfig = CorruptionConfig(),
    n_range: tuple[int, int] = (2, 5),
    dice_floor: float = 0.3,
    seed: int = 0,
    draws_per_primary: int = 8,
    min_angle: float = 30.0,
    grid_spacing_mm: float = 3.0,
    grid_radius_mm: float = 256.0,
    mean_over_membership_only: bool = False,
) -> tuple[list[MetricRow], list[SubsetSample], int]:
    """Random-subset reconstruction study.

    Every view serves as the primary; subsets of n_range[0]..n_range[1]
    views (pairwise >= min_angle) are drawn without replacement and
    deduplicated. Prompts are evaluated only where the primary single-view
    DICE exceeds dice_floor. Returns (per-prompt rows, per-sample records,
    number of unique subsets realized).
    """
    if len(images) < 2:
        raise ConfigurationError("subset study needs at least two views")
    if not any(
        viewing_angle(a.projection.pose, b.projection.pose) >= min_angle
        for i, a in enumerate(images)
        for b in images[i + 1:]
    ):
        raise ConfigurationError(f"no view pair separated by >= {min_angle} deg")

    rng = np.random.default_rng(seed)
    segmenter = OracleSegmenter(v, voc, cfg)

    subsets: list[tuple[int, tuple[int, ...]]] = []
    seen: set[tuple[int, frozenset[int]]] = set()
    for p_idx in range(len(images)):
        others = [i for i in range(len(images)) if i != p_idx]
        for n in range(n_range[0], n_range[1] + 1):
            if n - 1 > len(others):
                continue
            for _ in range(draws_per_primary):
                pick = rng.choice(len(others), size=n - 1, replace=False)
                subset = (p_idx,) + tuple(sorted((others[i] for i in pick),
                                                 key=lambda i: -images[i].acquired_at))
                key = (p_idx, frozenset(subset))
                if key in seen or not _qualifying(images, subset, min_angle):
                    continue
                seen.add(key)
                subsets.append((p_idx, subset))

    prompt_ids = {p: resolve_prompt(voc, p) for p in prompts}
    prompt_ids = {p: ids for p, ids in prompt_ids.items() if ids}
    gt_masks: dict[tuple[str, str], np.ndarray] = {}
    restricted: dict[tuple[str, str], object] = {}

    def primary_gt_mask(prompt, img):
        key = (prompt, img.id)
        if key not in gt_masks:
            gt_masks[key] = project_gt_mask(v, prompt_ids[prompt], img.projection)
        return gt_masks[key]

    def restricted_gt(prompt, img):
        key = (prompt, img.id)
        if key not in restricted:
            restricted[key] = frustum_restricted_gt(v, prompt_ids[prompt], img)
        return restricted[key]

    samples: list[SubsetSample] = []
    for prompt in sorted(prompt_ids):
        for p_idx, subset in subsets:
            primary = images[p_idx]
            hm0 = segmenter.segment(primary, prompt)
            d0 = dice(threshold_heatmap(hm0.scores), primary_gt_mask(prompt, primary))
            if not d0 > dice_floor:
                continue
            sel_images = tuple(images[i] for i in subset)
            sel = ViewSelection(primary=primary.id,
                                secondary=tuple(im.id for im in sel_images[1:]),
                                images=sel_images)
            heatmaps = [segmenter.segment(im, prompt) for im in sel_images]
            sample = SubsetSample(prompt=prompt, primary_id=primary.id,
                                  subset_ids=sel.ids, n=len(subset), dice_primary=d0)
            gt = restricted_gt(prompt, primary)
            if gt is None:
                sample.undefined_reason = "structure invisible in primary view"
                samples.append(sample)
                continue
            gt_centroid, gt_box = gt
            try:
                result = reconstruct(
                    sel, heatmaps,
                    grid_spacing_mm=grid_spacing_mm,
                    grid_radius_mm=grid_radius_mm,
                    isocenter=(0.0, 0.0, 0.0),
                    mean_over_membership_only=mean_over_membership_only,
                )
            except EmptyReconstructionError:
                sample.undefined_reason = "empty reconstruction"
                samples.append(sample)
                continue
            sample.n_points = result.n_points
            sample.centroid3d_mm = float(np.linalg.norm(result.centroid - gt_centroid))
            from .metrics import bbox_pr

            precision, recall = bbox_pr(result.bbox, gt_box)
            sample.bbox_precision = precision
            sample.bbox_recall = recall
            samples.append(sample)

    rows = []
    for prompt in sorted({s.prompt for s in samples}):
        mine = [s for s in samples if s.prompt == prompt]
        defined = [s for s in mine if s.defined]
        if defined:
            rows.append(MetricRow(
                prompt=prompt,
                n_samples=len(mine),
                n_undefined=len(mine) - len(defined),
                dice=mean_sd([s.dice_primary for s in mine]),
                centroid3d_mm=mean_sd([s.centroid3d_mm for s in defined]),
                bbox_precision=mean_sd([s.bbox_precision for s in defined
                                        if s.bbox_precision is not None]),
                bbox_recall=mean_sd([s.bbox_recall for s in defined]),
            ))
        else:
            rows.append(MetricRow(prompt=prompt, n_samples=len(mine),
                                  n_undefined=len(mine)))
    return rows, samples, len(subsets)


@dataclass
class SweepPoint:
    blur_sigma_px: float
    mean_dice: float
    mean_centroid3d_mm: float
    n_defined: int


def run_blur_sweep(
    v: LabeledVolume,
    voc: PromptVocabulary,
    images: list[XRayImage],
    prompts: list[str],
    blur_levels=(0.0, 1.0, 2.0, 4.0),
    seeds=range(20),
    base_cfg: CorruptionConfig = CorruptionConfig(),
    grid_spacing_mm: float = 3.0,
    grid_radius_mm: float = 160.0,
) -> list[SweepPoint]:
    """Corruption sweep over blur: single-view DICE plus two-view 3D
    centroid error, averaged over prompts and seeds per level."""
    if len(images) < 2:
        raise ConfigurationError("blur sweep needs at least two views")
    primary, secondary = images[0], images[1]
    prompt_ids = {p: resolve_prompt(voc, p) for p in prompts}
    gt2d = {p: project_gt_mask(v, ids, primary.projection)
            for p, ids in prompt_ids.items()}
    gt3d = {p: frustum_restricted_gt(v, ids, primary)
            for p, ids in prompt_ids.items()}

    shared_cache: dict = {}
    out = []
    for sigma in blur_levels:
        dices, errs = [], []
        for seed in seeds:
            cfg = CorruptionConfig(
                blur_sigma_px=float(sigma),
                dilate_erode_px=base_cfg.dilate_erode_px,
                dropout_prob=base_cfg.dropout_prob,
                confusion_map=base_cfg.confusion_map,
                seed=int(seed),
            )
            segmenter = OracleSegmenter(v, voc, cfg, mask_cache=shared_cache)
            for prompt in prompts:
                hm0 = segmenter.segment(primary, prompt)
                dices.append(dice(threshold_heatmap(hm0.scores), gt2d[prompt]))
                if gt3d[prompt] is None:
                    continue
                sel = ViewSelection(primary.id, (secondary.id,), (primary, secondary))
                try:
                    result = reconstruct(
                        sel, [hm0, segmenter.segment(secondary, prompt)],
                        grid_spacing_mm=grid_spacing_mm,
                        grid_radius_mm=grid_radius_mm,
                    )
                except EmptyReconstructionError:
                    continue
                errs.append(float(np.linalg.norm(result.centroid - gt3d[prompt][0])))
        out.append(SweepPoint(
            blur_sigma_px=float(sigma),
            mean_dice=float(np.mean(dices)),
            mean_centroid3d_mm=float(np.mean(errs)) if errs else float("nan"),
            n_defined=len(errs),
        ))
    return out


# ---------------------------------------------------------------------------
# deterministic file output
# ---------------------------------------------------------------------------

SINGLE_HEADER = ["prompt", "image_id", "dice", "centroid2d_mm"]
SUBSET_HEADER = ["prompt", "primary", "subset", "n", "dice_primary", "n_points",
                 "centroid3d_mm", "bbox_precision", "bbox_recall", "undefined_reason"]
SUMMARY_HEADER = ["prompt", "n_samples", "n_undefined",
                  "dice_mean", "dice_sd", "centroid2d_mean", "centroid2d_sd",
                  "centroid3d_mean", "centroid3d_sd",
                  "precision_mean", "precision_sd", "recall_mean", "recall_sd"]


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def samples_csv(samples) -> str:
    if samples and isinstance(samples[0], SingleImageSample):
        return _csv_text(SINGLE_HEADER, [s.row() for s in samples])
    return _csv_text(SUBSET_HEADER, [s.row() for s in samples])


def summary_csv(rows: list[MetricRow]) -> str:
    def stat(pair):
        return ["", ""] if pair is None else [repr(pair[0]), repr(pair[1])]

    out = []
    for r in sorted(rows, key=lambda r: r.prompt):
        out.append(
            [r.prompt, str(r.n_samples), str(r.n_undefined)]
            + stat(r.dice) + stat(r.centroid2d_mm) + stat(r.centroid3d_mm)
            + stat(r.bbox_precision) + stat(r.bbox_recall)
        )
    return _csv_text(SUMMARY_HEADER, out)


def summary_table(rows: list[MetricRow]) -> str:
    """Human-readable table mirroring the reported column structure."""
    lines = [f"{'prompt':<28} {'n':>4} {'DICE':>13} {'c2d mm':>15} "
             f"{'c3d mm':>15} {'precision':>13} {'recall':>13}"]

    def cell(pair, width=13):
        if pair is None:
            return " " * width
        return f"{pair[0]:6.2f} +- {pair[1]:4.2f}".rjust(width)

    for r in sorted(rows, key=lambda r: r.prompt):
        lines.append(
            f"{r.prompt:<28} {r.n_samples:>4} {cell(r.dice)} {cell(r.centroid2d_mm, 15)} "
            f"{cell(r.centroid3d_mm, 15)} {cell(r.bbox_precision)} {cell(r.bbox_recall)}"
        )
    return "\n".join(lines) + "\n"
