"""Patient digital twin: image history, view selection, and sparse 3D
reconstruction of prompted anatomy from multi-view segmentation heatmaps.

The reconstruction keeps a candidate grid point when (a) it projects inside
the primary image, (b) its heatmap score exceeds the membership threshold in
at least two selected views, and (c) the mean score across the selected
views reaches the mean threshold. By default the mean runs over all selected
views; the literal variant averaging only over the member views exists for
fidelity experiments (it makes the mean condition redundant, since every
member score already exceeds the threshold).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    EmptyReconstructionError,
    InvalidParameterError,
    NoDetectionError,
)
from .geometry import DEFAULT_SID_MM, Box3, viewing_angle
from .segmentation import SegmentationHeatmap
from .xray import XRayImage

_W_EPS = 1e-12
_CHUNK = 1 << 19


@dataclass(frozen=True)
class ImageHistory:
    """Acquisition history: unique ids, strictly increasing ticks."""

    entries: tuple[XRayImage, ...] = ()

    def __post_init__(self):
        ids = [img.id for img in self.entries]
        if len(set(ids)) != len(ids):
            raise InvalidParameterError("image ids must be unique")
        ticks = [img.acquired_at for img in self.entries]
        if any(b <= a for a, b in zip(ticks, ticks[1:])):
            raise InvalidParameterError("acquisition ticks must be strictly increasing")

    def append(self, img: XRayImage) -> "ImageHistory":
        return ImageHistory(self.entries + (img,))

    def get(self, image_id: str) -> XRayImage:
        for img in self.entries:
            if img.id == image_id:
                return img
        raise KeyError(image_id)

    def latest(self) -> XRayImage | None:
        return self.entries[-1] if self.entries else None

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class ViewSelection:
    primary: str
    secondary: tuple[str, ...]
    images: tuple[XRayImage, ...]  # primary first, then secondary in order

    @property
    def n(self) -> int:
        return 1 + len(self.secondary)

    @property
    def ids(self) -> tuple[str, ...]:
        return (self.primary,) + self.secondary


def dedup_views(images, current_id: str, dedup_angle: float = 10.0):
    """Near-duplicate suppression: newest first, the current image always
    survives; anything within the threshold of a survivor is dropped."""
    by_id = {img.id: img for img in images}
    if current_id not in by_id:
        raise InvalidParameterError(f"current image {current_id!r} not in history")
    current = by_id[current_id]
    rest = sorted(
        (img for img in images if img.id != current_id),
        key=lambda im: im.acquired_at,
        reverse=True,
    )
    kept = [current]
    for img in rest:
        if all(
            viewing_angle(img.projection.pose, k.projection.pose) >= dedup_angle
            for k in kept
        ):
            kept.append(img)
    return kept


def select_views(
    h: ImageHistory,
    current: str,
    min_angle: float = 30.0,
    dedup_angle: float = 10.0,
    n_max: int = 5,
) -> ViewSelection:
    """Deterministic greedy view selection, newest first from the current
    image, admitting a candidate only when it stays at least min_angle away
    from everything already selected."""
    survivors = dedup_views(h.entries, current, dedup_angle)
    selected = [survivors[0]]
    for img in survivors[1:]:
        if len(selected) >= n_max:
            break
        if all(
            viewing_angle(img.projection.pose, s.projection.pose) >= min_angle
            for s in selected
        ):
            selected.append(img)
    return ViewSelection(
        primary=current,
        secondary=tuple(img.id for img in selected[1:]),
        images=tuple(selected),
    )


@dataclass(frozen=True)
class ReconstructionResult:
    points: np.ndarray  # (N, 3) mm
    support: np.ndarray  # (N,) int, number of member views per point
    mean_score: np.ndarray  # (N,) the value checked by the mean condition
    centroid: np.ndarray  # (3,)
    bbox: Box3
    prompt: str
    grid_spacing_mm: float
    views_used: ViewSelection

    @property
    def n_points(self) -> int:
        return int(self.points.shape[0])


def grid_offsets(radius_mm: float, spacing_mm: float) -> np.ndarray:
    """Cell-center offsets of a cubic grid centered at the isocenter.

    With n = floor(radius / spacing) cells per half-axis, the centers sit at
    (k + 0.5) * spacing for k in [-n, n), symmetric about zero.
    """
    n_half = int(np.floor(radius_mm / spacing_mm))
    if n_half < 1:
        raise InvalidParameterError("grid radius smaller than one cell")
    return (np.arange(2 * n_half) - n_half + 0.5) * spacing_mm


def candidate_grid(isocenter, radius_mm: float, spacing_mm: float) -> np.ndarray:
    offs = grid_offsets(radius_mm, spacing_mm)
    iso = np.asarray(isocenter, dtype=float).reshape(3)
    X, Y, Z = np.meshgrid(iso[0] + offs, iso[1] + offs, iso[2] + offs, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)


def _view_scores(matrix: np.ndarray, scores: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Nearest-pixel heatmap sample at each projected point; 0 outside/behind."""
    X, Y, Z = pts[:, 0], pts[:, 1], pts[:, 2]
    uh = matrix[0, 0] * X + matrix[0, 1] * Y + matrix[0, 2] * Z + matrix[0, 3]
    vh = matrix[1, 0] * X + matrix[1, 1] * Y + matrix[1, 2] * Z + matrix[1, 3]
    w = matrix[2, 0] * X + matrix[2, 1] * Y + matrix[2, 2] * Z + matrix[2, 3]
    valid = w > _W_EPS
    safe = np.where(valid, w, 1.0)
    u = uh / safe
    v = vh / safe
    h, wd = scores.shape
    iu = np.floor(np.clip(u, -2.0, wd + 1.0)).astype(np.int64)
    iv = np.floor(np.clip(v, -2.0, h + 1.0)).astype(np.int64)
    inb = valid & (iu >= 0) & (iu < wd) & (iv >= 0) & (iv < h)
    out = np.zeros(pts.shape[0], dtype=np.float64)
    out[inb] = scores[iv[inb], iu[inb]]
    return out


def _in_image(matrix: np.ndarray, width: int, height: int, pts: np.ndarray) -> np.ndarray:
    X, Y, Z = pts[:, 0], pts[:, 1], pts[:, 2]
    uh = matrix[0, 0] * X + matrix[0, 1] * Y + matrix[0, 2] * Z + matrix[0, 3]
    vh = matrix[1, 0] * X + matrix[1, 1] * Y + matrix[1, 2] * Z + matrix[1, 3]
    w = matrix[2, 0] * X + matrix[2, 1] * Y + matrix[2, 2] * Z + matrix[2, 3]
    valid = w > _W_EPS
    safe = np.where(valid, w, 1.0)
    u = uh / safe
    v = vh / safe
    return valid & (u >= 0.0) & (u < width) & (v >= 0.0) & (v < height)


def reconstruct(
    sel: ViewSelection,
    heatmaps,
    grid_spacing_mm: float = 3.0,
    membership_thresh: float = 0.5,
    mean_thresh: float = 0.5,
    grid_radius_mm: float = 256.0,
    isocenter=(0.0, 0.0, 0.0),
    mean_over_membership_only: bool = False,
    trim_percentile: float = 0.0,
    candidate_points: np.ndarray | None = None,
) -> ReconstructionResult:
    """Sparse reconstruction of the prompted structure over a candidate grid.

    heatmaps must align with sel.images (primary first). candidate_points
    overrides the default isocentric grid (used by equivalence tests).
    """
    if sel.n < 2:
        raise InvalidParameterError("reconstruction needs at least two selected views")
    if len(heatmaps) != sel.n:
        raise InvalidParameterError(f"expected {sel.n} heatmaps, got {len(heatmaps)}")
    if grid_spacing_mm <= 0:
        raise InvalidParameterError("grid_spacing_mm must be positive")
    prompts = {hm.prompt for hm in heatmaps}
    if len(prompts) != 1:
        raise InvalidParameterError(f"heatmaps carry mixed prompts: {sorted(prompts)}")
    for hm, img in zip(heatmaps, sel.images):
        if hm.image_id != img.id:
            raise InvalidParameterError(f"heatmap for {hm.image_id!r} out of order ({img.id!r})")
        if hm.shape != (img.height, img.width):
            raise InvalidParameterError("heatmap shape does not match its image")
    prompt = heatmaps[0].prompt

    if candidate_points is None:
        candidates = candidate_grid(isocenter, grid_radius_mm, grid_spacing_mm)
    else:
        candidates = np.asarray(candidate_points, dtype=float).reshape(-1, 3)

    matrices = [img.projection.matrix for img in sel.images]
    score_grids = [hm.scores for hm in heatmaps]
    w0, h0 = sel.images[0].width, sel.images[0].height
    n = sel.n

    kept_pts, kept_support, kept_mean = [], [], []
    for start in range(0, candidates.shape[0], _CHUNK):
        pts = candidates[start : start + _CHUNK]
        in0 = _in_image(matrices[0], w0, h0, pts)
        total = np.zeros(pts.shape[0], dtype=np.float64)
        support = np.zeros(pts.shape[0], dtype=np.int64)
        member_total = np.zeros(pts.shape[0], dtype=np.float64)
        for i in range(n):
            f = _view_scores(matrices[i], score_grids[i], pts)
            total += f
            member = f > membership_thresh
            support += member
            member_total += np.where(member, f, 0.0)
        if mean_over_membership_only:
            mean = np.where(support > 0, member_total / np.maximum(support, 1), 0.0)
        else:
            mean = total / n
        keep = in0 & (support >= 2) & (mean >= mean_thresh)
        if np.any(keep):
            kept_pts.append(pts[keep])
            kept_support.append(support[keep])
            kept_mean.append(mean[keep])

    if not kept_pts:
        areas = {
            img.id: int(np.count_nonzero(hm.scores > membership_thresh))
            for img, hm in zip(sel.images, heatmaps)
        }
        raise EmptyReconstructionError(
            f"no grid point met the reconstruction conditions for {prompt!r}",
            per_view_mask_areas=areas,
        )

    points = np.concatenate(kept_pts, axis=0)
    support = np.concatenate(kept_support, axis=0)
    mean_score = np.concatenate(kept_mean, axis=0)

    if trim_percentile > 0.0:
        keep = np.ones(points.shape[0], dtype=bool)
        for axis in range(3):
            lo = np.percentile(points[:, axis], trim_percentile)
            hi = np.percentile(points[:, axis], 100.0 - trim_percentile)
            keep &= (points[:, axis] >= lo) & (points[:, axis] <= hi)
        if np.any(keep):
            points, support, mean_score = points[keep], support[keep], mean_score[keep]

    centroid = points.mean(axis=0)
    bbox = Box3.from_points(points, pad=grid_spacing_mm / 2.0)
    return ReconstructionResult(
        points=points,
        support=support,
        mean_score=mean_score,
        centroid=centroid,
        bbox=bbox,
        prompt=prompt,
        grid_spacing_mm=grid_spacing_mm,
        views_used=sel,
    )


@dataclass(frozen=True)
class FallbackResult:
    """Single-view localization: detector centroid and the isocenter shift
    (in the detector plane's patient-frame axes) that would center it."""

    centroid_px: np.ndarray
    translation_mm: np.ndarray


def single_image_fallback(
    img: XRayImage,
    heatmap: SegmentationHeatmap,
    sid_mm: float = DEFAULT_SID_MM,
    thresh: float = 0.5,
) -> FallbackResult:
    if heatmap.image_id != img.id:
        raise InvalidParameterError("heatmap does not belong to this image")
    mask = heatmap.scores >= thresh
    idx = np.argwhere(mask)
    if idx.size == 0:
        raise NoDetectionError(f"prompt {heatmap.prompt!r} not detected in {img.id}")
    rc = idx.mean(axis=0) + 0.5
    centroid = np.array([rc[1], rc[0]])  # (u, v)
    intr = img.projection.intrinsics
    sdd_mm = intr.focal_px * intr.pixel_pitch_mm
    scale = intr.pixel_pitch_mm * (sid_mm / sdd_mm)
    du, dv = (centroid - intr.principal_point) * scale
    pose = img.projection.pose
    translation = du * pose.u_axis_world + dv * pose.v_axis_world
    return FallbackResult(centroid_px=centroid, translation_mm=translation)


@dataclass(frozen=True)
class TwinConfig:
    min_angle_deg: float = 30.0
    dedup_angle_deg: float = 10.0
    n_max: int = 5
    grid_spacing_mm: float = 3.0
    grid_radius_mm: float = 256.0
    membership_thresh: float = 0.5
    mean_thresh: float = 0.5
    mean_over_membership_only: bool = False
    trim_percentile: float = 0.0


@dataclass(frozen=True)
class TwinState:
    """Snapshot of the twin: history plus reconstructions still valid for it."""

    history: ImageHistory = field(default_factory=ImageHistory)
    config: TwinConfig = field(default_factory=TwinConfig)
    cache: dict[str, tuple[tuple[str, ...], ReconstructionResult]] = field(default_factory=dict)

    def select(self, current: str | None = None) -> ViewSelection:
        if current is None:
            latest = self.history.latest()
            if latest is None:
                raise InvalidParameterError("empty history")
            current = latest.id
        return select_views(
            self.history, current,
            self.config.min_angle_deg, self.config.dedup_angle_deg, self.config.n_max,
        )

    def cached(self, prompt: str) -> ReconstructionResult | None:
        hit = self.cache.get(prompt)
        return hit[1] if hit else None

    def remember(self, prompt: str, result: ReconstructionResult) -> "TwinState":
        cache = dict(self.cache)
        cache[prompt] = (result.views_used.ids, result)
        return replace(self, cache=cache)


def update_twin(state: TwinState, new_image: XRayImage) -> TwinState:
    """Append an acquisition, dropping cached reconstructions whose view
    selection would change under the grown history."""
    if any(img.id == new_image.id for img in state.history.entries):
        raise InvalidParameterError(f"image id {new_image.id!r} already in history")
    history = state.history.append(new_image)
    fresh = select_views(
        history, new_image.id,
        state.config.min_angle_deg, state.config.dedup_angle_deg, state.config.n_max,
    )
    cache = {
        prompt: entry
        for prompt, entry in state.cache.items()
        if set(entry[0]) == set(fresh.ids)
    }
    return TwinState(history=history, config=state.config, cache=cache)


def export_point_cloud(result: ReconstructionResult) -> str:
    """Text export: one "x y z support mean_score" line per point."""
    lines = [
        f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {int(s)} {float(m)!r}"
        for p, s, m in zip(result.points, result.support, result.mean_score)
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def summarize(result: ReconstructionResult) -> dict:
    """Structured summary for the UI and the evaluation harness."""
    return {
        "prompt": result.prompt,
        "n_points": result.n_points,
        "centroid_mm": [float(x) for x in result.centroid],
        "bbox_lo_mm": [float(x) for x in result.bbox.lo],
        "bbox_hi_mm": [float(x) for x in result.bbox.hi],
        "grid_spacing_mm": result.grid_spacing_mm,
        "views_used": list(result.views_used.ids),
    }
