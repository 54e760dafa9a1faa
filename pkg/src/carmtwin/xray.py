"""Simulated X-ray acquisition: DRR rendering, ground-truth mask projection,
and collimation, plus the PGM + sidecar interchange format."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _raycast
from .errors import (
    DegenerateCollimationError,
    EmptyStructureError,
    InvalidParameterError,
    InvalidSpecError,
)
from .geometry import Box3, CameraPose, IntrinsicMatrix, ProjectionMatrix, project_many
from .phantom import LabeledVolume, structure_mask

logger = logging.getLogger(__name__)

_SIDECAR_MAGIC = "carmtwin-image"


@dataclass(frozen=True)
class DetectorRect:
    """Axis-aligned detector rectangle in continuous pixel coordinates."""

    u0: float
    v0: float
    u1: float
    v1: float

    def __post_init__(self):
        if self.u1 < self.u0 or self.v1 < self.v0:
            raise InvalidParameterError(f"inverted rectangle {self}")

    def pixel_mask(self, width: int, height: int) -> np.ndarray:
        """Pixels whose centers fall inside the rectangle."""
        uc = np.arange(width) + 0.5
        vc = np.arange(height) + 0.5
        inside_u = (uc >= self.u0) & (uc <= self.u1)
        inside_v = (vc >= self.v0) & (vc <= self.v1)
        return inside_v[:, None] & inside_u[None, :]

    def as_tuple(self):
        return (self.u0, self.v0, self.u1, self.v1)


@dataclass(frozen=True)
class CollimationBox:
    """3D collimation target in the patient frame; persists across views."""

    bounds: Box3
    source_prompt: str
    created_at: int = 0

    def __post_init__(self):
        if self.bounds.volume() <= 0:
            raise InvalidParameterError("collimation box must have nonzero volume")


@dataclass(eq=False)
class XRayImage:
    pixels: np.ndarray  # (H, W) float in [0, 1]
    projection: ProjectionMatrix
    acquired_at: int
    id: str
    collimation_px: DetectorRect | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        w, h = (int(x) for x in self.projection.image_size_px)
        if self.pixels.shape != (h, w):
            raise InvalidParameterError(
                f"pixel grid {self.pixels.shape} does not match projection size (H,W)=({h},{w})"
            )
        if self.collimation_px is not None:
            outside = ~self.collimation_px.pixel_mask(w, h)
            if np.any(self.pixels[outside] != 0.0):
                raise InvalidParameterError("pixels outside the collimation rectangle must be 0")
        self.pixels.setflags(write=False)

    @property
    def size_px(self) -> np.ndarray:
        return self.projection.image_size_px

    @property
    def width(self) -> int:
        return int(self.projection.image_size_px[0])

    @property
    def height(self) -> int:
        return int(self.projection.image_size_px[1])


def _kernel_args(v: LabeledVolume, P: ProjectionMatrix):
    K = P.intrinsics.K
    return dict(
        origin=np.ascontiguousarray(v.origin_mm),
        spacing=np.ascontiguousarray(v.spacing_mm),
        vol_hi=np.ascontiguousarray(v.origin_mm + v.dims * v.spacing_mm),
        cam_center=np.ascontiguousarray(P.pose.camera_center),
        rot_t=np.ascontiguousarray(P.pose.rotation.T),
        focal_px=float(K[0, 0]),
        cu=float(K[0, 2]),
        cv=float(K[1, 2]),
        width=int(P.image_size_px[0]),
        height=int(P.image_size_px[1]),
    )


def render_drr(
    v: LabeledVolume,
    P: ProjectionMatrix,
    collimation: CollimationBox | None = None,
    step_factor: float = 0.5,
    image_id: str = "img-0",
    acquired_at: int = 0,
) -> XRayImage:
    """Line-integral rendering: pixel = 1 - exp(-integral of mu ds).

    Nearest-neighbor label lookup at steps <= min(spacing) * step_factor.
    A present collimation box is projected to a detector rectangle and
    pixels outside it are zeroed; a degenerate projection renders
    uncollimated with a warning.
    """
    args = _kernel_args(v, P)
    out = np.zeros((args["height"], args["width"]), dtype=np.float64)
    step_mm = float(np.min(v.spacing_mm)) * step_factor
    _raycast.drr_kernel(
        v.labels, v.mu_lut, args["origin"], args["spacing"], args["vol_hi"],
        args["cam_center"], args["rot_t"], args["focal_px"], args["cu"], args["cv"],
        args["height"], args["width"], step_mm, out,
    )
    rect = None
    if collimation is not None:
        try:
            rect = project_collimation(collimation, P)
        except DegenerateCollimationError as e:
            logger.warning("collimation degenerate for view %s: %s; acquiring uncollimated",
                           image_id, e)
            rect = None
        else:
            out[~rect.pixel_mask(args["width"], args["height"])] = 0.0
    return XRayImage(pixels=out, projection=P, acquired_at=acquired_at,
                     id=image_id, collimation_px=rect)


def project_gt_mask(
    v: LabeledVolume,
    labels,
    P: ProjectionMatrix,
    step_factor: float = 0.5,
) -> np.ndarray:
    """Boolean silhouette of a structure: true where the pixel ray hits it.

    Computed pre-collimation by definition; uses the same ray sampling as
    render_drr.
    """
    mask3 = structure_mask(v, labels)
    idx = np.argwhere(mask3)
    if idx.size == 0:
        raise EmptyStructureError(f"labels {sorted(set(labels))} are empty in this volume")
    lo = v.origin_mm + idx.min(axis=0) * v.spacing_mm
    hi = v.origin_mm + (idx.max(axis=0) + 1) * v.spacing_mm
    args = _kernel_args(v, P)
    out = np.zeros((args["height"], args["width"]), dtype=np.uint8)
    step_mm = float(np.min(v.spacing_mm)) * step_factor
    _raycast.mask_project_kernel(
        mask3, args["origin"], args["spacing"], args["vol_hi"],
        np.ascontiguousarray(lo), np.ascontiguousarray(hi),
        args["cam_center"], args["rot_t"], args["focal_px"], args["cu"], args["cv"],
        args["height"], args["width"], step_mm, out,
    )
    return out.astype(bool)


def project_collimation(
    box: CollimationBox,
    P: ProjectionMatrix,
    margin_px: float = 0.0,
) -> DetectorRect:
    """Detector rectangle bounding the projected corners of a 3D box.

    Corners behind the source make the footprint unbounded; if any (but not
    all) corner has non-positive depth the full detector is returned as the
    conservative bound. All corners behind, or a footprint entirely off the
    detector, raise DegenerateCollimationError.
    """
    corners = box.bounds.corners()
    u, vv, w = project_many(P, corners)
    W, H = (float(x) for x in P.image_size_px)
    positive = w > 1e-12
    if not np.any(positive):
        raise DegenerateCollimationError("all box corners lie behind the source")
    if not np.all(positive):
        return DetectorRect(0.0, 0.0, W, H)
    u0, u1 = float(np.min(u)) - margin_px, float(np.max(u)) + margin_px
    v0, v1 = float(np.min(vv)) - margin_px, float(np.max(vv)) + margin_px
    u0, u1 = max(u0, 0.0), min(u1, W)
    v0, v1 = max(v0, 0.0), min(v1, H)
    if u0 >= u1 or v0 >= v1:
        raise DegenerateCollimationError("projected box misses the detector entirely")
    return DetectorRect(u0, v0, u1, v1)


def encode_pgm(img: XRayImage) -> bytes:
    """16-bit binary P5 graymap (big-endian samples, PGM convention)."""
    q = np.round(np.clip(img.pixels, 0.0, 1.0) * 65535.0).astype(">u2")
    return f"P5\n{img.width} {img.height}\n65535\n".encode("ascii") + q.tobytes()


def encode_sidecar(img: XRayImage) -> str:
    pose = img.projection.pose
    intr = img.projection.intrinsics
    rect = img.collimation_px
    lines = [
        f"{_SIDECAR_MAGIC} 1",
        f"id: {img.id}",
        f"acquired_at: {img.acquired_at}",
        f"image_size_px: {img.width} {img.height}",
        f"pixel_pitch_mm: {intr.pixel_pitch_mm!r}",
        f"focal_px: {intr.focal_px!r}",
        "principal_point: " + " ".join(repr(float(x)) for x in intr.principal_point),
        "rotation: " + " ".join(repr(float(x)) for x in pose.rotation.ravel()),
        "translation: " + " ".join(repr(float(x)) for x in pose.translation),
        "projection: " + " ".join(repr(float(x)) for x in img.projection.matrix.ravel()),
        "collimation_px: " + (" ".join(repr(float(x)) for x in rect.as_tuple()) if rect else "none"),
        f"timestamp: {pose.timestamp}",
    ]
    return "\n".join(lines) + "\n"


def save_image_pair(img: XRayImage, pgm_path, sidecar_path=None) -> tuple[Path, Path]:
    """Write the interchange pair: 16-bit P5 graymap + text sidecar."""
    pgm_path = Path(pgm_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else pgm_path.with_suffix(".txt")
    pgm_path.write_bytes(encode_pgm(img))
    sidecar_path.write_text(encode_sidecar(img), encoding="utf-8")
    return pgm_path, sidecar_path


def load_pgm(pgm_path) -> np.ndarray:
    with open(pgm_path, "rb") as f:
        blob = f.read()
    return decode_pgm(blob)


def decode_pgm(blob: bytes) -> np.ndarray:
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise InvalidSpecError("not a binary PGM (P5) file")
    w, h = (int(x) for x in parts[1].split())
    maxval = int(parts[2])
    if maxval != 65535:
        raise InvalidSpecError("expected a 16-bit graymap")
    data = np.frombuffer(parts[3], dtype=">u2", count=w * h).reshape(h, w)
    return data.astype(np.float64) / 65535.0


def parse_sidecar(text: str) -> dict:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(_SIDECAR_MAGIC):
        raise InvalidSpecError("not an image sidecar")
    fields = {}
    for ln in lines[1:]:
        if not ln.strip():
            continue
        key, _, rest = ln.partition(": ")
        fields[key] = rest
    return fields


def load_image_pair(pgm_path, sidecar_path=None) -> XRayImage:
    pgm_path = Path(pgm_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else pgm_path.with_suffix(".txt")
    pixels = load_pgm(pgm_path)
    fields = parse_sidecar(sidecar_path.read_text(encoding="utf-8"))
    return image_from_parts(pixels, fields)


def image_from_parts(pixels: np.ndarray, fields: dict) -> XRayImage:
    w, h = (int(x) for x in fields["image_size_px"].split())
    intr = IntrinsicMatrix(
        focal_px=float(fields["focal_px"]),
        principal_point=np.array([float(x) for x in fields["principal_point"].split()]),
        detector_size_px=np.array([w, h]),
        pixel_pitch_mm=float(fields["pixel_pitch_mm"]),
    )
    pose = CameraPose(
        rotation=np.array([float(x) for x in fields["rotation"].split()]).reshape(3, 3),
        translation=np.array([float(x) for x in fields["translation"].split()]),
        timestamp=int(fields.get("timestamp", 0)),
    )
    P = ProjectionMatrix.from_parts(intr, pose, image_size_px=np.array([w, h]))
    stored = np.array([float(x) for x in fields["projection"].split()]).reshape(3, 4)
    if not np.allclose(stored, P.matrix, rtol=1e-9, atol=1e-9):
        raise InvalidSpecError("sidecar projection matrix inconsistent with K[R|t]")
    rect = None
    if fields.get("collimation_px", "none") != "none":
        rect = DetectorRect(*(float(x) for x in fields["collimation_px"].split()))
    return XRayImage(
        pixels=pixels,
        projection=P,
        acquired_at=int(fields.get("acquired_at", 0)),
        id=fields.get("id", "img-?"),
        collimation_px=rect,
    )
