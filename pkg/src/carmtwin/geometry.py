"""Pinhole X-ray camera model and isocentric C-arm kinematics.

Coordinate conventions used throughout the package:

Patient frame (right-handed, mm):
    +x patient-left, +y superior (toward the head), +z anterior.
    The isocenter of an untranslated C-arm is the frame origin.

Camera frame (right-handed, standard computer vision):
    +x image-right, +y image-down, +z forward along the viewing axis
    (source toward isocenter).

Detector coordinates: continuous (u, v) in pixels, u along columns
(image-right), v along rows (image-down). Pixel (r, c) covers
[c, c+1) x [r, r+1); its center is (c + 0.5, r + 0.5).

C-arm angles (degrees): at alpha=0, beta=0 the source sits anterior of the
patient and looks along (0, 0, -1) - the AP view. Positive alpha orbits the
source toward patient-left, so alpha=90 is a lateral view looking along
(-1, 0, 0). Positive beta tilts the source toward superior. roll spins the
detector about the viewing axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateProjectionError, InvalidParameterError

DEFAULT_DETECTOR_MM = 430.0
DEFAULT_PIXEL_PITCH_MM = 0.3
DEFAULT_SID_MM = 750.0  # source-isocenter distance
DEFAULT_SDD_MM = 1200.0  # source-detector distance

_W_EPS = 1e-12


def normalize_angle_deg(a: float) -> float:
    """Fold an angle into (-180, 180]."""
    r = float(a) % 360.0
    if r > 180.0:
        r -= 360.0
    return r


def _frozen(a, shape, dtype=float) -> np.ndarray:
    out = np.asarray(a, dtype=dtype).reshape(shape).copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class IntrinsicMatrix:
    """Detector geometry: focal length, principal point, size and pitch."""

    focal_px: float
    principal_point: np.ndarray  # (2,) px, (u, v)
    detector_size_px: np.ndarray  # (2,) px, (W, H)
    pixel_pitch_mm: float

    def __post_init__(self):
        object.__setattr__(self, "principal_point", _frozen(self.principal_point, (2,)))
        object.__setattr__(self, "detector_size_px", _frozen(self.detector_size_px, (2,), int))
        if not (self.focal_px > 0 and self.pixel_pitch_mm > 0):
            raise InvalidParameterError("focal_px and pixel_pitch_mm must be positive")
        if not np.all(self.detector_size_px > 0):
            raise InvalidParameterError("detector_size_px components must be positive")
        pp, size = self.principal_point, self.detector_size_px
        if np.any(pp < 0) or np.any(pp >= size):
            raise InvalidParameterError(f"principal point {pp} outside detector {size}")

    @property
    def K(self) -> np.ndarray:
        f, (cu, cv) = self.focal_px, self.principal_point
        return np.array([[f, 0.0, cu], [0.0, f, cv], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform (rotation orthonormal, det +1)."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,) mm
    timestamp: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise InvalidParameterError("rotation is not orthonormal (tol 1e-9)")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidParameterError("rotation determinant must be +1 (tol 1e-9)")

    @property
    def viewing_dir(self) -> np.ndarray:
        """Unit vector along the camera z axis (source toward scene), world frame."""
        return self.rotation[2]

    @property
    def camera_center(self) -> np.ndarray:
        """Source position in the patient frame."""
        return -self.rotation.T @ self.translation

    @property
    def u_axis_world(self) -> np.ndarray:
        """Detector +u direction in the patient frame."""
        return self.rotation[0]

    @property
    def v_axis_world(self) -> np.ndarray:
        """Detector +v direction in the patient frame."""
        return self.rotation[1]


@dataclass(frozen=True)
class ProjectionMatrix:
    """P = K [R | t] plus the pieces it was built from."""

    matrix: np.ndarray  # (3, 4)
    intrinsics: IntrinsicMatrix
    pose: CameraPose
    image_size_px: np.ndarray  # (2,) (W, H)

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix, (3, 4)))
        object.__setattr__(self, "image_size_px", _frozen(self.image_size_px, (2,), int))
        expected = self.intrinsics.K @ np.hstack(
            [self.pose.rotation, self.pose.translation[:, None]]
        )
        scale = max(np.max(np.abs(expected)), 1.0)
        if np.max(np.abs(self.matrix - expected)) > 1e-9 * scale:
            raise InvalidParameterError("matrix does not equal K[R|t] (rel tol 1e-9)")
        if abs(np.linalg.det(self.matrix[:, :3])) < 1e-12:
            raise InvalidParameterError("left 3x3 block of P is singular")

    @classmethod
    def from_parts(
        cls,
        intrinsics: IntrinsicMatrix,
        pose: CameraPose,
        image_size_px=None,
    ) -> "ProjectionMatrix":
        P = intrinsics.K @ np.hstack([pose.rotation, pose.translation[:, None]])
        size = intrinsics.detector_size_px if image_size_px is None else image_size_px
        return cls(matrix=P, intrinsics=intrinsics, pose=pose, image_size_px=size)


@dataclass(frozen=True)
class CArmState:
    """Isocentric gantry configuration, angles in degrees, distances in mm."""

    alpha: float = 0.0  # orbital
    beta: float = 0.0  # cranio-caudal tilt
    roll: float = 0.0
    isocenter: np.ndarray = field(default_factory=lambda: np.zeros(3))
    source_isocenter_dist: float = DEFAULT_SID_MM
    source_detector_dist: float = DEFAULT_SDD_MM

    def __post_init__(self):
        object.__setattr__(self, "isocenter", _frozen(self.isocenter, (3,)))
        object.__setattr__(self, "alpha", normalize_angle_deg(self.alpha))
        object.__setattr__(self, "beta", normalize_angle_deg(self.beta))
        object.__setattr__(self, "roll", normalize_angle_deg(self.roll))
        if not (self.source_detector_dist > self.source_isocenter_dist > 0):
            raise InvalidParameterError(
                "require source_detector_dist > source_isocenter_dist > 0, got "
                f"SDD={self.source_detector_dist}, SID={self.source_isocenter_dist}"
            )

    def with_deltas(self, **deltas: float) -> "CArmState":
        """New state offset by per-axis deltas (alpha/beta/roll deg, x/y/z mm)."""
        iso = self.isocenter.copy()
        iso[0] += deltas.get("x", 0.0)
        iso[1] += deltas.get("y", 0.0)
        iso[2] += deltas.get("z", 0.0)
        return CArmState(
            alpha=self.alpha + deltas.get("alpha", 0.0),
            beta=self.beta + deltas.get("beta", 0.0),
            roll=self.roll + deltas.get("roll", 0.0),
            isocenter=iso,
            source_isocenter_dist=self.source_isocenter_dist,
            source_detector_dist=self.source_detector_dist,
        )


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box in the patient frame (mm)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", _frozen(self.lo, (3,)))
        object.__setattr__(self, "hi", _frozen(self.hi, (3,)))
        if np.any(self.lo > self.hi):
            raise InvalidParameterError(f"box min {self.lo} exceeds max {self.hi}")

    @classmethod
    def from_points(cls, pts: np.ndarray, pad: float = 0.0) -> "Box3":
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        return cls(pts.min(axis=0) - pad, pts.max(axis=0) + pad)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    def volume(self) -> float:
        return float(np.prod(self.size))

    def expand(self, margin: float) -> "Box3":
        return Box3(self.lo - margin, self.hi + margin)

    def intersect(self, other: "Box3"):
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if np.any(lo > hi):
            return None
        return Box3(lo, hi)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def corners(self) -> np.ndarray:
        lo, hi = self.lo, self.hi
        return np.array(
            [[a, b, c] for a in (lo[0], hi[0]) for b in (lo[1], hi[1]) for c in (lo[2], hi[2])]
        )


def make_intrinsics(
    detector_mm: float,
    pixel_pitch_mm: float,
    source_detector_dist_mm: float,
) -> IntrinsicMatrix:
    """Square-detector intrinsics with the principal point at the center."""
    if detector_mm <= 0 or pixel_pitch_mm <= 0 or source_detector_dist_mm <= 0:
        raise InvalidParameterError("all intrinsics inputs must be positive")
    n = int(round(detector_mm / pixel_pitch_mm))
    if n < 1:
        raise InvalidParameterError("detector smaller than one pixel")
    return IntrinsicMatrix(
        focal_px=source_detector_dist_mm / pixel_pitch_mm,
        principal_point=np.array([n / 2.0, n / 2.0]),
        detector_size_px=np.array([n, n]),
        pixel_pitch_mm=pixel_pitch_mm,
    )


def source_direction(alpha_deg: float, beta_deg: float) -> np.ndarray:
    """Unit vector from the isocenter toward the source."""
    a = np.deg2rad(alpha_deg)
    b = np.deg2rad(beta_deg)
    return np.array([np.cos(b) * np.sin(a), np.sin(b), np.cos(b) * np.cos(a)])


def pose_from_carm(state: CArmState, timestamp: int = 0) -> CameraPose:
    """Camera pose looking at the isocenter from the gantry configuration.

    The detector +v axis points inferior whenever the view is not aligned
    with the superior axis; roll then rotates the detector about the
    viewing axis (right-hand rule).
    """
    u = source_direction(state.alpha, state.beta)
    d = -u  # viewing direction, source toward isocenter
    up = np.array([0.0, 1.0, 0.0])
    x_cam = np.cross(d, up)
    nx = np.linalg.norm(x_cam)
    if nx < 1e-9:  # looking along the superior axis; use anterior as reference
        x_cam = np.cross(d, np.array([0.0, 0.0, 1.0]))
        nx = np.linalg.norm(x_cam)
    x_cam /= nx
    y_cam = np.cross(d, x_cam)
    if abs(state.roll) > 0:
        th = np.deg2rad(state.roll)
        x_cam, y_cam = (
            np.cos(th) * x_cam + np.sin(th) * y_cam,
            -np.sin(th) * x_cam + np.cos(th) * y_cam,
        )
    R = np.vstack([x_cam, y_cam, d])
    center = state.isocenter + u * state.source_isocenter_dist
    t = -R @ center
    return CameraPose(rotation=R, translation=t, timestamp=timestamp)


def projection_from_carm(
    state: CArmState,
    intrinsics: IntrinsicMatrix,
    timestamp: int = 0,
) -> ProjectionMatrix:
    return ProjectionMatrix.from_parts(intrinsics, pose_from_carm(state, timestamp))


def project(P: ProjectionMatrix, x) -> np.ndarray:
    """Homogeneous projection of one patient-frame point to detector pixels.

    No clipping: out-of-bounds coordinates are returned as-is.
    """
    x = np.asarray(x, dtype=float).reshape(3)
    m = P.matrix
    u = m[0, 0] * x[0] + m[0, 1] * x[1] + m[0, 2] * x[2] + m[0, 3]
    v = m[1, 0] * x[0] + m[1, 1] * x[1] + m[1, 2] * x[2] + m[1, 3]
    w = m[2, 0] * x[0] + m[2, 1] * x[1] + m[2, 2] * x[2] + m[2, 3]
    if abs(w) < _W_EPS:
        raise DegenerateProjectionError(f"point {x} lies on the principal plane (w={w})")
    return np.array([u / w, v / w])


def project_many(P: ProjectionMatrix, pts: np.ndarray):
    """Vectorized projection: returns (u, v, w) without the perspective divide
    applied to degenerate points.

    Kept as explicit elementwise arithmetic (no matmul) so results are
    bit-identical with a scalar evaluation of the same formula.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    m = P.matrix
    X, Y, Z = pts[:, 0], pts[:, 1], pts[:, 2]
    uh = m[0, 0] * X + m[0, 1] * Y + m[0, 2] * Z + m[0, 3]
    vh = m[1, 0] * X + m[1, 1] * Y + m[1, 2] * Z + m[1, 3]
    w = m[2, 0] * X + m[2, 1] * Y + m[2, 2] * Z + m[2, 3]
    ok = np.abs(w) > _W_EPS
    safe = np.where(ok, w, 1.0)
    return uh / safe, vh / safe, w


def backproject_ray(P: ProjectionMatrix, u: float, v: float):
    """Ray (origin, unit direction) through detector coordinate (u, v)."""
    K = P.intrinsics.K
    f = K[0, 0]
    d_cam = np.array([(u - K[0, 2]) / f, (v - K[1, 2]) / f, 1.0])
    d_world = P.pose.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return P.pose.camera_center, d_world


def viewing_angle(a: CameraPose, b: CameraPose) -> float:
    """Acute angle in degrees between the two principal viewing directions."""
    c = float(np.clip(np.dot(a.viewing_dir, b.viewing_dir), -1.0, 1.0))
    theta = np.rad2deg(np.arccos(c))
    return min(theta, 180.0 - theta)
