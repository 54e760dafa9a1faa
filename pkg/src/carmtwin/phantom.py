"""Synthetic labeled patient volumes and the prompt vocabulary.

A volume is a dense grid of small-integer structure labels plus an
attenuation table; label 0 is always background air. Voxel (i, j, k) is
centered at ``origin + (index + 0.5) * spacing``.
"""

from __future__ import annotations

import io
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from .errors import EmptyStructureError, InvalidLabelError, InvalidSpecError
from .geometry import Box3

logger = logging.getLogger(__name__)

_FORMAT_MAGIC = "carmtwin-phantom"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Primitive:
    """One geometric building block of a phantom.

    kind is one of ellipsoid (center, radii), box (center, size) or tube
    (p0, p1, radius). rotate_deg applies extrinsic xyz Euler angles to
    ellipsoids and boxes.
    """

    kind: str
    label: str
    attenuation: float
    center: np.ndarray | None = None
    radii: np.ndarray | None = None
    size: np.ndarray | None = None
    p0: np.ndarray | None = None
    p1: np.ndarray | None = None
    radius: float | None = None
    rotate_deg: np.ndarray | None = None


@dataclass(frozen=True)
class PhantomSpec:
    name: str
    dims: tuple[int, int, int]
    spacing_mm: np.ndarray
    origin_mm: np.ndarray
    structures: tuple[Primitive, ...]


@dataclass
class LabeledVolume:
    """Dense label grid with per-label attenuation coefficients (1/mm)."""

    dims: np.ndarray  # (3,) int
    spacing_mm: np.ndarray  # (3,)
    origin_mm: np.ndarray  # (3,)
    labels: np.ndarray  # dims-shaped unsigned int grid
    attenuation_table: dict[int, float]
    label_names: dict[int, str]
    name: str = "volume"

    def __post_init__(self):
        self.dims = np.asarray(self.dims, dtype=int).reshape(3)
        self.spacing_mm = np.asarray(self.spacing_mm, dtype=float).reshape(3)
        self.origin_mm = np.asarray(self.origin_mm, dtype=float).reshape(3)
        if np.any(self.dims <= 0) or np.any(self.spacing_mm <= 0):
            raise InvalidSpecError("dims and spacing must be positive")
        if tuple(self.labels.shape) != tuple(self.dims):
            raise InvalidSpecError("label grid shape does not match dims")
        if 0 not in self.label_names:
            raise InvalidSpecError("label 0 (background) missing from label table")
        present = set(np.unique(self.labels).tolist())
        missing = present - set(self.label_names)
        if missing:
            raise InvalidSpecError(f"grid contains labels without names: {sorted(missing)}")
        self.labels.setflags(write=False)

    @property
    def name_to_id(self) -> dict[str, int]:
        return {n: i for i, n in self.label_names.items()}

    @property
    def mu_lut(self) -> np.ndarray:
        lut = np.zeros(max(self.label_names) + 1, dtype=np.float64)
        for lid, mu in self.attenuation_table.items():
            lut[lid] = mu
        return lut

    @property
    def bounds(self) -> Box3:
        return Box3(self.origin_mm, self.origin_mm + self.dims * self.spacing_mm)

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin_mm[axis] + (np.arange(self.dims[axis]) + 0.5) * self.spacing_mm[axis]

    def ids_for_names(self, names) -> frozenset[int]:
        table = self.name_to_id
        out = set()
        for n in names:
            if n not in table:
                raise InvalidLabelError(f"unknown structure name {n!r}")
            out.add(table[n])
        return frozenset(out)


def _vec(x, n=3):
    return np.asarray(x, dtype=float).reshape(n)


def parse_primitive(entry: dict) -> Primitive:
    try:
        kind = entry["kind"]
        label = str(entry["label"])
        mu = float(entry["attenuation"])
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidSpecError(f"malformed structure entry {entry!r}: {e}") from e
    rot = _vec(entry["rotate_deg"]) if "rotate_deg" in entry else None
    if kind == "ellipsoid":
        return Primitive(kind, label, mu, center=_vec(entry["center"]),
                         radii=_vec(entry["radii"]), rotate_deg=rot)
    if kind == "box":
        return Primitive(kind, label, mu, center=_vec(entry["center"]),
                         size=_vec(entry["size"]), rotate_deg=rot)
    if kind == "tube":
        return Primitive(kind, label, mu, p0=_vec(entry["p0"]), p1=_vec(entry["p1"]),
                         radius=float(entry["radius"]))
    raise InvalidSpecError(f"unknown primitive kind {kind!r}")


def load_phantom_spec(source) -> PhantomSpec:
    """Parse a phantom spec from a YAML path, file object or string."""
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        with open(source, "r") as f:
            doc = yaml.safe_load(f)
    elif isinstance(source, str):
        doc = yaml.safe_load(io.StringIO(source))
    else:
        doc = yaml.safe_load(source)
    if not isinstance(doc, dict):
        raise InvalidSpecError("phantom spec must be a mapping")
    try:
        dims = tuple(int(d) for d in doc["dims"])
        spacing = _vec(doc["spacing_mm"])
        origin = _vec(doc["origin_mm"])
        raw = doc.get("structures", [])
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidSpecError(f"bad phantom spec header: {e}") from e
    return PhantomSpec(
        name=str(doc.get("name", "phantom")),
        dims=dims,
        spacing_mm=spacing,
        origin_mm=origin,
        structures=tuple(parse_primitive(e) for e in raw),
    )


def _primitive_bbox(p: Primitive) -> Box3:
    if p.kind == "ellipsoid":
        r = float(np.max(p.radii)) if p.rotate_deg is not None else None
        if r is not None:
            return Box3(p.center - r, p.center + r)
        return Box3(p.center - p.radii, p.center + p.radii)
    if p.kind == "box":
        if p.rotate_deg is not None:
            r = float(np.linalg.norm(p.size) / 2)
            return Box3(p.center - r, p.center + r)
        return Box3(p.center - p.size / 2, p.center + p.size / 2)
    lo = np.minimum(p.p0, p.p1) - p.radius
    hi = np.maximum(p.p0, p.p1) + p.radius
    return Box3(lo, hi)


def _inside(p: Primitive, X, Y, Z) -> np.ndarray:
    pts = np.stack([X, Y, Z], axis=-1)
    if p.kind == "tube":
        axis = p.p1 - p.p0
        L2 = float(axis @ axis)
        rel = pts - p.p0
        t = np.clip((rel @ axis) / L2, 0.0, 1.0)
        closest = p.p0 + t[..., None] * axis
        d2 = np.sum((pts - closest) ** 2, axis=-1)
        return d2 <= p.radius**2
    local = pts - p.center
    if p.rotate_deg is not None:
        R = Rotation.from_euler("xyz", p.rotate_deg, degrees=True).as_matrix()
        local = local @ R  # world->local is R.T applied on the right
    if p.kind == "ellipsoid":
        return np.sum((local / p.radii) ** 2, axis=-1) <= 1.0
    return np.all(np.abs(local) <= p.size / 2, axis=-1)


def build_synthetic_phantom(spec: PhantomSpec) -> LabeledVolume:
    """Voxelize a primitive list; primitives listed later win voxelwise."""
    dims = np.asarray(spec.dims, dtype=int)
    labels = np.zeros(tuple(dims), dtype=np.uint16)
    name_ids: dict[str, int] = {}
    attenuation = {0: 0.0}
    names = {0: "background"}
    vol_box = Box3(spec.origin_mm, spec.origin_mm + dims * spec.spacing_mm)
    centers = [spec.origin_mm[a] + (np.arange(dims[a]) + 0.5) * spec.spacing_mm[a] for a in range(3)]

    for prim in spec.structures:
        if prim.label not in name_ids:
            name_ids[prim.label] = len(name_ids) + 1
            attenuation[name_ids[prim.label]] = prim.attenuation
            names[name_ids[prim.label]] = prim.label
        elif attenuation[name_ids[prim.label]] != prim.attenuation:
            raise InvalidSpecError(
                f"label {prim.label!r} declared with conflicting attenuations"
            )
        lid = name_ids[prim.label]
        bbox = _primitive_bbox(prim)
        if bbox.intersect(vol_box) is None:
            logger.warning("primitive %r lies entirely outside the volume; skipped", prim.label)
            continue
        if not (vol_box.contains(bbox.lo) and vol_box.contains(bbox.hi)):
            logger.warning("primitive %r extends outside the volume; clipped", prim.label)
        # voxel index window covering the primitive
        i0 = np.maximum(np.floor((bbox.lo - spec.origin_mm) / spec.spacing_mm).astype(int), 0)
        i1 = np.minimum(np.ceil((bbox.hi - spec.origin_mm) / spec.spacing_mm).astype(int), dims)
        if np.any(i0 >= i1):
            continue
        X, Y, Z = np.meshgrid(
            centers[0][i0[0]:i1[0]],
            centers[1][i0[1]:i1[1]],
            centers[2][i0[2]:i1[2]],
            indexing="ij",
        )
        sub = labels[i0[0]:i1[0], i0[1]:i1[1], i0[2]:i1[2]]
        sub[_inside(prim, X, Y, Z)] = lid

    return LabeledVolume(
        dims=dims,
        spacing_mm=spec.spacing_mm,
        origin_mm=spec.origin_mm,
        labels=labels,
        attenuation_table=attenuation,
        label_names=names,
        name=spec.name,
    )


def structure_mask(v: LabeledVolume, labels) -> np.ndarray:
    """Boolean grid, true exactly where the voxel label is in ``labels``."""
    labels = set(labels)
    if not labels:
        raise InvalidLabelError("label set must be nonempty")
    unknown = labels - set(v.label_names)
    if unknown:
        raise InvalidLabelError(f"unknown label ids {sorted(unknown)}")
    return np.isin(v.labels, sorted(labels))


def gt_centroid_bbox(v: LabeledVolume, labels) -> tuple[np.ndarray, Box3]:
    """Ground-truth centroid and tight bbox (voxel centers +- half a voxel)."""
    mask = structure_mask(v, labels)
    idx = np.argwhere(mask)
    if idx.size == 0:
        raise EmptyStructureError(f"no voxels carry labels {sorted(set(labels))}")
    pts = v.origin_mm + (idx + 0.5) * v.spacing_mm
    centroid = pts.mean(axis=0)
    half = v.spacing_mm / 2.0
    box = Box3(pts.min(axis=0) - half, pts.max(axis=0) + half)
    return centroid, box


_WS = re.compile(r"\s+")


def normalize_prompt(s: str) -> str:
    return _WS.sub(" ", s.strip().lower())


@dataclass(frozen=True)
class PromptVocabulary:
    """Case- and whitespace-insensitive prompt -> label-id-set lookup."""

    entries: dict[str, frozenset[int]]
    synonyms: dict[str, str] = field(default_factory=dict)

    def prompts(self) -> list[str]:
        return sorted(self.entries)

    def canonical(self, prompt: str) -> str | None:
        key = normalize_prompt(prompt)
        key = self.synonyms.get(key, key)
        return key if key in self.entries else None


def resolve_prompt(voc: PromptVocabulary, prompt: str) -> frozenset[int]:
    """Label ids for a prompt; unknown prompts resolve to the empty set."""
    key = voc.canonical(prompt)
    if key is None:
        return frozenset()
    return voc.entries[key]


def load_vocabulary(source, volume: LabeledVolume) -> PromptVocabulary:
    """Build a vocabulary from YAML, validating names against the volume."""
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        with open(source, "r") as f:
            doc = yaml.safe_load(f)
    else:
        doc = yaml.safe_load(source if not isinstance(source, str) else io.StringIO(source))
    entries = {}
    for prompt, names in (doc.get("prompts") or {}).items():
        entries[normalize_prompt(str(prompt))] = volume.ids_for_names(names)
    synonyms = {}
    for alias, target in (doc.get("synonyms") or {}).items():
        target = normalize_prompt(str(target))
        if target not in entries:
            raise InvalidSpecError(f"synonym {alias!r} points at unknown prompt {target!r}")
        synonyms[normalize_prompt(str(alias))] = target
    return PromptVocabulary(entries=entries, synonyms=synonyms)


def default_torso_spec() -> PhantomSpec:
    with resources.files("carmtwin.data").joinpath("torso_phantom.yaml").open("r") as f:
        return load_phantom_spec(f)


def default_torso_phantom() -> LabeledVolume:
    return build_synthetic_phantom(default_torso_spec())


def default_vocabulary(volume: LabeledVolume) -> PromptVocabulary:
    with resources.files("carmtwin.data").joinpath("vocabulary.yaml").open("r") as f:
        return load_vocabulary(f, volume)


def save_volume(v: LabeledVolume, path) -> None:
    """Write the binary phantom format: text header + raw x-fastest grid."""
    grid = v.labels
    dtype = "uint8" if grid.max() < 256 else "uint16"
    header = [
        f"{_FORMAT_MAGIC} {_FORMAT_VERSION}",
        f"name: {v.name}",
        "dims: " + " ".join(str(int(d)) for d in v.dims),
        "spacing: " + " ".join(repr(float(s)) for s in v.spacing_mm),
        "origin: " + " ".join(repr(float(o)) for o in v.origin_mm),
        f"dtype: {dtype}",
        f"labels: {len(v.label_names)}",
    ]
    for lid in sorted(v.label_names):
        header.append(f"{lid} {v.attenuation_table[lid]!r} {v.label_names[lid]}")
    header.append("data:")
    raw = grid.astype("<" + ("u1" if dtype == "uint8" else "u2")).flatten(order="F").tobytes()
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("utf-8"))
        f.write(raw)


def load_volume(path) -> LabeledVolume:
    with open(path, "rb") as f:
        blob = f.read()
    # the terminator is the first header line reading exactly "data:"
    head_end = blob.index(b"\ndata:\n") + len(b"\ndata:\n")
    lines = blob[:head_end].decode("utf-8").splitlines()
    if not lines[0].startswith(_FORMAT_MAGIC):
        raise InvalidSpecError(f"not a phantom file: bad magic {lines[0]!r}")
    fields = {}
    label_lines = []
    for ln in lines[1:]:
        if ln == "data:":
            break
        key, _, rest = ln.partition(": ")
        if key in ("name", "dims", "spacing", "origin", "dtype", "labels"):
            fields[key] = rest
        else:
            label_lines.append(ln)
    dims = np.array([int(x) for x in fields["dims"].split()])
    spacing = np.array([float(x) for x in fields["spacing"].split()])
    origin = np.array([float(x) for x in fields["origin"].split()])
    names, atten = {}, {}
    for ln in label_lines:
        sid, smu, name = ln.split(" ", 2)
        names[int(sid)] = name
        atten[int(sid)] = float(smu)
    if len(names) != int(fields["labels"]):
        raise InvalidSpecError("label table length mismatch")
    np_dtype = "<u1" if fields["dtype"] == "uint8" else "<u2"
    flat = np.frombuffer(blob[head_end:], dtype=np_dtype)
    if flat.size != int(np.prod(dims)):
        raise InvalidSpecError("label grid size mismatch")
    grid = flat.reshape(tuple(dims), order="F").astype(np.uint16)
    return LabeledVolume(
        dims=dims, spacing_mm=spacing, origin_mm=origin, labels=grid,
        attenuation_table=atten, label_names=names, name=fields.get("name", "volume"),
    )
