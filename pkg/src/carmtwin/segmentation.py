"""Promptable per-pixel segmentation scores.

Two providers implement the same surface: a pose-aware oracle that projects
ground truth from the phantom and corrupts it in configurable ways, and an
HTTP client for plugging in a real segmentation model. Scores are
post-sigmoid probabilities in [0, 1], matching the 0.5 thresholds used by
the reconstruction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import requests
from scipy import ndimage

from .errors import (
    EmptyStructureError,
    InvalidParameterError,
    SegmentationProtocolError,
    SegmentationUnavailableError,
    SegmentationValidationError,
)
from .phantom import LabeledVolume, PromptVocabulary, normalize_prompt
from .xray import XRayImage, encode_pgm, encode_sidecar, project_gt_mask

REQUEST_MAGIC = b"carmtwin-segment-request 1"


@dataclass(frozen=True)
class SegmentationHeatmap:
    scores: np.ndarray  # (H, W) in [0, 1]
    prompt: str
    image_id: str
    model_tag: str = "oracle"

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise InvalidParameterError("heatmap must be a 2D grid")
        if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
            raise SegmentationValidationError("scores outside [0, 1]")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    @property
    def shape(self):
        return self.scores.shape


@dataclass(frozen=True)
class CorruptionConfig:
    """Stylized failure modes: blur, over/under-segmentation, whole-mask
    confusion with a different structure."""

    blur_sigma_px: float = 0.0
    dilate_erode_px: int = 0
    dropout_prob: float = 0.0
    confusion_map: dict[str, str] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.blur_sigma_px < 0:
            raise InvalidParameterError("blur_sigma_px must be >= 0")
        if not (0.0 <= self.dropout_prob <= 1.0):
            raise InvalidParameterError("dropout_prob must be in [0, 1]")

    @classmethod
    def identity(cls, seed: int = 0) -> "CorruptionConfig":
        return cls(seed=seed)

    @classmethod
    def stylized(cls, seed: int = 0) -> "CorruptionConfig":
        # default flavor used by demos; configuration, not a claim
        return cls(blur_sigma_px=2.0, dilate_erode_px=-1, dropout_prob=0.05, seed=seed)


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx * xx + yy * yy <= r * r


def _rng_for(cfg_seed: int, image_id: str, prompt: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{cfg_seed}|{image_id}|{prompt}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def segment_oracle(
    v: LabeledVolume,
    voc: PromptVocabulary,
    img: XRayImage,
    prompt: str,
    cfg: CorruptionConfig = CorruptionConfig(),
    _mask_provider=None,
) -> SegmentationHeatmap:
    """Ground-truth projection of the prompt, then the configured corruption.

    Unknown prompts yield an all-zero heatmap. Deterministic given
    (cfg.seed, image id, prompt).
    """
    key = normalize_prompt(prompt)
    effective = cfg.confusion_map.get(key, key)
    canonical = voc.canonical(effective)
    h, w = int(img.projection.image_size_px[1]), int(img.projection.image_size_px[0])
    if canonical is None:
        return SegmentationHeatmap(np.zeros((h, w)), prompt=prompt, image_id=img.id)

    if cfg.dropout_prob > 0:
        rng = _rng_for(cfg.seed, img.id, key)
        if rng.random() < cfg.dropout_prob:
            others = [p for p in voc.prompts() if p != canonical]
            if others:
                canonical = others[int(rng.integers(len(others)))]

    try:
        if _mask_provider is not None:
            mask = _mask_provider(canonical)
        else:
            mask = project_gt_mask(v, voc.entries[canonical], img.projection)
    except EmptyStructureError:
        return SegmentationHeatmap(np.zeros((h, w)), prompt=prompt, image_id=img.id)

    n = int(cfg.dilate_erode_px)
    if n > 0:
        mask = ndimage.binary_dilation(mask, structure=_disk(n))
    elif n < 0:
        mask = ndimage.binary_erosion(mask, structure=_disk(-n))

    scores = mask.astype(np.float64)
    if cfg.blur_sigma_px > 0:
        scores = ndimage.gaussian_filter(scores, sigma=cfg.blur_sigma_px)
        scores = np.clip(scores, 0.0, 1.0)
    return SegmentationHeatmap(scores, prompt=prompt, image_id=img.id)


class OracleSegmenter:
    """Callable provider bound to one phantom, vocabulary and corruption.

    Ground-truth projections are cached per (image id, structure), which is
    safe because volume and poses are immutable.
    """

    def __init__(self, volume: LabeledVolume, vocabulary: PromptVocabulary,
                 cfg: CorruptionConfig = CorruptionConfig(), mask_cache=None):
        self.volume = volume
        self.vocabulary = vocabulary
        self.cfg = cfg
        self._mask_cache: dict[tuple[str, str], np.ndarray] = (
            mask_cache if mask_cache is not None else {}
        )

    def segment(self, img: XRayImage, prompt: str) -> SegmentationHeatmap:
        def provider(canonical: str) -> np.ndarray:
            key = (img.id, canonical)
            if key not in self._mask_cache:
                self._mask_cache[key] = project_gt_mask(
                    self.volume, self.vocabulary.entries[canonical], img.projection
                )
            return self._mask_cache[key]

        return segment_oracle(self.volume, self.vocabulary, img, prompt, self.cfg,
                              _mask_provider=provider)


# ---------------------------------------------------------------------------
# wire codec for the external-model contract
# ---------------------------------------------------------------------------

def build_segment_request(img: XRayImage, prompt: str) -> bytes:
    """Frame the interchange pair + prompt for the external service.

    Layout: magic line, "prompt:" line, byte counts, blank line, then the
    sidecar bytes followed by the PGM bytes.
    """
    if "\n" in prompt:
        raise InvalidParameterError("prompt may not contain newlines")
    pgm_bytes = encode_pgm(img)
    sidecar_bytes = encode_sidecar(img).encode("utf-8")
    head = (
        REQUEST_MAGIC
        + b"\nprompt: " + prompt.encode("utf-8")
        + b"\nsidecar_bytes: " + str(len(sidecar_bytes)).encode()
        + b"\nimage_bytes: " + str(len(pgm_bytes)).encode()
        + b"\n\n"
    )
    return head + sidecar_bytes + pgm_bytes


def parse_segment_request(blob: bytes):
    """Inverse of build_segment_request: (pixels, sidecar_fields, prompt).

    Shipped so a real model wrapper can parse requests with zero guesswork.
    """
    from .xray import decode_pgm, parse_sidecar

    head_end = blob.find(b"\n\n")
    if head_end < 0 or not blob.startswith(REQUEST_MAGIC):
        raise SegmentationProtocolError("malformed segmentation request")
    fields = {}
    for ln in blob[:head_end].decode("utf-8").splitlines()[1:]:
        key, _, rest = ln.partition(": ")
        fields[key] = rest
    body = blob[head_end + 2:]
    ns = int(fields["sidecar_bytes"])
    ni = int(fields["image_bytes"])
    sidecar = parse_sidecar(body[:ns].decode("utf-8"))
    pixels = decode_pgm(body[ns:ns + ni])
    return pixels, sidecar, fields.get("prompt", "")


def encode_heatmap_response(scores: np.ndarray) -> bytes:
    """Text header "<H> <W>\\n" + float32 little-endian row-major grid."""
    scores = np.asarray(scores, dtype="<f4")
    h, w = scores.shape
    return f"{h} {w}\n".encode("ascii") + scores.tobytes()


def decode_heatmap_response(blob: bytes) -> np.ndarray:
    nl = blob.find(b"\n")
    if nl < 0:
        raise SegmentationProtocolError("missing response header")
    try:
        h, w = (int(x) for x in blob[:nl].split())
    except ValueError as e:
        raise SegmentationProtocolError(f"bad response header: {e}") from e
    body = blob[nl + 1:]
    if len(body) != h * w * 4:
        raise SegmentationProtocolError(
            f"expected {h * w * 4} payload bytes for {h}x{w}, got {len(body)}"
        )
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


def segment_external(
    endpoint: str,
    img: XRayImage,
    prompt: str,
    timeout_s: float = 30.0,
) -> SegmentationHeatmap:
    """Request a heatmap from an external model service and validate it."""
    payload = build_segment_request(img, prompt)
    try:
        resp = requests.post(
            endpoint,
            data=payload,
            headers={"Content-Type": "application/octet-stream"},
            timeout=timeout_s,
        )
    except requests.Timeout as e:
        raise SegmentationUnavailableError(f"segmentation service timed out: {e}") from e
    except requests.RequestException as e:
        raise SegmentationUnavailableError(f"segmentation service unreachable: {e}") from e
    if resp.status_code != 200:
        raise SegmentationProtocolError(f"service returned HTTP {resp.status_code}")
    scores = decode_heatmap_response(resp.content)
    if scores.shape != (img.height, img.width):
        raise SegmentationProtocolError(
            f"score grid {scores.shape} does not match image ({img.height}, {img.width})"
        )
    if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
        raise SegmentationValidationError("service returned scores outside [0, 1]")
    return SegmentationHeatmap(scores, prompt=prompt, image_id=img.id, model_tag="external")


class ExternalSegmenter:
    def __init__(self, endpoint: str, timeout_s: float = 30.0):
        self.endpoint = endpoint
        self.timeout_s = timeout_s

    def segment(self, img: XRayImage, prompt: str) -> SegmentationHeatmap:
        return segment_external(self.endpoint, img, prompt, self.timeout_s)
