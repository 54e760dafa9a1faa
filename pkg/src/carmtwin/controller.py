"""Session state machine: executes actions against the simulated C-arm,
gates motion (and by default radiation) behind confirmation, maintains the
digital twin, and persists collimation across acquisitions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    EmptyReconstructionError,
    NoDetectionError,
)
from .geometry import (
    DEFAULT_DETECTOR_MM,
    DEFAULT_PIXEL_PITCH_MM,
    DEFAULT_SDD_MM,
    DEFAULT_SID_MM,
    CArmState,
    IntrinsicMatrix,
    make_intrinsics,
    projection_from_carm,
)
from .phantom import LabeledVolume, PromptVocabulary, resolve_prompt
from .protocol import (
    Action,
    ActionKind,
    InterpreterContext,
    interpret,
    serialize_action,
)
from .segmentation import SegmentationHeatmap
from .twin import (
    TwinConfig,
    TwinState,
    reconstruct,
    single_image_fallback,
    summarize,
    update_twin,
)
from .xray import CollimationBox, render_drr

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AxisLimits:
    """Reachable ranges; angles in degrees, translations in mm from origin."""

    beta_deg: tuple[float, float] = (-90.0, 90.0)
    isocenter_mm: float = 300.0

    def violation(self, state: CArmState) -> str | None:
        if not (self.beta_deg[0] <= state.beta <= self.beta_deg[1]):
            return f"tilt {state.beta:.1f} deg outside {self.beta_deg}"
        over = np.abs(state.isocenter) > self.isocenter_mm
        if np.any(over):
            axis = "xyz"[int(np.argmax(over))]
            return f"isocenter {axis} beyond +-{self.isocenter_mm} mm"
        return None

    def clamp(self, state: CArmState) -> CArmState:
        iso = np.clip(state.isocenter, -self.isocenter_mm, self.isocenter_mm)
        beta = float(np.clip(state.beta, *self.beta_deg))
        return CArmState(
            alpha=state.alpha, beta=beta, roll=state.roll, isocenter=iso,
            source_isocenter_dist=state.source_isocenter_dist,
            source_detector_dist=state.source_detector_dist,
        )


@dataclass(frozen=True)
class SessionConfig:
    detector_mm: float = DEFAULT_DETECTOR_MM
    pixel_pitch_mm: float = DEFAULT_PIXEL_PITCH_MM
    source_isocenter_dist: float = DEFAULT_SID_MM
    source_detector_dist: float = DEFAULT_SDD_MM
    radiation_gating: bool = True
    collimation_margin_px: float = 0.0
    twin: TwinConfig = field(default_factory=TwinConfig)
    limits: AxisLimits = field(default_factory=AxisLimits)

    def intrinsics(self) -> IntrinsicMatrix:
        return make_intrinsics(
            self.detector_mm, self.pixel_pitch_mm, self.source_detector_dist
        )


@dataclass(frozen=True)
class PendingMotion:
    target: CArmState
    reason: str
    requires_confirmation: bool = True
    acquire: bool = False  # shoot staged behind the radiation gate


@dataclass
class ExecutionReport:
    action: Action
    ok: bool
    message: str
    prompt_resolved: bool | None = None  # None for non-prompt actions
    image_id: str | None = None
    heatmap: SegmentationHeatmap | None = None
    overlay: np.ndarray | None = None  # thresholded mask for display
    staged: PendingMotion | None = None
    collimation: CollimationBox | None = None
    twin_summary: dict | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def succeeded(self) -> bool:
        """End-to-end success: completed without error, and prompt-bearing
        actions resolved their prompt in the vocabulary."""
        if not self.ok:
            return False
        if self.prompt_resolved is False:
            return False
        return True


@dataclass(frozen=True)
class SessionState:
    volume: LabeledVolume
    vocabulary: PromptVocabulary
    segmenter: object  # .segment(img, prompt) -> SegmentationHeatmap
    config: SessionConfig = field(default_factory=SessionConfig)
    carm: CArmState = None  # type: ignore[assignment]
    twin: TwinState = None  # type: ignore[assignment]
    active_collimation: CollimationBox | None = None
    pending: PendingMotion | None = None
    tick: int = 0

    def __post_init__(self):
        if self.carm is None:
            object.__setattr__(self, "carm", CArmState(
                source_isocenter_dist=self.config.source_isocenter_dist,
                source_detector_dist=self.config.source_detector_dist,
            ))
        if self.twin is None:
            object.__setattr__(self, "twin", TwinState(config=self.config.twin))

    @property
    def phantom_ref(self) -> str:
        return self.volume.name

    def current_image(self):
        return self.twin.history.latest()


def _orientation_for(view_name: str, carm: CArmState) -> tuple[float, float, float]:
    if view_name == "ap":
        return 0.0, 0.0, 0.0
    if view_name == "lateral":
        return 90.0, 0.0, 0.0
    return carm.alpha, carm.beta, carm.roll


_MOVE_AXES = {"roll": "roll", "tilt": "beta", "orbit": "alpha", "x": "x", "y": "y", "z": "z"}


def _acquire(s: SessionState) -> tuple[SessionState, str]:
    tick = s.tick + 1
    P = projection_from_carm(s.carm, s.config.intrinsics(), timestamp=tick)
    image_id = f"img-{tick:04d}"
    img = render_drr(
        s.volume, P,
        collimation=s.active_collimation,
        image_id=image_id,
        acquired_at=tick,
    )
    twin = update_twin(s.twin, img)
    return replace(s, twin=twin, tick=tick), image_id


def _localize(s: SessionState, prompt: str):
    """Reconstruct the prompt from the current history.

    Returns (kind, payload): ("recon", result) with n >= 2 views,
    ("fallback", FallbackResult) from a single view, or ("none", reason).
    """
    current = s.current_image()
    if current is None:
        return "none", "no image acquired yet"
    sel = s.twin.select(current.id)
    if sel.n >= 2:
        heatmaps = [s.segmenter.segment(img, prompt) for img in sel.images]
        cfg = s.config.twin
        try:
            result = reconstruct(
                sel, heatmaps,
                grid_spacing_mm=cfg.grid_spacing_mm,
                membership_thresh=cfg.membership_thresh,
                mean_thresh=cfg.mean_thresh,
                grid_radius_mm=cfg.grid_radius_mm,
                isocenter=s.carm.isocenter,
                mean_over_membership_only=cfg.mean_over_membership_only,
                trim_percentile=cfg.trim_percentile,
            )
        except EmptyReconstructionError as e:
            return "none", f"reconstruction empty: {e} (mask areas {e.per_view_mask_areas})"
        return "recon", result
    heatmap = s.segmenter.segment(current, prompt)
    try:
        fb = single_image_fallback(current, heatmap, sid_mm=s.carm.source_isocenter_dist)
    except NoDetectionError as e:
        return "none", str(e)
    return "fallback", fb


def execute(a: Action, s: SessionState) -> tuple[SessionState, ExecutionReport]:
    """Apply one action; motions (and gated acquisitions) only stage a
    PendingMotion that confirm() realizes."""
    if s.pending is not None:
        return s, ExecutionReport(
            action=a, ok=False,
            message="a pending motion must be confirmed or cancelled first",
        )

    if a.kind == ActionKind.REPORT_ERROR:
        return s, ExecutionReport(action=a, ok=False, message=a.prompt)

    if a.kind == ActionKind.SHOOT:
        if s.config.radiation_gating:
            staged = PendingMotion(target=s.carm, reason="acquire image", acquire=True)
            return replace(s, pending=staged), ExecutionReport(
                action=a, ok=True, staged=staged,
                message="acquisition staged; confirm to expose",
            )
        s2, image_id = _acquire(s)
        return s2, ExecutionReport(action=a, ok=True, image_id=image_id,
                                   message=f"acquired {image_id}")

    if a.kind == ActionKind.CLEAR_COLLIMATION:
        return replace(s, active_collimation=None, tick=s.tick + 1), ExecutionReport(
            action=a, ok=True, message="collimation cleared"
        )

    if a.kind == ActionKind.HIGHLIGHT:
        resolved = bool(resolve_prompt(s.vocabulary, a.prompt))
        current = s.current_image()
        if current is None:
            return s, ExecutionReport(action=a, ok=False, prompt_resolved=resolved,
                                      message="no image to highlight on")
        heatmap = s.segmenter.segment(current, a.prompt)
        overlay = heatmap.scores >= 0.5
        return s, ExecutionReport(
            action=a, ok=True, prompt_resolved=resolved,
            heatmap=heatmap, overlay=overlay, image_id=current.id,
            message=f"highlighted {a.prompt!r} on {current.id}"
            + ("" if resolved else " (prompt unknown to the vocabulary)"),
        )

    if a.kind == ActionKind.COLLIMATE:
        resolved = bool(resolve_prompt(s.vocabulary, a.prompt))
        kind, payload = _localize(s, a.prompt)
        if kind == "recon":
            box = CollimationBox(payload.bbox, source_prompt=a.prompt, created_at=s.tick)
            twin = s.twin.remember(a.prompt, payload)
            s2 = replace(s, active_collimation=box, twin=twin, tick=s.tick + 1)
            return s2, ExecutionReport(
                action=a, ok=True, prompt_resolved=resolved,
                collimation=box, twin_summary=summarize(payload),
                diagnostics={"views_used": list(payload.views_used.ids),
                             "n_points": payload.n_points},
                message=f"collimated to {a.prompt!r} from {payload.views_used.n} views",
            )
        if kind == "fallback":
            target = CArmState(
                alpha=s.carm.alpha, beta=s.carm.beta, roll=s.carm.roll,
                isocenter=s.carm.isocenter + payload.translation_mm,
                source_isocenter_dist=s.carm.source_isocenter_dist,
                source_detector_dist=s.carm.source_detector_dist,
            )
            target = s.config.limits.clamp(target)
            staged = PendingMotion(target=target, reason=f"single-view recenter on {a.prompt!r}")
            return replace(s, pending=staged), ExecutionReport(
                action=a, ok=True, prompt_resolved=resolved, staged=staged,
                message="only one usable view: staged recentering instead of collimation",
            )
        return s, ExecutionReport(action=a, ok=False, prompt_resolved=resolved,
                                  message=str(payload))

    if a.kind == ActionKind.VIEW:
        alpha, beta, roll = _orientation_for(a.view_name, s.carm)
        isocenter = s.carm.isocenter
        resolved: bool | None = None
        note = ""
        if a.prompt != "current":
            resolved = bool(resolve_prompt(s.vocabulary, a.prompt))
            kind, payload = _localize(s, a.prompt)
            if kind == "recon":
                isocenter = payload.centroid
                note = f"; centered on reconstructed {a.prompt!r}"
            elif kind == "fallback":
                isocenter = s.carm.isocenter + payload.translation_mm
                note = f"; centered via single-view fallback on {a.prompt!r}"
            else:
                note = f"; no localization available ({payload}), isocenter unchanged"
        target = CArmState(
            alpha=alpha, beta=beta, roll=roll, isocenter=isocenter,
            source_isocenter_dist=s.carm.source_isocenter_dist,
            source_detector_dist=s.carm.source_detector_dist,
        )
        clamped = s.config.limits.clamp(target)
        if s.config.limits.violation(target):
            note += "; target clamped to axis limits"
        staged = PendingMotion(target=clamped, reason=f"view {a.view_name}")
        return replace(s, pending=staged), ExecutionReport(
            action=a, ok=True, prompt_resolved=resolved, staged=staged,
            message=f"staged {a.view_name} view{note}",
        )

    if a.kind == ActionKind.MOVE:
        deltas = {_MOVE_AXES[axis]: v for axis, v in a.axis_deltas.items()}
        target = s.carm.with_deltas(**deltas)
        violation = s.config.limits.violation(target)
        if violation:
            return s, ExecutionReport(action=a, ok=False,
                                      message=f"motion rejected: {violation}")
        staged = PendingMotion(target=target, reason=serialize_action(a))
        return replace(s, pending=staged), ExecutionReport(
            action=a, ok=True, staged=staged,
            message="motion staged; confirm to move",
        )

    return s, ExecutionReport(action=a, ok=False, message=f"unhandled action {a.kind}")


def confirm(s: SessionState) -> tuple[SessionState, ExecutionReport]:
    marker = Action(ActionKind.REPORT_ERROR, prompt="confirm")
    if s.pending is None:
        return s, ExecutionReport(action=marker, ok=True, message="nothing pending")
    pending = s.pending
    s2 = replace(s, carm=pending.target, pending=None, tick=s.tick + 1)
    if pending.acquire:
        s2, image_id = _acquire(s2)
        return s2, ExecutionReport(action=marker, ok=True, image_id=image_id,
                                   message=f"confirmed: acquired {image_id}")
    return s2, ExecutionReport(action=marker, ok=True,
                               message=f"confirmed: {pending.reason}")


def cancel(s: SessionState) -> tuple[SessionState, ExecutionReport]:
    marker = Action(ActionKind.REPORT_ERROR, prompt="cancel")
    if s.pending is None:
        return s, ExecutionReport(action=marker, ok=True, message="nothing pending")
    reason = s.pending.reason
    return replace(s, pending=None, tick=s.tick + 1), ExecutionReport(
        action=marker, ok=True, message=f"cancelled: {reason}"
    )


@dataclass
class TranscriptEntry:
    index: int
    utterance: str
    action: str
    ok: bool
    succeeded: bool
    message: str
    image_id: str | None = None
    twin_summary: dict | None = None

    def as_dict(self) -> dict:
        return {
            "index": self.index,
            "utterance": self.utterance,
            "action": self.action,
            "ok": self.ok,
            "succeeded": self.succeeded,
            "message": self.message,
            "image_id": self.image_id,
            "twin_summary": self.twin_summary,
        }


@dataclass
class SessionTranscript:
    entries: list[TranscriptEntry]
    final_state: SessionState

    @property
    def n_success(self) -> int:
        return sum(e.succeeded for e in self.entries)

    def as_text(self) -> str:
        lines = []
        for e in self.entries:
            status = "ok" if e.succeeded else "FAIL"
            lines.append(f"{e.index:3d} [{status:4s}] {e.utterance!r} -> {e.action} | {e.message}")
        lines.append(f"success: {self.n_success}/{len(self.entries)}")
        return "\n".join(lines) + "\n"


def run_session_script(
    script,
    s: SessionState,
    auto_confirm: bool = True,
    adapter=None,
    ctx: InterpreterContext | None = None,
) -> SessionTranscript:
    """Interpret and execute utterances in order; failures are recorded,
    never raised. With auto_confirm, staged motions are confirmed inline."""
    from .protocol import RuleBasedAdapter

    adapter = adapter or RuleBasedAdapter()
    ctx = ctx or InterpreterContext()
    entries = []
    for i, utterance in enumerate(script):
        action = interpret(utterance, ctx, adapter)
        s, report = execute(action, s)
        message = report.message
        image_id = report.image_id
        if auto_confirm and s.pending is not None:
            s, confirm_report = confirm(s)
            message = f"{message}; {confirm_report.message}"
            image_id = image_id or confirm_report.image_id
        entries.append(TranscriptEntry(
            index=i,
            utterance=utterance,
            action=serialize_action(action),
            ok=report.ok,
            succeeded=report.succeeded,
            message=message,
            image_id=image_id,
            twin_summary=report.twin_summary,
        ))
    return SessionTranscript(entries=entries, final_state=s)


def load_script(path) -> list[str]:
    """Script file: one utterance per line; blank lines and # comments skipped."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                out.append(line)
    return out
