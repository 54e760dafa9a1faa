"""HTTP+JSON API over controller sessions, consumed by the browser console.

One logical command queue per session: utterance/confirm/cancel execute
under the session lock, reads return snapshot state.
"""

from __future__ import annotations

import base64
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import PlainTextResponse, Response
from pydantic import BaseModel

from .controller import (
    ExecutionReport,
    SessionConfig,
    SessionState,
    cancel,
    confirm,
    execute,
)
from .errors import CarmTwinError
from .phantom import (
    build_synthetic_phantom,
    default_torso_phantom,
    default_vocabulary,
    load_phantom_spec,
    load_volume,
)
from .protocol import (
    InterpreterContext,
    LLMClientAdapter,
    RuleBasedAdapter,
    interpret,
    serialize_action,
)
from .segmentation import CorruptionConfig, OracleSegmenter
from .twin import TwinConfig, summarize
from .xray import encode_pgm, encode_sidecar


class CorruptionParams(BaseModel):
    blur_sigma_px: float = 0.0
    dilate_erode_px: int = 0
    dropout_prob: float = 0.0
    seed: int = 0


class CreateSession(BaseModel):
    phantom: str = "default"
    corruption: CorruptionParams = CorruptionParams()
    adapter: str = "fallback"  # "fallback" or an LLM service URL
    pixel_pitch_mm: float | None = None
    detector_mm: float | None = None
    radiation_gating: bool = True
    grid_spacing_mm: float = 3.0
    grid_radius_mm: float = 256.0


class Utterance(BaseModel):
    text: str


@dataclass
class SessionRuntime:
    session_id: str
    state: SessionState
    ctx: InterpreterContext = field(default_factory=InterpreterContext)
    adapter: object = field(default_factory=RuleBasedAdapter)
    lock: threading.Lock = field(default_factory=threading.Lock)


def load_phantom(spec: str):
    if spec == "default":
        return default_torso_phantom()
    if str(spec).endswith((".yaml", ".yml")):
        return build_synthetic_phantom(load_phantom_spec(spec))
    return load_volume(spec)


def _carm_json(carm) -> dict:
    return {
        "alpha": carm.alpha,
        "beta": carm.beta,
        "roll": carm.roll,
        "isocenter": [float(x) for x in carm.isocenter],
        "source_isocenter_dist": carm.source_isocenter_dist,
        "source_detector_dist": carm.source_detector_dist,
    }


def _pending_json(pending) -> dict | None:
    if pending is None:
        return None
    return {
        "reason": pending.reason,
        "acquire": pending.acquire,
        "target": _carm_json(pending.target),
    }


def _collimation_json(box) -> dict | None:
    if box is None:
        return None
    return {
        "prompt": box.source_prompt,
        "lo_mm": [float(x) for x in box.bounds.lo],
        "hi_mm": [float(x) for x in box.bounds.hi],
    }


def _report_json(report: ExecutionReport, state: SessionState) -> dict:
    return {
        "action": serialize_action(report.action),
        "ok": report.ok,
        "succeeded": report.succeeded,
        "message": report.message,
        "prompt_resolved": report.prompt_resolved,
        "image_id": report.image_id,
        "staged": _pending_json(report.staged),
        "collimation": _collimation_json(report.collimation),
        "twin_summary": report.twin_summary,
        "overlay_prompt": report.heatmap.prompt if report.heatmap is not None else None,
        "diagnostics": report.diagnostics,
        "state": _state_json(state),
    }


def _state_json(s: SessionState) -> dict:
    current = s.current_image()
    return {
        "phantom": s.phantom_ref,
        "tick": s.tick,
        "carm": _carm_json(s.carm),
        "pending": _pending_json(s.pending),
        "collimation": _collimation_json(s.active_collimation),
        "image_ids": [img.id for img in s.twin.history.entries],
        "current_image_id": current.id if current else None,
    }


def create_app(
    sessions: dict[str, SessionRuntime] | None = None,
    defaults: dict | None = None,
) -> FastAPI:
    """defaults: server-side CreateSession field defaults (CLI flags);
    fields set explicitly in a request win over them."""
    app = FastAPI(title="carmtwin controller")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    registry: dict[str, SessionRuntime] = sessions if sessions is not None else {}
    app.state.sessions = registry
    server_defaults = dict(defaults or {})

    def get_session(sid: str) -> SessionRuntime:
        if sid not in registry:
            raise HTTPException(status_code=404, detail=f"no session {sid}")
        return registry[sid]

    @app.post("/sessions")
    def create_session(req: CreateSession):
        merged = dict(server_defaults)
        merged.update(req.model_dump(exclude_unset=True))
        req = CreateSession(**merged)
        try:
            volume = load_phantom(req.phantom)
        except (OSError, CarmTwinError) as e:
            raise HTTPException(status_code=400, detail=f"cannot load phantom: {e}")
        vocabulary = default_vocabulary(volume)
        cfg = CorruptionConfig(
            blur_sigma_px=req.corruption.blur_sigma_px,
            dilate_erode_px=req.corruption.dilate_erode_px,
            dropout_prob=req.corruption.dropout_prob,
            seed=req.corruption.seed,
        )
        config = SessionConfig(
            radiation_gating=req.radiation_gating,
            twin=TwinConfig(grid_spacing_mm=req.grid_spacing_mm,
                            grid_radius_mm=req.grid_radius_mm),
            **({"pixel_pitch_mm": req.pixel_pitch_mm} if req.pixel_pitch_mm else {}),
            **({"detector_mm": req.detector_mm} if req.detector_mm else {}),
        )
        state = SessionState(
            volume=volume,
            vocabulary=vocabulary,
            segmenter=OracleSegmenter(volume, vocabulary, cfg),
            config=config,
        )
        adapter = (RuleBasedAdapter() if req.adapter == "fallback"
                   else LLMClientAdapter(req.adapter))
        sid = uuid.uuid4().hex[:12]
        registry[sid] = SessionRuntime(session_id=sid, state=state, adapter=adapter)
        return {
            "session_id": sid,
            "phantom": volume.name,
            "prompts": sorted(vocabulary.entries),
            "state": _state_json(state),
        }

    @app.get("/sessions/{sid}/state")
    def get_state(sid: str):
        return _state_json(get_session(sid).state)

    @app.post("/sessions/{sid}/utterance")
    def post_utterance(sid: str, req: Utterance):
        rt = get_session(sid)
        with rt.lock:
            action = interpret(req.text, rt.ctx, rt.adapter)
            rt.state, report = execute(action, rt.state)
            payload = _report_json(report, rt.state)
        payload["utterance"] = req.text
        return payload

    @app.post("/sessions/{sid}/confirm")
    def post_confirm(sid: str):
        rt = get_session(sid)
        with rt.lock:
            rt.state, report = confirm(rt.state)
            return _report_json(report, rt.state)

    @app.post("/sessions/{sid}/cancel")
    def post_cancel(sid: str):
        rt = get_session(sid)
        with rt.lock:
            rt.state, report = cancel(rt.state)
            return _report_json(report, rt.state)

    def _find_image(state: SessionState, image_id: str):
        if image_id == "current":
            img = state.current_image()
        else:
            try:
                img = state.twin.history.get(image_id)
            except KeyError:
                img = None
        if img is None:
            raise HTTPException(status_code=404, detail="no such image")
        return img

    @app.get("/sessions/{sid}/image/{image_id}")
    def get_image(sid: str, image_id: str):
        state = get_session(sid).state
        if image_id.endswith(".pgm"):
            img = _find_image(state, image_id[:-4])
            return Response(content=encode_pgm(img),
                            media_type="image/x-portable-graymap")
        if image_id.endswith(".sidecar"):
            img = _find_image(state, image_id[:-8])
            return PlainTextResponse(encode_sidecar(img))
        img = _find_image(state, image_id)
        return {
            "id": img.id,
            "width": img.width,
            "height": img.height,
            "acquired_at": img.acquired_at,
            "collimation_px": list(img.collimation_px.as_tuple()) if img.collimation_px else None,
            "pgm_base64": base64.b64encode(encode_pgm(img)).decode("ascii"),
            "sidecar": encode_sidecar(img),
        }

    @app.get("/sessions/{sid}/overlay")
    def get_overlay(sid: str, prompt: str):
        rt = get_session(sid)
        state = rt.state
        img = state.current_image()
        if img is None:
            raise HTTPException(status_code=404, detail="no image acquired yet")
        heatmap = state.segmenter.segment(img, prompt)
        scores = np.asarray(heatmap.scores, dtype="<f4")
        return {
            "prompt": prompt,
            "image_id": img.id,
            "width": img.width,
            "height": img.height,
            "threshold": 0.5,
            "model_tag": heatmap.model_tag,
            "scores_base64": base64.b64encode(scores.tobytes()).decode("ascii"),
        }

    @app.get("/sessions/{sid}/twin")
    def get_twin(sid: str, prompt: str):
        from .controller import _localize

        rt = get_session(sid)
        state = rt.state
        cached = state.twin.cached(prompt)
        if cached is not None:
            return {"available": True, "cached": True, "summary": summarize(cached)}
        kind, payload = _localize(state, prompt)
        if kind == "recon":
            return {"available": True, "cached": False, "summary": summarize(payload)}
        if kind == "fallback":
            return {
                "available": False,
                "reason": "only one usable view",
                "fallback": {
                    "centroid_px": [float(x) for x in payload.centroid_px],
                    "translation_mm": [float(x) for x in payload.translation_mm],
                },
            }
        return {"available": False, "reason": str(payload)}

    @app.get("/sessions/{sid}/pointcloud")
    def get_pointcloud(sid: str, prompt: str):
        from .twin import export_point_cloud

        state = get_session(sid).state
        cached = state.twin.cached(prompt)
        if cached is None:
            raise HTTPException(status_code=404,
                                detail="no cached reconstruction for this prompt")
        return PlainTextResponse(export_point_cloud(cached))

    @app.get("/sessions/{sid}/transcript")
    def get_transcript(sid: str):
        rt = get_session(sid)
        return {"turns": [
            {"utterance": utt, "action": act} for utt, act in rt.ctx.transcript
        ]}

    return app
