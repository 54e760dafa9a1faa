"""Machine-readable action grammar and the utterance interpreter.

The wire form is a semicolon-delimited record starting with the literal
token "action". Structural fields (the action kind, a view name) tolerate
surrounding whitespace; the prompt field is the raw remainder of the line,
so free-text anatomy descriptions survive untouched.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

import requests

from .errors import ParseError

ANGLE_AXES = ("roll", "tilt", "orbit")
LINEAR_AXES = ("x", "y", "z")
VIEW_NAMES = ("ap", "lateral", "current")


class ActionKind(str, Enum):
    VIEW = "view"
    HIGHLIGHT = "highlight"
    COLLIMATE = "collimate"
    MOVE = "move"
    SHOOT = "shoot"
    CLEAR_COLLIMATION = "clear_collimation"
    REPORT_ERROR = "report_error"


_PROMPT_KINDS = {ActionKind.VIEW, ActionKind.HIGHLIGHT, ActionKind.COLLIMATE,
                 ActionKind.REPORT_ERROR}


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    view_name: str | None = None
    prompt: str | None = None
    axis_deltas: dict[str, float] | None = None

    def __post_init__(self):
        if self.kind == ActionKind.VIEW:
            if self.view_name not in VIEW_NAMES:
                raise ParseError(f"view action needs view_name in {VIEW_NAMES}")
        elif self.view_name is not None:
            raise ParseError(f"{self.kind.value} action does not take a view_name")
        if self.kind in _PROMPT_KINDS:
            if not self.prompt or self.prompt != self.prompt.strip():
                raise ParseError(f"{self.kind.value} action needs a stripped, nonempty prompt")
            if "\n" in self.prompt or "\r" in self.prompt:
                raise ParseError("prompt may not contain line breaks")
        elif self.prompt is not None:
            raise ParseError(f"{self.kind.value} action does not take a prompt")
        if self.kind == ActionKind.MOVE:
            if not self.axis_deltas:
                raise ParseError("move action needs at least one axis delta")
            for axis, value in self.axis_deltas.items():
                if axis not in ANGLE_AXES + LINEAR_AXES:
                    raise ParseError(f"unknown axis {axis!r}")
                if not math.isfinite(value):
                    raise ParseError(f"non-finite delta for axis {axis!r}")
        elif self.axis_deltas is not None:
            raise ParseError(f"{self.kind.value} action does not take axis deltas")

    def __eq__(self, other):
        if not isinstance(other, Action):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.view_name == other.view_name
            and self.prompt == other.prompt
            and self.axis_deltas == other.axis_deltas
        )

    def __hash__(self):
        deltas = tuple(sorted(self.axis_deltas.items())) if self.axis_deltas else None
        return hash((self.kind, self.view_name, self.prompt, deltas))


def view_action(view_name: str, prompt: str = "current") -> Action:
    return Action(ActionKind.VIEW, view_name=view_name, prompt=prompt)


def highlight_action(prompt: str) -> Action:
    return Action(ActionKind.HIGHLIGHT, prompt=prompt)


def collimate_action(prompt: str) -> Action:
    return Action(ActionKind.COLLIMATE, prompt=prompt)


def move_action(**deltas: float) -> Action:
    return Action(ActionKind.MOVE, axis_deltas={k: float(v) for k, v in deltas.items()})


def shoot_action() -> Action:
    return Action(ActionKind.SHOOT)


def clear_collimation_action() -> Action:
    return Action(ActionKind.CLEAR_COLLIMATION)


def report_error_action(reason: str) -> Action:
    return Action(ActionKind.REPORT_ERROR, prompt=reason.strip() or "unspecified error")


_AXIS_SPEC = re.compile(
    r"^\s*([A-Za-z]+)\s*=\s*([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)\s*(deg|mm)\s*$"
)


def _axis_unit(axis: str) -> str:
    return "deg" if axis in ANGLE_AXES else "mm"


def parse_action(s: str) -> Action:
    """Parse one action line; raises ParseError naming token and position."""
    if not isinstance(s, str):
        raise ParseError("action must be a string")
    if len(s) > 4096:
        raise ParseError("action line too long", position=4096)
    if "\n" in s or "\r" in s:
        raise ParseError("action line may not span lines")
    head, sep, rest = s.partition(";")
    if head.strip() != "action":
        raise ParseError(f"expected leading token 'action', got {head.strip()!r}",
                         token=head.strip(), position=0)
    if not sep:
        raise ParseError("missing action kind", position=len(s))
    kind_tok, _, tail = rest.partition(";")
    kind_name = kind_tok.strip().lower()
    kind_pos = len(head) + 1
    try:
        kind = ActionKind(kind_name)
    except ValueError:
        raise ParseError(f"unknown action kind {kind_tok.strip()!r}",
                         token=kind_tok.strip(), position=kind_pos) from None
    tail_pos = kind_pos + len(kind_tok) + 1

    if kind == ActionKind.VIEW:
        if ";" not in rest:
            raise ParseError("view action needs a view_name field", position=len(s))
        name_tok, _, prompt_raw = tail.partition(";")
        name = name_tok.strip().lower()
        if name not in VIEW_NAMES:
            raise ParseError(f"unknown view_name {name_tok.strip()!r}",
                             token=name_tok.strip(), position=tail_pos)
        prompt = prompt_raw.strip()
        return view_action(name, prompt if prompt else "current")

    if kind in (ActionKind.HIGHLIGHT, ActionKind.COLLIMATE):
        prompt = tail.strip()
        if ";" not in rest or not prompt:
            raise ParseError(f"{kind.value} action needs a prompt", position=tail_pos)
        return Action(kind, prompt=prompt)

    if kind == ActionKind.MOVE:
        spec = tail.strip()
        if ";" not in rest or not spec:
            raise ParseError("move action needs axis deltas", position=tail_pos)
        deltas: dict[str, float] = {}
        offset = tail_pos
        for part in spec.split(","):
            m = _AXIS_SPEC.match(part)
            if not m:
                raise ParseError(f"malformed axis spec {part.strip()!r}",
                                 token=part.strip(), position=offset)
            axis, value, unit = m.group(1).lower(), float(m.group(2)), m.group(3)
            if axis not in ANGLE_AXES + LINEAR_AXES:
                raise ParseError(f"unknown axis {axis!r}", token=axis, position=offset)
            if unit != _axis_unit(axis):
                raise ParseError(
                    f"axis {axis!r} takes {_axis_unit(axis)}, not {unit}",
                    token=part.strip(), position=offset,
                )
            if axis in deltas:
                raise ParseError(f"duplicate axis {axis!r}", token=axis, position=offset)
            deltas[axis] = value
            offset += len(part) + 1
        return Action(ActionKind.MOVE, axis_deltas=deltas)

    if kind in (ActionKind.SHOOT, ActionKind.CLEAR_COLLIMATION):
        if ";" in rest and tail.strip():
            raise ParseError(f"{kind.value} action takes no arguments",
                             token=tail.strip(), position=tail_pos)
        return Action(kind)

    # report_error: reason is optional on the wire
    reason = tail.strip() if ";" in rest else ""
    return report_error_action(reason)


def _fmt_number(v: float) -> str:
    if math.isfinite(v) and v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def serialize_action(a: Action) -> str:
    """Canonical wire form; parse_action(serialize_action(a)) == a."""
    if a.kind == ActionKind.VIEW:
        return f"action;view;{a.view_name};{a.prompt}"
    if a.kind in (ActionKind.HIGHLIGHT, ActionKind.COLLIMATE, ActionKind.REPORT_ERROR):
        return f"action;{a.kind.value};{a.prompt}"
    if a.kind == ActionKind.MOVE:
        parts = ",".join(
            f"{axis}={_fmt_number(v)}{_axis_unit(axis)}" for axis, v in a.axis_deltas.items()
        )
        return f"action;move;{parts}"
    return f"action;{a.kind.value}"


@dataclass
class InterpreterContext:
    """Per-session interpretation memory, bounded to the last N turns."""

    last_prompt: str | None = None
    last_view: str | None = None
    transcript: list[tuple[str, str]] = field(default_factory=list)
    max_turns: int = 50

    def record(self, utterance: str, action: Action) -> None:
        self.transcript.append((utterance, serialize_action(action)))
        if len(self.transcript) > self.max_turns:
            del self.transcript[: len(self.transcript) - self.max_turns]
        if action.kind in (ActionKind.HIGHLIGHT, ActionKind.COLLIMATE):
            self.last_prompt = action.prompt
        elif action.kind == ActionKind.VIEW:
            self.last_view = action.view_name
            if action.prompt != "current":
                self.last_prompt = action.prompt


def load_instruction() -> str:
    with resources.files("carmtwin.data").joinpath("llm_instruction.txt").open("r") as f:
        return f.read()


# ---------------------------------------------------------------------------
# language adapters
# ---------------------------------------------------------------------------

_ARTICLES = re.compile(r"^(?:the|a|an|my|our|this|that)\s+", re.IGNORECASE)
_LEAD_FILLER = re.compile(
    r"^(?:me|us|in|on|at|to|of|around|onto|again|please|now)\s+", re.IGNORECASE
)
_ANAPHORA = {"it", "that", "this", "them", "same", "current one"}

_NUMBER = r"([+-]?\d+(?:\.\d+)?)"
_RB_SHOOT = re.compile(r"\b(?:take|grab|get|acquire)\b.*\b(?:shot|x-?rays?|image|picture|fluoro)\b|^\s*shoot\s*!?\.?\s*$", re.IGNORECASE)
_RB_CLEAR = re.compile(r"\b(?:clear|remove|reset|open(?:\s+up)?)\b.*\bcollimat\w*", re.IGNORECASE)
_RB_COLLIMATE = re.compile(r"\b(?:collimate|focus|narrow|crop)\b\s*(?:in|down)?\s*(.*)$", re.IGNORECASE)
_RB_VIEW = re.compile(
    r"\b(ap|anteroposterior|lateral|current)\b[\s-]*(?:view|shot|orientation|angle)?(?:\s+(?:of|on|for|at)\s+(.*))?$",
    re.IGNORECASE,
)
_RB_VIEW_WORD = re.compile(r"\bview\b|\borientation\b", re.IGNORECASE)
_RB_HIGHLIGHT = re.compile(
    r"\b(?:show|highlight|display|visualize|outline|see|where(?:'s| is))\b\s*(.*)$", re.IGNORECASE
)
_RB_ANGLE = re.compile(
    rf"\b(roll|tilt|orbit|rotate)\b[^-+\d]*{_NUMBER}\s*(?:deg(?:ree)?s?)\b", re.IGNORECASE
)
_RB_TRANSLATE = re.compile(
    rf"\b(?:move|shift|translate|go)\b.*?\b(left|right|superior|inferior|anterior|posterior|up|down|headward|footward)\b[^-+\d]*{_NUMBER}\s*(mm|millimeters?|cm|centimeters?)\b",
    re.IGNORECASE,
)

_DIRECTION_AXES = {
    "left": ("x", +1.0), "right": ("x", -1.0),
    "superior": ("y", +1.0), "headward": ("y", +1.0), "up": ("y", +1.0),
    "inferior": ("y", -1.0), "footward": ("y", -1.0), "down": ("y", -1.0),
    "anterior": ("z", +1.0), "posterior": ("z", -1.0),
}


def _clean_prompt(text: str) -> str:
    text = text.strip().strip(".!?,;: ")
    for pattern in (_LEAD_FILLER, _ARTICLES, _LEAD_FILLER, _ARTICLES):
        text = pattern.sub("", text).strip()
    return text.strip(".!?,;: ")


def _last_prompt_from_transcript(transcript) -> str | None:
    for _, action_str in reversed(transcript):
        try:
            action = parse_action(action_str)
        except ParseError:
            continue
        if action.kind in (ActionKind.HIGHLIGHT, ActionKind.COLLIMATE):
            return action.prompt
        if action.kind == ActionKind.VIEW and action.prompt != "current":
            return action.prompt
    return None


class RuleBasedAdapter:
    """Deterministic fallback: verb/noun pattern table, total over all input."""

    name = "fallback"

    def complete(self, instruction: str, transcript, utterance: str) -> str:
        text = utterance.strip()
        if not text:
            return serialize_action(report_error_action("empty utterance"))

        if _RB_CLEAR.search(text):
            return "action;clear_collimation"
        if _RB_SHOOT.search(text):
            return "action;shoot"

        m = _RB_ANGLE.search(text)
        if m:
            axis = m.group(1).lower()
            if axis == "rotate":
                axis = "orbit"
            return serialize_action(move_action(**{axis: float(m.group(2))}))
        m = _RB_TRANSLATE.search(text)
        if m:
            axis, sign = _DIRECTION_AXES[m.group(1).lower()]
            value = float(m.group(2))
            if m.group(3).lower().startswith("c"):
                value *= 10.0
            return serialize_action(move_action(**{axis: sign * value}))

        if _RB_VIEW_WORD.search(text) or re.search(r"^\s*(?:go\s+)?(?:to\s+)?(?:ap|lateral)\b", text, re.IGNORECASE):
            m = _RB_VIEW.search(text)
            if m:
                name = m.group(1).lower()
                if name == "anteroposterior":
                    name = "ap"
                prompt = _clean_prompt(m.group(2) or "")
                prompt = self._resolve_anaphora(prompt, transcript, allow_empty=True)
                return serialize_action(view_action(name, prompt or "current"))

        m = _RB_COLLIMATE.search(text)
        if m:
            prompt = self._resolve_anaphora(_clean_prompt(m.group(1)), transcript)
            if prompt is None:
                return serialize_action(report_error_action(
                    "collimation target missing and no prior prompt to reuse"))
            return serialize_action(collimate_action(prompt))

        m = _RB_HIGHLIGHT.search(text)
        if m:
            prompt = self._resolve_anaphora(_clean_prompt(m.group(1)), transcript)
            if prompt is None:
                return serialize_action(report_error_action(
                    "nothing to highlight and no prior prompt to reuse"))
            return serialize_action(highlight_action(prompt))

        return serialize_action(report_error_action(f"could not interpret {text[:80]!r}"))

    def _resolve_anaphora(self, prompt: str, transcript, allow_empty: bool = False):
        cleaned = prompt.strip().lower()
        if cleaned and cleaned not in _ANAPHORA:
            return prompt
        if allow_empty and not cleaned:
            return ""
        return _last_prompt_from_transcript(transcript)


class RecordedAdapter:
    """Test/replay adapter: scripted responses keyed by utterance or in order."""

    name = "recorded"

    def __init__(self, responses):
        self.by_utterance = responses if isinstance(responses, dict) else None
        self.queue = list(responses) if not isinstance(responses, dict) else []
        self.requests: list[str] = []

    def complete(self, instruction: str, transcript, utterance: str) -> str:
        self.requests.append(utterance)
        if self.by_utterance is not None:
            try:
                return self.by_utterance[utterance]
            except KeyError:
                raise LookupError(f"no recorded response for {utterance!r}") from None
        if not self.queue:
            raise LookupError("recorded responses exhausted")
        return self.queue.pop(0)


class LLMClientAdapter:
    """HTTP client for a language-model service that speaks the protocol.

    Request: JSON {instruction, transcript: [[utterance, action], ...],
    utterance}; response: the bare action line as text.
    """

    name = "llm"

    def __init__(self, endpoint: str, timeout_s: float = 30.0):
        self.endpoint = endpoint
        self.timeout_s = timeout_s

    def complete(self, instruction: str, transcript, utterance: str) -> str:
        resp = requests.post(
            self.endpoint,
            json={
                "instruction": instruction,
                "transcript": [list(t) for t in transcript],
                "utterance": utterance,
            },
            timeout=self.timeout_s,
        )
        resp.raise_for_status()
        return resp.text.strip()


def interpret(utterance: str, ctx: InterpreterContext, adapter) -> Action:
    """Turn one utterance into an Action via the adapter; never raises.

    A malformed adapter response gets one retry with the parse error
    appended to the utterance; a second failure (or adapter crash) becomes
    a report_error action.
    """
    instruction = load_instruction()
    try:
        reply = adapter.complete(instruction, ctx.transcript, utterance)
    except Exception as e:  # adapter failure must not break the session
        action = report_error_action(f"language adapter failed: {e}")
        ctx.record(utterance, action)
        return action
    try:
        action = parse_action(reply)
    except ParseError as first_err:
        try:
            retry = adapter.complete(
                instruction, ctx.transcript,
                f"{utterance}\n(previous reply was rejected: {first_err})",
            )
            action = parse_action(retry)
        except Exception as second_err:
            action = report_error_action(
                f"adapter reply unparseable after retry: {second_err}"
            )
    # anaphora from context when the adapter itself left a bare reference
    if action.kind in (ActionKind.HIGHLIGHT, ActionKind.COLLIMATE) and (
        action.prompt.lower() in _ANAPHORA
    ):
        if ctx.last_prompt:
            action = Action(action.kind, prompt=ctx.last_prompt)
        else:
            action = report_error_action("no prior prompt to resolve reference")
    ctx.record(utterance, action)
    return action
