/** Session view model. Everything here is copied verbatim from API
 * responses; the console never simulates or recomputes device state. */

import type {
  ReportJson,
  SessionCreateJson,
  StateJson,
  TwinSummaryJson,
} from "./types.js";

export interface LogEntry {
  utterance: string | null; // null for confirm/cancel controls
  action: string | null;
  message: string;
  succeeded: boolean;
}

export interface SessionView {
  sessionId: string | null;
  phantom: string | null;
  prompts: string[];
  state: StateJson | null;
  overlayPrompt: string | null;
  twin: TwinSummaryJson | null;
  twinUnavailableReason: string | null;
  log: LogEntry[];
  commandHistory: string[];
  lastError: string | null;
}

export function emptyView(): SessionView {
  return {
    sessionId: null,
    phantom: null,
    prompts: [],
    state: null,
    overlayPrompt: null,
    twin: null,
    twinUnavailableReason: null,
    log: [],
    commandHistory: [],
    lastError: null,
  };
}

export function applySessionCreated(view: SessionView, created: SessionCreateJson): SessionView {
  return {
    ...view,
    sessionId: created.session_id,
    phantom: created.phantom,
    prompts: created.prompts,
    state: created.state,
    lastError: null,
  };
}

export function applyState(view: SessionView, state: StateJson): SessionView {
  return { ...view, state, lastError: null };
}

export function applyReport(view: SessionView, report: ReportJson): SessionView {
  const entry: LogEntry = {
    utterance: report.utterance ?? null,
    action: report.action,
    message: report.message,
    succeeded: report.succeeded,
  };
  const next: SessionView = {
    ...view,
    state: report.state,
    log: [...view.log, entry],
    lastError: report.ok ? null : report.message,
  };
  if (report.utterance) {
    next.commandHistory = [...view.commandHistory, report.utterance];
  }
  if (report.overlay_prompt) {
    next.overlayPrompt = report.overlay_prompt;
  }
  if (report.twin_summary) {
    next.twin = report.twin_summary;
    next.twinUnavailableReason = null;
  }
  return next;
}

export function applyTwinUnavailable(view: SessionView, reason: string): SessionView {
  return { ...view, twin: null, twinUnavailableReason: reason };
}

export function hasPending(view: SessionView): boolean {
  return view.state?.pending != null;
}
