/** Payload shapes of the controller HTTP API. Field names mirror the wire
 * format exactly; the console renders these values verbatim. */

export interface CarmJson {
  alpha: number;
  beta: number;
  roll: number;
  isocenter: [number, number, number];
  source_isocenter_dist: number;
  source_detector_dist: number;
}

export interface PendingJson {
  reason: string;
  acquire: boolean;
  target: CarmJson;
}

export interface CollimationJson {
  prompt: string;
  lo_mm: [number, number, number];
  hi_mm: [number, number, number];
}

export interface StateJson {
  phantom: string;
  tick: number;
  carm: CarmJson;
  pending: PendingJson | null;
  collimation: CollimationJson | null;
  image_ids: string[];
  current_image_id: string | null;
}

export interface ReportJson {
  action: string;
  ok: boolean;
  succeeded: boolean;
  message: string;
  prompt_resolved: boolean | null;
  image_id: string | null;
  staged: PendingJson | null;
  collimation: CollimationJson | null;
  twin_summary: TwinSummaryJson | null;
  overlay_prompt: string | null;
  diagnostics: Record<string, unknown>;
  state: StateJson;
  utterance?: string;
}

export interface TwinSummaryJson {
  prompt: string;
  n_points: number;
  centroid_mm: [number, number, number];
  bbox_lo_mm: [number, number, number];
  bbox_hi_mm: [number, number, number];
  grid_spacing_mm: number;
  views_used: string[];
}

export interface SessionCreateJson {
  session_id: string;
  phantom: string;
  prompts: string[];
  state: StateJson;
}

export interface ImageJson {
  id: string;
  width: number;
  height: number;
  acquired_at: number;
  collimation_px: [number, number, number, number] | null;
  pgm_base64: string;
  sidecar: string;
}

export interface OverlayJson {
  prompt: string;
  image_id: string;
  width: number;
  height: number;
  threshold: number;
  model_tag: string;
  scores_base64: string;
}

export interface TwinJson {
  available: boolean;
  cached?: boolean;
  summary?: TwinSummaryJson;
  reason?: string;
}

export interface TranscriptJson {
  turns: { utterance: string; action: string }[];
}
