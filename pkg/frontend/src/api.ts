import type {
  ImageJson,
  OverlayJson,
  ReportJson,
  SessionCreateJson,
  StateJson,
  TranscriptJson,
  TwinJson,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    message: string,
    readonly status: number | null = null,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export interface SessionOptions {
  phantom?: string;
  pixel_pitch_mm?: number;
  grid_spacing_mm?: number;
  grid_radius_mm?: number;
  adapter?: string;
  corruption?: {
    blur_sigma_px?: number;
    dilate_erode_px?: number;
    dropout_prob?: number;
    seed?: number;
  };
}

/** Thin typed client over fetch; one instance per session tab. */
export class ApiClient {
  sessionId: string | null = null;

  constructor(
    readonly baseUrl: string = "",
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let resp: Response;
    try {
      resp = await this.fetchFn(`${this.baseUrl}${path}`, init);
    } catch (e) {
      throw new ApiError(`network failure: ${String(e)}`);
    }
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = (await resp.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        /* keep statusText */
      }
      throw new ApiError(detail, resp.status);
    }
    return (await resp.json()) as T;
  }

  private post<T>(path: string, body?: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: body === undefined ? "{}" : JSON.stringify(body),
    });
  }

  private session(): string {
    if (!this.sessionId) throw new ApiError("no active session");
    return this.sessionId;
  }

  async createSession(options: SessionOptions = {}): Promise<SessionCreateJson> {
    const created = await this.post<SessionCreateJson>("/sessions", options);
    this.sessionId = created.session_id;
    return created;
  }

  async getState(): Promise<StateJson> {
    return this.request<StateJson>(`/sessions/${this.session()}/state`);
  }

  async sendUtterance(text: string): Promise<ReportJson> {
    return this.post<ReportJson>(`/sessions/${this.session()}/utterance`, { text });
  }

  async confirm(): Promise<ReportJson> {
    return this.post<ReportJson>(`/sessions/${this.session()}/confirm`);
  }

  async cancel(): Promise<ReportJson> {
    return this.post<ReportJson>(`/sessions/${this.session()}/cancel`);
  }

  async getImage(imageId: string = "current"): Promise<ImageJson> {
    return this.request<ImageJson>(`/sessions/${this.session()}/image/${imageId}`);
  }

  async getOverlay(prompt: string): Promise<OverlayJson> {
    const q = encodeURIComponent(prompt);
    return this.request<OverlayJson>(`/sessions/${this.session()}/overlay?prompt=${q}`);
  }

  async getTwin(prompt: string): Promise<TwinJson> {
    const q = encodeURIComponent(prompt);
    return this.request<TwinJson>(`/sessions/${this.session()}/twin?prompt=${q}`);
  }

  async getTranscript(): Promise<TranscriptJson> {
    return this.request<TranscriptJson>(`/sessions/${this.session()}/transcript`);
  }
}
