/** DOM console: command input with history, X-ray canvas with overlay and
 * collimation rectangle, pending-motion banner, twin panel, transcript. */

import { ApiClient } from "./api.js";
import { composeRgba, decodeScores } from "./overlay.js";
import { base64ToBytes, decodePgm16 } from "./pgm.js";
import {
  applyReport,
  applySessionCreated,
  applyTwinUnavailable,
  emptyView,
  hasPending,
  type SessionView,
} from "./state.js";
import type { ImageJson, ReportJson } from "./types.js";

const vec = (v: readonly number[]): string => v.map(String).join(", ");

export class Console {
  view: SessionView = emptyView();
  private els!: Record<string, HTMLElement>;
  private input!: HTMLInputElement;
  private canvas!: HTMLCanvasElement;
  private historyCursor = -1;

  constructor(
    private readonly root: HTMLElement,
    private readonly api: ApiClient,
  ) {
    this.buildDom();
  }

  private buildDom(): void {
    this.root.innerHTML = `
      <header>
        <h1>carmtwin console</h1>
        <span id="session-label" class="muted">connecting…</span>
      </header>
      <main>
        <section class="view-pane">
          <div class="canvas-wrap">
            <canvas id="xray-canvas" width="512" height="512"></canvas>
            <div id="collimation-rect" hidden></div>
            <div id="overlay-state" data-active="false"></div>
          </div>
          <div id="image-caption" class="muted"></div>
        </section>
        <section class="side-pane">
          <div id="pending-banner" class="banner" hidden>
            <span id="pending-reason"></span>
            <button id="confirm-btn" disabled>Confirm</button>
            <button id="cancel-btn" disabled>Cancel</button>
          </div>
          <div class="panel" id="pose-panel">
            <h2>C-arm</h2>
            <div>orbit <b id="pose-alpha"></b>° tilt <b id="pose-beta"></b>° roll <b id="pose-roll"></b>°</div>
            <div>isocenter <b id="pose-iso"></b> mm</div>
            <div id="collimation-indicator" class="muted">beam open</div>
          </div>
          <div class="panel" id="twin-panel">
            <h2>digital twin</h2>
            <div id="twin-placeholder" class="muted">no reconstruction yet</div>
            <div id="twin-body" hidden>
              <div>prompt <b id="twin-prompt"></b> (<span id="twin-points"></span> points)</div>
              <div>centroid <b id="twin-centroid"></b> mm</div>
              <div>bbox <b id="twin-bbox-lo"></b> → <b id="twin-bbox-hi"></b> mm</div>
              <div class="muted">views <span id="twin-views"></span></div>
              <canvas id="twin-schematic" width="220" height="160"></canvas>
            </div>
          </div>
          <div class="panel">
            <h2>transcript</h2>
            <ul id="transcript-list"></ul>
          </div>
        </section>
      </main>
      <footer>
        <form id="command-form">
          <input id="command-input" type="text" autocomplete="off"
                 placeholder="e.g. take a shot / show me the heart" />
          <button id="command-send" type="submit">Send</button>
          <button id="dictate-btn" type="button" hidden>🎙</button>
        </form>
        <div id="error-line" class="error" hidden></div>
      </footer>`;
    const byId = (id: string): HTMLElement => {
      const el = this.root.querySelector<HTMLElement>(`#${id}`);
      if (!el) throw new Error(`missing element #${id}`);
      return el;
    };
    this.els = Object.fromEntries(
      [
        "session-label", "xray-canvas", "collimation-rect", "overlay-state",
        "image-caption", "pending-banner", "pending-reason", "confirm-btn",
        "cancel-btn", "pose-alpha", "pose-beta", "pose-roll", "pose-iso",
        "collimation-indicator", "twin-placeholder", "twin-body", "twin-prompt",
        "twin-points", "twin-centroid", "twin-bbox-lo", "twin-bbox-hi",
        "twin-views", "transcript-list", "command-form", "command-input",
        "error-line", "dictate-btn",
      ].map((id) => [id, byId(id)]),
    );
    this.input = this.els["command-input"] as HTMLInputElement;
    this.canvas = this.els["xray-canvas"] as HTMLCanvasElement;

    this.els["command-form"]!.addEventListener("submit", (ev) => {
      ev.preventDefault();
      void this.submitCommand(this.input.value);
    });
    this.input.addEventListener("keydown", (ev) => this.onHistoryKey(ev as KeyboardEvent));
    this.els["confirm-btn"]!.addEventListener("click", () => void this.confirmMotion());
    this.els["cancel-btn"]!.addEventListener("click", () => void this.cancelMotion());
    this.maybeEnableDictation();
  }

  async start(options: Parameters<ApiClient["createSession"]>[0] = {}): Promise<void> {
    try {
      const created = await this.api.createSession(options);
      this.view = applySessionCreated(this.view, created);
    } catch (e) {
      this.showError(String(e));
      return;
    }
    this.render();
  }

  /** Empty input sends nothing (whitespace counts as empty). */
  async submitCommand(text: string): Promise<void> {
    const trimmed = text.trim();
    if (!trimmed) return;
    this.input.value = "";
    this.historyCursor = -1;
    await this.roundTrip(() => this.api.sendUtterance(trimmed));
  }

  async confirmMotion(): Promise<void> {
    await this.roundTrip(() => this.api.confirm());
  }

  async cancelMotion(): Promise<void> {
    await this.roundTrip(() => this.api.cancel());
  }

  private async roundTrip(call: () => Promise<ReportJson>): Promise<void> {
    let report: ReportJson;
    try {
      report = await call();
    } catch (e) {
      this.showError(String(e));
      return;
    }
    this.view = applyReport(this.view, report);
    await this.refreshImagery();
    await this.refreshTwin(report);
    this.render();
  }

  private async refreshImagery(): Promise<void> {
    const current = this.view.state?.current_image_id;
    if (!current) return;
    try {
      const image = await this.api.getImage("current");
      let scores: Float32Array | null = null;
      if (this.view.overlayPrompt) {
        const overlay = await this.api.getOverlay(this.view.overlayPrompt);
        if (overlay.image_id === image.id) {
          scores = decodeScores(overlay.scores_base64, overlay.width, overlay.height);
        }
      }
      this.drawImage(image, scores);
    } catch (e) {
      this.showError(String(e));
    }
  }

  private async refreshTwin(report: ReportJson): Promise<void> {
    if (report.twin_summary) return; // already carried by the report
    const prompt = this.view.twin?.prompt;
    if (!prompt || !report.image_id) return; // refresh only after acquisitions
    try {
      const twin = await this.api.getTwin(prompt);
      if (twin.available && twin.summary) {
        this.view = { ...this.view, twin: twin.summary, twinUnavailableReason: null };
      } else {
        this.view = applyTwinUnavailable(this.view, twin.reason ?? "unavailable");
      }
    } catch (e) {
      this.view = applyTwinUnavailable(this.view, String(e));
    }
  }

  private drawImage(image: ImageJson, scores: Float32Array | null): void {
    this.canvas.width = image.width;
    this.canvas.height = image.height;
    const overlayState = this.els["overlay-state"]!;
    overlayState.dataset["active"] = scores ? "true" : "false";
    overlayState.dataset["prompt"] = scores ? (this.view.overlayPrompt ?? "") : "";
    const caption = this.els["image-caption"]!;
    caption.textContent =
      `${image.id} (${image.width}x${image.height})` +
      (this.view.overlayPrompt && scores ? ` · overlay: ${this.view.overlayPrompt}` : "");

    const rect = this.els["collimation-rect"]!;
    if (image.collimation_px) {
      const [u0, v0, u1, v1] = image.collimation_px;
      rect.hidden = false;
      rect.style.left = `${(100 * u0) / image.width}%`;
      rect.style.top = `${(100 * v0) / image.height}%`;
      rect.style.width = `${(100 * (u1 - u0)) / image.width}%`;
      rect.style.height = `${(100 * (v1 - v0)) / image.height}%`;
    } else {
      rect.hidden = true;
    }

    const ctx = this.canvas.getContext("2d");
    if (!ctx) return; // test environments have no canvas backend
    const gray = decodePgm16(base64ToBytes(image.pgm_base64));
    const rgba = composeRgba(gray, scores);
    ctx.putImageData(new ImageData(rgba, gray.width, gray.height), 0, 0);
  }

  private drawTwinSchematic(): void {
    const twin = this.view.twin;
    const canvas = this.els["twin-schematic"] as HTMLCanvasElement;
    const ctx = canvas.getContext("2d");
    if (!twin || !ctx) return;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    // project (x, y, z) mm onto a fixed oblique axonometric schematic
    const px = (p: readonly number[]): [number, number] => {
      const [x, y, z] = [p[0] ?? 0, p[1] ?? 0, p[2] ?? 0];
      const s = 0.28;
      return [110 + s * (x - 0.45 * z), 80 - s * (y - 0.35 * z)];
    };
    ctx.strokeStyle = "#557";
    for (const axis of [[60, 0, 0], [0, 60, 0], [0, 0, 60]] as const) {
      ctx.beginPath();
      ctx.moveTo(...px([0, 0, 0]));
      ctx.lineTo(...px(axis));
      ctx.stroke();
    }
    const lo = twin.bbox_lo_mm;
    const hi = twin.bbox_hi_mm;
    const corners: [number, number, number][] = [];
    for (const x of [lo[0], hi[0]]) for (const y of [lo[1], hi[1]]) for (const z of [lo[2], hi[2]]) {
      corners.push([x, y, z]);
    }
    const edges = [[0, 1], [0, 2], [0, 4], [1, 3], [1, 5], [2, 3], [2, 6],
                   [3, 7], [4, 5], [4, 6], [5, 7], [6, 7]];
    ctx.strokeStyle = "#4bf";
    for (const [a, b] of edges) {
      ctx.beginPath();
      ctx.moveTo(...px(corners[a!]!));
      ctx.lineTo(...px(corners[b!]!));
      ctx.stroke();
    }
    const [cx, cy] = px(twin.centroid_mm);
    ctx.fillStyle = "#fc4";
    ctx.beginPath();
    ctx.arc(cx, cy, 3, 0, 2 * Math.PI);
    ctx.fill();
  }

  private onHistoryKey(ev: KeyboardEvent): void {
    const history = this.view.commandHistory;
    if (!history.length) return;
    if (ev.key === "ArrowUp") {
      ev.preventDefault();
      this.historyCursor =
        this.historyCursor < 0 ? history.length - 1 : Math.max(0, this.historyCursor - 1);
      this.input.value = history[this.historyCursor] ?? "";
    } else if (ev.key === "ArrowDown" && this.historyCursor >= 0) {
      ev.preventDefault();
      this.historyCursor++;
      if (this.historyCursor >= history.length) {
        this.historyCursor = -1;
        this.input.value = "";
      } else {
        this.input.value = history[this.historyCursor] ?? "";
      }
    }
  }

  private maybeEnableDictation(): void {
    // best effort, behind ?dictate=1; explicitly untested
    if (!new URLSearchParams(globalThis.location?.search ?? "").has("dictate")) return;
    const SR = (globalThis as Record<string, unknown>)["webkitSpeechRecognition"] as
      | (new () => { start(): void; onresult: (ev: unknown) => void })
      | undefined;
    if (!SR) return;
    const btn = this.els["dictate-btn"]!;
    btn.hidden = false;
    btn.addEventListener("click", () => {
      const rec = new SR();
      rec.onresult = (ev: unknown) => {
        const res = (ev as { results?: { 0?: { 0?: { transcript?: string } } } }).results;
        const text = res?.[0]?.[0]?.transcript;
        if (text) this.input.value = text;
      };
      rec.start();
    });
  }

  private showError(message: string): void {
    const line = this.els["error-line"]!;
    line.textContent = message;
    line.hidden = false;
  }

  /** Re-render every panel from the view model (verbatim payload values). */
  render(): void {
    const v = this.view;
    this.els["session-label"]!.textContent = v.sessionId
      ? `session ${v.sessionId} · phantom ${v.phantom}`
      : "no session";

    const state = v.state;
    if (state) {
      this.els["pose-alpha"]!.textContent = String(state.carm.alpha);
      this.els["pose-beta"]!.textContent = String(state.carm.beta);
      this.els["pose-roll"]!.textContent = String(state.carm.roll);
      this.els["pose-iso"]!.textContent = vec(state.carm.isocenter);
      this.els["collimation-indicator"]!.textContent = state.collimation
        ? `collimated to ${state.collimation.prompt} ` +
          `[${vec(state.collimation.lo_mm)}] → [${vec(state.collimation.hi_mm)}]`
        : "beam open";
    }

    const banner = this.els["pending-banner"]!;
    const pending = state?.pending ?? null;
    banner.hidden = pending === null;
    (this.els["confirm-btn"] as HTMLButtonElement).disabled = pending === null;
    (this.els["cancel-btn"] as HTMLButtonElement).disabled = pending === null;
    if (pending) {
      this.els["pending-reason"]!.textContent =
        `${pending.reason} → orbit ${String(pending.target.alpha)}° ` +
        `tilt ${String(pending.target.beta)}° roll ${String(pending.target.roll)}° ` +
        `iso [${vec(pending.target.isocenter)}]`;
    }

    const twin = v.twin;
    this.els["twin-placeholder"]!.hidden = twin !== null;
    this.els["twin-body"]!.hidden = twin === null;
    if (twin) {
      this.els["twin-prompt"]!.textContent = twin.prompt;
      this.els["twin-points"]!.textContent = String(twin.n_points);
      this.els["twin-centroid"]!.textContent = vec(twin.centroid_mm);
      this.els["twin-bbox-lo"]!.textContent = vec(twin.bbox_lo_mm);
      this.els["twin-bbox-hi"]!.textContent = vec(twin.bbox_hi_mm);
      this.els["twin-views"]!.textContent = twin.views_used.join(", ");
      this.drawTwinSchematic();
    } else if (v.twinUnavailableReason) {
      this.els["twin-placeholder"]!.textContent =
        `no reconstruction: ${v.twinUnavailableReason}`;
    }

    const list = this.els["transcript-list"]!;
    list.innerHTML = "";
    for (const entry of v.log) {
      const li = document.createElement("li");
      li.className = entry.succeeded ? "ok" : "fail";
      const label = entry.utterance ?? "(control)";
      li.textContent = `${label} → ${entry.action ?? ""} · ${entry.message}`;
      list.appendChild(li);
    }

    const err = this.els["error-line"]!;
    if (v.lastError) {
      err.textContent = v.lastError;
      err.hidden = false;
    } else {
      err.hidden = true;
    }
  }
}
