import { ApiClient } from "./api.js";
import { Console } from "./ui.js";
import type { SessionOptions } from "./api.js";

function optionsFromQuery(): SessionOptions {
  const q = new URLSearchParams(location.search);
  const opts: SessionOptions = {};
  if (q.has("phantom")) opts.phantom = q.get("phantom")!;
  if (q.has("pitch")) opts.pixel_pitch_mm = Number(q.get("pitch"));
  if (q.has("grid")) opts.grid_spacing_mm = Number(q.get("grid"));
  if (q.has("adapter")) opts.adapter = q.get("adapter")!;
  const corruption: NonNullable<SessionOptions["corruption"]> = {};
  if (q.has("blur")) corruption.blur_sigma_px = Number(q.get("blur"));
  if (q.has("dropout")) corruption.dropout_prob = Number(q.get("dropout"));
  if (q.has("seed")) corruption.seed = Number(q.get("seed"));
  if (Object.keys(corruption).length) opts.corruption = corruption;
  return opts;
}

const root = document.getElementById("app");
if (!root) throw new Error("missing #app root");
// served from /ui/ by the backend, or cross-origin via ?api=
const base = new URLSearchParams(location.search).get("api") ?? "";
const console_ = new Console(root, new ApiClient(base));
void console_.start(optionsFromQuery());
