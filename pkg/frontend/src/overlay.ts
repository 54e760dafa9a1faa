/** Segmentation heatmap decoding and RGBA composition for the canvas. */

import { base64ToBytes } from "./pgm.js";
import type { GrayImage } from "./pgm.js";

export function decodeScores(b64: string, width: number, height: number): Float32Array {
  const bytes = base64ToBytes(b64);
  if (bytes.length !== width * height * 4) {
    throw new Error(
      `score payload is ${bytes.length} bytes, expected ${width * height * 4}`,
    );
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const out = new Float32Array(width * height);
  for (let i = 0; i < out.length; i++) out[i] = view.getFloat32(i * 4, true);
  return out;
}

export interface OverlayStyle {
  threshold: number;
  opacity: number; // 0..1 blend strength of the tint
}

const TINT = { r: 64, g: 191, b: 255 };

/** X-ray rendered as grayscale; pixels whose score passes the threshold get
 * a fixed tint at the requested opacity. Pure so it is unit-testable. */
export function composeRgba(
  image: GrayImage,
  scores: Float32Array | null,
  style: OverlayStyle = { threshold: 0.5, opacity: 0.45 },
): Uint8ClampedArray<ArrayBuffer> {
  const n = image.width * image.height;
  const rgba = new Uint8ClampedArray(new ArrayBuffer(n * 4));
  for (let i = 0; i < n; i++) {
    const g = Math.round((image.data[i] ?? 0) * 255);
    let r = g;
    let gg = g;
    let b = g;
    if (scores !== null && (scores[i] ?? 0) >= style.threshold) {
      r = Math.round(g + (TINT.r - g) * style.opacity);
      gg = Math.round(g + (TINT.g - g) * style.opacity);
      b = Math.round(g + (TINT.b - g) * style.opacity);
    }
    rgba[i * 4] = r;
    rgba[i * 4 + 1] = gg;
    rgba[i * 4 + 2] = b;
    rgba[i * 4 + 3] = 255;
  }
  return rgba;
}
