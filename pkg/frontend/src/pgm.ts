/** Decoder for the backend's 16-bit binary PGM (P5) interchange images. */

export interface GrayImage {
  width: number;
  height: number;
  /** row-major samples normalized to [0, 1] */
  data: Float32Array;
}

export function base64ToBytes(b64: string): Uint8Array {
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

export function decodePgm16(bytes: Uint8Array): GrayImage {
  // header: "P5\n<w> <h>\n65535\n" then big-endian u16 samples
  let pos = 0;
  const readLine = (): string => {
    const start = pos;
    while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
    const line = new TextDecoder("ascii").decode(bytes.subarray(start, pos));
    pos++;
    return line;
  };
  if (readLine() !== "P5") throw new Error("not a binary PGM (P5) image");
  const dims = readLine().split(/\s+/).map(Number);
  const [width, height] = [dims[0] ?? NaN, dims[1] ?? NaN];
  const maxval = Number(readLine());
  if (!Number.isInteger(width) || !Number.isInteger(height)) {
    throw new Error("malformed PGM dimensions");
  }
  if (maxval !== 65535) throw new Error(`expected 16-bit graymap, maxval=${maxval}`);
  const n = width * height;
  if (bytes.length - pos < n * 2) throw new Error("truncated PGM payload");
  const data = new Float32Array(n);
  for (let i = 0; i < n; i++) {
    const hi = bytes[pos + 2 * i]!;
    const lo = bytes[pos + 2 * i + 1]!;
    data[i] = ((hi << 8) | lo) / 65535;
  }
  return { width, height, data };
}
