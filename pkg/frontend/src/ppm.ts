// Client-side conversion of canvas RGBA pixels to the server's binary PPM
// wire format, plus a small PPM decoder for attachment previews.

export function rgbaToPpm(rgba: Uint8Array | Uint8ClampedArray, width: number, height: number): Uint8Array {
  if (rgba.length !== width * height * 4) {
    throw new Error(`expected ${width * height * 4} RGBA bytes, got ${rgba.length}`);
  }
  const header = new TextEncoder().encode(`P6\n${width} ${height}\n255\n`);
  const out = new Uint8Array(header.length + width * height * 3);
  out.set(header, 0);
  let o = header.length;
  for (let i = 0; i < rgba.length; i += 4) {
    out[o++] = rgba[i]!;
    out[o++] = rgba[i + 1]!;
    out[o++] = rgba[i + 2]!;
  }
  return out;
}

export interface DecodedPpm {
  width: number;
  height: number;
  rgba: Uint8ClampedArray;
}

export function decodePpm(bytes: Uint8Array): DecodedPpm {
  if (bytes[0] !== 0x50 || bytes[1] !== 0x36) {
    throw new Error("not a binary PPM (P6) file");
  }
  let pos = 2;
  const fields: number[] = [];
  while (fields.length < 3) {
    while (pos < bytes.length && isSpace(bytes[pos]!)) pos++;
    if (bytes[pos] === 0x23) {
      // '#' comment runs to end of line
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      continue;
    }
    let start = pos;
    while (pos < bytes.length && !isSpace(bytes[pos]!)) pos++;
    if (start === pos) throw new Error("truncated PPM header");
    fields.push(Number(new TextDecoder().decode(bytes.slice(start, pos))));
  }
  pos++; // single whitespace after maxval
  const [width, height, maxval] = fields as [number, number, number];
  if (!Number.isFinite(width) || !Number.isFinite(height) || width < 1 || height < 1) {
    throw new Error("bad PPM dimensions");
  }
  if (maxval !== 255) throw new Error(`unsupported maxval ${maxval}`);
  const need = width * height * 3;
  const payload = bytes.slice(pos, pos + need);
  if (payload.length < need) throw new Error("truncated PPM payload");
  const rgba = new Uint8ClampedArray(width * height * 4);
  for (let i = 0, o = 0; i < need; i += 3, o += 4) {
    rgba[o] = payload[i]!;
    rgba[o + 1] = payload[i + 1]!;
    rgba[o + 2] = payload[i + 2]!;
    rgba[o + 3] = 255;
  }
  return { width, height, rgba };
}

function isSpace(b: number): boolean {
  return b === 0x20 || b === 0x09 || b === 0x0a || b === 0x0d;
}

export function bytesToBase64(bytes: Uint8Array): string {
  if (typeof btoa === "function") {
    let binary = "";
    const chunk = 0x8000;
    for (let i = 0; i < bytes.length; i += chunk) {
      binary += String.fromCharCode(...bytes.subarray(i, i + chunk));
    }
    return btoa(binary);
  }
  // node fallback for tests
  return Buffer.from(bytes).toString("base64");
}
