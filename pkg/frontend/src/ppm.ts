// Minimal binary P6 parser for the decode responses.  The server always
// emits maxval-255 P6, so anything else is treated as corruption.

export interface PpmImage {
  width: number;
  height: number;
  rgba: Uint8ClampedArray<ArrayBuffer>; // ready for ImageData
}

export class PpmError extends Error {}

function isSpace(byte: number): boolean {
  return byte === 0x20 || byte === 0x09 || byte === 0x0a || byte === 0x0d;
}

export function parseP6(bytes: Uint8Array): PpmImage {
  let pos = 0;

  function token(): string {
    while (pos < bytes.length && isSpace(bytes[pos])) pos++;
    if (pos < bytes.length && bytes[pos] === 0x23) {
      // comment: skip to end of line, then retry
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      return token();
    }
    const start = pos;
    while (pos < bytes.length && !isSpace(bytes[pos])) pos++;
    if (start === pos) throw new PpmError("malformed header: ran out of bytes");
    return String.fromCharCode(...bytes.subarray(start, pos));
  }

  if (token() !== "P6") throw new PpmError("not a binary P6 file");
  const width = Number(token());
  const height = Number(token());
  const maxval = Number(token());
  if (!Number.isInteger(width) || !Number.isInteger(height) || width < 1 || height < 1) {
    throw new PpmError(`bad dimensions ${width}x${height}`);
  }
  if (maxval !== 255) throw new PpmError(`unsupported maxval ${maxval}`);
  pos += 1; // single whitespace after maxval
  const need = width * height * 3;
  if (bytes.length - pos < need) {
    throw new PpmError(`truncated payload: need ${need}, have ${bytes.length - pos}`);
  }
  const rgba = new Uint8ClampedArray(new ArrayBuffer(width * height * 4));
  for (let i = 0; i < width * height; i++) {
    rgba[i * 4] = bytes[pos + i * 3];
    rgba[i * 4 + 1] = bytes[pos + i * 3 + 1];
    rgba[i * 4 + 2] = bytes[pos + i * 3 + 2];
    rgba[i * 4 + 3] = 255;
  }
  return { width, height, rgba };
}

export function decodeBase64(data: string): Uint8Array {
  if (typeof atob === "function") {
    const binary = atob(data);
    const out = new Uint8Array(binary.length);
    for (let i = 0; i < binary.length; i++) out[i] = binary.charCodeAt(i);
    return out;
  }
  return new Uint8Array(Buffer.from(data, "base64"));
}
