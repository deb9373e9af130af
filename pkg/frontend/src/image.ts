/** Minimal image ingestion: PNG (8-bit gray/RGB/RGBA, non-interlaced),
 * binary PPM, plus bilinear/nearest resampling. Pixels come out as
 * row-major RGB float arrays in [0, 1]. */

import { inflateSync } from "node:zlib";

export interface RgbImage {
  width: number;
  height: number;
  /** row-major, 3 channels, values in [0, 1] */
  data: Float32Array;
}

const PNG_SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);

export class ImageDecodeError extends Error {}

export function decodeImage(buffer: Buffer, name = "<image>"): RgbImage {
  if (buffer.subarray(0, 8).equals(PNG_SIGNATURE)) return decodePng(buffer, name);
  if (buffer[0] === 0x50 && buffer[1] === 0x36) return decodePpm(buffer, name);
  throw new ImageDecodeError(`${name}: not a PNG or binary PPM file`);
}

function decodePng(buffer: Buffer, name: string): RgbImage {
  let off = 8;
  let width = 0;
  let height = 0;
  let bitDepth = 0;
  let colorType = 0;
  const idat: Buffer[] = [];
  while (off < buffer.length) {
    const len = buffer.readUInt32BE(off);
    const type = buffer.toString("ascii", off + 4, off + 8);
    const data = buffer.subarray(off + 8, off + 8 + len);
    if (type === "IHDR") {
      width = data.readUInt32BE(0);
      height = data.readUInt32BE(4);
      bitDepth = data[8];
      colorType = data[9];
      if (data[12] !== 0) throw new ImageDecodeError(`${name}: interlaced PNG unsupported`);
      if (bitDepth !== 8) throw new ImageDecodeError(`${name}: only 8-bit PNG supported`);
      if (![0, 2, 4, 6].includes(colorType)) {
        throw new ImageDecodeError(`${name}: unsupported PNG color type ${colorType}`);
      }
    } else if (type === "IDAT") {
      idat.push(data);
    } else if (type === "IEND") {
      break;
    }
    off += 12 + len;
  }
  if (!width || !height) throw new ImageDecodeError(`${name}: missing IHDR`);
  const channels = { 0: 1, 2: 3, 4: 2, 6: 4 }[colorType as 0 | 2 | 4 | 6]!;
  let raw: Buffer;
  try {
    raw = inflateSync(Buffer.concat(idat));
  } catch (err) {
    throw new ImageDecodeError(`${name}: corrupt PNG data (${err})`);
  }
  const stride = width * channels;
  if (raw.length < (stride + 1) * height) {
    throw new ImageDecodeError(`${name}: truncated PNG scanlines`);
  }
  const pixels = unfilter(raw, height, stride, channels);
  const out = new Float32Array(width * height * 3);
  for (let i = 0; i < width * height; i++) {
    const src = i * channels;
    if (channels >= 3) {
      out[i * 3] = pixels[src] / 255;
      out[i * 3 + 1] = pixels[src + 1] / 255;
      out[i * 3 + 2] = pixels[src + 2] / 255;
    } else {
      const g = pixels[src] / 255;
      out[i * 3] = g;
      out[i * 3 + 1] = g;
      out[i * 3 + 2] = g;
    }
  }
  return { width, height, data: out };
}

function unfilter(raw: Buffer, height: number, stride: number,
                  bpp: number): Uint8Array {
  const out = new Uint8Array(height * stride);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const row = y * stride;
    const prev = row - stride;
    for (let x = 0; x < stride; x++) {
      const v = raw[y * (stride + 1) + 1 + x];
      const left = x >= bpp ? out[row + x - bpp] : 0;
      const up = y > 0 ? out[prev + x] : 0;
      const upLeft = y > 0 && x >= bpp ? out[prev + x - bpp] : 0;
      let recon: number;
      switch (filter) {
        case 0: recon = v; break;
        case 1: recon = v + left; break;
        case 2: recon = v + up; break;
        case 3: recon = v + ((left + up) >> 1); break;
        case 4: recon = v + paeth(left, up, upLeft); break;
        default: throw new ImageDecodeError(`bad PNG filter ${filter}`);
      }
      out[row + x] = recon & 0xff;
    }
  }
  return out;
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

function decodePpm(buffer: Buffer, name: string): RgbImage {
  // P6 <width> <height> <maxval>\n binary RGB
  const header: number[] = [];
  let off = 2;
  while (header.length < 3 && off < buffer.length) {
    while (off < buffer.length && /\s/.test(String.fromCharCode(buffer[off]))) off++;
    if (buffer[off] === 0x23) { // comment
      while (off < buffer.length && buffer[off] !== 0x0a) off++;
      continue;
    }
    let num = "";
    while (off < buffer.length && /\d/.test(String.fromCharCode(buffer[off]))) {
      num += String.fromCharCode(buffer[off]);
      off++;
    }
    if (!num) throw new ImageDecodeError(`${name}: malformed PPM header`);
    header.push(parseInt(num, 10));
  }
  off++; // single whitespace after maxval
  const [width, height, maxval] = header;
  if (maxval !== 255) throw new ImageDecodeError(`${name}: PPM maxval ${maxval} unsupported`);
  if (buffer.length < off + width * height * 3) {
    throw new ImageDecodeError(`${name}: truncated PPM payload`);
  }
  const out = new Float32Array(width * height * 3);
  for (let i = 0; i < width * height * 3; i++) out[i] = buffer[off + i] / 255;
  return { width, height, data: out };
}

export type ResizePolicy = "stretch" | "center-crop";

/** bilinear resample to size x size (stretch) or scale-then-crop */
export function resizeTo(image: RgbImage, size: number,
                         policy: ResizePolicy): RgbImage {
  if (policy === "stretch") return bilinear(image, size, size);
  const scale = size / Math.min(image.width, image.height);
  const w = Math.max(size, Math.round(image.width * scale));
  const h = Math.max(size, Math.round(image.height * scale));
  const scaled = bilinear(image, w, h);
  const x0 = Math.floor((w - size) / 2);
  const y0 = Math.floor((h - size) / 2);
  const out = new Float32Array(size * size * 3);
  for (let y = 0; y < size; y++) {
    for (let x = 0; x < size; x++) {
      const src = ((y + y0) * w + (x + x0)) * 3;
      const dst = (y * size + x) * 3;
      out[dst] = scaled.data[src];
      out[dst + 1] = scaled.data[src + 1];
      out[dst + 2] = scaled.data[src + 2];
    }
  }
  return { width: size, height: size, data: out };
}

function bilinear(image: RgbImage, outW: number, outH: number): RgbImage {
  const out = new Float32Array(outW * outH * 3);
  const sx = image.width / outW;
  const sy = image.height / outH;
  for (let y = 0; y < outH; y++) {
    const fy = Math.min(image.height - 1, Math.max(0, (y + 0.5) * sy - 0.5));
    const y0 = Math.floor(fy);
    const y1 = Math.min(image.height - 1, y0 + 1);
    const wy = fy - y0;
    for (let x = 0; x < outW; x++) {
      const fx = Math.min(image.width - 1, Math.max(0, (x + 0.5) * sx - 0.5));
      const x0 = Math.floor(fx);
      const x1 = Math.min(image.width - 1, x0 + 1);
      const wx = fx - x0;
      for (let c = 0; c < 3; c++) {
        const p00 = image.data[(y0 * image.width + x0) * 3 + c];
        const p01 = image.data[(y0 * image.width + x1) * 3 + c];
        const p10 = image.data[(y1 * image.width + x0) * 3 + c];
        const p11 = image.data[(y1 * image.width + x1) * 3 + c];
        out[(y * outW + x) * 3 + c] =
          p00 * (1 - wy) * (1 - wx) + p01 * (1 - wy) * wx +
          p10 * wy * (1 - wx) + p11 * wy * wx;
      }
    }
  }
  return { width: outW, height: outH, data: out };
}

/** nearest-neighbor resample of a single-channel label image */
export function nearestLabels(labels: Uint8Array, width: number, height: number,
                              size: number): Uint8Array {
  const out = new Uint8Array(size * size);
  for (let y = 0; y < size; y++) {
    const sy = Math.min(height - 1, Math.floor((y + 0.5) * height / size));
    for (let x = 0; x < size; x++) {
      const sx = Math.min(width - 1, Math.floor((x + 0.5) * width / size));
      out[y * size + x] = labels[sy * width + sx];
    }
  }
  return out;
}

/** decode a grayscale label PNG to raw label values (no scaling) */
export function decodeLabels(buffer: Buffer, name = "<labels>"): {
  width: number; height: number; labels: Uint8Array;
} {
  if (!buffer.subarray(0, 8).equals(PNG_SIGNATURE)) {
    throw new ImageDecodeError(`${name}: label images must be 8-bit grayscale PNG`);
  }
  const img = decodePng(buffer, name);
  const labels = new Uint8Array(img.width * img.height);
  for (let i = 0; i < labels.length; i++) {
    labels[i] = Math.round(img.data[i * 3] * 255);
  }
  return { width: img.width, height: img.height, labels };
}
