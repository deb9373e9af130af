/** SLTK0001 feature files and ground-truth label grids.
 *
 * Feature layout: 8-byte magic "SLTK0001", little-endian u32 grid_h,
 * u32 grid_w, u32 d_feats, u8 token kind (0=key, 1=query, 2=value),
 * then grid_h*grid_w*d_feats little-endian float32 values, row-major
 * over (patch, channel).
 */

import { TOKEN_KINDS, type TokenKind } from "./vit.js";

export const FEATURE_MAGIC = Buffer.from("SLTK0001", "ascii");

export function encodeFeatures(gridH: number, gridW: number, dFeats: number,
                               kind: TokenKind,
                               tokens: Float32Array): Buffer {
  if (tokens.length !== gridH * gridW * dFeats) {
    throw new Error(`token payload has ${tokens.length} values, expected `
      + `${gridH * gridW * dFeats}`);
  }
  const header = Buffer.alloc(13);
  header.writeUInt32LE(gridH, 0);
  header.writeUInt32LE(gridW, 4);
  header.writeUInt32LE(dFeats, 8);
  header.writeUInt8(TOKEN_KINDS.indexOf(kind), 12);
  const payload = Buffer.alloc(tokens.length * 4);
  for (let i = 0; i < tokens.length; i++) payload.writeFloatLE(tokens[i], 4 * i);
  return Buffer.concat([FEATURE_MAGIC, header, payload]);
}

export interface DecodedFeatures {
  gridH: number;
  gridW: number;
  dFeats: number;
  kind: TokenKind;
  tokens: Float32Array;
}

export function decodeFeatures(blob: Buffer): DecodedFeatures {
  if (!blob.subarray(0, 8).equals(FEATURE_MAGIC)) {
    throw new Error("bad feature magic, expected SLTK0001");
  }
  const gridH = blob.readUInt32LE(8);
  const gridW = blob.readUInt32LE(12);
  const dFeats = blob.readUInt32LE(16);
  const kindByte = blob.readUInt8(20);
  if (kindByte >= TOKEN_KINDS.length) {
    throw new Error(`unknown token kind byte ${kindByte}`);
  }
  const count = gridH * gridW * dFeats;
  if (blob.length !== 21 + 4 * count) {
    throw new Error(`payload has ${blob.length - 21} bytes, expected ${4 * count}`);
  }
  const tokens = new Float32Array(count);
  for (let i = 0; i < count; i++) tokens[i] = blob.readFloatLE(21 + 4 * i);
  return { gridH, gridW, dFeats, kind: TOKEN_KINDS[kindByte], tokens };
}

/** text grid: one integer label per patch cell, row-major, 0=background */
export function encodeLabelGrid(labels: Int32Array | Uint8Array,
                                gridH: number, gridW: number): string {
  const lines: string[] = [];
  for (let y = 0; y < gridH; y++) {
    const row: string[] = [];
    for (let x = 0; x < gridW; x++) row.push(String(labels[y * gridW + x]));
    lines.push(row.join(" "));
  }
  return lines.join("\n") + "\n";
}

/** majority vote of raw label pixels inside each patch cell */
export function rasterizeLabels(labels: Uint8Array, size: number,
                                patchSize: number): Int32Array {
  const grid = Math.floor(size / patchSize);
  const out = new Int32Array(grid * grid);
  const counts = new Map<number, number>();
  for (let py = 0; py < grid; py++) {
    for (let px = 0; px < grid; px++) {
      counts.clear();
      for (let dy = 0; dy < patchSize; dy++) {
        for (let dx = 0; dx < patchSize; dx++) {
          const v = labels[(py * patchSize + dy) * size + px * patchSize + dx];
          counts.set(v, (counts.get(v) ?? 0) + 1);
        }
      }
      let best = 0;
      let bestCount = -1;
      for (const [v, c] of counts) {
        if (c > bestCount || (c === bestCount && v < best)) {
          best = v;
          bestCount = c;
        }
      }
      out[py * grid + px] = best;
    }
  }
  return out;
}
