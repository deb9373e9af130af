/** ViT-S/16 forward pass up to the last self-attention layer.
 *
 * The exporter takes the per-head key/query/value projections of the
 * final attention layer for the 196 patch tokens (class token dropped)
 * and concatenates the heads in ascending head order along the channel
 * axis: D_feats = 6 heads x 64 = 384. Weights are either loaded from a
 * VITW0001 container or drawn from a seeded deterministic PRNG (the
 * sandbox has no route to pretrained checkpoints; the wire format and
 * geometry do not depend on weight provenance).
 */

import { readFileSync, writeFileSync } from "node:fs";
import { Rng } from "./prng.js";
import { addBias, addInPlace, gelu, layerNorm, matmul, softmaxRows } from "./tensorops.js";
import type { RgbImage } from "./image.js";

export const VIT_S16 = {
  imageSize: 224,
  patchSize: 16,
  width: 384,
  layers: 12,
  heads: 6,
  mlpRatio: 4,
} as const;

export type TokenKind = "key" | "query" | "value";
export const TOKEN_KINDS: TokenKind[] = ["key", "query", "value"];

// ImageNet channel statistics used by the pretraining recipe
const MEAN = [0.485, 0.456, 0.406];
const STD = [0.229, 0.224, 0.225];

export interface BlockWeights {
  ln1g: Float32Array; ln1b: Float32Array;
  qkvW: Float32Array; qkvB: Float32Array;   // width -> 3*width
  projW: Float32Array; projB: Float32Array; // width -> width
  ln2g: Float32Array; ln2b: Float32Array;
  fc1W: Float32Array; fc1B: Float32Array;   // width -> mlp
  fc2W: Float32Array; fc2B: Float32Array;   // mlp -> width
}

export interface VitWeights {
  patchW: Float32Array;  // (patch*patch*3) x width
  patchB: Float32Array;
  cls: Float32Array;     // width
  pos: Float32Array;     // (1 + grid*grid) x width
  blocks: BlockWeights[];
  lnFg: Float32Array;    // final layer norm
  lnFb: Float32Array;
}

export function gridSize(imageSize: number, patchSize: number): number {
  return Math.floor(imageSize / patchSize);
}

export function seededWeights(seed: number): VitWeights {
  const rng = new Rng(seed);
  const w = VIT_S16.width;
  const tokens = 1 + gridSize(VIT_S16.imageSize, VIT_S16.patchSize) ** 2;
  const mlp = w * VIT_S16.mlpRatio;
  const std = 0.02;
  const blocks: BlockWeights[] = [];
  const patchW = rng.normal(VIT_S16.patchSize * VIT_S16.patchSize * 3 * w, std);
  const patchB = new Float32Array(w);
  const cls = rng.normal(w, std);
  const pos = rng.normal(tokens * w, std);
  for (let i = 0; i < VIT_S16.layers; i++) {
    blocks.push({
      ln1g: ones(w), ln1b: new Float32Array(w),
      qkvW: rng.normal(w * 3 * w, std), qkvB: new Float32Array(3 * w),
      projW: rng.normal(w * w, std), projB: new Float32Array(w),
      ln2g: ones(w), ln2b: new Float32Array(w),
      fc1W: rng.normal(w * mlp, std), fc1B: new Float32Array(mlp),
      fc2W: rng.normal(mlp * w, std), fc2B: new Float32Array(w),
    });
  }
  return { patchW, patchB, cls, pos, blocks, lnFg: ones(w), lnFb: new Float32Array(w) };
}

function ones(n: number): Float32Array {
  return new Float32Array(n).fill(1);
}

// ---------------------------------------------------------------------------
// VITW0001 weight container (little-endian: u32 name length, name bytes,
// u32 rank, u32 dims, float32 payload)
// ---------------------------------------------------------------------------

const WEIGHTS_MAGIC = Buffer.from("VITW0001", "ascii");

function* namedTensors(weights: VitWeights): Generator<[string, Float32Array]> {
  yield ["patch.w", weights.patchW];
  yield ["patch.b", weights.patchB];
  yield ["cls", weights.cls];
  yield ["pos", weights.pos];
  for (let i = 0; i < weights.blocks.length; i++) {
    const b = weights.blocks[i];
    const entries: [string, Float32Array][] = [
      ["ln1.g", b.ln1g], ["ln1.b", b.ln1b], ["qkv.w", b.qkvW],
      ["qkv.b", b.qkvB], ["proj.w", b.projW], ["proj.b", b.projB],
      ["ln2.g", b.ln2g], ["ln2.b", b.ln2b], ["fc1.w", b.fc1W],
      ["fc1.b", b.fc1B], ["fc2.w", b.fc2W], ["fc2.b", b.fc2B],
    ];
    for (const [name, arr] of entries) yield [`block${i}.${name}`, arr];
  }
  yield ["ln_final.g", weights.lnFg];
  yield ["ln_final.b", weights.lnFb];
}

export function writeWeights(weights: VitWeights, path: string): void {
  const parts: Buffer[] = [WEIGHTS_MAGIC];
  for (const [name, arr] of namedTensors(weights)) {
    const nameBytes = Buffer.from(name, "utf-8");
    const head = Buffer.alloc(8);
    head.writeUInt32LE(nameBytes.length, 0);
    head.writeUInt32LE(1, 4); // rank 1: flat payloads, shapes are fixed by config
    const dims = Buffer.alloc(4);
    dims.writeUInt32LE(arr.length, 0);
    parts.push(head.subarray(0, 4), nameBytes, head.subarray(4, 8), dims,
               Buffer.from(arr.buffer.slice(arr.byteOffset,
                                            arr.byteOffset + arr.byteLength)));
  }
  writeFileSync(path, Buffer.concat(parts));
}

export function loadWeights(path: string): VitWeights {
  const blob = readFileSync(path);
  if (!blob.subarray(0, 8).equals(WEIGHTS_MAGIC)) {
    throw new Error(`${path}: bad weights magic, expected VITW0001`);
  }
  const found = new Map<string, Float32Array>();
  let off = 8;
  while (off < blob.length) {
    const nameLen = blob.readUInt32LE(off); off += 4;
    const name = blob.toString("utf-8", off, off + nameLen); off += nameLen;
    const rank = blob.readUInt32LE(off); off += 4;
    let count = 1;
    for (let i = 0; i < rank; i++) {
      count *= blob.readUInt32LE(off); off += 4;
    }
    const arr = new Float32Array(count);
    for (let i = 0; i < count; i++) arr[i] = blob.readFloatLE(off + 4 * i);
    off += 4 * count;
    found.set(name, arr);
  }
  const template = seededWeights(0);
  for (const [name, arr] of namedTensors(template)) {
    const loaded = found.get(name);
    if (!loaded) throw new Error(`${path}: missing tensor ${name}`);
    if (loaded.length !== arr.length) {
      throw new Error(`${path}: tensor ${name} has ${loaded.length} values, `
        + `expected ${arr.length}`);
    }
    arr.set(loaded);
  }
  return template;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

export interface ExtractedTokens {
  gridH: number;
  gridW: number;
  dFeats: number;
  /** per kind: (grid*grid) x dFeats, heads concatenated ascending */
  tokens: Record<TokenKind, Float32Array>;
}

/** image must already be resized to imageSize x imageSize RGB in [0,1] */
export function extractTokens(image: RgbImage, weights: VitWeights,
                              preLayerNorm = false): ExtractedTokens {
  const { imageSize, patchSize, width, layers, heads } = VIT_S16;
  if (image.width !== imageSize || image.height !== imageSize) {
    throw new Error(`expected ${imageSize}x${imageSize} input, got `
      + `${image.width}x${image.height}`);
  }
  const grid = gridSize(imageSize, patchSize);
  const nPatches = grid * grid;
  const tokens = nPatches + 1;
  const headDim = width / heads;

  // patch embedding: flatten each patch (row, col, channel) and project
  const patchDim = patchSize * patchSize * 3;
  const flat = new Float32Array(nPatches * patchDim);
  for (let py = 0; py < grid; py++) {
    for (let px = 0; px < grid; px++) {
      const p = py * grid + px;
      let idx = p * patchDim;
      for (let dy = 0; dy < patchSize; dy++) {
        for (let dx = 0; dx < patchSize; dx++) {
          const src = ((py * patchSize + dy) * imageSize + px * patchSize + dx) * 3;
          for (let c = 0; c < 3; c++) {
            flat[idx++] = (image.data[src + c] - MEAN[c]) / STD[c];
          }
        }
      }
    }
  }
  const embedded = addBias(matmul(flat, nPatches, patchDim, weights.patchW, width),
                           nPatches, width, weights.patchB);

  // prepend the class token, add positions
  let x: Float32Array = new Float32Array(tokens * width);
  x.set(weights.cls, 0);
  x.set(embedded, width);
  addInPlace(x, weights.pos);

  // all blocks except the last run fully; the last stops at its qkv
  for (let layer = 0; layer < layers - 1; layer++) {
    x = block(x, tokens, weights.blocks[layer], heads, headDim);
  }
  const last = weights.blocks[layers - 1];
  const normed = layerNorm(x, tokens, width, last.ln1g, last.ln1b);
  const qkv = addBias(matmul(normed, tokens, width, last.qkvW, 3 * width),
                      tokens, 3 * width, last.qkvB);

  const out: Record<TokenKind, Float32Array> = {
    query: sliceKind(qkv, tokens, width, 0),
    key: sliceKind(qkv, tokens, width, 1),
    value: sliceKind(qkv, tokens, width, 2),
  };
  if (preLayerNorm) {
    for (const kind of TOKEN_KINDS) {
      out[kind] = layerNorm(out[kind], nPatches, width,
                            weights.lnFg, weights.lnFb);
    }
  }
  return { gridH: grid, gridW: grid, dFeats: width, tokens: out };
}

/** drop the class token and keep one of q/k/v; the per-head 64-wide
 * chunks stay in ascending head order exactly as laid out in the qkv
 * projection */
function sliceKind(qkv: Float32Array, tokens: number, width: number,
                   kindIndex: number): Float32Array {
  const nPatches = tokens - 1;
  const out = new Float32Array(nPatches * width);
  for (let t = 0; t < nPatches; t++) {
    const src = (t + 1) * 3 * width + kindIndex * width;
    out.set(qkv.subarray(src, src + width), t * width);
  }
  return out;
}

function block(x: Float32Array, tokens: number, w: BlockWeights,
               heads: number, headDim: number): Float32Array {
  const width = heads * headDim;
  const normed = layerNorm(x, tokens, width, w.ln1g, w.ln1b);
  const qkv = addBias(matmul(normed, tokens, width, w.qkvW, 3 * width),
                      tokens, 3 * width, w.qkvB);
  const attnOut = new Float32Array(tokens * width);
  const scale = 1.0 / Math.sqrt(headDim);
  const scores = new Float32Array(tokens * tokens);
  for (let h = 0; h < heads; h++) {
    const qOff = h * headDim;
    const kOff = width + h * headDim;
    const vOff = 2 * width + h * headDim;
    for (let i = 0; i < tokens; i++) {
      const qi = i * 3 * width + qOff;
      for (let j = 0; j < tokens; j++) {
        const kj = j * 3 * width + kOff;
        let dot = 0;
        for (let d = 0; d < headDim; d++) dot += qkv[qi + d] * qkv[kj + d];
        scores[i * tokens + j] = dot * scale;
      }
    }
    softmaxRows(scores, tokens, tokens);
    for (let i = 0; i < tokens; i++) {
      const outOff = i * width + h * headDim;
      for (let j = 0; j < tokens; j++) {
        const weight = scores[i * tokens + j];
        const vj = j * 3 * width + vOff;
        for (let d = 0; d < headDim; d++) {
          attnOut[outOff + d] += weight * qkv[vj + d];
        }
      }
    }
  }
  const projected = addBias(matmul(attnOut, tokens, width, w.projW, width),
                            tokens, width, w.projB);
  addInPlace(x, projected);

  const normed2 = layerNorm(x, tokens, width, w.ln2g, w.ln2b);
  const hidden = addBias(
    matmul(normed2, tokens, width, w.fc1W, width * VIT_S16.mlpRatio),
    tokens, width * VIT_S16.mlpRatio, w.fc1B);
  gelu(hidden);
  const mlpOut = addBias(
    matmul(hidden, tokens, width * VIT_S16.mlpRatio, w.fc2W, width),
    tokens, width, w.fc2B);
  addInPlace(x, mlpOut);
  return x;
}
