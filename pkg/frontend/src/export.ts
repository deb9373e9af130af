/** Export orchestration: images -> SLTK feature files + manifest. */

import { mkdirSync, readFileSync, writeFileSync } from "node:fs";
import { basename, extname, join } from "node:path";
import { decodeImage, decodeLabels, nearestLabels, resizeTo,
         ImageDecodeError, type ResizePolicy } from "./image.js";
import { encodeFeatures, encodeLabelGrid, rasterizeLabels } from "./featfile.js";
import { extractTokens, loadWeights, seededWeights, VIT_S16,
         type TokenKind, type VitWeights } from "./vit.js";

export interface ExportJob {
  images: string[];
  tokenKinds: TokenKind[];
  outDir: string;
  resize: ResizePolicy;
  weightsPath?: string;
  seed: number;
  preLayerNorm: boolean;
  labelImages: string[];
}

export interface ManifestRow {
  input: string;
  status: "ok" | "skipped";
  note: string;
  outputs: string[];
}

export function defaultJob(): ExportJob {
  return { images: [], tokenKinds: ["key"], outDir: "exported",
           resize: "stretch", seed: 0, preLayerNorm: false, labelImages: [] };
}

function stem(path: string): string {
  const base = basename(path);
  return base.slice(0, base.length - extname(base).length);
}

export function runExport(job: ExportJob): ManifestRow[] {
  mkdirSync(job.outDir, { recursive: true });
  const weights: VitWeights = job.weightsPath
    ? loadWeights(job.weightsPath)
    : seededWeights(job.seed);
  const rows: ManifestRow[] = [];

  for (const path of job.images) {
    try {
      const raw = decodeImage(readFileSync(path), path);
      const image = resizeTo(raw, VIT_S16.imageSize, job.resize);
      const extracted = extractTokens(image, weights, job.preLayerNorm);
      const outputs: string[] = [];
      for (const kind of job.tokenKinds) {
        const name = `${stem(path)}.${kind}.feat`;
        writeFileSync(join(job.outDir, name),
                      encodeFeatures(extracted.gridH, extracted.gridW,
                                     extracted.dFeats, kind,
                                     extracted.tokens[kind]));
        outputs.push(name);
      }
      rows.push({ input: path, status: "ok", note: "", outputs });
    } catch (err) {
      if (err instanceof ImageDecodeError) {
        rows.push({ input: path, status: "skipped",
                    note: String(err.message), outputs: [] });
      } else {
        throw err;
      }
    }
  }

  for (const path of job.labelImages) {
    try {
      const { width, height, labels } = decodeLabels(readFileSync(path), path);
      const resized = width === VIT_S16.imageSize && height === VIT_S16.imageSize
        ? labels
        : nearestLabels(labels, width, height, VIT_S16.imageSize);
      const grid = rasterizeLabels(resized, VIT_S16.imageSize, VIT_S16.patchSize);
      const side = VIT_S16.imageSize / VIT_S16.patchSize;
      const name = `${stem(path)}.gt`;
      writeFileSync(join(job.outDir, name), encodeLabelGrid(grid, side, side));
      rows.push({ input: path, status: "ok", note: "ground truth", outputs: [name] });
    } catch (err) {
      if (err instanceof ImageDecodeError) {
        rows.push({ input: path, status: "skipped",
                    note: String(err.message), outputs: [] });
      } else {
        throw err;
      }
    }
  }

  const manifest = ["input,status,note,outputs"];
  for (const row of rows) {
    manifest.push([row.input, row.status, row.note.replaceAll(",", ";"),
                   row.outputs.join(";")].join(","));
  }
  writeFileSync(join(job.outDir, "manifest.csv"), manifest.join("\n") + "\n");
  return rows;
}
