#!/usr/bin/env node
/** CLI: export patch tokens (and optional label grids) from images. */

import { pathToFileURL } from "node:url";
import { defaultJob, runExport } from "./export.js";
import { TOKEN_KINDS, type TokenKind } from "./vit.js";

function usage(): never {
  console.error(
    `usage: cli.js export --images <png|ppm>... --out <dir>
            [--token-kind key|query|value]...  (default: key)
            [--labels <png>...]   grayscale instance-label images -> .gt grids
            [--resize stretch|center-crop]     (default: stretch)
            [--weights <file>]    VITW0001 container; default: seeded weights
            [--seed <int>]        seed for the deterministic weights
            [--pre-layernorm]     apply the final layer norm before export`);
  process.exit(2);
}

export function main(argv: string[]): number {
  if (argv.length === 0 || argv[0] !== "export") usage();
  const job = defaultJob();
  const kinds: TokenKind[] = [];
  let i = 1;
  const takeList = (target: string[]) => {
    while (i < argv.length && !argv[i].startsWith("--")) {
      target.push(argv[i]);
      i++;
    }
  };
  while (i < argv.length) {
    const flag = argv[i];
    i++;
    switch (flag) {
      case "--images": takeList(job.images); break;
      case "--labels": takeList(job.labelImages); break;
      case "--out": job.outDir = argv[i++]; break;
      case "--token-kind": {
        const kind = argv[i++] as TokenKind;
        if (!TOKEN_KINDS.includes(kind)) usage();
        kinds.push(kind);
        break;
      }
      case "--resize": {
        const policy = argv[i++];
        if (policy !== "stretch" && policy !== "center-crop") usage();
        job.resize = policy;
        break;
      }
      case "--weights": job.weightsPath = argv[i++]; break;
      case "--seed": job.seed = parseInt(argv[i++], 10); break;
      case "--pre-layernorm": job.preLayerNorm = true; break;
      default: usage();
    }
  }
  if (kinds.length > 0) job.tokenKinds = kinds;
  if (job.images.length === 0 && job.labelImages.length === 0) usage();
  const rows = runExport(job);
  const ok = rows.filter((r) => r.status === "ok").length;
  const skipped = rows.length - ok;
  console.log(`exported ${ok} inputs to ${job.outDir}`
    + (skipped ? ` (${skipped} skipped, see manifest.csv)` : ""));
  return 0;
}

if (process.argv[1] && import.meta.url === pathToFileURL(process.argv[1]).href) {
  process.exit(main(process.argv.slice(2)));
}
