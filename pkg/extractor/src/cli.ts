#!/usr/bin/env node
/**
 * CLI: extract --backbone <id> --split <name>=<dir> [--split ...]
 *              --out <dir> [--batch <n>]
 */

import { availableBackbones } from "./backbone";
import { ExtractionJob, runExtraction, SplitSpec } from "./extract";

const USAGE =
  "usage: oodnoise-extract extract --backbone <id> --split <name>=<dir> " +
  "[--split <name>=<dir> ...] --out <dir> [--batch <n>]\n" +
  `backbones: ${availableBackbones().join(", ")}\n`;

export function parseArgs(argv: string[]): ExtractionJob {
  if (argv[0] !== "extract") {
    throw new Error(USAGE);
  }
  let backbone = "patchproj-64";
  let outDir = "";
  let batchSize = 32;
  const splits: SplitSpec[] = [];
  for (let i = 1; i < argv.length; i++) {
    const arg = argv[i];
    const next = () => {
      i += 1;
      if (i >= argv.length) throw new Error(`${arg} needs a value\n${USAGE}`);
      return argv[i];
    };
    switch (arg) {
      case "--backbone":
        backbone = next();
        break;
      case "--out":
        outDir = next();
        break;
      case "--batch":
        batchSize = parseInt(next(), 10);
        if (!Number.isFinite(batchSize) || batchSize < 1) {
          throw new Error("--batch must be a positive integer");
        }
        break;
      case "--split": {
        const value = next();
        const eq = value.indexOf("=");
        if (eq <= 0) throw new Error(`--split expects name=dir, got ${value}`);
        splits.push({ name: value.slice(0, eq), dir: value.slice(eq + 1) });
        break;
      }
      default:
        throw new Error(`unknown argument ${arg}\n${USAGE}`);
    }
  }
  if (!outDir || splits.length === 0) {
    throw new Error(USAGE);
  }
  return { backbone, splits, outDir, batchSize };
}

export function main(argv: string[]): number {
  let job: ExtractionJob;
  try {
    job = parseArgs(argv);
  } catch (err) {
    process.stderr.write(`${(err as Error).message}\n`);
    return 2;
  }
  try {
    const results = runExtraction(job);
    for (const r of results) {
      process.stdout.write(
        `${r.name}: ${r.count} images -> ${r.outDir}` +
          (r.skipped ? ` (${r.skipped} skipped)` : "") +
          "\n",
      );
    }
    return 0;
  } catch (err) {
    process.stderr.write(`error: ${(err as Error).message}\n`);
    return 1;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
