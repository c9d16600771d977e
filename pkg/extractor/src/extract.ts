/**
 * Extraction pipeline: image folders in, tensor bundles out.
 *
 * Each split directory may contain class subdirectories (sorted names
 * define the label indices) or a flat set of images (all label 0). Files
 * are visited in sorted order so repeated runs produce identical bundles;
 * unreadable images are skipped and counted in the manifest metadata.
 */

import * as fs from "fs";
import * as path from "path";
import { Backbone, createBackbone } from "./backbone";
import { Tensor, writeBundle } from "./bundle";
import { decodeImage } from "./image";

const IMAGE_EXTENSIONS = new Set([".png", ".jpg", ".jpeg"]);

export interface SplitSpec {
  name: string;
  dir: string;
}

export interface ExtractionJob {
  backbone: string;
  splits: SplitSpec[];
  outDir: string;
  batchSize: number;
}

export interface SplitResult {
  name: string;
  outDir: string;
  count: number;
  skipped: number;
}

interface ImageEntry {
  file: string;
  label: number;
}

function listImages(dir: string): { entries: ImageEntry[]; classes: string[] } {
  const names = fs.readdirSync(dir, { withFileTypes: true });
  const classDirs = names
    .filter((d) => d.isDirectory())
    .map((d) => d.name)
    .sort();
  const entries: ImageEntry[] = [];
  if (classDirs.length > 0) {
    classDirs.forEach((cls, label) => {
      const files = fs
        .readdirSync(path.join(dir, cls))
        .filter((f) => IMAGE_EXTENSIONS.has(path.extname(f).toLowerCase()))
        .sort();
      for (const f of files) {
        entries.push({ file: path.join(dir, cls, f), label });
      }
    });
    return { entries, classes: classDirs };
  }
  const files = names
    .filter((d) => d.isFile() && IMAGE_EXTENSIONS.has(path.extname(d.name).toLowerCase()))
    .map((d) => d.name)
    .sort();
  for (const f of files) {
    entries.push({ file: path.join(dir, f), label: 0 });
  }
  return { entries, classes: [] };
}

function extractSplit(
  backbone: Backbone,
  split: SplitSpec,
  outDir: string,
  batchSize: number,
): SplitResult {
  const { entries, classes } = listImages(split.dir);
  if (classes.length > backbone.numClasses) {
    throw new Error(
      `${split.dir}: ${classes.length} class folders exceed the backbone's ` +
        `${backbone.numClasses} logit width`,
    );
  }
  const feats: Float32Array[] = [];
  const logits: Float32Array[] = [];
  const labels: number[] = [];
  let skipped = 0;
  for (let start = 0; start < entries.length; start += batchSize) {
    for (const entry of entries.slice(start, start + batchSize)) {
      try {
        const image = decodeImage(entry.file);
        const result = backbone.extract(image);
        feats.push(result.feat);
        logits.push(result.logit);
        labels.push(entry.label);
      } catch (err) {
        skipped += 1;
        process.stderr.write(`skipping ${entry.file}: ${(err as Error).message}\n`);
      }
    }
  }
  const n = feats.length;
  if (n === 0) {
    throw new Error(`${split.dir}: no readable images`);
  }
  const featData = new Float32Array(n * backbone.featureDim);
  const logitData = new Float32Array(n * backbone.numClasses);
  feats.forEach((f, i) => featData.set(f, i * backbone.featureDim));
  logits.forEach((l, i) => logitData.set(l, i * backbone.numClasses));
  const tensors: Tensor[] = [
    { key: "feat", dtype: "float32", shape: [n, backbone.featureDim], data: featData },
    { key: "logit", dtype: "float32", shape: [n, backbone.numClasses], data: logitData },
    { key: "label", dtype: "int32", shape: [n], data: Int32Array.from(labels) },
  ];
  writeBundle(split.name, tensors, outDir, {
    backbone: backbone.id,
    source: split.dir,
    classes,
    skipped,
  });
  return { name: split.name, outDir, count: n, skipped };
}

export function runExtraction(job: ExtractionJob): SplitResult[] {
  const backbone = createBackbone(job.backbone);
  if (job.splits.length === 0) {
    throw new Error("no splits given");
  }
  return job.splits.map((split) =>
    extractSplit(backbone, split, path.join(job.outDir, split.name), job.batchSize),
  );
}
