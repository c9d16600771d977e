/**
 * Deterministic image featurizers.
 *
 * Every backbone here is self-contained: weights are derived from the
 * backbone identifier with a seeded PRNG, so extraction is reproducible
 * anywhere with no downloaded model files. Images are resized to 32x32,
 * summarized by per-patch channel statistics, and pushed through a fixed
 * random projection with a tanh nonlinearity; logits come from a second
 * fixed projection. Networked pretrained backbones can be added by
 * implementing the same interface.
 */

import { RgbImage, resizeBilinear } from "./image";

export interface Features {
  feat: Float32Array;
  logit: Float32Array;
}

export interface Backbone {
  id: string;
  featureDim: number;
  numClasses: number;
  extract(image: RgbImage): Features;
}

function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193);
  }
  return hash >>> 0;
}

function mulberry32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

/** Seeded standard normals via Box-Muller. */
function randomMatrix(rows: number, cols: number, seed: number): Float32Array {
  const rand = mulberry32(seed);
  const out = new Float32Array(rows * cols);
  for (let i = 0; i < out.length; i += 2) {
    const u1 = Math.max(rand(), 1e-12);
    const u2 = rand();
    const r = Math.sqrt(-2 * Math.log(u1));
    out[i] = r * Math.cos(2 * Math.PI * u2);
    if (i + 1 < out.length) {
      out[i + 1] = r * Math.sin(2 * Math.PI * u2);
    }
  }
  return out;
}

const SIDE = 32;
const GRID = 4;

/** Per-patch mean and standard deviation per channel: 4x4 x 3 x 2 = 96. */
function patchStats(image: RgbImage): Float32Array {
  const img = resizeBilinear(image, SIDE, SIDE);
  const patch = SIDE / GRID;
  const stats = new Float32Array(GRID * GRID * 6);
  let cursor = 0;
  for (let gy = 0; gy < GRID; gy++) {
    for (let gx = 0; gx < GRID; gx++) {
      for (let c = 0; c < 3; c++) {
        let sum = 0;
        let sumSq = 0;
        for (let y = gy * patch; y < (gy + 1) * patch; y++) {
          for (let x = gx * patch; x < (gx + 1) * patch; x++) {
            const v = img.data[(y * SIDE + x) * 3 + c];
            sum += v;
            sumSq += v * v;
          }
        }
        const n = patch * patch;
        const mean = sum / n;
        stats[cursor++] = mean;
        stats[cursor++] = Math.sqrt(Math.max(sumSq / n - mean * mean, 0));
      }
    }
  }
  return stats;
}

function matVec(matrix: Float32Array, vec: Float32Array, rows: number): Float32Array {
  const cols = vec.length;
  const out = new Float32Array(rows);
  for (let r = 0; r < rows; r++) {
    let acc = 0;
    for (let c = 0; c < cols; c++) {
      acc += matrix[r * cols + c] * vec[c];
    }
    out[r] = acc;
  }
  return out;
}

class PatchProjectionBackbone implements Backbone {
  readonly id: string;
  readonly featureDim: number;
  readonly numClasses: number;
  private readonly w1: Float32Array;
  private readonly w2: Float32Array;

  constructor(id: string, featureDim: number, numClasses: number) {
    this.id = id;
    this.featureDim = featureDim;
    this.numClasses = numClasses;
    const statsDim = GRID * GRID * 6;
    this.w1 = randomMatrix(featureDim, statsDim, fnv1a(`${id}:w1`));
    this.w2 = randomMatrix(numClasses, featureDim, fnv1a(`${id}:w2`));
  }

  extract(image: RgbImage): Features {
    const stats = patchStats(image);
    const hidden = matVec(this.w1, stats, this.featureDim);
    const feat = new Float32Array(this.featureDim);
    for (let i = 0; i < feat.length; i++) {
      feat[i] = Math.tanh(hidden[i]);
    }
    const logit = matVec(this.w2, feat, this.numClasses);
    return { feat, logit };
  }
}

const REGISTRY: Record<string, () => Backbone> = {
  "patchproj-64": () => new PatchProjectionBackbone("patchproj-64", 64, 10),
  "patchproj-128": () => new PatchProjectionBackbone("patchproj-128", 128, 10),
};

export function availableBackbones(): string[] {
  return Object.keys(REGISTRY).sort();
}

export function createBackbone(id: string): Backbone {
  const factory = REGISTRY[id];
  if (!factory) {
    throw new Error(
      `unknown backbone ${id}; available: ${availableBackbones().join(", ")}`,
    );
  }
  return factory();
}
