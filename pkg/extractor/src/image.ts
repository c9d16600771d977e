/** PNG/JPEG decoding to normalized RGB plus bilinear resizing. */

import * as fs from "fs";
import { PNG } from "pngjs";
import * as jpeg from "jpeg-js";

export interface RgbImage {
  width: number;
  height: number;
  /** interleaved RGB in [0, 1], length = width * height * 3 */
  data: Float32Array;
}

const PNG_MAGIC = Buffer.from([0x89, 0x50, 0x4e, 0x47]);
const JPEG_MAGIC = Buffer.from([0xff, 0xd8]);

function fromRgba(width: number, height: number, rgba: Uint8Array): RgbImage {
  const data = new Float32Array(width * height * 3);
  for (let p = 0; p < width * height; p++) {
    data[p * 3] = rgba[p * 4] / 255;
    data[p * 3 + 1] = rgba[p * 4 + 1] / 255;
    data[p * 3 + 2] = rgba[p * 4 + 2] / 255;
  }
  return { width, height, data };
}

export function decodeImage(filePath: string): RgbImage {
  const raw = fs.readFileSync(filePath);
  if (raw.subarray(0, 4).equals(PNG_MAGIC)) {
    const png = PNG.sync.read(raw);
    return fromRgba(png.width, png.height, png.data);
  }
  if (raw.subarray(0, 2).equals(JPEG_MAGIC)) {
    const img = jpeg.decode(raw, { useTArray: true, maxMemoryUsageInMB: 256 });
    return fromRgba(img.width, img.height, img.data);
  }
  throw new Error(`${filePath}: not a PNG or JPEG file`);
}

export function resizeBilinear(img: RgbImage, width: number, height: number): RgbImage {
  const out = new Float32Array(width * height * 3);
  const sx = img.width / width;
  const sy = img.height / height;
  for (let y = 0; y < height; y++) {
    const fy = Math.min((y + 0.5) * sy - 0.5, img.height - 1);
    const y0 = Math.max(Math.floor(fy), 0);
    const y1 = Math.min(y0 + 1, img.height - 1);
    const wy = Math.max(fy - y0, 0);
    for (let x = 0; x < width; x++) {
      const fx = Math.min((x + 0.5) * sx - 0.5, img.width - 1);
      const x0 = Math.max(Math.floor(fx), 0);
      const x1 = Math.min(x0 + 1, img.width - 1);
      const wx = Math.max(fx - x0, 0);
      for (let c = 0; c < 3; c++) {
        const v00 = img.data[(y0 * img.width + x0) * 3 + c];
        const v01 = img.data[(y0 * img.width + x1) * 3 + c];
        const v10 = img.data[(y1 * img.width + x0) * 3 + c];
        const v11 = img.data[(y1 * img.width + x1) * 3 + c];
        const top = v00 + (v01 - v00) * wx;
        const bottom = v10 + (v11 - v10) * wx;
        out[(y * width + x) * 3 + c] = top + (bottom - top) * wy;
      }
    }
  }
  return { width, height, data: out };
}
