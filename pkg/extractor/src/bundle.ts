/**
 * Tensor bundle writer: a directory holding manifest.json plus one raw
 * binary file per tensor. Payloads are little-endian, row-major, unpadded
 * and CRC32-checksummed, matching the consumer's on-disk contract exactly.
 */

import * as fs from "fs";
import * as path from "path";
import { crc32 } from "./crc32";

export type Dtype = "float32" | "int32";

export interface Tensor {
  key: string;
  dtype: Dtype;
  shape: number[];
  data: Float32Array | Int32Array;
}

export interface ManifestEntry {
  key: string;
  dtype: Dtype;
  shape: number[];
  file: string;
  crc32: number;
}

export interface Manifest {
  name: string;
  tensors: ManifestEntry[];
  meta?: Record<string, unknown>;
}

function payloadBytes(tensor: Tensor): Uint8Array {
  // serialize through a DataView so the wire format is little-endian on
  // any host, independent of platform endianness
  const itemSize = 4;
  const out = new Uint8Array(tensor.data.length * itemSize);
  const view = new DataView(out.buffer);
  if (tensor.dtype === "float32") {
    const data = tensor.data as Float32Array;
    for (let i = 0; i < data.length; i++) {
      view.setFloat32(i * itemSize, data[i], true);
    }
  } else {
    const data = tensor.data as Int32Array;
    for (let i = 0; i < data.length; i++) {
      view.setInt32(i * itemSize, data[i], true);
    }
  }
  return out;
}

export function writeBundle(
  name: string,
  tensors: Tensor[],
  directory: string,
  meta?: Record<string, unknown>,
): Manifest {
  fs.mkdirSync(directory, { recursive: true });
  const entries: ManifestEntry[] = [];
  const sorted = [...tensors].sort((a, b) => (a.key < b.key ? -1 : 1));
  for (const tensor of sorted) {
    const count = tensor.shape.reduce((a, b) => a * b, 1);
    if (count !== tensor.data.length) {
      throw new Error(
        `tensor ${tensor.key}: shape [${tensor.shape}] does not match ` +
          `${tensor.data.length} values`,
      );
    }
    const payload = payloadBytes(tensor);
    const file = `${tensor.key}.bin`;
    fs.writeFileSync(path.join(directory, file), payload);
    entries.push({
      key: tensor.key,
      dtype: tensor.dtype,
      shape: tensor.shape,
      file,
      crc32: crc32(payload),
    });
  }
  const manifest: Manifest = { name, tensors: entries };
  if (meta && Object.keys(meta).length > 0) {
    manifest.meta = meta;
  }
  fs.writeFileSync(
    path.join(directory, "manifest.json"),
    JSON.stringify(manifest, null, 2) + "\n",
  );
  return manifest;
}

/** Read a bundle back (used by the tests to verify round trips). */
export function readBundle(directory: string): {
  manifest: Manifest;
  tensors: Map<string, Tensor>;
} {
  const manifest: Manifest = JSON.parse(
    fs.readFileSync(path.join(directory, "manifest.json"), "utf-8"),
  );
  const tensors = new Map<string, Tensor>();
  for (const entry of manifest.tensors) {
    const payload = fs.readFileSync(path.join(directory, entry.file));
    const bytes = new Uint8Array(payload.buffer, payload.byteOffset, payload.length);
    if (crc32(bytes) !== entry.crc32) {
      throw new Error(`tensor ${entry.key}: CRC mismatch`);
    }
    const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.length);
    const count = bytes.length / 4;
    if (entry.dtype === "float32") {
      const data = new Float32Array(count);
      for (let i = 0; i < count; i++) data[i] = view.getFloat32(i * 4, true);
      tensors.set(entry.key, { key: entry.key, dtype: entry.dtype, shape: entry.shape, data });
    } else {
      const data = new Int32Array(count);
      for (let i = 0; i < count; i++) data[i] = view.getInt32(i * 4, true);
      tensors.set(entry.key, { key: entry.key, dtype: entry.dtype, shape: entry.shape, data });
    }
  }
  return { manifest, tensors };
}
