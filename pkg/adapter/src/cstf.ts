/**
 * CSTF-1 tensor container: "CSTF" magic, version 0x01, u8 ndim (1-4),
 * ndim little-endian u32 extents, u8 dtype (1 = f32 LE, 2 = u8), row-major
 * payload. Byte layout must round-trip bit-exactly.
 */

import { promises as fs } from "node:fs";

const MAGIC = Buffer.from("CSTF", "ascii");
const VERSION = 1;

export type CstfDtype = "f32" | "u8";

export interface CstfTensor {
  dims: number[];
  dtype: CstfDtype;
  /** row-major payload; Float32Array for f32, Uint8Array for u8 */
  data: Float32Array | Uint8Array;
}

function elementCount(dims: number[]): number {
  return dims.reduce((a, b) => a * b, 1);
}

export function encodeCstf(tensor: CstfTensor): Buffer {
  const { dims, dtype, data } = tensor;
  if (dims.length < 1 || dims.length > 4) {
    throw new Error(`CSTF-1 holds 1-4 axes, got ${dims.length}`);
  }
  if (dims.some((d) => !Number.isInteger(d) || d < 1)) {
    throw new Error(`bad extents ${dims}`);
  }
  const count = elementCount(dims);
  if (data.length !== count) {
    throw new Error(`payload length ${data.length} != product(dims) ${count}`);
  }
  const header = Buffer.alloc(6 + 4 * dims.length + 1);
  MAGIC.copy(header, 0);
  header.writeUInt8(VERSION, 4);
  header.writeUInt8(dims.length, 5);
  dims.forEach((d, i) => header.writeUInt32LE(d, 6 + 4 * i));
  header.writeUInt8(dtype === "f32" ? 1 : 2, 6 + 4 * dims.length);
  let payload: Buffer;
  if (dtype === "f32") {
    if (!(data instanceof Float32Array)) throw new Error("f32 tensor needs Float32Array data");
    for (const v of data) {
      if (!Number.isFinite(v)) throw new Error("refusing to serialize non-finite float payload");
    }
    payload = Buffer.alloc(count * 4);
    for (let i = 0; i < count; i++) payload.writeFloatLE(data[i], i * 4);
  } else {
    if (!(data instanceof Uint8Array)) throw new Error("u8 tensor needs Uint8Array data");
    payload = Buffer.from(data);
  }
  return Buffer.concat([header, payload]);
}

export function decodeCstf(buf: Buffer): CstfTensor {
  if (buf.length < 6 || !buf.subarray(0, 4).equals(MAGIC)) {
    throw new Error("bad magic; not a CSTF-1 file");
  }
  if (buf.readUInt8(4) !== VERSION) throw new Error(`unsupported CSTF version ${buf.readUInt8(4)}`);
  const ndim = buf.readUInt8(5);
  if (ndim < 1 || ndim > 4) throw new Error(`ndim ${ndim} out of range 1-4`);
  if (buf.length < 6 + 4 * ndim + 1) throw new Error("truncated header");
  const dims: number[] = [];
  for (let i = 0; i < ndim; i++) dims.push(buf.readUInt32LE(6 + 4 * i));
  if (dims.some((d) => d < 1)) throw new Error(`zero extent in dims ${dims}`);
  const code = buf.readUInt8(6 + 4 * ndim);
  const offset = 6 + 4 * ndim + 1;
  const count = elementCount(dims);
  if (code === 1) {
    if (buf.length - offset !== count * 4) throw new Error("payload length mismatch");
    const data = new Float32Array(count);
    for (let i = 0; i < count; i++) {
      data[i] = buf.readFloatLE(offset + i * 4);
      if (!Number.isFinite(data[i])) throw new Error("float payload contains NaN/Inf");
    }
    return { dims, dtype: "f32", data };
  }
  if (code === 2) {
    if (buf.length - offset !== count) throw new Error("payload length mismatch");
    return { dims, dtype: "u8", data: new Uint8Array(buf.subarray(offset)) };
  }
  throw new Error(`unknown dtype code ${code}`);
}

export async function writeCstf(path: string, tensor: CstfTensor): Promise<void> {
  const tmp = `${path}.tmp.${process.pid}`;
  await fs.writeFile(tmp, encodeCstf(tensor));
  await fs.rename(tmp, path);
}

export async function readCstf(path: string): Promise<CstfTensor> {
  return decodeCstf(await fs.readFile(path));
}
