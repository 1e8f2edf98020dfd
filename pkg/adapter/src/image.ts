/**
 * Minimal image loading: PNG (via pngjs), binary PPM (P6) and PGM (P5).
 * Pixels come back planar RGB in [0, 1].
 */

import { promises as fs } from "node:fs";
import { PNG } from "pngjs";

export interface RgbImage {
  width: number;
  height: number;
  /** planar, length 3 * width * height, values in [0, 1] */
  planes: Float64Array;
}

export async function loadImage(path: string): Promise<RgbImage> {
  const buf = await fs.readFile(path);
  if (buf.length >= 8 && buf.readUInt32BE(0) === 0x89504e47) {
    return fromPng(buf);
  }
  if (buf.length >= 2 && buf[0] === 0x50 && (buf[1] === 0x35 || buf[1] === 0x36)) {
    return fromPnm(buf);
  }
  throw new Error(`${path}: not a PNG, PPM (P6) or PGM (P5) image`);
}

function fromPng(buf: Buffer): RgbImage {
  const png = PNG.sync.read(buf);
  const { width, height, data } = png;
  const n = width * height;
  const planes = new Float64Array(3 * n);
  for (let i = 0; i < n; i++) {
    planes[i] = data[i * 4] / 255;
    planes[n + i] = data[i * 4 + 1] / 255;
    planes[2 * n + i] = data[i * 4 + 2] / 255;
  }
  return { width, height, planes };
}

function fromPnm(buf: Buffer): RgbImage {
  // header: magic, whitespace-separated width/height/maxval, single
  // whitespace byte, then raw samples; '#' starts a comment
  let pos = 2;
  const fields: number[] = [];
  while (fields.length < 3) {
    while (pos < buf.length && isSpace(buf[pos])) pos++;
    if (buf[pos] === 0x23) {
      while (pos < buf.length && buf[pos] !== 0x0a) pos++;
      continue;
    }
    let start = pos;
    while (pos < buf.length && !isSpace(buf[pos])) pos++;
    fields.push(parseInt(buf.toString("ascii", start, pos), 10));
  }
  pos++; // the single whitespace after maxval
  const [width, height, maxval] = fields;
  if (!(width >= 1 && height >= 1 && maxval >= 1 && maxval <= 255)) {
    throw new Error(`unsupported PNM geometry ${fields}`);
  }
  const gray = buf[1] === 0x35;
  const n = width * height;
  const needed = gray ? n : 3 * n;
  if (buf.length - pos < needed) throw new Error("truncated PNM payload");
  const planes = new Float64Array(3 * n);
  for (let i = 0; i < n; i++) {
    if (gray) {
      const v = buf[pos + i] / maxval;
      planes[i] = planes[n + i] = planes[2 * n + i] = v;
    } else {
      planes[i] = buf[pos + 3 * i] / maxval;
      planes[n + i] = buf[pos + 3 * i + 1] / maxval;
      planes[2 * n + i] = buf[pos + 3 * i + 2] / maxval;
    }
  }
  return { width, height, planes };
}

function isSpace(b: number): boolean {
  return b === 0x20 || b === 0x09 || b === 0x0a || b === 0x0d;
}

/** Grayscale image reinterpreted as integer class labels (0 = background). */
export async function loadLabelMask(path: string): Promise<{ width: number; height: number; labels: Uint8Array }> {
  const buf = await fs.readFile(path);
  if (buf.length >= 8 && buf.readUInt32BE(0) === 0x89504e47) {
    const png = PNG.sync.read(buf);
    const labels = new Uint8Array(png.width * png.height);
    for (let i = 0; i < labels.length; i++) labels[i] = png.data[i * 4];
    return { width: png.width, height: png.height, labels };
  }
  if (buf.length >= 2 && buf[0] === 0x50 && buf[1] === 0x35) {
    const img = fromPnm(buf);
    const n = img.width * img.height;
    const labels = new Uint8Array(n);
    for (let i = 0; i < n; i++) labels[i] = Math.round(img.planes[i] * 255);
    return { width: img.width, height: img.height, labels };
  }
  throw new Error(`${path}: label masks must be PNG or PGM (P5)`);
}
