/**
 * Built-in deterministic image encoder: a smoothed color/gradient pyramid.
 *
 * Tap t halves the resolution t times with 2x2 box averaging and emits 8
 * channels at that scale: R, G, B, luminance, horizontal/vertical central
 * differences, gradient magnitude, and local contrast (deviation from a
 * 3x3 mean). Channels are left unnormalized; the consumer normalizes.
 */

import type { CstfTensor } from "./cstf.js";
import type { RgbImage } from "./image.js";

export const FEATURE_CHANNELS = 8;

export function encodeFeatures(image: RgbImage, tap: number): CstfTensor {
  if (tap < 0 || tap > 8) throw new Error(`tap ${tap} out of range 0-8`);
  let { width: w, height: h } = image;
  let planes = image.planes;
  for (let t = 0; t < tap; t++) {
    if (w < 2 || h < 2) break;
    ({ planes, w, h } = boxHalve(planes, w, h));
  }
  const n = w * h;
  const r = planes.subarray(0, n);
  const g = planes.subarray(n, 2 * n);
  const b = planes.subarray(2 * n, 3 * n);
  const luma = new Float64Array(n);
  for (let i = 0; i < n; i++) luma[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
  const gx = centralDiffX(luma, w, h);
  const gy = centralDiffY(luma, w, h);
  const mag = new Float64Array(n);
  for (let i = 0; i < n; i++) mag[i] = Math.sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
  const contrast = localContrast(luma, w, h);

  const data = new Float32Array(FEATURE_CHANNELS * n);
  const channels = [r, g, b, luma, gx, gy, mag, contrast];
  channels.forEach((ch, k) => {
    for (let i = 0; i < n; i++) data[k * n + i] = ch[i];
  });
  return { dims: [FEATURE_CHANNELS, h, w], dtype: "f32", data };
}

function boxHalve(planes: Float64Array, w: number, h: number) {
  const w2 = Math.floor(w / 2);
  const h2 = Math.floor(h / 2);
  const out = new Float64Array(3 * w2 * h2);
  for (let p = 0; p < 3; p++) {
    const src = planes.subarray(p * w * h, (p + 1) * w * h);
    const dst = out.subarray(p * w2 * h2, (p + 1) * w2 * h2);
    for (let y = 0; y < h2; y++) {
      for (let x = 0; x < w2; x++) {
        const i = 2 * y * w + 2 * x;
        dst[y * w2 + x] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) / 4;
      }
    }
  }
  return { planes: out, w: w2, h: h2 };
}

function centralDiffX(v: Float64Array, w: number, h: number): Float64Array {
  const out = new Float64Array(w * h);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const xm = Math.max(0, x - 1);
      const xp = Math.min(w - 1, x + 1);
      out[y * w + x] = (v[y * w + xp] - v[y * w + xm]) / 2;
    }
  }
  return out;
}

function centralDiffY(v: Float64Array, w: number, h: number): Float64Array {
  const out = new Float64Array(w * h);
  for (let y = 0; y < h; y++) {
    const ym = Math.max(0, y - 1);
    const yp = Math.min(h - 1, y + 1);
    for (let x = 0; x < w; x++) {
      out[y * w + x] = (v[yp * w + x] - v[ym * w + x]) / 2;
    }
  }
  return out;
}

function localContrast(v: Float64Array, w: number, h: number): Float64Array {
  const out = new Float64Array(w * h);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      let sum = 0;
      let count = 0;
      for (let dy = -1; dy <= 1; dy++) {
        for (let dx = -1; dx <= 1; dx++) {
          const yy = y + dy;
          const xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w) {
            sum += v[yy * w + xx];
            count++;
          }
        }
      }
      out[y * w + x] = v[y * w + x] - sum / count;
    }
  }
  return out;
}
