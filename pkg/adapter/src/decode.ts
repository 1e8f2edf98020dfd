/**
 * Candidate-mask synthesis for the worker.
 *
 * "echo" returns three constant grids (CI fixture). "raster" rasterizes the
 * prompts themselves: candidate 1 is the union of disks around positive
 * points minus disks around negatives, candidates 2 and 3 are wider and
 * tighter variants, mirroring a promptable decoder's whole/part ambiguity.
 * A real checkpoint-backed model would slot in as a third mode; none ships
 * here. Grids are +/-10 logits, 3 x H x W float32.
 */

import type { CstfTensor } from "./cstf.js";
import { CANDIDATES, type PromptSet } from "./protocol.js";

const LOGIT = 10.0;

export type DecodeMode = "echo" | "raster";

export function synthesizeMasks(mode: DecodeMode, prompts: PromptSet, value = 4.0): CstfTensor {
  const [w, h] = prompts.image_size;
  const data = new Float32Array(CANDIDATES * h * w);
  if (mode === "echo") {
    data.fill(value);
    return { dims: [CANDIDATES, h, w], dtype: "f32", data };
  }
  const radius = Math.max(2, Math.round(Math.min(w, h) / 8));
  const radii = [radius, Math.round(radius * 1.5), Math.max(1, Math.round(radius * 0.5))];
  for (let cand = 0; cand < CANDIDATES; cand++) {
    const r = radii[cand];
    const grid = rasterize(prompts, w, h, r);
    const base = cand * h * w;
    for (let i = 0; i < h * w; i++) {
      data[base + i] = grid[i] ? LOGIT : -LOGIT;
    }
  }
  return { dims: [CANDIDATES, h, w], dtype: "f32", data };
}

function rasterize(prompts: PromptSet, w: number, h: number, radius: number): Uint8Array {
  const grid = new Uint8Array(h * w);
  const r2 = radius * radius;
  for (const p of prompts.positives) {
    stamp(grid, w, h, p.x, p.y, r2, 1);
  }
  for (const p of prompts.negatives) {
    stamp(grid, w, h, p.x, p.y, r2, 0);
  }
  return grid;
}

function stamp(
  grid: Uint8Array, w: number, h: number,
  cx: number, cy: number, r2: number, value: number,
): void {
  const r = Math.ceil(Math.sqrt(r2));
  for (let y = Math.max(0, cy - r); y <= Math.min(h - 1, cy + r); y++) {
    for (let x = Math.max(0, cx - r); x <= Math.min(w - 1, cx + r); x++) {
      const dx = x - cx;
      const dy = y - cy;
      if (dx * dx + dy * dy <= r2) grid[y * w + x] = value;
    }
  }
}
