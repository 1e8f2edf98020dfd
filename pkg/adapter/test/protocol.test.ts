import { spawn, type ChildProcessWithoutNullStreams } from "node:child_process";
import { once } from "node:events";
import { promises as fs } from "node:fs";
import path from "node:path";
import readline from "node:readline";
import { fileURLToPath } from "node:url";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { decodeCstf } from "../src/cstf.js";
import { parseRequestLine } from "../src/protocol.js";

const CLI = path.join(path.dirname(fileURLToPath(import.meta.url)), "..", "dist", "cli.js");

function request(id: number, w: number, h: number, klass = 1) {
  return {
    id,
    image: "img",
    prompts: {
      class: klass,
      image_size: [w, h],
      positives: [{ x: Math.min(1, w - 1), y: Math.min(1, h - 1), score: 0.9 }],
      negatives: [{ x: 0, y: 0, score: -0.4 }],
    },
  };
}

describe("worker protocol", () => {
  let proc: ChildProcessWithoutNullStreams;
  let lines: AsyncIterableIterator<string>;

  async function nextLine(): Promise<string> {
    const { value, done } = await lines.next();
    if (done) throw new Error("worker closed stdout");
    return value;
  }

  beforeAll(async () => {
    proc = spawn(process.execPath, [CLI, "serve", "--mode", "raster"], {
      stdio: ["pipe", "pipe", "pipe"],
    });
    const rl = readline.createInterface({ input: proc.stdout, crlfDelay: Infinity });
    lines = rl[Symbol.asyncIterator]();
  });

  afterAll(async () => {
    proc.stdin.end();
    if (proc.exitCode === null) {
      await once(proc, "exit");
    }
  });

  it("emits the handshake line first", async () => {
    expect(JSON.parse(await nextLine())).toEqual({ protocol: "cyclesam-decode", version: 1 });
  });

  it("answers 50 random requests with readable 3xHxW mask files", async () => {
    let state = 7;
    const rand = () => {
      state = (state * 1103515245 + 12345) % 2147483648;
      return state / 2147483648;
    };
    for (let i = 1; i <= 50; i++) {
      const w = 2 + Math.floor(rand() * 14);
      const h = 2 + Math.floor(rand() * 14);
      proc.stdin.write(`${JSON.stringify(request(i, w, h))}\n`);
      const resp = JSON.parse(await nextLine()) as { id: number; masks?: string; error?: string };
      expect(resp.id).toBe(i);
      expect(resp.error).toBeUndefined();
      const tensor = decodeCstf(await fs.readFile(resp.masks!));
      expect(tensor.dims).toEqual([3, h, w]);
      expect(tensor.dtype).toBe("f32");
    }
  });

  it("answers malformed lines with error responses, then keeps serving", async () => {
    proc.stdin.write("this is not json\n");
    const bad = JSON.parse(await nextLine()) as { id: number; error?: string };
    expect(bad.error).toMatch(/not JSON/);
    proc.stdin.write(`${JSON.stringify({ id: 99, image: "x" })}\n`);
    const missing = JSON.parse(await nextLine()) as { id: number; error?: string };
    expect(missing.id).toBe(99);
    expect(missing.error).toMatch(/malformed/);
    proc.stdin.write(`${JSON.stringify(request(100, 6, 6))}\n`);
    const ok = JSON.parse(await nextLine()) as { id: number; masks?: string };
    expect(ok.id).toBe(100);
    expect(ok.masks).toBeDefined();
  });

  it("rejects prompts outside the image extent", async () => {
    const badReq = request(101, 4, 4);
    badReq.prompts.positives[0].x = 9;
    proc.stdin.write(`${JSON.stringify(badReq)}\n`);
    const resp = JSON.parse(await nextLine()) as { id: number; error?: string };
    expect(resp.id).toBe(101);
    expect(resp.error).toMatch(/outside/);
  });
});

describe("request validation", () => {
  it("accepts a well-formed request", () => {
    const parsed = parseRequestLine(JSON.stringify(request(1, 8, 8)));
    expect(parsed.ok).toBe(true);
  });

  it("flags class 0 and negative ids", () => {
    const bad = request(1, 8, 8, 0);
    const parsed = parseRequestLine(JSON.stringify(bad));
    expect(parsed.ok).toBe(false);
  });
});

describe("raster decoder", () => {
  it("positive disks minus negative disks, three radii", async () => {
    const proc2 = spawn(process.execPath, [CLI, "serve", "--mode", "raster"]);
    const rl = readline.createInterface({ input: proc2.stdout, crlfDelay: Infinity });
    const it2 = rl[Symbol.asyncIterator]();
    await it2.next(); // handshake
    const req = {
      id: 1,
      image: "img",
      prompts: {
        class: 1,
        image_size: [16, 16],
        positives: [{ x: 8, y: 8, score: 1 }],
        negatives: [{ x: 15, y: 15, score: -1 }],
      },
    };
    proc2.stdin.write(`${JSON.stringify(req)}\n`);
    const resp = JSON.parse((await it2.next()).value as string) as { masks: string };
    const tensor = decodeCstf(await fs.readFile(resp.masks));
    const [, h, w] = tensor.dims;
    const plane = (k: number, x: number, y: number) =>
      (tensor.data as Float32Array)[k * h * w + y * w + x];
    expect(plane(0, 8, 8)).toBe(10);   // positive center included
    expect(plane(0, 15, 15)).toBe(-10); // negative center excluded
    expect(plane(2, 0, 0)).toBe(-10);  // tight candidate excludes far corner
    // wider candidate covers at least as much as the tight one
    let wide = 0;
    let tight = 0;
    for (let i = 0; i < h * w; i++) {
      wide += (tensor.data as Float32Array)[1 * h * w + i] > 0 ? 1 : 0;
      tight += (tensor.data as Float32Array)[2 * h * w + i] > 0 ? 1 : 0;
    }
    expect(wide).toBeGreaterThan(tight);
    proc2.stdin.end();
    await once(proc2, "exit");
  });
});
