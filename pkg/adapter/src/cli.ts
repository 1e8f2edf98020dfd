#!/usr/bin/env node
/**
 * adapter serve  --mode echo|raster [--echo-value V] [--config FILE]
 * adapter export --image IMG --out DIR [--taps 1,2] [--prefix ref]
 *                [--mask-image IMG]
 *
 * serve speaks the decoder wire protocol on stdio; export writes per-tap
 * CSTF-1 feature maps (and optionally a u8 label mask) for the matcher.
 */

import { promises as fs } from "node:fs";
import path from "node:path";
import process from "node:process";

import { writeCstf } from "./cstf.js";
import { encodeFeatures } from "./features.js";
import { loadImage, loadLabelMask } from "./image.js";
import { serve, type ServeConfig } from "./serve.js";

function parseArgs(argv: string[]): Map<string, string> {
  const out = new Map<string, string>();
  for (let i = 0; i < argv.length; i++) {
    const a = argv[i];
    if (!a.startsWith("--")) throw new Error(`unexpected argument ${a}`);
    const next = argv[i + 1];
    if (next === undefined || next.startsWith("--")) {
      out.set(a.slice(2), "true");
    } else {
      out.set(a.slice(2), next);
      i++;
    }
  }
  return out;
}

async function runServe(args: Map<string, string>): Promise<number> {
  let mode = args.get("mode") ?? "echo";
  let echoValue = Number(args.get("echo-value") ?? "4");
  const configPath = args.get("config");
  if (configPath) {
    const config = JSON.parse(await fs.readFile(configPath, "utf8")) as Partial<ServeConfig>;
    if (config.mode) mode = config.mode;
    if (typeof config.echoValue === "number") echoValue = config.echoValue;
  }
  if (mode !== "echo" && mode !== "raster") {
    throw new Error(`unknown serve mode ${mode}`);
  }
  return serve({ mode, echoValue });
}

async function runExport(args: Map<string, string>): Promise<number> {
  const imagePath = args.get("image");
  const outDir = args.get("out");
  if (!imagePath || !outDir) throw new Error("export needs --image and --out");
  const taps = (args.get("taps") ?? "1,2")
    .split(",")
    .map((t) => parseInt(t.trim(), 10));
  if (taps.length === 0 || taps.some((t) => !Number.isInteger(t) || t < 0)) {
    throw new Error(`bad --taps value; expected comma-separated stage numbers`);
  }
  const prefix = args.get("prefix") ?? path.basename(imagePath).replace(/\.[^.]+$/, "");
  await fs.mkdir(outDir, { recursive: true });
  const image = await loadImage(imagePath);
  const written: string[] = [];
  for (const tap of taps) {
    const tensor = encodeFeatures(image, tap);
    const file = path.join(outDir, `${prefix}_s${tap}.cstf`);
    await writeCstf(file, tensor);
    written.push(file);
    process.stderr.write(
      `exported tap ${tap}: ${tensor.dims.join("x")} -> ${file}\n`,
    );
  }
  const maskImage = args.get("mask-image");
  if (maskImage) {
    const mask = await loadLabelMask(maskImage);
    const file = path.join(outDir, `${prefix}_mask.cstf`);
    await writeCstf(file, {
      dims: [mask.height, mask.width],
      dtype: "u8",
      data: mask.labels,
    });
    written.push(file);
    process.stderr.write(`exported mask: ${mask.height}x${mask.width} -> ${file}\n`);
  }
  process.stdout.write(`${JSON.stringify({ files: written })}\n`);
  return 0;
}

async function main(): Promise<number> {
  const [command, ...rest] = process.argv.slice(2);
  try {
    const args = parseArgs(rest);
    if (command === "serve") return await runServe(args);
    if (command === "export") return await runExport(args);
    process.stderr.write("usage: adapter serve|export [options]\n");
    return 1;
  } catch (err) {
    process.stderr.write(`error: ${err instanceof Error ? err.message : String(err)}\n`);
    return 1;
  }
}

main().then(
  (code) => process.exit(code),
  (err) => {
    process.stderr.write(`fatal: ${String(err)}\n`);
    process.exit(1);
  },
);
