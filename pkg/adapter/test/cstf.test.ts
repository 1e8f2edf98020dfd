import { describe, expect, it } from "vitest";

import { decodeCstf, encodeCstf, type CstfTensor } from "../src/cstf.js";

function randomTensor(seedState: { v: number }): CstfTensor {
  // deterministic LCG so failures reproduce
  const next = () => {
    seedState.v = (seedState.v * 1103515245 + 12345) % 2147483648;
    return seedState.v / 2147483648;
  };
  const ndim = 1 + Math.floor(next() * 4);
  const dims = Array.from({ length: ndim }, () => 1 + Math.floor(next() * 5));
  const count = dims.reduce((a, b) => a * b, 1);
  if (next() < 0.5) {
    const data = new Float32Array(count);
    for (let i = 0; i < count; i++) data[i] = Math.fround(next() * 4 - 2);
    return { dims, dtype: "f32", data };
  }
  const data = new Uint8Array(count);
  for (let i = 0; i < count; i++) data[i] = Math.floor(next() * 256);
  return { dims, dtype: "u8", data };
}

describe("cstf container", () => {
  it("round-trips 100 random tensors byte-exactly", () => {
    const state = { v: 42 };
    for (let i = 0; i < 100; i++) {
      const t = randomTensor(state);
      const buf = encodeCstf(t);
      const back = decodeCstf(buf);
      expect(back.dims).toEqual(t.dims);
      expect(back.dtype).toBe(t.dtype);
      expect(Array.from(back.data)).toEqual(Array.from(t.data));
      expect(encodeCstf(back).equals(buf)).toBe(true);
    }
  });

  it("writes the documented header layout", () => {
    const buf = encodeCstf({ dims: [1, 3], dtype: "f32", data: new Float32Array([1, 2, 3]) });
    expect(buf.subarray(0, 4).toString("ascii")).toBe("CSTF");
    expect(buf.readUInt8(4)).toBe(1);
    expect(buf.readUInt8(5)).toBe(2);
    expect(buf.readUInt32LE(6)).toBe(1);
    expect(buf.readUInt32LE(10)).toBe(3);
    expect(buf.readUInt8(14)).toBe(1);
    expect(buf.length).toBe(15 + 12);
  });

  it("rejects bad magic, truncation, bad dtype, non-finite floats", () => {
    expect(() => decodeCstf(Buffer.from("NOPE"))).toThrow(/magic/);
    const good = encodeCstf({ dims: [4], dtype: "u8", data: new Uint8Array(4) });
    expect(() => decodeCstf(good.subarray(0, good.length - 1))).toThrow(/length/);
    const bad = Buffer.from(good);
    bad.writeUInt8(9, 10); // dtype byte of a 1-d tensor
    expect(() => decodeCstf(bad)).toThrow(/dtype/);
    expect(() =>
      encodeCstf({ dims: [1], dtype: "f32", data: new Float32Array([Number.NaN]) }),
    ).toThrow(/non-finite/);
  });

  it("rejects zero extents and shape mismatches", () => {
    expect(() =>
      encodeCstf({ dims: [0, 2], dtype: "u8", data: new Uint8Array(0) }),
    ).toThrow(/extents/);
    expect(() =>
      encodeCstf({ dims: [2, 2], dtype: "u8", data: new Uint8Array(3) }),
    ).toThrow(/payload length/);
  });
});
