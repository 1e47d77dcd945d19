// Cross-tool agreement: the same pipeline document submitted through this
// client against one store, and run by the command line against another store
// seeded with the same source bytes, must name identical outputs and carry
// identical cell values.

import { createHash } from "node:crypto";
import { readFileSync } from "node:fs";
import { join } from "node:path";
import { inflateSync } from "node:zlib";

import { beforeAll, describe, expect, it } from "vitest";

import { ArkClient, decodeChunk, encodeChunk, type RunResults } from "../src/index.js";
import { loadState, type HarnessState } from "./harness.js";

let state: HarnessState;
let bob: ArkClient;
let results: RunResults;

interface BundleManifest {
  format: string;
  expected_outputs: Record<string, { kind: string; refs: string[]; label: string[] }>;
  objects: string[];
}

function sha256Hex(data: Uint8Array): string {
  return createHash("sha256").update(data).digest("hex");
}

/** Read one object from the exported bundle, undoing the envelope byte. */
function readBundleObject(bundleDir: string, ref: string): Uint8Array {
  const raw = readFileSync(join(bundleDir, "objects", ref.slice(0, 2), ref.slice(2)));
  const bytes = new Uint8Array(raw.buffer, raw.byteOffset, raw.byteLength);
  const payload =
    bytes[0] === 0
      ? bytes.subarray(1)
      : new Uint8Array(inflateSync(raw.subarray(1)));
  expect(sha256Hex(payload)).toBe(ref);
  return payload;
}

function bundleManifest(bundleDir: string): BundleManifest {
  return JSON.parse(readFileSync(join(bundleDir, "manifest.json"), "utf-8"));
}

beforeAll(async () => {
  state = loadState();
  bob = new ArkClient({ baseUrl: state.baseUrl, token: state.report.tokens["bob"] });
  results = await bob.runPipeline(state.report.doc);
});

describe("pipeline submitted remotely vs run by the command line", () => {
  it("names identical output refs from independent stores", () => {
    expect(results.status).toBe("succeeded");
    const remote: Record<string, string[]> = {};
    for (const [nid, out] of Object.entries(results.outputs!)) {
      remote[nid] = out.refs;
    }
    expect(remote).toEqual(state.report.cli.outputs);
  });

  it("matches the refs recorded in the exported bundle", () => {
    const manifest = bundleManifest(state.report.bundle);
    expect(manifest.format).toBe("ark-bundle/1");
    for (const [nid, out] of Object.entries(results.outputs!)) {
      expect(out.refs).toEqual(manifest.expected_outputs[nid]!.refs);
    }
  });

  it.each(["scaled", "hot"])(
    "serves %s tiles equal to the exported chunks, cell for cell",
    async (nid) => {
      const out = results.outputs![nid]!;
      const layer = out.layer!;
      const manifestBytes = readBundleObject(state.report.bundle, out.refs[0]!);
      const layerManifest = JSON.parse(new TextDecoder().decode(manifestBytes)) as {
        layer_name: string;
        chunk_map: Record<string, string>;
      };
      expect(layerManifest.layer_name).toBe(layer.name);

      for (let ty = 0; ty < layer.tiles_y; ty++) {
        for (let tx = 0; tx < layer.tiles_x; tx++) {
          const exportedRef = layerManifest.chunk_map[`1/${tx}/${ty}`]!;
          const exportedBytes = readBundleObject(state.report.bundle, exportedRef);

          const { bytes, ref } = await bob.fetchTileBytes(
            layer.name, out.refs[0]!, 1, tx, ty,
          );
          expect(ref).toBe(exportedRef);
          expect(Buffer.compare(Buffer.from(bytes), Buffer.from(exportedBytes))).toBe(0);

          const served = decodeChunk(bytes);
          const exported = decodeChunk(exportedBytes);
          expect(served.dtype).toBe(exported.dtype);
          expect(served.width).toBe(exported.width);
          expect(served.height).toBe(exported.height);
          expect(served.nodata).toBe(exported.nodata);
          let diffs = 0;
          for (let i = 0; i < served.values.length; i++) {
            if (!Object.is(served.values[i], exported.values[i])) {
              diffs += 1;
            }
          }
          expect(diffs).toBe(0);
        }
      }
    },
  );

  it("decodes and re-encodes served bytes without changing a bit", async () => {
    const out = results.outputs!["scaled"]!;
    const { bytes } = await bob.fetchTileBytes(out.layer!.name, out.refs[0]!, 1, 0, 0);
    const recoded = encodeChunk(decodeChunk(bytes));
    // Buffer.compare, not toEqual: deep equality walks all 8M elements one
    // by one and freezes the event loop for ten seconds.
    expect(Buffer.compare(Buffer.from(recoded), Buffer.from(bytes))).toBe(0);
  });

  it("confirms the derived values against the document's own arithmetic", async () => {
    const out = results.outputs!["scaled"]!;
    const tile = await bob.fetchTile(out.layer!.name, out.refs[0]!, 1, 0, 0);
    const { width, height } = state.report.layer;
    for (let r = 0; r < height; r++) {
      for (let c = 0; c < width; c++) {
        const src = (3 * r + 5 * c + ((r * c) % 7)) % 251;
        expect(tile.values[r * tile.width + c]).toBe(Math.min(src * 3, 255));
      }
    }
  });
});
