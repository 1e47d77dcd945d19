import { createHash } from "node:crypto";

import {
  ConnectionError,
  IntegrityError,
  RunFailedError,
  errorForStatus,
} from "./errors.js";
import { decodeChunk, type Tile } from "./wire.js";

export interface LayerRow {
  name: string;
  latest: string;
  label: string[];
  crs: number;
  affine: [number, number, number, number];
  width: number;
  height: number;
  dtype: string;
  nodata: number | null;
  band_count: number;
  tiles_x: number;
  tiles_y: number;
}

export interface VersionRow {
  commit: string;
  manifest: string;
  message: string;
  created_at: string;
  label: string[];
  time_stamp: string | null;
}

export interface RunStatus {
  run_id: string;
  status: "queued" | "running" | "succeeded" | "failed";
  executed?: number;
  cache_hits?: number;
  error?: string | null;
  doc_hash?: string;
  started?: string;
  finished?: string;
}

export interface OutputLayerInfo {
  name: string;
  crs: number;
  affine: [number, number, number, number];
  width: number;
  height: number;
  dtype: string;
  nodata: number | null;
  tiles_x: number;
  tiles_y: number;
}

export interface RunOutput {
  kind?: "layer" | "table" | "diff";
  refs: string[];
  label?: string[];
  denied?: boolean;
  layer?: OutputLayerInfo;
  stats?: unknown;
  changed_count?: number;
}

export interface RunResults {
  run_id: string;
  status: string;
  error?: string | null;
  outputs?: Record<string, RunOutput>;
}

export interface FetchedTile extends Tile {
  /** Content hash of the canonical bytes, from X-Chunk-Ref and re-verified locally. */
  ref: string;
}

export interface SubscriptionInfo {
  id: string;
  layer: string;
  aoi: number[] | null;
}

export interface WaitOptions {
  /** Polling interval in milliseconds. Default 100. */
  pollMs?: number;
  /** Give up after this many milliseconds. Default 120000. */
  timeoutMs?: number;
}

export interface ClientOptions {
  /** Service root, e.g. "http://127.0.0.1:8471". */
  baseUrl: string;
  /** Bearer token; omit to make unauthenticated requests. */
  token?: string;
  /** Override fetch, mostly for tests. */
  fetchImpl?: typeof fetch;
}

function sha256Hex(data: Uint8Array): string {
  return createHash("sha256").update(data).digest("hex");
}

const sleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

/**
 * Handle for one submitted run. Poll with status(), block with wait(),
 * then read results(). One handle per thread of control; nothing is cached
 * client-side, the server's memoization is the cache.
 */
export class RunHandle {
  constructor(
    private readonly client: ArkClient,
    readonly id: string,
  ) {}

  status(): Promise<RunStatus> {
    return this.client.runStatus(this.id);
  }

  /**
   * Poll until the run leaves queued/running. Resolves with the terminal
   * status; a failed run raises RunFailedError carrying the recorded error.
   */
  async wait(opts: WaitOptions = {}): Promise<RunStatus> {
    const pollMs = opts.pollMs ?? 100;
    const deadline = Date.now() + (opts.timeoutMs ?? 120_000);
    for (;;) {
      const st = await this.status();
      if (st.status === "succeeded") {
        return st;
      }
      if (st.status === "failed") {
        throw new RunFailedError(st.error ?? "run failed");
      }
      if (Date.now() >= deadline) {
        throw new ConnectionError(`run ${this.id} still ${st.status} after timeout`);
      }
      await sleep(pollMs);
    }
  }

  results(): Promise<RunResults> {
    return this.client.results(this.id);
  }
}

export class ArkClient {
  private readonly baseUrl: string;
  private readonly token: string | undefined;
  private readonly fetchImpl: typeof fetch;

  constructor(opts: ClientOptions) {
    this.baseUrl = opts.baseUrl.replace(/\/+$/, "");
    this.token = opts.token;
    this.fetchImpl = opts.fetchImpl ?? fetch;
  }

  private headers(extra?: Record<string, string>): Record<string, string> {
    const h: Record<string, string> = { ...extra };
    if (this.token !== undefined) {
      h["Authorization"] = `Bearer ${this.token}`;
    }
    return h;
  }

  private async request(method: string, path: string, body?: unknown): Promise<Response> {
    let res: Response;
    try {
      res = await this.fetchImpl(this.baseUrl + path, {
        method,
        headers: this.headers(
          body === undefined ? undefined : { "Content-Type": "application/json" },
        ),
        body: body === undefined ? undefined : JSON.stringify(body),
      });
    } catch (exc) {
      throw new ConnectionError(`cannot reach ${this.baseUrl}: ${String(exc)}`);
    }
    if (!res.ok) {
      let detail = `HTTP ${res.status}`;
      try {
        const obj = (await res.json()) as { detail?: unknown };
        if (typeof obj.detail === "string") {
          detail = obj.detail;
        }
      } catch {
        // non-JSON error body; keep the status line
      }
      throw errorForStatus(res.status, detail);
    }
    return res;
  }

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.request("GET", path);
    return (await res.json()) as T;
  }

  /** Cheap authenticated call; resolves when the token works. */
  async connect(): Promise<void> {
    await this.listLayers();
  }

  async listLayers(): Promise<LayerRow[]> {
    const body = await this.getJson<{ layers: LayerRow[] }>("/layers");
    return body.layers;
  }

  async layerVersions(name: string): Promise<VersionRow[]> {
    const body = await this.getJson<{ layer: string; versions: VersionRow[] }>(
      `/layers/${encodeURIComponent(name)}/versions`,
    );
    return body.versions;
  }

  /** Submit a pipeline document. Authorization is checked before any compute. */
  async submitRun(doc: unknown, workers = 2): Promise<RunHandle> {
    const res = await this.request("POST", `/runs?workers=${workers}`, doc);
    const body = (await res.json()) as { run_id: string };
    return new RunHandle(this, body.run_id);
  }

  /** Submit and block until the run succeeds; returns the results. */
  async runPipeline(doc: unknown, opts: WaitOptions = {}): Promise<RunResults> {
    const handle = await this.submitRun(doc);
    await handle.wait(opts);
    return handle.results();
  }

  runStatus(runId: string): Promise<RunStatus> {
    return this.getJson<RunStatus>(`/runs/${encodeURIComponent(runId)}`);
  }

  results(runId: string): Promise<RunResults> {
    return this.getJson<RunResults>(`/results/${encodeURIComponent(runId)}`);
  }

  /** Raw canonical chunk bytes for one tile, re-hashed against X-Chunk-Ref. */
  async fetchTileBytes(
    name: string,
    manifest: string,
    band: number,
    tx: number,
    ty: number,
  ): Promise<{ bytes: Uint8Array; ref: string }> {
    const res = await this.request(
      "GET",
      `/tiles/${encodeURIComponent(name)}/${manifest}/${band}/${tx}/${ty}`,
    );
    const bytes = new Uint8Array(await res.arrayBuffer());
    const ref = res.headers.get("x-chunk-ref") ?? "";
    const actual = sha256Hex(bytes);
    if (ref !== actual) {
      throw new IntegrityError(`tile bytes hash to ${actual}, server said ${ref}`);
    }
    return { bytes, ref };
  }

  /** One tile decoded to a typed array plus its nodata sentinel. */
  async fetchTile(
    name: string,
    manifest: string,
    band: number,
    tx: number,
    ty: number,
  ): Promise<FetchedTile> {
    const { bytes, ref } = await this.fetchTileBytes(name, manifest, band, tx, ty);
    return { ...decodeChunk(bytes), ref };
  }

  provenance(ref: string): Promise<{ ref: string; tree: unknown }> {
    return this.getJson(`/provenance/${ref}`);
  }

  async subscribe(sub: {
    layer: string;
    url: string;
    aoi?: [number, number, number, number];
    predicate?: string;
  }): Promise<SubscriptionInfo> {
    const res = await this.request("POST", "/subscriptions", sub);
    return (await res.json()) as SubscriptionInfo;
  }

  async unsubscribe(id: string): Promise<void> {
    await this.request("DELETE", `/subscriptions/${encodeURIComponent(id)}`);
  }
}

/** Build a client and verify the token against the catalog endpoint. */
export async function connect(baseUrl: string, token?: string): Promise<ArkClient> {
  const client = new ArkClient({ baseUrl, token });
  await client.connect();
  return client;
}
