// Typed client for the latent-editor API.  The fetch function is injected
// so tests can capture request payloads without a server.

export interface PoseJson {
  tx: number;
  ty: number;
  theta: number;
}

export interface SetInfo {
  name: string;
  N: number;
  d_latent: number;
  kind: string;
  version: number;
  poses: PoseJson[];
}

export interface DecodeResponse {
  width: number;
  height: number;
  channels: number;
  version: number;
  image: string; // base64 P6 PPM bytes
}

export interface MutationResponse {
  name: string;
  version: number;
  warning?: string;
}

export interface RegionSpec {
  normal: [number, number];
  offset: number;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function parseError(res: Response): Promise<never> {
  let code = "unknown";
  let message = res.statusText;
  try {
    const body = await res.json();
    code = body.code ?? code;
    message = body.message ?? message;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(res.status, code, message);
}

export class EditorApi {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.fetchFn(`${this.baseUrl}${path}`);
    if (!res.ok) await parseError(res);
    return res.json() as Promise<T>;
  }

  private async postJson<T>(path: string, body: unknown): Promise<T> {
    const res = await this.fetchFn(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!res.ok) await parseError(res);
    return res.json() as Promise<T>;
  }

  health(): Promise<{ status: string; sets: number }> {
    return this.getJson("/api/health");
  }

  async listSets(): Promise<SetInfo[]> {
    const body = await this.getJson<{ sets: SetInfo[] }>("/api/sets");
    return body.sets;
  }

  decode(name: string, width: number, height: number): Promise<DecodeResponse> {
    const params = new URLSearchParams({
      set: name,
      width: String(width),
      height: String(height),
    });
    return this.getJson(`/api/decode?${params}`);
  }

  transform(name: string, g: Partial<PoseJson>): Promise<MutationResponse> {
    return this.postJson("/api/transform", { set: name, g });
  }

  moveLatent(name: string, index: number, pose: Partial<PoseJson>): Promise<MutationResponse> {
    return this.postJson("/api/edit", { set: name, op: "move_latent", index, pose });
  }

  setContext(name: string, index: number, context: number[]): Promise<MutationResponse> {
    return this.postJson("/api/edit", { set: name, op: "set_context", index, context });
  }

  stitch(name: string, other: string, region: RegionSpec): Promise<MutationResponse> {
    return this.postJson("/api/edit", { set: name, op: "stitch", other, region });
  }
}
