/** Thin typed client over the inspection HTTP API.
 *
 * The UI never computes saliency or similarity itself; every number shown
 * comes from one of these calls. `fetch` is injectable for tests.
 */

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface MapMeta {
  kind: string;
  source_id: string;
  counterpart_id: string;
  point: [number, number] | null;
  coarse_cell: [number, number] | null;
  degenerate: boolean;
  similarity: number | null;
}

export interface MapPayload {
  png_base64: string;
  meta: MapMeta;
}

export interface CurveDto {
  fractions: number[];
  similarities: number[];
  auc: number;
  mode: string;
  ordering: string;
}

export interface ScoreResponse {
  snippet_id: string;
  s_del: number;
  r_del: number;
  s_ins: number;
  r_ins: number;
  curves: {
    s_del: CurveDto;
    s_ins: CurveDto;
    r_del: CurveDto[];
    r_ins: CurveDto[];
  };
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

async function post<T>(fetchImpl: FetchLike, base: string, path: string, body: unknown): Promise<T> {
  const res = await fetchImpl(base + path, {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify(body),
  });
  const payload = await res.json();
  if (!res.ok) {
    throw new ApiError(res.status, payload?.error ?? `HTTP ${res.status}`);
  }
  return payload as T;
}

export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  async listModels(): Promise<{ models: { name: string }[] }> {
    const res = await this.fetchImpl(this.base + "/api/models");
    return res.json();
  }

  pointMap(model: string, q: string, r: string, row: number, col: number): Promise<MapPayload> {
    return post(this.fetchImpl, this.base, "/api/saliency/point", { model, q, r, row, col });
  }

  pixelwiseMap(model: string, snippet: string): Promise<MapPayload> {
    return post(this.fetchImpl, this.base, "/api/saliency/pixelwise", { model, snippet });
  }

  overallMaps(model: string, q: string, r: string): Promise<{ q: MapPayload; r: MapPayload; similarity: number }> {
    return post(this.fetchImpl, this.base, "/api/saliency/overall", { model, q, r });
  }

  score(model: string, snippet: string, technique: string): Promise<ScoreResponse> {
    return post(this.fetchImpl, this.base, "/api/score", { model, snippet, technique });
  }
}

/**
 * At most one live request per interaction kind: responses that arrive
 * after a newer request of the same kind was issued are discarded.
 */
export class SequenceGate {
  private seq = new Map<string, number>();

  async run<T>(kind: string, task: () => Promise<T>): Promise<T | null> {
    const ticket = (this.seq.get(kind) ?? 0) + 1;
    this.seq.set(kind, ticket);
    const result = await task();
    if (this.seq.get(kind) !== ticket) {
      return null; // superseded while in flight
    }
    return result;
  }
}
