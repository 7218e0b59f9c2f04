/**
 * Typed client for the segmentation service.
 *
 * The query response is kept as raw text alongside the parsed value: the
 * export feature must reproduce the server body byte for byte, so no
 * re-serialization is ever allowed.
 */

export interface ObjectInfo {
  id: string;
  category: string;
  n_points: number;
}

export interface ObjectPoints {
  positions: number[][];
  colors: number[][];
}

export interface QueryResult {
  queries: string[];
  scores: number[][];
  assignment: number[];
  max_score: number[];
}

export interface QueryResponse {
  raw: string;
  result: QueryResult;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function errorDetail(resp: Response): Promise<string> {
  try {
    const body = (await resp.json()) as { detail?: string };
    return body.detail ?? resp.statusText;
  } catch {
    return resp.statusText;
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  async listObjects(): Promise<ObjectInfo[]> {
    const resp = await this.fetchFn(`${this.baseUrl}/objects`);
    if (!resp.ok) throw new ApiError(resp.status, await errorDetail(resp));
    return (await resp.json()) as ObjectInfo[];
  }

  async getPoints(id: string): Promise<ObjectPoints> {
    const resp = await this.fetchFn(`${this.baseUrl}/objects/${encodeURIComponent(id)}/points`);
    if (!resp.ok) throw new ApiError(resp.status, await errorDetail(resp));
    return (await resp.json()) as ObjectPoints;
  }

  async query(id: string, queries: string[]): Promise<QueryResponse> {
    const resp = await this.fetchFn(`${this.baseUrl}/objects/${encodeURIComponent(id)}/query`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ queries }),
    });
    if (!resp.ok) throw new ApiError(resp.status, await errorDetail(resp));
    const raw = await resp.text();
    return { raw, result: JSON.parse(raw) as QueryResult };
  }
}
