/**
 * Viewer session state: the loaded object, query history, the current result
 * and the display mode. All semantics come from the service; this module
 * only decides colors from the cached response and never recomputes scores.
 */

import { ApiClient, QueryResponse } from "./api.js";
import { colorsForAssignment, colorsForHeatmap, RGB } from "./palette.js";

export type DisplayMode = { kind: "argmax" } | { kind: "heatmap"; queryIndex: number };

export interface HistoryStore {
  load(objectId: string): string[][];
  save(objectId: string, history: string[][]): void;
}

export class MemoryHistoryStore implements HistoryStore {
  private data = new Map<string, string[][]>();

  load(objectId: string): string[][] {
    return this.data.get(objectId) ?? [];
  }

  save(objectId: string, history: string[][]): void {
    this.data.set(objectId, history);
  }
}

/** Browser store: query history persists per object in localStorage. */
export class LocalHistoryStore implements HistoryStore {
  constructor(private prefix = "find3d.history.") {}

  load(objectId: string): string[][] {
    try {
      const raw = localStorage.getItem(this.prefix + objectId);
      return raw ? (JSON.parse(raw) as string[][]) : [];
    } catch {
      return [];
    }
  }

  save(objectId: string, history: string[][]): void {
    try {
      localStorage.setItem(this.prefix + objectId, JSON.stringify(history));
    } catch {
      // storage may be unavailable; history is a convenience only
    }
  }
}

export class ViewerSession {
  objectId: string | null = null;
  history: string[][] = [];
  current: QueryResponse | null = null;
  mode: DisplayMode = { kind: "argmax" };
  pending = false;

  constructor(
    private api: ApiClient,
    private store: HistoryStore = new MemoryHistoryStore(),
  ) {}

  selectObject(id: string): void {
    this.objectId = id;
    this.current = null;
    this.mode = { kind: "argmax" };
    this.history = this.store.load(id);
  }

  /** Submit is allowed only with a selected object, non-empty queries, and no request in flight. */
  canSubmit(queries: string[]): boolean {
    return (
      this.objectId !== null &&
      !this.pending &&
      queries.length > 0 &&
      queries.every((q) => q.trim().length > 0)
    );
  }

  async submitQueries(queries: string[]): Promise<QueryResponse> {
    if (!this.canSubmit(queries)) {
      throw new Error("cannot submit: no object, empty queries, or request in flight");
    }
    this.pending = true;
    try {
      const response = await this.api.query(this.objectId as string, queries);
      this.current = response;
      this.history = [...this.history, [...queries]];
      this.store.save(this.objectId as string, this.history);
      if (this.mode.kind === "heatmap" && this.mode.queryIndex >= queries.length) {
        this.mode = { kind: "heatmap", queryIndex: 0 };
      }
      return response;
    } finally {
      this.pending = false;
    }
  }

  setMode(mode: DisplayMode): void {
    if (mode.kind === "heatmap") {
      const n = this.current?.result.queries.length ?? 0;
      if (mode.queryIndex < 0 || mode.queryIndex >= n) {
        throw new Error(`heatmap query index ${mode.queryIndex} out of range`);
      }
    }
    this.mode = mode;
  }

  /** Point colors for the current mode, straight from the cached response. */
  pointColors(): RGB[] | null {
    if (!this.current) return null;
    const { assignment, scores } = this.current.result;
    if (this.mode.kind === "argmax") return colorsForAssignment(assignment);
    return colorsForHeatmap(scores, this.mode.queryIndex);
  }

  get canExport(): boolean {
    return this.current !== null;
  }

  /** The server response body, byte for byte. */
  exportView(): string {
    if (!this.current) throw new Error("nothing to export: no query result");
    return this.current.raw;
  }

  /** Load a previously exported result; display must match what was saved. */
  importView(raw: string): void {
    this.current = { raw, result: JSON.parse(raw) };
  }
}
