/** Thin typed client over the engine's review API.
 *
 * Review submissions surface conflicts instead of throwing: a 409 from
 * the server means another reviewer resolved the record first, and the
 * caller gets the resolved record back to reconcile its UI state.
 */

import type {
  AnnotationRecord,
  ErrorDistribution,
  IterationState,
  PrototypeSummary,
  QueueFilters,
  QueueResponse,
  ReviewAction,
  Stats,
} from "./types.js";

export type ReviewResult =
  | { kind: "ok"; record: AnnotationRecord }
  | { kind: "conflict"; record: AnnotationRecord }
  | { kind: "invalid"; detail: string };

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const resp = await this.fetchImpl(this.baseUrl + path);
    if (!resp.ok) {
      throw new ApiError(resp.status, `GET ${path} -> ${resp.status}`);
    }
    return (await resp.json()) as T;
  }

  async healthz(): Promise<{ status: string; version: string }> {
    return this.getJson("/healthz");
  }

  async queue(filters: QueueFilters = {}, cursor = 0, limit = 100): Promise<QueueResponse> {
    const params = new URLSearchParams();
    params.set("cursor", String(cursor));
    params.set("limit", String(limit));
    if (filters.modality) params.set("modality", filters.modality);
    if (filters.iteration !== undefined) params.set("iteration", String(filters.iteration));
    if (filters.route) params.set("route", filters.route);
    return this.getJson(`/api/queue?${params.toString()}`);
  }

  async record(recordId: string): Promise<AnnotationRecord> {
    return this.getJson(`/api/record/${encodeURIComponent(recordId)}`);
  }

  async review(
    recordId: string,
    action: ReviewAction,
    reviewer: string,
    editedText?: string,
  ): Promise<ReviewResult> {
    const body: Record<string, unknown> = { action, reviewer };
    if (editedText !== undefined) body.edited_text = editedText;
    const resp = await this.fetchImpl(`${this.baseUrl}/api/record/${encodeURIComponent(recordId)}/review`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (resp.status === 409) {
      const payload = (await resp.json()) as { record: AnnotationRecord };
      return { kind: "conflict", record: payload.record };
    }
    if (resp.status === 400 || resp.status === 422) {
      const payload = (await resp.json().catch(() => ({ detail: "invalid request" }))) as { detail?: string };
      return { kind: "invalid", detail: payload.detail ?? "invalid request" };
    }
    if (!resp.ok) {
      throw new ApiError(resp.status, `review ${recordId} -> ${resp.status}`);
    }
    return { kind: "ok", record: (await resp.json()) as AnnotationRecord };
  }

  async stats(iteration?: number): Promise<Stats> {
    const suffix = iteration === undefined ? "" : `?iteration=${iteration}`;
    return this.getJson(`/api/stats${suffix}`);
  }

  async errorDistribution(): Promise<ErrorDistribution> {
    return this.getJson("/api/error-distribution");
  }

  async iteration(): Promise<IterationState> {
    return this.getJson("/api/iteration");
  }

  async prototypes(): Promise<PrototypeSummary> {
    return this.getJson("/api/prototypes");
  }
}
